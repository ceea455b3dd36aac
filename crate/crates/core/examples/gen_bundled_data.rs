//! Regenerates the small bundled datasets under data/ (synthetic retrieval
//! task, sample pair corpus, sample MLM corpus).

use moe_embed::datapipe::write_pairs;
use moe_embed::eval::save_task;
use moe_embed::synth::{clustered_pairs, SynthSpec};
use std::io::Write;
use std::path::Path;

fn main() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data");
    std::fs::create_dir_all(&root).unwrap();
    let spec = SynthSpec {
        num_pairs: 512,
        eval_pairs: 48,
        num_clusters: 32,
        item_tokens: 24,
        dataset_tags: 4,
        seed: 7,
        ..SynthSpec::default()
    };
    let data = clustered_pairs(&spec);

    save_task(&root.join("synth-task"), &data.eval_task).unwrap();

    let pairs: Vec<_> = data.train.values().flatten().cloned().collect();
    write_pairs(&root.join("pairs.sample.jsonl"), &pairs).unwrap();

    let mut mlm = std::fs::File::create(root.join("mlm_texts.sample.jsonl")).unwrap();
    for (i, text) in data.all_texts.iter().take(400).enumerate() {
        let lang = if i % 5 == 0 { "sw" } else { "en" };
        writeln!(
            mlm,
            "{}",
            serde_json::json!({"text": text, "language": lang})
        )
        .unwrap();
    }
    println!("bundled data written to {}", root.display());
}
