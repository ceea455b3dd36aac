use moe_embed::ablate::*;
use moe_embed::datapipe::ModelEmbedder;
use moe_embed::encoder::{encode, Role, Vocab};
use moe_embed::eval::{ndcg_at_k, retrieve};
use moe_embed::synth::{clustered_pairs, SynthSpec};
use moe_embed::trainer::{run_stage, Schedule, Stage, StageData, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1024);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1);
    let alpha: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1.0);

    let spec = ScalingSpec::default();
    let data = clustered_pairs(&spec.corpus);
    let vocab = Vocab::build(data.all_texts.iter().map(String::as_str), 512).unwrap();
    let variants = build_variants(&spec, &vocab, seed).unwrap();

    for (name, model) in variants {
        let config = TrainConfig {
            stage: Stage::ContrastivePretrain,
            batch_size: batch,
            peak_lr: lr,
            warmup_steps: 10,
            total_steps: Some(steps),
            epochs: None,
            schedule: Schedule::Cosine,
            max_grad_norm: 1.0,
            tau: 0.02,
            alpha,
            max_len_query: 8,
            max_len_doc: 12,
            mrl_dims: vec![],
            hard_negatives: 0,
            grad_accum_steps: 1,
            mlm_probability: 0.3,
            language_alpha: 0.3,
            weight_decay: 0.01,
            seed,
        };
        let (trained, metrics) =
            run_stage(&config, &StageData::Pairs(data.train.clone()), model, None).unwrap();
        let embedder = ModelEmbedder::new(&trained);
        let run = retrieve(&embedder, &data.eval_task, trained.config.hidden_dim, 10).unwrap();
        let ndcg = ndcg_at_k(&run, &data.eval_task.qrels, 10).unwrap();
        let last_loss = metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
        println!("{name}: ndcg={ndcg:.4} last_loss={last_loss:.4}");

        // Routing-by-group diagnostic for the MoE variant: encode documents
        // from each mapping group and read per-layer expert fractions.
        if name == "moe-upcycled" {
            for g in 0..4 {
                let docs: Vec<&str> = data
                    .train
                    .values()
                    .flatten()
                    .filter(|r| r.document.starts_with(&format!("g{g} ")))
                    .take(64)
                    .map(|r| r.document.as_str())
                    .collect();
                if docs.is_empty() { continue; }
                let tb = trained.tokenize_batch(&docs, Role::Document, 12).unwrap();
                let (_, stats) = encode(&trained, &tb).unwrap();
                let r: Vec<String> = stats[0].r.iter().map(|v| format!("{v:.2}")).collect();
                println!("  group {g}: r = [{}]", r.join(", "));
            }
        }
    }
}
