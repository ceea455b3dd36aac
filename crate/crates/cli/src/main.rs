//! `moe-embed`: command-line surface for the embedding pipeline. One
//! subcommand per stage plus data curation, embedding, evaluation, and the
//! dense-vs-MoE sweep. JSON configs are the source of truth; flags override
//! config keys. Exit codes: 0 success, 1 validation error, 2 runtime
//! failure.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use moe_embed::ablate::{
    run_mining_ablation, run_scaling_ablation, MiningAblationSpec, ScalingSpec,
};
use moe_embed::datapipe::{
    filter_corpus, mine_hard_negatives, mine_topk_unfiltered, read_language_counts, read_pairs,
    write_pairs, Embedder, HashEmbedder, MiningConfig, ModelEmbedder, PairRecord,
};
use moe_embed::encoder::checkpoint::{load_model, save_model};
use moe_embed::encoder::{EncoderConfig, EncoderModel, Role, Vocab};
use moe_embed::error::Error;
use moe_embed::eval::{load_task, ndcg_at_k, retrieve, save_run, truncate_unit_rows};
use moe_embed::moe::{alternate_from_second, parameter_counts, upcycle};
use moe_embed::synth::SynthSpec;
use moe_embed::trainer::{run_stage, Stage, StageData, TrainConfig};

#[derive(Parser)]
#[command(name = "moe-embed", version, about = "Sparse MoE text embedding pipeline")]
struct Cli {
    /// JSON run configuration; flags override config keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides out_dir from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Query,
    Document,
}

impl From<RoleArg> for Role {
    fn from(r: RoleArg) -> Role {
        match r {
            RoleArg::Query => Role::Query,
            RoleArg::Document => Role::Document,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Masked-language-model adaptation on raw texts.
    Mlm {
        /// JSONL of {"text", "language"?} rows; overrides data.mlm_texts.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Replicate dense MLP layers into experts behind a fresh router.
    Upcycle {
        /// Input checkpoint; overrides data.model.
        #[arg(long)]
        model: Option<PathBuf>,
        /// "alternate-from-second" or a comma-separated layer list.
        #[arg(long, default_value = "alternate-from-second")]
        layers: String,
        #[arg(long, default_value_t = 8)]
        experts: usize,
        #[arg(long, default_value_t = 2)]
        topk: usize,
        /// Stddev of symmetry-breaking router noise (0 keeps routing uniform).
        #[arg(long, default_value_t = 0.0)]
        router_noise: f64,
    },
    /// Contrastive pretraining on (query, document) pairs.
    Pretrain {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Pairs JSONL; overrides data.pairs.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Margin-based hard-negative mining over a pair corpus.
    Mine {
        #[arg(long)]
        input: Option<PathBuf>,
        /// "hash" (default) or a checkpoint path.
        #[arg(long)]
        teacher: Option<String>,
        /// A margin in (0, 1], or "none" for unfiltered top-k.
        #[arg(long, default_value = "0.95")]
        margin: String,
        #[arg(long, default_value_t = 10)]
        negatives: usize,
    },
    /// Consistency-filter a pair corpus shard by shard.
    Filter {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<String>,
        #[arg(long, default_value_t = 2)]
        top_k: usize,
        #[arg(long, default_value_t = 1000)]
        shard_size: usize,
    },
    /// Contrastive finetuning with mined hard negatives.
    Finetune {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Embed texts to JSONL {id, vector}.
    Embed {
        #[arg(long)]
        model: Option<PathBuf>,
        /// JSONL of {"id", "text"} rows.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum)]
        role: RoleArg,
        /// Matryoshka dimension; defaults to the full width.
        #[arg(long)]
        dim: Option<usize>,
    },
    /// Retrieval evaluation: nDCG@k over a task directory.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Directory with queries.jsonl, corpus.jsonl, qrels.jsonl.
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Dense-vs-MoE scaling sweep (and optionally the mining ablation).
    Ablate {
        /// Full-scale sweep (batch sizes 64/256/1024, 3 seeds); the default
        /// is a reduced grid.
        #[arg(long)]
        full: bool,
        /// Also run the margin-vs-unfiltered mining comparison.
        #[arg(long)]
        mining: bool,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    encoder: Option<EncoderConfig>,
    train: Option<TrainConfig>,
    #[serde(default)]
    data: DataPaths,
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataPaths {
    pairs: Option<PathBuf>,
    mlm_texts: Option<PathBuf>,
    language_counts: Option<PathBuf>,
    model: Option<PathBuf>,
    task_dir: Option<PathBuf>,
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self, Error> {
        let file = File::open(path)?;
        let mut config: RunConfig = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(v) = p.as_mut() {
                if v.is_relative() {
                    *v = base.join(&v);
                }
            }
        };
        resolve(&mut config.data.pairs);
        resolve(&mut config.data.mlm_texts);
        resolve(&mut config.data.language_counts);
        resolve(&mut config.data.model);
        resolve(&mut config.data.task_dir);
        resolve(&mut config.out_dir);
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Input(_) | Error::Dimension(_) | Error::Json(_) => {
                    ExitCode::from(1)
                }
                _ => ExitCode::from(2),
            }
        }
    }
}

struct Ctx {
    config: RunConfig,
    seed: u64,
    out_dir: PathBuf,
}

impl Ctx {
    fn model_path(&self, flag: &Option<PathBuf>) -> Result<PathBuf, Error> {
        flag.clone()
            .or_else(|| self.config.data.model.clone())
            .ok_or_else(|| Error::Config("no model checkpoint: pass --model or data.model".into()))
    }

    fn pairs_path(&self, flag: &Option<PathBuf>) -> Result<PathBuf, Error> {
        flag.clone()
            .or_else(|| self.config.data.pairs.clone())
            .ok_or_else(|| Error::Config("no pair corpus: pass --input or data.pairs".into()))
    }

    fn train_config(&self, stage: Stage) -> TrainConfig {
        let mut tc = match &self.config.train {
            Some(t) => t.clone(),
            None => match stage {
                Stage::Mlm => TrainConfig::mlm_desk(self.seed),
                Stage::ContrastivePretrain => TrainConfig::pretrain_desk(self.seed),
                Stage::ContrastiveFinetune => TrainConfig::finetune_desk(self.seed),
            },
        };
        tc.stage = stage;
        tc.seed = self.seed;
        tc
    }

}

fn run(cli: Cli) -> Result<(), Error> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = cli.seed.or(config.train.as_ref().map(|t| t.seed)).unwrap_or(0);
    let out_dir = cli
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let ctx = Ctx { config, seed, out_dir };
    std::fs::create_dir_all(&ctx.out_dir)?;

    match cli.cmd {
        Cmd::Mlm { input } => cmd_mlm(&ctx, input),
        Cmd::Upcycle { model, layers, experts, topk, router_noise } => {
            cmd_upcycle(&ctx, model, &layers, experts, topk, router_noise)
        }
        Cmd::Pretrain { model, input } => cmd_pretrain(&ctx, model, input),
        Cmd::Mine { input, teacher, margin, negatives } => {
            cmd_mine(&ctx, input, teacher, &margin, negatives)
        }
        Cmd::Filter { input, teacher, top_k, shard_size } => {
            cmd_filter(&ctx, input, teacher, top_k, shard_size)
        }
        Cmd::Finetune { model, input } => cmd_finetune(&ctx, model, input),
        Cmd::Embed { model, input, role, dim } => cmd_embed(&ctx, model, &input, role.into(), dim),
        Cmd::Eval { model, task, dim, k } => cmd_eval(&ctx, model, task, dim, k),
        Cmd::Ablate { full, mining } => cmd_ablate(&ctx, full, mining),
    }
}

#[derive(Deserialize)]
struct TextRow {
    #[serde(default)]
    id: Option<String>,
    text: String,
    #[serde(default)]
    language: Option<String>,
}

fn read_text_rows(path: &Path) -> Result<Vec<TextRow>, Error> {
    let file = File::open(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: TextRow = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Input(format!("{} contains no rows", path.display())));
    }
    Ok(rows)
}

fn encoder_config_with_vocab(ctx: &Ctx, vocab: &Vocab) -> EncoderConfig {
    let mut enc = ctx
        .config
        .encoder
        .clone()
        .unwrap_or_else(|| EncoderConfig::desk_default(vocab.len()));
    enc.vocab_size = vocab.len();
    enc
}

fn init_fresh_model(ctx: &Ctx, texts: &[String]) -> Result<EncoderModel, Error> {
    let cap = ctx.config.encoder.as_ref().map_or(2048, |e| e.vocab_size);
    let vocab = Vocab::build(texts.iter().map(String::as_str), cap)?;
    let enc = encoder_config_with_vocab(ctx, &vocab);
    let mut rng = seeded_rng(ctx.seed);
    EncoderModel::init(enc, vocab, &mut rng)
}

fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

fn load_or_init(ctx: &Ctx, flag: &Option<PathBuf>, texts: &[String]) -> Result<EncoderModel, Error> {
    match flag.clone().or_else(|| ctx.config.data.model.clone()) {
        Some(path) => load_model(&path),
        None => init_fresh_model(ctx, texts),
    }
}

fn group_pairs(records: Vec<PairRecord>) -> BTreeMap<String, Vec<PairRecord>> {
    let mut map: BTreeMap<String, Vec<PairRecord>> = BTreeMap::new();
    for r in records {
        map.entry(r.dataset.clone()).or_default().push(r);
    }
    map
}

fn cmd_mlm(ctx: &Ctx, input: Option<PathBuf>) -> Result<(), Error> {
    let path = input
        .or_else(|| ctx.config.data.mlm_texts.clone())
        .ok_or_else(|| Error::Config("no MLM corpus: pass --input or data.mlm_texts".into()))?;
    let rows = read_text_rows(&path)?;
    let texts: Vec<String> = rows.iter().map(|r| r.text.clone()).collect();
    let mut by_language: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in rows {
        by_language
            .entry(r.language.unwrap_or_else(|| "und".into()))
            .or_default()
            .push(r.text);
    }
    // An explicit language distribution overrides corpus-derived counts for
    // documentation purposes only; sampling still needs the texts per tag.
    if let Some(lc) = &ctx.config.data.language_counts {
        let counts = read_language_counts(lc)?;
        println!("language distribution config: {} languages", counts.len());
    }

    let model = load_or_init(ctx, &None, &texts)?;
    let config = ctx.train_config(Stage::Mlm);
    let (trained, metrics) =
        run_stage(&config, &StageData::Mlm(by_language), model, Some(&ctx.out_dir))?;
    save_model(&ctx.out_dir.join("model.bin"), &trained)?;
    println!(
        "mlm: {} steps, final loss {:.4}, model written to {}",
        metrics.len(),
        metrics.last().map_or(f64::NAN, |m| m.loss),
        ctx.out_dir.join("model.bin").display()
    );
    Ok(())
}

fn parse_layers(spec: &str, num_layers: usize) -> Result<Vec<usize>, Error> {
    if spec == "alternate-from-second" {
        return Ok(alternate_from_second(num_layers));
    }
    spec.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad layer index '{s}' in --layers")))
        })
        .collect()
}

fn cmd_upcycle(
    ctx: &Ctx,
    model: Option<PathBuf>,
    layers: &str,
    experts: usize,
    topk: usize,
    router_noise: f64,
) -> Result<(), Error> {
    let path = ctx.model_path(&model)?;
    let dense = load_model(&path)?;
    let indices = parse_layers(layers, dense.config.num_layers)?;
    let moe = upcycle(&dense, &indices, experts, topk, router_noise, ctx.seed)?;
    let counts = parameter_counts(&moe);
    let out = ctx.out_dir.join("model.bin");
    save_model(&out, &moe)?;
    println!(
        "upcycled layers {:?} into {experts} experts (top-{topk}); \
         total params {}, active {}; written to {}",
        indices,
        counts.total,
        counts.active,
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(ctx: &Ctx, model: Option<PathBuf>, input: Option<PathBuf>) -> Result<(), Error> {
    let pairs_path = ctx.pairs_path(&input)?;
    let records = read_pairs(&pairs_path)?;
    let texts: Vec<String> = records
        .iter()
        .flat_map(|r| [r.query.clone(), r.document.clone()])
        .collect();
    let model = load_or_init(ctx, &model, &texts)?;
    let config = ctx.train_config(Stage::ContrastivePretrain);
    let grouped = group_pairs(records);
    let (trained, metrics) =
        run_stage(&config, &StageData::Pairs(grouped), model, Some(&ctx.out_dir))?;
    save_model(&ctx.out_dir.join("model.bin"), &trained)?;
    println!(
        "pretrain: {} steps, final loss {:.4}, model written to {}",
        metrics.len(),
        metrics.last().map_or(f64::NAN, |m| m.loss),
        ctx.out_dir.join("model.bin").display()
    );
    Ok(())
}

fn cmd_finetune(ctx: &Ctx, model: Option<PathBuf>, input: Option<PathBuf>) -> Result<(), Error> {
    let pairs_path = ctx.pairs_path(&input)?;
    let records = read_pairs(&pairs_path)?;
    let texts: Vec<String> = records
        .iter()
        .flat_map(|r| [r.query.clone(), r.document.clone()])
        .collect();
    let model = load_or_init(ctx, &model, &texts)?;
    let config = ctx.train_config(Stage::ContrastiveFinetune);
    let grouped = group_pairs(records);
    let (trained, metrics) =
        run_stage(&config, &StageData::Pairs(grouped), model, Some(&ctx.out_dir))?;
    save_model(&ctx.out_dir.join("model.bin"), &trained)?;
    println!(
        "finetune: {} steps, final loss {:.4}, model written to {}",
        metrics.len(),
        metrics.last().map_or(f64::NAN, |m| m.loss),
        ctx.out_dir.join("model.bin").display()
    );
    Ok(())
}

fn cmd_mine(
    ctx: &Ctx,
    input: Option<PathBuf>,
    teacher: Option<String>,
    margin: &str,
    negatives: usize,
) -> Result<(), Error> {
    let pairs_path = ctx.pairs_path(&input)?;
    let mut records = read_pairs(&pairs_path)?;
    let corpus: Vec<String> = records.iter().map(|r| r.document.clone()).collect();

    let hash_teacher;
    let model_holder;
    let model_embedder;
    let embedder: &dyn Embedder = match teacher.as_deref() {
        None | Some("hash") => {
            hash_teacher = HashEmbedder::new(256);
            &hash_teacher
        }
        Some(path) => {
            model_holder = load_model(Path::new(path))?;
            model_embedder = ModelEmbedder::new(&model_holder);
            &model_embedder
        }
    };

    let margin_value: Option<f64> = match margin {
        "none" => None,
        v => Some(v.parse().map_err(|_| {
            Error::Config(format!("--margin must be a number in (0,1] or 'none', got '{v}'"))
        })?),
    };

    let mut underfull = 0usize;
    for record in records.iter_mut() {
        let outcome = match margin_value {
            Some(m) => {
                let cfg = MiningConfig {
                    margin: m,
                    num_negatives: negatives,
                    candidate_pool: corpus.len(),
                };
                mine_hard_negatives(&record.query, &record.document, &corpus, embedder, &cfg)?
            }
            None => mine_topk_unfiltered(
                &record.query,
                &record.document,
                &corpus,
                embedder,
                negatives,
            )?,
        };
        if outcome.underfull {
            underfull += 1;
        }
        record.hard_negatives = Some(outcome.negatives);
    }
    let out = ctx.out_dir.join("mined.jsonl");
    write_pairs(&out, &records)?;
    let report = serde_json::json!({
        "input_count": records.len(),
        "mined_count": records.len(),
        "underfull_count": underfull,
        "margin": margin_value,
        "num_negatives": negatives,
    });
    std::fs::write(ctx.out_dir.join("mine_report.json"), serde_json::to_vec_pretty(&report)?)?;
    println!("mined {} records ({underfull} underfull) → {}", records.len(), out.display());
    Ok(())
}

fn cmd_filter(
    ctx: &Ctx,
    input: Option<PathBuf>,
    teacher: Option<String>,
    top_k: usize,
    shard_size: usize,
) -> Result<(), Error> {
    let pairs_path = ctx.pairs_path(&input)?;
    let records = read_pairs(&pairs_path)?;

    let hash_teacher;
    let model_holder;
    let model_embedder;
    let embedder: &dyn Embedder = match teacher.as_deref() {
        None | Some("hash") => {
            hash_teacher = HashEmbedder::new(256);
            &hash_teacher
        }
        Some(path) => {
            model_holder = load_model(Path::new(path))?;
            model_embedder = ModelEmbedder::new(&model_holder);
            &model_embedder
        }
    };

    let (retained, report) = filter_corpus(records, shard_size, embedder, top_k)?;
    let out = ctx.out_dir.join("filtered.jsonl");
    write_pairs(&out, &retained)?;
    std::fs::write(
        ctx.out_dir.join("filter_report.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    println!(
        "retained {}/{} pairs → {}",
        report.retained_count,
        report.input_count,
        out.display()
    );
    Ok(())
}

fn cmd_embed(
    ctx: &Ctx,
    model: Option<PathBuf>,
    input: &Path,
    role: Role,
    dim: Option<usize>,
) -> Result<(), Error> {
    let path = ctx.model_path(&model)?;
    let model = load_model(&path)?;
    let rows = read_text_rows(input)?;
    let texts: Vec<String> = rows.iter().map(|r| r.text.clone()).collect();
    let dim = dim.unwrap_or(model.config.hidden_dim);
    if !model.config.output_dims.contains(&dim) {
        return Err(Error::Config(format!(
            "dimension {dim} not in output_dims {:?}",
            model.config.output_dims
        )));
    }
    let embedder = ModelEmbedder::new(&model);
    let emb = truncate_unit_rows(&embedder.embed(&texts, role)?, dim)?;
    let out = ctx.out_dir.join("embeddings.jsonl");
    let mut w = BufWriter::new(File::create(&out)?);
    for (i, row) in rows.iter().enumerate() {
        let id = row.id.clone().unwrap_or_else(|| i.to_string());
        let line = serde_json::json!({"id": id, "vector": emb.row(i)});
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    println!("embedded {} texts at dim {dim} → {}", texts.len(), out.display());
    Ok(())
}

fn cmd_eval(
    ctx: &Ctx,
    model: Option<PathBuf>,
    task: Option<PathBuf>,
    dim: Option<usize>,
    k: usize,
) -> Result<(), Error> {
    let model_path = ctx.model_path(&model)?;
    let model = load_model(&model_path)?;
    let task_dir = task
        .or_else(|| ctx.config.data.task_dir.clone())
        .ok_or_else(|| Error::Config("no task: pass --task or data.task_dir".into()))?;
    let task = load_task(&task_dir)?;
    let dim = dim.unwrap_or(model.config.hidden_dim);
    let embedder = ModelEmbedder::new(&model);
    let run = retrieve(&embedder, &task, dim, k)?;
    let ndcg = ndcg_at_k(&run, &task.qrels, k)?;
    save_run(&ctx.out_dir.join("run.jsonl"), &run)?;
    println!("nDCG@{k} = {ndcg:.4} ({} queries, dim {dim})", task.queries.len());
    Ok(())
}

fn cmd_ablate(ctx: &Ctx, full: bool, mining: bool) -> Result<(), Error> {
    let spec = if full {
        ScalingSpec::default()
    } else {
        ScalingSpec {
            corpus: SynthSpec {
                num_pairs: 1024,
                eval_pairs: 192,
                seed: ctx.seed,
                ..SynthSpec::default()
            },
            batch_sizes: vec![64, 256],
            seeds: vec![ctx.seed + 1, ctx.seed + 2],
            steps: 60,
            ..ScalingSpec::default()
        }
    };
    let outcome = run_scaling_ablation(&spec)?;
    print!("{}", outcome.report.text);
    for (name, counts) in &outcome.counts {
        println!("{name}: total {} / active {}", counts.total, counts.active);
    }
    std::fs::write(
        ctx.out_dir.join("ablation.json"),
        serde_json::to_vec_pretty(&outcome)?,
    )?;
    std::fs::write(ctx.out_dir.join("ablation.txt"), outcome.report.text.as_bytes())?;
    println!("sweep written to {}", ctx.out_dir.join("ablation.json").display());

    if mining {
        let mspec = MiningAblationSpec::default();
        let m = run_mining_ablation(&mspec)?;
        println!(
            "mining ablation: margin {:.4} vs unfiltered {:.4} (delta {:+.4})",
            m.margin_mean, m.unfiltered_mean, m.delta
        );
        std::fs::write(
            ctx.out_dir.join("mining_ablation.json"),
            serde_json::to_vec_pretty(&m)?,
        )?;
    }
    Ok(())
}
