//! Ablation harnesses: the dense-vs-MoE scaling sweep over batch sizes, and
//! the mining-margin comparison. Runs are independent and execute in
//! parallel; every run is fully determined by its seed.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::datapipe::{
    mine_hard_negatives, mine_topk_unfiltered, Embedder, HashEmbedder, MiningConfig,
    ModelEmbedder, PairRecord,
};
use crate::encoder::{EncoderConfig, EncoderModel, LayerKind, Vocab};
use crate::error::{Error, Result};
use crate::eval::{compare_runs, ndcg_at_k, retrieve, CompareReport, RetrievalTask, RunScore};
use crate::moe::{alternate_from_second, parameter_counts, upcycle, ParamCounts};
use crate::objectives::mix;
use crate::synth::{clustered_pairs, SynthData, SynthSpec};
use crate::trainer::{run_stage, Schedule, Stage, StageData, TrainConfig};

/// Scaling sweep setup: train (a) a small dense baseline, (b) its upcycled
/// MoE with equal active parameters (k = 1), and (c) a dense model with
/// roughly 3× the active parameters, at several batch sizes and seeds.
#[derive(Debug, Clone)]
pub struct ScalingSpec {
    pub corpus: SynthSpec,
    pub batch_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub experts: usize,
    pub top_k: usize,
    /// (hidden, mlp) for the small dense model and the large one.
    pub small_dims: (usize, usize),
    pub large_dims: (usize, usize),
    pub peak_lr: f64,
    /// Balance coefficient during sweep training. The pipeline default of 1
    /// over-regularizes desk-scale routers (the contrastive gradient through
    /// routing is tiny next to it), freezing them near uniform; a
    /// Switch-style coefficient lets experts specialize.
    pub balance_alpha: f64,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        ScalingSpec {
            corpus: SynthSpec::default(),
            batch_sizes: vec![64, 256, 1024],
            seeds: vec![1, 2, 3],
            steps: 120,
            experts: 4,
            top_k: 1,
            small_dims: (24, 48),
            large_dims: (48, 96),
            peak_lr: 2e-3,
            balance_alpha: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRun {
    pub model: String,
    pub batch_size: usize,
    pub seed: u64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingOutcome {
    pub runs: Vec<ScalingRun>,
    /// model → batch size → mean nDCG over seeds.
    pub means: BTreeMap<String, BTreeMap<usize, f64>>,
    pub counts: BTreeMap<String, ParamCounts>,
    #[serde(skip)]
    pub report: CompareReport,
}

pub const MODEL_DENSE_SMALL: &str = "dense-small";
pub const MODEL_MOE: &str = "moe-upcycled";
pub const MODEL_DENSE_LARGE: &str = "dense-large";

fn encoder_config(vocab: &Vocab, hidden: usize, mlp: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: vocab.len(),
        hidden_dim: hidden,
        num_layers: 2,
        num_heads: 4,
        mlp_dim: mlp,
        max_seq_len: 32,
        rope_base: 10_000.0,
        layer_kinds: vec![LayerKind::Dense; 2],
        output_dims: vec![hidden, 16],
    }
}

fn pretrain_config(spec: &ScalingSpec, batch_size: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        stage: Stage::ContrastivePretrain,
        batch_size,
        peak_lr: spec.peak_lr,
        warmup_steps: 10.min(spec.steps / 2),
        total_steps: Some(spec.steps),
        epochs: None,
        schedule: Schedule::Cosine,
        max_grad_norm: 1.0,
        tau: 0.02,
        alpha: spec.balance_alpha,
        max_len_query: 8,
        max_len_doc: 12,
        mrl_dims: vec![],
        hard_negatives: 0,
        grad_accum_steps: 1,
        mlm_probability: 0.3,
        language_alpha: 0.3,
        weight_decay: 0.01,
        seed,
    }
}

/// Build the three model variants for one seed. The MoE variant upcycles the
/// small dense initialization with tiny router noise to break expert
/// symmetry after the function-preserving construction.
pub fn build_variants(
    spec: &ScalingSpec,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<(String, EncoderModel)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xa));
    let small =
        EncoderModel::init(encoder_config(vocab, spec.small_dims.0, spec.small_dims.1), vocab.clone(), &mut rng)?;
    let moe = upcycle(
        &small,
        &alternate_from_second(small.config.num_layers),
        spec.experts,
        spec.top_k,
        1e-3,
        mix(seed, 0xb),
    )?;
    let mut rng_large = ChaCha8Rng::seed_from_u64(mix(seed, 0xc));
    let large = EncoderModel::init(
        encoder_config(vocab, spec.large_dims.0, spec.large_dims.1),
        vocab.clone(),
        &mut rng_large,
    )?;
    Ok(vec![
        (MODEL_DENSE_SMALL.to_string(), small),
        (MODEL_MOE.to_string(), moe),
        (MODEL_DENSE_LARGE.to_string(), large),
    ])
}

fn eval_model(model: &EncoderModel, task: &RetrievalTask) -> Result<f64> {
    let embedder = ModelEmbedder::new(model);
    let run = retrieve(&embedder, task, model.config.hidden_dim, 10)?;
    ndcg_at_k(&run, &task.qrels, 10)
}

/// Run the full sweep. Every (model, batch size, seed) cell trains from its
/// own seeded initialization on the same corpus and is scored on the same
/// held-out task.
pub fn run_scaling_ablation(spec: &ScalingSpec) -> Result<ScalingOutcome> {
    let data = clustered_pairs(&spec.corpus);
    let vocab = Vocab::build(data.all_texts.iter().map(String::as_str), 512)?;

    let counts: BTreeMap<String, ParamCounts> = build_variants(spec, &vocab, spec.seeds[0])?
        .into_iter()
        .map(|(name, model)| (name, parameter_counts(&model)))
        .collect();

    let mut cells = Vec::new();
    for &batch_size in &spec.batch_sizes {
        for &seed in &spec.seeds {
            cells.push((batch_size, seed));
        }
    }
    let runs: Result<Vec<Vec<ScalingRun>>> = cells
        .par_iter()
        .map(|&(batch_size, seed)| {
            let variants = build_variants(spec, &vocab, seed)?;
            let config = pretrain_config(spec, batch_size, mix(seed, batch_size as u64));
            variants
                .into_iter()
                .map(|(name, model)| {
                    let (trained, _) =
                        run_stage(&config, &StageData::Pairs(data.train.clone()), model, None)?;
                    let ndcg = eval_model(&trained, &data.eval_task)?;
                    Ok(ScalingRun { model: name, batch_size, seed, ndcg })
                })
                .collect()
        })
        .collect();
    let runs: Vec<ScalingRun> = runs?.into_iter().flatten().collect();

    let mut means: BTreeMap<String, BTreeMap<usize, f64>> = BTreeMap::new();
    for name in [MODEL_DENSE_SMALL, MODEL_MOE, MODEL_DENSE_LARGE] {
        for &bs in &spec.batch_sizes {
            let scores: Vec<f64> = runs
                .iter()
                .filter(|r| r.model == name && r.batch_size == bs)
                .map(|r| r.ndcg)
                .collect();
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            means.entry(name.to_string()).or_default().insert(bs, mean);
        }
    }

    let rows: Vec<RunScore> = means
        .iter()
        .flat_map(|(model, per_batch)| {
            per_batch.iter().map(move |(&bs, &ndcg)| RunScore {
                model: model.clone(),
                batch_size: bs,
                dim: 0,
                ndcg,
            })
        })
        .collect();
    let report = compare_runs(&rows);
    Ok(ScalingOutcome { runs, means, counts, report })
}

// ── mining-margin ablation ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MiningAblationSpec {
    pub corpus: SynthSpec,
    pub seeds: Vec<u64>,
    pub margin: f64,
    pub num_negatives: usize,
    pub pretrain_steps: u64,
    pub finetune_steps: u64,
    pub batch_size: usize,
}

impl Default for MiningAblationSpec {
    fn default() -> Self {
        MiningAblationSpec {
            corpus: SynthSpec {
                num_pairs: 1280,
                eval_pairs: 192,
                near_duplicates: true,
                ..SynthSpec::default()
            },
            seeds: vec![1, 2, 3],
            margin: 0.95,
            num_negatives: 4,
            pretrain_steps: 80,
            finetune_steps: 60,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MiningAblationOutcome {
    pub margin_scores: Vec<f64>,
    pub unfiltered_scores: Vec<f64>,
    pub margin_mean: f64,
    pub unfiltered_mean: f64,
    pub delta: f64,
}

/// Attach mined negatives to every record, margin-based or unfiltered
/// top-k. Records whose margin pool runs dry are dropped from both arms to
/// keep the comparison paired.
fn mined_datasets(
    data: &SynthData,
    teacher: &dyn Embedder,
    margin: f64,
    num_negatives: usize,
) -> Result<(BTreeMap<String, Vec<PairRecord>>, BTreeMap<String, Vec<PairRecord>>)> {
    let cfg = MiningConfig { margin, num_negatives, candidate_pool: data.mining_pool.len() };
    let mut margin_arm: BTreeMap<String, Vec<PairRecord>> = BTreeMap::new();
    let mut topk_arm: BTreeMap<String, Vec<PairRecord>> = BTreeMap::new();
    for (tag, records) in &data.train {
        let mined: Result<Vec<Option<(PairRecord, PairRecord)>>> = records
            .par_iter()
            .map(|record| {
                let with_margin = mine_hard_negatives(
                    &record.query,
                    &record.document,
                    &data.mining_pool,
                    teacher,
                    &cfg,
                )?;
                let unfiltered = mine_topk_unfiltered(
                    &record.query,
                    &record.document,
                    &data.mining_pool,
                    teacher,
                    num_negatives,
                )?;
                if with_margin.underfull || unfiltered.underfull {
                    return Ok(None);
                }
                let mut a = record.clone();
                a.hard_negatives = Some(with_margin.negatives);
                let mut b = record.clone();
                b.hard_negatives = Some(unfiltered.negatives);
                Ok(Some((a, b)))
            })
            .collect();
        for pair in mined?.into_iter().flatten() {
            margin_arm.entry(tag.clone()).or_default().push(pair.0);
            topk_arm.entry(tag.clone()).or_default().push(pair.1);
        }
    }
    if margin_arm.is_empty() {
        return Err(Error::Input("mining produced no usable records".into()));
    }
    Ok((margin_arm, topk_arm))
}

/// Pretrain a shared base per seed, finetune it on margin-mined vs
/// unfiltered negatives, and score both on the held-out task.
pub fn run_mining_ablation(spec: &MiningAblationSpec) -> Result<MiningAblationOutcome> {
    let data = clustered_pairs(&spec.corpus);
    let vocab = Vocab::build(data.all_texts.iter().map(String::as_str), 512)?;
    let teacher = HashEmbedder::new(256);
    let (margin_data, topk_data) =
        mined_datasets(&data, &teacher, spec.margin, spec.num_negatives)?;

    let results: Result<Vec<(f64, f64)>> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x1));
            let config = encoder_config(&vocab, 32, 64);
            let model = EncoderModel::init(config, vocab.clone(), &mut rng)?;

            let mut pre_cfg = pretrain_config(
                &ScalingSpec { peak_lr: 2e-3, ..ScalingSpec::default() },
                spec.batch_size,
                mix(seed, 0x2),
            );
            pre_cfg.total_steps = Some(spec.pretrain_steps);
            let (base, _) =
                run_stage(&pre_cfg, &StageData::Pairs(data.train.clone()), model, None)?;

            let fine_cfg = TrainConfig {
                stage: Stage::ContrastiveFinetune,
                batch_size: spec.batch_size,
                peak_lr: 5e-4,
                warmup_steps: 5,
                total_steps: Some(spec.finetune_steps),
                epochs: None,
                schedule: Schedule::Linear,
                max_grad_norm: 1.0,
                tau: 0.02,
                alpha: 1.0,
                max_len_query: 8,
                max_len_doc: 12,
                mrl_dims: vec![32, 16],
                hard_negatives: spec.num_negatives,
                grad_accum_steps: 1,
                mlm_probability: 0.3,
                language_alpha: 0.3,
                weight_decay: 0.01,
                seed: mix(seed, 0x3),
            };
            let (margin_model, _) = run_stage(
                &fine_cfg,
                &StageData::Pairs(margin_data.clone()),
                base.clone(),
                None,
            )?;
            let (topk_model, _) =
                run_stage(&fine_cfg, &StageData::Pairs(topk_data.clone()), base, None)?;
            Ok((
                eval_model(&margin_model, &data.eval_task)?,
                eval_model(&topk_model, &data.eval_task)?,
            ))
        })
        .collect();
    let results = results?;

    let margin_scores: Vec<f64> = results.iter().map(|r| r.0).collect();
    let unfiltered_scores: Vec<f64> = results.iter().map(|r| r.1).collect();
    let margin_mean = margin_scores.iter().sum::<f64>() / margin_scores.len() as f64;
    let unfiltered_mean = unfiltered_scores.iter().sum::<f64>() / unfiltered_scores.len() as f64;
    Ok(MiningAblationOutcome {
        margin_scores,
        unfiltered_scores,
        margin_mean,
        unfiltered_mean,
        delta: margin_mean - unfiltered_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_have_expected_parameter_ratios() {
        let spec = ScalingSpec::default();
        let data = clustered_pairs(&SynthSpec { num_pairs: 64, eval_pairs: 8, ..spec.corpus.clone() });
        let vocab = Vocab::build(data.all_texts.iter().map(String::as_str), 512).unwrap();
        let variants = build_variants(&spec, &vocab, 1).unwrap();
        let counts: BTreeMap<&str, ParamCounts> =
            variants.iter().map(|(n, m)| (n.as_str(), parameter_counts(m))).collect();

        let small = counts[MODEL_DENSE_SMALL];
        let moe = counts[MODEL_MOE];
        let large = counts[MODEL_DENSE_LARGE];

        // Equal active parameters: MoE adds only the router.
        let active_ratio = moe.active as f64 / small.active as f64;
        assert!(
            (1.0..1.02).contains(&active_ratio),
            "moe active/small active = {active_ratio}"
        );
        // But substantially more total capacity.
        assert!(moe.total > small.total);
        // The large dense model carries roughly 3× the active parameters.
        let large_ratio = large.active as f64 / small.active as f64;
        assert!(
            (2.4..3.6).contains(&large_ratio),
            "large active/small active = {large_ratio}"
        );
    }

    #[test]
    fn tiny_sweep_produces_full_grid() {
        let spec = ScalingSpec {
            corpus: SynthSpec { num_pairs: 256, eval_pairs: 24, ..SynthSpec::default() },
            batch_sizes: vec![16],
            seeds: vec![1],
            steps: 3,
            ..ScalingSpec::default()
        };
        let out = run_scaling_ablation(&spec).unwrap();
        assert_eq!(out.runs.len(), 3);
        assert!(out.means[MODEL_MOE].contains_key(&16));
        assert!(out.report.text.contains(MODEL_DENSE_LARGE));
        for run in &out.runs {
            assert!(run.ndcg.is_finite());
        }
    }
}
