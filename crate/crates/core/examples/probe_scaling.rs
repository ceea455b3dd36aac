use moe_embed::ablate::*;
use moe_embed::synth::SynthSpec;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(120);
    let batches: Vec<usize> = args
        .get(2)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![64, 256, 1024]);
    let seeds: Vec<u64> = args
        .get(3)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![1]);
    let alpha: f64 = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let spec = ScalingSpec {
        corpus: SynthSpec::default(),
        batch_sizes: batches,
        seeds,
        steps,
        balance_alpha: alpha,
        ..ScalingSpec::default()
    };
    let t0 = Instant::now();
    let out = run_scaling_ablation(&spec).unwrap();
    println!("elapsed: {:.1}s", t0.elapsed().as_secs_f64());
    for (name, c) in &out.counts {
        println!("{name}: total={} active={}", c.total, c.active);
    }
    println!("{}", out.report.text);
    for r in &out.runs {
        println!("  {} bs={} seed={} ndcg={:.4}", r.model, r.batch_size, r.seed, r.ndcg);
    }
}
