//! Scratch harness for calibrating head-training budgets: trains head
//! variants at a given epoch budget across seeds and reports acceptance
//! metrics per cell.
//!
//! Usage: trend_probe <epochs> <seeds> [cells...]
//! Cells look like medusa-k1-aloff; default covers the trend comparisons.

use specdec::adversarial::{Discriminator, DiscriminatorConfig, Trainer};
use specdec::config::RunConfig;
use specdec::corpus::{Corpus, DistillSet};
use specdec::engine::spec_decode;
use specdec::heads::{DraftHead, HeadKind};
use specdec::metrics::{acceptance_rate, avg_acceptance_length};
use specdec::rng::{component_rng, derive_seed, seeded};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map(|s| s.parse().unwrap()).unwrap_or(12);
    let n_seeds: u64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(3);
    let default_cells = [
        "medusa-k1-aloff",
        "medusa-k2-aloff",
        "medusa-k3-aloff",
        "eagle-k1-aloff",
        "eagle-k2-aloff",
        "eagle-k3-aloff",
        "medusa-k1-alon",
        "eagle-k1-alon",
    ];
    let cells: Vec<String> = if args.len() > 2 {
        args[2..].to_vec()
    } else {
        default_cells.iter().map(|s| s.to_string()).collect()
    };

    let cfg = RunConfig::load(std::path::Path::new("configs/desk.json")).unwrap();
    let target = specdec::checkpoint::load_target(&cfg.target_ckpt()).unwrap();
    let corpus = Corpus::load_dir(&cfg.paths.corpus_dir).unwrap();
    let set = DistillSet::build(
        &target,
        &corpus,
        cfg.distill.num_windows,
        cfg.distill.window_len,
        &mut component_rng(cfg.seed, "distill-windows"),
    )
    .unwrap();
    let prompts: Vec<Vec<u8>> =
        cfg.load_prompts().unwrap().iter().map(|p| p.as_bytes().to_vec()).collect();

    println!("epochs={epochs} seeds={n_seeds} prompts={} max_new={}", prompts.len(), cfg.bench.max_new);
    println!("{:<18} {:>4}  {:>6} {:>6} {:>6} {:>6}  {:>7}", "cell", "seed", "ell", "a1", "a2", "a3", "mins");

    for cell in &cells {
        let parts: Vec<&str> = cell.split('-').collect();
        let kind: HeadKind = parts[0].parse().unwrap();
        let k: usize = parts[1][1..].parse().unwrap();
        let adversarial = parts[2] == "alon";

        let mut ells = Vec::new();
        for seed_offset in 0..n_seeds {
            let t0 = Instant::now();
            let mut settings = cfg.head.clone();
            settings.kind = kind;
            settings.k = k;
            let head_cfg = settings.to_head_config(&cfg.target);
            let mut head = DraftHead::init_from_target(head_cfg.clone(), &target).unwrap();
            let mut train_cfg =
                if adversarial { cfg.train.clone() } else { cfg.train.clone().without_adversarial() };
            train_cfg.max_epochs = epochs;
            let mut disc = adversarial.then(|| {
                Discriminator::new(
                    DiscriminatorConfig::for_head(&head_cfg),
                    &mut seeded(derive_seed(cfg.seed, &format!("disc/{cell}/s{seed_offset}"))),
                )
                .unwrap()
            });
            let trainer_seed = derive_seed(cfg.seed, &format!("train/{cell}/s{seed_offset}"));
            let mut trainer = Trainer::new(&set, train_cfg, trainer_seed).unwrap();
            trainer.train_until_equilibrium(&mut head, disc.as_mut()).unwrap();

            let mut traces = Vec::new();
            for (pi, prompt) in prompts.iter().enumerate() {
                let seed = derive_seed(cfg.seed, &format!("probe/{cell}/s{seed_offset}/p{pi}"));
                let (_, trace) =
                    spec_decode(&target, &head, prompt, cfg.bench.max_new, 0.0, &mut seeded(seed))
                        .unwrap();
                traces.push(trace);
            }
            let ell = avg_acceptance_length(&traces).unwrap();
            let a: Vec<String> = (1..=3)
                .map(|n| {
                    acceptance_rate(&traces, n)
                        .map(|v| format!("{v:.3}"))
                        .unwrap_or_else(|| "-".into())
                })
                .collect();
            println!(
                "{:<18} {:>4}  {:>6.3} {:>6} {:>6} {:>6}  {:>7.2}",
                cell,
                seed_offset,
                ell,
                a[0],
                a[1],
                a[2],
                t0.elapsed().as_secs_f64() / 60.0
            );
            ells.push(ell);
        }
        let mean = ells.iter().sum::<f64>() / ells.len() as f64;
        let std = if ells.len() > 1 {
            (ells.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (ells.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        println!("{:<18} mean  {mean:>6.3} +/- {std:.4}", cell);
    }
}
