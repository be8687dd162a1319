//! Command-line surface.
//!
//! Exit codes: 0 success, 1 verification/benchmark failure, 2 usage or
//! configuration error.

use anyhow::Context;
use clap::{Parser, Subcommand};
use specdec::adversarial::{Discriminator, DiscriminatorConfig, Trainer};
use specdec::checkpoint;
use specdec::config::RunConfig;
use specdec::corpus::{Corpus, DistillSet};
use specdec::heads::{DraftHead, HeadKind};
use specdec::metrics::{run_grid, BenchConfig, GridCell};
use specdec::rng::{component_rng, derive_seed, seeded};
use specdec::target::{train_target, TargetModel};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "specdec", version, about = "Desk-scale speculative decoding lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the byte-level target transformer on the corpus, then freeze it.
    TrainTarget {
        #[arg(long)]
        config: PathBuf,
        /// Train the deeper (12-layer) variant to `target-deep.ckpt`.
        #[arg(long)]
        deep: bool,
    },
    /// Train a draft head (and, with adversarial learning, a discriminator).
    TrainHead {
        #[arg(long)]
        config: PathBuf,
        /// Head kind: medusa or eagle.
        #[arg(long)]
        kind: String,
        /// Stacked feature-prediction layers.
        #[arg(long)]
        k: usize,
        /// on: adversarial + distillation; off: pure distillation.
        #[arg(long, default_value = "on")]
        adversarial: String,
        /// Permit K outside the shipped 1..=3 grid.
        #[arg(long)]
        allow_any_k: bool,
        /// Extra seed component for multi-seed trend runs.
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Benchmark decode performance against the vanilla baseline.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Run the full kind x K x adversarial grid.
        #[arg(long)]
        grid: bool,
        /// Run one cell, e.g. "kind=medusa,k=1,al=off".
        #[arg(long)]
        cell: Option<String>,
        /// Override the config temperature (0 or 1 in shipped recipes).
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Run the self-contained verification oracles.
    VerifyOracles,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::TrainTarget { config, deep } => cmd_train_target(&config, deep),
        Command::TrainHead { config, kind, k, adversarial, allow_any_k, seed_offset } => {
            cmd_train_head(&config, &kind, k, &adversarial, allow_any_k, seed_offset)
        }
        Command::Bench { config, grid, cell, temperature } => {
            cmd_bench(&config, grid, cell.as_deref(), temperature)
        }
        Command::VerifyOracles => cmd_verify_oracles(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn cmd_train_target(config_path: &PathBuf, deep: bool) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::load(config_path)?;
    cfg.prepare_paths()?;
    let corpus = Corpus::load_dir(&cfg.paths.corpus_dir)?;
    println!(
        "corpus: {} bytes ({} training, {} held out)",
        corpus.len(),
        corpus.train_bytes().len(),
        corpus.holdout_bytes().len()
    );

    let mut target_cfg = cfg.target.clone();
    let tag = if deep {
        target_cfg.n_layers = 12;
        "target-deep"
    } else {
        "target"
    };
    let mut model = TargetModel::new(target_cfg, &mut component_rng(cfg.seed, &format!("{tag}-init")))?;
    println!("{tag}: {} parameters, {} steps", model.param_count(), cfg.target_train.steps);

    let start = Instant::now();
    let curve = train_target(
        &mut model,
        corpus.train_bytes(),
        &cfg.target_train,
        &mut component_rng(cfg.seed, &format!("{tag}-train")),
    )?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let ckpt = cfg.paths.checkpoint_dir.join(format!("{tag}.ckpt"));
    checkpoint::save_target(&ckpt, &model)?;
    let curve_path = cfg.paths.output_dir.join(format!("{tag}-loss-curve.csv"));
    let mut csv = String::from("step,loss\n");
    for (i, loss) in curve.iter().enumerate() {
        csv.push_str(&format!("{i},{loss:.6}\n"));
    }
    std::fs::write(&curve_path, csv)?;

    let first = curve.first().copied().unwrap_or(f32::NAN);
    let last = curve.last().copied().unwrap_or(f32::NAN);
    println!(
        "trained in {minutes:.1} min: loss {first:.3} -> {last:.3}; checkpoint {} ({})",
        ckpt.display(),
        &model.weight_hash()[..12]
    );
    println!("loss curve: {}", curve_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_train_head(
    config_path: &PathBuf,
    kind_str: &str,
    k: usize,
    adversarial_str: &str,
    allow_any_k: bool,
    seed_offset: u64,
) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::load(config_path)?;
    cfg.prepare_paths()?;
    let kind: HeadKind = kind_str.parse()?;
    let adversarial = match adversarial_str {
        "on" => true,
        "off" => false,
        other => anyhow::bail!("--adversarial must be 'on' or 'off', got '{other}'"),
    };
    if !(1..=3).contains(&k) && !allow_any_k {
        anyhow::bail!("k = {k} is outside the shipped grid 1..=3 (use --allow-any-k to override)");
    }

    let target = checkpoint::load_target(&cfg.target_ckpt())
        .with_context(|| "target checkpoint missing; run train-target first")?;
    let corpus = Corpus::load_dir(&cfg.paths.corpus_dir)?;
    let set = DistillSet::build(
        &target,
        &corpus,
        cfg.distill.num_windows,
        cfg.distill.window_len,
        &mut component_rng(cfg.seed, "distill-windows"),
    )?;

    let mut head_settings = cfg.head.clone();
    head_settings.kind = kind;
    head_settings.k = k;
    let head_cfg = head_settings.to_head_config(&cfg.target);
    head_cfg.validate()?;
    let tag = format!("{kind}-k{k}-al{}", if adversarial { "on" } else { "off" });

    let mut head = DraftHead::init_from_target(head_cfg.clone(), &target)?;
    let train_cfg = if adversarial { cfg.train.clone() } else { cfg.train.clone().without_adversarial() };
    let mut disc = if adversarial {
        Some(Discriminator::new(
            DiscriminatorConfig::for_head(&head_cfg),
            &mut component_rng(cfg.seed, &format!("disc-init/{tag}/s{seed_offset}")),
        )?)
    } else {
        None
    };

    println!(
        "training {tag} (seed offset {seed_offset}): {} trainable parameters, lambda {}",
        head_cfg.param_count(),
        train_cfg.lambda
    );
    let start = Instant::now();
    let trainer_seed = derive_seed(cfg.seed, &format!("head-train/{tag}/s{seed_offset}"));
    let mut trainer = Trainer::new(&set, train_cfg, trainer_seed)?;
    let report = trainer.train_until_equilibrium(&mut head, disc.as_mut())?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let suffix = if seed_offset == 0 { String::new() } else { format!("-s{seed_offset}") };
    let head_path = cfg.paths.checkpoint_dir.join(format!("head-{tag}{suffix}.ckpt"));
    checkpoint::save_head(&head_path, &head)?;
    if let Some(d) = &disc {
        checkpoint::save_discriminator(
            &cfg.paths.checkpoint_dir.join(format!("disc-{kind}-k{k}{suffix}.ckpt")),
            d,
        )?;
    }

    let report_path = cfg.paths.output_dir.join(format!("train-{tag}{suffix}.jsonl"));
    let mut lines = String::new();
    for epoch in &report.epochs {
        lines.push_str(&serde_json::to_string(epoch)?);
        lines.push('\n');
    }
    lines.push_str(&serde_json::to_string(&serde_json::json!({
        "stop_criterion": report.stop,
        "epochs_run": report.epochs.len(),
    }))?);
    lines.push('\n');
    std::fs::write(&report_path, lines)?;

    let last = report.epochs.last();
    println!(
        "trained in {minutes:.1} min: {} epochs, stop = {:?}, final distill {:.4}; checkpoint {}",
        report.epochs.len(),
        report.stop,
        last.map(|e| e.distill).unwrap_or(f64::NAN),
        head_path.display()
    );
    println!("report: {}", report_path.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_cell(spec: &str) -> anyhow::Result<GridCell> {
    let mut kind = None;
    let mut k = None;
    let mut al = None;
    for part in spec.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| anyhow::anyhow!("cell fields look like key=value, got '{part}'"))?;
        match key.trim() {
            "kind" => kind = Some(value.trim().parse::<HeadKind>()?),
            "k" => k = Some(value.trim().parse::<usize>()?),
            "al" => {
                al = Some(match value.trim() {
                    "on" => true,
                    "off" => false,
                    other => anyhow::bail!("al must be on/off, got '{other}'"),
                })
            }
            other => anyhow::bail!("unknown cell field '{other}'"),
        }
    }
    Ok(GridCell {
        kind: kind.ok_or_else(|| anyhow::anyhow!("cell needs kind="))?,
        k: k.ok_or_else(|| anyhow::anyhow!("cell needs k="))?,
        adversarial: al.ok_or_else(|| anyhow::anyhow!("cell needs al="))?,
    })
}

fn cmd_bench(
    config_path: &PathBuf,
    grid: bool,
    cell: Option<&str>,
    temperature: Option<f64>,
) -> anyhow::Result<ExitCode> {
    let cfg = RunConfig::load(config_path)?;
    cfg.prepare_paths()?;
    if grid == cell.is_some() {
        anyhow::bail!("pass exactly one of --grid or --cell");
    }
    let target = checkpoint::load_target(&cfg.target_ckpt())
        .with_context(|| "target checkpoint missing; run train-target first")?;

    let cells = if grid { GridCell::full_grid() } else { vec![parse_cell(cell.unwrap())?] };
    let bench = BenchConfig {
        prompts: cfg.load_prompts()?,
        max_new: cfg.bench.max_new,
        temperature: temperature.unwrap_or(cfg.bench.temperature),
        repetitions: cfg.bench.repetitions,
        seed: cfg.seed,
    };

    let mut missing = 0usize;
    let mut provider = |cell: &GridCell| -> specdec::Result<Option<DraftHead>> {
        let path = cfg.head_ckpt(cell.kind, cell.k, cell.adversarial);
        if !path.is_file() {
            missing += 1;
            return Ok(None);
        }
        checkpoint::load_head(&path).map(Some)
    };
    println!(
        "benchmarking {} cells at temperature {} ({} prompts x {} new tokens, {} reps)",
        cells.len(),
        bench.temperature,
        bench.prompts.len(),
        bench.max_new,
        bench.repetitions
    );
    let start = Instant::now();
    let report = run_grid(&target, &cells, &mut provider, &bench)?;
    let minutes = start.elapsed().as_secs_f64() / 60.0;

    let mode = if grid { "grid" } else { "cell" };
    let stem = format!("bench-{mode}-t{}", bench.temperature);
    let csv_path = cfg.paths.output_dir.join(format!("{stem}.csv"));
    let json_path = cfg.paths.output_dir.join(format!("{stem}.json"));
    let csv = specdec::metrics::grid_to_csv(&report)?;
    std::fs::write(&csv_path, &csv)?;
    std::fs::write(&json_path, serde_json::to_string_pretty(&report)?)?;

    print!("{csv}");
    println!("finished in {minutes:.1} min -> {} and {}", csv_path.display(), json_path.display());
    if missing == cells.len() {
        eprintln!("error: every requested cell is missing its checkpoint");
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify_oracles() -> anyhow::Result<ExitCode> {
    use specdec::oracle;
    let mut failed = false;

    let start = Instant::now();
    match oracle::gradcheck_all(20, 0xC0FFEE) {
        Ok(s) => println!(
            "gradcheck            pass  ({} ops x 20 cases, max err {:.2e}, {} ms)",
            s.ops_checked,
            s.max_abs_err,
            start.elapsed().as_millis()
        ),
        Err(f) => {
            println!("gradcheck            FAIL  {f}");
            failed = true;
        }
    }

    let start = Instant::now();
    match oracle::losslessness_oracle(120, 0xFACE, &|q, d, toks, rng| {
        specdec::engine::verify_stochastic(q, d, toks, rng)
    }) {
        Ok(s) => println!(
            "losslessness         pass  ({} pairs, {} paths, max marginal err {:.2e}, {} ms)",
            s.pairs,
            s.paths,
            s.max_marginal_err,
            start.elapsed().as_millis()
        ),
        Err(f) => {
            println!("losslessness         FAIL  {f}");
            failed = true;
        }
    }

    let start = Instant::now();
    {
        // self-contained fixture: small random target, deterministic prompts
        let tcfg = specdec::target::TargetConfig {
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            max_seq_len: 128,
            ff_mult: 2,
            ..specdec::target::TargetConfig::default()
        };
        let mut target = TargetModel::new(tcfg, &mut seeded(0xBEE))?;
        {
            let fresh = specdec::tensor::Tensor::randn(&[64, 256], 0.3, &mut seeded(0xBEEF));
            target.w_lm.data_mut().copy_from_slice(fresh.data());
        }
        target.freeze();
        let mut prng = seeded(0xFEED);
        let prompts: Vec<Vec<u8>> = (0..20)
            .map(|_| {
                (0..16)
                    .map(|_| {
                        use rand::Rng;
                        prng.random_range(32..127u32) as u8
                    })
                    .collect()
            })
            .collect();
        match oracle::greedy_equivalence_suite(&target, &prompts, &[1, 2, 3], 24, 0xD00D) {
            Ok(s) => println!(
                "greedy_equivalence   pass  ({} cells x {} prompts, {} tokens, {} ms)",
                s.cells,
                s.prompts,
                s.tokens_checked,
                start.elapsed().as_millis()
            ),
            Err(f) => {
                println!("greedy_equivalence   FAIL  {f}");
                failed = true;
            }
        }
    }

    let start = Instant::now();
    match oracle::loss_anchor_suite() {
        Ok(()) => println!("loss_anchors         pass  ({} ms)", start.elapsed().as_millis()),
        Err(f) => {
            println!("loss_anchors         FAIL  {f}");
            failed = true;
        }
    }

    Ok(if failed { ExitCode::from(1) } else { ExitCode::SUCCESS })
}
