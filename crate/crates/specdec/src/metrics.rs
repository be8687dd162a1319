//! Benchmark metrics: average acceptance length, per-position acceptance
//! rates, and walltime speedup over vanilla decoding.
//!
//! Timing methodology: per prompt, one warmup run is discarded, the run is
//! repeated and medians are reported; walltime varies, but acceptance
//! metrics are seed-deterministic. Speculative and vanilla runs are token-
//! budget matched (the vanilla run generates exactly as many tokens as the
//! speculative run emitted), making the speedup a pure rate ratio.

use crate::engine::{spec_decode, vanilla_decode_bench, DecodeTrace};
use crate::error::{Error, Result};
use crate::heads::{DraftHead, HeadKind};
use crate::rng::{component_rng, derive_seed};
use crate::target::TargetModel;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    /// Committed prompt set (deterministic).
    pub prompts: Vec<String>,
    pub max_new: usize,
    /// 0 (greedy) or 1 (stochastic) in shipped recipes.
    pub temperature: f64,
    /// Timed repetitions per prompt (after one discarded warmup).
    pub repetitions: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::Config("prompt set is empty".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.max_new == 0 {
            return Err(Error::Config("max_new must be >= 1".into()));
        }
        Ok(())
    }

    pub fn prompt_bytes(&self) -> Vec<Vec<u8>> {
        self.prompts.iter().map(|p| p.as_bytes().to_vec()).collect()
    }
}

// ── Trace metrics ────────────────────────────────────────────────────────

/// Average acceptance length: total emitted tokens per target forward
/// pass, pooled over traces. Vanilla decoding has ell = 1 by definition.
pub fn avg_acceptance_length(traces: &[DecodeTrace]) -> Result<f64> {
    let emitted: usize = traces.iter().map(|t| t.emitted_tokens).sum();
    let passes: usize = traces.iter().map(|t| t.target_forward_passes).sum();
    if passes == 0 {
        return Err(Error::Metrics("no target forward passes in traces".into()));
    }
    Ok(emitted as f64 / passes as f64)
}

/// Acceptance rate of chain position `n` (1-based): how often position `n`
/// was accepted when it was evaluated. Position `n` is evaluated only when
/// positions `1..n-1` were all accepted. `None` when never evaluated.
pub fn acceptance_rate(traces: &[DecodeTrace], n: usize) -> Option<f64> {
    if n == 0 {
        return None;
    }
    let mut evaluated = 0usize;
    let mut accepted = 0usize;
    for trace in traces {
        for iter in &trace.iterations {
            if iter.accept_flags.len() >= n {
                evaluated += 1;
                accepted += iter.accept_flags[n - 1] as usize;
            }
        }
    }
    (evaluated > 0).then(|| accepted as f64 / evaluated as f64)
}

// ── Speedup ──────────────────────────────────────────────────────────────

/// One prompt's timing: generated token budget and wallclock.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct PromptTiming {
    pub tokens: usize,
    pub ns: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeedupReport {
    pub pooled: f64,
    pub per_prompt: Vec<f64>,
}

/// `vanilla walltime / speculative walltime` at equal token budgets.
pub fn speedup_ratio(spec: &[PromptTiming], vanilla: &[PromptTiming]) -> Result<SpeedupReport> {
    if spec.len() != vanilla.len() {
        return Err(Error::Metrics(format!(
            "prompt count mismatch: {} spec vs {} vanilla",
            spec.len(),
            vanilla.len()
        )));
    }
    for (i, (s, v)) in spec.iter().zip(vanilla).enumerate() {
        if s.tokens != v.tokens {
            return Err(Error::Metrics(format!(
                "token budgets unequal on prompt {i}: spec {} vs vanilla {}",
                s.tokens, v.tokens
            )));
        }
    }
    let spec_total: u128 = spec.iter().map(|t| t.ns).sum();
    let vanilla_total: u128 = vanilla.iter().map(|t| t.ns).sum();
    if spec_total == 0 {
        return Err(Error::Metrics("zero speculative walltime".into()));
    }
    Ok(SpeedupReport {
        pooled: vanilla_total as f64 / spec_total as f64,
        per_prompt: spec
            .iter()
            .zip(vanilla)
            .map(|(s, v)| v.ns as f64 / s.ns.max(1) as f64)
            .collect(),
    })
}

fn median(values: &mut [u128]) -> u128 {
    values.sort_unstable();
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2
    }
}

fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (values.len() - 1) as f64;
    var.sqrt()
}

// ── Cell benchmark ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct CellMetrics {
    pub ell: f64,
    /// alpha[n-1] = acceptance rate of position n, absent if never evaluated.
    pub alpha: Vec<Option<f64>>,
    pub speedup: f64,
    pub speedup_std: f64,
    pub tokens_per_s_spec: f64,
    pub tokens_per_s_vanilla: f64,
    pub draft_overhead_fraction: f64,
    pub emitted_tokens: usize,
    pub iterations: usize,
}

/// Run one grid cell: metric pass plus timed repetitions against a
/// token-budget-matched vanilla baseline. Timed runs execute serially.
pub fn bench_cell(
    target: &TargetModel,
    head: &DraftHead,
    cfg: &BenchConfig,
    cell_tag: &str,
) -> Result<CellMetrics> {
    cfg.validate()?;
    let t = head.config().draft_len;
    let prompts = cfg.prompt_bytes();

    let mut metric_traces = Vec::with_capacity(prompts.len());
    let mut spec_timings = Vec::with_capacity(prompts.len());
    let mut vanilla_timings = Vec::with_capacity(prompts.len());
    let mut rep_spec_ns: Vec<Vec<u128>> = vec![Vec::new(); cfg.repetitions];
    let mut rep_vanilla_ns: Vec<Vec<u128>> = vec![Vec::new(); cfg.repetitions];
    let mut draft_ns_total: u128 = 0;
    let mut verify_ns_total: u128 = 0;

    for (pi, prompt) in prompts.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &format!("{cell_tag}/prompt{pi}"));

        // metric pass (also serves as warmup for the spec path)
        let (_, trace) = spec_decode(target, head, prompt, cfg.max_new, cfg.temperature, &mut crate::rng::seeded(seed))?;
        trace.check_invariants()?;
        let budget = trace.emitted_tokens;

        // timed repetitions, identical seeds so every rep does identical work
        let mut spec_ns = Vec::with_capacity(cfg.repetitions);
        for rep in 0..cfg.repetitions {
            let (_, rt) = spec_decode(target, head, prompt, cfg.max_new, cfg.temperature, &mut crate::rng::seeded(seed))?;
            spec_ns.push(rt.draft_ns_total + rt.verify_ns_total);
            rep_spec_ns[rep].push(rt.draft_ns_total + rt.verify_ns_total);
            draft_ns_total += rt.draft_ns_total;
            verify_ns_total += rt.verify_ns_total;
        }

        // vanilla at the exact same token budget (+ warmup)
        let vseed = derive_seed(seed, "vanilla");
        vanilla_decode_bench(target, prompt, budget, cfg.temperature, &mut crate::rng::seeded(vseed))?;
        let mut vanilla_ns = Vec::with_capacity(cfg.repetitions);
        for rep in 0..cfg.repetitions {
            let (_, vr) = vanilla_decode_bench(target, prompt, budget, cfg.temperature, &mut crate::rng::seeded(vseed))?;
            vanilla_ns.push(vr.total_ns);
            rep_vanilla_ns[rep].push(vr.total_ns);
        }

        spec_timings.push(PromptTiming { tokens: budget, ns: median(&mut spec_ns) });
        vanilla_timings.push(PromptTiming { tokens: budget, ns: median(&mut vanilla_ns) });
        metric_traces.push(trace);
    }

    let ell = avg_acceptance_length(&metric_traces)?;
    let alpha: Vec<Option<f64>> = (1..=t).map(|n| acceptance_rate(&metric_traces, n)).collect();
    let speedup = speedup_ratio(&spec_timings, &vanilla_timings)?;
    let per_rep_speedup: Vec<f64> = (0..cfg.repetitions)
        .map(|rep| {
            let s: u128 = rep_spec_ns[rep].iter().sum();
            let v: u128 = rep_vanilla_ns[rep].iter().sum();
            v as f64 / s.max(1) as f64
        })
        .collect();

    let total_tokens: usize = spec_timings.iter().map(|t| t.tokens).sum();
    let spec_total_ns: u128 = spec_timings.iter().map(|t| t.ns).sum();
    let vanilla_total_ns: u128 = vanilla_timings.iter().map(|t| t.ns).sum();

    Ok(CellMetrics {
        ell,
        alpha,
        speedup: speedup.pooled,
        speedup_std: std_dev(&per_rep_speedup),
        tokens_per_s_spec: total_tokens as f64 / (spec_total_ns as f64 / 1e9),
        tokens_per_s_vanilla: total_tokens as f64 / (vanilla_total_ns as f64 / 1e9),
        draft_overhead_fraction: draft_ns_total as f64 / (draft_ns_total + verify_ns_total).max(1) as f64,
        emitted_tokens: total_tokens,
        iterations: metric_traces.iter().map(|t| t.target_forward_passes).sum(),
    })
}

// ── Grid ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct GridCell {
    pub kind: HeadKind,
    pub k: usize,
    pub adversarial: bool,
}

impl GridCell {
    pub fn tag(&self) -> String {
        format!("{}-k{}-al{}", self.kind, self.k, if self.adversarial { "on" } else { "off" })
    }

    /// The shipped grid: both kinds, K in 1..=3, adversarial on/off.
    pub fn full_grid() -> Vec<GridCell> {
        let mut cells = Vec::new();
        for kind in [HeadKind::Medusa, HeadKind::Eagle] {
            for k in 1..=3 {
                for adversarial in [false, true] {
                    cells.push(GridCell { kind, k, adversarial });
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "row")]
pub enum GridRow {
    #[serde(rename = "baseline")]
    Baseline { temperature: f64, tokens_per_s: f64 },
    #[serde(rename = "cell")]
    Cell { cell: GridCell, temperature: f64, metrics: CellMetrics },
    #[serde(rename = "missing")]
    Missing { cell: GridCell, reason: String },
    #[serde(rename = "best_k")]
    BestK { kind: HeadKind, adversarial: bool, best_k: usize, temperature: f64, metrics: CellMetrics },
}

#[derive(Debug, Clone, Serialize)]
pub struct GridReport {
    pub temperature: f64,
    pub max_new: usize,
    pub repetitions: usize,
    pub seed: u64,
    pub rows: Vec<GridRow>,
}

/// Run every grid cell whose head the provider can supply; missing cells
/// are marked and skipped. Appends a vanilla baseline row and one best-K
/// row per (kind, adversarial) group.
pub fn run_grid(
    target: &TargetModel,
    cells: &[GridCell],
    provider: &mut dyn FnMut(&GridCell) -> Result<Option<DraftHead>>,
    cfg: &BenchConfig,
) -> Result<GridReport> {
    cfg.validate()?;
    let mut rows = Vec::new();

    // vanilla baseline: budget-matched against itself (ell = 1, speedup = 1)
    let prompts = cfg.prompt_bytes();
    let mut baseline_ns: u128 = 0;
    let mut baseline_tokens = 0usize;
    for (pi, prompt) in prompts.iter().enumerate() {
        let seed = derive_seed(cfg.seed, &format!("baseline/prompt{pi}"));
        vanilla_decode_bench(target, prompt, cfg.max_new, cfg.temperature, &mut crate::rng::seeded(seed))?;
        let mut ns = Vec::with_capacity(cfg.repetitions);
        for _ in 0..cfg.repetitions {
            let (_, vr) = vanilla_decode_bench(target, prompt, cfg.max_new, cfg.temperature, &mut crate::rng::seeded(seed))?;
            ns.push(vr.total_ns);
        }
        baseline_ns += median(&mut ns);
        baseline_tokens += cfg.max_new;
    }
    rows.push(GridRow::Baseline {
        temperature: cfg.temperature,
        tokens_per_s: baseline_tokens as f64 / (baseline_ns as f64 / 1e9),
    });

    let mut best: std::collections::HashMap<(HeadKind, bool), (usize, CellMetrics)> =
        std::collections::HashMap::new();
    for cell in cells {
        match provider(cell)? {
            Some(head) => {
                let metrics = bench_cell(target, &head, cfg, &cell.tag())?;
                match best.get(&(cell.kind, cell.adversarial)) {
                    Some((_, cur)) if cur.speedup >= metrics.speedup => {}
                    _ => {
                        best.insert((cell.kind, cell.adversarial), (cell.k, metrics.clone()));
                    }
                }
                rows.push(GridRow::Cell { cell: *cell, temperature: cfg.temperature, metrics });
            }
            None => {
                rows.push(GridRow::Missing {
                    cell: *cell,
                    reason: "checkpoint not found".into(),
                });
            }
        }
    }

    let mut best_rows: Vec<_> = best.into_iter().collect();
    best_rows.sort_by_key(|((kind, al), _)| (format!("{kind}"), *al));
    for ((kind, adversarial), (best_k, metrics)) in best_rows {
        rows.push(GridRow::BestK { kind, adversarial, best_k, temperature: cfg.temperature, metrics });
    }

    Ok(GridReport {
        temperature: cfg.temperature,
        max_new: cfg.max_new,
        repetitions: cfg.repetitions,
        seed: cfg.seed,
        rows,
    })
}

/// CSV rendering of a grid report. Columns are documented in
/// `docs/formats.md`.
pub fn grid_to_csv(report: &GridReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "kind",
        "k",
        "adversarial",
        "temperature",
        "ell",
        "alpha1",
        "alpha2",
        "alpha3",
        "speedup",
        "speedup_std",
        "draft_overhead_fraction",
        "tokens_per_s_spec",
        "tokens_per_s_vanilla",
        "status",
    ])
    .map_err(|e| Error::Metrics(e.to_string()))?;

    let fmt_alpha = |alpha: &Vec<Option<f64>>, n: usize| -> String {
        alpha
            .get(n)
            .and_then(|o| o.as_ref())
            .map(|v| format!("{v:.6}"))
            .unwrap_or_else(|| "absent".into())
    };
    for row in &report.rows {
        let record: Vec<String> = match row {
            GridRow::Baseline { temperature, tokens_per_s } => vec![
                "vanilla".into(),
                "-".into(),
                "-".into(),
                format!("{temperature}"),
                "1.000000".into(),
                "absent".into(),
                "absent".into(),
                "absent".into(),
                "1.000000".into(),
                "0.000000".into(),
                "0.000000".into(),
                format!("{tokens_per_s:.3}"),
                format!("{tokens_per_s:.3}"),
                "ok".into(),
            ],
            GridRow::Cell { cell, temperature, metrics } => vec![
                cell.kind.to_string(),
                cell.k.to_string(),
                if cell.adversarial { "on" } else { "off" }.into(),
                format!("{temperature}"),
                format!("{:.6}", metrics.ell),
                fmt_alpha(&metrics.alpha, 0),
                fmt_alpha(&metrics.alpha, 1),
                fmt_alpha(&metrics.alpha, 2),
                format!("{:.6}", metrics.speedup),
                format!("{:.6}", metrics.speedup_std),
                format!("{:.6}", metrics.draft_overhead_fraction),
                format!("{:.3}", metrics.tokens_per_s_spec),
                format!("{:.3}", metrics.tokens_per_s_vanilla),
                "ok".into(),
            ],
            GridRow::Missing { cell, reason } => vec![
                cell.kind.to_string(),
                cell.k.to_string(),
                if cell.adversarial { "on" } else { "off" }.into(),
                format!("{}", report.temperature),
                "absent".into(),
                "absent".into(),
                "absent".into(),
                "absent".into(),
                "absent".into(),
                "absent".into(),
                "absent".into(),
                "absent".into(),
                "absent".into(),
                format!("missing: {reason}"),
            ],
            GridRow::BestK { kind, adversarial, best_k, temperature, metrics } => vec![
                kind.to_string(),
                format!("best({best_k})"),
                if *adversarial { "on" } else { "off" }.into(),
                format!("{temperature}"),
                format!("{:.6}", metrics.ell),
                fmt_alpha(&metrics.alpha, 0),
                fmt_alpha(&metrics.alpha, 1),
                fmt_alpha(&metrics.alpha, 2),
                format!("{:.6}", metrics.speedup),
                format!("{:.6}", metrics.speedup_std),
                format!("{:.6}", metrics.draft_overhead_fraction),
                format!("{:.3}", metrics.tokens_per_s_spec),
                format!("{:.3}", metrics.tokens_per_s_vanilla),
                "ok".into(),
            ],
        };
        w.write_record(&record).map_err(|e| Error::Metrics(e.to_string()))?;
    }
    String::from_utf8(w.into_inner().map_err(|e| Error::Metrics(e.to_string()))?)
        .map_err(|e| Error::Metrics(e.to_string()))
}

/// Deterministic per-component RNG for benches.
pub fn bench_rng(seed: u64, tag: &str) -> rand_chacha::ChaCha8Rng {
    component_rng(seed, tag)
}
