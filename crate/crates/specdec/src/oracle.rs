//! Self-contained verification oracles.
//!
//! These run independently of the model stack: the gradient checker compares
//! every graph primitive against central finite differences at f64, and the
//! verification oracle (see [`crate::engine`]) enumerates acceptance paths
//! exactly. Both are wired into `specdec verify-oracles` and the test suite.

use crate::dist::ProbDist;
use crate::engine::VerifyOutcome;
use crate::error::Result;
use crate::rng::{seeded, ScriptedUniforms};
use crate::tensor::graph::{Graph, ValueId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// First counterexample found by an oracle suite.
#[derive(Debug, Clone)]
pub struct OracleFailure {
    pub suite: String,
    pub detail: String,
}

impl std::fmt::Display for OracleFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}] {}", self.suite, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckSummary {
    pub ops_checked: usize,
    pub cases: usize,
    pub max_abs_err: f64,
}

const FD_H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-7;

type InputGen = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type OpBuilder = Box<dyn Fn(&mut Graph<f64>, &[ValueId]) -> Result<ValueId>>;

struct OpCase {
    name: &'static str,
    gen: InputGen,
    build: OpBuilder,
}

fn rand_dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=4), rng.random_range(1..=5))
}

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(&[r, c], data).unwrap().with_grad()
}

fn catalog(rng_for_fixed: &mut ChaCha8Rng) -> Vec<OpCase> {
    // Fixed structural choices (ids, slice bounds) are sampled once per
    // catalog construction so forward and perturbed re-runs agree.
    let emb_ids: Vec<usize> = (0..6).map(|_| rng_for_fixed.random_range(0..5)).collect();

    vec![
        OpCase {
            name: "matmul",
            gen: Box::new(|rng| {
                let (m, k) = rand_dims(rng);
                let n = rng.random_range(1..=4);
                vec![rand_tensor(rng, m, k, -2.0, 2.0), rand_tensor(rng, k, n, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| g.matmul(ins[0], ins[1])),
        },
        OpCase {
            name: "transpose",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| g.transpose(ins[0])),
        },
        OpCase {
            name: "add",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -2.0, 2.0), rand_tensor(rng, r, c, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| g.add(ins[0], ins[1])),
        },
        OpCase {
            name: "add_row_broadcast",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -2.0, 2.0), rand_tensor(rng, 1, c, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| g.add(ins[0], ins[1])),
        },
        OpCase {
            name: "mul",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -2.0, 2.0), rand_tensor(rng, r, c, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| g.mul(ins[0], ins[1])),
        },
        OpCase {
            name: "mul_col",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -2.0, 2.0), rand_tensor(rng, r, 1, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| g.mul_col(ins[0], ins[1])),
        },
        OpCase {
            name: "scale",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| Ok(g.affine(ins[0], 1.7, -0.3))),
        },
        OpCase {
            name: "silu",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -3.0, 3.0)]
            }),
            build: Box::new(|g, ins| Ok(g.silu(ins[0]))),
        },
        OpCase {
            name: "sigmoid",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -3.0, 3.0)]
            }),
            build: Box::new(|g, ins| Ok(g.sigmoid(ins[0]))),
        },
        OpCase {
            name: "softmax",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -3.0, 3.0)]
            }),
            build: Box::new(|g, ins| Ok(g.softmax(ins[0]))),
        },
        OpCase {
            name: "log_softmax",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -3.0, 3.0)]
            }),
            build: Box::new(|g, ins| Ok(g.log_softmax(ins[0]))),
        },
        OpCase {
            name: "log",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, 0.1, 3.0)]
            }),
            build: Box::new(|g, ins| g.log(ins[0])),
        },
        OpCase {
            name: "clamp",
            // keep samples away from the clamp bounds so FD stays one-sided
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -0.8, 0.8)]
            }),
            build: Box::new(|g, ins| Ok(g.clamp_counted(ins[0], -1.0, 1.0).0)),
        },
        OpCase {
            name: "layernorm",
            gen: Box::new(|rng| {
                let r = rng.random_range(1..=4);
                let c = rng.random_range(2..=6);
                vec![
                    rand_tensor(rng, r, c, -2.0, 2.0),
                    rand_tensor(rng, 1, c, 0.5, 1.5),
                    rand_tensor(rng, 1, c, -0.5, 0.5),
                ]
            }),
            build: Box::new(|g, ins| g.layernorm(ins[0], ins[1], ins[2])),
        },
        OpCase {
            name: "embedding",
            gen: Box::new(|rng| vec![rand_tensor(rng, 5, 3, -2.0, 2.0)]),
            build: Box::new(move |g, ins| g.embedding(ins[0], &emb_ids)),
        },
        OpCase {
            name: "concat_cols",
            gen: Box::new(|rng| {
                let r = rng.random_range(1..=4);
                let c1 = rng.random_range(1..=4);
                let c2 = rng.random_range(1..=4);
                vec![rand_tensor(rng, r, c1, -2.0, 2.0), rand_tensor(rng, r, c2, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| g.concat_cols(ins[0], ins[1])),
        },
        OpCase {
            name: "concat_rows",
            gen: Box::new(|rng| {
                let c = rng.random_range(1..=4);
                let r1 = rng.random_range(1..=4);
                let r2 = rng.random_range(1..=4);
                vec![rand_tensor(rng, r1, c, -2.0, 2.0), rand_tensor(rng, r2, c, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| g.concat_rows(ins[0], ins[1])),
        },
        OpCase {
            name: "slice_cols",
            gen: Box::new(|rng| {
                let r = rng.random_range(1..=4);
                let c = rng.random_range(3..=6);
                vec![rand_tensor(rng, r, c, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| {
                let c = g.cols(ins[0]);
                g.slice_cols(ins[0], 1, c - 1)
            }),
        },
        OpCase {
            name: "sum_all",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| Ok(g.sum_all(ins[0]))),
        },
        OpCase {
            name: "mean_all",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| Ok(g.mean_all(ins[0]))),
        },
        OpCase {
            name: "sum_cols",
            gen: Box::new(|rng| {
                let (r, c) = rand_dims(rng);
                vec![rand_tensor(rng, r, c, -2.0, 2.0)]
            }),
            build: Box::new(|g, ins| Ok(g.sum_cols(ins[0]))),
        },
        OpCase {
            name: "causal_attention_composite",
            // one attention head over a short sequence, built from primitives
            gen: Box::new(|rng| {
                let s = rng.random_range(2..=4);
                let d = 3;
                vec![
                    rand_tensor(rng, s, d, -1.5, 1.5),
                    rand_tensor(rng, d, d, -1.0, 1.0),
                    rand_tensor(rng, d, d, -1.0, 1.0),
                    rand_tensor(rng, d, d, -1.0, 1.0),
                ]
            }),
            build: Box::new(|g, ins| {
                let (x, wq, wk, wv) = (ins[0], ins[1], ins[2], ins[3]);
                let s = g.rows(x);
                let d = g.cols(x);
                let q = g.matmul(x, wq)?;
                let k = g.matmul(x, wk)?;
                let v = g.matmul(x, wv)?;
                let kt = g.transpose(k)?;
                let scores = g.matmul(q, kt)?;
                let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
                let mut mask = vec![0.0f64; s * s];
                for i in 0..s {
                    for j in (i + 1)..s {
                        mask[i * s + j] = -1e9;
                    }
                }
                let mask = g.constant(s, s, &mask)?;
                let masked = g.add(scaled, mask)?;
                let weights = g.softmax(masked);
                g.matmul(weights, v)
            }),
        },
        OpCase {
            name: "mlp3",
            // random 3-layer MLP: linear -> silu -> linear -> silu -> linear
            gen: Box::new(|rng| {
                let d = 3;
                vec![
                    rand_tensor(rng, 2, d, -1.5, 1.5),
                    rand_tensor(rng, d, 4, -1.0, 1.0),
                    rand_tensor(rng, 1, 4, -0.5, 0.5),
                    rand_tensor(rng, 4, 4, -1.0, 1.0),
                    rand_tensor(rng, 1, 4, -0.5, 0.5),
                    rand_tensor(rng, 4, 2, -1.0, 1.0),
                    rand_tensor(rng, 1, 2, -0.5, 0.5),
                ]
            }),
            build: Box::new(|g, ins| {
                let mut h = ins[0];
                for layer in 0..3 {
                    let w = ins[1 + 2 * layer];
                    let b = ins[2 + 2 * layer];
                    h = g.matmul(h, w)?;
                    h = g.add(h, b)?;
                    if layer < 2 {
                        h = g.silu(h);
                    }
                }
                Ok(h)
            }),
        },
    ]
}

/// Scalarize an op output: `loss = sum(out * R)` with a fixed random weight
/// matrix, so every output element contributes a distinct gradient.
fn scalarize(
    g: &mut Graph<f64>,
    out: ValueId,
    weights: &[f64],
) -> Result<ValueId> {
    let (r, c) = (g.rows(out), g.cols(out));
    let w = g.constant(r, c, &weights[..r * c])?;
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

/// Check one op for `cases` random cases. Returns max abs error seen.
fn check_op(case: &OpCase, cases: usize, seed: u64) -> std::result::Result<f64, OracleFailure> {
    let mut max_err = 0.0f64;
    for case_idx in 0..cases {
        let mut rng = seeded(seed ^ (case_idx as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let inputs = (case.gen)(&mut rng);
        // random scalarizer weights, generous upper bound on output size
        let wbuf: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();

        let run = |tensors: &[Tensor<f64>]| -> Result<(f64, Vec<Vec<f64>>)> {
            let mut g = Graph::new();
            let ids: Vec<ValueId> =
                tensors.iter().map(|t| g.leaf(t)).collect::<Result<Vec<_>>>()?;
            let out = (case.build)(&mut g, &ids)?;
            let loss = scalarize(&mut g, out, &wbuf)?;
            g.backward(loss)?;
            let grads = ids.iter().map(|&id| g.grad(id).unwrap().to_vec()).collect();
            Ok((g.scalar(loss), grads))
        };
        let eval = |tensors: &[Tensor<f64>]| -> Result<f64> {
            let mut g = Graph::new();
            let ids: Vec<ValueId> =
                tensors.iter().map(|t| g.leaf(t)).collect::<Result<Vec<_>>>()?;
            let out = (case.build)(&mut g, &ids)?;
            let loss = scalarize(&mut g, out, &wbuf)?;
            Ok(g.scalar(loss))
        };

        let (_, analytic) = run(&inputs).map_err(|e| OracleFailure {
            suite: "gradcheck".into(),
            detail: format!("{}: case {case_idx}: forward/backward failed: {e}", case.name),
        })?;

        for (ti, t) in inputs.iter().enumerate() {
            for ei in 0..t.numel() {
                let mut plus = inputs.to_vec();
                plus[ti].data_mut()[ei] += FD_H;
                let mut minus = inputs.to_vec();
                minus[ti].data_mut()[ei] -= FD_H;
                let fp = eval(&plus).unwrap();
                let fm = eval(&minus).unwrap();
                let numeric = (fp - fm) / (2.0 * FD_H);
                let a = analytic[ti][ei];
                let err = (a - numeric).abs();
                let tol = ABS_FLOOR + REL_TOL * a.abs().max(numeric.abs());
                if err > tol {
                    return Err(OracleFailure {
                        suite: "gradcheck".into(),
                        detail: format!(
                            "{}: case {case_idx}, input {ti}, element {ei}: analytic {a:.9e} vs finite-diff {numeric:.9e} (err {err:.3e} > tol {tol:.3e})",
                            case.name
                        ),
                    });
                }
                max_err = max_err.max(err);
            }
        }
    }
    Ok(max_err)
}

/// Gradient-check every differentiable primitive (plus two composites)
/// against central finite differences at f64.
pub fn gradcheck_all(cases_per_op: usize, seed: u64) -> std::result::Result<GradcheckSummary, OracleFailure> {
    let mut fixed = seeded(seed ^ 0xfeed);
    let ops = catalog(&mut fixed);
    let mut summary = GradcheckSummary::default();
    for case in &ops {
        let err = check_op(case, cases_per_op, seed)?;
        summary.ops_checked += 1;
        summary.cases += cases_per_op;
        summary.max_abs_err = summary.max_abs_err.max(err);
    }
    Ok(summary)
}

// ── Losslessness enumeration ────────────────────────────────────────────

/// Verifier under test: same signature as `engine::verify_stochastic` but
/// driven by a scripted uniform stream.
pub type Verifier =
    dyn Fn(&[ProbDist], &[ProbDist], &[usize], &mut ScriptedUniforms) -> Result<VerifyOutcome>;

#[derive(Debug, Clone, Default)]
pub struct LosslessnessSummary {
    pub pairs: usize,
    pub paths: usize,
    pub max_marginal_err: f64,
}

/// Force `draw_categorical(weights, total, u)` to pick `which` by aiming at
/// the middle of its cumulative bucket.
fn forcing_uniform(weights: &[f64], which: usize) -> f64 {
    let total: f64 = weights.iter().filter(|w| **w > 0.0).sum();
    let mut cum_before = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        if i == which {
            return (cum_before + w / 2.0) / total;
        }
        cum_before += w;
    }
    unreachable!("forcing_uniform target has zero weight");
}

fn fmt_dists(dists: &[ProbDist]) -> String {
    let rows: Vec<String> = dists
        .iter()
        .map(|d| {
            let vals: Vec<String> = d.probs().iter().map(|p| format!("{p:.6}")).collect();
            format!("[{}]", vals.join(", "))
        })
        .collect();
    rows.join(" ")
}

/// Random quantized distribution: integer masses keep path probabilities
/// well away from cumulative-bucket boundaries.
fn random_quantized_dist(vocab: usize, allow_zeros: bool, rng: &mut ChaCha8Rng) -> ProbDist {
    loop {
        let masses: Vec<u32> = (0..vocab)
            .map(|_| {
                if allow_zeros && rng.random_bool(0.25) {
                    0
                } else {
                    rng.random_range(1..=20)
                }
            })
            .collect();
        let total: u32 = masses.iter().sum();
        if total == 0 {
            continue;
        }
        let probs: Vec<f64> = masses.iter().map(|&m| m as f64 / total as f64).collect();
        return ProbDist::from_probs(probs).unwrap();
    }
}

struct PathChecker<'a> {
    q: &'a [ProbDist],
    d: &'a [ProbDist],
    t: usize,
    vocab: usize,
    verifier: &'a Verifier,
    /// impl-emitted marginal mass per (position, token)
    marginal: Vec<Vec<f64>>,
    paths: usize,
    total_mass: f64,
}

impl<'a> PathChecker<'a> {
    /// Fill don't-care draft positions (never scanned on this path) with the
    /// draft argmax so the upfront contract check passes.
    fn full_draft(&self, prefix: &[usize]) -> Vec<usize> {
        let mut toks = prefix.to_vec();
        for j in prefix.len()..self.t {
            toks.push(self.d[j].argmax());
        }
        toks
    }

    fn run_path(
        &mut self,
        prob: f64,
        prefix: &[usize],
        uniforms: Vec<f64>,
        expected: &VerifyOutcome,
    ) -> std::result::Result<(), OracleFailure> {
        let draft = self.full_draft(prefix);
        let mut script = ScriptedUniforms::new(uniforms);
        let got = (self.verifier)(self.q, self.d, &draft, &mut script).map_err(|e| OracleFailure {
            suite: "losslessness".into(),
            detail: format!(
                "verifier error on path (draft {draft:?}): {e}\n  q = {}\n  d = {}",
                fmt_dists(self.q),
                fmt_dists(self.d)
            ),
        })?;
        if got != *expected {
            return Err(OracleFailure {
                suite: "losslessness".into(),
                detail: format!(
                    "path mismatch for draft {draft:?}: expected {expected:?}, got {got:?}\n  q = {}\n  d = {}",
                    fmt_dists(self.q),
                    fmt_dists(self.d)
                ),
            });
        }
        for (pos, &tok) in got.emitted_tokens.iter().enumerate() {
            self.marginal[pos][tok] += prob;
        }
        self.paths += 1;
        self.total_mass += prob;
        Ok(())
    }

    fn recurse(
        &mut self,
        i: usize,
        prob: f64,
        prefix: &mut Vec<usize>,
        uniforms: &mut Vec<f64>,
    ) -> std::result::Result<(), OracleFailure> {
        if i == self.t {
            // full acceptance: enumerate the bonus draw from q[t]
            for v in 0..self.vocab {
                let pv = self.q[self.t].prob(v);
                if pv <= 0.0 {
                    continue;
                }
                let mut us = uniforms.clone();
                us.push(forcing_uniform(self.q[self.t].probs(), v));
                let mut emitted = prefix.clone();
                emitted.push(v);
                let expected = VerifyOutcome {
                    accepted_count: self.t,
                    emitted_tokens: emitted,
                    rejection_index: None,
                    bonus: true,
                };
                self.run_path(prob * pv, prefix, us, &expected)?;
            }
            return Ok(());
        }
        for tok in 0..self.vocab {
            let d_tok = self.d[i].prob(tok);
            if d_tok <= 0.0 {
                continue;
            }
            let accept = (self.q[i].prob(tok) / d_tok).min(1.0);
            if accept > 0.0 {
                prefix.push(tok);
                uniforms.push(accept * 0.5);
                self.recurse(i + 1, prob * d_tok * accept, prefix, uniforms)?;
                uniforms.pop();
                prefix.pop();
            }
            if accept < 1.0 {
                let residual: Vec<f64> = self.q[i]
                    .probs()
                    .iter()
                    .zip(self.d[i].probs())
                    .map(|(&q, &d)| (q - d).max(0.0))
                    .collect();
                let res_total: f64 = residual.iter().sum();
                for (w, &rw) in residual.iter().enumerate() {
                    if rw <= 0.0 {
                        continue;
                    }
                    let mut us = uniforms.clone();
                    us.push(accept + (1.0 - accept) / 2.0);
                    us.push(forcing_uniform(&residual, w));
                    let mut emitted = prefix.clone();
                    emitted.push(w);
                    let expected = VerifyOutcome {
                        accepted_count: i,
                        emitted_tokens: emitted,
                        rejection_index: Some(i),
                        bonus: false,
                    };
                    let mut path_prefix = prefix.clone();
                    path_prefix.push(tok);
                    let path_prob = prob * d_tok * (1.0 - accept) * (rw / res_total);
                    self.run_path(path_prob, &path_prefix, us, &expected)?;
                }
            }
        }
        Ok(())
    }
}

/// Enumerate every acceptance/rejection/resample path of the verifier on
/// random `(q, d)` pairs and check that (a) each path produces exactly the
/// outcome the rules dictate and (b) the per-position emitted marginals,
/// weighted by exact path probabilities, equal `q` to 1e-12.
pub fn losslessness_oracle(
    pairs: usize,
    seed: u64,
    verifier: &Verifier,
) -> std::result::Result<LosslessnessSummary, OracleFailure> {
    let mut rng = seeded(seed);
    let mut summary = LosslessnessSummary::default();
    for _pair in 0..pairs {
        let vocab = rng.random_range(2..=8);
        let t = rng.random_range(1..=3);
        let q: Vec<ProbDist> =
            (0..=t).map(|_| random_quantized_dist(vocab, true, &mut rng)).collect();
        let d: Vec<ProbDist> =
            (0..t).map(|_| random_quantized_dist(vocab, true, &mut rng)).collect();

        let mut checker = PathChecker {
            q: &q,
            d: &d,
            t,
            vocab,
            verifier,
            marginal: vec![vec![0.0; vocab]; t + 1],
            paths: 0,
            total_mass: 0.0,
        };
        checker.recurse(0, 1.0, &mut Vec::new(), &mut Vec::new())?;

        // coverage: the enumerated paths partition the outcome space
        if (checker.total_mass - 1.0).abs() > 1e-9 {
            return Err(OracleFailure {
                suite: "losslessness".into(),
                detail: format!(
                    "enumeration does not cover the outcome space (mass {})",
                    checker.total_mass
                ),
            });
        }

        // per-position marginals: reach_i * q_i
        let mut reach = 1.0f64;
        for pos in 0..=t {
            for v in 0..vocab {
                let expected = reach * checker.q[pos.min(t)].prob(v);
                let got = checker.marginal[pos][v];
                let err = (got - expected).abs();
                summary.max_marginal_err = summary.max_marginal_err.max(err);
                if err > 1e-12 {
                    return Err(OracleFailure {
                        suite: "losslessness".into(),
                        detail: format!(
                            "marginal mismatch at position {pos}, token {v}: got {got:.15}, expected {expected:.15} (err {err:.3e})\n  q = {}\n  d = {}",
                            fmt_dists(&q),
                            fmt_dists(&d)
                        ),
                    });
                }
            }
            if pos < t {
                let acc_mass: f64 = (0..vocab)
                    .map(|v| checker.q[pos].prob(v).min(checker.d[pos].prob(v)))
                    .sum();
                reach *= acc_mass;
            }
        }
        summary.pairs += 1;
        summary.paths += checker.paths;
    }
    Ok(summary)
}

// ── Greedy equivalence suite ─────────────────────────────────────────────

#[derive(Debug, Clone, Default)]
pub struct GreedySummary {
    pub cells: usize,
    pub prompts: usize,
    pub tokens_checked: usize,
}

/// For every head kind and stack depth, speculative decoding at
/// temperature 0 must emit exactly the vanilla greedy continuation. The
/// heads get randomized weights: equivalence is a property of the engine,
/// not of head quality.
pub fn greedy_equivalence_suite(
    target: &crate::target::TargetModel,
    prompts: &[Vec<u8>],
    ks: &[usize],
    max_new: usize,
    seed: u64,
) -> std::result::Result<GreedySummary, OracleFailure> {
    use crate::heads::{DraftHead, HeadConfig, HeadKind};
    let mut summary = GreedySummary { prompts: prompts.len(), ..GreedySummary::default() };
    for kind in [HeadKind::Medusa, HeadKind::Eagle] {
        for &k in ks {
            let cfg = match kind {
                HeadKind::Medusa => HeadConfig::medusa(k, target.config()),
                HeadKind::Eagle => HeadConfig::eagle(k, target.config()),
            };
            let mut head = DraftHead::init_from_target(cfg, target).map_err(|e| OracleFailure {
                suite: "greedy_equivalence".into(),
                detail: format!("head init failed: {e}"),
            })?;
            let mut rng = seeded(crate::rng::derive_seed(seed, &format!("head-{kind}-{k}")));
            for (_, p) in head.named_params_mut() {
                let fresh = Tensor::<f32>::randn(p.shape(), 0.15, &mut rng);
                p.data_mut().copy_from_slice(fresh.data());
            }
            summary.cells += 1;

            for (pi, prompt) in prompts.iter().enumerate() {
                let vanilla = crate::target::generate_autoregressive(
                    target,
                    prompt,
                    max_new,
                    0.0,
                    &mut seeded(0),
                )
                .map_err(|e| OracleFailure {
                    suite: "greedy_equivalence".into(),
                    detail: format!("vanilla decode failed: {e}"),
                })?;
                let (spec_out, trace) =
                    crate::engine::spec_decode(target, &head, prompt, max_new, 0.0, &mut seeded(0))
                        .map_err(|e| OracleFailure {
                            suite: "greedy_equivalence".into(),
                            detail: format!("speculative decode failed: {e}"),
                        })?;
                if !spec_out.starts_with(&vanilla.tokens) {
                    let diverge = spec_out
                        .iter()
                        .zip(&vanilla.tokens)
                        .position(|(a, b)| a != b)
                        .unwrap_or(vanilla.tokens.len().min(spec_out.len()));
                    return Err(OracleFailure {
                        suite: "greedy_equivalence".into(),
                        detail: format!(
                            "{kind} k={k} prompt {pi}: outputs diverge at position {diverge}: spec {:?} vs vanilla {:?}",
                            &spec_out[diverge.saturating_sub(2)..(diverge + 3).min(spec_out.len())],
                            &vanilla.tokens[diverge.saturating_sub(2)..(diverge + 3).min(vanilla.tokens.len())]
                        ),
                    });
                }
                trace.check_invariants().map_err(|e| OracleFailure {
                    suite: "greedy_equivalence".into(),
                    detail: format!("{kind} k={k} prompt {pi}: {e}"),
                })?;
                summary.tokens_checked += vanilla.tokens.len() - prompt.len();
            }
        }
    }
    Ok(summary)
}

// ── Loss anchors ─────────────────────────────────────────────────────────

/// Closed-form anchor values of the training losses at f64.
pub fn loss_anchor_suite() -> std::result::Result<(), OracleFailure> {
    use crate::adversarial::{discriminator_loss, distill_loss, generator_loss};
    let fail = |detail: String| OracleFailure { suite: "loss_anchors".into(), detail };

    // distill(d == q) = 0 within 1e-12
    let q = vec![0.7f64, -0.2, 1.4, 0.0, -1.1, 0.5];
    let v = distill_loss(&q, &q, 2, 3).map_err(|e| fail(e.to_string()))?;
    if v.abs() > 1e-12 {
        return Err(fail(format!("distill(d=q) = {v}, expected 0")));
    }

    // L_D at D == 0.5 equals 2 ln 2 within 1e-9
    let (ld, _) = discriminator_loss(&[0.5; 4], &[0.5; 4]);
    let expected = 2.0 * std::f64::consts::LN_2;
    if (ld - expected).abs() > 1e-9 {
        return Err(fail(format!("L_D(0.5) = {ld}, expected {expected}")));
    }

    // L_G at lambda = 0 is bitwise the distillation loss
    let d = vec![0.3f64, 0.9, -0.6, 0.2, 0.1, -0.4];
    let (lg, _) = generator_loss(&[0.42], &d, &q, 2, 3, 0.0).map_err(|e| fail(e.to_string()))?;
    let pure = distill_loss(&d, &q, 2, 3).map_err(|e| fail(e.to_string()))?;
    if lg.to_bits() != pure.to_bits() {
        return Err(fail(format!("L_G(lambda=0) = {lg:?} differs bitwise from distill {pure:?}")));
    }

    // spot anchors from hand arithmetic
    let (v, _) = discriminator_loss(&[0.8], &[0.3]);
    if (v - 0.579818495252942135).abs() > 1e-9 {
        return Err(fail(format!("L_D(0.8, 0.3) = {v}")));
    }
    let (v, _) = generator_loss(&[0.9], &q, &q, 2, 3, 0.5).map_err(|e| fail(e.to_string()))?;
    if (v - 0.052680257828913151).abs() > 1e-9 {
        return Err(fail(format!("L_G(D=0.9, lambda=0.5, d=q) = {v}")));
    }
    Ok(())
}
