//! The frozen byte-level target model.
//!
//! A decoder-only transformer with pre-norm blocks, learned positional
//! embeddings, and a SiLU feedforward. It is trained once on a byte corpus,
//! then frozen; after that it only serves logits and final hidden states to
//! draft heads and the verification engine.
//!
//! Inference goes through [`TargetSession`], which keeps a per-sequence
//! key/value cache. Feeding tokens in one batch or one at a time produces
//! bit-identical rows (the kernels accumulate in a row-stable order), which
//! is what makes the prefix and greedy-equivalence guarantees exact.

use crate::error::{Error, Result};
use crate::rng::UnitUniform;
use crate::tensor::graph::{Graph, ValueId};
use crate::tensor::kernels;
use crate::tensor::optim::Optimizer;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ff_mult: usize,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            d_model: 128,
            n_layers: 6,
            n_heads: 4,
            max_seq_len: 256,
            ff_mult: 4,
        }
    }
}

impl TargetConfig {
    /// The deeper variant used to probe how target depth interacts with
    /// draft-head depth.
    pub fn deep() -> Self {
        Self { n_layers: 12, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size != BYTE_VOCAB {
            return Err(Error::Config(format!(
                "byte tokenizer requires vocab_size {BYTE_VOCAB}, got {}",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_seq_len == 0 || self.ff_mult == 0 {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.d_model * self.ff_mult
    }
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub ln1_g: Tensor<f32>,
    pub ln1_b: Tensor<f32>,
    pub w_qkv: Tensor<f32>,
    pub b_qkv: Tensor<f32>,
    pub w_out: Tensor<f32>,
    pub b_out: Tensor<f32>,
    pub ln2_g: Tensor<f32>,
    pub ln2_b: Tensor<f32>,
    pub w_ff1: Tensor<f32>,
    pub b_ff1: Tensor<f32>,
    pub w_ff2: Tensor<f32>,
    pub b_ff2: Tensor<f32>,
}

impl BlockWeights {
    pub fn init(d: usize, ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = 0.02f32;
        Self {
            ln1_g: ones(&[1, d]),
            ln1_b: Tensor::zeros(&[1, d]),
            w_qkv: Tensor::randn(&[d, 3 * d], std, rng),
            b_qkv: Tensor::zeros(&[1, 3 * d]),
            w_out: Tensor::randn(&[d, d], std, rng),
            b_out: Tensor::zeros(&[1, d]),
            ln2_g: ones(&[1, d]),
            ln2_b: Tensor::zeros(&[1, d]),
            w_ff1: Tensor::randn(&[d, ff], std, rng),
            b_ff1: Tensor::zeros(&[1, ff]),
            w_ff2: Tensor::randn(&[ff, d], std, rng),
            b_ff2: Tensor::zeros(&[1, d]),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<f32>)>) {
        out.push((format!("{prefix}.ln1_g"), &self.ln1_g));
        out.push((format!("{prefix}.ln1_b"), &self.ln1_b));
        out.push((format!("{prefix}.w_qkv"), &self.w_qkv));
        out.push((format!("{prefix}.b_qkv"), &self.b_qkv));
        out.push((format!("{prefix}.w_out"), &self.w_out));
        out.push((format!("{prefix}.b_out"), &self.b_out));
        out.push((format!("{prefix}.ln2_g"), &self.ln2_g));
        out.push((format!("{prefix}.ln2_b"), &self.ln2_b));
        out.push((format!("{prefix}.w_ff1"), &self.w_ff1));
        out.push((format!("{prefix}.b_ff1"), &self.b_ff1));
        out.push((format!("{prefix}.w_ff2"), &self.w_ff2));
        out.push((format!("{prefix}.b_ff2"), &self.b_ff2));
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<f32>)>) {
        out.push((format!("{prefix}.ln1_g"), &mut self.ln1_g));
        out.push((format!("{prefix}.ln1_b"), &mut self.ln1_b));
        out.push((format!("{prefix}.w_qkv"), &mut self.w_qkv));
        out.push((format!("{prefix}.b_qkv"), &mut self.b_qkv));
        out.push((format!("{prefix}.w_out"), &mut self.w_out));
        out.push((format!("{prefix}.b_out"), &mut self.b_out));
        out.push((format!("{prefix}.ln2_g"), &mut self.ln2_g));
        out.push((format!("{prefix}.ln2_b"), &mut self.ln2_b));
        out.push((format!("{prefix}.w_ff1"), &mut self.w_ff1));
        out.push((format!("{prefix}.b_ff1"), &mut self.b_ff1));
        out.push((format!("{prefix}.w_ff2"), &mut self.w_ff2));
        out.push((format!("{prefix}.b_ff2"), &mut self.b_ff2));
    }
}

fn ones(shape: &[usize]) -> Tensor<f32> {
    let mut t = Tensor::zeros(shape);
    t.data_mut().fill(1.0);
    t
}

#[derive(Debug, Clone)]
pub struct TargetModel {
    config: TargetConfig,
    pub tok_emb: Tensor<f32>,
    pub pos_emb: Tensor<f32>,
    pub blocks: Vec<BlockWeights>,
    pub ln_f_g: Tensor<f32>,
    pub ln_f_b: Tensor<f32>,
    /// LM head projection, zero-initialized so an untrained model emits
    /// uniform distributions.
    pub w_lm: Tensor<f32>,
    frozen: bool,
}

impl TargetModel {
    pub fn new(config: TargetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights::init(d, config.ff_dim(), rng))
            .collect();
        Ok(Self {
            tok_emb: Tensor::randn(&[config.vocab_size, d], 0.02, rng),
            pos_emb: Tensor::randn(&[config.max_seq_len, d], 0.02, rng),
            blocks,
            ln_f_g: ones(&[1, d]),
            ln_f_b: Tensor::zeros(&[1, d]),
            w_lm: Tensor::zeros(&[d, config.vocab_size]),
            config,
            frozen: false,
        })
    }

    pub fn config(&self) -> &TargetConfig {
        &self.config
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        for (_, p) in self.named_params_mut() {
            p.set_requires_grad(false);
            p.clear_grad();
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        out.push(("tok_emb".to_string(), &self.tok_emb));
        out.push(("pos_emb".to_string(), &self.pos_emb));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("block{i}"), &mut out);
        }
        out.push(("ln_f_g".to_string(), &self.ln_f_g));
        out.push(("ln_f_b".to_string(), &self.ln_f_b));
        out.push(("w_lm".to_string(), &self.w_lm));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<f32>)> {
        let mut out: Vec<(String, &mut Tensor<f32>)> = Vec::new();
        out.push(("tok_emb".to_string(), &mut self.tok_emb));
        out.push(("pos_emb".to_string(), &mut self.pos_emb));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("block{i}"), &mut out);
        }
        out.push(("ln_f_g".to_string(), &mut self.ln_f_g));
        out.push(("ln_f_b".to_string(), &mut self.ln_f_b));
        out.push(("w_lm".to_string(), &mut self.w_lm));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over parameter names and raw little-endian f32 payloads.
    pub fn weight_hash(&self) -> String {
        hash_params(&self.named_params())
    }
}

pub fn hash_params(params: &[(String, &Tensor<f32>)]) -> String {
    let mut hasher = Sha256::new();
    for (name, t) in params {
        hasher.update(name.as_bytes());
        for v in t.data() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_string(&hasher.finalize())
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ── Cached inference ─────────────────────────────────────────────────────

/// Per-position logits and final hidden states emitted by a session feed.
#[derive(Debug, Clone)]
pub struct StepOutputs {
    /// One row per fed token: distribution logits for the *next* position.
    pub logits: Vec<Vec<f32>>,
    /// One row per fed token: final pre-LM-head representation.
    pub hidden: Vec<Vec<f32>>,
}

/// One decoding sequence with a per-layer key/value cache.
pub struct TargetSession<'a> {
    model: &'a TargetModel,
    k_cache: Vec<Vec<f32>>,
    v_cache: Vec<Vec<f32>>,
    len: usize,
}

impl<'a> TargetSession<'a> {
    pub fn new(model: &'a TargetModel) -> Self {
        let layers = model.config.n_layers;
        Self {
            model,
            k_cache: vec![Vec::new(); layers],
            v_cache: vec![Vec::new(); layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drop cached positions beyond `new_len` (rollback of rejected drafts).
    pub fn truncate(&mut self, new_len: usize) {
        debug_assert!(new_len <= self.len);
        let d = self.model.config.d_model;
        for l in 0..self.model.config.n_layers {
            self.k_cache[l].truncate(new_len * d);
            self.v_cache[l].truncate(new_len * d);
        }
        self.len = new_len;
    }

    /// Feed tokens and return logits/hidden rows for each. The rows are
    /// bit-identical whether tokens arrive in one batch or one at a time.
    pub fn feed(&mut self, tokens: &[u8]) -> Result<StepOutputs> {
        let cfg = &self.model.config;
        let b = tokens.len();
        if b == 0 {
            return Ok(StepOutputs { logits: Vec::new(), hidden: Vec::new() });
        }
        if self.len + b > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { len: self.len + b, limit: cfg.max_seq_len });
        }
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        let scale = 1.0f32 / (dh as f32).sqrt();

        // embeddings
        let mut x = vec![0.0f32; b * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let pos = self.len + i;
            let te = &self.model.tok_emb.data()[tok as usize * d..(tok as usize + 1) * d];
            let pe = &self.model.pos_emb.data()[pos * d..(pos + 1) * d];
            for j in 0..d {
                x[i * d + j] = te[j] + pe[j];
            }
        }

        let mut h = vec![0.0f32; b * d];
        let mut qkv = vec![0.0f32; b * 3 * d];
        for (l, blk) in self.model.blocks.iter().enumerate() {
            // attention sublayer
            for i in 0..b {
                kernels::layernorm_row(
                    &x[i * d..(i + 1) * d],
                    blk.ln1_g.data(),
                    blk.ln1_b.data(),
                    1e-5,
                    &mut h[i * d..(i + 1) * d],
                );
            }
            qkv.fill(0.0);
            kernels::matmul_into(&h, blk.w_qkv.data(), &mut qkv, b, d, 3 * d);
            kernels::add_row_inplace(&mut qkv, blk.b_qkv.data());

            // append k/v rows for the whole batch before attending
            for i in 0..b {
                let row = &qkv[i * 3 * d..(i + 1) * 3 * d];
                self.k_cache[l].extend_from_slice(&row[d..2 * d]);
                self.v_cache[l].extend_from_slice(&row[2 * d..3 * d]);
            }

            let mut attn = vec![0.0f32; b * d];
            for i in 0..b {
                let pos = self.len + i;
                let q_row = &qkv[i * 3 * d..i * 3 * d + d];
                for hd in 0..cfg.n_heads {
                    let cols = hd * dh..(hd + 1) * dh;
                    let q_vec = &q_row[cols.clone()];
                    let mut scores = Vec::with_capacity(pos + 1);
                    for j in 0..=pos {
                        let k_vec = &self.k_cache[l][j * d + cols.start..j * d + cols.end];
                        scores.push(kernels::dot(q_vec, k_vec) * scale);
                    }
                    kernels::softmax_row_inplace(&mut scores);
                    let out = &mut attn[i * d + cols.start..i * d + cols.end];
                    for (j, &w) in scores.iter().enumerate() {
                        let v_vec = &self.v_cache[l][j * d + cols.start..j * d + cols.end];
                        for (o, &vv) in out.iter_mut().zip(v_vec) {
                            *o += w * vv;
                        }
                    }
                }
            }
            let mut attn_proj = vec![0.0f32; b * d];
            kernels::matmul_into(&attn, blk.w_out.data(), &mut attn_proj, b, d, d);
            kernels::add_row_inplace(&mut attn_proj, blk.b_out.data());
            for (xv, &av) in x.iter_mut().zip(&attn_proj) {
                *xv += av;
            }

            // feedforward sublayer
            for i in 0..b {
                kernels::layernorm_row(
                    &x[i * d..(i + 1) * d],
                    blk.ln2_g.data(),
                    blk.ln2_b.data(),
                    1e-5,
                    &mut h[i * d..(i + 1) * d],
                );
            }
            let ff = cfg.ff_dim();
            let mut f1 = vec![0.0f32; b * ff];
            kernels::matmul_into(&h, blk.w_ff1.data(), &mut f1, b, d, ff);
            kernels::add_row_inplace(&mut f1, blk.b_ff1.data());
            for v in f1.iter_mut() {
                *v = kernels::silu(*v);
            }
            let mut f2 = vec![0.0f32; b * d];
            kernels::matmul_into(&f1, blk.w_ff2.data(), &mut f2, b, ff, d);
            kernels::add_row_inplace(&mut f2, blk.b_ff2.data());
            for (xv, &fv) in x.iter_mut().zip(&f2) {
                *xv += fv;
            }
        }

        // final norm and LM head
        let mut hidden_rows = Vec::with_capacity(b);
        let mut logits_rows = Vec::with_capacity(b);
        for i in 0..b {
            let mut hid = vec![0.0f32; d];
            kernels::layernorm_row(
                &x[i * d..(i + 1) * d],
                self.model.ln_f_g.data(),
                self.model.ln_f_b.data(),
                1e-5,
                &mut hid,
            );
            let logits = kernels::matmul(&hid, self.model.w_lm.data(), 1, d, cfg.vocab_size);
            debug_assert!(kernels::all_finite(&logits));
            hidden_rows.push(hid);
            logits_rows.push(logits);
        }
        self.len += b;
        Ok(StepOutputs { logits: logits_rows, hidden: hidden_rows })
    }
}

/// Full forward over a sequence from a fresh session.
pub fn target_forward(model: &TargetModel, seq: &[u8]) -> Result<StepOutputs> {
    if seq.is_empty() {
        return Err(Error::Contract("target_forward requires a nonempty sequence".into()));
    }
    let mut session = TargetSession::new(model);
    session.feed(seq)
}

// ── Traced (differentiable) forward ──────────────────────────────────────

/// Parameter leases: name → graph leaf, for copying gradients back out.
pub struct Lease {
    pairs: Vec<(String, ValueId)>,
}

impl Lease {
    pub fn new() -> Self {
        Self { pairs: Vec::new() }
    }

    pub fn add(&mut self, g: &mut Graph<f32>, name: &str, t: &Tensor<f32>) -> Result<ValueId> {
        let id = g.leaf(t)?;
        self.pairs.push((name.to_string(), id));
        Ok(id)
    }

    /// Copy gradients out of the graph into the matching parameters,
    /// scaled (batch averaging).
    pub fn harvest(&self, g: &Graph<f32>, params: &mut [(String, &mut Tensor<f32>)], scale: f32) {
        for (name, id) in &self.pairs {
            if let Some(grad) = g.grad(*id) {
                if let Some((_, p)) = params.iter_mut().find(|(n, _)| n == name) {
                    if p.requires_grad() {
                        p.accumulate_grad(grad, scale);
                    }
                }
            }
        }
    }
}

impl Default for Lease {
    fn default() -> Self {
        Self::new()
    }
}

/// Differentiable full-sequence forward. Returns the logits node `[S, V]`
/// and the final-hidden node `[S, d]`.
pub fn trace_forward(
    model: &TargetModel,
    g: &mut Graph<f32>,
    tokens: &[u8],
    lease: &mut Lease,
) -> Result<(ValueId, ValueId)> {
    let cfg = &model.config;
    let s = tokens.len();
    if s == 0 || s > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: s, limit: cfg.max_seq_len });
    }
    let d = cfg.d_model;
    let ids: Vec<usize> = tokens.iter().map(|&b| b as usize).collect();
    let positions: Vec<usize> = (0..s).collect();

    let tok_table = lease.add(g, "tok_emb", &model.tok_emb)?;
    let pos_table = lease.add(g, "pos_emb", &model.pos_emb)?;
    let te = g.embedding(tok_table, &ids)?;
    let pe = g.embedding(pos_table, &positions)?;
    let mut x = g.add(te, pe)?;

    // causal mask shared by all layers
    let mut mask = vec![0.0f32; s * s];
    for i in 0..s {
        for j in (i + 1)..s {
            mask[i * s + j] = -1e9;
        }
    }
    let mask = g.constant(s, s, &mask)?;
    let scale = 1.0f32 / (cfg.head_dim() as f32).sqrt();

    for (l, blk) in model.blocks.iter().enumerate() {
        let p = format!("block{l}");
        let ln1_g = lease.add(g, &format!("{p}.ln1_g"), &blk.ln1_g)?;
        let ln1_b = lease.add(g, &format!("{p}.ln1_b"), &blk.ln1_b)?;
        let w_qkv = lease.add(g, &format!("{p}.w_qkv"), &blk.w_qkv)?;
        let b_qkv = lease.add(g, &format!("{p}.b_qkv"), &blk.b_qkv)?;
        let w_out = lease.add(g, &format!("{p}.w_out"), &blk.w_out)?;
        let b_out = lease.add(g, &format!("{p}.b_out"), &blk.b_out)?;
        let ln2_g = lease.add(g, &format!("{p}.ln2_g"), &blk.ln2_g)?;
        let ln2_b = lease.add(g, &format!("{p}.ln2_b"), &blk.ln2_b)?;
        let w_ff1 = lease.add(g, &format!("{p}.w_ff1"), &blk.w_ff1)?;
        let b_ff1 = lease.add(g, &format!("{p}.b_ff1"), &blk.b_ff1)?;
        let w_ff2 = lease.add(g, &format!("{p}.w_ff2"), &blk.w_ff2)?;
        let b_ff2 = lease.add(g, &format!("{p}.b_ff2"), &blk.b_ff2)?;

        let h = g.layernorm(x, ln1_g, ln1_b)?;
        let qkv = g.matmul(h, w_qkv)?;
        let qkv = g.add(qkv, b_qkv)?;
        let q = g.slice_cols(qkv, 0, d)?;
        let k = g.slice_cols(qkv, d, d)?;
        let v = g.slice_cols(qkv, 2 * d, d)?;

        let dh = cfg.head_dim();
        let mut head_outs = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let qh = g.slice_cols(q, hd * dh, dh)?;
            let kh = g.slice_cols(k, hd * dh, dh)?;
            let vh = g.slice_cols(v, hd * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, scale);
            let masked = g.add(scaled, mask)?;
            let weights = g.softmax(masked);
            head_outs.push(g.matmul(weights, vh)?);
        }
        let mut attn = head_outs[0];
        for &ho in &head_outs[1..] {
            attn = g.concat_cols(attn, ho)?;
        }
        let attn = g.matmul(attn, w_out)?;
        let attn = g.add(attn, b_out)?;
        x = g.add(x, attn)?;

        let h2 = g.layernorm(x, ln2_g, ln2_b)?;
        let f1 = g.matmul(h2, w_ff1)?;
        let f1 = g.add(f1, b_ff1)?;
        let f1 = g.silu(f1);
        let f2 = g.matmul(f1, w_ff2)?;
        let f2 = g.add(f2, b_ff2)?;
        x = g.add(x, f2)?;
    }

    let ln_f_g = lease.add(g, "ln_f_g", &model.ln_f_g)?;
    let ln_f_b = lease.add(g, "ln_f_b", &model.ln_f_b)?;
    let hidden = g.layernorm(x, ln_f_g, ln_f_b)?;
    let w_lm = lease.add(g, "w_lm", &model.w_lm)?;
    let logits = g.matmul(hidden, w_lm)?;
    Ok((logits, hidden))
}

/// Mean next-token cross-entropy of `logits[i]` against `labels[i]`.
pub fn cross_entropy_loss(
    g: &mut Graph<f32>,
    logits: ValueId,
    labels: &[u8],
) -> Result<ValueId> {
    let (rows, vocab) = (g.rows(logits), g.cols(logits));
    if rows != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![rows, vocab],
            rhs: vec![labels.len()],
        });
    }
    let logp = g.log_softmax(logits);
    let mut onehot = vec![0.0f32; rows * vocab];
    for (i, &lab) in labels.iter().enumerate() {
        onehot[i * vocab + lab as usize] = 1.0;
    }
    let onehot = g.constant(rows, vocab, &onehot)?;
    let picked = g.mul(logp, onehot)?;
    let total = g.sum_all(picked);
    Ok(g.scale(total, -1.0 / rows as f32))
}

// ── Generation ───────────────────────────────────────────────────────────

/// Decoding distribution for given logits at a given temperature. Both the
/// vanilla and speculative paths construct distributions with this function
/// so their sampling laws are identical.
pub fn decode_dist(logits: &[f32], temperature: f64) -> Result<crate::dist::ProbDist> {
    let t = if temperature == 0.0 { 1.0 } else { temperature };
    crate::dist::ProbDist::from_logits(logits, t)
}

/// Draw a next token from decode logits. Temperature 0 is argmax.
pub fn sample_from_logits<R: UnitUniform + ?Sized>(
    logits: &[f32],
    temperature: f64,
    rng: &mut R,
) -> Result<usize> {
    let dist = decode_dist(logits, temperature)?;
    Ok(crate::dist::sample_token(&dist, if temperature == 0.0 { 0.0 } else { 1.0 }, rng))
}

#[derive(Debug, Clone)]
pub struct GenerateResult {
    pub tokens: Vec<u8>,
    pub forward_passes: usize,
    /// Context overflowed and the sequence was left-truncated.
    pub truncated: bool,
}

/// Vanilla autoregressive decoding: one target forward per emitted token.
pub fn generate_autoregressive<R: UnitUniform + ?Sized>(
    model: &TargetModel,
    prompt: &[u8],
    max_new: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<GenerateResult> {
    if !model.frozen() {
        return Err(Error::NotFrozen("generation requires a frozen target".into()));
    }
    if prompt.is_empty() {
        return Err(Error::Contract("prompt must be nonempty".into()));
    }
    let limit = model.config.max_seq_len;
    let mut tokens: Vec<u8> = prompt.to_vec();
    let mut truncated = false;

    // keep room for one generated token
    let mut context: Vec<u8> = if tokens.len() >= limit {
        truncated = true;
        tokens[tokens.len() - (limit - 1)..].to_vec()
    } else {
        tokens.clone()
    };
    let mut session = TargetSession::new(model);
    let mut out = session.feed(&context)?;
    let mut forwards = 0usize;

    for _ in 0..max_new {
        let logits = out.logits.last().expect("session produced logits");
        let tok = sample_from_logits(logits, temperature, rng)? as u8;
        tokens.push(tok);
        context.push(tok);
        if context.len() >= limit {
            // left-truncate and rebuild the cache at shifted positions
            truncated = true;
            context = context[context.len() - (limit - 1)..].to_vec();
            session = TargetSession::new(model);
            out = session.feed(&context)?;
        } else {
            out = session.feed(&[tok])?;
        }
        forwards += 1;
    }
    Ok(GenerateResult { tokens, forward_passes: forwards, truncated })
}

// ── Training ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TargetTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub learning_rate: f32,
}

impl Default for TargetTrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 8, seq_len: 128, learning_rate: 1e-3 }
    }
}

/// Train next-token prediction on a byte corpus, then freeze the model.
/// Returns the per-step loss curve.
pub fn train_target(
    model: &mut TargetModel,
    corpus: &[u8],
    cfg: &TargetTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f32>> {
    if model.frozen() {
        return Err(Error::Frozen("target is already frozen".into()));
    }
    if corpus.len() < cfg.seq_len + 1 {
        return Err(Error::Corpus(format!(
            "corpus of {} bytes is too small for seq_len {}",
            corpus.len(),
            cfg.seq_len
        )));
    }
    if cfg.seq_len + 1 > model.config.max_seq_len {
        return Err(Error::Config(format!(
            "train seq_len {} exceeds model max_seq_len {}",
            cfg.seq_len, model.config.max_seq_len
        )));
    }
    for (_, p) in model.named_params_mut() {
        p.set_requires_grad(true);
        p.clear_grad();
    }
    let mut opt = Optimizer::adam(cfg.learning_rate)?;
    let mut curve = Vec::with_capacity(cfg.steps);
    let span = corpus.len() - cfg.seq_len - 1;

    for _step in 0..cfg.steps {
        let mut step_loss = 0.0f32;
        let starts: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..=span)).collect();
        for start in starts {
            let window = &corpus[start..start + cfg.seq_len + 1];
            let inputs = &window[..cfg.seq_len];
            let labels = &window[1..];
            let mut g = Graph::new();
            let mut lease = Lease::new();
            let (logits, _) = trace_forward(model, &mut g, inputs, &mut lease)?;
            let loss = cross_entropy_loss(&mut g, logits, labels)?;
            g.backward(loss)?;
            let mut params = model.named_params_mut();
            lease.harvest(&g, &mut params, 1.0 / cfg.batch_size as f32);
            step_loss += g.scalar(loss);
        }
        let mut params = model.named_params_mut();
        opt.step(&mut params)?;
        curve.push(step_loss / cfg.batch_size as f32);
    }
    model.freeze();
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny_config() -> TargetConfig {
        TargetConfig { d_model: 16, n_layers: 2, n_heads: 2, max_seq_len: 32, ff_mult: 2, ..TargetConfig::default() }
    }

    fn tiny_model(seed: u64) -> TargetModel {
        TargetModel::new(tiny_config(), &mut seeded(seed)).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TargetConfig::default().validate().is_ok());
        assert!(TargetConfig { d_model: 10, n_heads: 4, ..TargetConfig::default() }.validate().is_err());
        assert!(TargetConfig { vocab_size: 100, ..TargetConfig::default() }.validate().is_err());
    }

    #[test]
    fn single_token_forward_gives_one_row() {
        let model = tiny_model(1);
        let out = target_forward(&model, &[42]).unwrap();
        assert_eq!(out.logits.len(), 1);
        assert_eq!(out.hidden.len(), 1);
        assert_eq!(out.logits[0].len(), 256);
        assert_eq!(out.hidden[0].len(), 16);
    }

    #[test]
    fn prefix_rows_are_bitwise_stable() {
        // forward(x[0..k]) rows must equal forward(x[0..n]) rows bitwise
        let model = tiny_model(2);
        let mut rng = seeded(55);
        let seq: Vec<u8> = (0..20).map(|_| rng.random_range(0..=255u32) as u8).collect();
        let full = target_forward(&model, &seq).unwrap();
        for k in [1usize, 3, 7, 19] {
            let part = target_forward(&model, &seq[..k]).unwrap();
            for i in 0..k {
                assert!(part.logits[i]
                    .iter()
                    .zip(&full.logits[i])
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
                assert!(part.hidden[i]
                    .iter()
                    .zip(&full.hidden[i])
                    .all(|(a, b)| a.to_bits() == b.to_bits()));
            }
        }
    }

    #[test]
    fn incremental_feed_matches_batch_feed_bitwise() {
        let model = tiny_model(3);
        let seq: Vec<u8> = vec![10, 200, 3, 77, 150, 9];
        let batch = target_forward(&model, &seq).unwrap();
        let mut session = TargetSession::new(&model);
        for (i, &tok) in seq.iter().enumerate() {
            let step = session.feed(&[tok]).unwrap();
            assert!(step.logits[0].iter().zip(&batch.logits[i]).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn zero_init_lm_head_gives_uniform_rows() {
        let model = tiny_model(4);
        let out = target_forward(&model, &[1, 2, 3]).unwrap();
        for row in &out.logits {
            let dist = crate::dist::ProbDist::from_logits(row, 1.0).unwrap();
            for &p in dist.probs() {
                assert!((p - 1.0 / 256.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn traced_forward_matches_session_forward() {
        let model = tiny_model(5);
        let seq: Vec<u8> = vec![7, 99, 31, 4, 250];
        let session_out = target_forward(&model, &seq).unwrap();
        let mut g = Graph::new();
        let mut lease = Lease::new();
        let (logits, hidden) = trace_forward(&model, &mut g, &seq, &mut lease).unwrap();
        let d = model.config().d_model;
        for i in 0..seq.len() {
            let g_hidden = &g.data(hidden)[i * d..(i + 1) * d];
            for (a, b) in g_hidden.iter().zip(&session_out.hidden[i]) {
                assert!((a - b).abs() <= 1e-5, "hidden mismatch {a} vs {b}");
            }
            let g_logits = &g.data(logits)[i * 256..(i + 1) * 256];
            for (a, b) in g_logits.iter().zip(&session_out.logits[i]) {
                assert!((a - b).abs() <= 1e-4, "logits mismatch {a} vs {b}");
            }
        }
    }

    #[test]
    fn overlong_feed_is_an_error() {
        let model = tiny_model(6);
        let seq = vec![0u8; 33];
        assert!(matches!(
            target_forward(&model, &seq),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn generation_needs_frozen_model_and_prompt() {
        let mut model = tiny_model(7);
        let mut rng = seeded(0);
        assert!(matches!(
            generate_autoregressive(&model, &[1], 4, 0.0, &mut rng),
            Err(Error::NotFrozen(_))
        ));
        model.freeze();
        assert!(generate_autoregressive(&model, &[], 4, 0.0, &mut rng).is_err());
    }

    #[test]
    fn zero_max_new_leaves_prompt_unchanged() {
        let mut model = tiny_model(8);
        model.freeze();
        let mut rng = seeded(0);
        let res = generate_autoregressive(&model, &[5, 6], 0, 0.0, &mut rng).unwrap();
        assert_eq!(res.tokens, vec![5, 6]);
        assert_eq!(res.forward_passes, 0);
        assert!(!res.truncated);
    }

    #[test]
    fn greedy_generation_is_deterministic() {
        let mut model = tiny_model(9);
        model.freeze();
        let mut r1 = seeded(1);
        let mut r2 = seeded(2); // different rng must not matter at t=0
        let a = generate_autoregressive(&model, &[10, 20], 8, 0.0, &mut r1).unwrap();
        let b = generate_autoregressive(&model, &[10, 20], 8, 0.0, &mut r2).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.forward_passes, 8);
    }

    #[test]
    fn context_overflow_truncates_left_with_flag() {
        let mut model = tiny_model(10);
        model.freeze();
        let mut rng = seeded(3);
        let prompt = vec![1u8; 30];
        let res = generate_autoregressive(&model, &prompt, 8, 1.0, &mut rng).unwrap();
        assert!(res.truncated);
        assert_eq!(res.tokens.len(), 38);
    }

    #[test]
    fn initial_loss_is_log_vocab() {
        // zero-init LM head -> uniform -> CE = ln(256)
        let model = tiny_model(11);
        let mut g = Graph::new();
        let mut lease = Lease::new();
        let (logits, _) = trace_forward(&model, &mut g, &[1, 2, 3, 4], &mut lease).unwrap();
        let loss = cross_entropy_loss(&mut g, logits, &[2, 3, 4, 5]).unwrap();
        let v = g.scalar(loss);
        assert!((v - 5.5452).abs() < 1e-3, "loss {v}");
    }

    #[test]
    fn zero_steps_leaves_weights_unchanged() {
        let mut model = tiny_model(12);
        let before = model.weight_hash();
        let cfg = TargetTrainConfig { steps: 0, batch_size: 2, seq_len: 8, learning_rate: 1e-3 };
        let corpus = vec![7u8; 64];
        train_target(&mut model, &corpus, &cfg, &mut seeded(0)).unwrap();
        assert_eq!(model.weight_hash(), before);
        assert!(model.frozen());
    }

    #[test]
    fn short_training_reduces_loss_and_freezes() {
        let mut model = tiny_model(13);
        // highly regular corpus: repeated byte pattern
        let corpus: Vec<u8> = (0..512).map(|i| (i % 8) as u8 + 65).collect();
        let cfg = TargetTrainConfig { steps: 60, batch_size: 4, seq_len: 16, learning_rate: 3e-3 };
        let curve = train_target(&mut model, &corpus, &cfg, &mut seeded(1)).unwrap();
        assert!((curve[0] - 5.545).abs() < 0.05, "first loss {}", curve[0]);
        let last = *curve.last().unwrap();
        assert!(last < 2.0, "final loss {last}");
        assert!(model.frozen());
        // frozen model rejects further training
        assert!(train_target(&mut model, &corpus, &cfg, &mut seeded(2)).is_err());
    }

    #[test]
    fn training_is_seed_deterministic() {
        let corpus: Vec<u8> = (0..256).map(|i| (i * 31 % 251) as u8).collect();
        let cfg = TargetTrainConfig { steps: 5, batch_size: 2, seq_len: 12, learning_rate: 1e-3 };
        let run = |seed: u64| {
            let mut model = tiny_model(77);
            train_target(&mut model, &corpus, &cfg, &mut seeded(seed)).unwrap();
            model.weight_hash()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn generation_does_not_mutate_weights() {
        let mut model = tiny_model(14);
        model.freeze();
        let before = model.weight_hash();
        let mut rng = seeded(4);
        generate_autoregressive(&model, &[3, 1, 4], 10, 1.0, &mut rng).unwrap();
        assert_eq!(model.weight_hash(), before);
    }
}
