//! Desk-scale decoder transformer used as the equivalence oracle.
//!
//! Deliberately minimal and deterministic rather than fast: pre-norm blocks,
//! no dropout, no attention biases, hand-rolled f64/f32 kernels with a fixed
//! summation order. The forward pass accepts an arbitrary boolean attention
//! mask and an explicit position ID per token, which is exactly the freedom
//! the packed layout needs. Two positional families are supported: rotary
//! (relative, applied to q/k per head) and additive sinusoidal (absolute).
//!
//! Because every per-position computation visits keys in ascending index
//! order and skips masked keys entirely (they never contribute a float op),
//! two positions with equal content, equal position IDs, and corresponding
//! visible sets produce bitwise-identical logits. The packed-vs-naive
//! equivalence in [`crate::oracle`] leans on that.

mod grad;

pub use grad::grad_check;

use crate::convo::TokenId;
use crate::mask::BoolMask;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Sinusoidal encodings always use the classic base; `rotary_base` is a
/// config knob because rotary frequency scaling is the thing people tune.
const SINUSOIDAL_BASE: f64 = 10000.0;
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionalFamily {
    Rotary,
    Sinusoidal,
}

impl PositionalFamily {
    pub fn as_str(self) -> &'static str {
        match self {
            PositionalFamily::Rotary => "rotary",
            PositionalFamily::Sinusoidal => "sinusoidal",
        }
    }
}

impl std::str::FromStr for PositionalFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rotary" => Ok(PositionalFamily::Rotary),
            "sinusoidal" => Ok(PositionalFamily::Sinusoidal),
            other => Err(format!("unknown positional family '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    /// Loss-comparison tolerance the equivalence oracle defaults to.
    pub fn default_tolerance(self) -> f64 {
        match self {
            Precision::Single => 1e-4,
            Precision::Double => 1e-9,
        }
    }
}

/// Element type of the model: f64 or f32. Weights are always sampled in f64
/// from the seeded generator and then cast, so a config + seed pair pins the
/// weights bit-for-bit in either precision.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + 'static
{
    const PRECISION: Precision;

    fn from_f64(x: f64) -> Self;

    fn to_f64(self) -> f64;
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;

    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub positional: PositionalFamily,
    pub rotary_base: f64,
    pub precision: Precision,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, d_model: usize, n_layers: usize, n_heads: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
            positional: PositionalFamily::Rotary,
            rotary_base: 10000.0,
            precision: Precision::Double,
            init_seed: 0,
        }
    }

    pub fn with_positional(mut self, positional: PositionalFamily) -> Self {
        self.positional = positional;
        self
    }

    pub fn with_d_ff(mut self, d_ff: usize) -> Self {
        self.d_ff = d_ff;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return bad("all dimensions must be >= 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.positional == PositionalFamily::Rotary && self.head_dim() % 2 != 0 {
            return bad(format!(
                "rotary needs an even head dim, got {}",
                self.head_dim()
            ));
        }
        if !(self.rotary_base > 1.0) {
            return bad(format!("rotary_base {} must be > 1", self.rotary_base));
        }
        Ok(())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("attention row {row} has no visible key")]
    EmptyAttentionRow { row: usize },
    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfVocab { token: u32, vocab: usize },
    #[error("position {pos} is included but has no target")]
    MissingTarget { pos: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<F: Scalar> {
    pub ln1_g: Array1<F>,
    pub ln1_b: Array1<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub ln2_g: Array1<F>,
    pub ln2_b: Array1<F>,
    pub w1: Array2<F>,
    pub w2: Array2<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub embed: Array2<F>,
    pub layers: Vec<LayerWeights<F>>,
    pub lnf_g: Array1<F>,
    pub lnf_b: Array1<F>,
    pub w_out: Array2<F>,
}

/// Seeded initialization: all matrices drawn element-by-element (row-major,
/// embed first, then each layer's wq, wk, wv, wo, w1, w2, then the output
/// projection) from normal(0, 0.02); norm gains start at 1, shifts at 0.
pub fn init_model<F: Scalar>(cfg: &ModelConfig) -> Result<Model<F>, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut draw = |rows: usize, cols: usize| -> Array2<F> {
        let mut m = Array2::default((rows, cols));
        for i in 0..rows {
            for j in 0..cols {
                m[[i, j]] = F::from_f64(normal.sample(&mut rng));
            }
        }
        m
    };
    let d = cfg.d_model;
    let embed = draw(cfg.vocab_size, d);
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        layers.push(LayerWeights {
            ln1_g: Array1::from_elem(d, F::one()),
            ln1_b: Array1::default(d),
            wq: draw(d, d),
            wk: draw(d, d),
            wv: draw(d, d),
            wo: draw(d, d),
            ln2_g: Array1::from_elem(d, F::one()),
            ln2_b: Array1::default(d),
            w1: draw(d, cfg.d_ff),
            w2: draw(cfg.d_ff, d),
        });
    }
    let w_out = draw(d, cfg.vocab_size);
    Ok(Model {
        cfg: cfg.clone(),
        embed,
        layers,
        lnf_g: Array1::from_elem(d, F::one()),
        lnf_b: Array1::default(d),
        w_out,
    })
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<F: Scalar> {
    /// One row of vocabulary logits per input position.
    pub logits: Array2<F>,
    /// Attention row sums per (layer * head, position); populated by
    /// [`Model::forward_diag`], each entry should be 1 up to rounding.
    pub attn_row_sums: Option<Array2<F>>,
}

impl<F: Scalar> Model<F> {
    pub fn init(cfg: &ModelConfig) -> Result<Self, ModelError> {
        init_model(cfg)
    }

    /// Run the model over one masked sequence with explicit positions.
    pub fn forward(
        &self,
        tokens: &[TokenId],
        position_ids: &[u32],
        mask: &BoolMask,
    ) -> Result<ForwardOutput<F>, ModelError> {
        let trace = self.forward_trace(tokens, position_ids, mask, false)?;
        Ok(ForwardOutput {
            logits: trace.logits,
            attn_row_sums: None,
        })
    }

    /// Like [`Model::forward`] but also reports attention row sums.
    pub fn forward_diag(
        &self,
        tokens: &[TokenId],
        position_ids: &[u32],
        mask: &BoolMask,
    ) -> Result<ForwardOutput<F>, ModelError> {
        let trace = self.forward_trace(tokens, position_ids, mask, true)?;
        let len = tokens.len();
        let mut sums = Array2::default((self.cfg.n_layers * self.cfg.n_heads, len));
        for (l, lt) in trace.layers.iter().enumerate() {
            for (h, attn) in lt.attn.iter().enumerate() {
                for p in 0..len {
                    let mut acc = F::zero();
                    for k in 0..len {
                        if mask.allowed(p, k) {
                            acc = acc + attn[[p, k]];
                        }
                    }
                    sums[[l * self.cfg.n_heads + h, p]] = acc;
                }
            }
        }
        Ok(ForwardOutput {
            logits: trace.logits,
            attn_row_sums: Some(sums),
        })
    }

    pub(crate) fn forward_trace(
        &self,
        tokens: &[TokenId],
        position_ids: &[u32],
        mask: &BoolMask,
        keep: bool,
    ) -> Result<Trace<F>, ModelError> {
        let len = tokens.len();
        if position_ids.len() != len || mask.side() != len {
            return Err(ModelError::ShapeMismatch(format!(
                "tokens {}, positions {}, mask side {}",
                len,
                position_ids.len(),
                mask.side()
            )));
        }
        let cfg = &self.cfg;
        let d = cfg.d_model;

        // embeddings, plus additive sinusoidal encoding if selected
        let mut x = Array2::default((len, d));
        for (p, tok) in tokens.iter().enumerate() {
            if tok.0 as usize >= cfg.vocab_size {
                return Err(ModelError::TokenOutOfVocab {
                    token: tok.0,
                    vocab: cfg.vocab_size,
                });
            }
            for c in 0..d {
                x[[p, c]] = self.embed[[tok.0 as usize, c]];
            }
            if cfg.positional == PositionalFamily::Sinusoidal {
                for c in 0..d {
                    let omega = SINUSOIDAL_BASE.powf(-(2.0 * (c / 2) as f64) / d as f64);
                    let ang = position_ids[p] as f64 * omega;
                    let pe = if c % 2 == 0 { ang.sin() } else { ang.cos() };
                    x[[p, c]] = x[[p, c]] + F::from_f64(pe);
                }
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lw in &self.layers {
            let ln1 = layer_norm(&x, &lw.ln1_g, &lw.ln1_b);
            let q = matmul(&ln1.y, &lw.wq);
            let k = matmul(&ln1.y, &lw.wk);
            let v = matmul(&ln1.y, &lw.wv);
            let (qr, kr) = match cfg.positional {
                PositionalFamily::Rotary => (
                    rotate_heads(&q, position_ids, cfg.n_heads, cfg.rotary_base),
                    rotate_heads(&k, position_ids, cfg.n_heads, cfg.rotary_base),
                ),
                PositionalFamily::Sinusoidal => (q.clone(), k.clone()),
            };
            let dh = cfg.head_dim();
            let scale = F::from_f64(1.0 / (dh as f64).sqrt());
            let mut ocat = Array2::default((len, d));
            let mut attn = Vec::new();
            for h in 0..cfg.n_heads {
                let c0 = h * dh;
                let mut head_w = if keep {
                    Array2::default((len, len))
                } else {
                    Array2::default((0, 0))
                };
                for p in 0..len {
                    let row = attn_row(&qr, &kr, mask, p, c0, dh, scale)?;
                    // weighted value sum over visible keys, ascending
                    for (kk, &w) in row.iter().enumerate() {
                        if mask.allowed(p, kk) {
                            for c in 0..dh {
                                ocat[[p, c0 + c]] = ocat[[p, c0 + c]] + w * v[[kk, c0 + c]];
                            }
                        }
                    }
                    if keep {
                        for (kk, &w) in row.iter().enumerate() {
                            head_w[[p, kk]] = w;
                        }
                    }
                }
                if keep {
                    attn.push(head_w);
                }
            }
            let proj = matmul(&ocat, &lw.wo);
            let mut x_mid = x;
            for p in 0..len {
                for c in 0..d {
                    x_mid[[p, c]] = x_mid[[p, c]] + proj[[p, c]];
                }
            }
            let ln2 = layer_norm(&x_mid, &lw.ln2_g, &lw.ln2_b);
            let pre = matmul(&ln2.y, &lw.w1);
            let mut act = pre.clone();
            act.mapv_inplace(gelu);
            let ff = matmul(&act, &lw.w2);
            let mut x_out = x_mid;
            for p in 0..len {
                for c in 0..d {
                    x_out[[p, c]] = x_out[[p, c]] + ff[[p, c]];
                }
            }
            layers.push(LayerTrace {
                ln1,
                v,
                qr,
                kr,
                attn,
                ocat,
                ln2,
                pre,
                act,
            });
            x = x_out;
        }

        let lnf = layer_norm(&x, &self.lnf_g, &self.lnf_b);
        let logits = matmul(&lnf.y, &self.w_out);
        Ok(Trace {
            layers,
            lnf,
            logits,
        })
    }
}

/// One attention row: masked-softmax scores of query `p` against all keys,
/// densely materialized with exact zeros at masked entries. Visible keys are
/// visited in ascending index order throughout.
#[allow(clippy::too_many_arguments)]
fn attn_row<F: Scalar>(
    qr: &Array2<F>,
    kr: &Array2<F>,
    mask: &BoolMask,
    p: usize,
    c0: usize,
    dh: usize,
    scale: F,
) -> Result<Vec<F>, ModelError> {
    let len = mask.side();
    let mut scores = vec![F::zero(); len];
    let mut max: Option<F> = None;
    for k in 0..len {
        if !mask.allowed(p, k) {
            continue;
        }
        let mut dot = F::zero();
        for c in 0..dh {
            dot = dot + qr[[p, c0 + c]] * kr[[k, c0 + c]];
        }
        let s = dot * scale;
        scores[k] = s;
        max = Some(match max {
            Some(m) if m >= s => m,
            _ => s,
        });
    }
    let max = max.ok_or(ModelError::EmptyAttentionRow { row: p })?;
    let mut denom = F::zero();
    for k in 0..len {
        if mask.allowed(p, k) {
            scores[k] = (scores[k] - max).exp();
            denom = denom + scores[k];
        }
    }
    let mut row = vec![F::zero(); len];
    for k in 0..len {
        if mask.allowed(p, k) {
            row[k] = scores[k] / denom;
        }
    }
    Ok(row)
}

pub(crate) struct LnTrace<F: Scalar> {
    pub y: Array2<F>,
    pub xhat: Array2<F>,
    pub inv_sig: Vec<F>,
}

pub(crate) struct LayerTrace<F: Scalar> {
    pub ln1: LnTrace<F>,
    pub v: Array2<F>,
    pub qr: Array2<F>,
    pub kr: Array2<F>,
    /// Per-head dense attention weights; empty unless traced with `keep`.
    pub attn: Vec<Array2<F>>,
    pub ocat: Array2<F>,
    pub ln2: LnTrace<F>,
    pub pre: Array2<F>,
    pub act: Array2<F>,
}

pub(crate) struct Trace<F: Scalar> {
    pub layers: Vec<LayerTrace<F>>,
    pub lnf: LnTrace<F>,
    pub logits: Array2<F>,
}

/// Row-wise layer norm with learned gain/shift; keeps the normalized rows
/// and 1/sigma for the backward pass.
pub(crate) fn layer_norm<F: Scalar>(
    x: &Array2<F>,
    g: &Array1<F>,
    b: &Array1<F>,
) -> LnTrace<F> {
    let (n, d) = x.dim();
    let mut y = Array2::default((n, d));
    let mut xhat = Array2::default((n, d));
    let mut inv_sig = Vec::with_capacity(n);
    let dn = F::from_f64(d as f64);
    let eps = F::from_f64(LN_EPS);
    for p in 0..n {
        let mut mu = F::zero();
        for c in 0..d {
            mu = mu + x[[p, c]];
        }
        mu = mu / dn;
        let mut var = F::zero();
        for c in 0..d {
            let dx = x[[p, c]] - mu;
            var = var + dx * dx;
        }
        var = var / dn;
        let isig = F::one() / (var + eps).sqrt();
        inv_sig.push(isig);
        for c in 0..d {
            let h = (x[[p, c]] - mu) * isig;
            xhat[[p, c]] = h;
            y[[p, c]] = g[c] * h + b[c];
        }
    }
    LnTrace { y, xhat, inv_sig }
}

/// Plain triple-loop matmul; accumulation order over the inner dimension is
/// fixed and independent of the number of rows, which keeps per-row results
/// identical across differently sized batches.
pub(crate) fn matmul<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let (n, m) = a.dim();
    let (m2, p) = b.dim();
    debug_assert_eq!(m, m2);
    let mut out = Array2::default((n, p));
    for i in 0..n {
        for j in 0..p {
            let mut acc = F::zero();
            for k in 0..m {
                acc = acc + a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// a^T . b
pub(crate) fn matmul_tn<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let (n, m) = a.dim();
    let (n2, p) = b.dim();
    debug_assert_eq!(n, n2);
    let mut out = Array2::default((m, p));
    for i in 0..m {
        for j in 0..p {
            let mut acc = F::zero();
            for k in 0..n {
                acc = acc + a[[k, i]] * b[[k, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// a . b^T
pub(crate) fn matmul_nt<F: Scalar>(a: &Array2<F>, b: &Array2<F>) -> Array2<F> {
    let (n, m) = a.dim();
    let (p, m2) = b.dim();
    debug_assert_eq!(m, m2);
    let mut out = Array2::default((n, p));
    for i in 0..n {
        for j in 0..p {
            let mut acc = F::zero();
            for k in 0..m {
                acc = acc + a[[i, k]] * b[[j, k]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    // tanh approximation; smooth, so finite differences behave
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

pub(crate) fn gelu_prime<F: Scalar>(x: F) -> F {
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}

/// Rotary rotation angle table applied per head with half-split pairing:
/// channel pair (j, j + dh/2) rotates by `pos * base^(-2j/dh)`.
pub(crate) fn rotate_heads<F: Scalar>(
    x: &Array2<F>,
    position_ids: &[u32],
    n_heads: usize,
    base: f64,
) -> Array2<F> {
    let (len, d) = x.dim();
    let dh = d / n_heads;
    let half = dh / 2;
    let mut out = x.clone();
    for p in 0..len {
        for h in 0..n_heads {
            let c0 = h * dh;
            for j in 0..half {
                let theta = base.powf(-(2.0 * j as f64) / dh as f64);
                let ang = position_ids[p] as f64 * theta;
                let (sin, cos) = (F::from_f64(ang.sin()), F::from_f64(ang.cos()));
                let a = x[[p, c0 + j]];
                let b = x[[p, c0 + j + half]];
                out[[p, c0 + j]] = a * cos - b * sin;
                out[[p, c0 + j + half]] = a * sin + b * cos;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct NllOutput<F: Scalar> {
    /// Per-position loss; `None` where include is false.
    pub per_token: Vec<Option<F>>,
    pub total: F,
    pub n_included: usize,
}

/// Negative log-likelihood of each included position's target under the
/// position's logits, plus the straight sum.
pub fn nll<F: Scalar>(
    out: &ForwardOutput<F>,
    targets: &[Option<TokenId>],
    include: &[bool],
) -> Result<NllOutput<F>, ModelError> {
    let (len, vocab) = out.logits.dim();
    if targets.len() != len || include.len() != len {
        return Err(ModelError::ShapeMismatch(format!(
            "logits rows {}, targets {}, include {}",
            len,
            targets.len(),
            include.len()
        )));
    }
    let mut per_token = vec![None; len];
    let mut total = F::zero();
    let mut n_included = 0;
    for p in 0..len {
        if !include[p] {
            continue;
        }
        let target = targets[p].ok_or(ModelError::MissingTarget { pos: p })?;
        if target.0 as usize >= vocab {
            return Err(ModelError::TokenOutOfVocab {
                token: target.0,
                vocab,
            });
        }
        let mut max = out.logits[[p, 0]];
        for c in 1..vocab {
            if out.logits[[p, c]] > max {
                max = out.logits[[p, c]];
            }
        }
        let mut denom = F::zero();
        for c in 0..vocab {
            denom = denom + (out.logits[[p, c]] - max).exp();
        }
        let loss = max + denom.ln() - out.logits[[p, target.0 as usize]];
        per_token[p] = Some(loss);
        total = total + loss;
        n_included += 1;
    }
    Ok(NllOutput {
        per_token,
        total,
        n_included,
    })
}
