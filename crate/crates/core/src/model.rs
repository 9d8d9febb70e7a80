//! Transformer-based beta-VAE over measurement records.
//!
//! Encoder: bidirectional self-attention over the embedded observable
//! sequence x, mapped to a per-position Gaussian (mu_z, sigma_z), each of
//! shape N x d. Decoder: causally masked self-attention over the
//! shifted-right outcome sequence (null token prepended) with
//! cross-attention to z, projected to 2 logits per position.
//!
//! Layout choices: fixed sinusoidal positional encodings on both sides;
//! post-layer-norm residual blocks; cross-attention sits between
//! self-attention and the feed-forward block and is unmasked; log sigma
//! is clamped to [-6, 2] before exponentiation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::qsim::{ObservableString, Outcome};
use crate::rng::Stream;
use crate::shadows::Shadow;
use crate::tensor::{backward, Gradients, Tape, Tensor, Var};

/// Decoder-input vocabulary index of the null/begin token.
pub const NULL_TOKEN: usize = 2;
const LOG_SIGMA_MIN: f64 = -6.0;
const LOG_SIGMA_MAX: f64 = 2.0;
const MASK_FILL: f64 = -1e30;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ModelError {
    #[error("embedding dimension {d} is not divisible by head count {heads}")]
    BadHeadSplit { d: usize, heads: usize },
    #[error("sequence length {got} does not match model width {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("prefix length {got} exceeds sequence length {expected}")]
    PrefixTooLong { expected: usize, got: usize },
    #[error("non-finite loss at {context}")]
    NonFiniteLoss { context: String },
}

/// Architecture and bottleneck configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyperparams {
    pub num_qubits: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub beta: f64,
}

impl Hyperparams {
    /// Defaults: (d, L) = (32, 1) for N <= 5, (128, 2) for N >= 6;
    /// ff_dim = 4d, four heads. The small-N width is deliberately
    /// narrow: the deterministic outcome rules of the cat state are
    /// parity-structured, which gradient descent only cracks after many
    /// optimizer steps, and a narrow model buys several times more
    /// steps per unit compute without losing the capacity to fit.
    pub fn defaults(num_qubits: usize, beta: f64) -> Hyperparams {
        let (d, layers) = if num_qubits <= 5 { (32, 1) } else { (128, 2) };
        Hyperparams {
            num_qubits,
            embed_dim: d,
            layers,
            heads: 4,
            ff_dim: 4 * d,
            beta,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim % self.heads != 0 {
            return Err(ModelError::BadHeadSplit {
                d: self.embed_dim,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

/// Per-position Gaussian over the latent variables.
#[derive(Debug, Clone)]
pub struct LatentDistribution {
    /// shape N x d
    pub mu: Tensor,
    /// shape N x d, strictly positive
    pub sigma: Tensor,
}

impl LatentDistribution {
    /// z = sigma * xi + mu with xi ~ N(0, 1).
    pub fn sample(&self, rng: &mut Stream) -> Tensor {
        let mut z = self.mu.clone();
        for (zv, sv) in z.data_mut().iter_mut().zip(self.sigma.data()) {
            *zv += sv * rng.normal();
        }
        z
    }

    /// Closed-form KL to the standard normal, in nats:
    /// 0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2).
    pub fn kl_to_standard_normal(&self) -> f64 {
        self.mu
            .data()
            .iter()
            .zip(self.sigma.data())
            .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - math::ln(s * s)))
            .sum()
    }
}

/// All trainable tensors, stored in a fixed canonical order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    hp: Hyperparams,
    tensors: Vec<Tensor>,
}

/// Canonical parameter directory: (name, shape) in storage order.
pub fn param_layout(hp: &Hyperparams) -> Vec<(String, Vec<usize>)> {
    let d = hp.embed_dim;
    let ff = hp.ff_dim;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("x_embed".into(), vec![3, d]),
        ("y_embed".into(), vec![3, d]),
    ];
    let attn = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("{prefix}.{w}"), vec![d, d]));
        }
    };
    let norm = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{prefix}.scale"), vec![d]));
        out.push((format!("{prefix}.shift"), vec![d]));
    };
    let feed_forward = |prefix: &str, out: &mut Vec<(String, Vec<usize>)>| {
        out.push((format!("{prefix}.w1"), vec![d, ff]));
        out.push((format!("{prefix}.b1"), vec![ff]));
        out.push((format!("{prefix}.w2"), vec![ff, d]));
        out.push((format!("{prefix}.b2"), vec![d]));
    };
    for l in 0..hp.layers {
        let p = format!("enc.{l}");
        attn(&format!("{p}.attn"), &mut out);
        norm(&format!("{p}.ln1"), &mut out);
        feed_forward(&format!("{p}.ff"), &mut out);
        norm(&format!("{p}.ln2"), &mut out);
    }
    out.push(("mu.w".into(), vec![d, d]));
    out.push(("mu.b".into(), vec![d]));
    out.push(("sigma.w".into(), vec![d, d]));
    out.push(("sigma.b".into(), vec![d]));
    for l in 0..hp.layers {
        let p = format!("dec.{l}");
        attn(&format!("{p}.self"), &mut out);
        norm(&format!("{p}.ln1"), &mut out);
        attn(&format!("{p}.cross"), &mut out);
        norm(&format!("{p}.ln2"), &mut out);
        feed_forward(&format!("{p}.ff"), &mut out);
        norm(&format!("{p}.ln3"), &mut out);
    }
    out.push(("out.w".into(), vec![d, 2]));
    out.push(("out.b".into(), vec![2]));
    out
}

impl ModelParams {
    /// Random initialization: weight matrices and embeddings N(0, 0.02),
    /// biases 0, norm scales 1, norm shifts 0, with two deliberate
    /// exceptions on the latent path. The log-sigma head bias starts at
    /// -3 so the latent begins low-noise: with unit posterior noise the
    /// decoder cannot find the weak initial mean signal, learns to
    /// ignore the latent, and the KL term then collapses the posterior
    /// for good. The x embedding and mu head start wide so distinct
    /// observable strings map to separated latent clusters at init;
    /// with the default tiny scale the clusters overlap inside the
    /// posterior noise and the decoder never receives a between-string
    /// gradient to amplify.
    pub fn init(hp: Hyperparams, rng: &mut Stream) -> Result<ModelParams, ModelError> {
        hp.validate()?;
        let d = hp.embed_dim as f64;
        let tensors = param_layout(&hp)
            .iter()
            .map(|(name, shape)| {
                if name.ends_with(".scale") {
                    Tensor::filled(shape, 1.0)
                } else if name == "sigma.b" {
                    Tensor::filled(shape, -3.0)
                } else if name.ends_with(".shift") || name.ends_with('b') && shape.len() == 1 {
                    Tensor::zeros(shape)
                } else if name == "x_embed" {
                    Tensor::randn(shape, 0.25, rng)
                } else if name == "mu.w" {
                    Tensor::randn(shape, 1.0 / math::sqrt(d), rng)
                } else {
                    Tensor::randn(shape, 0.02, rng)
                }
            })
            .collect();
        Ok(ModelParams { hp, tensors })
    }

    pub fn from_tensors(hp: Hyperparams, tensors: Vec<Tensor>) -> Result<ModelParams, ModelError> {
        hp.validate()?;
        let layout = param_layout(&hp);
        assert_eq!(layout.len(), tensors.len(), "parameter count mismatch");
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            assert_eq!(t.shape(), &shape[..], "shape mismatch for tensor {name}");
        }
        Ok(ModelParams { hp, tensors })
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hp
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn tensor_by_name(&self, name: &str) -> Option<&Tensor> {
        param_layout(&self.hp)
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn tensor_by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        param_layout(&self.hp)
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| &mut self.tensors[i])
    }

    /// Put every parameter on a tape, in canonical order.
    pub fn leaves<'t>(&self, tape: &'t Tape, requires_grad: bool) -> ModelVars<'t> {
        let vars: Vec<Var<'t>> = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        ModelVars::from_ordered(&self.hp, vars)
    }
}

struct AttnVars<'t> {
    wq: Var<'t>,
    wk: Var<'t>,
    wv: Var<'t>,
    wo: Var<'t>,
}

struct NormVars<'t> {
    scale: Var<'t>,
    shift: Var<'t>,
}

struct FfVars<'t> {
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
}

struct EncLayerVars<'t> {
    attn: AttnVars<'t>,
    ln1: NormVars<'t>,
    ff: FfVars<'t>,
    ln2: NormVars<'t>,
}

struct DecLayerVars<'t> {
    self_attn: AttnVars<'t>,
    ln1: NormVars<'t>,
    cross_attn: AttnVars<'t>,
    ln2: NormVars<'t>,
    ff: FfVars<'t>,
    ln3: NormVars<'t>,
}

/// Tape handles for every parameter, in architectural groups.
pub struct ModelVars<'t> {
    hp: Hyperparams,
    x_embed: Var<'t>,
    y_embed: Var<'t>,
    enc: Vec<EncLayerVars<'t>>,
    mu_w: Var<'t>,
    mu_b: Var<'t>,
    sigma_w: Var<'t>,
    sigma_b: Var<'t>,
    dec: Vec<DecLayerVars<'t>>,
    out_w: Var<'t>,
    out_b: Var<'t>,
    all: Vec<Var<'t>>,
}

impl<'t> ModelVars<'t> {
    pub fn from_ordered(hp: &Hyperparams, vars: Vec<Var<'t>>) -> ModelVars<'t> {
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("parameter list exhausted early");
        let attn = |next: &mut dyn FnMut() -> Var<'t>| AttnVars {
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
        };
        let norm = |next: &mut dyn FnMut() -> Var<'t>| NormVars {
            scale: next(),
            shift: next(),
        };
        let ff = |next: &mut dyn FnMut() -> Var<'t>| FfVars {
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        let x_embed = next();
        let y_embed = next();
        let enc = (0..hp.layers)
            .map(|_| EncLayerVars {
                attn: attn(&mut next),
                ln1: norm(&mut next),
                ff: ff(&mut next),
                ln2: norm(&mut next),
            })
            .collect();
        let mu_w = next();
        let mu_b = next();
        let sigma_w = next();
        let sigma_b = next();
        let dec = (0..hp.layers)
            .map(|_| DecLayerVars {
                self_attn: attn(&mut next),
                ln1: norm(&mut next),
                cross_attn: attn(&mut next),
                ln2: norm(&mut next),
                ff: ff(&mut next),
                ln3: norm(&mut next),
            })
            .collect();
        let out_w = next();
        let out_b = next();
        assert!(it.next().is_none(), "unconsumed parameters");
        ModelVars {
            hp: hp.clone(),
            x_embed,
            y_embed,
            enc,
            mu_w,
            mu_b,
            sigma_w,
            sigma_b,
            dec,
            out_w,
            out_b,
            all: vars,
        }
    }

    /// Every parameter Var in canonical order (for gradient extraction).
    pub fn all_vars(&self) -> &[Var<'t>] {
        &self.all
    }

    pub fn gradients_in_order(&self, grads: &Gradients) -> Vec<Tensor> {
        self.all.iter().map(|v| grads.of_or_zero(*v)).collect()
    }
}

/// Fixed sinusoidal positional encoding, shape (n, d).
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d / 2 {
            let freq = math::powf(10000.0, -((2 * i) as f64) / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + 2 * i] = math::sin(angle);
            data[pos * d + 2 * i + 1] = math::cos(angle);
        }
    }
    Tensor::new(&[n, d], data)
}

/// x + ones*b: adds a length-d bias row-wise to an (n, d) activation.
fn add_bias<'t>(tape: &'t Tape, x: Var<'t>, b: Var<'t>) -> Var<'t> {
    let n = x.shape()[0];
    let d = b.shape()[0];
    let ones = tape.constant(Tensor::filled(&[n, 1], 1.0));
    x.add(ones.matmul(b.reshape(&[1, d])))
}

/// Multi-head scaled dot-product attention. `mask` (nq, nk) marks
/// blocked positions with 1.
fn attention<'t>(
    hp: &Hyperparams,
    p: &AttnVars<'t>,
    queries: Var<'t>,
    keys_values: Var<'t>,
    mask: Option<&Tensor>,
) -> Var<'t> {
    let d = hp.embed_dim;
    let h = hp.heads;
    let dh = d / h;
    let nq = queries.shape()[0];
    let nk = keys_values.shape()[0];
    let split = |v: Var<'t>, n: usize| v.reshape(&[n, h, dh]).swap_batch_axis(); // (h, n, dh)
    let q = split(queries.matmul(p.wq), nq);
    let k = split(keys_values.matmul(p.wk), nk);
    let v = split(keys_values.matmul(p.wv), nk);
    let mut scores = q.matmul(k.transpose()).scale(1.0 / math::sqrt(dh as f64)); // (h, nq, nk)
    if let Some(m) = mask {
        let mut tiled = vec![0.0; h * nq * nk];
        for head in 0..h {
            tiled[head * nq * nk..(head + 1) * nq * nk].copy_from_slice(m.data());
        }
        scores = scores.masked_fill(&Tensor::new(&[h, nq, nk], tiled), MASK_FILL);
    }
    let weights = scores.softmax();
    let ctx = weights.matmul(v).swap_batch_axis().reshape(&[nq, d]);
    ctx.matmul(p.wo)
}

fn feed_forward<'t>(tape: &'t Tape, p: &FfVars<'t>, x: Var<'t>) -> Var<'t> {
    let hidden = add_bias(tape, x.matmul(p.w1), p.b1).gelu();
    add_bias(tape, hidden.matmul(p.w2), p.b2)
}

fn norm<'t>(p: &NormVars<'t>, x: Var<'t>) -> Var<'t> {
    x.layer_norm(p.scale, p.shift)
}

/// Causal mask: position i may attend to positions <= i.
fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = 1.0;
        }
    }
    Tensor::new(&[n, n], data)
}

/// Encoder forward on the tape: embedded x through L bidirectional
/// layers, to (mu, clamped log sigma), each (N, d).
pub fn encode_on_tape<'t>(
    tape: &'t Tape,
    vars: &ModelVars<'t>,
    x: &ObservableString,
) -> (Var<'t>, Var<'t>) {
    let hp = &vars.hp;
    let indices: Vec<usize> = x.0.iter().map(|p| p.index()).collect();
    let pos = tape.constant(positional_encoding(indices.len(), hp.embed_dim));
    let mut h = vars.x_embed.embedding_lookup(&indices).add(pos);
    for layer in &vars.enc {
        let attn_out = attention(hp, &layer.attn, h, h, None);
        h = norm(&layer.ln1, h.add(attn_out));
        let ff_out = feed_forward(tape, &layer.ff, h);
        h = norm(&layer.ln2, h.add(ff_out));
    }
    let mu = add_bias(tape, h.matmul(vars.mu_w), vars.mu_b);
    let log_sigma = add_bias(tape, h.matmul(vars.sigma_w), vars.sigma_b)
        .clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX);
    (mu, log_sigma)
}

/// Decoder forward on the tape. `decoder_input` are vocabulary indices of
/// the shifted-right outcome sequence (null prepended); `z` is (N, d).
/// Returns (len, 2) logits.
pub fn decode_on_tape<'t>(
    tape: &'t Tape,
    vars: &ModelVars<'t>,
    z: Var<'t>,
    decoder_input: &[usize],
) -> Var<'t> {
    let hp = &vars.hp;
    let len = decoder_input.len();
    let pos = tape.constant(positional_encoding(len, hp.embed_dim));
    let mask = causal_mask(len);
    let mut h = vars.y_embed.embedding_lookup(decoder_input).add(pos);
    for layer in &vars.dec {
        let self_out = attention(hp, &layer.self_attn, h, h, Some(&mask));
        h = norm(&layer.ln1, h.add(self_out));
        let cross_out = attention(hp, &layer.cross_attn, h, z, None);
        h = norm(&layer.ln2, h.add(cross_out));
        let ff_out = feed_forward(tape, &layer.ff, h);
        h = norm(&layer.ln3, h.add(ff_out));
    }
    add_bias(tape, h.matmul(vars.out_w), vars.out_b)
}

/// Shifted-right decoder input for teacher forcing: null then y_{1..N-1}.
pub fn shifted_input(y: &[Outcome]) -> Vec<usize> {
    let mut input = Vec::with_capacity(y.len());
    input.push(NULL_TOKEN);
    input.extend(y.iter().take(y.len().saturating_sub(1)).map(|o| o.index()));
    input
}

/// One-sample beta-VAE loss terms on the tape: (total, nll, kl).
/// `noise` is the reparametrization draw xi, shape (N, d).
pub fn loss_on_tape<'t>(
    tape: &'t Tape,
    vars: &ModelVars<'t>,
    shadow: &Shadow,
    noise: &Tensor,
) -> (Var<'t>, Var<'t>, Var<'t>) {
    let (mu, log_sigma) = encode_on_tape(tape, vars, &shadow.x);
    let sigma = log_sigma.exp();
    let xi = tape.constant(noise.clone());
    let z = sigma.mul(xi).add(mu);
    let logits = decode_on_tape(tape, vars, z, &shifted_input(&shadow.y));
    // negative log likelihood of the observed tokens
    let logp = logits.softmax().log();
    let n = shadow.y.len();
    let mut onehot = vec![0.0; n * 2];
    for (i, o) in shadow.y.iter().enumerate() {
        onehot[i * 2 + o.index()] = 1.0;
    }
    let mask = tape.constant(Tensor::new(&[n, 2], onehot));
    let nll = logp.mul(mask).sum_all().neg();
    // KL to the standard normal in closed form; log sigma^2 = 2 c with
    // c the clamped head output, so no log round trip is needed.
    let mu_sq = mu.mul(mu);
    let sigma_sq = log_sigma.scale(2.0).exp();
    let kl = mu_sq
        .add(sigma_sq)
        .sub(log_sigma.scale(2.0))
        .affine(1.0, -1.0)
        .sum_all()
        .scale(0.5);
    let total = nll.add(kl.scale(vars.hp.beta));
    (total, nll, kl)
}

/// Inference-only encoder: the latent Gaussian for an observable string.
pub fn encode(params: &ModelParams, x: &ObservableString) -> Result<LatentDistribution, ModelError> {
    if x.len() != params.hp.num_qubits {
        return Err(ModelError::LengthMismatch {
            expected: params.hp.num_qubits,
            got: x.len(),
        });
    }
    let tape = Tape::new();
    let vars = params.leaves(&tape, false);
    let (mu, log_sigma) = encode_on_tape(&tape, &vars, x);
    let mut sigma = log_sigma.value();
    for v in sigma.data_mut() {
        *v = math::exp(*v);
    }
    Ok(LatentDistribution {
        mu: mu.value(),
        sigma,
    })
}

/// Teacher-forcing logits (N x 2) for a full outcome sequence.
pub fn decode_logits(params: &ModelParams, z: &Tensor, y: &[Outcome]) -> Result<Tensor, ModelError> {
    if y.len() != params.hp.num_qubits {
        return Err(ModelError::LengthMismatch {
            expected: params.hp.num_qubits,
            got: y.len(),
        });
    }
    let tape = Tape::new();
    let vars = params.leaves(&tape, false);
    let zv = tape.constant(z.clone());
    Ok(decode_on_tape(&tape, &vars, zv, &shifted_input(y)).value())
}

/// Loss terms (total, nll, kl) for one shadow with a single
/// reparametrized z draw.
pub fn loss(params: &ModelParams, shadow: &Shadow, rng: &mut Stream) -> Result<(f64, f64, f64), ModelError> {
    if shadow.num_qubits() != params.hp.num_qubits {
        return Err(ModelError::LengthMismatch {
            expected: params.hp.num_qubits,
            got: shadow.num_qubits(),
        });
    }
    let tape = Tape::new();
    let vars = params.leaves(&tape, false);
    let noise = Tensor::randn(&[params.hp.num_qubits, params.hp.embed_dim], 1.0, rng);
    let (total, nll, kl) = loss_on_tape(&tape, &vars, shadow, &noise);
    let out = (total.item(), nll.item(), kl.item());
    if !out.0.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            context: format!("loss for shadow {}", shadow.to_line()),
        });
    }
    Ok(out)
}

/// Autoregressive completion: encode x, draw one z, then sample y_i for
/// i >= prefix length, conditioned on the fixed prefix. An empty prefix
/// gives unconditional generation from p(y|x).
pub fn complete_prompt(
    params: &ModelParams,
    x: &ObservableString,
    y_prefix: &[Outcome],
    rng: &mut Stream,
) -> Result<Vec<Outcome>, ModelError> {
    let n = params.hp.num_qubits;
    if x.len() != n {
        return Err(ModelError::LengthMismatch {
            expected: n,
            got: x.len(),
        });
    }
    if y_prefix.len() > n {
        return Err(ModelError::PrefixTooLong {
            expected: n,
            got: y_prefix.len(),
        });
    }
    let dist = encode(params, x)?;
    let z = dist.sample(rng);
    let mut y: Vec<Outcome> = y_prefix.to_vec();
    if y.len() == n {
        return Ok(y);
    }
    let tape = Tape::new();
    let vars = params.leaves(&tape, false);
    let zv = tape.constant(z);
    while y.len() < n {
        let i = y.len();
        // full-length decoder input with null padding beyond the known
        // prefix; causal masking makes the padding irrelevant at row i.
        let mut input = vec![NULL_TOKEN; n];
        for (slot, o) in input.iter_mut().skip(1).zip(&y) {
            *slot = o.index();
        }
        let logits = decode_on_tape(&tape, &vars, zv, &input).value();
        let row = &logits.data()[i * 2..i * 2 + 2];
        let max = row[0].max(row[1]);
        let p_minus = math::exp(row[0] - max);
        let p_plus = math::exp(row[1] - max);
        let pick = rng.categorical(&[p_minus, p_plus]);
        y.push(if pick == 0 { Outcome::Minus } else { Outcome::Plus });
    }
    Ok(y)
}

/// Exhaustive p(y|z) for a fixed z (test support, N <= ~12 is fine for
/// small N only).
pub fn conditional_probability(params: &ModelParams, z: &Tensor, y: &[Outcome]) -> Result<f64, ModelError> {
    let logits = decode_logits(params, z, y)?;
    let mut logp = 0.0;
    for (i, o) in y.iter().enumerate() {
        let row = &logits.data()[i * 2..i * 2 + 2];
        let max = row[0].max(row[1]);
        let denom = math::exp(row[0] - max) + math::exp(row[1] - max);
        logp += row[o.index()] - max - math::ln(denom);
    }
    Ok(math::exp(logp))
}

/// Batch-mean loss with gradient at the model's own KL weight.
pub fn batch_loss_and_grads(
    params: &ModelParams,
    batch: &[Shadow],
    noise_seed: u64,
) -> Result<(f64, f64, f64, Vec<Tensor>), ModelError> {
    batch_loss_and_grads_weighted(params, batch, noise_seed, params.hp.beta)
}

/// Batch-mean loss with gradient, reduced in example order, with an
/// explicit KL weight (the training loop ramps it up from zero so the
/// bottleneck penalty cannot collapse the latent channel before the
/// decoder starts using it). Returns (mean_total, mean_nll, mean_kl,
/// grads in canonical order); the reported total uses `kl_weight`.
pub fn batch_loss_and_grads_weighted(
    params: &ModelParams,
    batch: &[Shadow],
    noise_seed: u64,
    kl_weight: f64,
) -> Result<(f64, f64, f64, Vec<Tensor>), ModelError> {
    assert!(!batch.is_empty(), "batch_loss_and_grads: empty batch");
    let tape = Tape::new();
    let vars = params.leaves(&tape, true);
    let n = params.hp.num_qubits;
    let d = params.hp.embed_dim;
    let mut term_sum: Option<(Var<'_>, Var<'_>)> = None;
    let mut nll_sum = 0.0;
    let mut kl_sum = 0.0;
    for (i, shadow) in batch.iter().enumerate() {
        if shadow.num_qubits() != n {
            return Err(ModelError::LengthMismatch {
                expected: n,
                got: shadow.num_qubits(),
            });
        }
        let mut noise_rng = Stream::derive(noise_seed, &[i as u64]);
        let noise = Tensor::randn(&[n, d], 1.0, &mut noise_rng);
        let (_, nll, kl) = loss_on_tape(&tape, &vars, shadow, &noise);
        nll_sum += nll.item();
        kl_sum += kl.item();
        term_sum = Some(match term_sum {
            Some((na, ka)) => (na.add(nll), ka.add(kl)),
            None => (nll, kl),
        });
    }
    let count = batch.len() as f64;
    let (nll_total, kl_total) = term_sum.unwrap();
    let mean_total = nll_total
        .add(kl_total.scale(kl_weight))
        .scale(1.0 / count);
    let value = mean_total.item();
    if !value.is_finite() {
        return Err(ModelError::NonFiniteLoss {
            context: format!("batch of {} shadows", batch.len()),
        });
    }
    let grads = backward(mean_total);
    Ok((
        value,
        nll_sum / count,
        kl_sum / count,
        vars.gradients_in_order(&grads),
    ))
}
