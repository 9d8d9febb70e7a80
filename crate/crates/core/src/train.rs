//! On-the-fly training: every batch is freshly sampled from the shadow
//! source (no fixed dataset, no epochs), optimized with Adam, stopped on
//! a step cap or a loss plateau. Checkpoints serialize to a
//! self-describing byte format (JSON header + raw little-endian f64s).

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

use crate::math;
use crate::model::{self, Hyperparams, ModelParams};
use crate::rng::{derive_seed, Stream};
use crate::shadows::Shadow;
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8] = b"SLVAE1\n";
const CHECKPOINT_VERSION: u32 = 1;

/// Tag namespaces for stream derivation, so sampling and reparametrization
/// noise never share a stream.
const TAG_BATCH: u64 = 1;
const TAG_NOISE: u64 = 2;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss or gradient at step {step}; diagnostic checkpoint attached")]
    NonFinite {
        step: u64,
        checkpoint: Box<Checkpoint>,
    },
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error("invalid train config: {0}")]
    BadConfig(String),
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: wanted {wanted} bytes, had {had}")]
    Truncated { wanted: usize, had: usize },
    #[error("malformed checkpoint header: {0}")]
    BadHeader(String),
    #[error("tensor {name}: stored shape {stored:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
}

/// Everything a training run needs beyond the architecture.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub num_qubits: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// steps between metric log entries
    pub eval_every: u64,
    /// plateau detection window, in logged entries
    pub plateau_window: usize,
    /// relative improvement threshold for early stop
    pub plateau_tol: f64,
    /// steps over which the KL weight ramps linearly from 0 to beta;
    /// without the ramp the bottleneck penalty collapses the latent
    /// channel before the decoder starts using it. Defaults to 0 when
    /// absent so checkpoints written before the field existed still load.
    #[serde(default)]
    pub kl_warmup_steps: u64,
    /// decoupled weight decay per step (AdamW), off by default.
    /// Defaults to 0 when absent, as above.
    #[serde(default)]
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn defaults(num_qubits: usize, beta: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            beta,
            num_qubits,
            steps: 60_000,
            batch_size: 64,
            learning_rate: 1e-3,
            seed,
            eval_every: 1,
            plateau_window: 25_000,
            plateau_tol: 1e-3,
            kl_warmup_steps: 2_000,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.beta < 0.0 {
            return Err(TrainError::BadConfig("beta must be >= 0".into()));
        }
        if self.batch_size == 0 || self.learning_rate < 0.0 || self.plateau_window == 0 {
            return Err(TrainError::BadConfig(
                "batch_size, plateau_window must be positive; learning_rate >= 0".into(),
            ));
        }
        if self.eval_every == 0 {
            return Err(TrainError::BadConfig("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Adam accumulators, shapes mirroring the parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> OptimizerState {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimizerState {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Mean loss terms of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub total: f64,
    pub nll: f64,
    pub kl: f64,
}

/// One Adam step on a batch: backprop the batch-mean loss, update in
/// place. `noise_seed` seeds the per-example reparametrization draws.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut OptimizerState,
    batch: &[Shadow],
    learning_rate: f64,
    noise_seed: u64,
    kl_weight: f64,
    weight_decay: f64,
) -> Result<StepMetrics, TrainError> {
    let (total, nll, kl, grads) =
        model::batch_loss_and_grads_weighted(params, batch, noise_seed, kl_weight)?;
    opt.step += 1;
    let t = opt.step;
    let bias1 = 1.0 - math::powf(opt.beta1, t as f64);
    let bias2 = 1.0 - math::powf(opt.beta2, t as f64);
    for ((w, g), (m, v)) in params
        .tensors_mut()
        .iter_mut()
        .zip(&grads)
        .zip(opt.first_moment.iter_mut().zip(opt.second_moment.iter_mut()))
    {
        for i in 0..g.len() {
            let gv = g.data()[i];
            if !gv.is_finite() {
                opt.step = t - 1;
                let checkpoint = Box::new(Checkpoint::new(
                    params.clone(),
                    TrainConfig::defaults(params.hyperparams().num_qubits, params.hyperparams().beta, 0),
                    t - 1,
                    noise_seed,
                ));
                return Err(TrainError::NonFinite {
                    step: t - 1,
                    checkpoint,
                });
            }
            let mv = opt.beta1 * m.data()[i] + (1.0 - opt.beta1) * gv;
            let vv = opt.beta2 * v.data()[i] + (1.0 - opt.beta2) * gv * gv;
            m.data_mut()[i] = mv;
            v.data_mut()[i] = vv;
            let update = learning_rate * (mv / bias1) / (math::sqrt(vv / bias2) + opt.epsilon);
            w.data_mut()[i] -= update + learning_rate * weight_decay * w.data()[i];
        }
    }
    Ok(StepMetrics {
        step: t,
        total,
        nll,
        kl,
    })
}

/// Anything that can produce classical shadows on demand.
pub trait ShadowSource {
    fn draw(&self, rng: &mut Stream) -> Shadow;
}

impl ShadowSource for crate::qsim::StateVector {
    fn draw(&self, rng: &mut Stream) -> Shadow {
        crate::shadows::sample_shadow(self, rng)
    }
}

/// Result of a training run.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
    pub stopped_by_plateau: bool,
}

/// Full training loop. Runs until the step cap or until the moving
/// average of the logged loss stops improving by `plateau_tol`
/// (relative) over `plateau_window` logged entries.
pub fn train(config: &TrainConfig, source: &dyn ShadowSource) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let hp = Hyperparams::defaults(config.num_qubits, config.beta);
    train_with_hyperparams(config, hp, source)
}

pub fn train_with_hyperparams(
    config: &TrainConfig,
    hp: Hyperparams,
    source: &dyn ShadowSource,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut init_rng = Stream::derive(config.seed, &[0]);
    let mut params = ModelParams::init(hp, &mut init_rng)?;
    let mut opt = OptimizerState::new(&params);
    let mut metrics: Vec<StepMetrics> = Vec::new();
    let mut logged: Vec<f64> = Vec::new();
    let mut stopped_by_plateau = false;
    let mut step = 0u64;
    while step < config.steps {
        step += 1;
        let mut batch_rng = Stream::derive(config.seed, &[TAG_BATCH, step]);
        let batch: Vec<Shadow> = (0..config.batch_size)
            .map(|_| source.draw(&mut batch_rng))
            .collect();
        let noise_seed = derive_seed(config.seed, &[TAG_NOISE, step]);
        let ramp = if config.kl_warmup_steps == 0 {
            1.0
        } else {
            (step as f64 / config.kl_warmup_steps as f64).min(1.0)
        };
        let m = train_step(
            &mut params,
            &mut opt,
            &batch,
            config.learning_rate,
            noise_seed,
            config.beta * ramp,
            config.weight_decay,
        )?;
        if step % config.eval_every == 0 {
            metrics.push(m);
            // the ramp inflates the total while it lasts, so plateau
            // detection only sees fully weighted entries
            if step > config.kl_warmup_steps {
                logged.push(m.total);
            }
            if plateaued(&logged, config.plateau_window, config.plateau_tol) {
                stopped_by_plateau = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(params, config.clone(), step, config.seed),
        metrics,
        stopped_by_plateau,
    })
}

/// Plateau rule: with at least two full windows logged, stop when the
/// last window's mean fails to improve on the previous window's mean by
/// `tol` relative.
fn plateaued(logged: &[f64], window: usize, tol: f64) -> bool {
    if logged.len() < 2 * window {
        return false;
    }
    let recent = &logged[logged.len() - window..];
    let previous = &logged[logged.len() - 2 * window..logged.len() - window];
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let m_prev = mean(previous);
    let m_recent = mean(recent);
    (m_prev - m_recent) < tol * m_prev.abs().max(1e-12)
}

/// A restorable training snapshot.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub step: u64,
    pub rng_seed: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    version: u32,
    hyperparams: Hyperparams,
    config: TrainConfig,
    step: u64,
    rng_seed: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(params: ModelParams, config: TrainConfig, step: u64, rng_seed: u64) -> Checkpoint {
        Checkpoint {
            params,
            config,
            step,
            rng_seed,
        }
    }

    /// Magic bytes, u64 LE header length, UTF-8 JSON header, then raw
    /// little-endian f64 data per tensor in directory order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = model::param_layout(self.params.hyperparams());
        let mut offset = 0u64;
        let tensors: Vec<TensorEntry> = layout
            .iter()
            .map(|(name, shape)| {
                let entry = TensorEntry {
                    name: name.clone(),
                    shape: shape.clone(),
                    offset,
                };
                offset += (shape.iter().product::<usize>() * 8) as u64;
                entry
            })
            .collect();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            hyperparams: self.params.hyperparams().clone(),
            config: self.config.clone(),
            step: self.step,
            rng_seed: self.rng_seed,
            tensors,
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header_json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        for t in self.params.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
        let need = |wanted: usize| -> Result<(), CheckpointError> {
            if bytes.len() < wanted {
                Err(CheckpointError::Truncated {
                    wanted,
                    had: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(CHECKPOINT_MAGIC.len() + 8)?;
        if &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len_bytes = [0u8; 8];
        len_bytes.copy_from_slice(&bytes[CHECKPOINT_MAGIC.len()..CHECKPOINT_MAGIC.len() + 8]);
        let header_len = u64::from_le_bytes(len_bytes) as usize;
        let header_start = CHECKPOINT_MAGIC.len() + 8;
        need(header_start + header_len)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[header_start..header_start + header_len])
                .map_err(|e| CheckpointError::BadHeader(alloc::format!("{e}")))?;
        if header.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(header.version));
        }
        let expected_layout = model::param_layout(&header.hyperparams);
        if expected_layout.len() != header.tensors.len() {
            return Err(CheckpointError::BadHeader(
                "tensor directory length mismatch".into(),
            ));
        }
        let data_start = header_start + header_len;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for ((name, shape), entry) in expected_layout.iter().zip(&header.tensors) {
            if entry.name != *name || entry.shape != *shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: entry.name.clone(),
                    stored: entry.shape.clone(),
                    expected: shape.clone(),
                });
            }
            let count: usize = shape.iter().product();
            let begin = data_start + entry.offset as usize;
            need(begin + count * 8)?;
            let mut data = Vec::with_capacity(count);
            for i in 0..count {
                let mut b = [0u8; 8];
                b.copy_from_slice(&bytes[begin + i * 8..begin + (i + 1) * 8]);
                data.push(f64::from_le_bytes(b));
            }
            tensors.push(Tensor::new(shape, data));
        }
        let params = ModelParams::from_tensors(header.hyperparams, tensors)
            .map_err(|e| CheckpointError::BadHeader(alloc::format!("{e}")))?;
        Ok(Checkpoint {
            params,
            config: header.config,
            step: header.step,
            rng_seed: header.rng_seed,
        })
    }
}
