//! Model assessment by shadow tomography: draw fresh observable strings,
//! let an outcome sampler answer them, reconstruct the implied density
//! matrix from the resulting shadows, then score it against the target
//! state with fidelity and von Neumann entropy.

use alloc::string::String;
use alloc::vec::Vec;

use crate::model::{self, ModelParams};
use crate::qsim::{
    self, entropy_with_clamp_mass, fidelity, DensityMatrix, ObservableString, Outcome, StateVector,
};
use crate::rng::Stream;
use crate::shadows::{self, Shadow, ShadowBatch};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Qsim(#[from] qsim::QsimError),
    #[error(transparent)]
    Shadow(#[from] shadows::ShadowError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error("sampler width {sampler} does not match target width {target}")]
    WidthMismatch { sampler: usize, target: usize },
    #[error("invalid evaluation request: {0}")]
    BadRequest(String),
}

/// Anything that answers a measurement request: given a basis string,
/// produce one outcome per qubit.
pub trait OutcomeSampler {
    fn num_qubits(&self) -> usize;
    fn sample_outcomes(&self, x: &ObservableString, rng: &mut Stream) -> Vec<Outcome>;
}

/// Ground-truth sampler: outcomes follow the Born rule for the state.
impl OutcomeSampler for StateVector {
    fn num_qubits(&self) -> usize {
        StateVector::num_qubits(self)
    }

    fn sample_outcomes(&self, x: &ObservableString, rng: &mut Stream) -> Vec<Outcome> {
        // width is checked by the caller, so this cannot fail
        qsim::sample_measurement(self, x, rng).expect("basis width matches state")
    }
}

/// Trained generative model as a measurement oracle.
pub struct ModelSampler<'a> {
    params: &'a ModelParams,
}

impl<'a> ModelSampler<'a> {
    pub fn new(params: &'a ModelParams) -> ModelSampler<'a> {
        ModelSampler { params }
    }
}

impl OutcomeSampler for ModelSampler<'_> {
    fn num_qubits(&self) -> usize {
        self.params.hyperparams().num_qubits
    }

    fn sample_outcomes(&self, x: &ObservableString, rng: &mut Stream) -> Vec<Outcome> {
        model::complete_prompt(self.params, x, &[], rng).expect("basis width matches model")
    }
}

/// Basis-blind coin flips; reconstructs to the maximally mixed state in
/// expectation. Useful as a floor reference.
pub struct UniformSampler {
    pub num_qubits: usize,
}

impl OutcomeSampler for UniformSampler {
    fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    fn sample_outcomes(&self, _x: &ObservableString, rng: &mut Stream) -> Vec<Outcome> {
        (0..self.num_qubits)
            .map(|_| Outcome::from_bit(rng.below(2) as usize))
            .collect()
    }
}

/// Draw `count` shadows: uniformly random basis strings, outcomes from
/// the sampler. Deterministic in `seed`.
pub fn generate_model_shadows(
    sampler: &dyn OutcomeSampler,
    count: usize,
    seed: u64,
) -> Result<ShadowBatch, EvalError> {
    if count == 0 {
        return Err(EvalError::BadRequest("shadow count must be positive".into()));
    }
    let n = sampler.num_qubits();
    let mut basis_rng = Stream::derive(seed, &[1]);
    let mut outcome_rng = Stream::derive(seed, &[2]);
    let mut batch = ShadowBatch::new();
    for _ in 0..count {
        let x = ObservableString::random(n, &mut basis_rng);
        let y = sampler.sample_outcomes(&x, &mut outcome_rng);
        batch.push(Shadow::new(x, y)?)?;
    }
    Ok(batch)
}

/// Tomographic scorecard for one sampler against one target state.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub fidelity: f64,
    pub entropy_bits: f64,
    /// eigenvalue mass removed by clamping to [0, 1] before the entropy
    pub clamp_mass: f64,
    pub shadow_count: usize,
    pub seed: u64,
}

/// Score a density matrix directly: (fidelity, entropy bits, clamp mass).
pub fn assess_density(
    target: &StateVector,
    rho: &DensityMatrix,
) -> Result<(f64, f64, f64), EvalError> {
    let f = fidelity(target, rho)?;
    let (s_bits, clamp_mass) = entropy_with_clamp_mass(rho)?;
    Ok((f, s_bits, clamp_mass))
}

/// Full pipeline: shadows from the sampler, Monte Carlo reconstruction,
/// then fidelity and entropy against the target.
pub fn evaluate(
    sampler: &dyn OutcomeSampler,
    target: &StateVector,
    shadow_count: usize,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    if sampler.num_qubits() != target.num_qubits() {
        return Err(EvalError::WidthMismatch {
            sampler: sampler.num_qubits(),
            target: target.num_qubits(),
        });
    }
    let batch = generate_model_shadows(sampler, shadow_count, seed)?;
    let rho = shadows::reconstruct_mc(&batch)?;
    let (fidelity, entropy_bits, clamp_mass) = assess_density(target, &rho)?;
    Ok(EvalReport {
        fidelity,
        entropy_bits,
        clamp_mass,
        shadow_count,
        seed,
    })
}

/// One point on a bottleneck sweep, ready for tabulation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhasePoint {
    pub beta: f64,
    pub num_qubits: usize,
    pub seed: u64,
    pub shadow_count: usize,
    pub fidelity: f64,
    pub entropy_bits: f64,
    pub clamp_mass: f64,
    /// deterministic-completion accuracy on the all-Z prompt battery
    pub cat_task_acc: Option<f64>,
    /// accuracy on the all-X coherence-sign prompt
    pub xtest_acc: Option<f64>,
}
