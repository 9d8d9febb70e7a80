//! Prompt batteries: fill in the final outcome of a measurement record
//! and score the completions. Where quantum mechanics fixes the answer
//! (cat polarities, pure-X parity) the battery reports accuracy; where
//! it does not (the Z coherence probe, mixed-sign prefixes) it reports
//! the completion frequency itself.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::model::{self, ModelParams};
use crate::qsim::{self, born_probability, ObservableString, Outcome, Pauli, StateVector};
use crate::rng::Stream;

/// Conditional probabilities closer to 0 or 1 than this count as a
/// point mass, making accuracy well defined.
const DETERMINISM_EPS: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error(transparent)]
    Qsim(#[from] qsim::QsimError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error("prompt prefix must cover positions 1..N-1: got {got} outcomes for {n} qubits")]
    BadPrefix { got: usize, n: usize },
    #[error("prompt width {prompt} does not match model width {model}")]
    WidthMismatch { prompt: usize, model: usize },
    #[error("invalid task request: {0}")]
    BadRequest(String),
    #[error("prompt prefix has zero probability under the reference state")]
    ImpossiblePrefix,
}

/// A single-blank prompt: the full basis string, outcomes for every
/// position but the last, and how many completions to draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub x: ObservableString,
    pub y_prefix: Vec<Outcome>,
    pub trials: usize,
}

impl PromptSpec {
    pub fn new(x: ObservableString, y_prefix: Vec<Outcome>, trials: usize) -> Result<PromptSpec, TaskError> {
        if x.is_empty() || y_prefix.len() + 1 != x.len() {
            return Err(TaskError::BadPrefix {
                got: y_prefix.len(),
                n: x.len(),
            });
        }
        if trials == 0 {
            return Err(TaskError::BadRequest("trials must be positive".into()));
        }
        Ok(PromptSpec { x, y_prefix, trials })
    }
}

/// Tally of the blank position over all trials.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TaskResult {
    pub frequency_plus: f64,
    /// agreement with the quantum-determined token; absent when the
    /// reference conditional is not a point mass
    pub accuracy: Option<f64>,
    /// mean absolute deviation of the completion sign across trials
    pub mean_deviation: f64,
    pub trials: usize,
}

impl TaskResult {
    pub fn predicted_polarization(&self) -> f64 {
        2.0 * self.frequency_plus - 1.0
    }
}

/// Anything that can fill in the final blank of a prompt.
pub trait PromptCompleter {
    fn num_qubits(&self) -> usize;
    fn complete_last(&self, x: &ObservableString, prefix: &[Outcome], rng: &mut Stream) -> Outcome;
}

impl PromptCompleter for ModelParams {
    fn num_qubits(&self) -> usize {
        self.hyperparams().num_qubits
    }

    fn complete_last(&self, x: &ObservableString, prefix: &[Outcome], rng: &mut Stream) -> Outcome {
        let y = model::complete_prompt(self, x, prefix, rng).expect("prompt width matches model");
        *y.last().expect("non-empty completion")
    }
}

/// Ground-truth completer sampling the exact Born conditional.
impl PromptCompleter for StateVector {
    fn num_qubits(&self) -> usize {
        StateVector::num_qubits(self)
    }

    fn complete_last(&self, x: &ObservableString, prefix: &[Outcome], rng: &mut Stream) -> Outcome {
        let (p_plus, p_minus) = conditional_weights(self, x, prefix).expect("prompt width matches state");
        if rng.categorical(&[p_minus, p_plus]) == 1 {
            Outcome::Plus
        } else {
            Outcome::Minus
        }
    }
}

/// Prefix-blind coin flips.
pub struct CoinCompleter {
    pub num_qubits: usize,
}

impl PromptCompleter for CoinCompleter {
    fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    fn complete_last(&self, _x: &ObservableString, _prefix: &[Outcome], rng: &mut Stream) -> Outcome {
        Outcome::from_bit(rng.below(2) as usize)
    }
}

/// Unnormalized Born weights of '+' and '-' at the blank position.
fn conditional_weights(
    truth: &StateVector,
    x: &ObservableString,
    prefix: &[Outcome],
) -> Result<(f64, f64), qsim::QsimError> {
    let mut plus = prefix.to_vec();
    plus.push(Outcome::Plus);
    let mut minus = prefix.to_vec();
    minus.push(Outcome::Minus);
    Ok((
        born_probability(truth, x, &plus)?,
        born_probability(truth, x, &minus)?,
    ))
}

/// The quantum-determined blank token, when one exists.
pub fn deterministic_answer(
    truth: &StateVector,
    x: &ObservableString,
    prefix: &[Outcome],
) -> Result<Option<Outcome>, TaskError> {
    let (p_plus, p_minus) = conditional_weights(truth, x, prefix)?;
    let total = p_plus + p_minus;
    if total <= DETERMINISM_EPS {
        return Err(TaskError::ImpossiblePrefix);
    }
    let cond = p_plus / total;
    if cond >= 1.0 - DETERMINISM_EPS {
        Ok(Some(Outcome::Plus))
    } else if cond <= DETERMINISM_EPS {
        Ok(Some(Outcome::Minus))
    } else {
        Ok(None)
    }
}

/// Run one prompt: draw `trials` completions, tally the blank, and
/// score against the reference conditional when it is deterministic.
/// Each trial uses a derived stream, so tallies do not depend on
/// evaluation order.
pub fn run_prompt(
    model: &dyn PromptCompleter,
    truth: &StateVector,
    spec: &PromptSpec,
    seed: u64,
) -> Result<TaskResult, TaskError> {
    if model.num_qubits() != spec.x.len() {
        return Err(TaskError::WidthMismatch {
            prompt: spec.x.len(),
            model: model.num_qubits(),
        });
    }
    if truth.num_qubits() != spec.x.len() {
        return Err(TaskError::WidthMismatch {
            prompt: spec.x.len(),
            model: truth.num_qubits(),
        });
    }
    let target = deterministic_answer(truth, &spec.x, &spec.y_prefix)?;
    let mut plus_count = 0usize;
    for trial in 0..spec.trials {
        let mut rng = Stream::derive(seed, &[trial as u64]);
        if model.complete_last(&spec.x, &spec.y_prefix, &mut rng) == Outcome::Plus {
            plus_count += 1;
        }
    }
    let frequency_plus = plus_count as f64 / spec.trials as f64;
    let accuracy = target.map(|t| match t {
        Outcome::Plus => frequency_plus,
        Outcome::Minus => 1.0 - frequency_plus,
    });
    // signs are +-1, so the mean absolute deviation has the closed form
    // 2 f (1 - f) * 2
    let mean_deviation = 4.0 * frequency_plus * (1.0 - frequency_plus);
    Ok(TaskResult {
        frequency_plus,
        accuracy,
        mean_deviation,
        trials: spec.trials,
    })
}

fn uniform_prefix(n: usize, o: Outcome) -> Vec<Outcome> {
    vec![o; n - 1]
}

fn all_pauli(n: usize, p: Pauli) -> ObservableString {
    ObservableString(vec![p; n])
}

/// Both cat polarities and their combined accuracy.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClassificationResult {
    pub cat_plus: TaskResult,
    pub cat_minus: TaskResult,
    pub combined_accuracy: f64,
}

/// Alive/dead classification: all-Z basis, uniform prefix of each
/// polarity, blank determined by the prefix.
pub fn classification_battery(
    model: &dyn PromptCompleter,
    truth: &StateVector,
    trials: usize,
    seed: u64,
) -> Result<ClassificationResult, TaskError> {
    let n = model.num_qubits();
    let x = all_pauli(n, Pauli::Z);
    let plus_spec = PromptSpec::new(x.clone(), uniform_prefix(n, Outcome::Plus), trials)?;
    let minus_spec = PromptSpec::new(x, uniform_prefix(n, Outcome::Minus), trials)?;
    let cat_plus = run_prompt(model, truth, &plus_spec, seed)?;
    let cat_minus = run_prompt(model, truth, &minus_spec, seed.wrapping_add(1))?;
    let a_plus = cat_plus.accuracy.expect("cat+ prompt is deterministic");
    let a_minus = cat_minus.accuracy.expect("cat- prompt is deterministic");
    Ok(ClassificationResult {
        cat_plus,
        cat_minus,
        combined_accuracy: 0.5 * (a_plus + a_minus),
    })
}

/// Coherence probes: a Z blank after X measurements must stay unbiased,
/// while an all-X record fixes the blank through the string parity law.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoherenceResult {
    pub z_test: TaskResult,
    pub x_test: TaskResult,
    pub x_test_accuracy: f64,
}

pub fn coherence_battery(
    model: &dyn PromptCompleter,
    truth: &StateVector,
    trials: usize,
    seed: u64,
) -> Result<CoherenceResult, TaskError> {
    let n = model.num_qubits();
    let mut z_probe = vec![Pauli::X; n];
    z_probe[n - 1] = Pauli::Z;
    let z_spec = PromptSpec::new(ObservableString(z_probe), uniform_prefix(n, Outcome::Plus), trials)?;
    let x_spec = PromptSpec::new(all_pauli(n, Pauli::X), uniform_prefix(n, Outcome::Plus), trials)?;
    let z_test = run_prompt(model, truth, &z_spec, seed)?;
    let x_test = run_prompt(model, truth, &x_spec, seed.wrapping_add(1))?;
    let x_test_accuracy = x_test.accuracy.expect("all-X uniform prompt is deterministic");
    Ok(CoherenceResult {
        z_test,
        x_test,
        x_test_accuracy,
    })
}

/// One all-Z prompt in the interpolation sweep.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InterpolationRow {
    /// prefix tokens, first qubit first
    pub prefix: String,
    /// average sign of the prefix outcomes
    pub observed_mean: f64,
    /// 2 * frequency_plus - 1 at the blank
    pub predicted_polarization: f64,
    /// dispersion across trials within this prefix
    pub trial_deviation: f64,
}

/// Prefixes sharing an observed mean, with both aggregation flavors of
/// the dispersion reported separately.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InterpolationGroup {
    pub observed_mean: f64,
    pub predicted_polarization: f64,
    /// dispersion of per-prefix predictions around the group mean
    pub prefix_deviation: f64,
    /// mean of the per-prefix trial dispersions
    pub trial_deviation: f64,
    pub prefix_count: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InterpolationTable {
    pub rows: Vec<InterpolationRow>,
    pub groups: Vec<InterpolationGroup>,
}

/// All-Z basis, every sign pattern of length N-1 as a prefix. Mixed
/// patterns have zero probability under the cat state, so the blank is
/// deliberately out of distribution there; no determinism check is
/// applied and the frequency is reported as is.
pub fn ood_interpolation(
    model: &dyn PromptCompleter,
    trials: usize,
    seed: u64,
) -> Result<InterpolationTable, TaskError> {
    if trials == 0 {
        return Err(TaskError::BadRequest("trials must be positive".into()));
    }
    let n = model.num_qubits();
    if n < 2 {
        return Err(TaskError::BadRequest("interpolation needs at least 2 qubits".into()));
    }
    let x = all_pauli(n, Pauli::Z);
    let prefix_len = n - 1;
    let mut rows = Vec::with_capacity(1 << prefix_len);
    for pattern in 0..(1u32 << prefix_len) {
        // bit 0 of the pattern is the first qubit; set bit means '-'
        let prefix: Vec<Outcome> = (0..prefix_len)
            .map(|i| {
                if pattern >> i & 1 == 1 {
                    Outcome::Minus
                } else {
                    Outcome::Plus
                }
            })
            .collect();
        let observed_mean =
            prefix.iter().map(|o| o.sign()).sum::<f64>() / prefix_len as f64;
        let mut plus_count = 0usize;
        for trial in 0..trials {
            let mut rng = Stream::derive(seed, &[pattern as u64, trial as u64]);
            if model.complete_last(&x, &prefix, &mut rng) == Outcome::Plus {
                plus_count += 1;
            }
        }
        let f = plus_count as f64 / trials as f64;
        rows.push(InterpolationRow {
            prefix: prefix.iter().map(|o| o.token()).collect(),
            observed_mean,
            predicted_polarization: 2.0 * f - 1.0,
            trial_deviation: 4.0 * f * (1.0 - f),
        });
    }
    // group keys are multiples of 2/(N-1); sort by mean, then bucket
    let keys: Vec<i64> = rows
        .iter()
        // observed_mean * (N-1) is an exact integer (a sum of +-1 signs)
        .map(|r| (r.observed_mean * prefix_len as f64) as i64)
        .collect();
    let mut distinct: Vec<i64> = keys.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let mut groups = Vec::with_capacity(distinct.len());
    for key in distinct {
        let members: Vec<&InterpolationRow> = rows
            .iter()
            .zip(&keys)
            .filter(|(_, k)| **k == key)
            .map(|(r, _)| r)
            .collect();
        let count = members.len();
        let mean_pred =
            members.iter().map(|r| r.predicted_polarization).sum::<f64>() / count as f64;
        let prefix_deviation = members
            .iter()
            .map(|r| (r.predicted_polarization - mean_pred).abs())
            .sum::<f64>()
            / count as f64;
        let trial_deviation =
            members.iter().map(|r| r.trial_deviation).sum::<f64>() / count as f64;
        groups.push(InterpolationGroup {
            observed_mean: key as f64 / prefix_len as f64,
            predicted_polarization: mean_pred,
            prefix_deviation,
            trial_deviation,
            prefix_count: count,
        });
    }
    Ok(InterpolationTable { rows, groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::make_ghz;

    const TRIALS: usize = 2_000;

    #[test]
    fn oracle_is_perfect_on_deterministic_prompts() {
        let cat = make_ghz(3).unwrap();
        let cls = classification_battery(&cat, &cat, TRIALS, 5).unwrap();
        assert_eq!(cls.combined_accuracy, 1.0);
        let coh = coherence_battery(&cat, &cat, TRIALS, 5).unwrap();
        assert_eq!(coh.x_test_accuracy, 1.0);
        // Z blank after X measurements stays unbiased, 3 sigma band
        assert!((coh.z_test.frequency_plus - 0.5).abs() < 3.0 * 0.5 / (TRIALS as f64).sqrt());
        assert!(coh.z_test.accuracy.is_none());
    }

    #[test]
    fn coin_is_at_chance_everywhere() {
        let cat = make_ghz(3).unwrap();
        let coin = CoinCompleter { num_qubits: 3 };
        let band = 3.0 * 0.5 / (TRIALS as f64).sqrt();
        let cls = classification_battery(&coin, &cat, TRIALS, 9).unwrap();
        assert!((cls.combined_accuracy - 0.5).abs() < band);
        let coh = coherence_battery(&coin, &cat, TRIALS, 9).unwrap();
        assert!((coh.x_test_accuracy - 0.5).abs() < band);
        let table = ood_interpolation(&coin, TRIALS, 9).unwrap();
        for g in &table.groups {
            assert!(g.predicted_polarization.abs() < 3.0 * band);
        }
    }

    #[test]
    fn oracle_interpolation_endpoints_are_in_distribution() {
        let cat = make_ghz(3).unwrap();
        let table = ood_interpolation(&cat, 500, 2).unwrap();
        assert_eq!(table.rows.len(), 4);
        assert_eq!(table.groups.len(), 3);
        let lo = table.groups.first().unwrap();
        let hi = table.groups.last().unwrap();
        assert_eq!(lo.observed_mean, -1.0);
        assert_eq!(hi.observed_mean, 1.0);
        assert_eq!(lo.predicted_polarization, -1.0);
        assert_eq!(hi.predicted_polarization, 1.0);
    }

    #[test]
    fn determinism_detection_matches_quantum_mechanics() {
        let cat = make_ghz(3).unwrap();
        let zzz = ObservableString::parse("ZZZ").unwrap();
        let xxx = ObservableString::parse("XXX").unwrap();
        let xxz = ObservableString::parse("XXZ").unwrap();
        let pp = vec![Outcome::Plus, Outcome::Plus];
        assert_eq!(
            deterministic_answer(&cat, &zzz, &pp).unwrap(),
            Some(Outcome::Plus)
        );
        assert_eq!(
            deterministic_answer(&cat, &xxx, &pp).unwrap(),
            Some(Outcome::Plus)
        );
        assert_eq!(deterministic_answer(&cat, &xxz, &pp).unwrap(), None);
        // mixed Z prefix has zero probability under the cat
        let pm = vec![Outcome::Plus, Outcome::Minus];
        assert!(matches!(
            deterministic_answer(&cat, &zzz, &pm),
            Err(TaskError::ImpossiblePrefix)
        ));
    }

    #[test]
    fn frequency_is_stable_under_doubling_trials() {
        let cat = make_ghz(3).unwrap();
        let x = ObservableString(vec![Pauli::X, Pauli::X, Pauli::Z]);
        let half = PromptSpec::new(x.clone(), vec![Outcome::Plus, Outcome::Plus], 1_000).unwrap();
        let full = PromptSpec::new(x, vec![Outcome::Plus, Outcome::Plus], 2_000).unwrap();
        let a = run_prompt(&cat, &cat, &half, 31).unwrap();
        let b = run_prompt(&cat, &cat, &full, 31).unwrap();
        let sigma = 0.5 * (1.0 / 1000f64.sqrt() + 1.0 / 2000f64.sqrt());
        assert!((a.frequency_plus - b.frequency_plus).abs() < 3.0 * sigma);
    }

    #[test]
    fn bad_prefix_lengths_are_rejected() {
        let x = ObservableString::parse("ZZZ").unwrap();
        assert!(PromptSpec::new(x.clone(), vec![Outcome::Plus], 10).is_err());
        assert!(PromptSpec::new(x.clone(), vec![Outcome::Plus; 3], 10).is_err());
        assert!(PromptSpec::new(x, vec![Outcome::Plus; 2], 0).is_err());
    }

    #[test]
    fn same_seed_same_tally() {
        let cat = make_ghz(3).unwrap();
        let spec = PromptSpec::new(
            ObservableString::parse("ZZZ").unwrap(),
            vec![Outcome::Plus, Outcome::Plus],
            200,
        )
        .unwrap();
        let a = run_prompt(&cat, &cat, &spec, 4).unwrap();
        let b = run_prompt(&cat, &cat, &spec, 4).unwrap();
        assert_eq!(a, b);
    }
}
