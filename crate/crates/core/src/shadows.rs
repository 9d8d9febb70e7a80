//! Classical-shadow data: sampling (x, y) pairs from a state, the
//! single-snapshot reconstruction factor (1 + 3 y_i x_i)/2 per qubit, and
//! Monte-Carlo / exact tomographic reconstruction.
//!
//! The dataset line format ("XXYXZ\t---+-", one shadow per line, '#'
//! comments) is also defined here at the string level; file IO lives in
//! the companion crate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_complex::Complex64;

use crate::qsim::{self, DensityMatrix, ObservableString, Outcome, Pauli, QsimError, StateVector};
use crate::rng::Stream;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ShadowError {
    #[error("shadow x length {x_len} does not match y length {y_len}")]
    LengthMismatch { x_len: usize, y_len: usize },
    #[error("reconstruction requires a non-empty batch")]
    EmptyBatch,
    #[error("batch mixes shadows of {expected} and {got} qubits")]
    MixedWidths { expected: usize, got: usize },
    #[error("exact reconstruction enumerates 6^N terms; N={0} is too large (max {MAX_EXACT_QUBITS})")]
    TooLargeForExact(usize),
    #[error("line {line}: expected two tab-separated fields")]
    MissingField { line: usize },
    #[error("line {line}: invalid token '{token}' at position {position}")]
    BadToken {
        line: usize,
        token: char,
        position: usize,
    },
    #[error(transparent)]
    Qsim(#[from] QsimError),
}

/// Feasibility bound for [`reconstruct_exact`].
pub const MAX_EXACT_QUBITS: usize = 5;

/// One classical shadow: an observable string and its outcome sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Shadow {
    pub x: ObservableString,
    pub y: Vec<Outcome>,
}

impl Shadow {
    pub fn new(x: ObservableString, y: Vec<Outcome>) -> Result<Shadow, ShadowError> {
        if x.len() != y.len() {
            return Err(ShadowError::LengthMismatch {
                x_len: x.len(),
                y_len: y.len(),
            });
        }
        Ok(Shadow { x, y })
    }

    pub fn num_qubits(&self) -> usize {
        self.x.len()
    }

    /// Canonical dataset line: x tokens, a single tab, y tokens.
    pub fn to_line(&self) -> String {
        let ys: String = self.y.iter().map(|o| o.token()).collect();
        format!("{}\t{}", self.x.to_string(), ys)
    }

    /// Parse one dataset line; `line_no` is used in error reports.
    pub fn parse_line(line: &str, line_no: usize) -> Result<Shadow, ShadowError> {
        let (xs, ys) = line
            .split_once('\t')
            .ok_or(ShadowError::MissingField { line: line_no })?;
        let x = ObservableString::parse(xs).map_err(|e| match e {
            QsimError::BadToken { token, position } => ShadowError::BadToken {
                line: line_no,
                token,
                position,
            },
            other => ShadowError::Qsim(other),
        })?;
        let y = ys
            .chars()
            .enumerate()
            .map(|(i, c)| {
                Outcome::from_token(c).ok_or(ShadowError::BadToken {
                    line: line_no,
                    token: c,
                    position: i + 1,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Shadow::new(x, y)
    }
}

/// An ordered, width-homogeneous collection of shadows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShadowBatch {
    shadows: Vec<Shadow>,
}

impl ShadowBatch {
    pub fn new() -> ShadowBatch {
        ShadowBatch::default()
    }

    pub fn push(&mut self, s: Shadow) -> Result<(), ShadowError> {
        if let Some(first) = self.shadows.first() {
            if first.num_qubits() != s.num_qubits() {
                return Err(ShadowError::MixedWidths {
                    expected: first.num_qubits(),
                    got: s.num_qubits(),
                });
            }
        }
        self.shadows.push(s);
        Ok(())
    }

    pub fn from_shadows(shadows: Vec<Shadow>) -> Result<ShadowBatch, ShadowError> {
        let mut batch = ShadowBatch::new();
        for s in shadows {
            batch.push(s)?;
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.shadows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shadows.is_empty()
    }

    pub fn shadows(&self) -> &[Shadow] {
        &self.shadows
    }

    pub fn num_qubits(&self) -> Option<usize> {
        self.shadows.first().map(|s| s.num_qubits())
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Shadow> {
        self.shadows.iter()
    }
}

/// Draw one shadow from the data distribution: x uniform over {X,Y,Z}^N,
/// y from the Born rule.
pub fn sample_shadow(state: &StateVector, rng: &mut Stream) -> Shadow {
    let x = ObservableString::random(state.num_qubits(), rng);
    let y = qsim::sample_measurement(state, &x, rng).expect("lengths match by construction");
    Shadow { x, y }
}

/// Dense 2^N x 2^N snapshot factor tensor_i (1 + 3 y_i x_i)/2 for one
/// shadow. Hermitian with unit trace.
pub fn snapshot_matrix(s: &Shadow) -> Vec<Complex64> {
    let n = s.num_qubits();
    let dim = 1usize << n;
    let mut out = vec![Complex64::new(0.0, 0.0); dim * dim];
    let factors: Vec<[[Complex64; 2]; 2]> = s
        .x
        .0
        .iter()
        .zip(&s.y)
        .map(|(&p, &o)| single_qubit_factor(p, o))
        .collect();
    for row in 0..dim {
        for col in 0..dim {
            let mut v = Complex64::new(1.0, 0.0);
            for (i, f) in factors.iter().enumerate() {
                let rb = (row >> (n - 1 - i)) & 1;
                let cb = (col >> (n - 1 - i)) & 1;
                v *= f[rb][cb];
            }
            out[row * dim + col] = v;
        }
    }
    out
}

/// (1 + 3 y P)/2 for one qubit.
fn single_qubit_factor(p: Pauli, o: Outcome) -> [[Complex64; 2]; 2] {
    let m = p.matrix();
    let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            let eye = if r == c { 1.0 } else { 0.0 };
            out[r][c] = (Complex64::new(eye, 0.0) + m[r][c] * (3.0 * o.sign())) * 0.5;
        }
    }
    out
}

/// Running-mean accumulator for snapshot matrices. Holds one 2^N x 2^N
/// buffer regardless of how many shadows are folded in.
pub struct ShadowAccumulator {
    num_qubits: usize,
    sum: Vec<Complex64>,
    count: u64,
    scratch_factors: Vec<[[Complex64; 2]; 2]>,
}

impl ShadowAccumulator {
    pub fn new(num_qubits: usize) -> ShadowAccumulator {
        let dim = 1usize << num_qubits;
        ShadowAccumulator {
            num_qubits,
            sum: vec![Complex64::new(0.0, 0.0); dim * dim],
            count: 0,
            scratch_factors: Vec::with_capacity(num_qubits),
        }
    }

    pub fn add(&mut self, s: &Shadow) -> Result<(), ShadowError> {
        self.add_weighted(s, 1.0)
    }

    /// Fold in a shadow with a probability weight (used by the exact
    /// enumeration).
    pub fn add_weighted(&mut self, s: &Shadow, weight: f64) -> Result<(), ShadowError> {
        if s.num_qubits() != self.num_qubits {
            return Err(ShadowError::MixedWidths {
                expected: self.num_qubits,
                got: s.num_qubits(),
            });
        }
        let n = self.num_qubits;
        let dim = 1usize << n;
        self.scratch_factors.clear();
        for (&p, &o) in s.x.0.iter().zip(&s.y) {
            self.scratch_factors.push(single_qubit_factor(p, o));
        }
        for row in 0..dim {
            for col in 0..dim {
                let mut v = Complex64::new(weight, 0.0);
                for (i, f) in self.scratch_factors.iter().enumerate() {
                    let rb = (row >> (n - 1 - i)) & 1;
                    let cb = (col >> (n - 1 - i)) & 1;
                    v *= f[rb][cb];
                }
                self.sum[row * dim + col] += v;
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Mean of everything folded in so far, normalized by `total_weight`
    /// (the shadow count for Monte-Carlo averaging).
    pub fn mean(&self, total_weight: f64) -> Result<DensityMatrix, ShadowError> {
        if self.count == 0 {
            return Err(ShadowError::EmptyBatch);
        }
        let elements = self.sum.iter().map(|v| v / total_weight).collect();
        Ok(DensityMatrix::from_parts_unchecked(self.num_qubits, elements))
    }
}

/// Monte-Carlo shadow reconstruction: the arithmetic mean of the
/// snapshot matrices of a batch. Hermitian, unit trace; not necessarily
/// positive.
pub fn reconstruct_mc(batch: &ShadowBatch) -> Result<DensityMatrix, ShadowError> {
    let n = batch.num_qubits().ok_or(ShadowError::EmptyBatch)?;
    let mut acc = ShadowAccumulator::new(n);
    for s in batch.iter() {
        acc.add(s)?;
    }
    acc.mean(batch.len() as f64)
}

/// Exact expectation of the snapshot factor under the data distribution:
/// sum_x 3^{-N} sum_y p(y|x) (1 + 3 y x)/2. Equals |state><state| for any
/// pure state; used as the tomography test oracle.
pub fn reconstruct_exact(state: &StateVector) -> Result<DensityMatrix, ShadowError> {
    let n = state.num_qubits();
    if n > MAX_EXACT_QUBITS {
        return Err(ShadowError::TooLargeForExact(n));
    }
    let dim = 1usize << n;
    let p_x = 1.0 / 3u64.pow(n as u32) as f64;
    let mut acc = ShadowAccumulator::new(n);
    let mut total_weight = 0.0;
    for x in ObservableString::enumerate(n) {
        let dist = qsim::outcome_distribution(state, &x)?;
        for (y_idx, &p) in dist.iter().enumerate().take(dim) {
            if p == 0.0 {
                continue;
            }
            let y: Vec<Outcome> = (0..n).map(|i| Outcome::from_bit(y_idx >> (n - 1 - i))).collect();
            let w = p_x * p;
            acc.add_weighted(&Shadow { x: x.clone(), y }, w)?;
            total_weight += w;
        }
    }
    // total_weight is 1 up to rounding; normalize by the exact total so
    // the trace is exactly 1.
    acc.mean(total_weight)
}
