//! Exact statevector simulation for small qubit registers.
//!
//! Provides GHZ ("cat") state preparation, Born-rule outcome distributions
//! for per-qubit Pauli measurements, the analytic string-operator law of
//! the cat state, fidelity against a pure target, and von Neumann entropy
//! via a cyclic complex Jacobi eigensolver.
//!
//! Conventions: qubits are indexed left to right in token order, and
//! qubit 0 (the first token) is the most significant bit of the basis
//! index. Outcome `+` maps to bit 0, `-` to bit 1.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use num_complex::Complex64;

use crate::math;
use crate::rng::Stream;

/// Hard feasibility bound on register size (2^12 amplitudes).
pub const MAX_QUBITS: usize = 12;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum QsimError {
    #[error("qubit count {0} outside supported range 1..={MAX_QUBITS}")]
    QubitCountOutOfRange(usize),
    #[error("sequence length {got} does not match qubit count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("dimension mismatch: state has {state} qubits, matrix has {matrix}")]
    DimensionMismatch { state: usize, matrix: usize },
    #[error("matrix is not Hermitian within tolerance (max deviation {0:e})")]
    NotHermitian(f64),
    #[error("matrix trace {0} deviates from 1 beyond tolerance")]
    BadTrace(f64),
    #[error("string-operator law applies to pure-X/Y strings; found Z at position {0}")]
    ZInString(usize),
    #[error("invalid token '{token}' at position {position}")]
    BadToken { token: char, position: usize },
}

/// One of the three single-qubit Pauli observables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pauli {
    X,
    Y,
    Z,
}

impl Pauli {
    pub const ALL: [Pauli; 3] = [Pauli::X, Pauli::Y, Pauli::Z];

    /// The standard 2x2 matrix, row-major.
    pub fn matrix(self) -> [[Complex64; 2]; 2] {
        let zero = Complex64::new(0.0, 0.0);
        let one = Complex64::new(1.0, 0.0);
        let i = Complex64::new(0.0, 1.0);
        match self {
            Pauli::X => [[zero, one], [one, zero]],
            Pauli::Y => [[zero, -i], [i, zero]],
            Pauli::Z => [[one, zero], [zero, -one]],
        }
    }

    pub fn token(self) -> char {
        match self {
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }

    pub fn from_token(c: char) -> Option<Pauli> {
        match c {
            'X' => Some(Pauli::X),
            'Y' => Some(Pauli::Y),
            'Z' => Some(Pauli::Z),
            _ => None,
        }
    }

    /// Token index used by the model vocabulary (X:0, Y:1, Z:2).
    pub fn index(self) -> usize {
        match self {
            Pauli::X => 0,
            Pauli::Y => 1,
            Pauli::Z => 2,
        }
    }

    /// Rows are conjugated eigenvectors: amp'[o] = sum_z W[o][z] amp[z]
    /// gives amplitudes in this observable's eigenbasis (o=0 is the +1
    /// eigenvector).
    fn basis_change(self) -> [[Complex64; 2]; 2] {
        let h = 1.0 / math::sqrt(2.0);
        let r = |x: f64| Complex64::new(x, 0.0);
        let im = |x: f64| Complex64::new(0.0, x);
        match self {
            Pauli::X => [[r(h), r(h)], [r(h), r(-h)]],
            // eigenvectors (1, ±i)/sqrt(2), conjugated
            Pauli::Y => [[r(h), im(-h)], [r(h), im(h)]],
            Pauli::Z => [[r(1.0), r(0.0)], [r(0.0), r(1.0)]],
        }
    }
}

/// A binary measurement outcome, ±1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Outcome {
    Plus,
    Minus,
}

impl Outcome {
    pub fn sign(self) -> f64 {
        match self {
            Outcome::Plus => 1.0,
            Outcome::Minus => -1.0,
        }
    }

    /// Bit convention: + is 0, - is 1.
    pub fn bit(self) -> usize {
        match self {
            Outcome::Plus => 0,
            Outcome::Minus => 1,
        }
    }

    pub fn from_bit(b: usize) -> Outcome {
        if b & 1 == 0 {
            Outcome::Plus
        } else {
            Outcome::Minus
        }
    }

    pub fn token(self) -> char {
        match self {
            Outcome::Plus => '+',
            Outcome::Minus => '-',
        }
    }

    pub fn from_token(c: char) -> Option<Outcome> {
        match c {
            '+' => Some(Outcome::Plus),
            '-' => Some(Outcome::Minus),
            _ => None,
        }
    }

    /// Token index used by the model vocabulary (-:0, +:1; 2 is the
    /// decoder's null token).
    pub fn index(self) -> usize {
        match self {
            Outcome::Minus => 0,
            Outcome::Plus => 1,
        }
    }
}

/// A length-N sequence of Pauli observables, one per qubit.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObservableString(pub Vec<Pauli>);

impl ObservableString {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parse(s: &str) -> Result<ObservableString, QsimError> {
        s.chars()
            .enumerate()
            .map(|(i, c)| {
                Pauli::from_token(c).ok_or(QsimError::BadToken {
                    token: c,
                    position: i + 1,
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(ObservableString)
    }

    pub fn to_string(&self) -> String {
        self.0.iter().map(|p| p.token()).collect()
    }

    /// Uniformly random observable string of length `n`.
    pub fn random(n: usize, rng: &mut Stream) -> ObservableString {
        ObservableString((0..n).map(|_| Pauli::ALL[rng.below(3)]).collect())
    }

    /// Enumerate all 3^n strings in lexicographic (X<Y<Z) order.
    pub fn enumerate(n: usize) -> impl Iterator<Item = ObservableString> {
        let total = 3usize.pow(n as u32);
        (0..total).map(move |mut code| {
            let mut obs = vec![Pauli::X; n];
            for slot in obs.iter_mut().rev() {
                *slot = Pauli::ALL[code % 3];
                code /= 3;
            }
            ObservableString(obs)
        })
    }
}

/// A pure N-qubit state as 2^N complex amplitudes.
#[derive(Debug, Clone)]
pub struct StateVector {
    num_qubits: usize,
    amplitudes: Vec<Complex64>,
}

impl StateVector {
    /// Build from raw amplitudes; checks length and normalization (1e-12).
    pub fn new(num_qubits: usize, amplitudes: Vec<Complex64>) -> Result<StateVector, QsimError> {
        if num_qubits == 0 || num_qubits > MAX_QUBITS {
            return Err(QsimError::QubitCountOutOfRange(num_qubits));
        }
        if amplitudes.len() != 1 << num_qubits {
            return Err(QsimError::LengthMismatch {
                expected: 1 << num_qubits,
                got: amplitudes.len(),
            });
        }
        let norm: f64 = amplitudes.iter().map(|a| a.norm_sqr()).sum();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(QsimError::BadTrace(norm));
        }
        Ok(StateVector {
            num_qubits,
            amplitudes,
        })
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }
}

/// Prepare the N-qubit GHZ cat state (|0...0> + |1...1>)/sqrt(2).
pub fn make_ghz(num_qubits: usize) -> Result<StateVector, QsimError> {
    if num_qubits == 0 || num_qubits > MAX_QUBITS {
        return Err(QsimError::QubitCountOutOfRange(num_qubits));
    }
    let dim = 1usize << num_qubits;
    let mut amps = vec![Complex64::new(0.0, 0.0); dim];
    let a = Complex64::new(1.0 / math::sqrt(2.0), 0.0);
    amps[0] = a;
    amps[dim - 1] = a;
    Ok(StateVector {
        num_qubits,
        amplitudes: amps,
    })
}

/// Apply a 2x2 matrix to qubit `qubit` (token order) of `amps` in place.
fn apply_single_qubit(amps: &mut [Complex64], num_qubits: usize, qubit: usize, m: &[[Complex64; 2]; 2]) {
    let stride = 1usize << (num_qubits - 1 - qubit);
    let dim = amps.len();
    let mut base = 0;
    while base < dim {
        for offset in 0..stride {
            let i0 = base + offset;
            let i1 = i0 + stride;
            let a0 = amps[i0];
            let a1 = amps[i1];
            amps[i0] = m[0][0] * a0 + m[0][1] * a1;
            amps[i1] = m[1][0] * a0 + m[1][1] * a1;
        }
        base += stride << 1;
    }
}

/// Rotate a copy of the state into the joint eigenbasis of `x`.
fn rotate_to_basis(state: &StateVector, x: &ObservableString) -> Vec<Complex64> {
    let mut amps = state.amplitudes.clone();
    for (qubit, pauli) in x.0.iter().enumerate() {
        apply_single_qubit(&mut amps, state.num_qubits, qubit, &pauli.basis_change());
    }
    amps
}

/// Born-rule probabilities over all 2^N joint outcomes of measuring `x`.
/// Index bits follow the qubit/bit convention (+ -> 0, qubit 0 is MSB).
pub fn outcome_distribution(state: &StateVector, x: &ObservableString) -> Result<Vec<f64>, QsimError> {
    if x.len() != state.num_qubits {
        return Err(QsimError::LengthMismatch {
            expected: state.num_qubits,
            got: x.len(),
        });
    }
    Ok(rotate_to_basis(state, x).iter().map(|a| a.norm_sqr()).collect())
}

fn outcome_index(y: &[Outcome]) -> usize {
    y.iter().fold(0, |acc, o| (acc << 1) | o.bit())
}

/// Born-rule probability of outcome sequence `y` when measuring `x`.
pub fn born_probability(state: &StateVector, x: &ObservableString, y: &[Outcome]) -> Result<f64, QsimError> {
    if y.len() != state.num_qubits {
        return Err(QsimError::LengthMismatch {
            expected: state.num_qubits,
            got: y.len(),
        });
    }
    let dist = outcome_distribution(state, x)?;
    Ok(dist[outcome_index(y)])
}

/// Draw one joint outcome sequence for measuring `x` on `state`.
pub fn sample_measurement(
    state: &StateVector,
    x: &ObservableString,
    rng: &mut Stream,
) -> Result<Vec<Outcome>, QsimError> {
    let dist = outcome_distribution(state, x)?;
    let idx = rng.categorical(&dist);
    let n = state.num_qubits;
    Ok((0..n).map(|i| Outcome::from_bit(idx >> (n - 1 - i))).collect())
}

/// Analytic cat-state expectation of a pure-X/Y string operator:
/// +1 if n_Y = 0 mod 4, -1 if n_Y = 2 mod 4, 0 otherwise.
pub fn string_expectation(num_qubits: usize, s: &[Pauli]) -> Result<f64, QsimError> {
    if s.len() != num_qubits {
        return Err(QsimError::LengthMismatch {
            expected: num_qubits,
            got: s.len(),
        });
    }
    let mut n_y = 0usize;
    for (i, p) in s.iter().enumerate() {
        match p {
            Pauli::Z => return Err(QsimError::ZInString(i + 1)),
            Pauli::Y => n_y += 1,
            Pauli::X => {}
        }
    }
    Ok(match n_y % 4 {
        0 => 1.0,
        2 => -1.0,
        _ => 0.0,
    })
}

/// A 2^N x 2^N complex matrix, row-major. Hermitian with unit trace by
/// contract; positivity is not required (shadow estimators can be
/// indefinite).
#[derive(Debug, Clone)]
pub struct DensityMatrix {
    num_qubits: usize,
    elements: Vec<Complex64>,
}

impl DensityMatrix {
    /// Build from raw elements, validating hermiticity (1e-10) and unit
    /// trace (1e-9).
    pub fn new(num_qubits: usize, elements: Vec<Complex64>) -> Result<DensityMatrix, QsimError> {
        let dim = 1usize << num_qubits;
        if elements.len() != dim * dim {
            return Err(QsimError::LengthMismatch {
                expected: dim * dim,
                got: elements.len(),
            });
        }
        let rho = DensityMatrix {
            num_qubits,
            elements,
        };
        let dev = rho.hermiticity_deviation();
        if dev > 1e-10 {
            return Err(QsimError::NotHermitian(dev));
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > 1e-9 || tr.im.abs() > 1e-9 {
            return Err(QsimError::BadTrace(tr.re));
        }
        Ok(rho)
    }

    /// Construct without validation; caller guarantees the invariants.
    pub(crate) fn from_parts_unchecked(num_qubits: usize, elements: Vec<Complex64>) -> DensityMatrix {
        DensityMatrix {
            num_qubits,
            elements,
        }
    }

    /// |state><state|.
    pub fn from_pure(state: &StateVector) -> DensityMatrix {
        let dim = state.dim();
        let mut elements = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                elements.push(state.amplitudes[i] * state.amplitudes[j].conj());
            }
        }
        DensityMatrix {
            num_qubits: state.num_qubits,
            elements,
        }
    }

    /// The maximally mixed state 1/2^N.
    pub fn maximally_mixed(num_qubits: usize) -> DensityMatrix {
        let dim = 1usize << num_qubits;
        let mut elements = vec![Complex64::new(0.0, 0.0); dim * dim];
        for i in 0..dim {
            elements[i * dim + i] = Complex64::new(1.0 / dim as f64, 0.0);
        }
        DensityMatrix {
            num_qubits,
            elements,
        }
    }

    /// The decohered cat mixture (|0...0><0...0| + |1...1><1...1|)/2.
    pub fn decohered_cat(num_qubits: usize) -> DensityMatrix {
        let dim = 1usize << num_qubits;
        let mut elements = vec![Complex64::new(0.0, 0.0); dim * dim];
        elements[0] = Complex64::new(0.5, 0.0);
        elements[dim * dim - 1] = Complex64::new(0.5, 0.0);
        DensityMatrix {
            num_qubits,
            elements,
        }
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn dim(&self) -> usize {
        1 << self.num_qubits
    }

    pub fn elements(&self) -> &[Complex64] {
        &self.elements
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.elements[row * self.dim() + col]
    }

    pub fn trace(&self) -> Complex64 {
        let dim = self.dim();
        (0..dim).map(|i| self.elements[i * dim + i]).sum()
    }

    fn hermiticity_deviation(&self) -> f64 {
        let dim = self.dim();
        let mut worst = 0.0f64;
        for i in 0..dim {
            for j in i..dim {
                let d = (self.elements[i * dim + j] - self.elements[j * dim + i].conj()).norm();
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    /// Convex combination a*self + (1-a)*other.
    pub fn mix(&self, other: &DensityMatrix, a: f64) -> Result<DensityMatrix, QsimError> {
        if self.num_qubits != other.num_qubits {
            return Err(QsimError::DimensionMismatch {
                state: self.num_qubits,
                matrix: other.num_qubits,
            });
        }
        let elements = self
            .elements
            .iter()
            .zip(&other.elements)
            .map(|(x, y)| x * a + y * (1.0 - a))
            .collect();
        Ok(DensityMatrix {
            num_qubits: self.num_qubits,
            elements,
        })
    }
}

/// Fidelity <target|rho|target> of a (possibly indefinite) matrix against
/// a pure target state. Returns the real part.
pub fn fidelity(target: &StateVector, rho: &DensityMatrix) -> Result<f64, QsimError> {
    if target.num_qubits != rho.num_qubits {
        return Err(QsimError::DimensionMismatch {
            state: target.num_qubits,
            matrix: rho.num_qubits,
        });
    }
    let dim = target.dim();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..dim {
        let mut row = Complex64::new(0.0, 0.0);
        for j in 0..dim {
            row += rho.elements[i * dim + j] * target.amplitudes[j];
        }
        acc += target.amplitudes[i].conj() * row;
    }
    Ok(acc.re)
}

/// Eigenvalues of a Hermitian matrix by cyclic complex Jacobi rotations.
///
/// Converges when the off-diagonal Frobenius norm drops below 1e-12, with
/// a hard cap of 100 sweeps.
pub fn hermitian_eigenvalues(elements: &[Complex64], dim: usize) -> Vec<f64> {
    let mut a = elements.to_vec();
    let idx = |i: usize, j: usize| i * dim + j;
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..dim {
            for j in (i + 1)..dim {
                off += a[idx(i, j)].norm_sqr();
            }
        }
        if math::sqrt(2.0 * off) < 1e-12 {
            break;
        }
        for p in 0..dim {
            for q in (p + 1)..dim {
                let apq = a[idx(p, q)];
                let r = apq.norm();
                if r < 1e-300 {
                    continue;
                }
                // phase e^{i phi} of the pivot; D = diag(1, e^{-i phi})
                // makes the 2x2 block real symmetric.
                let phase = apq / r;
                let app = a[idx(p, p)].re;
                let aqq = a[idx(q, q)].re;
                // zeroing the block off-diagonal needs t^2 - 2 tau t - 1 = 0
                // with tau = (aqq - app) / (2 r); take the smaller root
                let tau = (aqq - app) / (2.0 * r);
                let t = if tau >= 0.0 {
                    -1.0 / (tau + math::sqrt(1.0 + tau * tau))
                } else {
                    1.0 / (-tau + math::sqrt(1.0 + tau * tau))
                };
                let c = 1.0 / math::sqrt(1.0 + t * t);
                let s = t * c;
                // V = D * R on the (p, q) subspace:
                // V = [[c, -s], [s e^{-i phi}, c e^{-i phi}]]
                let vpp = Complex64::new(c, 0.0);
                let vpq = Complex64::new(-s, 0.0);
                let vqp = phase.conj() * s;
                let vqq = phase.conj() * c;
                // columns: A <- A V
                for k in 0..dim {
                    let akp = a[idx(k, p)];
                    let akq = a[idx(k, q)];
                    a[idx(k, p)] = akp * vpp + akq * vqp;
                    a[idx(k, q)] = akp * vpq + akq * vqq;
                }
                // rows: A <- V^dagger A
                for k in 0..dim {
                    let apk = a[idx(p, k)];
                    let aqk = a[idx(q, k)];
                    a[idx(p, k)] = vpp.conj() * apk + vqp.conj() * aqk;
                    a[idx(q, k)] = vpq.conj() * apk + vqq.conj() * aqk;
                }
            }
        }
    }
    (0..dim).map(|i| a[idx(i, i)].re).collect()
}

/// Von Neumann entropy in bits, with the clamp rule for indefinite shadow
/// estimates: eigenvalues are clamped to [0, 1] and the clamped spectrum
/// renormalized to sum 1 before -sum(l log2 l).
///
/// Returns (entropy_bits, clamp_mass) where clamp_mass is the total
/// absolute eigenvalue mass removed by clamping.
pub fn entropy_with_clamp_mass(rho: &DensityMatrix) -> Result<(f64, f64), QsimError> {
    let dev = rho.hermiticity_deviation();
    if dev > 1e-8 {
        return Err(QsimError::NotHermitian(dev));
    }
    let eigs = hermitian_eigenvalues(&rho.elements, rho.dim());
    let mut clamp_mass = 0.0;
    let mut clamped: Vec<f64> = Vec::with_capacity(eigs.len());
    for l in eigs {
        let cl = l.clamp(0.0, 1.0);
        clamp_mass += (l - cl).abs();
        clamped.push(cl);
    }
    let total: f64 = clamped.iter().sum();
    let mut entropy = 0.0;
    if total > 0.0 {
        for l in clamped {
            let p = l / total;
            if p > 0.0 {
                entropy -= p * math::log2(p);
            }
        }
    }
    Ok((entropy, clamp_mass))
}

/// Von Neumann entropy in bits (see [`entropy_with_clamp_mass`]).
pub fn von_neumann_entropy(rho: &DensityMatrix) -> Result<f64, QsimError> {
    entropy_with_clamp_mass(rho).map(|(s, _)| s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn ghz_single_qubit_is_plus() {
        let s = make_ghz(1).unwrap();
        let h = 1.0 / 2.0f64.sqrt();
        assert!((s.amplitudes()[0].re - h).abs() < 1e-15);
        assert!((s.amplitudes()[1].re - h).abs() < 1e-15);
    }

    #[test]
    fn ghz_two_qubits_is_bell() {
        let s = make_ghz(2).unwrap();
        let h = 1.0 / 2.0f64.sqrt();
        let amps = s.amplitudes();
        assert!((amps[0].re - h).abs() < 1e-15);
        assert_eq!(amps[1], c(0.0, 0.0));
        assert_eq!(amps[2], c(0.0, 0.0));
        assert!((amps[3].re - h).abs() < 1e-15);
    }

    #[test]
    fn ghz_five_has_two_nonzero_amplitudes() {
        let s = make_ghz(5).unwrap();
        let h = 1.0 / 2.0f64.sqrt();
        let nonzero: Vec<_> = s
            .amplitudes()
            .iter()
            .enumerate()
            .filter(|(_, a)| a.norm() > 0.0)
            .collect();
        assert_eq!(nonzero.len(), 2);
        for (_, a) in nonzero {
            assert!((a.re - h).abs() < 1e-15);
        }
    }

    #[test]
    fn ghz_rejects_out_of_range() {
        assert!(matches!(make_ghz(0), Err(QsimError::QubitCountOutOfRange(0))));
        assert!(matches!(make_ghz(13), Err(QsimError::QubitCountOutOfRange(13))));
    }

    #[test]
    fn bell_zz_correlations() {
        let s = make_ghz(2).unwrap();
        let zz = ObservableString::parse("ZZ").unwrap();
        let pp = born_probability(&s, &zz, &[Outcome::Plus, Outcome::Plus]).unwrap();
        let pm = born_probability(&s, &zz, &[Outcome::Plus, Outcome::Minus]).unwrap();
        assert!((pp - 0.5).abs() < 1e-12);
        assert!(pm.abs() < 1e-12);
    }

    #[test]
    fn bell_xz_is_uniform() {
        let s = make_ghz(2).unwrap();
        let xz = ObservableString::parse("XZ").unwrap();
        for y0 in [Outcome::Plus, Outcome::Minus] {
            for y1 in [Outcome::Plus, Outcome::Minus] {
                let p = born_probability(&s, &xz, &[y0, y1]).unwrap();
                assert!((p - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn born_distribution_normalizes() {
        for n in 1..=5 {
            let s = make_ghz(n).unwrap();
            for x in ObservableString::enumerate(n) {
                let total: f64 = outcome_distribution(&s, &x).unwrap().iter().sum();
                assert!((total - 1.0).abs() < 1e-12, "n={n} x={}", x.to_string());
            }
        }
    }

    #[test]
    fn xxxxx_parity_is_plus_one() {
        let s = make_ghz(5).unwrap();
        let x = ObservableString::parse("XXXXX").unwrap();
        let dist = outcome_distribution(&s, &x).unwrap();
        let mut parity = 0.0;
        for (idx, p) in dist.iter().enumerate() {
            let sign = if (idx as u32).count_ones() % 2 == 0 { 1.0 } else { -1.0 };
            parity += p * sign;
        }
        assert!((parity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn born_length_mismatch() {
        let s = make_ghz(2).unwrap();
        let x = ObservableString::parse("ZZ").unwrap();
        let err = born_probability(&s, &x, &[Outcome::Plus]).unwrap_err();
        assert!(matches!(err, QsimError::LengthMismatch { .. }));
    }

    #[test]
    fn sampling_never_hits_zero_probability() {
        let s = make_ghz(2).unwrap();
        let zz = ObservableString::parse("ZZ").unwrap();
        let mut rng = Stream::new(3);
        for _ in 0..500 {
            let y = sample_measurement(&s, &zz, &mut rng).unwrap();
            assert_eq!(y[0], y[1]);
        }
    }

    #[test]
    fn eigenstate_always_plus() {
        let s = make_ghz(1).unwrap(); // |+>
        let x = ObservableString::parse("X").unwrap();
        let mut rng = Stream::new(5);
        for _ in 0..200 {
            assert_eq!(sample_measurement(&s, &x, &mut rng).unwrap(), vec![Outcome::Plus]);
        }
    }

    #[test]
    fn string_law_examples() {
        let xxxxx: Vec<Pauli> = "XXXXX".chars().map(|c| Pauli::from_token(c).unwrap()).collect();
        let xyyxx: Vec<Pauli> = "XYYXX".chars().map(|c| Pauli::from_token(c).unwrap()).collect();
        let xxxxy: Vec<Pauli> = "XXXXY".chars().map(|c| Pauli::from_token(c).unwrap()).collect();
        assert_eq!(string_expectation(5, &xxxxx).unwrap(), 1.0);
        assert_eq!(string_expectation(5, &xyyxx).unwrap(), -1.0);
        assert_eq!(string_expectation(5, &xxxxy).unwrap(), 0.0);
    }

    #[test]
    fn string_law_rejects_z() {
        let s: Vec<Pauli> = "XZX".chars().map(|c| Pauli::from_token(c).unwrap()).collect();
        assert_eq!(string_expectation(3, &s), Err(QsimError::ZInString(2)));
    }

    #[test]
    fn fidelity_identity_mixed_decohered() {
        for n in 1..=4 {
            let cat = make_ghz(n).unwrap();
            let rho = DensityMatrix::from_pure(&cat);
            assert!((fidelity(&cat, &rho).unwrap() - 1.0).abs() < 1e-12);
            let mixed = DensityMatrix::maximally_mixed(n);
            let expect = 1.0 / (1 << n) as f64;
            assert!((fidelity(&cat, &mixed).unwrap() - expect).abs() < 1e-12);
            let deco = DensityMatrix::decohered_cat(n);
            assert!((fidelity(&cat, &deco).unwrap() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_pure_mixed_decohered() {
        for n in 1..=4 {
            let cat = make_ghz(n).unwrap();
            let rho = DensityMatrix::from_pure(&cat);
            assert!(von_neumann_entropy(&rho).unwrap().abs() < 1e-9);
            let mixed = DensityMatrix::maximally_mixed(n);
            assert!((von_neumann_entropy(&mixed).unwrap() - n as f64).abs() < 1e-9);
            let deco = DensityMatrix::decohered_cat(n);
            assert!((von_neumann_entropy(&deco).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fidelity_is_linear_in_rho() {
        let cat = make_ghz(3).unwrap();
        let r1 = DensityMatrix::from_pure(&cat);
        let r2 = DensityMatrix::maximally_mixed(3);
        let a = 0.3;
        let mixed = r1.mix(&r2, a).unwrap();
        let f = fidelity(&cat, &mixed).unwrap();
        let f1 = fidelity(&cat, &r1).unwrap();
        let f2 = fidelity(&cat, &r2).unwrap();
        assert!((f - (a * f1 + (1.0 - a) * f2)).abs() < 1e-10);
    }

    #[test]
    fn density_matrix_rejects_non_hermitian() {
        let mut el = vec![c(0.5, 0.0); 4];
        el[1] = c(0.1, 0.2);
        el[2] = c(0.1, 0.2); // should be the conjugate
        assert!(matches!(DensityMatrix::new(1, el), Err(QsimError::NotHermitian(_))));
    }

    #[test]
    fn observable_string_parse_errors() {
        let err = ObservableString::parse("XXQ").unwrap_err();
        assert_eq!(err, QsimError::BadToken { token: 'Q', position: 3 });
    }
}
