//! Two-qubit polarization states: construction, validation, fidelity to
//! Ψ⁺, concurrence/tangle, and outcome probabilities under the passive
//! four-outcome analyzer.
//!
//! Matrices use the ordered basis {HH, HV, VH, VV}; the first qubit is
//! Alice's (signal), the second Bob's (idler).

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Matrix4, Vector2, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-12;
pub const POSITIVITY_FLOOR: f64 = -1e-10;

type C = Complex64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StateError {
    #[error("density matrix is not Hermitian (max |ρ - ρ†| = {0:e})")]
    NotHermitian(f64),
    #[error("density matrix trace is {0}, expected 1")]
    BadTrace(f64),
    #[error("density matrix has negative eigenvalue {0:e}")]
    NotPositive(f64),
    #[error("{name} = {value} outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("matrix file: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PolarizationOutcome {
    H,
    V,
    D,
    A,
}

impl PolarizationOutcome {
    pub const ALL: [PolarizationOutcome; 4] = [Self::H, Self::V, Self::D, Self::A];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_rectilinear(self) -> bool {
        matches!(self, Self::H | Self::V)
    }

    /// Jones vector of the projector, after rotating the analyzer by `theta` radians.
    pub fn jones(self, theta: f64) -> Vector2<C> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (x, y) = match self {
            Self::H => (1.0, 0.0),
            Self::V => (0.0, 1.0),
            Self::D => (s, s),
            Self::A => (s, -s),
        };
        let (sin, cos) = theta.sin_cos();
        Vector2::new(C::from(cos * x - sin * y), C::from(sin * x + cos * y))
    }
}

impl fmt::Display for PolarizationOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::H => "H",
            Self::V => "V",
            Self::D => "D",
            Self::A => "A",
        };
        f.write_str(s)
    }
}

/// Validated 4×4 density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoQubitState {
    rho: Matrix4<C>,
}

fn psi_plus_vector() -> Vector4<C> {
    let s = C::from(std::f64::consts::FRAC_1_SQRT_2);
    Vector4::new(C::from(0.0), s, s, C::from(0.0))
}

/// (|HH⟩ − |VV⟩)/√2.
fn phi_minus_vector() -> Vector4<C> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Vector4::new(C::from(s), C::from(0.0), C::from(0.0), C::from(-s))
}

fn projector(v: &Vector4<C>) -> Matrix4<C> {
    v * v.adjoint()
}

fn check_unit(name: &'static str, value: f64) -> Result<(), StateError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(StateError::OutOfRange { name, value })
    }
}

/// σy ⊗ σy in the {HH, HV, VH, VV} basis.
fn spin_flip() -> Matrix4<C> {
    let z = C::from(0.0);
    let one = C::from(1.0);
    Matrix4::new(
        z, z, z, -one, //
        z, z, one, z, //
        z, one, z, z, //
        -one, z, z, z,
    )
}

impl TwoQubitState {
    pub fn new(rho: Matrix4<C>) -> Result<Self, StateError> {
        let herm = (rho - rho.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        if herm > HERMITIAN_TOL {
            return Err(StateError::NotHermitian(herm));
        }
        let tr = rho.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(StateError::BadTrace(tr.re));
        }
        let min_eig = rho.symmetric_eigenvalues().min();
        if min_eig < POSITIVITY_FLOOR {
            return Err(StateError::NotPositive(min_eig));
        }
        Ok(TwoQubitState { rho })
    }

    /// Normalized pure state from a (not necessarily normalized) amplitude vector.
    pub fn pure(amplitudes: Vector4<C>) -> Result<Self, StateError> {
        let norm = amplitudes.norm();
        if !(norm > 0.0) {
            return Err(StateError::BadTrace(0.0));
        }
        Self::new(projector(&(amplitudes / C::from(norm))))
    }

    /// (|HV⟩ + |VH⟩)/√2.
    pub fn psi_plus() -> Self {
        TwoQubitState {
            rho: projector(&psi_plus_vector()),
        }
    }

    /// V·|Ψ⁺⟩⟨Ψ⁺| + (1−V)·(|Ψ⁺⟩⟨Ψ⁺| + |Φ⁻⟩⟨Φ⁻|)/2, i.e. Ψ⁺ with weight
    /// (1+V)/2 and Φ⁻ = (|HH⟩ − |VV⟩)/√2 with weight (1−V)/2. The noise flips
    /// correlations in both the H/V and D/A bases, giving intrinsic error
    /// (1−V)/2 in each, fidelity (1+V)/2 and concurrence V.
    pub fn colored_noise(visibility: f64) -> Result<Self, StateError> {
        check_unit("visibility", visibility)?;
        let rho = projector(&psi_plus_vector()) * C::from((1.0 + visibility) / 2.0)
            + projector(&phi_minus_vector()) * C::from((1.0 - visibility) / 2.0);
        Self::new(rho)
    }

    /// V·|Ψ⁺⟩⟨Ψ⁺| + (1−V)·(|HV⟩⟨HV| + |VH⟩⟨VH|)/2: noise diagonal in H/V,
    /// so H/V outcomes stay perfectly anticorrelated and only D/A errors
    /// appear.
    pub fn aligned_noise(visibility: f64) -> Result<Self, StateError> {
        check_unit("visibility", visibility)?;
        let mut rho = projector(&psi_plus_vector()) * C::from(visibility);
        let w = C::from((1.0 - visibility) / 2.0);
        rho[(1, 1)] += w;
        rho[(2, 2)] += w;
        Self::new(rho)
    }

    /// p·|Ψ⁺⟩⟨Ψ⁺| + (1−p)·I/4.
    pub fn werner(p: f64) -> Result<Self, StateError> {
        check_unit("p", p)?;
        let rho = projector(&psi_plus_vector()) * C::from(p)
            + Matrix4::identity() * C::from((1.0 - p) / 4.0);
        Self::new(rho)
    }

    pub fn maximally_mixed() -> Self {
        TwoQubitState {
            rho: Matrix4::identity() * C::from(0.25),
        }
    }

    pub fn matrix(&self) -> &Matrix4<C> {
        &self.rho
    }

    /// ⟨Ψ⁺|ρ|Ψ⁺⟩.
    pub fn fidelity_to_psi_plus(&self) -> f64 {
        let v = psi_plus_vector();
        (v.adjoint() * self.rho * v)[(0, 0)].re.clamp(0.0, 1.0)
    }

    /// Wootters concurrence: max(0, λ₁−λ₂−λ₃−λ₄) with λᵢ the decreasing square
    /// roots of the eigenvalues of ρ(σy⊗σy)ρ*(σy⊗σy).
    ///
    /// The λᵢ are taken as the singular values of τ = Wᵀ(σy⊗σy)W, where
    /// ρ = WW† from the eigendecomposition. Square-rooting eigenvalues of ρρ̃
    /// directly turns round-off near zero into errors of order 1e-8; here the
    /// small λᵢ are only perturbed to second order.
    pub fn concurrence(&self) -> Result<f64, StateError> {
        let eig = self.rho.symmetric_eigen();
        let mut w = eig.eigenvectors;
        for (j, d) in eig.eigenvalues.iter().enumerate() {
            w.column_mut(j).scale_mut(d.max(0.0).sqrt());
        }
        let tau = w.transpose() * spin_flip() * w;
        let mut lambdas: Vec<f64> = tau.singular_values().iter().copied().collect();
        if lambdas.iter().any(|l| !l.is_finite()) {
            return Err(StateError::Numeric(format!("singular values {lambdas:?}")));
        }
        lambdas.sort_by(|a, b| b.total_cmp(a));
        Ok((lambdas[0] - lambdas[1] - lambdas[2] - lambdas[3]).clamp(0.0, 1.0))
    }

    /// Square of the concurrence.
    pub fn tangle(&self) -> Result<f64, StateError> {
        self.concurrence().map(|c| c * c)
    }

    /// Tr[ρ(M_a ⊗ M_b)] with M_x = ½|x⟩⟨x| (unbiased passive basis choice).
    pub fn joint_probability(&self, a: PolarizationOutcome, b: PolarizationOutcome) -> f64 {
        self.joint_probability_rotated(a, b, 0.0, 0.0)
    }

    /// As [`joint_probability`](Self::joint_probability), with each analyzer
    /// rotated by a static misalignment angle (radians).
    pub fn joint_probability_rotated(
        &self,
        a: PolarizationOutcome,
        b: PolarizationOutcome,
        theta_a: f64,
        theta_b: f64,
    ) -> f64 {
        let va = a.jones(theta_a);
        let vb = b.jones(theta_b);
        let v = va.kronecker(&vb);
        let p = (v.adjoint() * self.rho * v)[(0, 0)].re;
        (0.25 * p).max(0.0)
    }

    /// All 16 joint probabilities, indexed `[alice][bob]` in H, V, D, A order.
    pub fn joint_distribution(&self, theta_a: f64, theta_b: f64) -> [[f64; 4]; 4] {
        let mut out = [[0.0; 4]; 4];
        for a in PolarizationOutcome::ALL {
            for b in PolarizationOutcome::ALL {
                out[a.index()][b.index()] = self.joint_probability_rotated(a, b, theta_a, theta_b);
            }
        }
        out
    }

    /// Error fractions (e_H, e_D) the state alone would produce.
    pub fn intrinsic_qber(&self) -> (f64, f64) {
        use PolarizationOutcome::*;
        let p = |a, b| self.joint_probability(a, b);
        let e_h = (p(H, H) + p(V, V)) / (p(H, H) + p(V, V) + p(H, V) + p(V, H));
        let e_d = (p(D, A) + p(A, D)) / (p(D, D) + p(A, A) + p(D, A) + p(A, D));
        (e_h, e_d)
    }

    /// Swap Alice and Bob.
    pub fn swapped(&self) -> Self {
        let perm = [0usize, 2, 1, 3];
        let rho = Matrix4::from_fn(|i, j| self.rho[(perm[i], perm[j])]);
        TwoQubitState { rho }
    }

    /// Apply the local unitary `ua ⊗ ub`.
    pub fn local_unitary(&self, ua: &Matrix2<C>, ub: &Matrix2<C>) -> Self {
        let u = ua.kronecker(ub);
        TwoQubitState {
            rho: u * self.rho * u.adjoint(),
        }
    }

    /// Text form read by [`FromStr`]: four rows of four `re+imi` entries.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# rho, basis order HH HV VH VV, row-major\n");
        for i in 0..4 {
            let row: Vec<String> = (0..4)
                .map(|j| {
                    let z = self.rho[(i, j)];
                    format!("{:+.17e}{:+.17e}i", z.re, z.im)
                })
                .collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

impl FromStr for TwoQubitState {
    type Err = StateError;

    /// 16 complex entries, row-major, separated by whitespace or commas.
    /// Entries use `a`, `bi`, `a+bi` (or `j`). `#` starts a comment.
    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut entries = Vec::with_capacity(16);
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("");
            for tok in line.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
                let z = Complex64::from_str(&tok.replace('j', "i")).map_err(|_| {
                    StateError::Parse(format!("line {}: cannot parse `{tok}` as complex", lineno + 1))
                })?;
                entries.push(z);
            }
        }
        if entries.len() != 16 {
            return Err(StateError::Parse(format!(
                "expected 16 entries, found {}",
                entries.len()
            )));
        }
        TwoQubitState::new(Matrix4::from_row_slice(&entries))
    }
}

#[cfg(test)]
mod tests {
    use super::PolarizationOutcome::*;
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn psi_plus_metrics() {
        let s = TwoQubitState::psi_plus();
        assert_abs_diff_eq!(s.fidelity_to_psi_plus(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.tangle().unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn psi_plus_joint_probabilities() {
        let s = TwoQubitState::psi_plus();
        // |<HV|Ψ+>|² = 1/2, times the two 1/2 splitter factors
        assert_abs_diff_eq!(s.joint_probability(H, V), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(s.joint_probability(V, H), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(s.joint_probability(H, H), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.joint_probability(V, V), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.joint_probability(D, D), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(s.joint_probability(A, A), 0.125, epsilon = 1e-15);
        assert_abs_diff_eq!(s.joint_probability(D, A), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.joint_probability(A, D), 0.0, epsilon = 1e-15);
        let total: f64 = s.joint_distribution(0.0, 0.0).iter().flatten().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn colored_noise_table_values() {
        assert_eq!(TwoQubitState::colored_noise(1.0).unwrap(), TwoQubitState::psi_plus());
        let s = TwoQubitState::colored_noise(0.978).unwrap();
        assert_abs_diff_eq!(s.fidelity_to_psi_plus(), 0.989, epsilon = 1e-12);
        assert_abs_diff_eq!(s.tangle().unwrap(), 0.978 * 0.978, epsilon = 1e-9);
        assert!(TwoQubitState::colored_noise(1.2).is_err());
        assert!(TwoQubitState::colored_noise(-0.1).is_err());
    }

    #[test]
    fn aligned_noise_keeps_rectilinear_correlations() {
        let s = TwoQubitState::aligned_noise(0.9).unwrap();
        assert_abs_diff_eq!(s.fidelity_to_psi_plus(), 0.95, epsilon = 1e-12);
        assert_abs_diff_eq!(s.concurrence().unwrap(), 0.9, epsilon = 1e-9);
        let (eh, ed) = s.intrinsic_qber();
        assert_abs_diff_eq!(eh, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(ed, 0.05, epsilon = 1e-12);
        assert_eq!(TwoQubitState::aligned_noise(1.0).unwrap(), TwoQubitState::psi_plus());
    }

    #[test]
    fn werner_examples() {
        assert_abs_diff_eq!(TwoQubitState::werner(0.0).unwrap().tangle().unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(TwoQubitState::werner(1.0).unwrap().tangle().unwrap(), 1.0, epsilon = 1e-9);
        let c = TwoQubitState::werner(0.9).unwrap().concurrence().unwrap();
        assert_abs_diff_eq!(c, 0.85, epsilon = 1e-9);
        assert!(TwoQubitState::werner(1.5).is_err());
    }

    #[test]
    fn fidelity_examples() {
        assert_abs_diff_eq!(TwoQubitState::maximally_mixed().fidelity_to_psi_plus(), 0.25, epsilon = 1e-15);
        let hv = TwoQubitState::pure(Vector4::new(C::from(0.0), C::from(1.0), C::from(0.0), C::from(0.0))).unwrap();
        assert_abs_diff_eq!(hv.fidelity_to_psi_plus(), 0.5, epsilon = 1e-15);
        let hh = TwoQubitState::pure(Vector4::new(C::from(1.0), C::from(0.0), C::from(0.0), C::from(0.0))).unwrap();
        assert_abs_diff_eq!(hh.tangle().unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn validation_rejects_bad_matrices() {
        let mut m = Matrix4::<C>::identity() * C::from(0.25);
        m[(0, 1)] = C::new(0.1, 0.0);
        assert!(matches!(TwoQubitState::new(m), Err(StateError::NotHermitian(_))));
        let m = Matrix4::<C>::identity() * C::from(0.3);
        assert!(matches!(TwoQubitState::new(m), Err(StateError::BadTrace(_))));
        let mut m = Matrix4::<C>::zeros();
        m[(0, 0)] = C::from(1.5);
        m[(1, 1)] = C::from(-0.5);
        assert!(matches!(TwoQubitState::new(m), Err(StateError::NotPositive(_))));
    }

    #[test]
    fn intrinsic_qber_of_colored_noise() {
        for v in [0.0, 0.5, 0.9, 0.978, 1.0] {
            let (eh, ed) = TwoQubitState::colored_noise(v).unwrap().intrinsic_qber();
            assert_abs_diff_eq!(eh, (1.0 - v) / 2.0, epsilon = 1e-12);
            assert_abs_diff_eq!(ed, (1.0 - v) / 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn text_round_trip() {
        let s = TwoQubitState::colored_noise(0.93).unwrap();
        let back: TwoQubitState = s.to_text().parse().unwrap();
        assert!((back.matrix() - s.matrix()).norm() < 1e-15);

        let text = "0.25 0 0 0\n0, 0.25, 0, 0\n0 0 0.25 0 # comment\n0 0 0 0.25\n";
        let mixed: TwoQubitState = text.parse().unwrap();
        assert_eq!(mixed, TwoQubitState::maximally_mixed());
        assert!("1 2 3".parse::<TwoQubitState>().is_err());
        assert!(matches!("0.25 x 0 0".parse::<TwoQubitState>(), Err(StateError::Parse(_))));
    }

    #[test]
    fn complex_entries_parse() {
        let text = "0 0 0 0\n0 0.5 0.5i 0\n0 -0.5j 0.5 0\n0 0 0 0";
        let s: TwoQubitState = text.parse().unwrap();
        assert_abs_diff_eq!(s.tangle().unwrap(), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(s.fidelity_to_psi_plus(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn misalignment_leaks_into_errors() {
        let s = TwoQubitState::psi_plus();
        let theta = 0.05;
        let p = s.joint_distribution(theta, 0.0);
        let err = p[0][0] + p[1][1];
        assert_abs_diff_eq!(err, 0.25 * theta.sin().powi(2), epsilon = 1e-12);
        let total: f64 = p.iter().flatten().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-14);
    }
}
