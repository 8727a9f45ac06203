//! Two-mode Gaussian states in the quadrature ordering `(x1, p1, x2, p2)`.
//!
//! The vacuum covariance is `I/2` (hbar = 1, `[x, p] = i`), and covariances are
//! the symmetrized second moments `<{X_i, X_j}>/2 - <X_i><X_j>`.

use nalgebra::{Matrix2, Matrix4, Vector2};

use crate::error::{Error, Result};

/// Largest tolerated `|V - V^T|` entry, relative to `max(1, |V|_max)`.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Slack allowed below 1/2 for the smallest symplectic eigenvalue.
pub const PHYSICAL_TOL: f64 = 1e-9;

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Symmetric 4x4 covariance of `(x1, p1, x2, p2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovMatrix4(Matrix4<f64>);

impl CovMatrix4 {
    /// Wraps `m`, rejecting matrices that are not symmetric within [`SYMMETRY_TOL`].
    pub fn new(m: Matrix4<f64>) -> Result<Self> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(Error::validation("covariance has non-finite entries"));
        }
        let scale = m.amax().max(1.0);
        let asym = (m - m.transpose()).amax();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::validation(format!(
                "covariance is not symmetric (max |V - V^T| = {asym:.3e})"
            )));
        }
        Ok(Self::symmetrized(m))
    }

    /// Replaces `m` by `(m + m^T)/2`. Used after every integrator step.
    pub fn symmetrized(m: Matrix4<f64>) -> Self {
        Self((m + m.transpose()) * 0.5)
    }

    pub fn vacuum() -> Self {
        Self(Matrix4::identity() * 0.5)
    }

    /// Product of two thermal states with mean occupation `nbar`.
    pub fn thermal(nbar: f64) -> Self {
        Self(Matrix4::identity() * (nbar + 0.5))
    }

    /// Two-mode squeezed vacuum with squeezing parameter `r`.
    pub fn two_mode_squeezed_vacuum(r: f64) -> Self {
        let c = 0.5 * (2.0 * r).cosh();
        let s = 0.5 * (2.0 * r).sinh();
        #[rustfmt::skip]
        let m = Matrix4::new(
            c,   0.0, s,   0.0,
            0.0, c,   0.0, -s,
            s,   0.0, c,   0.0,
            0.0, -s,  0.0, c,
        );
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Matrix4<f64> {
        self.0
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }

    /// Momentum sign flip on mode 2, the Gaussian partial transpose.
    pub fn partial_transpose(&self) -> Self {
        let p = Matrix4::from_diagonal(&nalgebra::Vector4::new(1.0, 1.0, 1.0, -1.0));
        Self(p * self.0 * p)
    }

    /// Smallest symplectic eigenvalue.
    pub fn min_symplectic_eigenvalue(&self) -> f64 {
        symplectic_eigenvalues(self)[0]
    }

    /// Checks the uncertainty principle `V + i Omega / 2 >= 0`.
    pub fn ensure_physical(&self) -> Result<()> {
        let nu = self.min_symplectic_eigenvalue();
        let positive = self.0.cholesky().is_some();
        if !positive || nu < 0.5 - PHYSICAL_TOL {
            return Err(Error::Unphysical { min_nu: nu });
        }
        Ok(())
    }
}

/// The two-mode symplectic form `[[0, 1], [-1, 0]] (+) [[0, 1], [-1, 0]]`.
pub fn symplectic_form() -> Matrix4<f64> {
    #[rustfmt::skip]
    let omega = Matrix4::new(
        0.0,  1.0, 0.0,  0.0,
        -1.0, 0.0, 0.0,  0.0,
        0.0,  0.0, 0.0,  1.0,
        0.0,  0.0, -1.0, 0.0,
    );
    omega
}

fn det2(a: f64, b: f64, c: f64, d: f64) -> f64 {
    a * d - b * c
}

/// Symplectic eigenvalues `(nu_minus, nu_plus)`, ascending.
///
/// Uses the symplectic invariants `Delta = det A + det B + 2 det C` and
/// `det V`: `nu^2` are the roots of `z^2 - Delta z + det V`.
pub fn symplectic_eigenvalues(v: &CovMatrix4) -> [f64; 2] {
    let m = &v.0;
    let det_a = det2(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let det_b = det2(m[(2, 2)], m[(2, 3)], m[(3, 2)], m[(3, 3)]);
    let det_c = det2(m[(0, 2)], m[(0, 3)], m[(1, 2)], m[(1, 3)]);
    let delta = det_a + det_b + 2.0 * det_c;
    let det_v = m.determinant();
    let disc = (delta * delta - 4.0 * det_v).max(0.0).sqrt();
    if disc < 1e-4 * delta.abs() {
        // nearly degenerate roots: the square root above amplifies rounding
        if let Some(pair) = congruence_spectrum(m) {
            return pair;
        }
    }
    let big = 0.5 * (delta + disc);
    // small root from the product of roots, avoiding cancellation
    let small = if big > 0.0 { det_v / big } else { 0.0 };
    let lo = small.max(0.0).sqrt();
    let hi = big.max(0.0).sqrt();
    if lo <= hi {
        [lo, hi]
    } else {
        [hi, lo]
    }
}

/// Symplectic spectrum from `V = L L^T`: `-(L^T J L)^2` is symmetric with
/// eigenvalues `nu^2`, each twice. `None` unless `V` is positive definite.
fn congruence_spectrum(m: &Matrix4<f64>) -> Option<[f64; 2]> {
    let l = m.cholesky()?.unpack();
    let k = l.transpose() * symplectic_form() * l;
    let mut e: Vec<f64> = (k.transpose() * k).symmetric_eigenvalues().iter().copied().collect();
    e.sort_by(f64::total_cmp);
    Some([
        (0.5 * (e[0] + e[1])).max(0.0).sqrt(),
        (0.5 * (e[2] + e[3])).max(0.0).sqrt(),
    ])
}

/// Logarithmic negativity `max(0, -ln(2 nu~))` of the partially transposed state.
pub fn logarithmic_negativity(v: &CovMatrix4) -> Result<f64> {
    v.ensure_physical()?;
    let nu = v.partial_transpose().min_symplectic_eigenvalue();
    Ok((-(2.0 * nu).ln()).max(0.0))
}

/// Covariance blocks of the common `(x+, p+)` and differential `(x-, p-)` modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalModeBlocks {
    pub sigma_plus: Matrix2<f64>,
    pub sigma_minus: Matrix2<f64>,
    /// Correlations between the `+` and `-` quadratures.
    pub cross_block: Matrix2<f64>,
}

impl NormalModeBlocks {
    /// Full 4x4 covariance in the normal-mode ordering `(x+, p+, x-, p-)`.
    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::zeros();
        m.fixed_view_mut::<2, 2>(0, 0).copy_from(&self.sigma_plus);
        m.fixed_view_mut::<2, 2>(2, 2).copy_from(&self.sigma_minus);
        m.fixed_view_mut::<2, 2>(0, 2).copy_from(&self.cross_block);
        m.fixed_view_mut::<2, 2>(2, 0)
            .copy_from(&self.cross_block.transpose());
        m
    }
}

/// The symmetric, involutive beam-splitter matrix mapping `(x1, p1, x2, p2)`
/// to `(x+, p+, x-, p-)`.
pub fn normal_mode_transform() -> Matrix4<f64> {
    #[rustfmt::skip]
    let t = Matrix4::new(
        1.0, 0.0, 1.0,  0.0,
        0.0, 1.0, 0.0,  1.0,
        1.0, 0.0, -1.0, 0.0,
        0.0, 1.0, 0.0,  -1.0,
    );
    t * INV_SQRT2
}

pub fn normal_mode_blocks(v: &CovMatrix4) -> NormalModeBlocks {
    let t = normal_mode_transform();
    let w = t * v.0 * t;
    NormalModeBlocks {
        sigma_plus: w.fixed_view::<2, 2>(0, 0).into_owned(),
        sigma_minus: w.fixed_view::<2, 2>(2, 2).into_owned(),
        cross_block: w.fixed_view::<2, 2>(0, 2).into_owned(),
    }
}

fn check_sym2(sigma: &Matrix2<f64>) -> Result<()> {
    if !sigma.iter().all(|v| v.is_finite()) {
        return Err(Error::validation("2x2 covariance has non-finite entries"));
    }
    let scale = sigma.amax().max(1.0);
    if (sigma[(0, 1)] - sigma[(1, 0)]).abs() > SYMMETRY_TOL * scale {
        return Err(Error::validation("2x2 covariance is not symmetric"));
    }
    Ok(())
}

fn min_eig2(sigma: &Matrix2<f64>) -> f64 {
    let a = sigma[(0, 0)];
    let d = sigma[(1, 1)];
    let b = 0.5 * (sigma[(0, 1)] + sigma[(1, 0)]);
    0.5 * (a + d) - (0.25 * (a - d) * (a - d) + b * b).sqrt()
}

/// Squeezing in dB below vacuum of the smallest quadrature variance; positive
/// means squeezed.
pub fn squeezing_degree(sigma: &Matrix2<f64>) -> Result<f64> {
    check_sym2(sigma)?;
    let min_eig = min_eig2(sigma);
    if min_eig <= 0.0 {
        return Err(Error::NotPositiveDefinite { min_eig });
    }
    Ok(-10.0 * (2.0 * min_eig).log10())
}

/// Smallest number of points accepted by [`uncertainty_ellipse`].
pub const MIN_ELLIPSE_POINTS: usize = 4;

/// Samples the 1-sigma ellipse `{v : v^T sigma^-1 v = 1}` at `n_points` equally
/// spaced parameter angles, starting on the major-most eigenvector.
pub fn uncertainty_ellipse(sigma: &Matrix2<f64>, n_points: usize) -> Result<Vec<[f64; 2]>> {
    check_sym2(sigma)?;
    if n_points < MIN_ELLIPSE_POINTS {
        return Err(Error::validation(format!(
            "uncertainty ellipse needs at least {MIN_ELLIPSE_POINTS} points, got {n_points}"
        )));
    }
    let eig = sigma.symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig <= 0.0 {
        return Err(Error::NotPositiveDefinite { min_eig });
    }
    let axes: [Vector2<f64>; 2] = [
        eig.eigenvectors.column(0) * eig.eigenvalues[0].sqrt(),
        eig.eigenvectors.column(1) * eig.eigenvalues[1].sqrt(),
    ];
    Ok((0..n_points)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / n_points as f64;
            let v = axes[0] * theta.cos() + axes[1] * theta.sin();
            [v[0], v[1]]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Complex;

    macro_rules! assert_close {
        ($a:expr, $b:expr, $tol:expr) => {{
            let (a, b): (f64, f64) = ($a, $b);
            assert!((a - b).abs() <= $tol, "{a} != {b} (tol {})", $tol);
        }};
    }

    /// Moduli of the eigenvalues of `i Omega V`, computed by a general eigen-solve.
    fn numeric_symplectic_spectrum(v: &Matrix4<f64>) -> Vec<f64> {
        let m = symplectic_form() * v;
        let eig: nalgebra::Vector4<Complex<f64>> = m.complex_eigenvalues();
        let mut nus: Vec<f64> = eig.iter().map(|z| z.norm()).collect();
        nus.sort_by(|a, b| a.partial_cmp(b).unwrap());
        nus
    }

    #[test]
    fn vacuum_and_thermal_spectra() {
        let [a, b] = symplectic_eigenvalues(&CovMatrix4::vacuum());
        assert_close!(a, 0.5, 1e-15);
        assert_close!(b, 0.5, 1e-15);
        let [a, b] = symplectic_eigenvalues(&CovMatrix4::thermal(1.0));
        assert_close!(a, 1.5, 1e-14);
        assert_close!(b, 1.5, 1e-14);
    }

    #[test]
    fn tmsv_is_pure_and_matches_numeric_spectrum() {
        let v = CovMatrix4::two_mode_squeezed_vacuum(0.5);
        let nus = numeric_symplectic_spectrum(v.matrix());
        for nu in &nus {
            assert_close!(*nu, 0.5, 1e-12);
        }
        let [a, b] = symplectic_eigenvalues(&v);
        assert_close!(a, 0.5, 1e-12);
        assert_close!(b, 0.5, 1e-12);
    }

    #[test]
    fn invariant_route_matches_numeric_route_on_partial_transpose() {
        let v = CovMatrix4::two_mode_squeezed_vacuum(0.5).partial_transpose();
        let nus = numeric_symplectic_spectrum(v.matrix());
        let [a, b] = symplectic_eigenvalues(&v);
        assert_close!(a, nus[0], 1e-12);
        assert_close!(b, nus[3], 1e-10);
    }

    #[test]
    fn negativity_examples() {
        assert_eq!(logarithmic_negativity(&CovMatrix4::vacuum()).unwrap(), 0.0);
        assert_eq!(logarithmic_negativity(&CovMatrix4::thermal(1.0)).unwrap(), 0.0);
        let en = logarithmic_negativity(&CovMatrix4::two_mode_squeezed_vacuum(0.5)).unwrap();
        assert_close!(en, 1.0, 1e-12);
    }

    #[test]
    fn rejects_asymmetric_and_unphysical() {
        let mut m = Matrix4::identity() * 0.5;
        m[(0, 1)] = 1e-6;
        assert!(matches!(CovMatrix4::new(m), Err(Error::Validation(_))));

        let squashed = CovMatrix4::new(Matrix4::identity() * 0.3).unwrap();
        assert!(matches!(
            logarithmic_negativity(&squashed),
            Err(Error::Unphysical { .. })
        ));
    }

    #[test]
    fn normal_modes_of_vacuum() {
        let blocks = normal_mode_blocks(&CovMatrix4::vacuum());
        assert!((blocks.sigma_plus - Matrix2::identity() * 0.5).amax() < 1e-15);
        assert!((blocks.sigma_minus - Matrix2::identity() * 0.5).amax() < 1e-15);
        assert!(blocks.cross_block.amax() < 1e-15);
    }

    #[test]
    fn transform_is_involutive() {
        let t = normal_mode_transform();
        assert!((t * t - Matrix4::identity()).amax() < 1e-12);
        assert_eq!(t, t.transpose());
    }

    #[test]
    fn exchange_symmetric_state_has_no_cross_block() {
        #[rustfmt::skip]
        let m = Matrix4::new(
            1.0, 0.2, 0.3, 0.1,
            0.2, 0.8, 0.1, -0.2,
            0.3, 0.1, 1.0, 0.2,
            0.1, -0.2, 0.2, 0.8,
        );
        let blocks = normal_mode_blocks(&CovMatrix4::new(m).unwrap());
        assert!(blocks.cross_block.amax() < 1e-14);
        assert!(blocks.sigma_plus != blocks.sigma_minus);
    }

    #[test]
    fn squeezing_examples() {
        assert_close!(squeezing_degree(&(Matrix2::identity() * 0.5)).unwrap(), 0.0, 1e-14);
        let s = squeezing_degree(&Matrix2::new(0.25, 0.0, 0.0, 1.0)).unwrap();
        assert_close!(s, 3.010_299_956_639_812, 1e-12);
        assert!(matches!(
            squeezing_degree(&Matrix2::new(1.0, 2.0, 2.0, 1.0)),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn ellipse_of_vacuum_is_circle() {
        let pts = uncertainty_ellipse(&(Matrix2::identity() * 0.5), 4).unwrap();
        assert_eq!(pts.len(), 4);
        for [x, p] in pts {
            assert_close!((x * x + p * p).sqrt(), INV_SQRT2, 1e-14);
        }
    }

    #[test]
    fn ellipse_semi_axes_on_coordinate_axes() {
        let pts = uncertainty_ellipse(&Matrix2::new(0.125, 0.0, 0.0, 0.5), 64).unwrap();
        let max_x = pts.iter().map(|p| p[0].abs()).fold(0.0, f64::max);
        let max_p = pts.iter().map(|p| p[1].abs()).fold(0.0, f64::max);
        assert_close!(max_x, 1.0 / (2.0 * 2f64.sqrt()), 1e-12);
        assert_close!(max_p, INV_SQRT2, 1e-12);
    }

    #[test]
    fn rotated_ellipse_aligns_with_eigenvectors() {
        let theta: f64 = 0.4;
        let rot = Matrix2::new(theta.cos(), -theta.sin(), theta.sin(), theta.cos());
        let sigma = rot * Matrix2::new(0.1, 0.0, 0.0, 0.9) * rot.transpose();
        let pts = uncertainty_ellipse(&sigma, 360).unwrap();
        let inv = sigma.try_inverse().unwrap();
        for [x, p] in &pts {
            let v = Vector2::new(*x, *p);
            assert_close!((v.transpose() * inv * v)[0], 1.0, 1e-12);
        }
        // farthest point lies along the major eigenvector (cos theta, sin theta) rotated by 90 deg
        let far = pts
            .iter()
            .max_by(|a, b| (a[0].hypot(a[1])).partial_cmp(&b[0].hypot(b[1])).unwrap())
            .unwrap();
        let major = rot * Vector2::new(0.0, 1.0);
        let dir = Vector2::new(far[0], far[1]).normalize();
        assert_close!(dir.dot(&major).abs(), 1.0, 1e-3);
        assert!(uncertainty_ellipse(&Matrix2::new(1.0, 1.0, 1.0, 1.0), 8).is_err());
    }
}
