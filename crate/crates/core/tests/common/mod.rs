//! Independent reference solvers used by the integration tests. Nothing here
//! calls the crate's integrators.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, SMatrix};

pub type Matrix8 = SMatrix<f64, 8, 8>;

/// Stabilizing solution of `F^T X + X F - X G X + Q = 0` via the matrix sign
/// function of the Hamiltonian `[[F, -G], [-Q, -F^T]]`.
pub fn care_sign(f: &Matrix4<f64>, g: &Matrix4<f64>, q: &Matrix4<f64>) -> Matrix4<f64> {
    let mut h = Matrix8::zeros();
    h.fixed_view_mut::<4, 4>(0, 0).copy_from(f);
    h.fixed_view_mut::<4, 4>(0, 4).copy_from(&(-g));
    h.fixed_view_mut::<4, 4>(4, 0).copy_from(&(-q));
    h.fixed_view_mut::<4, 4>(4, 4).copy_from(&(-f.transpose()));
    let mut z = h;
    for _ in 0..200 {
        let inv = z.try_inverse().expect("Hamiltonian iterate is singular");
        let c = z.determinant().abs().powf(-1.0 / 8.0);
        let next = (z * c + inv / c) * 0.5;
        let delta = (next - z).norm() / next.norm();
        z = next;
        if delta < 1e-15 {
            break;
        }
    }
    // columns of [I; X] span ker(W + I)
    let w = z;
    let mut lhs = DMatrix::zeros(8, 4);
    let mut rhs = DMatrix::zeros(8, 4);
    for i in 0..4 {
        for j in 0..4 {
            lhs[(i, j)] = w[(i, j + 4)];
            lhs[(i + 4, j)] = w[(i + 4, j + 4)] + if i == j { 1.0 } else { 0.0 };
            rhs[(i, j)] = -(w[(i, j)] + if i == j { 1.0 } else { 0.0 });
            rhs[(i + 4, j)] = -w[(i + 4, j)];
        }
    }
    let x = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .expect("least-squares solve failed");
    let x = Matrix4::from_fn(|i, j| x[(i, j)]);
    (x + x.transpose()) * 0.5
}

/// Filter form `A V + V A^T - V G V + N = 0`.
pub fn filter_are(a: &Matrix4<f64>, g: &Matrix4<f64>, n: &Matrix4<f64>) -> Matrix4<f64> {
    care_sign(&a.transpose(), g, n)
}

/// Solves `M X + X M^T + Q = 0` through the 16x16 Kronecker system.
pub fn lyapunov_kron(m: &Matrix4<f64>, q: &Matrix4<f64>) -> Matrix4<f64> {
    let mut k = DMatrix::zeros(16, 16);
    for i in 0..4 {
        for j in 0..4 {
            let row = i * 4 + j;
            for l in 0..4 {
                // (M X)_{ij} = sum_l M_il X_lj ; (X M^T)_{ij} = sum_l X_il M_jl
                k[(row, l * 4 + j)] += m[(i, l)];
                k[(row, i * 4 + l)] += m[(j, l)];
            }
        }
    }
    let b = DVector::from_iterator(16, (0..16).map(|r| -q[(r / 4, r % 4)]));
    let x = k.lu().solve(&b).expect("Lyapunov operator is singular");
    let x = Matrix4::from_fn(|i, j| x[i * 4 + j]);
    (x + x.transpose()) * 0.5
}

pub fn rel_frobenius(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    (a - b).norm() / b.norm()
}

/// Symplectic form in `(x1, p1, x2, p2)` ordering, written out independently.
pub fn omega() -> Matrix4<f64> {
    let mut j = Matrix4::zeros();
    j[(0, 1)] = 1.0;
    j[(1, 0)] = -1.0;
    j[(2, 3)] = 1.0;
    j[(3, 2)] = -1.0;
    j
}

pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, s, -s, c)
}

pub fn squeezer(r: f64) -> Matrix2<f64> {
    Matrix2::new((-r).exp(), 0.0, 0.0, r.exp())
}

pub fn local(s1: &Matrix2<f64>, s2: &Matrix2<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<2, 2>(0, 0).copy_from(s1);
    m.fixed_view_mut::<2, 2>(2, 2).copy_from(s2);
    m
}

pub fn beam_splitter(theta: f64) -> Matrix4<f64> {
    let (s, c) = theta.sin_cos();
    let i2 = Matrix2::identity();
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<2, 2>(0, 0).copy_from(&(i2 * c));
    m.fixed_view_mut::<2, 2>(0, 2).copy_from(&(i2 * s));
    m.fixed_view_mut::<2, 2>(2, 0).copy_from(&(i2 * -s));
    m.fixed_view_mut::<2, 2>(2, 2).copy_from(&(i2 * c));
    m
}

/// Brute-force symplectic spectrum: `|eig(i J V)|` via the real 8x8
/// embedding of `J V`, whose eigenvalues are `+-i nu`.
pub fn brute_symplectic_spectrum(v: &Matrix4<f64>) -> [f64; 2] {
    let jv = omega() * v;
    // (J V)^2 has eigenvalues -nu^2, each twice
    let sq = -(jv * jv);
    let eig = sq.complex_eigenvalues();
    let mut nus: Vec<f64> = eig.iter().map(|z| z.re.max(0.0).sqrt()).collect();
    nus.sort_by(f64::total_cmp);
    [nus[0], nus[3]]
}
