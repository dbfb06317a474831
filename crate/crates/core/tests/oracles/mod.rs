//! Independent reference implementations used by integration and acceptance tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// Score-matching objective evaluated term by term from the score and its
/// diagonal derivatives, with `tanh` and `cosh` from the standard library.
pub fn direct_objective(x: &DMatrix<f64>, w: &DMatrix<f64>, m: &DMatrix<f64>) -> f64 {
    let d = w.nrows();
    let mut total = 0.0;
    for t in 0..x.nrows() {
        let proj: Vec<f64> = (0..d)
            .map(|i| (0..d).map(|k| w[(i, k)] * x[(t, k)]).sum())
            .collect();
        for k in 0..d {
            let mut psi = 0.0;
            let mut dpsi = 0.0;
            for i in 0..d {
                psi -= m[(i, i)] * proj[i].tanh() * w[(i, k)];
                dpsi -= m[(i, i)] * w[(i, k)].powi(2) / proj[i].cosh().powi(2);
                for j in i + 1..d {
                    let u = proj[i] - proj[j];
                    let v = w[(i, k)] - w[(j, k)];
                    psi -= m[(i, j)] * u.tanh() * v;
                    dpsi -= m[(i, j)] * v * v / u.cosh().powi(2);
                }
            }
            total += 0.5 * psi * psi + dpsi;
        }
    }
    total / x.nrows() as f64
}

/// Central finite differences of `f` over every entry of `w`.
pub fn finite_difference_gradient(
    w: &DMatrix<f64>,
    step: f64,
    f: impl Fn(&DMatrix<f64>) -> f64,
) -> DMatrix<f64> {
    DMatrix::from_fn(w.nrows(), w.ncols(), |i, k| {
        let mut plus = w.clone();
        plus[(i, k)] += step;
        let mut minus = w.clone();
        minus[(i, k)] -= step;
        (f(&plus) - f(&minus)) / (2.0 * step)
    })
}

/// Upper-triangular row-major index of `(i, j)`, `i <= j`.
fn flat(d: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    (0..i).map(|r| d - r).sum::<usize>() + (j - i)
}

/// Halfspaces `a_kᵀ m <= 0` expressing row dominance, as dense normals.
fn dominance_normals(d: usize) -> Vec<DVector<f64>> {
    let p = d * (d + 1) / 2;
    (0..d)
        .map(|i| {
            let mut a = DVector::zeros(p);
            for j in 0..d {
                a[flat(d, i, j)] = if i == j { -1.0 } else { 1.0 };
            }
            a
        })
        .collect()
}

/// Euclidean projection onto `{m >= 0} ∩ {row dominance}` by Dykstra's alternating projections.
pub fn project_feasible(y: &DVector<f64>, d: usize) -> DVector<f64> {
    let normals = dominance_normals(d);
    let sets = normals.len() + 1;
    let mut x = y.clone();
    let mut increments = vec![DVector::zeros(y.len()); sets];
    for _ in 0..100_000 {
        let before = x.clone();
        for s in 0..sets {
            let z = &x + &increments[s];
            let projected = if s == 0 {
                z.map(|v| v.max(0.0))
            } else {
                let a = &normals[s - 1];
                let excess = a.dot(&z);
                if excess > 0.0 {
                    &z - a * (excess / a.norm_squared())
                } else {
                    z.clone()
                }
            };
            increments[s] = &z - &projected;
            x = projected;
        }
        if (&x - &before).amax() < 1e-16 {
            break;
        }
    }
    x
}

/// Projected gradient descent with step `1/L`, run until the iterate stalls
/// or `max_iter` steps; returns the final point and objective.
pub fn projected_gradient_qp(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    d: usize,
    max_iter: usize,
) -> (DVector<f64>, f64) {
    let lipschitz = h.clone().symmetric_eigenvalues().max();
    let mut m = DVector::zeros(c.len());
    for _ in 0..max_iter {
        let grad = h * &m + c;
        let next = project_feasible(&(&m - grad / lipschitz), d);
        let change = (&next - &m).amax();
        m = next;
        if change < 1e-15 {
            break;
        }
    }
    let value = 0.5 * m.dot(&(h * &m)) + c.dot(&m);
    (m, value)
}

/// Maximum of `sum_i |p[i][σ(i)]|` over all permutations, by enumeration.
pub fn brute_force_assignment_score(p: &DMatrix<f64>) -> f64 {
    fn recurse(p: &DMatrix<f64>, row: usize, used: &mut Vec<bool>) -> f64 {
        if row == p.nrows() {
            return 0.0;
        }
        let mut best = f64::MIN;
        for c in 0..p.ncols() {
            if !used[c] {
                used[c] = true;
                best = best.max(p[(row, c)].abs() + recurse(p, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    recurse(p, 0, &mut vec![false; p.ncols()])
}
