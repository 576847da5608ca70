//! Preconditioned conjugate gradients and MINRES.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final relative residual in the norm the method monitors.
    pub residual: f64,
    pub trace: Vec<f64>,
}

pub type Op<'a> = &'a (dyn Fn(&[f64], &mut [f64]) + Sync);
pub type Proj<'a> = &'a (dyn Fn(&mut [f64]) + Sync);

/// PCG for `A x = b` starting from the given `x`. The optional `project`
/// removes a null space from the right-hand side and the iterates (it must
/// commute with `A`). Converges when the Euclidean residual drops below
/// `tol * |b|`.
pub fn pcg(
    a: Op,
    m: Op,
    project: Option<Proj>,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveStats> {
    let n = b.len();
    let mut b = b.to_vec();
    if let Some(p) = project {
        p(&mut b);
        p(x);
    }
    let bn = par::norm2(&b);
    if bn == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveStats { iterations: 0, residual: 0.0, trace: vec![] });
    }
    let mut r = vec![0.0; n];
    let mut ap = vec![0.0; n];
    a(x, &mut ap);
    par::for_each_mut(&mut r, |i, ri| *ri = b[i] - ap[i]);
    let mut z = vec![0.0; n];
    m(&r, &mut z);
    if let Some(p) = project {
        p(&mut z);
    }
    let mut p_dir = z.clone();
    let mut rz = par::dot(&r, &z);
    let mut trace = Vec::new();
    let mut res = par::norm2(&r) / bn;
    trace.push(res);
    let mut it = 0;
    while res > tol && it < max_iter {
        a(&p_dir, &mut ap);
        let pap = par::dot(&p_dir, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rz / pap;
        par::axpy(alpha, &p_dir, x);
        par::axpy(-alpha, &ap, &mut r);
        m(&r, &mut z);
        if let Some(p) = project {
            p(&mut z);
        }
        let rz_new = par::dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        par::xpby(&z, beta, &mut p_dir);
        it += 1;
        res = par::norm2(&r) / bn;
        trace.push(res);
    }
    if let Some(p) = project {
        p(x);
    }
    if res > tol {
        return Err(Error::NonConvergence { iterations: it, residual: res, trace });
    }
    Ok(SolveStats { iterations: it, residual: res, trace })
}

/// Preconditioned MINRES for symmetric (possibly indefinite) `A` with a
/// symmetric positive definite preconditioner `M`, starting from `x`.
/// Stops when the `M^{-1}`-norm of the residual drops below `tol` times its
/// initial value. Stagnation is reported by returning the stats with
/// `residual > tol`; the caller decides whether to restart.
pub fn minres(a: Op, m: Op, project: Option<Proj>, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> SolveStats {
    let n = b.len();
    let mut v = vec![0.0; n];
    a(x, &mut v);
    par::for_each_mut(&mut v, |i, vi| *vi = b[i] - *vi);
    if let Some(p) = project {
        p(&mut v);
    }
    let mut v_old = vec![0.0; n];
    let mut z = vec![0.0; n];
    m(&v, &mut z);
    if let Some(p) = project {
        p(&mut z);
    }
    let mut gamma = par::dot(&z, &v).max(0.0).sqrt();
    let gamma0 = gamma;
    if gamma0 == 0.0 {
        return SolveStats { iterations: 0, residual: 0.0, trace: vec![0.0] };
    }
    let mut gamma_old = 1.0;
    let mut eta = gamma;
    let (mut s_old, mut s) = (0.0, 0.0);
    let (mut c_old, mut c) = (1.0, 1.0);
    let mut w_old = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut az = vec![0.0; n];
    let mut trace = vec![1.0];
    let mut it = 0;
    while it < max_iter {
        par::scale(1.0 / gamma, &mut z);
        a(&z, &mut az);
        if let Some(p) = project {
            p(&mut az);
        }
        let delta = par::dot(&az, &z);
        // v_new = A z - (delta / gamma) v - (gamma / gamma_old) v_old, stored in v_old
        let (c1, c2) = (delta / gamma, gamma / gamma_old);
        par::for_each_mut(&mut v_old, |i, vo| *vo = az[i] - c1 * v[i] - c2 * *vo);
        std::mem::swap(&mut v, &mut v_old);
        // z_new = M^{-1} v_new; keep z (normalized) for the w update
        m(&v, &mut az);
        if let Some(p) = project {
            p(&mut az);
        }
        let gamma_new = par::dot(&az, &v).max(0.0).sqrt();
        let a0 = c * delta - c_old * s * gamma;
        let a1 = (a0 * a0 + gamma_new * gamma_new).sqrt();
        let a2 = s * delta + c_old * c * gamma;
        let a3 = s_old * gamma;
        let c_new = a0 / a1;
        let s_new = gamma_new / a1;
        // w_new = (z - a3 w_old - a2 w) / a1, stored in w_old
        par::for_each_mut(&mut w_old, |i, wo| *wo = (z[i] - a3 * *wo - a2 * w[i]) / a1);
        std::mem::swap(&mut w, &mut w_old);
        par::axpy(c_new * eta, &w, x);
        eta *= -s_new;
        std::mem::swap(&mut z, &mut az);
        gamma_old = gamma;
        gamma = gamma_new;
        c_old = c;
        c = c_new;
        s_old = s;
        s = s_new;
        it += 1;
        let res = eta.abs() / gamma0;
        trace.push(res);
        if res <= tol || gamma_new == 0.0 || !res.is_finite() {
            break;
        }
    }
    if let Some(p) = project {
        p(x);
    }
    let residual = *trace.last().unwrap();
    SolveStats { iterations: it, residual, trace }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize, shift: f64) -> impl Fn(&[f64], &mut [f64]) + Sync {
        move |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let mut v = (2.0 + shift) * x[i];
                if i > 0 {
                    v -= x[i - 1];
                }
                if i + 1 < n {
                    v -= x[i + 1];
                }
                y[i] = v;
            }
        }
    }

    #[test]
    fn pcg_solves_spd_system() {
        let n = 50;
        let a = tridiag(n, 0.1);
        let id = |x: &[f64], y: &mut [f64]| y.copy_from_slice(x);
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut x = vec![0.0; n];
        let st = pcg(&a, &id, None, &b, &mut x, 1e-12, 500).unwrap();
        let mut ax = vec![0.0; n];
        a(&x, &mut ax);
        let err: f64 = ax.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err} after {}", st.iterations);
    }

    #[test]
    fn minres_solves_indefinite_system() {
        let n = 40;
        // diag(1..20, -1..-20) perturbed by a symmetric tridiagonal coupling
        let a = move |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let d = if i < n / 2 { 1.0 + i as f64 } else { -(1.0 + (i - n / 2) as f64) };
                let mut v = d * x[i];
                if i > 0 {
                    v += 0.3 * x[i - 1];
                }
                if i + 1 < n {
                    v += 0.3 * x[i + 1];
                }
                y[i] = v;
            }
        };
        let m = |x: &[f64], y: &mut [f64]| {
            for i in 0..x.len() {
                let d = if i < 20 { 1.0 + i as f64 } else { 1.0 + (i - 20) as f64 };
                y[i] = x[i] / d;
            }
        };
        let b: Vec<f64> = (0..n).map(|i| 1.0 + (i % 3) as f64).collect();
        let mut x = vec![0.0; n];
        let st = minres(&a, &m, None, &b, &mut x, 1e-12, 400);
        let mut ax = vec![0.0; n];
        a(&x, &mut ax);
        let err: f64 = ax.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "{err} after {} its", st.iterations);
    }
}
