//! Gaussian kernel algebra on control points.
//!
//! The scalar kernel is `k(x, y) = exp(-|x - y|^2 / width^2)`. Velocity fields are
//! convolutions `v(x) = sum_k k(c_k, x) m_k` and the Hamiltonian is `H = 1/2 m^T K_c m`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::points::{dot, sq_dist, ControlPoints, Momenta, Points};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub width: f64,
    pub dim: usize,
}

impl KernelConfig {
    pub fn new(width: f64, dim: usize) -> Result<Self> {
        let cfg = Self { width, dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(invalid(format!("kernel width must be positive, got {}", self.width)));
        }
        if self.dim != 2 && self.dim != 3 {
            return Err(invalid(format!("ambient dimension must be 2 or 3, got {}", self.dim)));
        }
        Ok(())
    }

    #[inline]
    pub(crate) fn inv_width2(&self) -> f64 {
        1.0 / (self.width * self.width)
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        (-sq_dist(x, y) * self.inv_width2()).exp()
    }
}

pub fn kernel_eval(x: &[f64], y: &[f64], cfg: &KernelConfig) -> Result<f64> {
    if x.len() != y.len() {
        return Err(invalid("kernel arguments have different dimensions"));
    }
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(invalid("kernel arguments must be finite"));
    }
    Ok(cfg.eval_unchecked(x, y))
}

fn check_pair(c: &ControlPoints, m: &Momenta, cfg: &KernelConfig) -> Result<()> {
    if c.dim() != cfg.dim || m.dim() != cfg.dim {
        return Err(invalid("control points / momenta dimension differs from kernel dimension"));
    }
    if c.len() != m.len() {
        return Err(invalid(format!(
            "{} control points paired with {} momenta",
            c.len(),
            m.len()
        )));
    }
    Ok(())
}

/// The symmetric `n_cp x n_cp` matrix `[k(c_i, c_j)]`.
pub fn kernel_matrix(c: &ControlPoints, cfg: &KernelConfig) -> DMatrix<f64> {
    let n = c.len();
    let mut k = DMatrix::<f64>::identity(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = cfg.eval_unchecked(c.point(i), c.point(j));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Velocity field of `(c, m)` evaluated at every query point.
pub fn convolve(c: &ControlPoints, m: &Momenta, x: &Points, cfg: &KernelConfig) -> Points {
    let d = cfg.dim;
    let mut out = Points::zeros(d, x.len());
    convolve_into(c.as_slice(), m.as_slice(), x.as_slice(), out.as_mut_slice(), cfg);
    out
}

pub(crate) fn convolve_into(c: &[f64], m: &[f64], x: &[f64], out: &mut [f64], cfg: &KernelConfig) {
    let d = cfg.dim;
    for (xq, vq) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        vq.iter_mut().for_each(|v| *v = 0.0);
        for (ck, mk) in c.chunks_exact(d).zip(m.chunks_exact(d)) {
            let w = cfg.eval_unchecked(ck, xq);
            for (v, mm) in vq.iter_mut().zip(mk) {
                *v += w * mm;
            }
        }
    }
}

/// Checked version of [`convolve`].
pub fn try_convolve(c: &ControlPoints, m: &Momenta, x: &Points, cfg: &KernelConfig) -> Result<Points> {
    check_pair(c, m, cfg)?;
    if x.dim() != cfg.dim {
        return Err(invalid("query points have the wrong dimension"));
    }
    c.check_finite("control points")?;
    m.check_finite("momenta")?;
    x.check_finite("query points")?;
    Ok(convolve(c, m, x, cfg))
}

/// `a^T K_c b` for two momenta fields attached to the same control points.
pub fn kernel_inner(c: &ControlPoints, a: &Momenta, b: &Momenta, cfg: &KernelConfig) -> f64 {
    let n = c.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += dot(a.point(i), b.point(i));
        for j in (i + 1)..n {
            let k = cfg.eval_unchecked(c.point(i), c.point(j));
            acc += k * (dot(a.point(i), b.point(j)) + dot(a.point(j), b.point(i)));
        }
    }
    acc
}

/// `H(c, m) = 1/2 m^T K_c m`.
pub fn hamiltonian(c: &ControlPoints, m: &Momenta, cfg: &KernelConfig) -> f64 {
    0.5 * kernel_inner(c, m, m, cfg)
}

/// Returns `(dH/dm, dH/dc)`: the control-point velocity `K_c m` and the
/// position gradient `1/2 grad_c (m^T K_c m)`.
pub fn hamiltonian_grads(c: &ControlPoints, m: &Momenta, cfg: &KernelConfig) -> (Momenta, Points) {
    let d = cfg.dim;
    let n = c.len();
    let mut dm = Points::zeros(d, n);
    let mut dc = Points::zeros(d, n);
    hamiltonian_grads_into(c.as_slice(), m.as_slice(), dm.as_mut_slice(), dc.as_mut_slice(), cfg);
    (dm, dc)
}

pub(crate) fn hamiltonian_grads_into(c: &[f64], m: &[f64], dm: &mut [f64], dc: &mut [f64], cfg: &KernelConfig) {
    let d = cfg.dim;
    let n = c.len() / d;
    let s = -2.0 * cfg.inv_width2();
    dm.copy_from_slice(m);
    dc.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        let ci = &c[i * d..(i + 1) * d];
        let mi = &m[i * d..(i + 1) * d];
        for j in (i + 1)..n {
            let cj = &c[j * d..(j + 1) * d];
            let mj = &m[j * d..(j + 1) * d];
            let k = cfg.eval_unchecked(ci, cj);
            let mm = dot(mi, mj);
            for a in 0..d {
                dm[i * d + a] += k * mj[a];
                dm[j * d + a] += k * mi[a];
                let g = s * k * mm * (ci[a] - cj[a]);
                dc[i * d + a] += g;
                dc[j * d + a] -= g;
            }
        }
    }
}

/// Checked version of [`hamiltonian_grads`].
pub fn try_hamiltonian_grads(c: &ControlPoints, m: &Momenta, cfg: &KernelConfig) -> Result<(Momenta, Points)> {
    check_pair(c, m, cfg)?;
    c.check_finite("control points")?;
    m.check_finite("momenta")?;
    Ok(hamiltonian_grads(c, m, cfg))
}
