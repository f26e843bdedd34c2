//! Current and varifold distances between meshes.
//!
//! Each cell is summarized by its barycenter and a measure-weighted normal
//! (length-weighted tangent for segments, area-weighted normal for triangles).
//! With a Gaussian kernel `k_W` on barycenters:
//!
//! * current:  `<S, S'> = sum_pq k_W(g_p, g'_q) (n_p . n'_q)`
//! * varifold: `<S, S'> = sum_pq k_W(g_p, g'_q) (n_p . n'_q)^2 / (|n_p| |n'_q|)`
//!
//! and `|S - S'|^2 = <S, S> - 2 <S, S'> + <S', S'>`.

use serde::{Deserialize, Serialize};

use super::Shape;
use crate::error::{invalid, Error, Result};
use crate::kernel::KernelConfig;
use crate::points::{dot, Points};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Current,
    Varifold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub kind: MetricKind,
    pub width: f64,
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(invalid(format!("metric width must be positive, got {}", self.width)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellRepresentation {
    pub centers: Points,
    pub normals: Points,
}

impl CellRepresentation {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

pub fn cell_representation(s: &Shape) -> CellRepresentation {
    let d = s.dim();
    let v = s.vertices();
    let n = s.n_cells();
    let mut centers = Points::zeros(d, n);
    let mut normals = Points::zeros(d, n);
    for (c, cell) in s.cells().enumerate() {
        let ctr = centers.point_mut(c);
        for &i in cell {
            for (x, y) in ctr.iter_mut().zip(v.point(i)) {
                *x += y;
            }
        }
        ctr.iter_mut().for_each(|x| *x /= d as f64);
        let nrm = normals.point_mut(c);
        if d == 2 {
            let (a, b) = (v.point(cell[0]), v.point(cell[1]));
            nrm[0] = b[0] - a[0];
            nrm[1] = b[1] - a[1];
        } else {
            let (a, b, cc) = (v.point(cell[0]), v.point(cell[1]), v.point(cell[2]));
            let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let e2 = [cc[0] - a[0], cc[1] - a[1], cc[2] - a[2]];
            let x = cross(&e1, &e2);
            nrm.copy_from_slice(&[0.5 * x[0], 0.5 * x[1], 0.5 * x[2]]);
        }
    }
    CellRepresentation { centers, normals }
}

#[inline]
fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn norms(r: &CellRepresentation, kind: MetricKind) -> Result<Vec<f64>> {
    let ns: Vec<f64> = r.normals.iter().map(|n| dot(n, n).sqrt()).collect();
    if kind == MetricKind::Varifold {
        if let Some(cell) = ns.iter().position(|&v| v == 0.0) {
            return Err(Error::DegenerateCell { cell });
        }
    }
    Ok(ns)
}

fn inner(
    a: &CellRepresentation,
    a_norms: &[f64],
    b: &CellRepresentation,
    b_norms: &[f64],
    kern: &KernelConfig,
    kind: MetricKind,
) -> f64 {
    let mut acc = 0.0;
    for p in 0..a.len() {
        let (gp, np) = (a.centers.point(p), a.normals.point(p));
        for q in 0..b.len() {
            let k = kern.eval_unchecked(gp, b.centers.point(q));
            let nn = dot(np, b.normals.point(q));
            acc += match kind {
                MetricKind::Current => k * nn,
                MetricKind::Varifold => k * nn * nn / (a_norms[p] * b_norms[q]),
            };
        }
    }
    acc
}

fn check_pair(s1: &Shape, s2: &Shape, cfg: &MetricConfig) -> Result<KernelConfig> {
    cfg.validate()?;
    if s1.dim() != s2.dim() {
        return Err(invalid("shapes live in different ambient dimensions"));
    }
    Ok(KernelConfig { width: cfg.width, dim: s1.dim() })
}

/// Squared current or varifold distance between two meshes (no point correspondence needed).
pub fn metric_dist2(s1: &Shape, s2: &Shape, cfg: &MetricConfig) -> Result<f64> {
    let kern = check_pair(s1, s2, cfg)?;
    let (r1, r2) = (cell_representation(s1), cell_representation(s2));
    let (n1, n2) = (norms(&r1, cfg.kind)?, norms(&r2, cfg.kind)?);
    let aa = inner(&r1, &n1, &r1, &n1, &kern, cfg.kind);
    let ab = inner(&r1, &n1, &r2, &n2, &kern, cfg.kind);
    let bb = inner(&r2, &n2, &r2, &n2, &kern, cfg.kind);
    Ok((aa - 2.0 * ab + bb).max(0.0))
}

/// Accumulates `factor * sum_q d/d(g_p, n_p) [k(g_p, g'_q) f(n_p, n'_q)]` into the per-cell gradients.
#[allow(clippy::too_many_arguments)]
fn accumulate_cell_grads(
    a: &CellRepresentation,
    a_norms: &[f64],
    b: &CellRepresentation,
    b_norms: &[f64],
    kern: &KernelConfig,
    kind: MetricKind,
    factor: f64,
    grad_centers: &mut Points,
    grad_normals: &mut Points,
) {
    let d = kern.dim;
    let s = -2.0 * kern.inv_width2();
    for p in 0..a.len() {
        let (gp, np) = (a.centers.point(p), a.normals.point(p));
        for q in 0..b.len() {
            let (gq, nq) = (b.centers.point(q), b.normals.point(q));
            let k = kern.eval_unchecked(gp, gq);
            let nn = dot(np, nq);
            let (f, dfa, dfb) = match kind {
                MetricKind::Current => (nn, 0.0, 1.0),
                MetricKind::Varifold => {
                    let denom = a_norms[p] * b_norms[q];
                    (
                        nn * nn / denom,
                        -nn * nn / (denom * a_norms[p] * a_norms[p]),
                        2.0 * nn / denom,
                    )
                }
            };
            let gc = grad_centers.point_mut(p);
            for x in 0..d {
                gc[x] += factor * s * k * f * (gp[x] - gq[x]);
            }
            let gn = grad_normals.point_mut(p);
            for x in 0..d {
                gn[x] += factor * k * (dfb * nq[x] + dfa * np[x]);
            }
        }
    }
}

/// Gradient of [`metric_dist2`] with respect to the vertices of `s1`.
pub fn metric_dist2_gradient(s1: &Shape, s2: &Shape, cfg: &MetricConfig) -> Result<Points> {
    let kern = check_pair(s1, s2, cfg)?;
    let d = s1.dim();
    let (r1, r2) = (cell_representation(s1), cell_representation(s2));
    let (n1, n2) = (norms(&r1, cfg.kind)?, norms(&r2, cfg.kind)?);
    let mut gc = Points::zeros(d, r1.len());
    let mut gn = Points::zeros(d, r1.len());
    accumulate_cell_grads(&r1, &n1, &r1, &n1, &kern, cfg.kind, 2.0, &mut gc, &mut gn);
    accumulate_cell_grads(&r1, &n1, &r2, &n2, &kern, cfg.kind, -2.0, &mut gc, &mut gn);

    let v = s1.vertices();
    let mut grad = Points::zeros(d, s1.n_vertices());
    for (c, cell) in s1.cells().enumerate() {
        let (g_c, g_n) = (gc.point(c), gn.point(c));
        for &i in cell {
            for (x, y) in grad.point_mut(i).iter_mut().zip(g_c) {
                *x += y / d as f64;
            }
        }
        if d == 2 {
            for x in 0..2 {
                grad.point_mut(cell[0])[x] -= g_n[x];
                grad.point_mut(cell[1])[x] += g_n[x];
            }
        } else {
            let (a, b, cc) = (v.point(cell[0]), v.point(cell[1]), v.point(cell[2]));
            let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
            let e2 = [cc[0] - a[0], cc[1] - a[1], cc[2] - a[2]];
            let g = [g_n[0], g_n[1], g_n[2]];
            let db = cross(&e2, &g);
            let dc = cross(&g, &e1);
            for x in 0..3 {
                grad.point_mut(cell[1])[x] += 0.5 * db[x];
                grad.point_mut(cell[2])[x] += 0.5 * dc[x];
                grad.point_mut(cell[0])[x] -= 0.5 * (db[x] + dc[x]);
            }
        }
    }
    Ok(grad)
}

/// An observed mesh with its self inner product precomputed, for repeated
/// distance evaluations against changing predictions.
#[derive(Debug, Clone)]
pub struct MetricTarget {
    repr: CellRepresentation,
    norms: Vec<f64>,
    self_inner: f64,
    kern: KernelConfig,
    kind: MetricKind,
    residual_dimension: f64,
}

impl MetricTarget {
    pub fn new(observed: &Shape, cfg: &MetricConfig) -> Result<Self> {
        cfg.validate()?;
        let kern = KernelConfig { width: cfg.width, dim: observed.dim() };
        let repr = cell_representation(observed);
        let norms = norms(&repr, cfg.kind)?;
        let self_inner = inner(&repr, &norms, &repr, &norms, &kern, cfg.kind);
        Ok(Self { repr, norms, self_inner, kern, kind: cfg.kind, residual_dimension: observed.residual_dimension() })
    }

    pub fn residual_dimension(&self) -> f64 {
        self.residual_dimension
    }

    /// `|prediction - observed|^2`.
    pub fn dist2(&self, prediction: &Shape) -> Result<f64> {
        if prediction.dim() != self.kern.dim {
            return Err(invalid("prediction and observation dimensions differ"));
        }
        let r = cell_representation(prediction);
        let n = norms(&r, self.kind)?;
        let pp = inner(&r, &n, &r, &n, &self.kern, self.kind);
        let po = inner(&r, &n, &self.repr, &self.norms, &self.kern, self.kind);
        Ok((pp - 2.0 * po + self.self_inner).max(0.0))
    }
}
