//! Parallel transport of momenta along geodesics (fanning scheme) and exp-parallel curves.
//!
//! One transport step from grid time `t_k` to `t_{k+1} = t_k + h`:
//!
//! 1. shoot one RK4 step from `c_k` with momenta `m_k + eps w_k` and `m_k - eps w_k`;
//! 2. the Jacobi field is the central difference of the two endpoints divided by `2 eps h`;
//! 3. it is turned back into momenta by solving with `K_{c_{k+1}}`;
//! 4. the result is rescaled so that `|w|_K` and `<m, w>_K` keep their initial values.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geodesic::{default_steps, exp_unit, flow_shape, rk4_step, shoot, GeodesicTrajectory, Rk4Workspace};
use crate::kernel::{kernel_inner, kernel_matrix, KernelConfig};
use crate::points::{ControlPoints, Momenta, Points};
use crate::shape::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportOptions {
    /// Perturbation size, as a kernel norm of `eps * w`.
    pub epsilon: f64,
    /// Rescale after each step to conserve `|w|_K` and `<m, w>_K`.
    pub renormalize: bool,
    /// Largest tolerated condition number of the kernel matrix.
    pub max_condition: f64,
}

impl Default for TransportOptions {
    fn default() -> Self {
        Self { epsilon: 1e-3, renormalize: true, max_condition: 1e12 }
    }
}

#[derive(Debug, Clone)]
pub struct TransportedMomenta {
    pub times: Vec<f64>,
    pub momenta: Vec<Momenta>,
}

impl TransportedMomenta {
    pub fn last(&self) -> &Momenta {
        self.momenta.last().expect("non-empty transport")
    }
}

/// Invariants recorded at the start of the transport.
#[derive(Debug, Clone, Copy)]
pub(crate) struct TransportTargets {
    norm2: f64,
    inner: f64,
}

impl TransportTargets {
    pub(crate) fn new(c: &ControlPoints, m: &Momenta, w: &Momenta, cfg: &KernelConfig) -> Self {
        Self { norm2: kernel_inner(c, w, w, cfg), inner: kernel_inner(c, m, w, cfg) }
    }
}

/// Cholesky factor of a kernel matrix, with a condition-number check.
pub(crate) fn checked_cholesky(
    c: &ControlPoints,
    cfg: &KernelConfig,
    max_condition: f64,
    step: usize,
) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let k = kernel_matrix(c, cfg);
    let eig = k.clone().symmetric_eigenvalues();
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= max_condition) {
        return Err(Error::IllConditioned { step, condition });
    }
    k.cholesky().ok_or(Error::IllConditioned { step, condition })
}

fn solve_momenta(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>, velocity: &Points) -> Points {
    let (n, d) = (velocity.len(), velocity.dim());
    let rhs = DMatrix::from_fn(n, d, |i, a| velocity.point(i)[a]);
    let sol = chol.solve(&rhs);
    let mut out = Points::zeros(d, n);
    for i in 0..n {
        for a in 0..d {
            out.point_mut(i)[a] = sol[(i, a)];
        }
    }
    out
}

fn renormalize(w: Momenta, c: &ControlPoints, m: &Momenta, target: &TransportTargets, cfg: &KernelConfig) -> Momenta {
    let mm = kernel_inner(c, m, m, cfg);
    if mm <= 1e-300 {
        let n2 = kernel_inner(c, &w, &w, cfg);
        return if n2 > 0.0 { w.scaled((target.norm2 / n2).sqrt()) } else { w };
    }
    let a = target.inner / mm;
    let mut perp = w.clone();
    perp.axpy(-kernel_inner(c, m, &w, cfg) / mm, m);
    let perp2 = kernel_inner(c, &perp, &perp, cfg);
    let target_perp2 = target.norm2 - a * a * mm;
    let mut out = if target_perp2 > 0.0 && perp2 > 0.0 {
        perp.scaled((target_perp2 / perp2).sqrt())
    } else {
        Points::zeros(w.dim(), w.len())
    };
    out.axpy(a, m);
    out
}

/// Advances a set of transported momenta by one fanning step of size `h`,
/// from the geodesic state `(c, m)` to `(c_next, m_next)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn fanning_step(
    cfg: &KernelConfig,
    c: &ControlPoints,
    m: &Momenta,
    c_next: &ControlPoints,
    m_next: &Momenta,
    h: f64,
    ws: &[Momenta],
    targets: &[TransportTargets],
    opts: &TransportOptions,
    step: usize,
    work: &mut Rk4Workspace,
) -> Result<Vec<Momenta>> {
    if h == 0.0 {
        return Ok(ws.to_vec());
    }
    let chol = checked_cholesky(c_next, cfg, opts.max_condition, step)?;
    let mut out = Vec::with_capacity(ws.len());
    for (w, target) in ws.iter().zip(targets) {
        let wn2 = kernel_inner(c, w, w, cfg);
        if wn2 <= 0.0 || w.as_slice().iter().all(|&v| v == 0.0) {
            out.push(Points::zeros(w.dim(), w.len()));
            continue;
        }
        let eps = opts.epsilon / wn2.sqrt();
        let endpoint = |sign: f64, work: &mut Rk4Workspace| {
            let mut cc = c.as_slice().to_vec();
            let mut mm = m.plus_scaled(sign * eps, w).into_vec();
            rk4_step(cfg, h, &mut cc, &mut mm, &mut [], work);
            cc
        };
        let plus = endpoint(1.0, work);
        let minus = endpoint(-1.0, work);
        let scale = 1.0 / (2.0 * eps * h);
        let jacobi = Points::new(c.dim(), plus.iter().zip(&minus).map(|(p, q)| (p - q) * scale).collect())?;
        let mut next = solve_momenta(&chol, &jacobi);
        if opts.renormalize {
            next = renormalize(next, c_next, m_next, target, cfg);
        }
        if !next.is_finite() {
            return Err(Error::Divergence { step, detail: "non-finite transported momenta".into() });
        }
        out.push(next);
    }
    Ok(out)
}

/// Transports `w` along `traj` on the trajectory's own grid.
pub fn parallel_transport(traj: &GeodesicTrajectory, w: &Momenta) -> Result<TransportedMomenta> {
    parallel_transport_with(traj, w, &TransportOptions::default())
}

pub fn parallel_transport_with(
    traj: &GeodesicTrajectory,
    w: &Momenta,
    opts: &TransportOptions,
) -> Result<TransportedMomenta> {
    let mut all = parallel_transport_many(traj, std::slice::from_ref(w), opts)?;
    Ok(all.pop().expect("one input"))
}

/// Transports several momenta along the same trajectory, sharing kernel factorizations.
pub fn parallel_transport_many(
    traj: &GeodesicTrajectory,
    ws: &[Momenta],
    opts: &TransportOptions,
) -> Result<Vec<TransportedMomenta>> {
    let cfg = traj.kernel();
    let states = traj.states();
    let s0 = &states[0];
    for w in ws {
        if !w.same_shape(&s0.momenta) {
            return Err(invalid("transported momenta must match the trajectory's control points"));
        }
        w.check_finite("transported momenta")?;
    }
    let targets: Vec<TransportTargets> =
        ws.iter().map(|w| TransportTargets::new(&s0.control_points, &s0.momenta, w, cfg)).collect();
    let h = traj.step();
    let mut work = Rk4Workspace::default();
    let mut history: Vec<Vec<Momenta>> = vec![ws.to_vec()];
    for k in 0..states.len() - 1 {
        let (a, b) = (&states[k], &states[k + 1]);
        let next = fanning_step(
            cfg,
            &a.control_points,
            &a.momenta,
            &b.control_points,
            &b.momenta,
            h,
            history.last().expect("non-empty"),
            &targets,
            opts,
            k + 1,
            &mut work,
        )?;
        history.push(next);
    }
    Ok((0..ws.len())
        .map(|j| TransportedMomenta {
            times: traj.times().to_vec(),
            momenta: history.iter().map(|h| h[j].clone()).collect(),
        })
        .collect())
}

/// Integration resolution for exp-parallel curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpParallelSteps {
    /// Geodesic/transport grid resolution, steps per unit time.
    pub steps_per_unit: usize,
    /// Steps of the final unit-time exponential.
    pub exp_steps: usize,
}

impl Default for ExpParallelSteps {
    fn default() -> Self {
        Self { steps_per_unit: 20, exp_steps: 10 }
    }
}

/// Samples of the curve exp-parallel to the geodesic through `(c0, m0)` at `t0`.
#[derive(Debug, Clone)]
pub struct ExpParallelCurve {
    pub times: Vec<f64>,
    /// Control points of the carrying geodesic at each time.
    pub control_points: Vec<ControlPoints>,
    /// Geodesic momenta at each time.
    pub geodesic_momenta: Vec<Momenta>,
    /// Transported space-shift momenta at each time.
    pub transported: Vec<Momenta>,
    /// The template flowed along the geodesic, at each time.
    pub geodesic_shapes: Vec<Shape>,
    /// Curve points: the unit exponential of the transported momenta applied to the flowed template.
    pub shapes: Vec<Shape>,
}

#[allow(clippy::too_many_arguments)]
pub fn exp_parallel(
    c0: &ControlPoints,
    m0: &Momenta,
    t0: f64,
    w: &Momenta,
    eval_times: &[f64],
    y0: &Shape,
    cfg: &KernelConfig,
    steps: &ExpParallelSteps,
) -> Result<ExpParallelCurve> {
    if eval_times.iter().any(|t| !t.is_finite()) {
        return Err(invalid("evaluation times must be finite"));
    }
    let mut curve = ExpParallelCurve {
        times: eval_times.to_vec(),
        control_points: Vec::new(),
        geodesic_momenta: Vec::new(),
        transported: Vec::new(),
        geodesic_shapes: Vec::new(),
        shapes: Vec::new(),
    };
    for &t in eval_times {
        let n = default_steps(t0, t, steps.steps_per_unit);
        let traj = shoot(c0, m0, t0, t, n, cfg)?;
        let flowed = flow_shape(&traj, y0)?.final_shape();
        let pw = parallel_transport(&traj, w)?.last().clone();
        let end = traj.last();
        curve.shapes.push(exp_unit(&end.control_points, &pw, &flowed, steps.exp_steps, cfg)?);
        curve.control_points.push(end.control_points.clone());
        curve.geodesic_momenta.push(end.momenta.clone());
        curve.transported.push(pw);
        curve.geodesic_shapes.push(flowed);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd(rng: &mut impl Rng, n: usize, scale: f64) -> Points {
        Points::new(2, (0..2 * n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()).unwrap()
    }

    fn setup(seed: u64) -> (Points, Points, KernelConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = Points::from_rows(&[[-1.0, 0.0], [-0.5, 0.6], [0.0, 0.9], [0.5, 0.6], [1.0, 0.0]]);
        let jitter = rnd(&mut rng, 5, 0.1);
        (c.plus_scaled(1.0, &jitter), rnd(&mut rng, 5, 0.4), KernelConfig::new(0.8, 2).unwrap())
    }

    fn rel(a: &Points, b: &Points) -> f64 {
        a.sub(b).norm_squared().sqrt() / b.norm_squared().sqrt().max(1e-300)
    }

    #[test]
    fn zero_vector_transports_to_zero() {
        let (c, m, cfg) = setup(1);
        let traj = shoot(&c, &m, 0.0, 1.0, 20, &cfg).unwrap();
        let p = parallel_transport(&traj, &Points::zeros(2, 5)).unwrap();
        assert!(p.momenta.iter().all(|w| w.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn stationary_geodesic_keeps_vector() {
        let (c, _, cfg) = setup(2);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let w = rnd(&mut rng, 5, 0.5);
        let traj = shoot(&c, &Points::zeros(2, 5), 0.0, 1.0, 20, &cfg).unwrap();
        let p = parallel_transport(&traj, &w).unwrap();
        for pw in &p.momenta {
            assert!(rel(pw, &w) < 1e-6, "{}", rel(pw, &w));
        }
    }

    #[test]
    fn geodesic_momentum_is_parallel() {
        for seed in 0..5 {
            let (c, m, cfg) = setup(seed);
            let traj = shoot(&c, &m, 0.0, 1.0, 20, &cfg).unwrap();
            let p = parallel_transport(&traj, &m).unwrap();
            for (pw, st) in p.momenta.iter().zip(traj.states()) {
                assert!(rel(pw, &st.momenta) < 1e-3, "{}", rel(pw, &st.momenta));
            }
        }
    }

    #[test]
    fn conserves_norm_and_angle_even_before_renormalization() {
        for seed in 0..5 {
            let (c, m, cfg) = setup(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let w = rnd(&mut rng, 5, 0.5);
            let traj = shoot(&c, &m, 0.0, 1.0, 20, &cfg).unwrap();
            for renormalize in [true, false] {
                let opts = TransportOptions { renormalize, ..Default::default() };
                let p = parallel_transport_with(&traj, &w, &opts).unwrap();
                let n0 = kernel_inner(&c, &w, &w, &cfg);
                let a0 = kernel_inner(&c, &m, &w, &cfg);
                let tol = if renormalize { 1e-3 } else { 0.05 };
                for (pw, st) in p.momenta.iter().zip(traj.states()) {
                    let n = kernel_inner(&st.control_points, pw, pw, &cfg);
                    assert!(((n - n0) / n0).abs() < tol, "norm drift {}", (n - n0) / n0);
                    if renormalize {
                        let a = kernel_inner(&st.control_points, &st.momenta, pw, &cfg);
                        let scale = (n0 * kernel_inner(&c, &m, &m, &cfg)).sqrt();
                        assert!(((a - a0) / scale).abs() < 1e-3);
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_vector() {
        let (c, m, cfg) = setup(3);
        let traj = shoot(&c, &m, 0.0, 1.0, 4, &cfg).unwrap();
        assert!(parallel_transport(&traj, &Points::zeros(2, 4)).is_err());
    }

    #[test]
    fn nearly_coincident_control_points_are_ill_conditioned() {
        let c = Points::from_rows(&[[0.0, 0.0], [1e-9, 0.0]]);
        let m = Points::from_rows(&[[0.1, 0.0], [0.1, 0.0]]);
        let cfg = KernelConfig::new(1.0, 2).unwrap();
        let traj = shoot(&c, &m, 0.0, 0.1, 2, &cfg).unwrap();
        let w = Points::from_rows(&[[0.0, 1.0], [0.0, -1.0]]);
        assert!(matches!(parallel_transport(&traj, &w), Err(Error::IllConditioned { .. })));
    }

    #[test]
    fn exp_parallel_special_cases() {
        let (c, m, cfg) = setup(4);
        let y0 = Shape::polyline(&[[-1.2, -0.2], [-0.4, 0.5], [0.3, 0.7], [1.1, 0.1]]).unwrap();
        let times = [-0.5, 0.0, 0.7];
        let steps = ExpParallelSteps::default();
        let zero = Points::zeros(2, 5);
        let curve = exp_parallel(&c, &m, 0.0, &zero, &times, &y0, &cfg, &steps).unwrap();
        for (s, g) in curve.shapes.iter().zip(&curve.geodesic_shapes) {
            assert_eq!(s, g);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rnd(&mut rng, 5, 0.3);
        let still = exp_parallel(&c, &zero, 0.0, &w, &times, &y0, &cfg, &steps).unwrap();
        let direct = exp_unit(&c, &w, &y0, steps.exp_steps, &cfg).unwrap();
        for s in &still.shapes {
            assert!(rel(s.vertices(), direct.vertices()) < 1e-8);
        }
    }

    #[test]
    fn transport_is_linear() {
        let (c, m, cfg) = setup(6);
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (w1, w2) = (rnd(&mut rng, 5, 0.5), rnd(&mut rng, 5, 0.5));
        let (a, b) = (0.7, -1.3);
        let traj = shoot(&c, &m, 0.0, 1.0, 20, &cfg).unwrap();
        let combo = w1.scaled(a).plus_scaled(b, &w2);
        let opts = TransportOptions::default();
        let p = parallel_transport_many(&traj, &[w1, w2, combo], &opts).unwrap();
        let expected = p[0].last().scaled(a).plus_scaled(b, p[1].last());
        assert!(rel(p[2].last(), &expected) < 1e-3, "{}", rel(p[2].last(), &expected));
    }

    #[test]
    fn endpoint_error_shrinks_at_least_linearly() {
        let (c, m, cfg) = setup(7);
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let w = rnd(&mut rng, 5, 0.5);
        let end = |n: usize| {
            let traj = shoot(&c, &m, 0.0, 1.0, n, &cfg).unwrap();
            parallel_transport(&traj, &w).unwrap().last().clone()
        };
        let coarse = [5usize, 10];
        let errs: Vec<f64> = coarse.iter().map(|&n| rel(&end(n), &end(4 * n))).collect();
        let order = (errs[0] / errs[1]).log2();
        assert!(order >= 0.9, "order {order}, errors {errs:?}");
    }

    #[test]
    fn backward_transport_uses_backward_geodesic() {
        let (c, m, cfg) = setup(8);
        let traj = shoot(&c, &m, 0.0, -1.0, 20, &cfg).unwrap();
        let p = parallel_transport(&traj, &m).unwrap();
        assert!(rel(p.last(), &traj.last().momenta) < 1e-3);
    }

    #[test]
    fn exp_parallel_matches_manual_composition() {
        let (c, m, cfg) = setup(9);
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let w = rnd(&mut rng, 5, 0.3);
        let arc: Vec<[f64; 2]> = (0..21)
            .map(|i| {
                let th = std::f64::consts::PI * i as f64 / 20.0;
                [-th.cos(), th.sin()]
            })
            .collect();
        let y0 = Shape::polyline(&arc).unwrap();
        let times = [-1.3, 0.0, 0.45, 2.0];
        let steps = ExpParallelSteps::default();
        let curve = exp_parallel(&c, &m, 0.0, &w, &times, &y0, &cfg, &steps).unwrap();
        for (k, &t) in times.iter().enumerate() {
            let traj = shoot(&c, &m, 0.0, t, default_steps(0.0, t, 20), &cfg).unwrap();
            let flowed = flow_shape(&traj, &y0).unwrap().final_shape();
            let pw = parallel_transport(&traj, &w).unwrap().last().clone();
            let manual = crate::geodesic::exp_shape(&traj.last().control_points, &pw, &flowed, 0.0, 1.0, 10, &cfg)
                .unwrap();
            let diff = manual.vertices().sub(curve.shapes[k].vertices());
            assert!(diff.as_slice().iter().all(|v| v.abs() < 1e-12));
        }
    }
}
