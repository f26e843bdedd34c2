//! Geodesic shooting on the manifold of control-point diffeomorphisms.
//!
//! `(c, m)` follow the Hamiltonian system `c' = K_c m`, `m' = -1/2 grad_c (m^T K_c m)`,
//! integrated with classical RK4 on a uniform grid. Shape vertices are flowed jointly
//! with the control points (`x' = v_t(x)`), reusing the RK4 stages of `(c, m)`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel::{convolve_into, hamiltonian, hamiltonian_grads_into, KernelConfig};
use crate::points::{ControlPoints, Momenta, Points};
use crate::shape::Shape;

/// Default integration resolution: steps per unit of model time.
pub const DEFAULT_STEPS_PER_UNIT: usize = 10;

/// Number of uniform steps covering `[t0, t1]` at `per_unit` steps per unit time (at least 1).
pub fn default_steps(t0: f64, t1: f64, per_unit: usize) -> usize {
    ((t1 - t0).abs() * per_unit as f64).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeodesicState {
    pub control_points: ControlPoints,
    pub momenta: Momenta,
}

#[derive(Debug, Clone)]
pub struct GeodesicTrajectory {
    times: Vec<f64>,
    states: Vec<GeodesicState>,
    kernel: KernelConfig,
}

impl GeodesicTrajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[GeodesicState] {
        &self.states
    }

    pub fn kernel(&self) -> &KernelConfig {
        &self.kernel
    }

    pub fn n_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn last(&self) -> &GeodesicState {
        self.states.last().expect("trajectory has at least one state")
    }

    /// Signed step length of the uniform grid.
    pub fn step(&self) -> f64 {
        if self.times.len() < 2 {
            0.0
        } else {
            (self.times[self.times.len() - 1] - self.times[0]) / self.n_steps() as f64
        }
    }

    pub fn hamiltonians(&self) -> Vec<f64> {
        self.states.iter().map(|s| hamiltonian(&s.control_points, &s.momenta, &self.kernel)).collect()
    }
}

/// Deformed copies of a shape's vertices, one per trajectory time.
#[derive(Debug, Clone)]
pub struct FlowedShape {
    source: Shape,
    times: Vec<f64>,
    vertices: Vec<Points>,
}

impl FlowedShape {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn vertices(&self, k: usize) -> &Points {
        &self.vertices[k]
    }

    pub fn shape_at(&self, k: usize) -> Shape {
        self.source.with_vertices(self.vertices[k].clone())
    }

    pub fn final_shape(&self) -> Shape {
        self.shape_at(self.vertices.len() - 1)
    }
}

/// Scratch buffers for one RK4 step of the coupled `(c, m, x)` system.
#[derive(Debug, Default, Clone)]
pub(crate) struct Rk4Workspace {
    kc: [Vec<f64>; 4],
    km: [Vec<f64>; 4],
    kx: [Vec<f64>; 4],
    c_tmp: Vec<f64>,
    m_tmp: Vec<f64>,
    x_tmp: Vec<f64>,
    grad: Vec<f64>,
}

impl Rk4Workspace {
    fn resize(&mut self, nc: usize, nx: usize) {
        for k in self.kc.iter_mut().chain(self.km.iter_mut()) {
            k.resize(nc, 0.0);
        }
        for k in self.kx.iter_mut() {
            k.resize(nx, 0.0);
        }
        self.c_tmp.resize(nc, 0.0);
        self.m_tmp.resize(nc, 0.0);
        self.x_tmp.resize(nx, 0.0);
        self.grad.resize(nc, 0.0);
    }
}

/// Evaluates `(c', m', x')` at the given state into the stage buffers.
#[allow(clippy::too_many_arguments)]
fn derivatives(
    cfg: &KernelConfig,
    c: &[f64],
    m: &[f64],
    x: &[f64],
    dc: &mut [f64],
    dm: &mut [f64],
    dx: &mut [f64],
    grad: &mut [f64],
) {
    hamiltonian_grads_into(c, m, dc, grad, cfg);
    for (d, g) in dm.iter_mut().zip(grad.iter()) {
        *d = -g;
    }
    if !x.is_empty() {
        convolve_into(c, m, x, dx, cfg);
    }
}

/// One classical RK4 step of size `h`, in place. `x` may be empty.
pub(crate) fn rk4_step(cfg: &KernelConfig, h: f64, c: &mut [f64], m: &mut [f64], x: &mut [f64], ws: &mut Rk4Workspace) {
    let (nc, nx) = (c.len(), x.len());
    ws.resize(nc, nx);
    let Rk4Workspace { kc, km, kx, c_tmp, m_tmp, x_tmp, grad } = ws;
    let coeffs = [0.0, 0.5, 0.5, 1.0];
    for s in 0..4 {
        if s == 0 {
            c_tmp.copy_from_slice(c);
            m_tmp.copy_from_slice(m);
            x_tmp.copy_from_slice(x);
        } else {
            let a = coeffs[s] * h;
            for i in 0..nc {
                c_tmp[i] = c[i] + a * kc[s - 1][i];
                m_tmp[i] = m[i] + a * km[s - 1][i];
            }
            for i in 0..nx {
                x_tmp[i] = x[i] + a * kx[s - 1][i];
            }
        }
        derivatives(cfg, c_tmp, m_tmp, x_tmp, &mut kc[s], &mut km[s], &mut kx[s], grad);
    }
    let w = h / 6.0;
    for i in 0..nc {
        c[i] += w * (kc[0][i] + 2.0 * kc[1][i] + 2.0 * kc[2][i] + kc[3][i]);
        m[i] += w * (km[0][i] + 2.0 * km[1][i] + 2.0 * km[2][i] + km[3][i]);
    }
    for i in 0..nx {
        x[i] += w * (kx[0][i] + 2.0 * kx[1][i] + 2.0 * kx[2][i] + kx[3][i]);
    }
}

fn check_inputs(c0: &ControlPoints, m0: &Momenta, cfg: &KernelConfig) -> Result<()> {
    cfg.validate()?;
    if c0.dim() != cfg.dim || m0.dim() != cfg.dim {
        return Err(invalid("control points / momenta dimension differs from kernel dimension"));
    }
    if c0.is_empty() {
        return Err(invalid("at least one control point is required"));
    }
    if c0.len() != m0.len() {
        return Err(invalid(format!("{} control points paired with {} momenta", c0.len(), m0.len())));
    }
    c0.check_finite("control points")?;
    m0.check_finite("momenta")
}

fn diverged(step: usize, what: &str) -> Error {
    Error::Divergence { step, detail: format!("non-finite {what}") }
}

/// Integrates the Hamiltonian equations from `(c0, m0)` at `t0` to `t1` in `n_steps` uniform RK4 steps.
/// `t1 < t0` integrates backward in time.
pub fn shoot(
    c0: &ControlPoints,
    m0: &Momenta,
    t0: f64,
    t1: f64,
    n_steps: usize,
    cfg: &KernelConfig,
) -> Result<GeodesicTrajectory> {
    check_inputs(c0, m0, cfg)?;
    if n_steps == 0 {
        return Err(invalid("n_steps must be at least 1"));
    }
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(invalid("integration bounds must be finite"));
    }
    let h = (t1 - t0) / n_steps as f64;
    let mut c = c0.as_slice().to_vec();
    let mut m = m0.as_slice().to_vec();
    let mut ws = Rk4Workspace::default();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut states = Vec::with_capacity(n_steps + 1);
    times.push(t0);
    states.push(GeodesicState { control_points: c0.clone(), momenta: m0.clone() });
    for k in 0..n_steps {
        rk4_step(cfg, h, &mut c, &mut m, &mut [], &mut ws);
        if !c.iter().chain(&m).all(|v| v.is_finite()) {
            return Err(diverged(k + 1, "control points or momenta"));
        }
        times.push(if k + 1 == n_steps { t1 } else { t0 + (k + 1) as f64 * h });
        states.push(GeodesicState {
            control_points: Points::new(cfg.dim, c.clone())?,
            momenta: Points::new(cfg.dim, m.clone())?,
        });
    }
    Ok(GeodesicTrajectory { times, states, kernel: *cfg })
}

/// Flows every vertex of `y` along the velocity fields of the trajectory,
/// using the same RK4 grid (the coupled system restarted from each stored state).
pub fn flow_shape(traj: &GeodesicTrajectory, y: &Shape) -> Result<FlowedShape> {
    let cfg = traj.kernel;
    if y.dim() != cfg.dim {
        return Err(invalid(format!(
            "shape dimension {} does not match trajectory dimension {}",
            y.dim(),
            cfg.dim
        )));
    }
    let h = traj.step();
    let mut ws = Rk4Workspace::default();
    let mut x = y.vertices().as_slice().to_vec();
    let mut vertices = Vec::with_capacity(traj.states.len());
    vertices.push(y.vertices().clone());
    for (k, st) in traj.states[..traj.states.len() - 1].iter().enumerate() {
        let mut c = st.control_points.as_slice().to_vec();
        let mut m = st.momenta.as_slice().to_vec();
        rk4_step(&cfg, h, &mut c, &mut m, &mut x, &mut ws);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(diverged(k + 1, "shape vertices"));
        }
        vertices.push(Points::new(cfg.dim, x.clone())?);
    }
    Ok(FlowedShape { source: y.clone(), times: traj.times.clone(), vertices })
}

/// `phi_{t1}(y0)` for the geodesic shot from `(c0, m0)` at `t0`.
pub fn exp_shape(
    c0: &ControlPoints,
    m0: &Momenta,
    y0: &Shape,
    t0: f64,
    t1: f64,
    n_steps: usize,
    cfg: &KernelConfig,
) -> Result<Shape> {
    check_inputs(c0, m0, cfg)?;
    if n_steps == 0 {
        return Err(invalid("n_steps must be at least 1"));
    }
    if y0.dim() != cfg.dim {
        return Err(invalid("shape dimension does not match kernel dimension"));
    }
    let h = (t1 - t0) / n_steps as f64;
    let mut ws = Rk4Workspace::default();
    let (mut c, mut m) = (c0.as_slice().to_vec(), m0.as_slice().to_vec());
    let mut x = y0.vertices().as_slice().to_vec();
    for k in 0..n_steps {
        rk4_step(cfg, h, &mut c, &mut m, &mut x, &mut ws);
        if !c.iter().chain(&m).chain(&x).all(|v| v.is_finite()) {
            return Err(diverged(k + 1, "state"));
        }
    }
    Ok(y0.with_vertices(Points::new(cfg.dim, x)?))
}

/// Unit-time exponential `Exp_{c0}(m0)` applied to `y0`.
pub fn exp_unit(c0: &ControlPoints, m0: &Momenta, y0: &Shape, n_steps: usize, cfg: &KernelConfig) -> Result<Shape> {
    exp_shape(c0, m0, y0, 0.0, 1.0, n_steps, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rnd(rng: &mut impl Rng, n: usize, scale: f64) -> Points {
        Points::new(2, (0..2 * n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()).unwrap()
    }

    fn cfg() -> KernelConfig {
        KernelConfig::new(1.0, 2).unwrap()
    }

    #[test]
    fn zero_momenta_is_stationary() {
        let c = Points::from_rows(&[[0.0, 0.0], [1.0, 0.5]]);
        let traj = shoot(&c, &Points::zeros(2, 2), 0.0, 2.0, 7, &cfg()).unwrap();
        assert!(traj.states().iter().all(|s| s.control_points == c && s.momenta.norm_squared() == 0.0));
        let y = Shape::polyline(&[[0.0, 1.0], [1.0, 1.0], [2.0, 0.0]]).unwrap();
        assert_eq!(exp_shape(&c, &Points::zeros(2, 2), &y, 0.0, 1.0, 5, &cfg()).unwrap(), y);
        let flowed = flow_shape(&traj, &y).unwrap();
        assert!((0..flowed.len()).all(|k| flowed.vertices(k) == y.vertices()));
    }

    #[test]
    fn single_control_point_moves_in_a_straight_line() {
        let c = Points::from_rows(&[[0.2, -0.1]]);
        let m = Points::from_rows(&[[1.0, 0.0]]);
        let traj = shoot(&c, &m, 0.0, 1.0, 10, &cfg()).unwrap();
        for (t, s) in traj.times().iter().zip(traj.states()) {
            assert!((s.control_points.point(0)[0] - (0.2 + t)).abs() < 1e-12);
            assert!((s.control_points.point(0)[1] + 0.1).abs() < 1e-12);
            assert_eq!(s.momenta, m);
        }
    }

    #[test]
    fn matches_finer_integration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let c = rnd(&mut rng, 2, 1.0);
            let m = rnd(&mut rng, 2, 0.5);
            let coarse = shoot(&c, &m, 0.0, 1.0, 10, &cfg()).unwrap();
            let fine = shoot(&c, &m, 0.0, 1.0, 100, &cfg()).unwrap();
            let (a, b) = (coarse.last(), fine.last());
            let err = a.control_points.sub(&b.control_points).norm_squared().sqrt()
                + a.momenta.sub(&b.momenta).norm_squared().sqrt();
            let scale = b.control_points.norm_squared().sqrt() + b.momenta.norm_squared().sqrt();
            assert!(err / scale < 1e-7, "{}", err / scale);
        }
    }

    #[test]
    fn backward_integration_inverts_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = rnd(&mut rng, 3, 1.0);
        let m = rnd(&mut rng, 3, 0.4);
        let fwd = shoot(&c, &m, 2.0, 3.0, 20, &cfg()).unwrap();
        let end = fwd.last();
        let back = shoot(&end.control_points, &end.momenta, 3.0, 2.0, 20, &cfg()).unwrap();
        assert_eq!(back.times()[20], 2.0);
        assert!(back.last().control_points.sub(&c).norm_squared().sqrt() < 1e-8);
    }

    #[test]
    fn flow_reproduces_control_point_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = rnd(&mut rng, 5, 1.0);
        let m = rnd(&mut rng, 5, 0.5);
        let traj = shoot(&c, &m, 0.0, 1.5, 15, &cfg()).unwrap();
        let cells: Vec<usize> = (0..4).flat_map(|i| [i, i + 1]).collect();
        let as_shape = Shape::new(c.clone(), cells).unwrap();
        let flowed = flow_shape(&traj, &as_shape).unwrap();
        for k in 0..traj.states().len() {
            let diff = flowed.vertices(k).sub(&traj.states()[k].control_points);
            assert!(diff.as_slice().iter().all(|v| v.abs() < 1e-13));
        }
    }

    #[test]
    fn far_vertex_displacement_is_bounded_by_kernel_decay() {
        let c = Points::from_rows(&[[0.0, 0.0]]);
        let m = Points::from_rows(&[[0.3, 0.1]]);
        let y = Shape::polyline(&[[4.0, 0.0], [4.0, 1.0]]).unwrap();
        let (t0, t1) = (0.0, 1.0);
        let traj = shoot(&c, &m, t0, t1, 10, &cfg()).unwrap();
        let out = flow_shape(&traj, &y).unwrap().final_shape();
        // the control point drifts toward the vertex, so bound with the closest approach
        let k = traj
            .states()
            .iter()
            .map(|s| cfg().eval_unchecked(s.control_points.point(0), out.vertices().point(0)))
            .fold(0.0, f64::max);
        let bound = k * m.norm_squared().sqrt() * (t1 - t0);
        let disp = out.vertices().sub(y.vertices());
        let d0 = (disp.point(0)[0].powi(2) + disp.point(0)[1].powi(2)).sqrt();
        assert!(d0 < bound * 1.01 && d0 > 0.0, "{d0} vs {bound}");
    }

    #[test]
    fn exp_shape_equals_shoot_then_flow() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let c = rnd(&mut rng, 4, 1.0);
        let m = rnd(&mut rng, 4, 0.5);
        let y = Shape::polyline(&[[0.0, 0.0], [0.5, 0.3], [1.0, 0.1]]).unwrap();
        let a = exp_unit(&c, &m, &y, 10, &cfg()).unwrap();
        let traj = shoot(&c, &m, 0.0, 1.0, 10, &cfg()).unwrap();
        assert_eq!(flow_shape(&traj, &y).unwrap().final_shape(), a);
    }

    #[test]
    fn hamiltonian_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let c = rnd(&mut rng, 5, 1.0);
        let m = rnd(&mut rng, 5, 0.3);
        let traj = shoot(&c, &m, 0.0, 1.0, 10, &cfg()).unwrap();
        let h = traj.hamiltonians();
        for v in &h {
            assert_relative_eq!(*v, h[0], max_relative = 1e-6);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let c = Points::from_rows(&[[0.0, 0.0]]);
        assert!(shoot(&c, &Points::zeros(2, 2), 0.0, 1.0, 10, &cfg()).is_err());
        assert!(shoot(&c, &Points::zeros(2, 1), 0.0, 1.0, 0, &cfg()).is_err());
        let y3 = Shape::new(
            Points::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]),
            vec![0, 1, 2],
        )
        .unwrap();
        let traj = shoot(&c, &Points::zeros(2, 1), 0.0, 1.0, 2, &cfg()).unwrap();
        assert!(flow_shape(&traj, &y3).is_err());
        let huge = Points::from_rows(&[[1e300, 0.0], [1e300, 1.0]]);
        let c2 = Points::from_rows(&[[0.0, 0.0], [0.0, 0.1]]);
        assert!(matches!(shoot(&c2, &huge, 0.0, 1.0, 3, &cfg()), Err(Error::Divergence { .. })));
    }
}
