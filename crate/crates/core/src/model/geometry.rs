//! Cached geometry of the mean geodesic for repeated predictions.
//!
//! The geodesic, the flowed template and the transported columns of the projected
//! mixing matrix are tabulated on a grid of step `h = 1 / steps_per_unit` anchored at
//! offset 0. An arbitrary offset `u` is reached from the grid node below `|u|` by one
//! partial RK4/fanning step. Transport is applied column-wise, so a space shift
//! `A s` is transported as `sum_l s_l P(a_l)`. Nodes outside the tabulated range are
//! computed on demand with the same operations, so results never depend on the range.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::geodesic::{exp_unit, rk4_step, Rk4Workspace};
use crate::kernel::KernelConfig;
use crate::points::{ControlPoints, Momenta, Points};
use crate::shape::Shape;
use crate::transport::{fanning_step, TransportOptions, TransportTargets};

use super::{mixing_columns, project_mixing, ModelConfig, PopulationLatents};

/// Offsets closer than this to a grid node use the node itself.
const SNAP: f64 = 1e-7;

#[derive(Debug, Clone)]
struct Node {
    c: ControlPoints,
    m: Momenta,
    x: Points,
    columns: Vec<Momenta>,
}

#[derive(Debug, Clone)]
pub struct PopulationGeometry {
    kernel: KernelConfig,
    transport: TransportOptions,
    exp_steps: usize,
    h: f64,
    template: Shape,
    targets: Vec<TransportTargets>,
    forward: Vec<Node>,
    backward: Vec<Node>,
}

impl PopulationGeometry {
    /// Tabulates the grid over the offsets `range.0 ..= range.1`.
    pub fn new(pop: &PopulationLatents, cfg: &ModelConfig, range: (f64, f64)) -> Result<Self> {
        pop.validate()?;
        if pop.template.dim() != cfg.kernel.dim {
            return Err(crate::error::invalid("template dimension differs from kernel dimension"));
        }
        let kernel = cfg.kernel;
        let projected = project_mixing(&pop.mixing, &pop.control_points, &pop.momenta, &kernel)?;
        let columns = mixing_columns(&projected, kernel.dim)?;
        let targets = columns
            .iter()
            .map(|w| TransportTargets::new(&pop.control_points, &pop.momenta, w, &kernel))
            .collect();
        let origin = Node {
            c: pop.control_points.clone(),
            m: pop.momenta.clone(),
            x: pop.template.vertices().clone(),
            columns,
        };
        let mut geom = Self {
            kernel,
            transport: cfg.transport,
            exp_steps: cfg.steps.exp_steps,
            h: 1.0 / cfg.steps.steps_per_unit as f64,
            template: pop.template.clone(),
            targets,
            forward: vec![origin.clone()],
            backward: vec![origin],
        };
        let (lo, hi) = (range.0.min(range.1), range.0.max(range.1));
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(crate::error::invalid("offset range must be finite"));
        }
        let mut work = Rk4Workspace::default();
        let n_forward = (hi.max(0.0) / geom.h).ceil() as usize;
        let n_backward = (-lo.min(0.0) / geom.h).ceil() as usize;
        for (sign, n) in [(1.0, n_forward), (-1.0, n_backward)] {
            for k in 1..=n {
                let prev = geom.nodes(sign).last().expect("origin present");
                let next = geom.advance(prev, sign * geom.h, k, &mut work)?;
                geom.nodes_mut(sign).push(next);
            }
        }
        Ok(geom)
    }

    fn nodes(&self, sign: f64) -> &Vec<Node> {
        if sign > 0.0 {
            &self.forward
        } else {
            &self.backward
        }
    }

    fn nodes_mut(&mut self, sign: f64) -> &mut Vec<Node> {
        if sign > 0.0 {
            &mut self.forward
        } else {
            &mut self.backward
        }
    }

    /// Range of offsets served from the table.
    pub fn cached_range(&self) -> (f64, f64) {
        (-((self.backward.len() - 1) as f64) * self.h, (self.forward.len() - 1) as f64 * self.h)
    }

    pub fn template(&self) -> &Shape {
        &self.template
    }

    /// Projected mixing columns at the reference time.
    pub fn projected_columns(&self) -> &[Momenta] {
        &self.forward[0].columns
    }

    /// `A_{m0-perp} s` at the reference time.
    pub fn space_shift(&self, sources: &[f64]) -> Result<Momenta> {
        combine(&self.forward[0].columns, sources)
    }

    fn advance(&self, node: &Node, h: f64, step: usize, work: &mut Rk4Workspace) -> Result<Node> {
        let (mut c, mut m, mut x) = (node.c.clone(), node.m.clone(), node.x.clone());
        rk4_step(&self.kernel, h, c.as_mut_slice(), m.as_mut_slice(), x.as_mut_slice(), work);
        if !(c.is_finite() && m.is_finite() && x.is_finite()) {
            return Err(Error::Divergence { step, detail: "non-finite mean geodesic state".into() });
        }
        let columns = fanning_step(
            &self.kernel,
            &node.c,
            &node.m,
            &c,
            &m,
            h,
            &node.columns,
            &self.targets,
            &self.transport,
            step,
            work,
        )?;
        Ok(Node { c, m, x, columns })
    }

    fn state_at(&self, u: f64) -> Result<Cow<'_, Node>> {
        if !u.is_finite() {
            return Err(crate::error::invalid("non-finite offset"));
        }
        let sign = if u >= 0.0 { 1.0 } else { -1.0 };
        let a = u.abs();
        let mut k = (a / self.h).floor() as usize;
        let mut r = a - k as f64 * self.h;
        if r < SNAP {
            r = 0.0;
        } else if self.h - r < SNAP {
            k += 1;
            r = 0.0;
        }
        let nodes = self.nodes(sign);
        let mut work = Rk4Workspace::default();
        let mut node = if k < nodes.len() {
            Cow::Borrowed(&nodes[k])
        } else {
            let mut n = nodes.last().expect("origin present").clone();
            for step in nodes.len()..=k {
                n = self.advance(&n, sign * self.h, step, &mut work)?;
            }
            Cow::Owned(n)
        };
        if r > 0.0 {
            node = Cow::Owned(self.advance(&node, sign * r, k + 1, &mut work)?);
        }
        Ok(node)
    }

    /// Mean-geodesic control points, momenta and flowed template at offset `u`.
    pub fn mean_state(&self, u: f64) -> Result<(ControlPoints, Momenta, Shape)> {
        let n = self.state_at(u)?;
        Ok((n.c.clone(), n.m.clone(), self.template.with_vertices(n.x.clone())))
    }

    /// Transported space shift at offset `u`.
    pub fn transported_shift(&self, sources: &[f64], u: f64) -> Result<Momenta> {
        combine(&self.state_at(u)?.columns, sources)
    }

    /// Curve point at offset `u` for the space shift with the given sources.
    pub fn predict(&self, sources: &[f64], u: f64) -> Result<Shape> {
        let n = self.state_at(u)?;
        let w = combine(&n.columns, sources)?;
        let y = self.template.with_vertices(n.x.clone());
        exp_unit(&n.c, &w, &y, self.exp_steps, &self.kernel)
    }
}

fn combine(columns: &[Momenta], sources: &[f64]) -> Result<Momenta> {
    if sources.len() != columns.len() {
        return Err(crate::error::invalid(format!(
            "{} sources given, model has {}",
            sources.len(),
            columns.len()
        )));
    }
    let mut w = Points::zeros(columns[0].dim(), columns[0].len());
    for (s, col) in sources.iter().zip(columns) {
        w.axpy(*s, col);
    }
    Ok(w)
}
