//! Discretized action along a parameter-space path.
//!
//! The time grid is `t_j = j/N`, `j = 0..=N`. At every node the reference
//! batch is pushed forward by `θ(t_j)`. Velocities (or accelerations) come
//! from finite differences of the pushed-forward positions across nodes,
//! and every time integral is a trapezoid sum. Without the ½ on the kinetic
//! term, the velocity-mode action is
//!
//! ```text
//! A = ∫ E‖ẋ‖² dt + κ₀ ∫ E V + κ₁ ∫ E log ρ + κ₂ ∫ E W + ∫ σ⁴/8 E‖∇log ρ‖²
//! ```
//!
//! Gradients are computed node by node: one tape per node maps `θ(t_j)` to
//! the node's particle states, a small head tape maps all states to the
//! action, and the head's cotangents are pushed back through each node tape.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::node::{transport_on, AugmentedBatch, Channels, IntegratorConfig};
use crate::potentials::{congestion, congestion_value, mean_potential, obstacle_values, polarize_drift, Obstacle};
use crate::spline::SplinePath;
use crate::tape::{weighted_sum, Mat, Tape, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KineticMode {
    #[default]
    Velocity,
    Acceleration,
    DriftMismatch,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InternalMode {
    #[default]
    None,
    Entropy,
}

fn default_eps() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    /// `(κ₀, κ₁, κ₂)`: obstacle, internal, interaction strengths.
    #[serde(default)]
    pub kappa: [f64; 3],
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub kinetic: KineticMode,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub internal: InternalMode,
    #[serde(default)]
    pub fisher: bool,
    #[serde(default = "default_eps")]
    pub interaction_eps: f64,
    #[serde(default)]
    pub normalize_drift: bool,
}

impl Default for ActionSpec {
    fn default() -> Self {
        Self {
            kappa: [0.0; 3],
            sigma: 0.0,
            kinetic: KineticMode::Velocity,
            obstacles: Vec::new(),
            internal: InternalMode::None,
            fisher: false,
            interaction_eps: default_eps(),
            normalize_drift: false,
        }
    }
}

impl ActionSpec {
    /// Kinetic energy only (`F ≡ 0`).
    pub fn free() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kappa.iter().any(|k| *k < 0.0 || !k.is_finite()) {
            return Err(Error::Config(format!("κ must be finite and ≥ 0, got {:?}", self.kappa)));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::Config(format!("σ must be ≥ 0, got {}", self.sigma)));
        }
        if self.interaction_eps < 0.0 {
            return Err(Error::Config("interaction ε must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn uses_obstacle(&self) -> bool {
        self.kappa[0] > 0.0 && !self.obstacles.is_empty()
    }

    pub fn uses_entropy(&self) -> bool {
        self.kappa[1] > 0.0 && self.internal == InternalMode::Entropy
    }

    pub fn uses_interaction(&self) -> bool {
        self.kappa[2] > 0.0
    }

    pub fn uses_fisher(&self) -> bool {
        self.fisher && self.sigma > 0.0
    }

    pub fn channels(&self) -> Channels {
        Channels {
            logdens: self.uses_entropy(),
            score: self.uses_fisher(),
        }
    }

    /// The same problem with every potential switched off.
    pub fn without_potentials(&self) -> Self {
        Self {
            kappa: [0.0; 3],
            fisher: false,
            ..self.clone()
        }
    }
}

/// Unscaled time integrals of each term and the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ActionTerms {
    pub total: f64,
    pub kinetic: f64,
    pub linear: f64,
    pub internal: f64,
    pub interaction: f64,
    pub fisher: f64,
}

/// Trapezoid weights for `n` intervals on `[0, 1]`.
pub fn trapezoid_weights(n: usize) -> Vec<f64> {
    let dt = 1.0 / n as f64;
    (0..=n)
        .map(|j| if j == 0 || j == n { 0.5 * dt } else { dt })
        .collect()
}

/// Everything the action needs besides the path itself.
pub struct ActionEval<'a, F: VelocityField + ?Sized> {
    pub field: &'a F,
    pub spec: &'a ActionSpec,
    /// Number of time intervals `N`.
    pub n: usize,
    pub integrator: IntegratorConfig,
    pub z: &'a Array2<f64>,
    /// `(log λ, ∇log λ)` at `z` when the reference is not standard normal.
    pub reference_channels: Option<&'a (Array1<f64>, Array2<f64>)>,
    /// Seed for the per-node opinion probes ξ.
    pub xi_seed: u64,
    /// Node tapes above this many bytes in total are recomputed instead of kept.
    pub tape_budget: usize,
}

struct NodeOut {
    x: Array2<f64>,
    l: Option<Array2<f64>>,
    s: Option<Array2<f64>>,
    kept: Option<KeptTape>,
}

struct KeptTape {
    tape: Tape,
    theta: usize,
    x: usize,
    l: Option<usize>,
    s: Option<usize>,
}

const DEFAULT_BUDGET: usize = 1 << 30;

impl<'a, F: VelocityField + ?Sized> ActionEval<'a, F> {
    pub fn new(field: &'a F, spec: &'a ActionSpec, n: usize, z: &'a Array2<f64>) -> Self {
        Self {
            field,
            spec,
            n,
            integrator: IntegratorConfig::default(),
            z,
            reference_channels: None,
            xi_seed: 0,
            tape_budget: DEFAULT_BUDGET,
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n).map(|j| j as f64 / self.n as f64).collect()
    }

    fn check(&self) -> Result<()> {
        self.spec.validate()?;
        self.integrator.validate()?;
        if self.n < 2 {
            return Err(Error::Config(format!("time grid needs N ≥ 2, got {}", self.n)));
        }
        if self.spec.kinetic == KineticMode::Acceleration && self.n < 3 {
            return Err(Error::Config(format!(
                "acceleration action needs N ≥ 3, got {}",
                self.n
            )));
        }
        if self.z.nrows() == 0 {
            return Err(Error::Config("empty reference batch".into()));
        }
        Ok(())
    }

    /// Probe direction ξ for node `j` (opinion drift).
    pub fn xi(&self, j: usize) -> Array1<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.xi_seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(j as u64 + 1)));
        Array1::from_shape_fn(self.field.dim(), |_| StandardNormal.sample(&mut rng))
    }

    fn node_forward(&self, theta: &Array1<f64>, keep: bool) -> Result<NodeOut> {
        let tape = Tape::new();
        let (x, l, s, ids) = {
            let th = if keep {
                tape.param(theta.view().insert_axis(Axis(0)).to_owned())
            } else {
                tape.constant(theta.view().insert_axis(Axis(0)).to_owned())
            };
            let st = transport_on(
                self.field,
                th,
                self.z,
                &self.integrator,
                self.spec.channels(),
                self.reference_channels,
            )?;
            let x = st.x.value().clone();
            let l = st.logdens.map(|v| v.value().clone());
            let s = st.score.map(|v| v.value().clone());
            let ids = (th.id(), st.x.id(), st.logdens.map(|v| v.id()), st.score.map(|v| v.id()));
            (x, l, s, ids)
        };
        let kept = keep.then_some(KeptTape {
            tape,
            theta: ids.0,
            x: ids.1,
            l: ids.2,
            s: ids.3,
        });
        Ok(NodeOut { x, l, s, kept })
    }

    fn node_backward(&self, kept: &KeptTape, gx: Mat, gl: Option<Mat>, gs: Option<Mat>) -> Array1<f64> {
        let t = &kept.tape;
        let mut seeds = vec![(t.var(kept.x), gx)];
        if let (Some(id), Some(g)) = (kept.l, gl) {
            seeds.push((t.var(id), g));
        }
        if let (Some(id), Some(g)) = (kept.s, gs) {
            seeds.push((t.var(id), g));
        }
        let grads = t.backward(&seeds);
        grads
            .get_or_zeros(t.var(kept.theta))
            .index_axis_move(Axis(0), 0)
    }

    /// Action at the given per-node parameters, optionally with `∂A/∂θ(t_j)`.
    pub fn evaluate(&self, thetas: &[Array1<f64>], want_grad: bool) -> Result<(ActionTerms, Option<Vec<Array1<f64>>>)> {
        self.check()?;
        if thetas.len() != self.n + 1 {
            return Err(Error::Shape(format!(
                "expected {} node parameters, got {}",
                self.n + 1,
                thetas.len()
            )));
        }
        let mut outs: Vec<NodeOut> = thetas
            .par_iter()
            .map(|th| self.node_forward(th, want_grad))
            .collect::<Result<_>>()?;
        // Drop tapes beyond the memory budget; they are rebuilt on demand.
        if want_grad {
            let mut used = 0usize;
            for o in outs.iter_mut() {
                let b = o.kept.as_ref().map_or(0, |k| k.tape.bytes());
                if used + b > self.tape_budget {
                    o.kept = None;
                } else {
                    used += b;
                }
            }
        }

        let head = Tape::new();
        let xs: Vec<Var> = outs.iter().map(|o| head.param(o.x.clone())).collect();
        let ls: Vec<Option<Var>> = outs
            .iter()
            .map(|o| o.l.as_ref().map(|l| head.param(l.clone())))
            .collect();
        let ss: Vec<Option<Var>> = outs
            .iter()
            .map(|o| o.s.as_ref().map(|s| head.param(s.clone())))
            .collect();
        let (terms, total) = self.head(&head, &xs, &ls, &ss)?;
        if !terms.total.is_finite() {
            return Err(Error::Domain(format!("non-finite action {terms:?}")));
        }
        if !want_grad {
            return Ok((terms, None));
        }
        let g = head.backward(&[(total, Mat::ones((1, 1)))]);
        let cot: Vec<(Mat, Option<Mat>, Option<Mat>)> = (0..outs.len())
            .map(|j| {
                (
                    g.get_or_zeros(xs[j]),
                    ls[j].map(|v| g.get_or_zeros(v)),
                    ss[j].map(|v| g.get_or_zeros(v)),
                )
            })
            .collect();
        drop(g);
        let grads: Vec<Array1<f64>> = outs
            .into_par_iter()
            .zip(cot.into_par_iter())
            .zip(thetas.par_iter())
            .map(|((o, (gx, gl, gs)), th)| {
                let kept = match o.kept {
                    Some(k) => k,
                    None => self.node_forward(th, true)?.kept.expect("kept on request"),
                };
                Ok(self.node_backward(&kept, gx, gl, gs))
            })
            .collect::<Result<_>>()?;
        Ok((terms, Some(grads)))
    }

    fn head<'t>(
        &self,
        _tape: &'t Tape,
        xs: &[Var<'t>],
        ls: &[Option<Var<'t>>],
        ss: &[Option<Var<'t>>],
    ) -> Result<(ActionTerms, Var<'t>)> {
        let n = self.n;
        let dt = 1.0 / n as f64;
        let w = trapezoid_weights(n);
        let m = self.z.nrows() as f64;
        let spec = self.spec;

        let mean_sq = |v: Var<'t>| v.square().sum().scale(1.0 / m);
        let velocity = |j: usize| -> Var<'t> {
            if j == 0 {
                xs[1].sub(xs[0]).scale(1.0 / dt)
            } else if j == n {
                xs[n].sub(xs[n - 1]).scale(1.0 / dt)
            } else {
                xs[j + 1].sub(xs[j - 1]).scale(0.5 / dt)
            }
        };

        let mut kinetic_terms = Vec::with_capacity(n + 1);
        match spec.kinetic {
            KineticMode::Velocity => {
                for j in 0..=n {
                    kinetic_terms.push((mean_sq(velocity(j)), w[j]));
                }
            }
            KineticMode::Acceleration => {
                let acc = |j: usize| {
                    let j = j.clamp(1, n - 1);
                    xs[j + 1]
                        .sub(xs[j].scale(2.0))
                        .add(xs[j - 1])
                        .scale(1.0 / (dt * dt))
                };
                for j in 0..=n {
                    kinetic_terms.push((mean_sq(acc(j)), w[j]));
                }
            }
            KineticMode::DriftMismatch => {
                for j in 0..=n {
                    let f = polarize_drift(xs[j], &self.xi(j), spec.normalize_drift);
                    kinetic_terms.push((mean_sq(f.sub(velocity(j))), 0.5 * w[j]));
                }
            }
        }
        let kinetic = weighted_sum(&kinetic_terms);

        let mut parts: Vec<(Var<'t>, f64)> = vec![(kinetic, 1.0)];
        let mut terms = ActionTerms {
            kinetic: kinetic.scalar(),
            ..Default::default()
        };

        if spec.uses_obstacle() {
            let per: Vec<_> = (0..=n)
                .map(|j| (mean_potential(xs[j], &spec.obstacles), w[j]))
                .collect();
            let lin = weighted_sum(&per);
            terms.linear = lin.scalar();
            parts.push((lin, spec.kappa[0]));
        } else if !spec.obstacles.is_empty() {
            terms.linear = (0..=n)
                .map(|j| w[j] * obstacle_values(&spec.obstacles, &xs[j].value()).mean().unwrap_or(0.0))
                .sum();
        }
        if spec.uses_entropy() {
            let per: Vec<_> = (0..=n)
                .map(|j| (ls[j].expect("log-density channel").mean(), w[j]))
                .collect();
            let ent = weighted_sum(&per);
            terms.internal = ent.scalar();
            parts.push((ent, spec.kappa[1]));
        }
        if spec.uses_interaction() {
            let per: Vec<_> = (0..=n)
                .map(|j| (congestion(xs[j], spec.interaction_eps), w[j]))
                .collect();
            let inter = weighted_sum(&per);
            terms.interaction = inter.scalar();
            parts.push((inter, spec.kappa[2]));
        }
        if spec.uses_fisher() {
            let c = spec.sigma.powi(4) / 8.0;
            let per: Vec<_> = (0..=n)
                .map(|j| (mean_sq(ss[j].expect("score channel")), c * w[j]))
                .collect();
            let fi = weighted_sum(&per);
            terms.fisher = fi.scalar();
            parts.push((fi, 1.0));
        }
        let total = weighted_sum(&parts);
        terms.total = total.scalar();
        Ok((terms, total))
    }

    /// Parameters of the spline at each grid node.
    pub fn node_params(&self, path: &SplinePath) -> Result<Vec<Array1<f64>>> {
        self.times().into_iter().map(|t| path.eval(t)).collect()
    }

    /// Action of a spline path.
    pub fn action(&self, path: &SplinePath) -> Result<ActionTerms> {
        Ok(self.evaluate(&self.node_params(path)?, false)?.0)
    }

    /// Action and its gradient with respect to every control vector.
    pub fn action_grad(&self, path: &SplinePath) -> Result<(ActionTerms, Vec<Array1<f64>>)> {
        let (terms, g) = self.evaluate(&self.node_params(path)?, true)?;
        let g = g.expect("gradient requested");
        let mut out = vec![Array1::zeros(path.dim()); path.len()];
        for (t, gj) in self.times().into_iter().zip(&g) {
            for (i, wi) in path.weights(t)?.into_iter().enumerate() {
                if wi != 0.0 {
                    out[i].scaled_add(wi, gj);
                }
            }
        }
        Ok((terms, out))
    }

    /// Pushforward batches at every node (for diagnostics).
    pub fn batches(&self, path: &SplinePath) -> Result<Vec<AugmentedBatch>> {
        self.node_params(path)?
            .par_iter()
            .map(|th| {
                let tape = Tape::new();
                let v = tape.constant(th.view().insert_axis(Axis(0)).to_owned());
                let st = transport_on(
                    self.field,
                    v,
                    self.z,
                    &self.integrator,
                    self.spec.channels(),
                    self.reference_channels,
                )?;
                Ok(st.snapshot())
            })
            .collect()
    }
}

/// `F` at a single batch: `κ₀ E V + κ₁ E log ρ + κ₂ E W` plus the Fisher
/// term, each reported unscaled alongside the weighted sum.
pub fn potential_terms(batch: &AugmentedBatch, spec: &ActionSpec) -> Result<ActionTerms> {
    let mut t = ActionTerms::default();
    if !spec.obstacles.is_empty() {
        t.linear = obstacle_values(&spec.obstacles, &batch.positions)
            .mean()
            .unwrap_or(0.0);
    }
    if spec.internal == InternalMode::Entropy && spec.kappa[1] > 0.0 {
        let l = batch
            .logdens
            .as_ref()
            .ok_or_else(|| Error::Contract("entropy term needs the log-density channel".into()))?;
        t.internal = l.mean().unwrap_or(0.0);
    }
    if spec.kappa[2] > 0.0 {
        t.interaction = congestion_value(&batch.positions, spec.interaction_eps);
    }
    if spec.fisher {
        t.fisher = fisher_information(batch, spec.sigma)?;
    }
    t.total = spec.kappa[0] * t.linear + spec.kappa[1] * t.internal + spec.kappa[2] * t.interaction + t.fisher;
    Ok(t)
}

/// `σ⁴/8 · mean ‖score‖²`.
pub fn fisher_information(batch: &AugmentedBatch, sigma: f64) -> Result<f64> {
    if sigma == 0.0 {
        return Ok(0.0);
    }
    let s = batch
        .score
        .as_ref()
        .ok_or_else(|| Error::Contract("Fisher term needs the score channel".into()))?;
    let m = s.nrows() as f64;
    Ok(sigma.powi(4) / 8.0 * s.iter().map(|v| v * v).sum::<f64>() / m)
}
