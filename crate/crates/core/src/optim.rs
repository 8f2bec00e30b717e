//! Adam, learning-rate schedules and the path / coupling / warmup phases.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{ActionEval, ActionSpec, ActionTerms};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::flow_match::{fm_loss_batch, FmBatch, FmConfig, Sampler};
use crate::node::IntegratorConfig;
use crate::spline::SplinePath;

/// Adam with bias correction over a list of parameter slots.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Array1<f64>>,
    v: Vec<Array1<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: sizes.iter().map(|&n| Array1::zeros(n)).collect(),
            v: sizes.iter().map(|&n| Array1::zeros(n)).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, slot: usize) -> (&Array1<f64>, &Array1<f64>) {
        (&self.m[slot], &self.v[slot])
    }

    /// One update of every slot.
    pub fn step(&mut self, params: &mut [Array1<f64>], grads: &[Array1<f64>], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "slot count mismatch");
        assert_eq!(grads.len(), self.m.len(), "slot count mismatch");
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len(), "gradient length mismatch");
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Per-epoch learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    #[default]
    Constant,
    /// `lr · γ^{⌊e / step_size⌋}`.
    Step { step_size: usize, gamma: f64 },
    /// Cosine annealing with warm restarts.
    Cosine { t0: usize, t_mult: usize, eta_min: f64 },
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            Schedule::Constant => Ok(()),
            Schedule::Step { step_size, gamma } => {
                if *step_size == 0 || !(*gamma > 0.0) {
                    return Err(Error::Config("step schedule needs step_size ≥ 1 and γ > 0".into()));
                }
                Ok(())
            }
            Schedule::Cosine { t0, t_mult, eta_min } => {
                if *t0 == 0 || *t_mult == 0 || !(*eta_min >= 0.0) {
                    return Err(Error::Config("cosine schedule needs t0 ≥ 1, t_mult ≥ 1, η_min ≥ 0".into()));
                }
                Ok(())
            }
        }
    }

    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            Schedule::Constant => base,
            Schedule::Step { step_size, gamma } => base * gamma.powi((epoch / step_size) as i32),
            Schedule::Cosine { t0, t_mult, eta_min } => {
                let (mut cur, mut len) = (epoch, t0);
                while cur >= len {
                    cur -= len;
                    len *= t_mult;
                }
                let frac = cur as f64 / len as f64;
                eta_min + 0.5 * (base - eta_min) * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimBudget {
    pub epochs: usize,
    pub path_steps: usize,
    pub coupling_steps: usize,
    pub warmup_steps: usize,
    pub path_lr: f64,
    pub coupling_lr: f64,
    /// Defaults to `path_lr`.
    pub warmup_lr: Option<f64>,
    pub path_schedule: Schedule,
    pub coupling_schedule: Schedule,
    /// Boundary penalty weight (same for both ends).
    pub alpha: f64,
    /// Weight on the action inside coupling optimization.
    pub coupling_action_weight: f64,
    /// Cap on warmup grid nodes.
    pub warmup_nodes: usize,
    /// Boundary pretraining.
    pub pretrain: FmConfig,
}

impl Default for OptimBudget {
    fn default() -> Self {
        Self {
            epochs: 10,
            path_steps: 20,
            coupling_steps: 10,
            warmup_steps: 100,
            path_lr: 5e-3,
            coupling_lr: 1e-4,
            warmup_lr: None,
            path_schedule: Schedule::Constant,
            coupling_schedule: Schedule::Constant,
            alpha: 1e5,
            coupling_action_weight: 1.0,
            warmup_nodes: 15,
            pretrain: FmConfig::default(),
        }
    }
}

impl OptimBudget {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("path_lr", self.path_lr),
            ("coupling_lr", self.coupling_lr),
            ("warmup_lr", self.warmup_lr.unwrap_or(self.path_lr)),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.alpha >= 0.0) || !(self.coupling_action_weight >= 0.0) {
            return Err(Error::Config("alpha and coupling_action_weight must be ≥ 0".into()));
        }
        if self.warmup_nodes < 2 {
            return Err(Error::Config("warmup_nodes must be ≥ 2".into()));
        }
        self.path_schedule.validate()?;
        self.coupling_schedule.validate()?;
        self.pretrain.validate()
    }

    pub fn warmup_lr(&self) -> f64 {
        self.warmup_lr.unwrap_or(self.path_lr)
    }

    pub fn total_steps(&self) -> usize {
        self.warmup_steps + self.epochs * (self.path_steps + self.coupling_steps)
    }
}

fn finite(terms: &ActionTerms, grads: &[Array1<f64>]) -> bool {
    terms.total.is_finite() && grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}

fn diverged(step: usize, seed: u64, what: &str, err: Option<Error>) -> Error {
    let what = match err {
        Some(e) => format!("{what}: {e}"),
        None => what.to_string(),
    };
    Error::Diverged { step, seed, what }
}

/// Adam on the interior control points; the endpoints are never touched.
///
/// Returns the action recorded before each update. On a non-finite action
/// the path is restored to the last state that evaluated finitely.
pub fn path_optimize<F: VelocityField + ?Sized>(
    path: &mut SplinePath,
    eval: &ActionEval<'_, F>,
    adam: &mut Adam,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<ActionTerms>> {
    let k = path.k();
    let mut history = Vec::with_capacity(steps);
    if k == 0 || steps == 0 {
        return Ok(history);
    }
    let mut last_good = path.control().to_vec();
    for step in 0..steps {
        let (terms, grads) = match eval.action_grad(path) {
            Ok(v) => v,
            Err(e @ Error::Blowup { .. }) => {
                path.set_control(last_good)?;
                return Err(diverged(step, seed, "path optimization", Some(e)));
            }
            Err(e) => return Err(e),
        };
        if !finite(&terms, &grads) {
            path.set_control(last_good)?;
            return Err(diverged(step, seed, "path optimization: action is not finite", None));
        }
        last_good = path.control().to_vec();
        history.push(terms);
        let mut interior: Vec<Array1<f64>> = last_good[1..=k].to_vec();
        adam.step(&mut interior, &grads[1..=k], lr);
        let mut control = last_good.clone();
        control[1..=k].clone_from_slice(&interior);
        path.set_control(control)?;
    }
    Ok(history)
}

/// Path optimization with all potentials off on a grid of at most
/// `max_nodes` nodes.
#[allow(clippy::too_many_arguments)]
pub fn geodesic_warmup<F: VelocityField + ?Sized>(
    path: &mut SplinePath,
    field: &F,
    z: &Array2<f64>,
    n: usize,
    max_nodes: usize,
    integrator: &IntegratorConfig,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<ActionTerms>> {
    if steps == 0 {
        return Ok(Vec::new());
    }
    let spec = ActionSpec::free();
    let mut eval = ActionEval::new(field, &spec, n.min(max_nodes.saturating_sub(1)).max(2), z);
    eval.integrator = *integrator;
    let mut adam = Adam::new(&vec![path.dim(); path.k()]);
    path_optimize(path, &eval, &mut adam, steps, lr, seed)
}

/// What coupling optimization needs besides the path.
pub struct Coupling<'s, 'a> {
    pub rho0: &'s mut Sampler<'a>,
    pub rho1: &'s mut Sampler<'a>,
    pub reference: &'s mut Sampler<'a>,
    pub batch: usize,
    pub sigma_min: f64,
    pub alpha: f64,
    pub action_weight: f64,
    pub freeze_theta0: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingRecord {
    pub objective: f64,
    pub fm0: f64,
    pub fm1: f64,
    pub action: f64,
}

/// Adam on the two endpoint vectors against `α·(FM₀ + FM₁) + w·A`, drawing
/// fresh boundary batches each step. The interior stays fixed.
#[allow(clippy::too_many_arguments)]
pub fn coupling_optimize<F: VelocityField + ?Sized>(
    path: &mut SplinePath,
    eval: &ActionEval<'_, F>,
    setup: &mut Coupling<'_, '_>,
    adam: &mut Adam,
    steps: usize,
    lr: f64,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<Vec<CouplingRecord>> {
    let last = path.len() - 1;
    let field = eval.field;
    let mut history = Vec::with_capacity(steps);
    let mut last_good = path.control().to_vec();
    for step in 0..steps {
        let control = path.control().to_vec();
        let (terms, agrad) = if setup.action_weight > 0.0 {
            match eval.action_grad(path) {
                Ok(v) => v,
                Err(e @ Error::Blowup { .. }) => {
                    path.set_control(last_good)?;
                    return Err(diverged(step, seed, "coupling optimization", Some(e)));
                }
                Err(e) => return Err(e),
            }
        } else {
            (ActionTerms::default(), vec![Array1::zeros(path.dim()); path.len()])
        };
        let mut fm = [0.0; 2];
        let mut grads = [Array1::zeros(path.dim()), Array1::zeros(path.dim())];
        for (slot, idx) in [(0usize, 0usize), (1, last)] {
            if slot == 0 && setup.freeze_theta0 {
                continue;
            }
            let target = if slot == 0 {
                (setup.rho0)(setup.batch, rng)?
            } else {
                (setup.rho1)(setup.batch, rng)?
            };
            let z = (setup.reference)(setup.batch, rng)?;
            let batch = FmBatch::new(z, target, rng)?;
            let (l, g) = fm_loss_batch(field, &control[idx], &batch, setup.sigma_min, true)?;
            fm[slot] = l;
            grads[slot] = g.expect("gradient requested") * setup.alpha;
            grads[slot].scaled_add(setup.action_weight, &agrad[idx]);
        }
        let objective = setup.alpha * (fm[0] + fm[1]) + setup.action_weight * terms.total;
        if !objective.is_finite() || !finite(&ActionTerms::default(), &grads) {
            path.set_control(last_good)?;
            return Err(diverged(step, seed, "coupling optimization: objective is not finite", None));
        }
        last_good = control.clone();
        history.push(CouplingRecord {
            objective,
            fm0: fm[0],
            fm1: fm[1],
            action: terms.total,
        });
        let mut ends = [control[0].clone(), control[last].clone()];
        let before0 = ends[0].clone();
        adam.step(&mut ends, &grads, lr);
        if setup.freeze_theta0 {
            ends[0] = before0;
        }
        let mut next = control;
        let [e0, e1] = ends;
        next[0] = e0;
        next[last] = e1;
        path.set_control(next)?;
    }
    Ok(history)
}
