//! Neural-ODE pushforward with optional log-density and score channels.
//!
//! Particles follow `dψ/dτ = v(τ, ψ)` on `τ ∈ [0, 1]` with fixed-step
//! explicit midpoint integration. Alongside, the log-density obeys
//! `dl/dτ = −∇·v` and the score obeys `ds/dτ = −∇(∇·v) − (∇v)ᵀ s`.
//! Everything is recorded on the tape, so parameter gradients are the exact
//! gradients of the discrete scheme.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Time, VelocityField};
use crate::jet::{divergence, grad_divergence, hutchinson_divergence, jacobian_t_times, value_block, Jet};
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DivergenceMode {
    Exact,
    Hutchinson { probes: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub steps: usize,
    pub divergence: DivergenceMode,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            divergence: DivergenceMode::Exact,
        }
    }
}

impl IntegratorConfig {
    pub fn with_steps(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("integrator needs at least one step".into()));
        }
        if let DivergenceMode::Hutchinson { probes: 0, .. } = self.divergence {
            return Err(Error::Config("hutchinson needs at least one probe".into()));
        }
        Ok(())
    }
}

/// Which auxiliary channels to transport.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Channels {
    pub logdens: bool,
    pub score: bool,
}

impl Channels {
    pub const NONE: Channels = Channels {
        logdens: false,
        score: false,
    };
}

/// Particle states on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FlowState<'t> {
    pub x: Var<'t>,
    pub logdens: Option<Var<'t>>,
    pub score: Option<Var<'t>>,
}

/// Plain-array snapshot of a [`FlowState`].
#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    pub positions: Array2<f64>,
    pub logdens: Option<Array1<f64>>,
    pub score: Option<Array2<f64>>,
}

impl FlowState<'_> {
    pub fn snapshot(&self) -> AugmentedBatch {
        AugmentedBatch {
            positions: self.x.value().clone(),
            logdens: self.logdens.map(|l| l.value().column(0).to_owned()),
            score: self.score.map(|s| s.value().clone()),
        }
    }
}

/// Standard-normal log-density and score at the reference points.
pub fn standard_normal_channels(z: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let d = z.ncols() as f64;
    let c = -0.5 * d * (2.0 * std::f64::consts::PI).ln();
    let l = z.map_axis(Axis(1), |r| c - 0.5 * r.dot(&r));
    (l, -z)
}

/// Leaves for the initial state; `channels` supplies `(log ρ₀, ∇log ρ₀)` at `z`.
pub fn initial_state<'t>(
    tape: &'t Tape,
    z: &Array2<f64>,
    want: Channels,
    channels: Option<&(Array1<f64>, Array2<f64>)>,
) -> Result<FlowState<'t>> {
    let owned;
    let ch = match channels {
        Some(c) => c,
        None => {
            owned = standard_normal_channels(z);
            &owned
        }
    };
    Ok(FlowState {
        x: tape.constant(z.clone()),
        logdens: want
            .logdens
            .then(|| tape.constant(ch.0.view().insert_axis(Axis(1)).to_owned())),
        score: want.score.then(|| tape.constant(ch.1.clone())),
    })
}

struct Rhs<'t> {
    dx: Var<'t>,
    dl: Option<Var<'t>>,
    ds: Option<Var<'t>>,
}

struct Integrator<'a, F: VelocityField + ?Sized> {
    field: &'a F,
    probes: Option<Vec<Mat>>,
    m: usize,
}

impl<F: VelocityField + ?Sized> Integrator<'_, F> {
    fn jet(&self, st: &FlowState<'_>) -> Jet {
        let d = self.field.dim();
        if st.score.is_some() {
            Jet::hessian(self.m, d)
        } else if st.logdens.is_some() {
            match &self.probes {
                Some(p) => Jet::probes(self.m, p.clone()),
                None => Jet::gradient(self.m, d),
            }
        } else {
            Jet::value(self.m)
        }
    }

    fn rhs<'t>(&self, params: &[Var<'t>], tau: f64, st: &FlowState<'t>) -> Rhs<'t> {
        let jet = self.jet(st);
        let v = self.field.eval(params, Time::Scalar(tau), st.x, &jet);
        let dx = value_block(v, &jet);
        let dl = st.logdens.map(|_| {
            if self.probes.is_some() && st.score.is_none() {
                hutchinson_divergence(v, &jet).neg()
            } else {
                divergence(v, &jet).neg()
            }
        });
        let ds = st.score.map(|s| {
            grad_divergence(v, &jet)
                .add(jacobian_t_times(v, s, &jet))
                .neg()
        });
        Rhs { dx, dl, ds }
    }
}

fn euler<'t>(st: &FlowState<'t>, r: &Rhs<'t>, h: f64) -> FlowState<'t> {
    FlowState {
        x: st.x.add_scaled(r.dx, h),
        logdens: st.logdens.zip(r.dl).map(|(l, dl)| l.add_scaled(dl, h)),
        score: st.score.zip(r.ds).map(|(s, ds)| s.add_scaled(ds, h)),
    }
}

/// Integrates from `tau0` to `tau1` with `steps` midpoint steps.
pub fn integrate<'t, F: VelocityField + ?Sized>(
    field: &F,
    params: &[Var<'t>],
    state: FlowState<'t>,
    tau0: f64,
    tau1: f64,
    steps: usize,
    divergence: DivergenceMode,
) -> Result<FlowState<'t>> {
    if steps == 0 {
        return Err(Error::Config("integrator needs at least one step".into()));
    }
    let m = state.x.shape().0;
    let probes = match divergence {
        DivergenceMode::Exact => None,
        DivergenceMode::Hutchinson { probes, seed } => {
            if state.score.is_some() {
                return Err(Error::Unsupported(
                    "score channel has no unbiased stochastic-trace estimator".into(),
                ));
            }
            Some(rademacher(m, field.dim(), probes, seed))
        }
    };
    let integ = Integrator { field, probes, m };
    let h = (tau1 - tau0) / steps as f64;
    let mut st = state;
    for n in 0..steps {
        let tau = tau0 + n as f64 * h;
        let k1 = integ.rhs(params, tau, &st);
        let mid = euler(&st, &k1, 0.5 * h);
        let k2 = integ.rhs(params, tau + 0.5 * h, &mid);
        st = euler(&st, &k2, h);
        let finite = {
            let x = st.x.value();
            let mut ok = x.iter().all(|v| v.is_finite());
            if let Some(l) = st.logdens {
                ok &= l.value().iter().all(|v| v.is_finite());
            }
            if let Some(s) = st.score {
                ok &= s.value().iter().all(|v| v.is_finite());
            }
            ok
        };
        if !finite {
            return Err(Error::Blowup { step: n });
        }
    }
    Ok(st)
}

/// Rademacher probe matrices, fixed for a whole solve.
pub fn rademacher(m: usize, d: usize, probes: usize, seed: u64) -> Vec<Mat> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..probes)
        .map(|_| Mat::from_shape_fn((m, d), |_| if rng.random::<bool>() { 1.0 } else { -1.0 }))
        .collect()
}

/// `T_θ(z)` on `[0, 1]`, recorded on `tape` with θ as a `1 × D` row.
pub fn transport_on<'t, F: VelocityField + ?Sized>(
    field: &F,
    theta: Var<'t>,
    z: &Array2<f64>,
    cfg: &IntegratorConfig,
    want: Channels,
    channels: Option<&(Array1<f64>, Array2<f64>)>,
) -> Result<FlowState<'t>> {
    cfg.validate()?;
    if theta.shape() != (1, field.param_count()) {
        return Err(Error::Shape(format!(
            "parameter row {:?} does not match field size {}",
            theta.shape(),
            field.param_count()
        )));
    }
    if z.ncols() != field.dim() {
        return Err(Error::Shape(format!(
            "points have {} columns, field dimension is {}",
            z.ncols(),
            field.dim()
        )));
    }
    let tape = theta.tape();
    let st = initial_state(tape, z, want, channels)?;
    let params = field.bind(theta);
    integrate(field, &params, st, 0.0, 1.0, cfg.steps, cfg.divergence)
}

/// `T_θ(z)` as plain values.
pub fn transport<F: VelocityField + ?Sized>(
    field: &F,
    theta: &Array1<f64>,
    z: &Array2<f64>,
    cfg: &IntegratorConfig,
) -> Result<Array2<f64>> {
    Ok(transport_augmented(field, theta, z, cfg, Channels::NONE, None)?.positions)
}

/// `T_θ(z)` with the requested channels, as plain values.
pub fn transport_augmented<F: VelocityField + ?Sized>(
    field: &F,
    theta: &Array1<f64>,
    z: &Array2<f64>,
    cfg: &IntegratorConfig,
    want: Channels,
    channels: Option<&(Array1<f64>, Array2<f64>)>,
) -> Result<AugmentedBatch> {
    let tape = Tape::new();
    let th = tape.constant(theta.view().insert_axis(Axis(0)).to_owned());
    let st = transport_on(field, th, z, cfg, want, channels)?;
    Ok(st.snapshot())
}
