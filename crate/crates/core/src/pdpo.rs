//! The outer optimization loop: boundary initialization, linear path,
//! geodesic warmup, then alternating path and coupling phases.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::action::{ActionEval, ActionTerms};
use crate::error::{Error, Result};
use crate::flow_match::{pretrain_boundary, Pretrained};
use crate::mlp::Mlp;
use crate::node::transport;
use crate::optim::{coupling_optimize, geodesic_warmup, path_optimize, Adam, Coupling};
use crate::problems::{w2_to_target, BoundaryInit, ProblemConfig, Reference};
use crate::spline::SplinePath;

/// Reference points in the trajectory export.
pub const EVAL_SAMPLES: usize = 2000;
/// Reference points for boundary W2; the moment noise floor is about 0.035.
pub const W2_SAMPLES: usize = 8000;

/// Derived seed for one purpose of a run.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const S_PRETRAIN0: u64 = 1;
const S_PRETRAIN1: u64 = 2;
const S_EVAL: u64 = 3;
const S_WARMUP: u64 = 4;
const S_XI: u64 = 5;
const S_EPOCH: u64 = 100;
const S_COUPLING: u64 = 10_000;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the state after warmup.
    pub epoch: usize,
    pub action: f64,
    pub kinetic: f64,
    pub obstacle: f64,
    pub internal: f64,
    pub interaction: f64,
    pub fisher: f64,
    pub w2_rho0: f64,
    pub w2_rho1: f64,
    pub fm0: f64,
    pub fm1: f64,
    pub path_lr: f64,
    pub coupling_lr: f64,
}

impl EpochRecord {
    fn new(epoch: usize, t: &ActionTerms, w2: (f64, f64)) -> Self {
        Self {
            epoch,
            action: t.total,
            kinetic: t.kinetic,
            obstacle: t.linear,
            internal: t.internal,
            interaction: t.interaction,
            fisher: t.fisher,
            w2_rho0: w2.0,
            w2_rho1: w2.1,
            fm0: f64::NAN,
            fm1: f64::NAN,
            path_lr: f64::NAN,
            coupling_lr: f64::NAN,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub path: SplinePath,
    pub init: ActionTerms,
    pub warmup: ActionTerms,
    pub history: Vec<EpochRecord>,
}

/// Everything a run evaluates against, fixed by the config and seed.
pub struct Context<'c> {
    pub cfg: &'c ProblemConfig,
    pub net: Mlp,
    pub z_eval: Array2<f64>,
    pub channels_eval: Option<(Array1<f64>, Array2<f64>)>,
    pub export_z: Array2<f64>,
    pub w2_z: Array2<f64>,
}

impl<'c> Context<'c> {
    pub fn new(cfg: &'c ProblemConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, S_EVAL));
        let z_eval = cfg.sample_reference(cfg.quadrature.m, &mut rng)?;
        let export_z = cfg.sample_reference(EVAL_SAMPLES, &mut rng)?;
        let w2_z = cfg.sample_reference(W2_SAMPLES, &mut rng)?;
        let channels_eval = cfg.reference_channels(&z_eval)?;
        Ok(Self {
            cfg,
            net: Mlp::new(cfg.architecture),
            z_eval,
            channels_eval,
            export_z,
            w2_z,
        })
    }

    fn evaluator<'a>(&'a self, z: &'a Array2<f64>, channels: Option<&'a (Array1<f64>, Array2<f64>)>, n: usize) -> ActionEval<'a, Mlp> {
        let mut e = ActionEval::new(&self.net, &self.cfg.action, n, z);
        e.integrator = self.cfg.quadrature.integrator;
        e.reference_channels = channels;
        e.xi_seed = sub_seed(self.cfg.seed, S_XI);
        e
    }

    /// Full action on the fixed evaluation batch with `n` intervals.
    pub fn eval_action(&self, path: &SplinePath, n: usize) -> Result<ActionTerms> {
        self.evaluator(&self.z_eval, self.channels_eval.as_ref(), n).action(path)
    }

    /// `T_θ` applied to the export batch.
    pub fn push(&self, theta: &Array1<f64>) -> Result<Array2<f64>> {
        transport(&self.net, theta, &self.export_z, &self.cfg.quadrature.integrator)
    }

    /// W2 from `T_θ` to boundary `which` (0 or 1).
    pub fn fit_w2(&self, theta: &Array1<f64>, which: usize) -> Result<f64> {
        let p = &self.cfg.problem;
        let target = if which == 0 { &p.boundary0 } else { &p.boundary1 };
        let x = transport(&self.net, theta, &self.w2_z, &self.cfg.quadrature.integrator)?;
        w2_to_target(&x, target, sub_seed(self.cfg.seed, S_EVAL))
    }

    pub fn boundary_w2(&self, path: &SplinePath) -> Result<(f64, f64)> {
        let c = path.control();
        Ok((self.fit_w2(&c[0], 0)?, self.fit_w2(&c[c.len() - 1], 1)?))
    }

    /// Pushforward of the export batch at each time.
    pub fn trajectory(&self, path: &SplinePath, times: &[f64]) -> Result<Vec<Array2<f64>>> {
        use rayon::prelude::*;
        times
            .par_iter()
            .map(|&t| self.push(&path.eval(t)?))
            .collect()
    }
}

/// Pretrains the map onto boundary `which` (0 or 1).
pub fn pretrain_end(cfg: &ProblemConfig, which: usize) -> Result<Pretrained> {
    let target = if which == 0 { &cfg.problem.boundary0 } else { &cfg.problem.boundary1 };
    let mut tgt = |n: usize, r: &mut ChaCha8Rng| target.sample(n, r);
    let mut reference = |n: usize, r: &mut ChaCha8Rng| cfg.sample_reference(n, r);
    let seed = sub_seed(cfg.seed, if which == 0 { S_PRETRAIN0 } else { S_PRETRAIN1 });
    pretrain_boundary(&cfg.architecture, &cfg.optim.pretrain, seed, &mut tgt, &mut reference)
}

/// Endpoint parameters according to the configured initialization.
pub fn initial_boundaries(cfg: &ProblemConfig) -> Result<(Array1<f64>, Array1<f64>)> {
    let zeros = Array1::zeros(cfg.architecture.param_count());
    let fixed0 = cfg.problem.reference == Reference::Boundary0;
    let load = |p: &std::path::Path| -> Result<Array1<f64>> {
        let ck = crate::io::Checkpoint::read(p)?;
        if ck.arch != cfg.architecture {
            return Err(Error::Config(format!(
                "checkpoint {} has architecture {}, config has {}",
                p.display(),
                ck.arch,
                cfg.architecture
            )));
        }
        ck.single()
    };
    let end = |which: usize, file: Option<&std::path::PathBuf>| -> Result<Array1<f64>> {
        if which == 0 && fixed0 {
            return Ok(zeros.clone());
        }
        match (&cfg.problem.boundary_init, file) {
            (BoundaryInit::Zero, _) => Ok(zeros.clone()),
            (_, Some(p)) => load(p),
            _ => Ok(pretrain_end(cfg, which)?.theta),
        }
    };
    let (f0, f1) = match &cfg.problem.boundary_init {
        BoundaryInit::Checkpoint { theta0, theta1 } => (theta0.as_ref(), theta1.as_ref()),
        _ => (None, None),
    };
    Ok((end(0, f0)?, end(1, f1)?))
}

/// Runs the full loop from the given endpoints. `observe` is called after
/// warmup (epoch 0) and after every epoch.
pub fn run_from(
    cfg: &ProblemConfig,
    theta0: Array1<f64>,
    theta1: Array1<f64>,
    observe: &mut dyn FnMut(&EpochRecord, &SplinePath) -> Result<()>,
) -> Result<RunResult> {
    let ctx = Context::new(cfg)?;
    let q = &cfg.quadrature;
    let b = &cfg.optim;
    cfg.architecture.check(&theta0)?;
    cfg.architecture.check(&theta1)?;
    let mut path = SplinePath::linear(&theta0, &theta1, q.k)?;
    let init = ctx.eval_action(&path, q.n)?;
    log::info!(
        "{}: linear init action {:.4} kinetic {:.4} obstacle {:.4}",
        cfg.name(),
        init.total,
        init.kinetic,
        init.linear
    );

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, S_WARMUP));
    let zw = cfg.sample_reference(q.m, &mut rng)?;
    geodesic_warmup(
        &mut path,
        &ctx.net,
        &zw,
        q.n,
        b.warmup_nodes,
        &q.integrator,
        b.warmup_steps,
        b.warmup_lr(),
        cfg.seed,
    )?;
    let warmup = ctx.eval_action(&path, q.n)?;
    let mut rec = EpochRecord::new(0, &warmup, ctx.boundary_w2(&path)?);
    log::info!("{}: after warmup action {:.4}", cfg.name(), warmup.total);
    observe(&rec, &path)?;
    let mut history = vec![rec];

    let mut path_adam = Adam::new(&vec![path.dim(); q.k]);
    let mut coupling_adam = Adam::new(&[path.dim(), path.dim()]);
    let fixed0 = cfg.problem.freeze_theta0;
    let mut sample0 = |n: usize, r: &mut ChaCha8Rng| cfg.problem.boundary0.sample(n, r);
    let mut sample1 = |n: usize, r: &mut ChaCha8Rng| cfg.problem.boundary1.sample(n, r);
    let mut reference = |n: usize, r: &mut ChaCha8Rng| cfg.sample_reference(n, r);
    let mut coupling = Coupling {
        rho0: &mut sample0,
        rho1: &mut sample1,
        reference: &mut reference,
        batch: q.m,
        sigma_min: b.pretrain.sigma_min,
        alpha: b.alpha,
        action_weight: b.coupling_action_weight,
        freeze_theta0: fixed0,
    };
    for epoch in 0..b.epochs {
        let mut erng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, S_EPOCH + epoch as u64));
        let z = cfg.sample_reference(q.m, &mut erng)?;
        let ch = cfg.reference_channels(&z)?;
        let eval = ctx.evaluator(&z, ch.as_ref(), q.n);
        let plr = b.path_schedule.lr(b.path_lr, epoch);
        let clr = b.coupling_schedule.lr(b.coupling_lr, epoch);
        path_optimize(&mut path, &eval, &mut path_adam, b.path_steps, plr, cfg.seed)?;
        let mut crng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, S_COUPLING + epoch as u64));
        let ch_hist = coupling_optimize(
            &mut path,
            &eval,
            &mut coupling,
            &mut coupling_adam,
            b.coupling_steps,
            clr,
            &mut crng,
            cfg.seed,
        )?;
        let terms = ctx.eval_action(&path, q.n)?;
        rec = EpochRecord::new(epoch + 1, &terms, ctx.boundary_w2(&path)?);
        if let Some(last) = ch_hist.last() {
            rec.fm0 = last.fm0;
            rec.fm1 = last.fm1;
        }
        rec.path_lr = plr;
        rec.coupling_lr = clr;
        log::info!(
            "{} epoch {}: action {:.4} kinetic {:.4} obstacle {:.4} W2 ({:.4}, {:.4})",
            cfg.name(),
            epoch + 1,
            rec.action,
            rec.kinetic,
            rec.obstacle,
            rec.w2_rho0,
            rec.w2_rho1
        );
        observe(&rec, &path)?;
        history.push(rec);
    }
    Ok(RunResult {
        path,
        init,
        warmup,
        history,
    })
}

/// Boundary initialization followed by [`run_from`].
pub fn run(cfg: &ProblemConfig, observe: &mut dyn FnMut(&EpochRecord, &SplinePath) -> Result<()>) -> Result<RunResult> {
    cfg.validate()?;
    let (a, b) = initial_boundaries(cfg)?;
    run_from(cfg, a, b, observe)
}
