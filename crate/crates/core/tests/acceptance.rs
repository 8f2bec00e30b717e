//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Everything runs at desk scale on the CPU; expect about 45 minutes on one
//! core. Runs shared between criteria (the SCC base run, pretrained
//! boundaries) are charged to every criterion that uses them.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use densitypath::action::{ActionEval, ActionSpec, KineticMode};
use densitypath::mlp::{Architecture, Mlp};
use densitypath::pdpo::{self, Context, RunResult};
use densitypath::problems::{gauss_pair, opinion, scc, ProblemConfig};
use densitypath::spline::SplinePath;
use densitypath::{verify, Result};

const SCC_EPOCHS: usize = 8;
const SWEEP_N: [usize; 5] = [10, 20, 30, 40, 50];
const EVAL_N: usize = 50;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    summary: String,
}

fn outcome(pass: bool, summary: String) -> Result<Outcome> {
    Ok(Outcome { pass, summary })
}

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, id: usize, name: &str, budget_s: f64, secs: f64, res: Result<Outcome>) {
        let (pass, summary) = match res {
            Ok(o) => (o.pass && secs <= budget_s, o.summary),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            self.failed += 1;
        }
        println!(
            "{} {id:>2} {name:<22} {summary}  [{:.0}s of {:.0}s]",
            if pass { "PASS" } else { "FAIL" },
            secs,
            budget_s
        );
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> (Result<T>, f64) {
    let t0 = Instant::now();
    let v = f();
    (v, t0.elapsed().as_secs_f64())
}

fn scc_desk(seed: u64, n: usize) -> ProblemConfig {
    let mut cfg = scc().desk();
    cfg.seed = seed;
    cfg.quadrature.n = n;
    cfg.optim.epochs = SCC_EPOCHS;
    cfg
}

/// Same total step count with the warmup steps moved into the path phase
/// (rounded up, so the no-warmup run never gets fewer steps).
fn without_warmup(mut cfg: ProblemConfig) -> ProblemConfig {
    let w = cfg.optim.warmup_steps;
    cfg.optim.path_steps += w.div_ceil(cfg.optim.epochs);
    cfg.optim.warmup_steps = 0;
    cfg
}

/// Pretrained SCC boundaries per seed (they do not depend on N or the
/// kinetic functional), and finished runs keyed by a label.
#[derive(Default)]
struct SccCache {
    ends: HashMap<u64, (Array1<f64>, Array1<f64>, f64)>,
    runs: HashMap<String, (RunResult, f64)>,
}

impl SccCache {
    fn ends(&mut self, seed: u64) -> Result<(Array1<f64>, Array1<f64>, f64)> {
        if let Some(e) = self.ends.get(&seed) {
            return Ok(e.clone());
        }
        eprintln!("pretraining SCC boundaries, seed {seed}");
        let (r, secs) = timed(|| pdpo::initial_boundaries(&scc_desk(seed, 20)));
        let (a, b) = r?;
        self.ends.insert(seed, (a.clone(), b.clone(), secs));
        Ok((a, b, secs))
    }

    /// Run result and its cost in seconds, including pretraining.
    fn run(&mut self, label: &str, cfg: &ProblemConfig) -> Result<(RunResult, f64)> {
        let (a, b, pre) = self.ends(cfg.seed)?;
        if let Some((r, secs)) = self.runs.get(label) {
            return Ok((r.clone(), secs + pre));
        }
        eprintln!("SCC run {label}");
        let (r, secs) = timed(|| pdpo::run_from(cfg, a, b, &mut |_, _| Ok(())));
        let r = r?;
        self.runs.insert(label.to_string(), (r.clone(), secs));
        Ok((r, secs + pre))
    }
}

fn last(r: &RunResult) -> pdpo::EpochRecord {
    *r.history.last().expect("history has the warmup row")
}

fn gradient() -> Result<Outcome> {
    let e = verify::gradient_fidelity(0)?;
    outcome(e < 1e-4, format!("rel err {e:.2e} < 1e-4"))
}

fn log_density() -> Result<Outcome> {
    let c = verify::linear_flow_channels()?;
    outcome(c.logdens < 1e-3, format!("max abs err {:.2e} < 1e-3", c.logdens))
}

fn score_fisher() -> Result<Outcome> {
    let c = verify::linear_flow_channels()?;
    let f = verify::fisher_relative_error()?;
    outcome(
        c.score < 1e-2 && f < 0.05,
        format!("score rel err {:.2e} < 1e-2, Fisher rel err {:.2e} < 5e-2", c.score, f),
    )
}

fn geodesic() -> Result<Outcome> {
    let r = verify::geodesic_recovery(&gauss_pair(&[4.0, 0.0]))?;
    let act = (r.action - r.w2_sq).abs() / r.w2_sq;
    outcome(
        act < 0.05 && r.discrepancy < 0.05 * r.w2_sq,
        format!(
            "action {:.3} vs {:.0} ({:.1}% < 5%), discrepancy {:.4} < {:.2}",
            r.action,
            r.w2_sq,
            100.0 * act,
            r.discrepancy,
            0.05 * r.w2_sq
        ),
    )
}

fn spline_order() -> Result<Outcome> {
    let st = verify::spline_order(&[2, 4, 8, 16])?;
    outcome(st.order >= 2.0, format!("slope {:.2} >= 2", st.order))
}

fn time_step_sweep(cache: &mut SccCache) -> (Result<Outcome>, f64) {
    let mut secs = 0.0;
    let res = (|| {
        let mut actions = Vec::new();
        let base = scc_desk(0, EVAL_N);
        for &n in &SWEEP_N {
            let (r, s) = cache.run(&format!("N{n}-s0"), &scc_desk(0, n))?;
            secs += s;
            actions.push(Context::new(&base)?.eval_action(&r.path, EVAL_N)?.total);
        }
        secs -= cache.ends(0)?.2 * (SWEEP_N.len() - 1) as f64;
        let monotone = actions.windows(2).all(|w| w[1] <= w[0]);
        let a40 = actions[3];
        let a50 = actions[4];
        let tail = (a40 - a50).abs() / a50;
        let list = actions.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" ");
        outcome(
            monotone && tail < 0.02,
            format!("A(N) at N={EVAL_N}: {list}; non-increasing {monotone}, |A40-A50|/A50 {:.2}% < 2%", 100.0 * tail),
        )
    })();
    (res, secs)
}

fn obstacle(cache: &mut SccCache) -> (Result<Outcome>, f64) {
    match cache.run("N20-s0", &scc_desk(0, 20)) {
        Ok((r, secs)) => {
            let l = last(&r);
            let ratio = l.obstacle / r.init.linear;
            let res = outcome(
                ratio < 0.05 && l.w2_rho0 < 0.1 && l.w2_rho1 < 0.1,
                format!(
                    "obstacle {:.4} / linear init {:.4} = {:.2}% < 5%, W2 ({:.4}, {:.4}) < 0.1",
                    l.obstacle,
                    r.init.linear,
                    100.0 * ratio,
                    l.w2_rho0,
                    l.w2_rho1
                ),
            );
            (res, secs)
        }
        Err(e) => (Err(e), 0.0),
    }
}

fn warmup_benefit(cache: &mut SccCache) -> (Result<Outcome>, f64) {
    let mut secs = 0.0;
    let res = (|| {
        let mut pass = true;
        let mut parts = Vec::new();
        for &seed in &SEEDS {
            let cfg = scc_desk(seed, 20);
            let (w, s1) = cache.run(&format!("N20-s{seed}"), &cfg)?;
            let (c, s2) = cache.run(&format!("cold-s{seed}"), &without_warmup(cfg))?;
            secs += s1 + s2 - cache.ends(seed)?.2;
            let (aw, ac) = (last(&w).action, last(&c).action);
            pass &= aw <= ac;
            parts.push(format!("seed {seed}: {aw:.2} <= {ac:.2}"));
        }
        outcome(pass, format!("warmup vs none, final action: {}", parts.join(", ")))
    })();
    (res, secs)
}

fn bridge() -> Result<Outcome> {
    let r = verify::geodesic_recovery(&verify::bridge_pair(10))?;
    let rel = r.discrepancy / r.w2_sq;
    outcome(
        rel < 0.15,
        format!("d=10 discrepancy {:.4} / W2² {:.0} = {:.2}% < 15%", r.discrepancy, r.w2_sq, 100.0 * rel),
    )
}

fn opinion_run() -> Result<Outcome> {
    let cfg = opinion(2).desk();
    let r = pdpo::run(&cfg, &mut |_, _| Ok(()))?;
    let (w, l) = (r.history[0], last(&r));
    let red = (w.action - l.action) / w.action;
    outcome(
        l.w2_rho1 < 0.2 && red >= 0.5,
        format!(
            "terminal W2 {:.4} < 0.2, action {:.2} -> {:.2} ({:.1}% >= 50%)",
            l.w2_rho1,
            w.action,
            l.action,
            100.0 * red
        ),
    )
}

/// Straight path whose velocity field is a constant in space: hidden layers
/// random and shared, output weights zero, output bias `t·b`. Every particle
/// moves at constant velocity `b`.
fn constant_velocity_energy() -> Result<f64> {
    let arch = Architecture::new(2, 32, 4, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut theta0 = Array1::from_shape_fn(arch.param_count(), |_| rng.random_range(-0.5..0.5));
    let out = *arch.slices().last().expect("at least two layers");
    theta0.slice_mut(s![out.offset..out.end()]).fill(0.0);
    let mut theta1 = theta0.clone();
    theta1.slice_mut(s![out.bias_offset()..out.end()]).assign(&ndarray::array![1.5, -0.7]);
    let path = SplinePath::linear(&theta0, &theta1, 3)?;
    let spec = ActionSpec {
        kinetic: KineticMode::Acceleration,
        ..ActionSpec::free()
    };
    let z = Array2::from_shape_fn((256, 2), |_| rng.sample(rand_distr::StandardNormal));
    let net = Mlp::new(arch);
    Ok(ActionEval::new(&net, &spec, 20, &z).action(&path)?.kinetic)
}

fn momentum(cache: &mut SccCache) -> (Result<Outcome>, f64) {
    let mut secs = 0.0;
    let res = (|| {
        let (e0, s0) = timed(constant_velocity_energy);
        secs += s0;
        let e0 = e0?;
        let vel_cfg = scc_desk(0, 20);
        let mom_cfg = vel_cfg.clone().momentum();
        let (v, s1) = cache.run("N20-s0", &vel_cfg)?;
        let (m, s2) = cache.run("momentum-s0", &mom_cfg)?;
        secs += s1 + s2 - cache.ends(0)?.2;
        let ctx = Context::new(&mom_cfg)?;
        let n = mom_cfg.quadrature.n;
        let (ev, em) = (ctx.eval_action(&v.path, n)?.kinetic, ctx.eval_action(&m.path, n)?.kinetic);
        outcome(
            e0 < 1e-6 && em < ev,
            format!("constant velocity {e0:.2e} < 1e-6; SCC acceleration energy momentum {em:.3} < velocity {ev:.3}"),
        )
    })();
    (res, secs)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let mut rep = Report { failed: 0 };
    let mut cache = SccCache::default();

    let (r, t) = timed(gradient);
    rep.line(1, "gradient-fidelity", 30.0, t, r);
    let (r, t) = timed(log_density);
    rep.line(2, "log-density", 10.0, t, r);
    let (r, t) = timed(score_fisher);
    rep.line(3, "score-fisher", 30.0, t, r);
    let (r, t) = timed(geodesic);
    rep.line(4, "geodesic-recovery", 600.0, t, r);
    let (r, t) = timed(spline_order);
    rep.line(5, "spline-order", 300.0, t, r);
    let (r, t) = obstacle(&mut cache);
    rep.line(7, "obstacle-avoidance", 1800.0, t, r);
    let (r, t) = time_step_sweep(&mut cache);
    rep.line(6, "time-step-sweep", 1200.0, t, r);
    let (r, t) = momentum(&mut cache);
    rep.line(11, "momentum", 1800.0, t, r);
    let (r, t) = warmup_benefit(&mut cache);
    rep.line(8, "warmup-benefit", 3600.0, t, r);
    let (r, t) = timed(bridge);
    rep.line(9, "bridge", 3600.0, t, r);
    let (r, t) = timed(opinion_run);
    rep.line(10, "opinion", 1800.0, t, r);

    println!("{} of 11 criteria failed", rep.failed);
    if rep.failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
