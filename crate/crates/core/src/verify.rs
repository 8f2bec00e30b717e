//! Oracle checks with closed-form answers: Gaussian log-density, score and
//! Fisher information under linear flows, gradient fidelity, geodesic
//! recovery, the spline convergence order and the bridge property.

use std::time::Instant;

use nalgebra::{DMatrix, Matrix2};
use ndarray::{array, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::action::{ActionEval, ActionSpec, InternalMode};
use crate::error::{Error, Result};
use crate::field::AffineField;
use crate::io::export_times;
use crate::mlp::{Architecture, Mlp};
use crate::node::{transport_augmented, Channels, IntegratorConfig};
use crate::ot::{gaussian_geodesic, gaussian_w2, moments};
use crate::pdpo::{run, Context};
use crate::problems::{gauss_pair, s_curve_obstacle, ProblemConfig};
use crate::spline::SplinePath;

/// One line of the verification report.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub limit: f64,
    /// `true` when the value must reach the limit from above.
    pub at_least: bool,
    pub pass: bool,
    pub secs: f64,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<16} {:.4e} {} {:.4e} ({:.1}s){}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            if self.at_least { ">=" } else { "<" },
            self.limit,
            self.secs,
            if self.detail.is_empty() { String::new() } else { format!("  {}", self.detail) }
        )
    }
}

fn normal(m: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((m, d), |_| rng.sample(StandardNormal))
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let num = (a - b).iter().map(|v| v * v).sum::<f64>().sqrt();
    num / b.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Norm-wise relative error of the interior-control gradient of a full
/// action (obstacle, entropy, congestion, Fisher) against central differences.
pub fn gradient_fidelity(seed: u64) -> Result<f64> {
    let arch = Architecture::new(2, 8, 2, true)?;
    let net = Mlp::new(arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctl: Vec<Array1<f64>> = (0..3).map(|_| arch.init(&mut rng) * 0.5).collect();
    let path = SplinePath::new(ctl)?;
    let z = normal(16, 2, seed + 1);
    let spec = ActionSpec {
        kappa: [10.0, 0.5, 0.1],
        sigma: 0.5,
        fisher: true,
        internal: InternalMode::Entropy,
        obstacles: vec![s_curve_obstacle()],
        ..ActionSpec::default()
    };
    let eval = ActionEval::new(&net, &spec, 5, &z);
    let (_, g) = eval.action_grad(&path)?;
    let h = 1e-5;
    let mut fd = Array1::zeros(arch.param_count());
    for i in 0..fd.len() {
        let mut p = path.clone();
        p.control_mut(1, |c| c[i] += h);
        let mut q = path.clone();
        q.control_mut(1, |c| c[i] -= h);
        fd[i] = (eval.action(&p)?.total - eval.action(&q)?.total) / (2.0 * h);
    }
    let err = (&g[1] - &fd).dot(&(&g[1] - &fd)).sqrt() / fd.dot(&fd).sqrt();
    Ok(err)
}

/// `x = e^A z + A⁻¹(e^A − I) b` and its Gaussian law for `z ~ N(0, I)`.
fn linear_flow_law(a: &Array2<f64>, b: &Array1<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let am = Matrix2::new(a[[0, 0]], a[[0, 1]], a[[1, 0]], a[[1, 1]]);
    let phi = am.exp();
    let bv = nalgebra::Vector2::new(b[0], b[1]);
    // ∫₀¹ e^{A s} ds b by series, which also covers singular A.
    let mut term = Matrix2::identity();
    let mut integral = Matrix2::identity();
    for k in 1..30 {
        term = term * am / (k as f64 + 1.0);
        integral += term;
    }
    let c = integral * bv;
    let phi_a = array![[phi[(0, 0)], phi[(0, 1)]], [phi[(1, 0)], phi[(1, 1)]]];
    let cov = phi_a.dot(&phi_a.t());
    (phi_a, array![c[0], c[1]], cov)
}

pub struct ChannelErrors {
    /// Max absolute log-density error.
    pub logdens: f64,
    /// Norm-wise relative score error.
    pub score: f64,
}

/// Linear flow with 50 midpoint steps against the analytic Gaussian law.
pub fn linear_flow_channels() -> Result<ChannelErrors> {
    let a = array![[0.3, 0.2], [-0.1, -0.2]];
    let b = array![1.0, -0.5];
    let (_, c, cov) = linear_flow_law(&a, &b);
    let f = AffineField { d: 2 };
    let z = normal(512, 2, 11);
    let want = Channels { logdens: true, score: true };
    let out = transport_augmented(&f, &AffineField::pack(&a, &b), &z, &IntegratorConfig::with_steps(50), want, None)?;
    let inv = to_na(&cov).try_inverse().ok_or_else(|| Error::Domain("singular covariance".into()))?;
    let inv = Array2::from_shape_fn((2, 2), |(i, j)| inv[(i, j)]);
    let det = cov[[0, 0]] * cov[[1, 1]] - cov[[0, 1]] * cov[[1, 0]];
    let norm = -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln();
    let diff = &out.positions - &c.view().insert_axis(Axis(0));
    let score_true = -diff.dot(&inv);
    let quad = (&diff * &diff.dot(&inv)).sum_axis(Axis(1));
    let logd_true = quad.mapv(|q| norm - 0.5 * q);
    let logd = out.logdens.ok_or_else(|| Error::Contract("log-density channel missing".into()))?;
    let score = out.score.ok_or_else(|| Error::Contract("score channel missing".into()))?;
    Ok(ChannelErrors {
        logdens: (&logd - &logd_true).iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        score: rel(&score, &score_true),
    })
}

/// Relative error of the Fisher term for `N(0, diag(1, 4))` at `σ = 1`
/// against `σ⁴/8 · tr Σ⁻¹`.
pub fn fisher_relative_error() -> Result<f64> {
    let a = array![[0.0, 0.0], [0.0, 2f64.ln()]];
    let f = AffineField { d: 2 };
    let z = normal(8192, 2, 12);
    let want = Channels { logdens: false, score: true };
    let out = transport_augmented(&f, &AffineField::pack(&a, &array![0.0, 0.0]), &z, &IntegratorConfig::with_steps(50), want, None)?;
    let est = crate::action::fisher_information(&out, 1.0)?;
    let exact = (1.0 + 0.25) / 8.0;
    Ok((est - exact).abs() / exact)
}

/// `∫₀¹ W2²(ρ_θ(t), oracle(t)) dt` by trapezoid over the export grid, with
/// W2 the Bures distance from the pushforward's sample moments.
pub fn path_discrepancy(
    ctx: &Context<'_>,
    path: &SplinePath,
    oracle: &dyn Fn(f64) -> Result<(Array1<f64>, Array2<f64>)>,
) -> Result<f64> {
    let times = export_times();
    let clouds = ctx.trajectory(path, &times)?;
    let h = 1.0 / (times.len() - 1) as f64;
    let mut acc = 0.0;
    for (i, (t, x)) in times.iter().zip(&clouds).enumerate() {
        let (m, s) = moments(x);
        let (mo, so) = oracle(*t)?;
        let w = gaussian_w2(&m, &s, &mo, &so)?;
        let wt = if i == 0 || i + 1 == times.len() { 0.5 } else { 1.0 };
        acc += wt * h * w * w;
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy)]
pub struct GeodesicReport {
    pub action: f64,
    pub kinetic: f64,
    pub discrepancy: f64,
    /// `W2²(ρ₀, ρ₁)` of the exact endpoint laws.
    pub w2_sq: f64,
    pub w2_rho1: f64,
}

/// Runs the configured Gaussian problem and compares the path against the
/// σ = 0 displacement interpolation between its endpoint laws.
pub fn geodesic_recovery(cfg: &ProblemConfig) -> Result<GeodesicReport> {
    let (m0, s0) = cfg
        .problem
        .boundary0
        .as_gaussian()
        .ok_or_else(|| Error::Config("geodesic oracle needs Gaussian boundaries".into()))?;
    let (m1, s1) = cfg
        .problem
        .boundary1
        .as_gaussian()
        .ok_or_else(|| Error::Config("geodesic oracle needs Gaussian boundaries".into()))?;
    let w = gaussian_w2(&m0, &s0, &m1, &s1)?;
    let res = run(cfg, &mut |_, _| Ok(()))?;
    let ctx = Context::new(cfg)?;
    let oracle = |t: f64| gaussian_geodesic(&m0, &s0, &m1, &s1, t);
    let discrepancy = path_discrepancy(&ctx, &res.path, &oracle)?;
    let last = res.history.last().expect("history has the warmup row");
    Ok(GeodesicReport {
        action: last.action,
        kinetic: last.kinetic,
        discrepancy,
        w2_sq: w * w,
        w2_rho1: last.w2_rho1,
    })
}

/// `N(0, I) → N(m, I)` in `d` dimensions with `‖m‖² = 16`, σ = 1, entropy
/// and Fisher terms on, sized for a desk run.
pub fn bridge_pair(d: usize) -> ProblemConfig {
    let mut m = vec![0.0; d];
    m[0] = 4.0;
    let mut cfg = gauss_pair(&m);
    cfg.problem.name = "gauss-bridge".into();
    cfg.action.sigma = 1.0;
    cfg.action.fisher = true;
    cfg.action.internal = InternalMode::Entropy;
    cfg.action.kappa[1] = 1.0;
    cfg.quadrature.n = 10;
    cfg.quadrature.m = 128;
    cfg.architecture = Architecture::new(d, 32, 3, true).expect("valid architecture");
    cfg.optim.epochs = 4;
    cfg.optim.path_steps = 20;
    cfg.optim.coupling_steps = 5;
    cfg.optim.warmup_steps = 100;
    cfg.optim.pretrain.steps = 1500;
    cfg
}

pub struct OrderStudy {
    pub ks: Vec<usize>,
    pub errors: Vec<f64>,
    /// Least-squares slope of `−log error` against `log K`.
    pub order: f64,
}

/// Manufactured path `θ*(t) = (0.6 sin 2πt, 2t + 0.3 cos 3t)` in the 1-D
/// affine family `v = a x + b`; the spline interpolating `θ*` at its knots
/// is compared with `θ*` itself on a fine grid.
pub fn spline_order(ks: &[usize]) -> Result<OrderStudy> {
    let target = |t: f64| array![0.6 * (2.0 * std::f64::consts::PI * t).sin(), 2.0 * t + 0.3 * (3.0 * t).cos()];
    let f = AffineField { d: 1 };
    let z = normal(256, 1, 21);
    let spec = ActionSpec {
        kappa: [1.0, 0.0, 0.0],
        obstacles: vec![crate::potentials::Obstacle::GaussianMixture {
            bumps: vec![crate::potentials::Bump {
                center: vec![0.5],
                height: 1.0,
                radius: 0.7,
            }],
        }],
        ..ActionSpec::default()
    };
    let eval = ActionEval::new(&f, &spec, 200, &z);
    let exact_nodes: Vec<Array1<f64>> = eval.times().into_iter().map(target).collect();
    let exact = eval.evaluate(&exact_nodes, false)?.0.total;
    let mut errors = Vec::with_capacity(ks.len());
    for &k in ks {
        let ctl = (0..k + 2).map(|i| target(i as f64 / (k + 1) as f64)).collect();
        let path = SplinePath::new(ctl)?;
        errors.push((eval.action(&path)?.total - exact).abs());
    }
    let xs: Vec<f64> = ks.iter().map(|&k| (k as f64).ln()).collect();
    let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(OrderStudy {
        ks: ks.to_vec(),
        errors,
        order: -sxy / sxx,
    })
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t0 = Instant::now();
    let v = f()?;
    Ok((v, t0.elapsed().as_secs_f64()))
}

fn check(name: &'static str, value: f64, limit: f64, secs: f64, detail: String) -> Check {
    Check {
        name,
        value,
        limit,
        at_least: false,
        pass: value.is_finite() && value < limit,
        secs,
        detail,
    }
}

pub const SUITE: [&str; 7] = [
    "gradient",
    "log-density",
    "score",
    "fisher",
    "spline-order",
    "geodesic",
    "bridge",
];

/// Runs the named checks (all of [`SUITE`] when `only` is empty).
pub fn run_suite(only: &[String], report: &mut dyn FnMut(&Check)) -> Result<Vec<Check>> {
    let want = |n: &str| only.is_empty() || only.iter().any(|o| o == n);
    let mut out = Vec::new();
    let mut push = |c: Check| {
        report(&c);
        out.push(c);
    };
    if want("gradient") {
        let (e, s) = timed(|| gradient_fidelity(0))?;
        push(check("gradient", e, 1e-4, s, "interior control vs central differences".into()));
    }
    if want("log-density") || want("score") {
        let (c, s) = timed(linear_flow_channels)?;
        if want("log-density") {
            push(check("log-density", c.logdens, 1e-3, s, "max abs error, linear flow".into()));
        }
        if want("score") {
            push(check("score", c.score, 1e-2, s, "relative error, linear flow".into()));
        }
    }
    if want("fisher") {
        let (e, s) = timed(fisher_relative_error)?;
        push(check("fisher", e, 0.05, s, "relative to σ⁴/8·tr Σ⁻¹".into()));
    }
    if want("spline-order") {
        let (st, s) = timed(|| spline_order(&[2, 4, 8, 16]))?;
        let detail = st
            .ks
            .iter()
            .zip(&st.errors)
            .map(|(k, e)| format!("K={k}:{e:.2e}"))
            .collect::<Vec<_>>()
            .join(" ");
        push(Check {
            at_least: true,
            pass: st.order >= 2.0,
            ..check("spline-order", st.order, 2.0, s, detail)
        });
    }
    if want("geodesic") {
        let (r, s) = timed(|| geodesic_recovery(&gauss_pair(&[4.0, 0.0])))?;
        let act = (r.action - r.w2_sq).abs() / r.w2_sq;
        push(check("geodesic-action", act, 0.05, s, format!("action {:.4} vs W2² {:.1}", r.action, r.w2_sq)));
        push(check(
            "geodesic-path",
            r.discrepancy / r.w2_sq,
            0.05,
            0.0,
            format!("∫W2² dt = {:.4}", r.discrepancy),
        ));
    }
    if want("bridge") {
        let (r, s) = timed(|| geodesic_recovery(&bridge_pair(10)))?;
        push(check(
            "bridge-path",
            r.discrepancy / r.w2_sq,
            0.15,
            s,
            format!("d=10 σ=1, ∫W2² dt = {:.4}, action {:.3}", r.discrepancy, r.action),
        ));
    }
    Ok(out)
}
