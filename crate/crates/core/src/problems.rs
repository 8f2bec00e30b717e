//! Boundary densities, problem configuration and the benchmark registry.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::action::{ActionSpec, InternalMode, KineticMode};
use crate::error::{Error, Result};
use crate::mlp::Architecture;
use crate::node::IntegratorConfig;
use crate::optim::{OptimBudget, Schedule};
use crate::ot::{empirical_w2, gaussian_w2, moments, EXACT_LIMIT};
use crate::potentials::{Bump, Obstacle, SoftBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmComponent {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensitySpec {
    Gaussian { mean: Vec<f64>, cov: Vec<Vec<f64>> },
    Gmm { components: Vec<GmmComponent> },
    /// Plain numeric table, one sample per line; resampled with replacement.
    Samples { path: PathBuf },
}

fn to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let n = rows.len();
    Array2::from_shape_fn((n, n), |(i, j)| rows[i].get(j).copied().unwrap_or(f64::NAN))
}

fn rows_of(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// Cholesky factor, inverse and log-determinant of one covariance.
struct Factor {
    mean: Array1<f64>,
    chol: DMatrix<f64>,
    inv: Array2<f64>,
    logdet: f64,
    log_weight: f64,
}

fn factor(mean: &[f64], cov: &[Vec<f64>], weight: f64) -> Result<Factor> {
    let d = mean.len();
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err(Error::Config(format!("covariance must be {d}×{d}")));
    }
    let m = DMatrix::from_fn(d, d, |i, j| cov[i][j]);
    if (&m - m.transpose()).abs().max() > 1e-12 * m.abs().max().max(1.0) {
        return Err(Error::Domain("covariance is not symmetric".into()));
    }
    let ch = Cholesky::new(m).ok_or_else(|| Error::Domain("covariance is not positive definite".into()))?;
    let l = ch.l();
    let logdet = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let inv = ch.inverse();
    Ok(Factor {
        mean: Array1::from(mean.to_vec()),
        inv: Array2::from_shape_fn((d, d), |(i, j)| inv[(i, j)]),
        chol: l,
        logdet,
        log_weight: weight.ln(),
    })
}

impl DensitySpec {
    pub fn gaussian(mean: Array1<f64>, cov: Array2<f64>) -> Self {
        DensitySpec::Gaussian {
            mean: mean.to_vec(),
            cov: rows_of(&cov),
        }
    }

    pub fn isotropic(mean: &[f64], var: f64) -> Self {
        let d = mean.len();
        Self::gaussian(Array1::from(mean.to_vec()), Array2::eye(d) * var)
    }

    pub fn diagonal(mean: &[f64], var: &[f64]) -> Self {
        Self::gaussian(Array1::from(mean.to_vec()), Array2::from_diag(&Array1::from(var.to_vec())))
    }

    /// Equal-weight modes on a circle in the first two coordinates.
    pub fn circle_gmm(modes: usize, radius: f64, var: f64) -> Self {
        let components = (0..modes)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / modes as f64;
                GmmComponent {
                    mean: vec![radius * a.cos(), radius * a.sin()],
                    cov: vec![vec![var, 0.0], vec![0.0, var]],
                    weight: 1.0 / modes as f64,
                }
            })
            .collect();
        DensitySpec::Gmm { components }
    }

    pub fn dim(&self) -> Result<usize> {
        match self {
            DensitySpec::Gaussian { mean, .. } => Ok(mean.len()),
            DensitySpec::Gmm { components } => components
                .first()
                .map(|c| c.mean.len())
                .ok_or_else(|| Error::Config("mixture has no components".into())),
            DensitySpec::Samples { path } => Ok(load_table(path)?.ncols()),
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.dim()? != d {
            return Err(Error::Config(format!("density has dimension {}, problem has {d}", self.dim()?)));
        }
        match self {
            DensitySpec::Gaussian { mean, cov } => factor(mean, cov, 1.0).map(|_| ()),
            DensitySpec::Gmm { components } => {
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-9 || components.iter().any(|c| !(c.weight > 0.0)) {
                    return Err(Error::Config(format!("mixture weights must be positive and sum to 1, got {total}")));
                }
                for c in components {
                    if c.mean.len() != d {
                        return Err(Error::Config("mixture components differ in dimension".into()));
                    }
                    factor(&c.mean, &c.cov, c.weight)?;
                }
                Ok(())
            }
            DensitySpec::Samples { path } => {
                if load_table(path)?.nrows() == 0 {
                    return Err(Error::Config(format!("{} has no samples", path.display())));
                }
                Ok(())
            }
        }
    }

    fn factors(&self) -> Result<Vec<Factor>> {
        match self {
            DensitySpec::Gaussian { mean, cov } => Ok(vec![factor(mean, cov, 1.0)?]),
            DensitySpec::Gmm { components } => components
                .iter()
                .map(|c| factor(&c.mean, &c.cov, c.weight))
                .collect(),
            DensitySpec::Samples { .. } => Err(Error::Unsupported("sample-file densities have no closed form".into())),
        }
    }

    /// `n` i.i.d. draws.
    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
        if let DensitySpec::Samples { path } = self {
            let table = load_table(path)?;
            let rows = table.nrows();
            if rows == 0 {
                return Err(Error::Config(format!("{} has no samples", path.display())));
            }
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows)).collect();
            return Ok(table.select(ndarray::Axis(0), &idx));
        }
        let fs = self.factors()?;
        let d = fs[0].mean.len();
        let weights: Vec<f64> = fs.iter().map(|f| f.log_weight.exp()).collect();
        let mut out = Array2::zeros((n, d));
        for mut row in out.rows_mut() {
            let k = if fs.len() == 1 {
                0
            } else {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = fs.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                pick
            };
            let e = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &fs[k].chol * e;
            for j in 0..d {
                row[j] = fs[k].mean[j] + x[j];
            }
        }
        Ok(out)
    }

    pub fn sample_seeded(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        self.sample(n, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// `(log ρ(x), ∇log ρ(x))` row by row.
    pub fn log_density_score(&self, x: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        let fs = self.factors()?;
        let (n, d) = x.dim();
        let mut l = Array1::zeros(n);
        let mut s = Array2::zeros((n, d));
        let c = -0.5 * d as f64 * (2.0 * PI).ln();
        for i in 0..n {
            let xi = x.row(i);
            let mut logs = Vec::with_capacity(fs.len());
            let mut grads = Vec::with_capacity(fs.len());
            for f in &fs {
                let r = &xi - &f.mean;
                let pr = f.inv.dot(&r);
                logs.push(f.log_weight + c - 0.5 * f.logdet - 0.5 * r.dot(&pr));
                grads.push(-pr);
            }
            let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logs.iter().map(|v| (v - mx).exp()).sum();
            l[i] = mx + z.ln();
            for (lk, gk) in logs.iter().zip(&grads) {
                let w = (lk - l[i]).exp();
                s.row_mut(i).scaled_add(w, gk);
            }
        }
        Ok((l, s))
    }

    /// Mean and covariance when the density is a single Gaussian.
    pub fn as_gaussian(&self) -> Option<(Array1<f64>, Array2<f64>)> {
        match self {
            DensitySpec::Gaussian { mean, cov } => Some((Array1::from(mean.clone()), to_matrix(cov))),
            DensitySpec::Gmm { components } if components.len() == 1 => {
                let c = &components[0];
                Some((Array1::from(c.mean.clone()), to_matrix(&c.cov)))
            }
            _ => None,
        }
    }
}

/// Whitespace- or comma-separated numeric table; `#` starts a comment line.
pub fn load_table(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::Parse(format!("{}:{}: `{t}` is not a number", path.display(), ln + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse(format!("{}:{}: ragged row", path.display(), ln + 1)));
            }
        }
        rows.push(row);
    }
    let d = rows.first().map_or(0, |r| r.len());
    Ok(Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]))
}

/// A cloud split by most likely target component.
#[derive(Debug, Clone)]
pub struct MixtureFit {
    pub counts: Vec<usize>,
    /// `(Σ_k n_k/n · W2²(cluster k moments, component k))^½`.
    pub w2_within: f64,
    /// Pearson statistic of the counts against the component weights.
    pub chi2: f64,
}

/// Assigns each point to its most likely component and compares every
/// cluster's moments with that component. Mode weights are tested apart
/// via `chi2`, since their multinomial noise dominates any finite-sample W2
/// when modes are far apart.
pub fn mixture_fit(x: &Array2<f64>, target: &DensitySpec) -> Result<MixtureFit> {
    let fs = target.factors()?;
    let (n, d) = x.dim();
    if n == 0 {
        return Err(Error::Domain("empty sample cloud".into()));
    }
    if d != fs[0].mean.len() {
        return Err(Error::Shape(format!("cloud has {d} columns, target has {}", fs[0].mean.len())));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); fs.len()];
    for (i, r) in x.rows().into_iter().enumerate() {
        let best = fs
            .iter()
            .map(|f| {
                let dx = &r - &f.mean;
                f.log_weight - 0.5 * f.logdet - 0.5 * dx.dot(&f.inv.dot(&dx))
            })
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
        members[best.0].push(i);
    }
    let mut w2 = 0.0;
    let mut chi2 = 0.0;
    for ((f, idx), spec_w) in fs.iter().zip(&members).zip(fs.iter().map(|f| f.log_weight.exp())) {
        let nk = idx.len();
        let expected = spec_w * n as f64;
        chi2 += (nk as f64 - expected).powi(2) / expected;
        if nk == 0 {
            continue;
        }
        let c = x.select(ndarray::Axis(0), idx);
        let cost = if nk >= d + 2 {
            let (m, s) = moments(&c);
            let cov = f.chol.clone() * f.chol.transpose();
            let cov = Array2::from_shape_fn((d, d), |(i, j)| cov[(i, j)]);
            gaussian_w2(&m, &s, &f.mean, &cov)?.powi(2)
        } else {
            c.rows().into_iter().map(|r| (&r - &f.mean).mapv(|v| v * v).sum()).sum::<f64>() / nk as f64
        };
        w2 += nk as f64 / n as f64 * cost;
    }
    Ok(MixtureFit {
        counts: members.iter().map(Vec::len).collect(),
        w2_within: w2.sqrt(),
        chi2,
    })
}

/// W2 between a sample cloud and a target density.
///
/// Gaussian targets use the Bures distance from the cloud's moments to the
/// exact law, mixtures the within-component distance of [`mixture_fit`],
/// and sample files an empirical match against a fresh draw.
pub fn w2_to_target(x: &Array2<f64>, target: &DensitySpec, seed: u64) -> Result<f64> {
    if let Some((m, s)) = target.as_gaussian() {
        let (mx, sx) = moments(x);
        return gaussian_w2(&mx, &sx, &m, &s);
    }
    if let DensitySpec::Gmm { .. } = target {
        return Ok(mixture_fit(x, target)?.w2_within);
    }
    let n = x.nrows().min(EXACT_LIMIT);
    let y = target.sample_seeded(n, seed)?;
    Ok(empirical_w2(&x.slice(ndarray::s![..n, ..]).to_owned(), &y)?.value)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    #[default]
    StandardNormal,
    /// `λ = ρ₀` with `θ₀ = 0`.
    Boundary0,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundaryInit {
    /// Flow-matching pretraining of each endpoint.
    #[default]
    Pretrain,
    /// Zero parameters (identity map).
    Zero,
    /// Load parameter checkpoints; missing ends are pretrained.
    Checkpoint {
        theta0: Option<PathBuf>,
        theta1: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub name: String,
    pub d: usize,
    pub boundary0: DensitySpec,
    pub boundary1: DensitySpec,
    #[serde(default)]
    pub reference: Reference,
    #[serde(default)]
    pub boundary_init: BoundaryInit,
    #[serde(default)]
    pub freeze_theta0: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Quadrature {
    /// Time intervals `N`.
    pub n: usize,
    /// Reference batch size `M`.
    pub m: usize,
    /// Interior control points `K`.
    pub k: usize,
    #[serde(default)]
    pub integrator: IntegratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub seed: u64,
    pub problem: ProblemSection,
    pub action: ActionSpec,
    pub quadrature: Quadrature,
    pub architecture: Architecture,
    pub optim: OptimBudget,
}

impl ProblemConfig {
    pub fn name(&self) -> &str {
        &self.problem.name
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.problem.d;
        if d == 0 {
            return Err(Error::Config("dimension must be ≥ 1".into()));
        }
        if self.architecture.d != d {
            return Err(Error::Config(format!(
                "architecture dimension {} differs from problem dimension {d}",
                self.architecture.d
            )));
        }
        self.problem.boundary0.validate(d)?;
        self.problem.boundary1.validate(d)?;
        self.action.validate()?;
        for o in &self.action.obstacles {
            let dims_ok = match o {
                Obstacle::GaussianMixture { bumps } => bumps.iter().all(|b| b.center.len() == d),
                Obstacle::SmoothedBoxes { boxes, .. } => boxes.iter().all(|b| b.lo.len() == d && b.hi.len() == d),
            };
            if !dims_ok {
                return Err(Error::Config("obstacle dimension differs from problem dimension".into()));
            }
        }
        let q = &self.quadrature;
        if q.n < 2 || q.m == 0 {
            return Err(Error::Config(format!("need N ≥ 2 and M ≥ 1, got N={} M={}", q.n, q.m)));
        }
        if self.action.kinetic == KineticMode::Acceleration && q.n < 3 {
            return Err(Error::Config("acceleration action needs N ≥ 3".into()));
        }
        q.integrator.validate()?;
        self.optim.validate()?;
        if self.problem.reference == Reference::Boundary0 && matches!(self.problem.boundary0, DensitySpec::Samples { .. }) {
            return Err(Error::Config("a sample-file boundary cannot serve as the reference".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Draws from the reference `λ`.
    pub fn sample_reference(&self, n: usize, rng: &mut impl Rng) -> Result<Array2<f64>> {
        match self.problem.reference {
            Reference::StandardNormal => {
                Ok(Array2::from_shape_fn((n, self.problem.d), |_| rng.sample(StandardNormal)))
            }
            Reference::Boundary0 => self.problem.boundary0.sample(n, rng),
        }
    }

    /// `(log λ, ∇log λ)` at `z` when the reference is not standard normal.
    pub fn reference_channels(&self, z: &Array2<f64>) -> Result<Option<(Array1<f64>, Array2<f64>)>> {
        match self.problem.reference {
            Reference::StandardNormal => Ok(None),
            Reference::Boundary0 => Ok(Some(self.problem.boundary0.log_density_score(z)?)),
        }
    }

    /// The same problem with the acceleration functional.
    pub fn momentum(mut self) -> Self {
        self.problem.name = format!("{}-momentum", self.problem.name);
        self.action.kinetic = KineticMode::Acceleration;
        self
    }

    /// Scaled-down settings that fit a single-core laptop budget.
    pub fn desk(mut self) -> Self {
        let base = self.problem.name.trim_end_matches("-momentum").to_string();
        let (k, n, m, w, l) = match base.as_str() {
            "scc" => (3, 20, 256, 32, 4),
            "vnefi" => (3, 20, 256, 32, 4),
            "gmm" => (3, 20, 256, 64, 4),
            "opinion" => (3, 20, 256, 32, 4),
            _ => (self.quadrature.k, self.quadrature.n, self.quadrature.m, self.architecture.width, self.architecture.layers),
        };
        self.quadrature.k = k;
        self.quadrature.n = n;
        self.quadrature.m = m;
        self.architecture.width = w;
        self.architecture.layers = l;
        self
    }
}

fn arch(d: usize, w: usize, l: usize) -> Architecture {
    Architecture::new(d, w, l, true).expect("registry architectures are valid")
}

fn soft_box(lo: [f64; 2], hi: [f64; 2], height: f64) -> SoftBox {
    SoftBox {
        lo: lo.to_vec(),
        hi: hi.to_vec(),
        height,
    }
}

/// Wall height of the S-curve. Lower walls get crossed: the congested
/// density spreads wide and the flat plateau gives no sideways push.
pub const S_CURVE_HEIGHT: f64 = 100.0;

/// Two walls forcing an S-shaped passage from the lower left to the upper right.
pub fn s_curve_obstacle() -> Obstacle {
    Obstacle::SmoothedBoxes {
        boxes: vec![
            soft_box([-4.0, -0.9], [0.0, -0.5], S_CURVE_HEIGHT),
            soft_box([0.0, 0.5], [4.0, 0.9], S_CURVE_HEIGHT),
        ],
        softness: 0.05,
    }
}

/// Stacked wall pairs whose gap narrows towards `x₁ = 0`.
pub fn v_neck_obstacle() -> Obstacle {
    let mut boxes = Vec::new();
    for (x0, x1, gap) in [(-6.0, -3.0, 2.4), (-3.0, -1.0, 1.6), (-1.0, 1.0, 0.9), (1.0, 3.0, 1.6), (3.0, 6.0, 2.4)] {
        boxes.push(soft_box([x0, gap], [x1, 8.0], 1.0));
        boxes.push(soft_box([x0, -8.0], [x1, -gap], 1.0));
    }
    Obstacle::SmoothedBoxes { boxes, softness: 0.1 }
}

/// Bumps on the radius-12 circle between the two mixtures' mode rings.
pub fn gmm_obstacle() -> Obstacle {
    let bumps = (0..4)
        .map(|i| {
            let a = PI / 4.0 + PI / 2.0 * i as f64;
            Bump {
                center: vec![12.0 * a.cos(), 12.0 * a.sin()],
                height: 1.0,
                radius: 1.5,
            }
        })
        .collect();
    Obstacle::GaussianMixture { bumps }
}

pub fn scc() -> ProblemConfig {
    ProblemConfig {
        seed: 0,
        problem: ProblemSection {
            name: "scc".into(),
            d: 2,
            boundary0: DensitySpec::isotropic(&[-2.0, -2.0], 0.1),
            boundary1: DensitySpec::isotropic(&[2.0, 2.0], 0.01),
            reference: Reference::StandardNormal,
            boundary_init: BoundaryInit::Pretrain,
            freeze_theta0: false,
        },
        action: ActionSpec {
            kappa: [100.0, 0.0, 5.0],
            obstacles: vec![s_curve_obstacle()],
            ..ActionSpec::default()
        },
        quadrature: Quadrature {
            n: 30,
            m: 1000,
            k: 5,
            integrator: IntegratorConfig::default(),
        },
        architecture: arch(2, 64, 4),
        optim: OptimBudget {
            epochs: 18,
            path_steps: 30,
            coupling_steps: 20,
            warmup_steps: 100,
            path_lr: 5e-4,
            coupling_lr: 1e-4,
            path_schedule: Schedule::Step { step_size: 10, gamma: 0.1 },
            coupling_schedule: Schedule::Step { step_size: 10, gamma: 0.9 },
            alpha: 1e5,
            ..OptimBudget::default()
        },
    }
}

pub fn vnefi() -> ProblemConfig {
    ProblemConfig {
        seed: 0,
        problem: ProblemSection {
            name: "vnefi".into(),
            d: 2,
            boundary0: DensitySpec::isotropic(&[-11.0, -1.0], 0.5),
            boundary1: DensitySpec::isotropic(&[11.0, 1.0], 0.5),
            reference: Reference::StandardNormal,
            boundary_init: BoundaryInit::Pretrain,
            freeze_theta0: false,
        },
        action: ActionSpec {
            kappa: [3000.0, 50.0, 0.0],
            sigma: 1.0,
            internal: InternalMode::Entropy,
            fisher: true,
            obstacles: vec![v_neck_obstacle()],
            ..ActionSpec::default()
        },
        quadrature: Quadrature {
            n: 60,
            m: 1000,
            k: 3,
            integrator: IntegratorConfig::default(),
        },
        architecture: arch(2, 128, 4),
        optim: OptimBudget {
            epochs: 15,
            path_steps: 20,
            coupling_steps: 20,
            warmup_steps: 100,
            path_lr: 5e-3,
            coupling_lr: 1e-4,
            path_schedule: Schedule::Step { step_size: 5, gamma: 0.25 },
            coupling_schedule: Schedule::Step { step_size: 5, gamma: 0.1 },
            alpha: 1e5,
            ..OptimBudget::default()
        },
    }
}

pub fn gmm() -> ProblemConfig {
    let mut optim = OptimBudget {
        epochs: 15,
        path_steps: 30,
        coupling_steps: 20,
        warmup_steps: 100,
        path_lr: 1e-3,
        coupling_lr: 5e-6,
        path_schedule: Schedule::Step { step_size: 3, gamma: 0.9 },
        coupling_schedule: Schedule::Cosine { t0: 5, t_mult: 2, eta_min: 1e-6 },
        alpha: 1e5,
        ..OptimBudget::default()
    };
    optim.pretrain.steps = 6000;
    ProblemConfig {
        seed: 0,
        problem: ProblemSection {
            name: "gmm".into(),
            d: 2,
            boundary0: DensitySpec::circle_gmm(8, 16.0, 1.0),
            boundary1: DensitySpec::circle_gmm(4, 8.0, 1.0),
            reference: Reference::Boundary0,
            boundary_init: BoundaryInit::Pretrain,
            freeze_theta0: true,
        },
        action: ActionSpec {
            kappa: [50.0, 0.0, 0.0],
            obstacles: vec![gmm_obstacle()],
            ..ActionSpec::default()
        },
        quadrature: Quadrature {
            n: 30,
            m: 1000,
            k: 5,
            integrator: IntegratorConfig::default(),
        },
        architecture: arch(2, 256, 4),
        optim,
    }
}

pub fn opinion(d: usize) -> ProblemConfig {
    let mut var0 = vec![0.25; d];
    var0[0] = if d == 2 { 0.5 } else { 4.0 };
    ProblemConfig {
        seed: 0,
        problem: ProblemSection {
            name: "opinion".into(),
            d,
            boundary0: DensitySpec::diagonal(&vec![0.0; d], &var0),
            boundary1: DensitySpec::isotropic(&vec![0.0; d], 3.0),
            reference: Reference::StandardNormal,
            boundary_init: BoundaryInit::Pretrain,
            freeze_theta0: false,
        },
        action: ActionSpec {
            kappa: [0.0, 0.0, 50.0],
            kinetic: KineticMode::DriftMismatch,
            ..ActionSpec::default()
        },
        quadrature: Quadrature {
            n: 20,
            m: if d == 2 { 1000 } else { 5000 },
            k: 3,
            integrator: IntegratorConfig::default(),
        },
        architecture: arch(d, 128, 4),
        optim: OptimBudget {
            epochs: 10,
            path_steps: 20,
            coupling_steps: 20,
            warmup_steps: 200,
            path_lr: 1e-3,
            coupling_lr: 1e-4,
            alpha: if d == 2 { 1e5 } else { 1e4 },
            ..OptimBudget::default()
        },
    }
}

/// `N(0, I) → N(m, I)`; the reference is the first boundary.
pub fn gauss_pair(m: &[f64]) -> ProblemConfig {
    let d = m.len();
    ProblemConfig {
        seed: 0,
        problem: ProblemSection {
            name: "gauss-pair".into(),
            d,
            boundary0: DensitySpec::isotropic(&vec![0.0; d], 1.0),
            boundary1: DensitySpec::isotropic(m, 1.0),
            reference: Reference::Boundary0,
            boundary_init: BoundaryInit::Pretrain,
            freeze_theta0: true,
        },
        action: ActionSpec::free(),
        quadrature: Quadrature {
            n: 30,
            m: 512,
            k: 3,
            integrator: IntegratorConfig::default(),
        },
        architecture: arch(d, 32, 3),
        optim: OptimBudget {
            epochs: 6,
            path_steps: 30,
            coupling_steps: 10,
            warmup_steps: 150,
            path_lr: 3e-3,
            coupling_lr: 3e-4,
            alpha: 1e3,
            ..OptimBudget::default()
        },
    }
}

pub fn registry() -> Vec<ProblemConfig> {
    let base = vec![scc(), vnefi(), gmm(), opinion(2), gauss_pair(&[4.0, 0.0])];
    let mut out = base.clone();
    out.extend(base.into_iter().map(ProblemConfig::momentum));
    out
}

pub fn lookup(name: &str) -> Result<ProblemConfig> {
    registry()
        .into_iter()
        .find(|p| p.problem.name == name)
        .ok_or_else(|| Error::UnknownProblem(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::Architecture;

    #[test]
    fn registry_entries_validate_and_roundtrip() {
        let names: Vec<String> = registry().iter().map(|p| p.name().to_string()).collect();
        for n in ["scc", "vnefi", "gmm", "opinion", "gauss-pair", "scc-momentum", "gauss-pair-momentum"] {
            assert!(names.iter().any(|x| x == n), "{n} missing");
        }
        for p in registry() {
            p.validate().unwrap();
            let text = p.to_toml().unwrap();
            let back = ProblemConfig::from_toml(&text).unwrap();
            assert_eq!(back, p, "{}", p.name());
        }
        assert!(matches!(lookup("nope"), Err(Error::UnknownProblem(_))));
    }

    #[test]
    fn table_values() {
        let v = lookup("vnefi").unwrap();
        let (m0, s0) = v.problem.boundary0.as_gaussian().unwrap();
        let (m1, s1) = v.problem.boundary1.as_gaussian().unwrap();
        assert_eq!(m0.to_vec(), vec![-11.0, -1.0]);
        assert_eq!(m1.to_vec(), vec![11.0, 1.0]);
        assert_eq!(s0, Array2::<f64>::eye(2) * 0.5);
        assert_eq!(s1, Array2::<f64>::eye(2) * 0.5);
        let s = lookup("scc").unwrap();
        assert_eq!((s.quadrature.k, s.quadrature.n, s.quadrature.m), (5, 30, 1000));
        assert_eq!(s.architecture, Architecture::new(2, 64, 4, true).unwrap());
        let g = gauss_pair(&[0.0, 0.0]);
        assert_eq!(g.problem.boundary0, g.problem.boundary1);
    }

    #[test]
    fn gaussian_sampling_moments() {
        let spec = DensitySpec::gaussian(ndarray::array![1.0, -2.0], ndarray::array![[2.0, 0.5], [0.5, 1.0]]);
        let n = 20000;
        let x = spec.sample_seeded(n, 3).unwrap();
        let (m, c) = moments(&x);
        assert!((m[0] - 1.0).abs() < 3.0 * (2.0f64 / n as f64).sqrt());
        assert!((m[1] + 2.0).abs() < 3.0 * (1.0f64 / n as f64).sqrt());
        assert!((c[[0, 1]] - 0.5).abs() < 0.05);
        assert_eq!(x, spec.sample_seeded(n, 3).unwrap());
    }

    #[test]
    fn single_component_mixture_is_gaussian() {
        let g = DensitySpec::isotropic(&[0.5, 0.5], 2.0);
        let mix = DensitySpec::Gmm {
            components: vec![GmmComponent {
                mean: vec![0.5, 0.5],
                cov: vec![vec![2.0, 0.0], vec![0.0, 2.0]],
                weight: 1.0,
            }],
        };
        assert_eq!(g.sample_seeded(50, 1).unwrap(), mix.sample_seeded(50, 1).unwrap());
        let x = g.sample_seeded(5, 2).unwrap();
        let (la, sa) = g.log_density_score(&x).unwrap();
        let (lb, sb) = mix.log_density_score(&x).unwrap();
        assert!((&la - &lb).iter().all(|v| v.abs() < 1e-12));
        assert!((&sa - &sb).iter().all(|v| v.abs() < 1e-12));
        assert_eq!(mix.as_gaussian(), g.as_gaussian());
    }

    #[test]
    fn circle_mixture_modes_are_balanced() {
        let spec = DensitySpec::circle_gmm(8, 16.0, 1.0);
        let n = 8000;
        let x = spec.sample_seeded(n, 5).unwrap();
        let mut counts = [0usize; 8];
        for r in x.rows() {
            let a = r[1].atan2(r[0]).rem_euclid(2.0 * PI);
            counts[((a / (PI / 4.0)).round() as usize) % 8] += 1;
        }
        let expected = n as f64 / 8.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9% quantile of χ² with 7 degrees of freedom.
        assert!(chi2 < 24.32, "{counts:?} χ²={chi2}");
    }

    #[test]
    fn mixture_fit_of_exact_draws() {
        let spec = DensitySpec::circle_gmm(8, 16.0, 1.0);
        let x = spec.sample_seeded(4000, 6).unwrap();
        let fit = mixture_fit(&x, &spec).unwrap();
        assert_eq!(fit.counts.iter().sum::<usize>(), 4000);
        assert!(fit.w2_within < 0.15, "{}", fit.w2_within);
        assert!(fit.chi2 < 24.32, "{}", fit.chi2);
        // everything collapsed onto one mode
        let one = DensitySpec::isotropic(&[16.0, 0.0], 1.0).sample_seeded(4000, 7).unwrap();
        let fit = mixture_fit(&one, &spec).unwrap();
        assert!(fit.w2_within < 0.15);
        assert!(fit.chi2 > 1000.0);
        // a shifted cloud is far from every mode
        let off = x.mapv(|v| v * 0.5);
        assert!(mixture_fit(&off, &spec).unwrap().w2_within > 1.0);
    }

    #[test]
    fn mixture_score_matches_differences() {
        let spec = DensitySpec::circle_gmm(4, 3.0, 0.7);
        let x = ndarray::array![[0.3, -1.2], [2.0, 2.0]];
        let (l, s) = spec.log_density_score(&x).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut p = x.clone();
                p[[i, j]] += h;
                let fd = (spec.log_density_score(&p).unwrap().0[i] - l[i]) / h;
                assert!((fd - s[[i, j]]).abs() < 1e-4);
            }
        }
        // Weights integrate: Gaussian log-density at the mean.
        let g = DensitySpec::isotropic(&[0.0, 0.0], 1.0);
        let (l0, _) = g.log_density_score(&ndarray::array![[0.0, 0.0]]).unwrap();
        assert!((l0[0] + (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = DensitySpec::Gaussian {
            mean: vec![0.0, 0.0],
            cov: vec![vec![1.0, 2.0], vec![2.0, 1.0]],
        };
        assert!(matches!(bad.validate(2), Err(Error::Domain(_))));
        let mut mix = DensitySpec::circle_gmm(3, 1.0, 1.0);
        if let DensitySpec::Gmm { components } = &mut mix {
            components[0].weight = 0.5;
        }
        assert!(mix.validate(2).is_err());
        let mut cfg = scc();
        cfg.architecture = arch(3, 8, 2);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn obstacles_are_finite_and_nonnegative_on_the_box() {
        for p in registry() {
            for o in &p.action.obstacles {
                for i in 0..=40 {
                    for j in 0..=40 {
                        let x = ndarray::array![-20.0 + i as f64, -20.0 + j as f64];
                        let v = o.value(x.view());
                        assert!(v.is_finite() && v >= 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn samples_file_density() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.txt");
        std::fs::write(&path, "# x y\n1 2\n3,4\n").unwrap();
        let spec = DensitySpec::Samples { path: path.clone() };
        spec.validate(2).unwrap();
        let x = spec.sample_seeded(20, 0).unwrap();
        assert_eq!(x.dim(), (20, 2));
        assert!(x.rows().into_iter().all(|r| (r[0] == 1.0 && r[1] == 2.0) || (r[0] == 3.0 && r[1] == 4.0)));
        std::fs::write(&path, "1 2\n3\n").unwrap();
        assert!(matches!(spec.validate(2), Err(Error::Parse(_))));
    }

    #[test]
    fn w2_to_gaussian_target_uses_the_exact_law() {
        let spec = DensitySpec::isotropic(&[4.0, 0.0], 1.0);
        let x = spec.sample_seeded(2000, 9).unwrap();
        assert!(w2_to_target(&x, &spec, 0).unwrap() < 0.1);
        let y = DensitySpec::isotropic(&[0.0, 0.0], 1.0).sample_seeded(2000, 9).unwrap();
        assert!((w2_to_target(&y, &spec, 0).unwrap() - 4.0).abs() < 0.1);
    }
}
