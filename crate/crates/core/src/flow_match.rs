//! Conditional flow matching: boundary pretraining and the dissimilarity used
//! in coupling optimization.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Time, VelocityField};
use crate::jet::Jet;
use crate::mlp::{Architecture, Mlp};
use crate::optim::Adam;
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FmConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub sigma_min: f64,
}

impl Default for FmConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 1500,
            learning_rate: 3e-3,
            sigma_min: 1e-2,
        }
    }
}

impl FmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) {
            return Err(Error::Config(format!("sigma_min must be positive, got {}", self.sigma_min)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("flow-matching batch size is zero".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("flow-matching learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One regression batch: reference points, targets and per-row times.
#[derive(Debug, Clone)]
pub struct FmBatch {
    pub z: Array2<f64>,
    pub x1: Array2<f64>,
    pub tau: Array1<f64>,
}

impl FmBatch {
    pub fn new(z: Array2<f64>, x1: Array2<f64>, rng: &mut impl Rng) -> Result<Self> {
        if z.dim() != x1.dim() {
            return Err(Error::Shape(format!(
                "reference batch {:?} and target batch {:?} differ",
                z.dim(),
                x1.dim()
            )));
        }
        let tau = Array1::from_shape_fn(z.nrows(), |_| rng.random::<f64>());
        Ok(Self { z, x1, tau })
    }

    /// Interpolant `x_τ` and regression target `u`.
    pub fn interpolant(&self, sigma_min: f64) -> (Array2<f64>, Array2<f64>) {
        let c = 1.0 - sigma_min;
        let tau = self.tau.view().insert_axis(Axis(1));
        let xt = &self.z * &tau.mapv(|t| 1.0 - c * t) + &self.x1 * &tau;
        let u = &self.x1 - &(&self.z * c);
        (xt, u)
    }
}

/// `mean ‖v_θ(τ, x_τ) − u‖²` on a fixed batch, with its θ-gradient on request.
pub fn fm_loss_batch<F: VelocityField + ?Sized>(
    field: &F,
    theta: &Array1<f64>,
    batch: &FmBatch,
    sigma_min: f64,
    want_grad: bool,
) -> Result<(f64, Option<Array1<f64>>)> {
    if theta.len() != field.param_count() {
        return Err(Error::Shape(format!(
            "parameter vector has {} entries, field needs {}",
            theta.len(),
            field.param_count()
        )));
    }
    let m = batch.z.nrows();
    if m == 0 {
        return Ok((0.0, want_grad.then(|| Array1::zeros(theta.len()))));
    }
    let (xt, u) = batch.interpolant(sigma_min);
    let tape = Tape::new();
    let row = theta.view().insert_axis(Axis(0)).to_owned();
    let th = if want_grad { tape.param(row) } else { tape.constant(row) };
    let params = field.bind(th);
    let x = tape.constant(xt);
    let v = field.eval(&params, Time::PerRow(&batch.tau), x, &Jet::value(m));
    let loss = v.sub(tape.constant(u)).square().sum().scale(1.0 / m as f64);
    let value = loss.scalar();
    if !want_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(&[(loss, Array2::ones((1, 1)))]);
    Ok((value, Some(grads.get_or_zeros(th).index_axis_move(Axis(0), 0))))
}

/// Flow-matching loss with fresh times `τ ~ U[0, 1]`.
pub fn fm_loss<F: VelocityField + ?Sized>(
    field: &F,
    theta: &Array1<f64>,
    x1: &Array2<f64>,
    z: &Array2<f64>,
    sigma_min: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let batch = FmBatch::new(z.clone(), x1.clone(), rng)?;
    Ok(fm_loss_batch(field, theta, &batch, sigma_min, false)?.0)
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub theta: Array1<f64>,
    /// Mean loss over the last 50 steps.
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

/// Draws `n` points; the generator is owned by the trainer.
pub type Sampler<'a> = dyn FnMut(usize, &mut ChaCha8Rng) -> Result<Array2<f64>> + 'a;

/// Trains a boundary map pushing the reference onto the target with Adam,
/// the learning rate following a cosine decay to 1% of its initial value.
///
/// `observe` sees `(step, θ, loss)` after every update.
pub fn pretrain_boundary_with(
    arch: &Architecture,
    cfg: &FmConfig,
    seed: u64,
    init: Option<Array1<f64>>,
    target: &mut Sampler<'_>,
    reference: &mut Sampler<'_>,
    observe: &mut dyn FnMut(usize, &Array1<f64>, f64),
) -> Result<Pretrained> {
    cfg.validate()?;
    if !arch.time_varying {
        return Err(Error::Config("flow matching needs a time-varying architecture".into()));
    }
    let net = Mlp::new(*arch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = match init {
        Some(t) => {
            arch.check(&t)?;
            t
        }
        None => arch.init(&mut rng),
    };
    let mut adam = Adam::new(&[theta.len()]);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let x1 = target(cfg.batch_size, &mut rng)?;
        let z = reference(cfg.batch_size, &mut rng)?;
        let batch = FmBatch::new(z, x1, &mut rng)?;
        let (loss, grad) = fm_loss_batch(&net, &theta, &batch, cfg.sigma_min, true)?;
        let grad = grad.expect("gradient requested");
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                seed,
                what: "flow-matching loss is not finite".into(),
            });
        }
        let frac = step as f64 / cfg.steps as f64;
        let lr = cfg.learning_rate * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()));
        adam.step(std::slice::from_mut(&mut theta), &[grad], lr);
        losses.push(loss);
        observe(step, &theta, loss);
    }
    let tail = &losses[losses.len().saturating_sub(50)..];
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    Ok(Pretrained {
        theta,
        final_loss,
        losses,
    })
}

pub fn pretrain_boundary(
    arch: &Architecture,
    cfg: &FmConfig,
    seed: u64,
    target: &mut Sampler<'_>,
    reference: &mut Sampler<'_>,
) -> Result<Pretrained> {
    pretrain_boundary_with(arch, cfg, seed, None, target, reference, &mut |_, _, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AffineField;
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn normal(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn degenerate_width_gives_second_moment() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = normal(64, 2, &mut rng);
        let x1 = normal(64, 2, &mut rng);
        let f = AffineField { d: 2 };
        let theta = Array1::zeros(6);
        let loss = fm_loss(&f, &theta, &x1, &z, 1.0, &mut rng).unwrap();
        let want = x1.iter().map(|v| v * v).sum::<f64>() / 64.0;
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn exact_field_has_zero_loss() {
        // Point masses z = 0 → x₁ = c: u = c everywhere, matched by a constant field.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Array2::zeros((2, 2));
        let x1 = array![[1.5, -2.0], [1.5, -2.0]];
        let f = AffineField { d: 2 };
        let theta = AffineField::pack(&Array2::zeros((2, 2)), &array![1.5, -2.0]);
        let loss = fm_loss(&f, &theta, &x1, &z, 1e-2, &mut rng).unwrap();
        assert!(loss.abs() < 1e-24);
    }

    #[test]
    fn loss_gradient_matches_differences() {
        let arch = Architecture::new(2, 6, 3, true).unwrap();
        let net = Mlp::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = arch.init(&mut rng);
        let batch = FmBatch::new(normal(10, 2, &mut rng), normal(10, 2, &mut rng) + 2.0, &mut rng).unwrap();
        let (_, g) = fm_loss_batch(&net, &theta, &batch, 1e-2, true).unwrap();
        let g = g.unwrap();
        let h = 1e-6;
        for i in (0..theta.len()).step_by(7) {
            let mut p = theta.clone();
            p[i] += h;
            let mut q = theta.clone();
            q[i] -= h;
            let fd = (fm_loss_batch(&net, &p, &batch, 1e-2, false).unwrap().0
                - fm_loss_batch(&net, &q, &batch, 1e-2, false).unwrap().0)
                / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn rejects_time_free_architecture() {
        let arch = Architecture::new(2, 4, 2, false).unwrap();
        let mut s = |n: usize, r: &mut ChaCha8Rng| Ok(normal(n, 2, r));
        let mut t = |n: usize, r: &mut ChaCha8Rng| Ok(normal(n, 2, r));
        assert!(pretrain_boundary(&arch, &FmConfig::default(), 0, &mut s, &mut t).is_err());
    }

    #[test]
    fn pretraining_is_deterministic() {
        let arch = Architecture::new(2, 8, 3, true).unwrap();
        let cfg = FmConfig {
            steps: 30,
            batch_size: 32,
            ..FmConfig::default()
        };
        let run = || {
            let mut s = |n: usize, r: &mut ChaCha8Rng| Ok(normal(n, 2, r) + 1.0);
            let mut t = |n: usize, r: &mut ChaCha8Rng| Ok(normal(n, 2, r));
            pretrain_boundary(&arch, &cfg, 7, &mut s, &mut t).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.losses.len(), 30);
        assert!(a.losses[25..].iter().sum::<f64>() < a.losses[..5].iter().sum::<f64>());
    }
}
