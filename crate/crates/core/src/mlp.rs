//! MLP velocity field whose weights arrive as one flat parameter vector.
//!
//! Layout of θ: `W₁ (w × d_in), b₁ (w)`, then `L − 2` hidden layers
//! `W (w × w), b (w)`, then `W_L (d × w), b_L (d)`. Matrices are row-major.
//! Hidden layers use tanh, the output layer is affine. When the network is
//! time-varying, τ is appended to each input row as an extra coordinate.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{stack_input, Time, VelocityField};
use crate::jet::{tanh_jet, Jet};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ArchRepr", into = "ArchRepr")]
pub struct Architecture {
    pub d: usize,
    pub width: usize,
    pub layers: usize,
    pub time_varying: bool,
}

#[derive(Serialize, Deserialize)]
struct ArchRepr {
    dims: [usize; 3],
    #[serde(default = "yes")]
    time_varying: bool,
}

fn yes() -> bool {
    true
}

impl TryFrom<ArchRepr> for Architecture {
    type Error = Error;
    fn try_from(r: ArchRepr) -> Result<Self> {
        Architecture::new(r.dims[0], r.dims[1], r.dims[2], r.time_varying)
    }
}

impl From<Architecture> for ArchRepr {
    fn from(a: Architecture) -> Self {
        ArchRepr {
            dims: [a.d, a.width, a.layers],
            time_varying: a.time_varying,
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{},{},{}]", self.d, self.width, self.layers)?;
        if self.time_varying {
            write!(f, "+t")?;
        }
        Ok(())
    }
}

/// One affine layer's position inside θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlice {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayerSlice {
    pub fn weight_len(&self) -> usize {
        self.rows * self.cols
    }
    pub fn bias_offset(&self) -> usize {
        self.offset + self.weight_len()
    }
    pub fn end(&self) -> usize {
        self.bias_offset() + self.rows
    }
}

impl Architecture {
    pub fn new(d: usize, width: usize, layers: usize, time_varying: bool) -> Result<Self> {
        if d < 1 || width < 1 {
            return Err(Error::Config(format!(
                "architecture needs d ≥ 1 and width ≥ 1, got d={d}, w={width}"
            )));
        }
        if layers < 2 {
            return Err(Error::Config(format!(
                "architecture needs at least 2 layers, got {layers}"
            )));
        }
        Ok(Self {
            d,
            width,
            layers,
            time_varying,
        })
    }

    pub fn d_in(&self) -> usize {
        self.d + usize::from(self.time_varying)
    }

    pub fn param_count(&self) -> usize {
        let (d, w) = (self.d, self.width);
        w * self.d_in() + w + (self.layers - 2) * (w * w + w) + d * w + d
    }

    pub fn slices(&self) -> Vec<LayerSlice> {
        let mut out = Vec::with_capacity(self.layers);
        let mut offset = 0;
        for l in 0..self.layers {
            let cols = if l == 0 { self.d_in() } else { self.width };
            let rows = if l + 1 == self.layers { self.d } else { self.width };
            let s = LayerSlice { offset, rows, cols };
            offset = s.end();
            out.push(s);
        }
        out
    }

    /// Uniform `±1/√fan_in` initialization of weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        let mut theta = Array1::zeros(self.param_count());
        for s in self.slices() {
            let bound = 1.0 / (s.cols as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for v in theta.slice_mut(ndarray::s![s.offset..s.end()]).iter_mut() {
                *v = rng.sample(dist);
            }
        }
        theta
    }

    /// Splits θ into per-layer `(W, b)` pairs.
    pub fn unflatten(&self, theta: &Array1<f64>) -> Result<Vec<(Array2<f64>, Array1<f64>)>> {
        self.check(theta)?;
        Ok(self
            .slices()
            .into_iter()
            .map(|s| {
                let w = theta
                    .slice(ndarray::s![s.offset..s.bias_offset()])
                    .to_owned()
                    .into_shape_with_order((s.rows, s.cols))
                    .expect("contiguous");
                let b = theta.slice(ndarray::s![s.bias_offset()..s.end()]).to_owned();
                (w, b)
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[(Array2<f64>, Array1<f64>)]) -> Result<Array1<f64>> {
        let slices = self.slices();
        if layers.len() != slices.len() {
            return Err(Error::Shape(format!(
                "expected {} layers, got {}",
                slices.len(),
                layers.len()
            )));
        }
        let mut out = Vec::with_capacity(self.param_count());
        for (s, (w, b)) in slices.iter().zip(layers) {
            if w.dim() != (s.rows, s.cols) || b.len() != s.rows {
                return Err(Error::Shape(format!(
                    "layer at offset {} should be {}×{}",
                    s.offset, s.rows, s.cols
                )));
            }
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        Ok(Array1::from(out))
    }

    pub fn check(&self, theta: &Array1<f64>) -> Result<()> {
        if theta.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "parameter vector has length {}, architecture {} needs {}",
                theta.len(),
                self,
                self.param_count()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("parameter vector has non-finite entries".into()));
        }
        Ok(())
    }
}

/// The MLP as a [`VelocityField`].
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub arch: Architecture,
}

impl Mlp {
    pub fn new(arch: Architecture) -> Self {
        Self { arch }
    }

    /// Plain forward pass `x ↦ f(x, τ; θ)` without derivative blocks.
    pub fn forward(&self, theta: &Array1<f64>, tau: Option<f64>, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.arch.check(theta)?;
        if x.ncols() != self.arch.d {
            return Err(Error::Shape(format!(
                "input has {} columns, expected {}",
                x.ncols(),
                self.arch.d
            )));
        }
        if self.arch.time_varying && tau.is_none() {
            return Err(Error::Shape("time-varying network needs τ".into()));
        }
        let tape = Tape::new();
        let th = tape.constant(theta.view().insert_axis(ndarray::Axis(0)).to_owned());
        let params = self.bind(th);
        let xv = tape.constant(x.clone());
        let out = self.eval(
            &params,
            Time::Scalar(tau.unwrap_or(0.0)),
            xv,
            &Jet::value(x.nrows()),
        );
        let v = out.value().clone();
        Ok(v)
    }
}

impl VelocityField for Mlp {
    fn dim(&self) -> usize {
        self.arch.d
    }

    fn param_count(&self) -> usize {
        self.arch.param_count()
    }

    fn bind<'t>(&self, theta: Var<'t>) -> Vec<Var<'t>> {
        let mut out = Vec::with_capacity(2 * self.arch.layers);
        for s in self.arch.slices() {
            out.push(theta.param_slice(s.offset, s.rows, s.cols));
            out.push(theta.param_slice(s.bias_offset(), 1, s.rows));
        }
        out
    }

    fn eval<'t>(&self, params: &[Var<'t>], time: Time<'_>, x: Var<'t>, jet: &Jet) -> Var<'t> {
        let time = self.arch.time_varying.then_some(time);
        let mut h = stack_input(x, time, jet);
        let n = self.arch.layers;
        for l in 0..n {
            let a = h.matmul_t(params[2 * l]).add_bias_rows(params[2 * l + 1], jet.m);
            h = if l + 1 == n { a } else { tanh_jet(a, jet) };
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jet::{divergence, grad_divergence};
    use crate::tape::Mat;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_counts() {
        let cases = [
            ((2, 64, 4, true), 8706),
            ((1, 1, 2, false), 4),
            ((2, 128, 4, true), 33794),
            ((2, 8, 2, true), 50),
        ];
        for ((d, w, l, tv), want) in cases {
            assert_eq!(Architecture::new(d, w, l, tv).unwrap().param_count(), want);
        }
        assert!(Architecture::new(2, 8, 1, true).is_err());
    }

    #[test]
    fn slices_tile_the_vector() {
        let arch = Architecture::new(3, 5, 4, true).unwrap();
        let s = arch.slices();
        assert_eq!(s[0].offset, 0);
        for w in s.windows(2) {
            assert_eq!(w[0].end(), w[1].offset);
        }
        assert_eq!(s.last().unwrap().end(), arch.param_count());
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let arch = Architecture::new(2, 6, 3, true).unwrap();
        let theta = arch.init(&mut ChaCha8Rng::seed_from_u64(1));
        let layers = arch.unflatten(&theta).unwrap();
        assert_eq!(arch.flatten(&layers).unwrap(), theta);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let arch = Architecture::new(2, 8, 3, true).unwrap();
        let net = Mlp::new(arch);
        let x = array![[1.0, -2.0], [0.5, 3.0]];
        let y = net
            .forward(&Array1::zeros(arch.param_count()), Some(0.3), &x)
            .unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn odd_activation_at_origin() {
        let arch = Architecture::new(1, 1, 2, false).unwrap();
        let y = Mlp::new(arch)
            .forward(&array![1.0, 0.0, 1.0, 0.0], None, &array![[0.0]])
            .unwrap();
        assert_eq!(y[[0, 0]], 0.0);
    }

    #[test]
    fn length_mismatch_is_a_shape_error() {
        let arch = Architecture::new(2, 4, 2, false).unwrap();
        let err = Mlp::new(arch).forward(&Array1::zeros(3), None, &array![[0.0, 0.0]]);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn theta_gradient_matches_finite_differences() {
        let arch = Architecture::new(2, 5, 3, true).unwrap();
        let net = Mlp::new(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta: Array1<f64> =
            Array1::from_shape_fn(arch.param_count(), |_| rng.random_range(-0.5..0.5));
        let x = array![[0.3, -0.7], [1.1, 0.4], [-0.2, 0.9]];
        let loss = |th: &Array1<f64>| {
            let y = net.forward(th, Some(0.4), &x).unwrap();
            y.mapv(|v| v * v).sum()
        };
        let tape = Tape::new();
        let th = tape.param(theta.view().insert_axis(ndarray::Axis(0)).to_owned());
        let p = net.bind(th);
        let y = net.eval(&p, Time::Scalar(0.4), tape.constant(x.clone()), &Jet::value(3));
        let l = y.square().sum();
        let g = tape.backward(&[(l, Mat::ones((1, 1)))]).get_or_zeros(th);
        let h = 1e-4;
        for i in 0..theta.len() {
            let mut a = theta.clone();
            a[i] += h;
            let mut b = theta.clone();
            b[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            let ad = g[[0, i]];
            assert!(
                (fd - ad).abs() <= 1e-5 * ad.abs().max(1e-3),
                "θ[{i}]: fd {fd} ad {ad}"
            );
        }
    }

    #[test]
    fn jet_blocks_match_finite_differences_in_x() {
        let arch = Architecture::new(2, 6, 3, true).unwrap();
        let net = Mlp::new(arch);
        let theta = arch.init(&mut ChaCha8Rng::seed_from_u64(3));
        let x = array![[0.3, -0.7], [1.1, 0.4]];
        let tape = Tape::new();
        let th = tape.constant(theta.view().insert_axis(ndarray::Axis(0)).to_owned());
        let p = net.bind(th);
        let jet = Jet::hessian(2, 2);
        let v = net.eval(&p, Time::Scalar(0.2), tape.constant(x.clone()), &jet);
        let div = divergence(v, &jet).value().clone();
        let gd = grad_divergence(v, &jet).value().clone();
        let f = |x: &Array2<f64>| net.forward(&theta, Some(0.2), x).unwrap();
        let fdiv = |x: &Array2<f64>| {
            let h = 1e-5;
            let mut out: Array1<f64> = Array1::zeros(x.nrows());
            for k in 0..2 {
                let mut a = x.clone();
                a.column_mut(k).mapv_inplace(|v| v + h);
                let mut b = x.clone();
                b.column_mut(k).mapv_inplace(|v| v - h);
                out = out + (f(&a).column(k).to_owned() - f(&b).column(k)) / (2.0 * h);
            }
            out
        };
        let d0 = fdiv(&x);
        for r in 0..2 {
            assert!((d0[r] - div[[r, 0]]).abs() < 1e-8);
        }
        let h = 1e-4;
        for i in 0..2 {
            let mut a = x.clone();
            a.column_mut(i).mapv_inplace(|v| v + h);
            let mut b = x.clone();
            b.column_mut(i).mapv_inplace(|v| v - h);
            let fd = (fdiv(&a) - fdiv(&b)) / (2.0 * h);
            for r in 0..2 {
                assert!((fd[r] - gd[[r, i]]).abs() < 1e-4, "{} vs {}", fd[r], gd[[r, i]]);
            }
        }
    }
}
