//! Forward-mode spatial derivatives carried as stacked row blocks.
//!
//! A batch of `m` points is evaluated together with directional derivatives
//! by stacking blocks of `m` rows: block 0 holds values, then one block per
//! first-order direction, then one block per second-order pair `(k, l)`.
//! Affine layers act on every block identically (biases only touch block 0);
//! nonlinearities use [`tanh_jet`], which applies the chain rule blockwise.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::tape::{CustomOp, Mat, Var};

/// Which derivative blocks accompany the value block.
#[derive(Debug, Clone)]
pub struct Jet {
    pub m: usize,
    /// First-order directions, each `m × d` (one direction per row).
    pub dirs: Vec<Mat>,
    /// Second-order pairs as indices into `dirs`.
    pub pairs: Vec<(usize, usize)>,
}

impl Jet {
    pub fn value(m: usize) -> Self {
        Self {
            m,
            dirs: Vec::new(),
            pairs: Vec::new(),
        }
    }

    /// Unit directions `e_1 … e_d`.
    pub fn gradient(m: usize, d: usize) -> Self {
        let dirs = (0..d)
            .map(|k| {
                let mut e = Mat::zeros((m, d));
                e.column_mut(k).fill(1.0);
                e
            })
            .collect();
        Self {
            m,
            dirs,
            pairs: Vec::new(),
        }
    }

    /// Unit directions plus every pair `k ≤ l`.
    pub fn hessian(m: usize, d: usize) -> Self {
        let mut jet = Self::gradient(m, d);
        for k in 0..d {
            for l in k..d {
                jet.pairs.push((k, l));
            }
        }
        jet
    }

    /// Arbitrary per-row probe directions (Hutchinson).
    pub fn probes(m: usize, probes: Vec<Mat>) -> Self {
        for p in &probes {
            assert_eq!(p.nrows(), m);
        }
        Self {
            m,
            dirs: probes,
            pairs: Vec::new(),
        }
    }

    pub fn blocks(&self) -> usize {
        1 + self.dirs.len() + self.pairs.len()
    }

    pub fn rows(&self) -> usize {
        self.blocks() * self.m
    }

    pub fn is_value(&self) -> bool {
        self.blocks() == 1
    }

    pub fn dir_block(&self, k: usize) -> usize {
        1 + k
    }

    /// Block index of the pair `(k, l)` in either order.
    pub fn pair_block(&self, k: usize, l: usize) -> Option<usize> {
        let (a, b) = if k <= l { (k, l) } else { (l, k) };
        self.pairs
            .iter()
            .position(|&p| p == (a, b))
            .map(|i| 1 + self.dirs.len() + i)
    }

    /// Constant rows that follow the value block at the network input:
    /// the directions, then zeros for the pair blocks.
    pub fn input_tail(&self, cols: usize) -> Mat {
        let mut out = Mat::zeros((self.rows() - self.m, cols));
        for (k, dir) in self.dirs.iter().enumerate() {
            let d = dir.ncols();
            out.slice_mut(s![k * self.m..(k + 1) * self.m, ..d])
                .assign(dir);
        }
        out
    }
}

fn block(a: &Mat, b: usize, m: usize) -> ArrayView2<'_, f64> {
    a.slice(s![b * m..(b + 1) * m, ..])
}

struct TanhJet {
    m: usize,
    n_first: usize,
    pairs: Vec<(usize, usize)>,
}

/// Elementwise tanh applied to a stacked jet.
pub fn tanh_jet<'t>(a: Var<'t>, jet: &Jet) -> Var<'t> {
    if jet.is_value() {
        return a.tanh();
    }
    let m = jet.m;
    let nf = jet.dirs.len();
    let value = {
        let av = a.value();
        let mut out = Mat::zeros(av.dim());
        let t = block(&av, 0, m).mapv(crate::tape::tanh);
        let s1 = t.mapv(|t| 1.0 - t * t);
        let s2 = Zip::from(&t).and(&s1).map_collect(|&t, &s1| -2.0 * t * s1);
        out.slice_mut(s![..m, ..]).assign(&t);
        for k in 0..nf {
            let ak = block(&av, 1 + k, m);
            out.slice_mut(s![(1 + k) * m..(2 + k) * m, ..])
                .assign(&(&s1 * &ak));
        }
        for (p, &(k, l)) in jet.pairs.iter().enumerate() {
            let b = 1 + nf + p;
            let ak = block(&av, 1 + k, m);
            let al = block(&av, 1 + l, m);
            let ap = block(&av, b, m);
            let mut o = out.slice_mut(s![b * m..(b + 1) * m, ..]);
            Zip::from(&mut o)
                .and(&s2)
                .and(&s1)
                .and(&ak)
                .and(&al)
                .and(&ap)
                .for_each(|o, &s2, &s1, &ak, &al, &ap| *o = s2 * ak * al + s1 * ap);
        }
        out
    };
    a.tape().custom(
        &[a],
        value,
        Box::new(TanhJet {
            m,
            n_first: nf,
            pairs: jet.pairs.clone(),
        }),
    )
}

impl CustomOp for TanhJet {
    fn name(&self) -> &'static str {
        "tanh_jet"
    }

    fn backward(&self, inputs: &[&Mat], output: &Mat, g: &Mat) -> Vec<Option<Mat>> {
        let a = inputs[0];
        let m = self.m;
        let nf = self.n_first;
        let t = block(output, 0, m);
        let s1 = t.mapv(|t| 1.0 - t * t);
        let s2 = Zip::from(&t).and(&s1).map_collect(|&t, &s1| -2.0 * t * s1);
        let mut ga = Mat::zeros(a.dim());

        // Pair blocks feed the value block (via s3 and s2) and both parents.
        let mut ga0 = &block(g, 0, m) * &s1;
        if !self.pairs.is_empty() {
            let s3 = Zip::from(&t)
                .and(&s1)
                .map_collect(|&t, &s1| -2.0 * s1 * s1 + 4.0 * t * t * s1);
            for (p, &(k, l)) in self.pairs.iter().enumerate() {
                let b = 1 + nf + p;
                let gp = block(g, b, m);
                let ak = block(a, 1 + k, m);
                let al = block(a, 1 + l, m);
                let ap = block(a, b, m);
                let curv = Zip::from(&s3)
                    .and(&s2)
                    .and(&ak)
                    .and(&al)
                    .and(&ap)
                    .map_collect(|&s3, &s2, &ak, &al, &ap| s3 * ak * al + s2 * ap);
                Zip::from(&mut ga0)
                    .and(&gp)
                    .and(&curv)
                    .for_each(|o, &gp, &c| *o += gp * c);
                let gps2 = &gp * &s2;
                {
                    let mut gk = ga.slice_mut(s![(1 + k) * m..(2 + k) * m, ..]);
                    gk.scaled_add(1.0, &(&gps2 * &al));
                }
                {
                    let mut gl = ga.slice_mut(s![(1 + l) * m..(2 + l) * m, ..]);
                    gl.scaled_add(1.0, &(&gps2 * &ak));
                }
                ga.slice_mut(s![b * m..(b + 1) * m, ..])
                    .assign(&(&gp * &s1));
            }
        }
        for k in 0..nf {
            let gk = block(g, 1 + k, m);
            let ak = block(a, 1 + k, m);
            Zip::from(&mut ga0)
                .and(&gk)
                .and(&s2)
                .and(&ak)
                .for_each(|o, &gk, &s2, &ak| *o += gk * s2 * ak);
            let mut dst = ga.slice_mut(s![(1 + k) * m..(2 + k) * m, ..]);
            dst.scaled_add(1.0, &(&gk * &s1));
        }
        ga.slice_mut(s![..m, ..]).assign(&ga0);
        vec![Some(ga)]
    }
}

/// `out[:, c] = Σ w · V_block[:, col]` over the terms listed for column `c`.
struct BlockContract {
    m: usize,
    terms: Vec<Vec<(usize, usize, f64)>>,
}

impl CustomOp for BlockContract {
    fn name(&self) -> &'static str {
        "block_contract"
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, g: &Mat) -> Vec<Option<Mat>> {
        let mut gv = Mat::zeros(inputs[0].dim());
        let m = self.m;
        for (c, terms) in self.terms.iter().enumerate() {
            let gc = g.column(c);
            for &(b, col, w) in terms {
                let mut dst = gv.slice_mut(s![b * m..(b + 1) * m, col]);
                dst.scaled_add(w, &gc);
            }
        }
        vec![Some(gv)]
    }
}

fn contract<'t>(v: Var<'t>, m: usize, terms: Vec<Vec<(usize, usize, f64)>>) -> Var<'t> {
    let value = {
        let vv = v.value();
        let mut out = Mat::zeros((m, terms.len()));
        for (c, ts) in terms.iter().enumerate() {
            let mut oc = out.column_mut(c);
            for &(b, col, w) in ts {
                oc.scaled_add(w, &vv.slice(s![b * m..(b + 1) * m, col]));
            }
        }
        out
    };
    v.tape()
        .custom(&[v], value, Box::new(BlockContract { m, terms }))
}

/// Value block of a stacked jet output.
pub fn value_block<'t>(v: Var<'t>, jet: &Jet) -> Var<'t> {
    if jet.is_value() {
        v
    } else {
        v.row_block(0, jet.m)
    }
}

/// Exact divergence `Σ_k ∂_k v_k` (`m × 1`); needs a gradient jet.
pub fn divergence<'t>(v: Var<'t>, jet: &Jet) -> Var<'t> {
    let d = v.shape().1;
    assert!(jet.dirs.len() >= d, "divergence needs unit directions");
    let terms = vec![(0..d).map(|k| (jet.dir_block(k), k, 1.0)).collect()];
    contract(v, jet.m, terms)
}

/// `∇(∇·v)` (`m × d`); needs a Hessian jet.
pub fn grad_divergence<'t>(v: Var<'t>, jet: &Jet) -> Var<'t> {
    let d = v.shape().1;
    let terms = (0..d)
        .map(|i| {
            (0..d)
                .map(|k| {
                    let b = jet.pair_block(i, k).expect("Hessian jet");
                    (b, k, 1.0)
                })
                .collect()
        })
        .collect();
    contract(v, jet.m, terms)
}

/// `(∇v)ᵀ s` row by row: entry `k` is `Σ_i ∂_k v_i · s_i`.
pub fn jacobian_t_times<'t>(v: Var<'t>, s: Var<'t>, jet: &Jet) -> Var<'t> {
    let d = v.shape().1;
    let cols: Vec<_> = (0..d)
        .map(|k| v.row_block(jet.dir_block(k) * jet.m, jet.m).mul(s).row_sum())
        .collect();
    crate::tape::concat_cols(&cols)
}

/// Hutchinson estimate `mean_j εⱼᵀ (∇v) εⱼ` using the jet's probe directions.
pub fn hutchinson_divergence<'t>(v: Var<'t>, jet: &Jet) -> Var<'t> {
    let tape = v.tape();
    let p = jet.dirs.len();
    assert!(p > 0, "hutchinson needs probes");
    let mut acc: Option<Var<'t>> = None;
    for (j, eps) in jet.dirs.iter().enumerate() {
        let term = v
            .row_block(jet.dir_block(j) * jet.m, jet.m)
            .mul(tape.constant(eps.clone()))
            .row_sum();
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term),
        });
    }
    acc.expect("at least one probe").scale(1.0 / p as f64)
}

/// Per-row Jacobians `∂v_i/∂x_k` read from a gradient jet, as a list of
/// `d × d` matrices (no tape).
pub fn jacobians(v: &Mat, jet: &Jet) -> Vec<Array2<f64>> {
    let m = jet.m;
    let d = v.ncols();
    (0..m)
        .map(|r| {
            let mut j = Array2::zeros((d, d));
            for k in 0..d {
                let row = v.index_axis(Axis(0), jet.dir_block(k) * m + r);
                j.column_mut(k).assign(&row);
            }
            j
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use ndarray::array;

    #[test]
    fn pair_lookup_is_order_free() {
        let jet = Jet::hessian(3, 2);
        assert_eq!(jet.blocks(), 1 + 2 + 3);
        assert_eq!(jet.pair_block(0, 1), jet.pair_block(1, 0));
        assert_eq!(jet.pair_block(1, 1), Some(5));
    }

    #[test]
    fn tanh_jet_matches_scalar_derivatives() {
        // One-dimensional input through tanh: f = tanh(a x), direction 1.
        let jet = Jet::hessian(2, 1);
        let tape = Tape::new();
        let x = array![[0.3], [-1.2]];
        let a = 0.7;
        let mut stacked = Mat::zeros((6, 1));
        stacked.slice_mut(s![..2, ..]).assign(&(&x * a));
        stacked.slice_mut(s![2..4, ..]).fill(a);
        let v = tanh_jet(tape.constant(stacked), &jet);
        let out = v.value();
        for r in 0..2 {
            let t = (a * x[[r, 0]]).tanh();
            let s1 = 1.0 - t * t;
            assert!((out[[r, 0]] - t).abs() < 1e-15);
            assert!((out[[2 + r, 0]] - a * s1).abs() < 1e-15);
            assert!((out[[4 + r, 0]] - a * a * (-2.0 * t * s1)).abs() < 1e-15);
        }
    }

    #[test]
    fn tanh_jet_backward_matches_finite_differences() {
        let jet = Jet::hessian(2, 2);
        let a0 = Mat::from_shape_fn((jet.rows(), 3), |(i, j)| {
            ((i * 7 + j * 3) as f64 * 0.37).sin()
        });
        let weights = Mat::from_shape_fn(a0.dim(), |(i, j)| ((i + 2 * j) as f64 * 0.11).cos());
        let loss = |a: &Mat| {
            let t = Tape::new();
            let y = tanh_jet(t.constant(a.clone()), &jet);
            let v = y.value();
            (&*v * &weights).sum()
        };
        let tape = Tape::new();
        let av = tape.param(a0.clone());
        let y = tanh_jet(av, &jet);
        let g = tape.backward(&[(y, weights.clone())]).get_or_zeros(av);
        let h = 1e-6;
        for i in 0..a0.nrows() {
            for j in 0..a0.ncols() {
                let mut p = a0.clone();
                p[[i, j]] += h;
                let mut q = a0.clone();
                q[[i, j]] -= h;
                let fd = (loss(&p) - loss(&q)) / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-7, "({i},{j}) {fd} vs {}", g[[i, j]]);
            }
        }
    }
}
