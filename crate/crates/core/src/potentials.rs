//! Obstacle, congestion and opinion-drift terms as fused tape operations.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::tape::{CustomOp, Mat, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub height: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub height: f64,
}

/// Analytic external potential `V(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Obstacle {
    /// `Σ h·exp(−‖x − c‖² / 2r²)`.
    GaussianMixture { bumps: Vec<Bump> },
    /// `Σ h·Π_j sig((x_j − a_j)/s)·sig((b_j − x_j)/s)`.
    SmoothedBoxes { boxes: Vec<SoftBox>, softness: f64 },
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

impl Obstacle {
    pub fn value(&self, x: ArrayView1<f64>) -> f64 {
        self.value_grad(x, false).0
    }

    pub fn grad(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.value_grad(x, true).1
    }

    pub fn value_grad(&self, x: ArrayView1<f64>, want_grad: bool) -> (f64, Array1<f64>) {
        let d = x.len();
        let mut g = Array1::zeros(if want_grad { d } else { 0 });
        let mut v = 0.0;
        match self {
            Obstacle::GaussianMixture { bumps } => {
                for b in bumps {
                    let r2 = b.radius * b.radius;
                    let mut dist2 = 0.0;
                    for j in 0..d {
                        let dx = x[j] - b.center[j];
                        dist2 += dx * dx;
                    }
                    let e = b.height * (-dist2 / (2.0 * r2)).exp();
                    v += e;
                    if want_grad {
                        for j in 0..d {
                            g[j] -= e * (x[j] - b.center[j]) / r2;
                        }
                    }
                }
            }
            Obstacle::SmoothedBoxes { boxes, softness } => {
                let s = *softness;
                for bx in boxes {
                    // factors f_j = sig(u) sig(w); d log f_j / dx_j = ((1−sig(u)) − (1−sig(w)))/s
                    let mut prod = bx.height;
                    let mut dlog = vec![0.0; d];
                    for j in 0..d {
                        let su = sigmoid((x[j] - bx.lo[j]) / s);
                        let sw = sigmoid((bx.hi[j] - x[j]) / s);
                        prod *= su * sw;
                        dlog[j] = ((1.0 - su) - (1.0 - sw)) / s;
                    }
                    v += prod;
                    if want_grad {
                        for j in 0..d {
                            g[j] += prod * dlog[j];
                        }
                    }
                }
            }
        }
        (v, g)
    }

    /// Height of the tallest single bump or box, evaluated at its centre.
    pub fn peak(&self) -> f64 {
        match self {
            Obstacle::GaussianMixture { bumps } => {
                bumps.iter().map(|b| b.height).fold(0.0, f64::max)
            }
            Obstacle::SmoothedBoxes { boxes, softness } => boxes
                .iter()
                .map(|b| {
                    let centre: Array1<f64> =
                        b.lo.iter().zip(&b.hi).map(|(l, h)| 0.5 * (l + h)).collect();
                    let single = Obstacle::SmoothedBoxes {
                        boxes: vec![b.clone()],
                        softness: *softness,
                    };
                    single.value(centre.view())
                })
                .fold(0.0, f64::max),
        }
    }
}

/// Sum of several obstacles evaluated row by row.
pub fn obstacle_values(obstacles: &[Obstacle], x: &Array2<f64>) -> Array1<f64> {
    x.map_axis(Axis(1), |r| obstacles.iter().map(|o| o.value(r)).sum())
}

struct MeanPotential {
    grad: Mat,
}

impl CustomOp for MeanPotential {
    fn name(&self) -> &'static str {
        "mean_potential"
    }
    fn backward(&self, _: &[&Mat], _: &Mat, g: &Mat) -> Vec<Option<Mat>> {
        vec![Some(&self.grad * g[[0, 0]])]
    }
}

/// `mean_i Σ_o V_o(x_i)` as a `1 × 1` node.
pub fn mean_potential<'t>(x: Var<'t>, obstacles: &[Obstacle]) -> Var<'t> {
    let (value, grad) = {
        let xv = x.value();
        let m = xv.nrows();
        let mut total = 0.0;
        let mut grad = Mat::zeros(xv.dim());
        for (i, row) in xv.rows().into_iter().enumerate() {
            for o in obstacles {
                let (v, g) = o.value_grad(row, true);
                total += v;
                let mut gr = grad.row_mut(i);
                gr.scaled_add(1.0 / m as f64, &g);
            }
        }
        (total / m as f64, grad)
    };
    x.tape().custom(
        &[x],
        Mat::from_elem((1, 1), value),
        Box::new(MeanPotential { grad }),
    )
}

struct Congestion {
    eps: f64,
}

/// Pairwise mean over `i ≠ j` of `2 / (‖x_i − x_j‖² + ε)`.
pub fn congestion_value(x: &Mat, eps: f64) -> f64 {
    let m = x.nrows();
    if m < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..m {
        let xi = x.row(i);
        let mut row = 0.0;
        for j in (i + 1)..m {
            let xj = x.row(j);
            let r2: f64 = xi.iter().zip(xj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            row += 2.0 / (r2 + eps);
        }
        total += row;
    }
    2.0 * total / (m * (m - 1)) as f64
}

impl CustomOp for Congestion {
    fn name(&self) -> &'static str {
        "congestion"
    }
    fn backward(&self, inputs: &[&Mat], _: &Mat, g: &Mat) -> Vec<Option<Mat>> {
        let x = inputs[0];
        let (m, d) = x.dim();
        let mut gx = Mat::zeros((m, d));
        if m < 2 {
            return vec![Some(gx)];
        }
        let c = -8.0 / (m * (m - 1)) as f64 * g[[0, 0]];
        let mut diff = vec![0.0; d];
        for i in 0..m {
            for j in (i + 1)..m {
                let mut r2 = 0.0;
                for k in 0..d {
                    diff[k] = x[[i, k]] - x[[j, k]];
                    r2 += diff[k] * diff[k];
                }
                let q = r2 + self.eps;
                let f = c / (q * q);
                for k in 0..d {
                    gx[[i, k]] += f * diff[k];
                    gx[[j, k]] -= f * diff[k];
                }
            }
        }
        vec![Some(gx)]
    }
}

pub fn congestion<'t>(x: Var<'t>, eps: f64) -> Var<'t> {
    let v = congestion_value(&x.value(), eps);
    x.tape()
        .custom(&[x], Mat::from_elem((1, 1), v), Box::new(Congestion { eps }))
}

/// `sign` with `sign(0) = +1`.
pub fn alignment_sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

struct PolarizeDrift {
    signs: Array1<f64>,
    /// Which rows contributed `ȳ` (nonzero norm).
    used: Vec<bool>,
    count: f64,
    g: Array1<f64>,
    normalize: bool,
}

/// Opinion drift `f(x_i) = mean_y a(x_i, y, ξ) ȳ` over the batch itself.
///
/// With `a = sign⟨x,ξ⟩·sign⟨y,ξ⟩` this is `s_i · g` where
/// `g = mean_y sign⟨y,ξ⟩ ȳ`. Rows with zero norm are left out of the mean.
pub fn polarize_drift<'t>(x: Var<'t>, xi: &Array1<f64>, normalize: bool) -> Var<'t> {
    let xv = x.value().clone();
    let (m, d) = xv.dim();
    let signs: Array1<f64> = xv.map_axis(Axis(1), |r| alignment_sign(r.dot(xi)));
    let mut g = Array1::zeros(d);
    let mut used = vec![false; m];
    let mut count = 0.0;
    for (i, row) in xv.rows().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            log::warn!("skipping zero-norm sample {i} in opinion drift");
            continue;
        }
        used[i] = true;
        count += 1.0;
        g.scaled_add(signs[i] / norm, &row);
    }
    if count > 0.0 {
        g /= count;
    }
    let dir = if normalize {
        let n = g.dot(&g).sqrt();
        if n > 0.0 {
            &g / n
        } else {
            g.clone()
        }
    } else {
        g.clone()
    };
    let mut out = Mat::zeros((m, d));
    for i in 0..m {
        out.row_mut(i).assign(&(&dir * signs[i]));
    }
    drop(xv);
    x.tape().custom(
        &[x],
        out,
        Box::new(PolarizeDrift {
            signs,
            used,
            count,
            g,
            normalize,
        }),
    )
}

impl CustomOp for PolarizeDrift {
    fn name(&self) -> &'static str {
        "polarize_drift"
    }
    fn backward(&self, inputs: &[&Mat], _: &Mat, gout: &Mat) -> Vec<Option<Mat>> {
        let x = inputs[0];
        let (m, d) = x.dim();
        // Signs are piecewise constant, so only g carries a derivative.
        let mut gdir = Array1::<f64>::zeros(d);
        for i in 0..m {
            gdir.scaled_add(self.signs[i], &gout.row(i));
        }
        let gg = if self.normalize {
            let n = self.g.dot(&self.g).sqrt();
            if n > 0.0 {
                let u = &self.g / n;
                (&gdir - &(&u * u.dot(&gdir))) / n
            } else {
                gdir
            }
        } else {
            gdir
        };
        let mut gx = Mat::zeros((m, d));
        if self.count > 0.0 {
            for i in 0..m {
                if !self.used[i] {
                    continue;
                }
                let y = x.row(i);
                let norm = y.dot(&y).sqrt();
                let ybar = &y / norm;
                let proj = &gg - &(&ybar * ybar.dot(&gg));
                gx.row_mut(i)
                    .assign(&(proj * (self.signs[i] / (self.count * norm))));
            }
        }
        vec![Some(gx)]
    }
}
