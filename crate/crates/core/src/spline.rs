//! Cubic Hermite spline through control vectors on uniform knots.
//!
//! Knots sit at `t_i = i/(K+1)` for `i = 0..=K+1`. The tangent at a knot is
//! the derivative of the Lagrange polynomial through the (up to) five
//! nearest knots, centred where possible and shifted near the ends; with two
//! control points this is the secant. Collinear controls therefore give a
//! straight line. Every tangent is linear in the controls, so
//! `θ(t) = Σ_i w_i(t) θ_i` with weights from [`SplinePath::weights`].

use ndarray::Array1;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplinePath {
    control: Vec<Array1<f64>>,
    tangents: Vec<Array1<f64>>,
}

fn hermite(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    [
        2.0 * u3 - 3.0 * u2 + 1.0,
        u3 - 2.0 * u2 + u,
        -2.0 * u3 + 3.0 * u2,
        u3 - u2,
    ]
}

fn hermite_deriv(u: f64) -> [f64; 4] {
    let u2 = u * u;
    [
        6.0 * u2 - 6.0 * u,
        3.0 * u2 - 4.0 * u + 1.0,
        -6.0 * u2 + 6.0 * u,
        3.0 * u2 - 2.0 * u,
    ]
}

impl SplinePath {
    pub fn new(control: Vec<Array1<f64>>) -> Result<Self> {
        if control.len() < 2 {
            return Err(Error::Config(format!(
                "a spline needs at least two control points, got {}",
                control.len()
            )));
        }
        let dim = control[0].len();
        if let Some(bad) = control.iter().position(|c| c.len() != dim) {
            return Err(Error::Config(format!(
                "control point {bad} has length {}, expected {dim}",
                control[bad].len()
            )));
        }
        let mut path = Self {
            control,
            tangents: Vec::new(),
        };
        path.rebuild();
        Ok(path)
    }

    /// Interior controls on the straight line between the two ends.
    pub fn linear(theta0: &Array1<f64>, theta1: &Array1<f64>, k: usize) -> Result<Self> {
        let n = k + 2;
        let control = (0..n)
            .map(|i| {
                let t = i as f64 / (n - 1) as f64;
                if i == 0 {
                    theta0.clone()
                } else if i == n - 1 {
                    theta1.clone()
                } else {
                    theta0 * (1.0 - t) + theta1 * t
                }
            })
            .collect();
        Self::new(control)
    }

    /// Number of interior control points.
    pub fn k(&self) -> usize {
        self.control.len() - 2
    }

    pub fn len(&self) -> usize {
        self.control.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.control[0].len()
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.control.len() - 1) as f64
    }

    pub fn knot(&self, i: usize) -> f64 {
        i as f64 * self.h()
    }

    pub fn control(&self) -> &[Array1<f64>] {
        &self.control
    }

    pub fn tangents(&self) -> &[Array1<f64>] {
        &self.tangents
    }

    pub fn into_control(self) -> Vec<Array1<f64>> {
        self.control
    }

    /// Replaces the controls and recomputes tangents.
    pub fn set_control(&mut self, control: Vec<Array1<f64>>) -> Result<()> {
        *self = Self::new(control)?;
        Ok(())
    }

    pub fn control_mut(&mut self, i: usize, f: impl FnOnce(&mut Array1<f64>)) {
        f(&mut self.control[i]);
        self.rebuild();
    }

    fn rebuild(&mut self) {
        let n = self.control.len();
        self.tangents = (0..n)
            .map(|i| {
                let mut m = Array1::zeros(self.dim());
                for (j, c) in Self::tangent_coeffs(n, i) {
                    m.scaled_add(c, &self.control[j]);
                }
                m
            })
            .collect();
    }

    /// Tangent `m_i` as `Σ c_j θ_j`.
    fn tangent_coeffs(n: usize, i: usize) -> Vec<(usize, f64)> {
        let inv_h = (n - 1) as f64;
        let width = n.min(5);
        let lo = i.saturating_sub(width / 2).min(n - width);
        let nodes: Vec<usize> = (lo..lo + width).collect();
        let x = |j: usize| j as f64;
        nodes
            .iter()
            .map(|&j| {
                let denom: f64 = nodes.iter().filter(|&&k| k != j).map(|&k| x(j) - x(k)).product();
                let c = if j == i {
                    nodes.iter().filter(|&&k| k != j).map(|&k| 1.0 / (x(j) - x(k))).sum()
                } else {
                    nodes
                        .iter()
                        .filter(|&&k| k != j && k != i)
                        .map(|&k| x(i) - x(k))
                        .product::<f64>()
                        / denom
                };
                (j, c * inv_h)
            })
            .collect()
    }

    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("spline time {t} outside [0, 1]")));
        }
        let segs = self.control.len() - 1;
        let s = t * segs as f64;
        let i = (s.floor() as usize).min(segs - 1);
        Ok((i, s - i as f64))
    }

    pub fn eval(&self, t: f64) -> Result<Array1<f64>> {
        let (i, u) = self.locate(t)?;
        let h = self.h();
        let b = hermite(u);
        let mut out = &self.control[i] * b[0];
        out.scaled_add(b[1] * h, &self.tangents[i]);
        out.scaled_add(b[2], &self.control[i + 1]);
        out.scaled_add(b[3] * h, &self.tangents[i + 1]);
        Ok(out)
    }

    pub fn deriv(&self, t: f64) -> Result<Array1<f64>> {
        let (i, u) = self.locate(t)?;
        let h = self.h();
        let b = hermite_deriv(u);
        let mut out = &self.control[i] * (b[0] / h);
        out.scaled_add(b[1], &self.tangents[i]);
        out.scaled_add(b[2] / h, &self.control[i + 1]);
        out.scaled_add(b[3], &self.tangents[i + 1]);
        Ok(out)
    }

    /// Weights `w` with `eval(t) = Σ w_i control_i`.
    pub fn weights(&self, t: f64) -> Result<Vec<f64>> {
        Self::weights_for(self.control.len(), t)
    }

    /// Same as [`weights`](Self::weights) for a path with `n` controls.
    pub fn weights_for(n: usize, t: f64) -> Result<Vec<f64>> {
        if n < 2 {
            return Err(Error::Config("a spline needs at least two control points".into()));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("spline time {t} outside [0, 1]")));
        }
        let segs = n - 1;
        let h = 1.0 / segs as f64;
        let s = t * segs as f64;
        let i = (s.floor() as usize).min(segs - 1);
        let b = hermite(s - i as f64);
        let mut w = vec![0.0; n];
        w[i] += b[0];
        w[i + 1] += b[2];
        for (j, c) in Self::tangent_coeffs(n, i) {
            w[j] += b[1] * h * c;
        }
        for (j, c) in Self::tangent_coeffs(n, i + 1) {
            w[j] += b[3] * h * c;
        }
        Ok(w)
    }

    /// Evaluates from weights (used to cross-check [`eval`](Self::eval)).
    pub fn combine(&self, w: &[f64]) -> Array1<f64> {
        let mut out = Array1::zeros(self.dim());
        for (c, wi) in self.control.iter().zip(w) {
            if *wi != 0.0 {
                out.scaled_add(*wi, c);
            }
        }
        out
    }
}
