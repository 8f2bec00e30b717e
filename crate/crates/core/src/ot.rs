//! Wasserstein-2 estimates between sample clouds and Gaussian closed forms.

use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum W2Method {
    Exact,
    Entropic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct W2Report {
    pub value: f64,
    pub n_samples: usize,
    pub method: W2Method,
    pub runtime_secs: f64,
}

/// Largest cloud size solved by exact assignment.
pub const EXACT_LIMIT: usize = 1024;

fn sq_cost(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let m = y.nrows();
    let mut c = Array2::zeros((n, m));
    for i in 0..n {
        let xi = x.row(i);
        for j in 0..m {
            let yj = y.row(j);
            let mut s = 0.0;
            for k in 0..xi.len() {
                let d = xi[k] - yj[k];
                s += d * d;
            }
            c[[i, j]] = s;
        }
    }
    c
}

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Shortest augmenting paths with potentials, `O(n³)`. Returns the column
/// assigned to each row.
pub fn assignment(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "assignment needs a square cost matrix");
    // 1-based arrays with a virtual column 0.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            let row = cost.row(i0 - 1);
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

fn logsumexp(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn with ε annealed down to `eps_final`; returns the
/// transport cost `Σ P_ij C_ij` for uniform marginals.
pub fn sinkhorn_cost(cost: &Array2<f64>, eps_final: f64) -> f64 {
    let (n, m) = cost.dim();
    let la = -(n as f64).ln();
    let lb = -(m as f64).ln();
    let mut f = Array1::<f64>::zeros(n);
    let mut g = Array1::<f64>::zeros(m);
    let cmax = cost.iter().cloned().fold(0.0, f64::max).max(eps_final);
    let mut eps = cmax;
    loop {
        let iters = if eps <= eps_final { 200 } else { 20 };
        for _ in 0..iters {
            for i in 0..n {
                let row = cost.row(i);
                f[i] = -eps * (logsumexp((0..m).map(|j| (g[j] - row[j]) / eps + lb)));
            }
            for j in 0..m {
                let col = cost.column(j);
                g[j] = -eps * (logsumexp((0..n).map(|i| (f[i] - col[i]) / eps + la)));
            }
        }
        if eps <= eps_final {
            break;
        }
        eps = (eps * 0.5).max(eps_final);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let lp = (f[i] + g[j] - cost[[i, j]]) / eps + la + lb;
            total += lp.exp() * cost[[i, j]];
        }
    }
    total
}

/// Empirical W2 between two clouds (the larger one is truncated).
pub fn empirical_w2(x: &Array2<f64>, y: &Array2<f64>) -> Result<W2Report> {
    let start = Instant::now();
    let n = x.nrows().min(y.nrows());
    if n == 0 {
        return Err(Error::Domain("empirical W2 needs at least one sample".into()));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::Shape(format!(
            "clouds have dimensions {} and {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let xs = x.slice(ndarray::s![..n, ..]);
    let ys = y.slice(ndarray::s![..n, ..]);
    let cost = sq_cost(xs, ys);
    let (w2sq, method) = if n <= EXACT_LIMIT {
        let a = assignment(&cost);
        let s: f64 = a.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
        (s / n as f64, W2Method::Exact)
    } else {
        let mut sorted: Vec<f64> = cost.iter().cloned().collect();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median = sorted[sorted.len() / 2];
        (sinkhorn_cost(&cost, 1e-3 * median.max(1e-12)), W2Method::Entropic)
    };
    Ok(W2Report {
        value: w2sq.max(0.0).sqrt(),
        n_samples: n,
        method,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// Mean squared distance between rows paired by index (an upper bound on W2²).
pub fn coupling_cost(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let d = x - y;
    d.iter().map(|v| v * v).sum::<f64>() / x.nrows() as f64
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn spd_eigen(s: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !s.is_square() {
        return Err(Error::Domain(format!("{what} is not square")));
    }
    let asym = (s - s.transpose()).abs().max();
    if asym > 1e-9 * s.abs().max().max(1.0) {
        return Err(Error::Domain(format!("{what} is not symmetric")));
    }
    let e = SymmetricEigen::new(s.clone());
    if e.eigenvalues.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
        return Err(Error::Domain(format!("{what} is not positive definite")));
    }
    Ok(e)
}

fn spd_power(s: &DMatrix<f64>, p: f64, what: &str) -> Result<DMatrix<f64>> {
    let e = spd_eigen(s, what)?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|l| l.powf(p)));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Bures–Wasserstein distance between two Gaussians.
pub fn gaussian_w2(m1: &Array1<f64>, s1: &Array2<f64>, m2: &Array1<f64>, s2: &Array2<f64>) -> Result<f64> {
    let a = to_na(s1);
    let b = to_na(s2);
    spd_eigen(&a, "Σ₁")?;
    let rb = spd_power(&b, 0.5, "Σ₂")?;
    let inner = symmetrize(&rb * &a * &rb);
    let cross = spd_power(&inner, 0.5, "Σ₂^½Σ₁Σ₂^½")?;
    let dm = m1 - m2;
    let w2 = dm.dot(&dm) + (a.trace() + b.trace() - 2.0 * cross.trace());
    Ok(w2.max(0.0).sqrt())
}

/// Linear map `C` with `C Σ₁ C = Σ₂` (the Monge map between centred Gaussians).
pub fn monge_matrix(s1: &Array2<f64>, s2: &Array2<f64>) -> Result<Array2<f64>> {
    let a = to_na(s1);
    let b = to_na(s2);
    spd_eigen(&b, "Σ₂")?;
    let ra = spd_power(&a, 0.5, "Σ₁")?;
    let ria = spd_power(&a, -0.5, "Σ₁")?;
    let inner = symmetrize(&ra * &b * &ra);
    let mid = spd_power(&inner, 0.5, "Σ₁^½Σ₂Σ₁^½")?;
    Ok(from_na(&symmetrize(&ria * mid * &ria)))
}

/// McCann interpolant between two Gaussians at time `t`.
pub fn gaussian_geodesic(
    m1: &Array1<f64>,
    s1: &Array2<f64>,
    m2: &Array1<f64>,
    s2: &Array2<f64>,
    t: f64,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("geodesic time {t} outside [0, 1]")));
    }
    let c = monge_matrix(s1, s2)?;
    let d = m1.len();
    let a = Array2::<f64>::eye(d) * (1.0 - t) + &c * t;
    let st = a.dot(s1).dot(&a.t());
    let st = (&st + &st.t()) * 0.5;
    Ok((m1 * (1.0 - t) + m2 * t, st))
}

/// Where a point `z` drawn from `N(m1, Σ1)` sits at time `t` along the
/// Gaussian geodesic.
pub fn geodesic_map(
    m1: &Array1<f64>,
    s1: &Array2<f64>,
    m2: &Array1<f64>,
    s2: &Array2<f64>,
    t: f64,
    points: &Array2<f64>,
) -> Result<Array2<f64>> {
    let c = monge_matrix(s1, s2)?;
    let d = m1.len();
    let a = Array2::<f64>::eye(d) * (1.0 - t) + &c * t;
    let centred = points - m1;
    let mt = m1 * (1.0 - t) + m2 * t;
    Ok(centred.dot(&a.t()) + &mt)
}

/// Sample mean and covariance of a cloud.
pub fn moments(x: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = x.nrows() as f64;
    let mean = x.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let c = x - &mean;
    let cov = c.t().dot(&c) / (n - 1.0).max(1.0);
    (mean, cov)
}

/// Variance of the Gaussian Schrödinger bridge between `N(·, a²)` and
/// `N(·, b²)` with diffusion `σ` in one dimension, at time `t`.
pub fn bridge_variance_1d(a: f64, b: f64, sigma: f64, t: f64) -> f64 {
    let s2 = sigma * sigma;
    let c = 0.5 * ((4.0 * a * a * b * b + s2 * s2).sqrt() - s2);
    (1.0 - t).powi(2) * a * a + t * t * b * b + t * (1.0 - t) * (2.0 * c + s2)
}

/// Mean and variance at time `t` of the 1D Schrödinger bridge between two
/// Gaussians, solved by Sinkhorn on a uniform grid with the heat kernel.
pub fn discrete_bridge_moments_1d(
    (ma, a): (f64, f64),
    (mb, b): (f64, f64),
    sigma: f64,
    t: f64,
    grid: usize,
) -> (f64, f64) {
    let lo = ma.min(mb) - 7.0 * a.max(b) - 3.0 * sigma;
    let hi = ma.max(mb) + 7.0 * a.max(b) + 3.0 * sigma;
    let dx = (hi - lo) / (grid - 1) as f64;
    let xs: Vec<f64> = (0..grid).map(|i| lo + i as f64 * dx).collect();
    let logn = |x: f64, m: f64, s: f64| -0.5 * ((x - m) / s).powi(2) - s.ln();
    let norm = |v: Vec<f64>| {
        let l = logsumexp(v.iter().cloned());
        v.into_iter().map(|x| x - l).collect::<Vec<_>>()
    };
    let la = norm(xs.iter().map(|&x| logn(x, ma, a)).collect());
    let lb = norm(xs.iter().map(|&x| logn(x, mb, b)).collect());
    let s2 = sigma * sigma;
    let lk = |x: f64, y: f64, tau: f64| -(x - y).powi(2) / (2.0 * s2 * tau);
    // Static problem: π ∝ exp(f(x) + g(y)) K₁(x, y).
    let mut f = vec![0.0; grid];
    let mut g = vec![0.0; grid];
    for _ in 0..2000 {
        for i in 0..grid {
            f[i] = la[i] - logsumexp((0..grid).map(|j| g[j] + lk(xs[i], xs[j], 1.0)));
        }
        for j in 0..grid {
            g[j] = lb[j] - logsumexp((0..grid).map(|i| f[i] + lk(xs[i], xs[j], 1.0)));
        }
    }
    // Marginal at t: ρ_t(z) ∝ Σ_x e^{f(x)} K_t(x, z) · Σ_y K_{1−t}(z, y) e^{g(y)}.
    let lr: Vec<f64> = xs
        .iter()
        .map(|&z| {
            let fwd = if t == 0.0 {
                f[((z - lo) / dx).round() as usize]
            } else {
                logsumexp((0..grid).map(|i| f[i] + lk(xs[i], z, t) - 0.5 * (t).ln()))
            };
            let bwd = if t == 1.0 {
                g[((z - lo) / dx).round() as usize]
            } else {
                logsumexp((0..grid).map(|j| g[j] + lk(z, xs[j], 1.0 - t) - 0.5 * (1.0 - t).ln()))
            };
            fwd + bwd
        })
        .collect();
    let lr = norm(lr);
    let mean: f64 = xs.iter().zip(&lr).map(|(x, l)| x * l.exp()).sum();
    let var: f64 = xs.iter().zip(&lr).map(|(x, l)| (x - mean).powi(2) * l.exp()).sum();
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn assignment_beats_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let c = Array2::from_shape_fn((5, 5), |_| rng.random_range(0.0..10.0));
            let a = assignment(&c);
            let got: f64 = a.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
            let mut best = f64::INFINITY;
            let mut perm: Vec<usize> = (0..5).collect();
            permute(&mut perm, 0, &mut |p| {
                let s: f64 = p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
                best = best.min(s);
            });
            assert!((got - best).abs() < 1e-9);
        }
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn identical_clouds_and_point_masses() {
        let x = normal(50, 2, 1);
        assert_eq!(empirical_w2(&x, &x).unwrap().value, 0.0);
        let a = array![[0.0, 0.0]];
        let b = array![[3.0, 4.0]];
        assert!((empirical_w2(&a, &b).unwrap().value - 5.0).abs() < 1e-12);
        assert!(empirical_w2(&Array2::zeros((0, 2)), &a).is_err());
    }

    #[test]
    fn shifted_gaussian_clouds() {
        let x = normal(1000, 2, 1);
        let mut y = normal(1000, 2, 2);
        y.column_mut(0).mapv_inplace(|v| v + 3.0);
        let r = empirical_w2(&x, &y).unwrap();
        assert_eq!(r.method, W2Method::Exact);
        assert!((r.value - 3.0).abs() < 0.05 * 3.0, "{}", r.value);
    }

    #[test]
    fn triangle_and_symmetry() {
        let x = normal(60, 2, 1);
        let y = normal(60, 2, 2) + 1.0;
        let z = normal(60, 2, 3) * 2.0;
        let d = |a: &Array2<f64>, b: &Array2<f64>| empirical_w2(a, b).unwrap().value;
        assert!((d(&x, &y) - d(&y, &x)).abs() < 1e-12);
        assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-9);
    }

    #[test]
    fn entropic_matches_exact_on_moderate_clouds() {
        let x = normal(200, 2, 5);
        let y = normal(200, 2, 6) + 1.0;
        let c = sq_cost(x.view(), y.view());
        let a = assignment(&c);
        let exact: f64 = a.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum::<f64>() / 200.0;
        let mut s: Vec<f64> = c.iter().cloned().collect();
        s.sort_by(|a, b| a.total_cmp(b));
        let ent = sinkhorn_cost(&c, 1e-3 * s[s.len() / 2]);
        assert!((ent - exact).abs() < 0.02 * exact, "{ent} vs {exact}");
    }

    #[test]
    fn gaussian_w2_examples() {
        let z = array![0.0, 0.0];
        let i2 = Array2::<f64>::eye(2);
        assert!(gaussian_w2(&z, &i2, &z, &i2).unwrap().abs() < 1e-12);
        let m = array![3.0, 4.0];
        assert!((gaussian_w2(&z, &i2, &m, &i2).unwrap() - 5.0).abs() < 1e-12);
        let w = gaussian_w2(&z, &(&i2 * 4.0), &z, &i2).unwrap();
        assert!((w - 2f64.sqrt()).abs() < 1e-12);
        assert!(gaussian_w2(&z, &array![[1.0, 2.0], [2.0, 1.0]], &z, &i2).is_err());
    }

    #[test]
    fn geodesic_endpoints_and_speed() {
        let m1 = array![0.0, 1.0];
        let m2 = array![2.0, -1.0];
        let s1 = array![[1.0, 0.3], [0.3, 0.5]];
        let s2 = array![[2.0, -0.4], [-0.4, 1.5]];
        let (a, sa) = gaussian_geodesic(&m1, &s1, &m2, &s2, 0.0).unwrap();
        let (b, sb) = gaussian_geodesic(&m1, &s1, &m2, &s2, 1.0).unwrap();
        assert!((&a - &m1).iter().all(|v| v.abs() < 1e-12));
        assert!((&sa - &s1).iter().all(|v| v.abs() < 1e-10));
        assert!((&b - &m2).iter().all(|v| v.abs() < 1e-12));
        assert!((&sb - &s2).iter().all(|v| v.abs() < 1e-10));
        let total = gaussian_w2(&m1, &s1, &m2, &s2).unwrap();
        for (s, t) in [(0.1, 0.4), (0.25, 0.9), (0.0, 0.5)] {
            let (ms, ss) = gaussian_geodesic(&m1, &s1, &m2, &s2, s).unwrap();
            let (mt, st) = gaussian_geodesic(&m1, &s1, &m2, &s2, t).unwrap();
            let w = gaussian_w2(&ms, &ss, &mt, &st).unwrap();
            assert!((w - (t - s) * total).abs() < 1e-8, "{w} vs {}", (t - s) * total);
        }
    }

    #[test]
    fn one_dimensional_geodesic() {
        let (_, s) = gaussian_geodesic(&array![0.0], &array![[1.0]], &array![0.0], &array![[4.0]], 0.3).unwrap();
        assert!((s[[0, 0]].sqrt() - 1.3).abs() < 1e-12);
    }

    #[test]
    fn equal_covariance_geodesic_is_a_shift() {
        let s = array![[1.0, 0.2], [0.2, 0.7]];
        let (m, st) = gaussian_geodesic(&array![0.0, 0.0], &s, &array![4.0, 0.0], &s, 0.25).unwrap();
        assert!((m[0] - 1.0).abs() < 1e-12);
        assert!((&st - &s).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn discrete_bridge_matches_closed_form() {
        let (a, b, sigma) = (1.0, 2.0, 1.0);
        for t in [0.0, 0.5, 1.0] {
            let (m, v) = discrete_bridge_moments_1d((0.0, a), (1.0, b), sigma, t, 161);
            assert!((m - t).abs() < 1e-2, "mean {m} at {t}");
            let want = bridge_variance_1d(a, b, sigma, t);
            assert!((v - want).abs() < 1e-2 * want, "var {v} vs {want} at {t}");
        }
    }
}
