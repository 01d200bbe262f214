//! Kernel statistics: HSIC, MMD, and kernel ridge regression scores.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `exp(−d² / (2σ²))`.
#[inline]
pub(crate) fn gaussian_kernel(d2: f64, sigma2: f64) -> f64 {
    math::exp(-d2 / (2.0 * sigma2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum KernelFamily {
    Gaussian(Bandwidth),
    /// `k(s, s') = 1[s = s']`, for discrete surrogates.
    Delta,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct KernelConfig {
    pub x: KernelFamily,
    pub y: KernelFamily,
    /// Ridge added to the Gram diagonal in kernel ridge regression.
    pub ridge: f64,
    /// Fraction of rows used for fitting in kernel ridge regression.
    pub train_fraction: f64,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            x: KernelFamily::Gaussian(Bandwidth::Median),
            y: KernelFamily::Gaussian(Bandwidth::Median),
            ridge: 1e-3,
            train_fraction: 0.8,
        }
    }
}

impl KernelConfig {
    /// Gaussian on the continuous side, delta on a discrete surrogate.
    pub fn with_discrete_y() -> Self {
        Self {
            y: KernelFamily::Delta,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for fam in [self.x, self.y] {
            if let KernelFamily::Gaussian(Bandwidth::Fixed(s)) = fam {
                if !(s > 0.0) {
                    return Err(Error::InvalidParameter(format!("bandwidth must be > 0, got {s}")));
                }
            }
        }
        if !(self.ridge > 0.0) {
            return Err(Error::InvalidParameter(format!("ridge must be > 0, got {}", self.ridge)));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "train fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

/// σ² = median pairwise squared distance / 2, for `k = exp(−‖x−y‖²/(2σ²))`.
pub fn median_heuristic(x: &Tensor) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::Contract(format!("median heuristic needs at least 2 rows, got {n}")));
    }
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(sq_dist(x.row(i), x.row(j)));
        }
    }
    let med = math::median(&mut d);
    if !(med > 0.0) {
        return Err(Error::Degenerate(format!(
            "median pairwise distance is zero; bandwidth undefined"
        )));
    }
    Ok(med / 2.0)
}

fn gram(x: &Tensor, family: KernelFamily) -> Result<Tensor> {
    let n = x.rows();
    let mut k = Tensor::zeros(n, n);
    match family {
        KernelFamily::Delta => {
            for i in 0..n {
                for j in 0..n {
                    let same = x.row(i) == x.row(j);
                    k.data_mut()[i * n + j] = if same { 1.0 } else { 0.0 };
                }
            }
        }
        KernelFamily::Gaussian(bw) => {
            let sigma2 = match bw {
                // A constant sample has an all-ones Gram for any bandwidth.
                Bandwidth::Median if (1..n).all(|i| x.row(i) == x.row(0)) => 1.0,
                Bandwidth::Median => median_heuristic(x)?,
                Bandwidth::Fixed(s) => s,
            };
            for i in 0..n {
                for j in i..n {
                    let v = gaussian_kernel(sq_dist(x.row(i), x.row(j)), sigma2);
                    k.data_mut()[i * n + j] = v;
                    k.data_mut()[j * n + i] = v;
                }
            }
        }
    }
    Ok(k)
}

/// `H K H` for the centering matrix `H = I − 11ᵀ/n`.
pub(crate) fn double_center(k: &Tensor) -> Tensor {
    let n = k.rows();
    let rm: Vec<f64> = (0..n).map(|i| k.row(i).iter().sum::<f64>() / n as f64).collect();
    let grand = rm.iter().sum::<f64>() / n as f64;
    // K is symmetric, so column means equal row means.
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.data_mut()[i * n + j] = k.get(i, j) - rm[i] - rm[j] + grand;
        }
    }
    out
}

/// `HLH / (n−1)²` for a discrete surrogate with the delta kernel. This is
/// the fixed matrix the HSIC regularizer contracts against.
pub fn centered_delta_gram(s: &[f64]) -> Tensor {
    let n = s.len();
    let mut l = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if s[i] == s[j] {
                l.data_mut()[i * n + j] = 1.0;
            }
        }
    }
    let denom = ((n.max(2) - 1) * (n.max(2) - 1)) as f64;
    double_center(&l).scale(1.0 / denom)
}

fn check_pair(op: &str, x: &Tensor, y: &Tensor, min: usize) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::Shape {
            op: "hsic",
            detail: format!("{op}: {} vs {} rows", x.rows(), y.rows()),
        });
    }
    if x.rows() < min {
        return Err(Error::Contract(format!("{op} needs at least {min} rows, got {}", x.rows())));
    }
    Ok(())
}

/// Biased HSIC: `tr(K H L H) / (n−1)²`.
pub fn hsic_biased(x: &Tensor, y: &Tensor, cfg: &KernelConfig) -> Result<f64> {
    check_pair("hsic_biased", x, y, 4)?;
    // Centering the surrogate side makes a constant `y` give exactly zero.
    let k = gram(x, cfg.x)?;
    let lc = double_center(&gram(y, cfg.y)?);
    let n = x.rows();
    let s: f64 = k.data().iter().zip(lc.data()).map(|(a, b)| a * b).sum();
    Ok((s / ((n - 1) * (n - 1)) as f64).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PermutationTest {
    pub statistic: f64,
    /// `(1 + #{null ≥ statistic}) / (1 + permutations)`.
    pub p_value: f64,
    pub null_q95: f64,
    pub null_q99: f64,
}

impl PermutationTest {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }

    fn from_null(statistic: f64, mut null: Vec<f64>) -> Self {
        let exceed = null.iter().filter(|&&v| v >= statistic).count();
        let p_value = (1 + exceed) as f64 / (1 + null.len()) as f64;
        null.sort_by(f64::total_cmp);
        let q = |p: f64| {
            let idx = ((null.len() as f64 * p) as usize).min(null.len() - 1);
            null[idx]
        };
        Self {
            statistic,
            p_value,
            null_q95: q(0.95),
            null_q99: q(0.99),
        }
    }
}

/// HSIC permutation test: the null is built by permuting `y`'s rows.
pub fn hsic_permutation_test<R: Rng + ?Sized>(
    x: &Tensor,
    y: &Tensor,
    cfg: &KernelConfig,
    permutations: usize,
    rng: &mut R,
) -> Result<PermutationTest> {
    check_pair("hsic_permutation_test", x, y, 4)?;
    if permutations == 0 {
        return Err(Error::InvalidParameter(format!("need at least one permutation")));
    }
    let n = x.rows();
    let kc = double_center(&gram(x, cfg.x)?);
    let l = gram(y, cfg.y)?;
    let denom = ((n - 1) * (n - 1)) as f64;
    let stat_for = |perm: &[usize]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            let pi = perm[i];
            let krow = kc.row(i);
            let lrow = l.row(pi);
            for j in 0..n {
                s += krow[j] * lrow[perm[j]];
            }
        }
        (s / denom).max(0.0)
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let statistic = stat_for(&perm);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        perm.shuffle(rng);
        null.push(stat_for(&perm));
    }
    Ok(PermutationTest::from_null(statistic, null))
}

pub(crate) fn mmd2_value(x: &Tensor, y: &Tensor, sigma2: f64) -> f64 {
    let mean_k = |a: &Tensor, b: &Tensor| {
        let mut s = 0.0;
        for i in 0..a.rows() {
            for j in 0..b.rows() {
                s += gaussian_kernel(sq_dist(a.row(i), b.row(j)), sigma2);
            }
        }
        s / (a.rows() * b.rows()) as f64
    };
    mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y)
}

pub(crate) fn mmd2_grad(x: &Tensor, y: &Tensor, sigma2: f64, upstream: f64) -> (Vec<f64>, Vec<f64>) {
    let (n, m, d) = (x.rows() as f64, y.rows() as f64, x.cols());
    let mut gx = vec![0.0; x.len()];
    let mut gy = vec![0.0; y.len()];
    // d k(a,b)/da = −k (a − b)/σ²
    let pair = |a: &Tensor, i: usize, b: &Tensor, j: usize, w: f64, ga: &mut [f64]| {
        let (ai, bj) = (a.row(i), b.row(j));
        let k = gaussian_kernel(sq_dist(ai, bj), sigma2);
        let coef = -w * upstream * k / sigma2;
        for c in 0..d {
            ga[i * d + c] += coef * (ai[c] - bj[c]);
        }
    };
    for i in 0..x.rows() {
        for j in 0..x.rows() {
            pair(x, i, x, j, 2.0 / (n * n), &mut gx);
        }
        for j in 0..y.rows() {
            pair(x, i, y, j, -2.0 / (n * m), &mut gx);
        }
    }
    for j in 0..y.rows() {
        for l in 0..y.rows() {
            pair(y, j, y, l, 2.0 / (m * m), &mut gy);
        }
        for i in 0..x.rows() {
            pair(y, j, x, i, -2.0 / (n * m), &mut gy);
        }
    }
    (gx, gy)
}

/// Median-heuristic bandwidth over the pooled rows of `x` and `y`.
pub fn pooled_bandwidth(x: &Tensor, y: &Tensor) -> Result<f64> {
    median_heuristic(&Tensor::vcat(&[x, y])?)
}

/// Biased (V-statistic) squared MMD with a shared bandwidth.
pub fn mmd2_biased(x: &Tensor, y: &Tensor, cfg: &KernelConfig) -> Result<f64> {
    if x.rows() < 2 || y.rows() < 2 {
        return Err(Error::Contract(format!(
            "mmd2 needs at least 2 rows per sample, got {} and {}",
            x.rows(),
            y.rows()
        )));
    }
    if x.cols() != y.cols() {
        return Err(Error::Shape {
            op: "mmd2_biased",
            detail: format!("{} vs {} columns", x.cols(), y.cols()),
        });
    }
    let sigma2 = match cfg.x {
        KernelFamily::Gaussian(Bandwidth::Fixed(s)) => s,
        _ => pooled_bandwidth(x, y)?,
    };
    Ok(mmd2_value(x, y, sigma2).max(0.0))
}

/// Two-sample permutation test on the biased MMD².
pub fn mmd_permutation_test<R: Rng + ?Sized>(
    x: &Tensor,
    y: &Tensor,
    permutations: usize,
    rng: &mut R,
) -> Result<PermutationTest> {
    let pooled = Tensor::vcat(&[x, y])?;
    let sigma2 = median_heuristic(&pooled)?;
    let total = pooled.rows();
    let nx = x.rows();
    let mut k = Tensor::zeros(total, total);
    for i in 0..total {
        for j in i..total {
            let v = gaussian_kernel(sq_dist(pooled.row(i), pooled.row(j)), sigma2);
            k.data_mut()[i * total + j] = v;
            k.data_mut()[j * total + i] = v;
        }
    }
    let stat_for = |idx: &[usize]| -> f64 {
        let (a, b) = idx.split_at(nx);
        let mean_block = |p: &[usize], q: &[usize]| {
            let mut s = 0.0;
            for &i in p {
                let row = k.row(i);
                for &j in q {
                    s += row[j];
                }
            }
            s / (p.len() * q.len()) as f64
        };
        (mean_block(a, a) + mean_block(b, b) - 2.0 * mean_block(a, b)).max(0.0)
    };
    let mut idx: Vec<usize> = (0..total).collect();
    let statistic = stat_for(&idx);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        idx.shuffle(rng);
        null.push(stat_for(&idx));
    }
    Ok(PermutationTest::from_null(statistic, null))
}

fn standardize_with(x: &Tensor, means: &[f64], stds: &[f64]) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let s = if stds[i % c] > 0.0 { stds[i % c] } else { 1.0 };
        *v = (*v - means[i % c]) / s;
    }
    out
}

/// Held-out R² of Gaussian-kernel ridge regression predicting `target` from
/// `input`, averaged over target columns. `train`/`test` index the rows.
pub fn krr_r2(input: &Tensor, target: &Tensor, train: &[usize], test: &[usize], cfg: &KernelConfig) -> Result<f64> {
    let xtr = input.select_rows(train);
    let (means, stds) = (xtr.col_means(), xtr.col_stds());
    let xtr = standardize_with(&xtr, &means, &stds);
    let xte = standardize_with(&input.select_rows(test), &means, &stds);
    let sigma2 = match cfg.x {
        KernelFamily::Gaussian(Bandwidth::Fixed(s)) => s,
        _ => median_heuristic(&xtr)?,
    };
    let n = train.len();
    let k = DMatrix::from_fn(n, n, |i, j| {
        gaussian_kernel(sq_dist(xtr.row(i), xtr.row(j)), sigma2) + if i == j { cfg.ridge } else { 0.0 }
    });
    let chol = k
        .cholesky()
        .ok_or_else(|| Error::Degenerate(format!("kernel matrix not positive definite")))?;
    let kte = DMatrix::from_fn(test.len(), n, |i, j| gaussian_kernel(sq_dist(xte.row(i), xtr.row(j)), sigma2));
    let mut total = 0.0;
    for c in 0..target.cols() {
        let ytr: Vec<f64> = train.iter().map(|&i| target.get(i, c)).collect();
        let yte: Vec<f64> = test.iter().map(|&i| target.get(i, c)).collect();
        let mu = math::mean(&ytr);
        let sst: f64 = {
            let mt = math::mean(&yte);
            yte.iter().map(|v| (v - mt) * (v - mt)).sum()
        };
        if !(sst > 0.0) || !(math::variance(&ytr) > 0.0) {
            return Err(Error::Degenerate(format!("target column {c} has zero variance")));
        }
        let alpha = chol.solve(&DVector::from_iterator(n, ytr.iter().map(|v| v - mu)));
        let pred = &kte * alpha;
        let sse: f64 = yte.iter().zip(pred.iter()).map(|(y, p)| (y - mu - p) * (y - mu - p)).sum();
        total += 1.0 - sse / sst;
    }
    Ok(total / target.cols() as f64)
}

/// Mean of the two directional held-out KRR R² scores (`a → b` and `b → a`)
/// over a shuffled train/test split.
pub fn krr_r2_mean<R: Rng + ?Sized>(a: &Tensor, b: &Tensor, cfg: &KernelConfig, rng: &mut R) -> Result<f64> {
    cfg.validate()?;
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "krr_r2_mean",
            detail: format!("{} vs {} rows", a.rows(), b.rows()),
        });
    }
    let n = a.rows();
    if n < 20 {
        return Err(Error::Contract(format!("krr_r2_mean needs at least 20 rows, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_train = ((n as f64) * cfg.train_fraction) as usize;
    let (train, test) = idx.split_at(n_train);
    let forward = krr_r2(b, a, train, test, cfg)?;
    let backward = krr_r2(a, b, train, test, cfg)?;
    Ok(0.5 * (forward + backward))
}
