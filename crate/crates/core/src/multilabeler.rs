//! Surrogate-free recovery of the latents shared by several labelers.
//!
//! Labeler `k` rates items through linear tasks `R = W·Z + ε` whose weight
//! rows are supported on `A_k`. Observations are `T = G·Z` for an unknown
//! invertible `G`. The solver looks for a linear representation `Ẑ = F·T`
//! and sparse task weights `Ŵ` with `‖Ŵ_t‖₀ ≤ ‖W_t‖₀` that fit the rewards,
//! preferring the smallest shared support `B̂ = ∩_t supp(Ŵ_t)` subject to
//! `|B̂| ≤ |B|`.
//!
//! Indices are zero-based throughout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{Error, Result};
use crate::rng::{derive, seeded};
use crate::tensor::Tensor;

/// A multi-labeler instance to generate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct TaskSpec {
    pub n: usize,
    /// Latent support `A_k` of each labeler.
    pub supports: Vec<Vec<usize>>,
    /// Indices of the bias-free latents.
    pub bias_free: Vec<usize>,
    /// Tasks drawn per labeler.
    pub tasks_per_labeler: usize,
    pub n_samples: usize,
    pub noise_sd: f64,
    /// Skip the check that the supports satisfy the recovery conditions.
    pub allow_violations: bool,
}

impl Default for TaskSpec {
    /// Five latents, two labelers with `A₁ = {0,1,2,3}` and `A₂ = {2,3,4}`,
    /// sharing `{2,3}`.
    fn default() -> Self {
        Self {
            n: 5,
            supports: vec![vec![0, 1, 2, 3], vec![2, 3, 4]],
            bias_free: vec![2, 3],
            tasks_per_labeler: 5,
            n_samples: 500,
            noise_sd: 0.0,
            allow_violations: false,
        }
    }
}

fn sorted_unique(v: &[usize]) -> Vec<usize> {
    let mut out = v.to_vec();
    out.sort_unstable();
    out.dedup();
    out
}

fn intersect_all(sets: &[Vec<usize>]) -> Vec<usize> {
    let mut out = match sets.first() {
        Some(s) => sorted_unique(s),
        None => return Vec::new(),
    };
    for s in &sets[1..] {
        out.retain(|i| s.contains(i));
    }
    out
}

impl TaskSpec {
    /// `∩_k A_k`.
    pub fn shared(&self) -> Vec<usize> {
        intersect_all(&self.supports)
    }

    /// Structural checks, then the two recovery conditions: every labeler
    /// uses every bias-free latent, and no spurious latent is used by all.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > 10 {
            return Err(Error::InvalidParameter(format!("n must be in 1..=10, got {}", self.n)));
        }
        if self.supports.is_empty() {
            return Err(Error::InvalidParameter(format!("need at least one labeler")));
        }
        for (k, a) in self.supports.iter().enumerate() {
            if a.is_empty() || a.iter().any(|&i| i >= self.n) || sorted_unique(a).len() != a.len() {
                return Err(Error::InvalidParameter(format!("support of labeler {k} is invalid: {a:?}")));
            }
        }
        if self.bias_free.iter().any(|&i| i >= self.n) {
            return Err(Error::InvalidParameter(format!("bias-free index out of range")));
        }
        if self.tasks_per_labeler == 0 {
            return Err(Error::InvalidParameter(format!("tasks_per_labeler must be >= 1")));
        }
        if self.n_samples < self.n {
            return Err(Error::InvalidParameter(format!("need at least n samples")));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidParameter(format!("noise_sd must be >= 0")));
        }
        if self.allow_violations {
            return Ok(());
        }
        for (k, a) in self.supports.iter().enumerate() {
            if let Some(c) = self.bias_free.iter().find(|c| !a.contains(c)) {
                return Err(Error::InvalidParameter(format!(
                    "condition (1) violated: labeler {k} ignores bias-free latent {c}"
                )));
            }
        }
        let spurious: Vec<Vec<usize>> = self
            .supports
            .iter()
            .map(|a| a.iter().copied().filter(|i| !self.bias_free.contains(i)).collect())
            .collect();
        let common = intersect_all(&spurious);
        if !common.is_empty() {
            return Err(Error::InvalidParameter(format!(
                "condition (2) violated: spurious latents {common:?} are used by every labeler"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MultiTaskDataset {
    pub spec: TaskSpec,
    /// `N × n` observations.
    pub t: Tensor,
    /// `N × n` ground-truth latents.
    pub z: Tensor,
    /// Mixing `G` with `t_i = G·z_i`.
    pub mixing: Tensor,
    /// `tasks × n` true weights, labelers in order.
    pub weights: Tensor,
    /// Labeler of each task.
    pub labeler: Vec<usize>,
    /// `N × tasks` observed rewards.
    pub rewards: Tensor,
    /// `∩_k A_k`.
    pub shared: Vec<usize>,
}

impl MultiTaskDataset {
    pub fn tasks(&self) -> usize {
        self.labeler.len()
    }

    /// `‖W_t‖₀` per task.
    pub fn task_sparsity(&self) -> Vec<usize> {
        (0..self.tasks())
            .map(|t| self.weights.row(t).iter().filter(|w| **w != 0.0).count())
            .collect()
    }
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            data.push(m[(r, c)]);
        }
    }
    Tensor::from_raw(m.nrows(), m.ncols(), data)
}

/// Draws latents, a random well-conditioned mixing, task weights, and
/// rewards for `spec`.
pub fn generate_linear_tasks(spec: &TaskSpec, seed: u64) -> Result<MultiTaskDataset> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = seeded(derive(seed, &[0]));
    let normal = |rng: &mut crate::rng::Rng| -> f64 { StandardNormal.sample(rng) };
    let z = DMatrix::from_fn(spec.n_samples, n, |_, _| normal(&mut rng));
    // Mixing: identity plus a random perturbation, rejected until well conditioned.
    let mixing = loop {
        let g = DMatrix::from_fn(n, n, |i, j| normal(&mut rng) * 0.5 + if i == j { 1.0 } else { 0.0 });
        let sv = g.singular_values();
        let (hi, lo) = (sv.max(), sv.min());
        if lo > 0.2 && hi / lo < 10.0 {
            break g;
        }
    };
    let t = &z * mixing.transpose();
    let magnitude = Uniform::new(0.5, 1.5).map_err(|e| Error::InvalidParameter(format!("{e}")))?;
    let mut w_rows = Vec::new();
    let mut labeler = Vec::new();
    for (k, a) in spec.supports.iter().enumerate() {
        for _ in 0..spec.tasks_per_labeler {
            let mut row = vec![0.0; n];
            for &i in a {
                let sign = if normal(&mut rng) >= 0.0 { 1.0 } else { -1.0 };
                row[i] = sign * magnitude.sample(&mut rng);
            }
            w_rows.push(row);
            labeler.push(k);
        }
    }
    let tasks = w_rows.len();
    let w = DMatrix::from_fn(tasks, n, |r, c| w_rows[r][c]);
    let mut noise_rng = seeded(derive(seed, &[1]));
    let rewards = &z * w.transpose() + DMatrix::from_fn(spec.n_samples, tasks, |_, _| spec.noise_sd * normal(&mut noise_rng));
    Ok(MultiTaskDataset {
        spec: spec.clone(),
        t: to_tensor(&t),
        z: to_tensor(&z),
        mixing: to_tensor(&mixing),
        weights: to_tensor(&w),
        labeler,
        rewards: to_tensor(&rewards),
        shared: spec.shared(),
    })
}

/// Intra-support variability probe: for `draws` random directions `v` on each
/// labeler's support, every task row must satisfy `W_{·,A}·v ≠ 0`. Returns the
/// number of directions that were annihilated by some task.
pub fn a5_violations(data: &MultiTaskDataset, draws: usize, seed: u64) -> usize {
    let mut rng = seeded(seed);
    let mut bad = 0;
    for (k, a) in data.spec.supports.iter().enumerate() {
        for _ in 0..draws {
            let v: Vec<f64> = a
                .iter()
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x
                })
                .collect();
            let killed = (0..data.tasks()).filter(|&t| data.labeler[t] == k).any(|t| {
                let dot: f64 = a.iter().zip(&v).map(|(&i, vi)| data.weights.get(t, i) * vi).sum();
                dot.abs() < 1e-12
            });
            if killed {
                bad += 1;
            }
        }
    }
    bad
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SharedRecovery {
    /// `n × d` representation map, `ẑ = F·t`.
    pub f: Tensor,
    /// `tasks × n` sparse weights in the learned coordinates.
    pub w: Tensor,
    /// Learned coordinates shared by every task.
    pub shared: Vec<usize>,
    /// Mean per-task Gaussian NLL (unit variance) of the solution.
    pub nll: f64,
    /// Same quantity for unrestricted least squares on `t`.
    pub nll_ols: f64,
    /// `(b, |B̂|, NLL)` for each initial shared dimension tried.
    pub candidates: Vec<(usize, usize, f64)>,
    /// Supports enumerated in total.
    pub supports_evaluated: usize,
}

impl SharedRecovery {
    /// Learned coordinates for rows of `t`.
    pub fn transform(&self, t: &Tensor) -> Result<Tensor> {
        t.matmul(&self.f.transpose())
    }

    /// True latents carrying non-negligible weight in the recovered shared
    /// coordinates, given the true mixing `G`.
    pub fn shared_image(&self, mixing: &Tensor, rel_tol: f64) -> Result<Vec<usize>> {
        let l = self.f.matmul(mixing)?;
        let n = l.cols();
        let norms: Vec<f64> = (0..n)
            .map(|c| crate::math::sqrt(self.shared.iter().map(|&r| l.get(r, c) * l.get(r, c)).sum()))
            .collect();
        let top = norms.iter().copied().fold(0.0, f64::max);
        Ok((0..n).filter(|&c| top > 0.0 && norms[c] > rel_tol * top).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct FitConfig {
    pub max_iters: usize,
    /// Absolute slack on the NLL when comparing candidates.
    pub nll_tol: f64,
    /// Relative slack, as a fraction of the unrestricted least-squares NLL.
    /// Absorbs the finite-sample cost of the sparsity constraint under noise.
    pub nll_rel_tol: f64,
    /// Cap on the number of supports enumerated per sweep.
    pub budget: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            nll_tol: 1e-6,
            nll_rel_tol: 0.02,
            budget: 1_000_000,
        }
    }
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Lexicographic `k`-subsets of `0..n`.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(binomial(n, k));
    let mut cur: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] != i + n - k {
                break;
            }
        }
        cur[i] += 1;
        for j in i + 1..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

fn lstsq(x: &DMatrix<f64>, y: &DVector<f64>) -> (DVector<f64>, f64) {
    if x.ncols() == 0 {
        return (DVector::zeros(0), y.norm_squared());
    }
    let xtx = x.transpose() * x;
    let xty = x.transpose() * y;
    let beta = match xtx.clone().cholesky() {
        Some(c) => c.solve(&xty),
        None => xtx.pseudo_inverse(1e-12).map(|p| p * &xty).unwrap_or_else(|_| DVector::zeros(x.ncols())),
    };
    let rss = (y - x * &beta).norm_squared();
    (beta, rss)
}

/// Unit-variance Gaussian NLL per sample, without the constant.
fn nll_of(rss: f64, n: usize) -> f64 {
    0.5 * rss / n as f64
}

/// Orthonormal basis of the top-`k` right singular directions of `rows`.
fn top_right_singular(rows: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let gram = rows.transpose() * rows;
    top_eigvecs(&gram, k)
}

/// Top-`k` eigenvectors of a symmetric matrix as rows.
fn top_eigvecs(sym: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = sym.nrows();
    let eig = SymmetricEigen::new(sym.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    DMatrix::from_fn(k, n, |r, c| eig.eigenvectors[(c, order[r])])
}

/// Appends rows of `cand` that are linearly independent of `basis`.
fn extend_basis(basis: &mut Vec<DVector<f64>>, ortho: &mut Vec<DVector<f64>>, cand: &DMatrix<f64>) {
    for r in 0..cand.nrows() {
        let v: DVector<f64> = cand.row(r).transpose();
        let mut u = v.clone();
        for q in ortho.iter() {
            let d = q.dot(&u);
            u -= q * d;
        }
        let norm = u.norm();
        if norm > 1e-6 * v.norm().max(1e-300) {
            ortho.push(u / norm);
            basis.push(v);
        }
    }
}

struct Solution {
    f: DMatrix<f64>,
    w: DMatrix<f64>,
    supports: Vec<Vec<usize>>,
    nll: f64,
}

/// Given `F`, picks for each task the NLL-minimal support of its size, then
/// refits `F` to the resulting weights; repeats until supports settle.
fn alternate(
    t: &DMatrix<f64>,
    r: &DMatrix<f64>,
    c_ols: &DMatrix<f64>,
    f0: DMatrix<f64>,
    sparsity: &[usize],
    cfg: &FitConfig,
    evaluated: &mut usize,
) -> Result<Solution> {
    let (n_rows, n) = (t.nrows(), f0.nrows());
    let tasks = r.ncols();
    let mut f = f0;
    let mut prev: Option<Vec<Vec<usize>>> = None;
    let mut best = None;
    for _ in 0..cfg.max_iters.max(1) {
        let zhat = t * f.transpose();
        let mut w = DMatrix::zeros(tasks, n);
        let mut supports = Vec::with_capacity(tasks);
        let mut total = 0.0;
        for task in 0..tasks {
            let y: DVector<f64> = r.column(task).into_owned();
            let mut choice: Option<(Vec<usize>, DVector<f64>, f64)> = None;
            for s in subsets(n, sparsity[task].min(n)) {
                *evaluated += 1;
                if *evaluated > cfg.budget {
                    return Err(Error::Budget(format!("more than {} supports enumerated", cfg.budget)));
                }
                let x = DMatrix::from_fn(n_rows, s.len(), |i, j| zhat[(i, s[j])]);
                let (beta, rss) = lstsq(&x, &y);
                // Strict improvement keeps the lexicographically first optimum.
                if choice.as_ref().is_none_or(|c| rss < c.2 * (1.0 - 1e-12) - 1e-300) {
                    choice = Some((s, beta, rss));
                }
            }
            let (s, beta, rss) = choice.ok_or_else(|| Error::Infeasible(format!("task {task} has no candidate support")))?;
            for (j, &i) in s.iter().enumerate() {
                w[(task, i)] = beta[j];
            }
            total += nll_of(rss, n_rows);
            supports.push(s);
        }
        let nll = total / tasks as f64;
        let settled = prev.as_ref() == Some(&supports);
        best = Some(Solution {
            f: f.clone(),
            w: w.clone(),
            supports: supports.clone(),
            nll,
        });
        if settled {
            break;
        }
        prev = Some(supports);
        // F update from the pooled coefficients: C_olsᵀ ≈ Ŵ·F.
        let wtw = w.transpose() * &w;
        match wtw.try_inverse() {
            Some(inv) => {
                let ft = c_ols * &w * inv;
                let next = ft.transpose();
                if next.clone().try_inverse().is_none() {
                    break;
                }
                f = next;
            }
            None => break,
        }
    }
    best.ok_or_else(|| Error::Infeasible(format!("no iterate produced")))
}

fn shared_of(supports: &[Vec<usize>]) -> Vec<usize> {
    intersect_all(supports)
}

/// Sparsity-constrained fit with a known bound `max_shared ≥ |B̂|` and
/// per-task support sizes.
pub fn fit_constrained(data: &MultiTaskDataset, cfg: &FitConfig) -> Result<SharedRecovery> {
    let n = data.spec.n;
    if n > 10 {
        return Err(Error::Budget(format!("support enumeration is limited to n <= 10, got {n}")));
    }
    let sparsity = data.task_sparsity();
    let max_shared = data.shared.len();
    let t = to_dmatrix(&data.t);
    let r = to_dmatrix(&data.rewards);
    // Pooled regression of every task on t: C_ols is d × tasks.
    let tt = t.transpose() * &t;
    let tt_inv = tt
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Degenerate(format!("observations are rank deficient")))?;
    let c_ols = &tt_inv * t.transpose() * &r;
    let resid = &r - &t * &c_ols;
    let nll_ols = nll_of(resid.norm_squared(), t.nrows()) / r.ncols() as f64;
    let coef = c_ols.transpose();

    let labelers = data.spec.supports.len();
    let mut subspaces = Vec::with_capacity(labelers);
    for k in 0..labelers {
        let rows: Vec<usize> = (0..data.tasks()).filter(|&i| data.labeler[i] == k).collect();
        let s_k = rows.iter().map(|&i| sparsity[i]).max().unwrap_or(0).min(n);
        let block = DMatrix::from_fn(rows.len(), coef.ncols(), |i, j| coef[(rows[i], j)]);
        subspaces.push(top_right_singular(&block, s_k));
    }
    let projector_sum = subspaces
        .iter()
        .fold(DMatrix::zeros(n, n), |acc, v| acc + v.transpose() * v);

    let mut evaluated = 0usize;
    let mut candidates = Vec::new();
    let mut solutions = Vec::new();
    for b in 0..=max_shared.min(n) {
        let shared_dirs = top_eigvecs(&projector_sum, b);
        let p_shared = shared_dirs.transpose() * &shared_dirs;
        let complement = DMatrix::identity(n, n) - &p_shared;
        let mut basis = Vec::new();
        let mut ortho = Vec::new();
        extend_basis(&mut basis, &mut ortho, &shared_dirs);
        for v in &subspaces {
            let private = v * &complement;
            let k = v.nrows().saturating_sub(b);
            extend_basis(&mut basis, &mut ortho, &top_right_singular(&private, k));
        }
        extend_basis(&mut basis, &mut ortho, &DMatrix::identity(n, n));
        let m = DMatrix::from_fn(n, n, |i, j| basis[i][j]);
        let sol = alternate(&t, &r, &c_ols, m, &sparsity, cfg, &mut evaluated)?;
        let shared = shared_of(&sol.supports);
        candidates.push((b, shared.len(), sol.nll));
        if shared.len() <= max_shared {
            solutions.push((shared, sol));
        }
    }
    let best_nll = solutions
        .iter()
        .map(|(_, s)| s.nll)
        .fold(f64::INFINITY, f64::min);
    let accept = best_nll + cfg.nll_tol + cfg.nll_rel_tol * nll_ols;
    let (shared, sol) = solutions
        .into_iter()
        .filter(|(_, s)| s.nll <= accept)
        .min_by(|a, b| a.0.len().cmp(&b.0.len()).then(a.1.nll.total_cmp(&b.1.nll)))
        .ok_or_else(|| Error::Infeasible(format!("no solution with |B̂| <= {max_shared}")))?;
    Ok(SharedRecovery {
        f: to_tensor(&sol.f),
        w: to_tensor(&sol.w),
        shared,
        nll: sol.nll,
        nll_ols,
        candidates,
        supports_evaluated: evaluated,
    })
}

/// Runs the alternating support search from a given representation `f0`
/// (`n × d`) without the shared-subspace initialisation.
pub fn refine_from(data: &MultiTaskDataset, f0: &Tensor, cfg: &FitConfig) -> Result<SharedRecovery> {
    let n = data.spec.n;
    if f0.shape() != [n, data.t.cols()] {
        return Err(Error::Shape {
            op: "refine_from",
            detail: format!("expected {n}x{}, got {:?}", data.t.cols(), f0.shape()),
        });
    }
    let t = to_dmatrix(&data.t);
    let r = to_dmatrix(&data.rewards);
    let c_ols = (t.transpose() * &t)
        .try_inverse()
        .ok_or_else(|| Error::Degenerate(format!("observations are rank deficient")))?
        * t.transpose()
        * &r;
    let nll_ols = nll_of((&r - &t * &c_ols).norm_squared(), t.nrows()) / r.ncols() as f64;
    let mut evaluated = 0;
    let sol = alternate(&t, &r, &c_ols, to_dmatrix(f0), &data.task_sparsity(), cfg, &mut evaluated)?;
    let shared = shared_of(&sol.supports);
    Ok(SharedRecovery {
        f: to_tensor(&sol.f),
        w: to_tensor(&sol.w),
        candidates: vec![(shared.len(), shared.len(), sol.nll)],
        shared,
        nll: sol.nll,
        nll_ols,
        supports_evaluated: evaluated,
    })
}

/// Mean per-task NLL of the true weights on the true latents.
pub fn true_nll(data: &MultiTaskDataset) -> f64 {
    let z = to_dmatrix(&data.z);
    let w = to_dmatrix(&data.weights);
    let r = to_dmatrix(&data.rewards);
    nll_of((&r - z * w.transpose()).norm_squared(), r.nrows()) / r.ncols() as f64
}

fn linear_r2(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let n = x.nrows();
    let design = DMatrix::from_fn(n, x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let mut total = 0.0;
    for c in 0..y.ncols() {
        let col: DVector<f64> = y.column(c).into_owned();
        let mean = col.mean();
        let sst: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
        let (_, rss) = lstsq(&design, &col);
        total += if sst > 0.0 { 1.0 - rss / sst } else { 0.0 };
    }
    total / y.ncols() as f64
}

/// Mean of the two in-sample linear-regression R² scores between the true
/// shared latents and the recovered shared coordinates.
pub fn verify_subspace(z_b: &Tensor, zhat_b: &Tensor) -> Result<f64> {
    if z_b.cols() != zhat_b.cols() || z_b.rows() != zhat_b.rows() || z_b.cols() == 0 {
        return Err(Error::Shape {
            op: "verify_subspace",
            detail: format!("{:?} vs {:?}", z_b.shape(), zhat_b.shape()),
        });
    }
    let (a, b) = (to_dmatrix(z_b), to_dmatrix(zhat_b));
    Ok(0.5 * (linear_r2(&a, &b) + linear_r2(&b, &a)))
}
