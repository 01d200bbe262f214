//! Ground-truth generative process and bias-injected preference corpora.
//!
//! Latents follow a structural causal model over a random DAG in which no
//! spurious latent is an ancestor of a bias-free one. Spurious mechanisms are
//! modulated by the surrogate `S` through an S-indexed affine map of the
//! mechanism output; bias-free mechanisms never see `S`, so `Z_C ⫫ S`.
//! Observations are `T = g(Z)` for an invertible two-layer leaky-ReLU `g`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{derive, seeded};
use crate::tensor::Tensor;

/// Partition of the latent vector: indices `[0, n_c)` are bias-free,
/// `[n_c, n_c + n_s)` are spurious.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LatentSpec {
    pub n_c: usize,
    pub n_s: usize,
}

impl LatentSpec {
    pub fn new(n_c: usize, n_s: usize) -> Result<Self> {
        if n_c == 0 || n_s == 0 {
            return Err(Error::InvalidParameter(format!(
                "need n_c >= 1 and n_s >= 1, got n_c={n_c}, n_s={n_s}"
            )));
        }
        Ok(Self { n_c, n_s })
    }

    pub fn n(&self) -> usize {
        self.n_c + self.n_s
    }

    pub fn is_spurious(&self, i: usize) -> bool {
        i >= self.n_c
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Dag {
    spec: LatentSpec,
    order: Vec<usize>,
    parents: Vec<Vec<usize>>,
}

impl Dag {
    /// Builds a DAG from explicit parent sets, checking acyclicity and that
    /// no spurious node is an ancestor of a bias-free node.
    pub fn from_parents(spec: LatentSpec, parents: Vec<Vec<usize>>) -> Result<Self> {
        let n = spec.n();
        if parents.len() != n || parents.iter().flatten().any(|&p| p >= n) {
            return Err(Error::InvalidParameter(format!("parent sets do not match {n} nodes")));
        }
        // Kahn's algorithm, bias-free nodes preferred so they come first.
        let mut indeg: Vec<usize> = parents.iter().map(Vec::len).collect();
        let mut order = Vec::with_capacity(n);
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        while let Some(pos) = ready.iter().enumerate().min_by_key(|(_, &v)| (spec.is_spurious(v), v)).map(|(i, _)| i) {
            let v = ready.swap_remove(pos);
            order.push(v);
            for (child, ps) in parents.iter().enumerate() {
                if ps.contains(&v) {
                    indeg[child] -= 1;
                    if indeg[child] == 0 {
                        ready.push(child);
                    }
                }
            }
        }
        if order.len() != n {
            return Err(Error::InvalidParameter(format!("graph has a cycle")));
        }
        let dag = Self { spec, order, parents };
        for c in 0..spec.n_c {
            if dag.ancestors(c).iter().any(|&a| spec.is_spurious(a)) {
                return Err(Error::InvalidParameter(format!("spurious ancestor of bias-free node {c}")));
            }
        }
        Ok(dag)
    }

    pub fn spec(&self) -> LatentSpec {
        self.spec
    }

    pub fn n(&self) -> usize {
        self.spec.n()
    }

    /// Topological order with every bias-free node before every spurious one.
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn parents(&self, i: usize) -> &[usize] {
        &self.parents[i]
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.parents[to].contains(&from)
    }

    pub fn edge_count(&self) -> usize {
        self.parents.iter().map(Vec::len).sum()
    }

    pub fn ancestors(&self, node: usize) -> Vec<usize> {
        let mut seen = vec![false; self.n()];
        let mut stack = self.parents[node].clone();
        while let Some(v) = stack.pop() {
            if !seen[v] {
                seen[v] = true;
                stack.extend_from_slice(&self.parents[v]);
            }
        }
        (0..self.n()).filter(|&i| seen[i]).collect()
    }
}

/// Erdős–Rényi DAG: a random causal order with every bias-free node ahead of
/// every spurious node, then each forward pair gets an edge with probability
/// `edge_prob`.
pub fn sample_dag(spec: LatentSpec, edge_prob: f64, seed: u64) -> Result<Dag> {
    if !(0.0..=1.0).contains(&edge_prob) {
        return Err(Error::InvalidParameter(format!("edge_prob must be in [0,1], got {edge_prob}")));
    }
    let mut rng = seeded(seed);
    let mut c: Vec<usize> = (0..spec.n_c).collect();
    let mut s: Vec<usize> = (spec.n_c..spec.n()).collect();
    c.shuffle(&mut rng);
    s.shuffle(&mut rng);
    let causal: Vec<usize> = c.into_iter().chain(s).collect();
    let mut parents = vec![Vec::new(); spec.n()];
    for a in 0..causal.len() {
        for b in a + 1..causal.len() {
            let draw: f64 = rng.random();
            if draw < edge_prob {
                parents[causal[b]].push(causal[a]);
            }
        }
    }
    for p in &mut parents {
        p.sort_unstable();
    }
    Dag::from_parents(spec, parents)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ScmConfig {
    /// Mechanism MLP hidden width; `None` means `2n`.
    pub mechanism_hidden: Option<usize>,
    /// Slope of the leaky-ReLU in mechanisms and in the mixing function.
    pub leaky_slope: f64,
    /// Surrogate values; index 0 is the reference level.
    pub s_values: Vec<f64>,
    /// Magnitude range of the S-indexed shift on spurious mechanisms.
    pub shift_range: (f64, f64),
    /// Magnitude range of the S-indexed log-scale on spurious mechanisms.
    pub log_scale_range: (f64, f64),
    /// Noise scales are drawn from `U[lo, hi]`.
    pub noise_range: (f64, f64),
}

impl Default for ScmConfig {
    fn default() -> Self {
        Self {
            mechanism_hidden: None,
            leaky_slope: 0.2,
            s_values: vec![0.0, 1.0],
            shift_range: (1.0, 2.0),
            log_scale_range: (0.3, 0.7),
            noise_range: (1.0, 2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mechanism {
    pub parents: Vec<usize>,
    /// `|parents| × hidden`
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub bias: f64,
    pub sigma: f64,
    /// Per surrogate level; identity (`0`, `1`) for bias-free nodes.
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Mechanism {
    fn eval(&self, z: &[f64], noise: f64, s_idx: usize, slope: f64) -> f64 {
        let mut out = self.bias;
        if !self.parents.is_empty() {
            let hidden = self.b1.len();
            for h in 0..hidden {
                let mut a = self.b1[h];
                for (k, &p) in self.parents.iter().enumerate() {
                    a += z[p] * self.w1.get(k, h);
                }
                let a = if a >= 0.0 { a } else { slope * a };
                out += a * self.w2[h];
            }
        }
        self.scale[s_idx] * (out + self.sigma * noise) + self.shift[s_idx]
    }
}

/// Square two-layer leaky-ReLU network `T = W2ᵀ·lrelu(W1ᵀ z + b1) + b2` with
/// orthogonal weights, hence invertible.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mixing {
    pub w1: Tensor,
    pub b1: Vec<f64>,
    pub w2: Tensor,
    pub b2: Vec<f64>,
    pub slope: f64,
}

impl Mixing {
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let n = z.len();
        let mut h = self.b1.clone();
        for (j, hj) in h.iter_mut().enumerate() {
            for (i, zi) in z.iter().enumerate() {
                *hj += zi * self.w1.get(i, j);
            }
            if *hj < 0.0 {
                *hj *= self.slope;
            }
        }
        let mut t = self.b2.clone();
        for (j, tj) in t.iter_mut().enumerate() {
            for i in 0..n {
                *tj += h[i] * self.w2.get(i, j);
            }
        }
        t
    }

    /// Numerical Jacobian determinant by central differences.
    pub fn jacobian_det(&self, z: &[f64], h: f64) -> f64 {
        let n = z.len();
        let mut jac = DMatrix::zeros(n, n);
        for i in 0..n {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[i] += h;
            zm[i] -= h;
            let (tp, tm) = (self.apply(&zp), self.apply(&zm));
            for j in 0..n {
                jac[(j, i)] = (tp[j] - tm[j]) / (2.0 * h);
            }
        }
        jac.determinant()
    }
}

fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let g = DMatrix::from_fn(n, n, |_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v
    });
    let q = g.qr().q();
    Tensor::from_raw(n, n, (0..n * n).map(|k| q[(k / n, k % n)]).collect())
}

fn gaussian_vec<R: Rng + ?Sized>(len: usize, sd: f64, rng: &mut R) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            sd * v
        })
        .collect()
}

fn uniform<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    range.0 + (range.1 - range.0) * u
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Scm {
    dag: Dag,
    mechanisms: Vec<Mechanism>,
    mixing: Mixing,
    s_values: Vec<f64>,
}

/// Seeded mechanisms and mixing for `dag`.
pub fn build_scm(dag: Dag, cfg: &ScmConfig, seed: u64) -> Result<Scm> {
    if cfg.s_values.len() < 2 {
        return Err(Error::InvalidParameter(format!("need at least two surrogate values")));
    }
    if !(cfg.leaky_slope > 0.0) {
        return Err(Error::InvalidParameter(format!("leaky slope must be > 0")));
    }
    let (lo, hi) = cfg.noise_range;
    if !(0.0 <= lo && lo <= hi) {
        return Err(Error::InvalidParameter(format!("bad noise range {:?}", cfg.noise_range)));
    }
    let spec = dag.spec();
    let n = spec.n();
    let hidden = cfg.mechanism_hidden.unwrap_or(2 * n);
    let mut rng = seeded(seed);
    let levels = cfg.s_values.len();
    let mut mechanisms = Vec::with_capacity(n);
    for i in 0..n {
        let parents = dag.parents(i).to_vec();
        let p = parents.len();
        let w1 = Tensor::from_raw(p, hidden, gaussian_vec(p * hidden, math::sqrt(2.0 / p.max(1) as f64), &mut rng));
        let b1 = gaussian_vec(hidden, 0.1, &mut rng);
        let w2 = gaussian_vec(hidden, math::sqrt(1.0 / hidden as f64), &mut rng);
        let bias = gaussian_vec(1, 0.5, &mut rng)[0];
        let sigma = uniform(cfg.noise_range, &mut rng);
        let (mut shift, mut scale) = (vec![0.0; levels], vec![1.0; levels]);
        if spec.is_spurious(i) {
            for l in 1..levels {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                shift[l] = sign * uniform(cfg.shift_range, &mut rng);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                scale[l] = math::exp(sign * uniform(cfg.log_scale_range, &mut rng));
            }
        }
        mechanisms.push(Mechanism {
            parents,
            w1,
            b1,
            w2,
            bias,
            sigma,
            shift,
            scale,
        });
    }
    let mixing = Mixing {
        w1: random_orthogonal(n, &mut rng),
        b1: gaussian_vec(n, 0.5, &mut rng),
        w2: random_orthogonal(n, &mut rng),
        b2: vec![0.0; n],
        slope: cfg.leaky_slope,
    };
    Ok(Scm {
        dag,
        mechanisms,
        mixing,
        s_values: cfg.s_values.clone(),
    })
}

impl Scm {
    pub fn dag(&self) -> &Dag {
        &self.dag
    }

    pub fn spec(&self) -> LatentSpec {
        self.dag.spec()
    }

    pub fn mechanisms(&self) -> &[Mechanism] {
        &self.mechanisms
    }

    pub fn mixing(&self) -> &Mixing {
        &self.mixing
    }

    pub fn s_values(&self) -> &[f64] {
        &self.s_values
    }

    /// Copy with every noise scale multiplied by `k` (`0` gives a noiseless model).
    pub fn with_noise_scale(&self, k: f64) -> Self {
        let mut out = self.clone();
        for m in &mut out.mechanisms {
            m.sigma *= k;
        }
        out
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        gaussian_vec(self.spec().n(), 1.0, rng)
    }

    /// Ancestral pass for fixed exogenous noise and surrogate level.
    pub fn latents_from_noise(&self, noise: &[f64], s_idx: usize) -> Vec<f64> {
        let mut z = vec![0.0; self.spec().n()];
        for &i in self.dag.order() {
            z[i] = self.mechanisms[i].eval(&z, noise[i], s_idx, self.mixing.slope);
        }
        z
    }

    pub fn observe(&self, z: &[f64]) -> Vec<f64> {
        self.mixing.apply(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthDataset {
    pub spec: LatentSpec,
    /// `N × d` observations.
    pub t: Tensor,
    /// Surrogate value per row.
    pub s: Vec<f64>,
    /// `N × n` ground-truth latents.
    pub z: Tensor,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    pub fn z_c(&self) -> Tensor {
        self.z.slice_cols(0, self.spec.n_c)
    }

    pub fn z_s(&self) -> Tensor {
        self.z.slice_cols(self.spec.n_c, self.spec.n())
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            spec: self.spec,
            t: self.t.select_rows(idx),
            s: idx.iter().map(|&i| self.s[i]).collect(),
            z: self.z.select_rows(idx),
        }
    }

    /// Rows whose surrogate equals `level`.
    pub fn rows_with_s(&self, level: f64) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.s[i] == level).collect()
    }
}

/// `n_per_s` ancestral samples for each surrogate value in `s_values`,
/// grouped by value in order. Every value must be a level of `scm`.
pub fn generate_dataset(scm: &Scm, n_per_s: usize, s_values: &[f64], seed: u64) -> Result<SynthDataset> {
    if n_per_s == 0 {
        return Err(Error::InvalidParameter(format!("n_per_s must be >= 1")));
    }
    let mut distinct = s_values.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 2 || distinct.len() != s_values.len() {
        return Err(Error::InvalidParameter(format!(
            "need at least two distinct surrogate values, got {s_values:?}"
        )));
    }
    let levels: Vec<usize> = s_values
        .iter()
        .map(|v| {
            scm.s_values()
                .iter()
                .position(|x| x == v)
                .ok_or_else(|| Error::InvalidParameter(format!("surrogate value {v} is not a level of the model")))
        })
        .collect::<Result<_>>()?;
    let n = scm.spec().n();
    let rows = n_per_s * levels.len();
    let mut rng = seeded(seed);
    let mut t = Vec::with_capacity(rows * n);
    let mut z = Vec::with_capacity(rows * n);
    let mut s = Vec::with_capacity(rows);
    for (&l, &level) in levels.iter().zip(s_values) {
        for _ in 0..n_per_s {
            let noise = scm.sample_noise(&mut rng);
            let zi = scm.latents_from_noise(&noise, l);
            t.extend(scm.observe(&zi));
            z.extend(zi);
            s.push(level);
        }
    }
    Ok(SynthDataset {
        spec: scm.spec(),
        t: Tensor::new(rows, n, t)?,
        s,
        z: Tensor::new(rows, n, z)?,
    })
}

/// Which bias protocol a preference corpus mirrors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum CorpusKind {
    /// One agreement-cue coordinate.
    Sycophancy,
    /// Two concept indicators (color, size); exactly one is set per item.
    Concept,
}

impl CorpusKind {
    pub fn cue_width(self) -> usize {
        match self {
            CorpusKind::Sycophancy => 1,
            CorpusKind::Concept => 2,
        }
    }

    /// Prompt features shared by both items of a pair. The analogue keeps
    /// none: any prompt feature tied to the cue placement would leak the label.
    pub fn context_width(self) -> usize {
        0
    }

    fn cue_features(self, present: bool) -> &'static [f64] {
        match (self, present) {
            (CorpusKind::Sycophancy, true) => &[1.0],
            (CorpusKind::Sycophancy, false) => &[0.0],
            (CorpusKind::Concept, true) => &[1.0, 0.0],
            (CorpusKind::Concept, false) => &[0.0, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CorpusKind::Sycophancy => "sycophancy",
            CorpusKind::Concept => "concept",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct WorldConfig {
    pub n_c: usize,
    pub n_s: usize,
    pub edge_prob: f64,
    pub scm: ScmConfig,
    /// Bradley–Terry sharpness of ground-truth preferences over the
    /// unit-variance latent reward.
    pub temperature: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_c: 4,
            n_s: 4,
            edge_prob: 0.5,
            scm: ScmConfig::default(),
            temperature: 3.0,
        }
    }
}

/// A fixed generative world shared by the train, test, and probe corpora of
/// one trial: an SCM over item latents (surrogate = cue present) plus a
/// linear ground-truth reward on the bias-free block.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CorpusWorld {
    pub kind: CorpusKind,
    pub scm: Scm,
    /// Weights on `Z_C`, scaled so the latent reward has unit variance.
    pub reward_weights: Vec<f64>,
    pub reward_offset: f64,
    pub temperature: f64,
}

impl CorpusWorld {
    pub fn build(kind: CorpusKind, cfg: &WorldConfig, seed: u64) -> Result<Self> {
        let spec = LatentSpec::new(cfg.n_c, cfg.n_s)?;
        if !(cfg.temperature > 0.0) {
            return Err(Error::InvalidParameter(format!("temperature must be > 0")));
        }
        let mut scm_cfg = cfg.scm.clone();
        scm_cfg.s_values = vec![0.0, 1.0];
        let dag = sample_dag(spec, cfg.edge_prob, derive(seed, &[0]))?;
        let scm = build_scm(dag, &scm_cfg, derive(seed, &[1]))?;
        let mut rng = seeded(derive(seed, &[2]));
        let raw = gaussian_vec(spec.n_c, 1.0, &mut rng);
        // Standardise the latent reward on a calibration sample.
        let r: Vec<f64> = (0..4096)
            .map(|_| {
                let z = scm.latents_from_noise(&scm.sample_noise(&mut rng), 0);
                raw.iter().zip(&z).map(|(w, z)| w * z).sum()
            })
            .collect();
        let sd = math::sqrt(math::variance(&r));
        if !(sd > 0.0) {
            return Err(Error::Degenerate(format!("latent reward has zero variance")));
        }
        Ok(Self {
            kind,
            reward_weights: raw.iter().map(|w| w / sd).collect(),
            reward_offset: math::mean(&r) / sd,
            scm,
            temperature: cfg.temperature,
        })
    }

    pub fn spec(&self) -> LatentSpec {
        self.scm.spec()
    }

    /// Width of an item feature vector: observation plus cue coordinates.
    pub fn feature_width(&self) -> usize {
        self.spec().n() + self.kind.cue_width()
    }

    pub fn latent_reward(&self, z: &[f64]) -> f64 {
        self.reward_weights.iter().zip(z).map(|(w, z)| w * z).sum::<f64>() - self.reward_offset
    }

    fn item(&self, noise: &[f64], cue: bool) -> (Vec<f64>, Vec<f64>) {
        let z = self.scm.latents_from_noise(noise, usize::from(cue));
        let mut f = self.scm.observe(&z);
        f.extend_from_slice(self.kind.cue_features(cue));
        (f, z)
    }

    /// Unpaired items with the cue present on exactly half of them, in
    /// random order. This is the observational data the representation
    /// learner sees; `Z_C ⫫ S` holds in it.
    pub fn sample_items(&self, count: usize, seed: u64) -> Result<SynthDataset> {
        let mut rng = seeded(seed);
        let mut cues: Vec<bool> = (0..count).map(|i| i % 2 == 0).collect();
        cues.shuffle(&mut rng);
        let d = self.feature_width();
        let n = self.spec().n();
        let (mut t, mut z, mut s) = (Vec::with_capacity(count * d), Vec::with_capacity(count * n), Vec::with_capacity(count));
        for &cue in &cues {
            let (f, zi) = self.item(&self.scm.sample_noise(&mut rng), cue);
            t.extend(f);
            z.extend(zi);
            s.push(if cue { 1.0 } else { 0.0 });
        }
        Ok(SynthDataset {
            spec: self.spec(),
            t: Tensor::new(count, d, t)?,
            s,
            z: Tensor::new(count, n, z)?,
        })
    }

    /// `size` preference pairs. The preferred item is drawn by Bradley–Terry
    /// on the latent reward; the spurious cue lands on the preferred item
    /// with probability `p` and on the rejected item otherwise.
    pub fn preference_corpus(&self, size: usize, p: f64, seed: u64) -> Result<PreferenceDataset> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!("injection rate must be in [0,1], got {p}")));
        }
        let mut rng = seeded(seed);
        let d = self.feature_width();
        let n = self.spec().n();
        let mut out = PreferenceDataset {
            kind: self.kind,
            p,
            seed,
            context: Vec::with_capacity(size * self.kind.context_width()),
            chosen: Vec::with_capacity(size * d),
            rejected: Vec::with_capacity(size * d),
            chosen_latent: Vec::with_capacity(size * n),
            rejected_latent: Vec::with_capacity(size * n),
            cue_on_chosen: Vec::with_capacity(size),
            correct: Vec::with_capacity(size),
            size,
            feature_width: d,
            latent_width: n,
        };
        for _ in 0..size {
            let na = self.scm.sample_noise(&mut rng);
            let nb = self.scm.sample_noise(&mut rng);
            // Bias-free latents do not depend on the cue level.
            let ra = self.latent_reward(&self.scm.latents_from_noise(&na, 0));
            let rb = self.latent_reward(&self.scm.latents_from_noise(&nb, 0));
            let u: f64 = rng.random();
            let a_wins = u < math::sigmoid(self.temperature * (ra - rb));
            let (win, lose, correct) = if a_wins { (na, nb, ra > rb) } else { (nb, na, rb > ra) };
            let cue_on_chosen = rng.random::<f64>() < p;
            let (fc, zc) = self.item(&win, cue_on_chosen);
            let (fr, zr) = self.item(&lose, !cue_on_chosen);
            out.chosen.extend(fc);
            out.rejected.extend(fr);
            out.chosen_latent.extend(zc);
            out.rejected_latent.extend(zr);
            out.cue_on_chosen.push(cue_on_chosen);
            out.correct.push(correct);
        }
        Ok(out)
    }
}

/// Preference pairs stored column-wise.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PreferenceDataset {
    pub kind: CorpusKind,
    /// Injection rate of the spurious cue onto the preferred item.
    pub p: f64,
    pub seed: u64,
    pub size: usize,
    pub feature_width: usize,
    pub latent_width: usize,
    /// Row-major `size × context_width`.
    pub context: Vec<f64>,
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
    pub chosen_latent: Vec<f64>,
    pub rejected_latent: Vec<f64>,
    pub cue_on_chosen: Vec<bool>,
    /// Whether the preferred item also has the higher latent reward.
    pub correct: Vec<bool>,
}

impl PreferenceDataset {
    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn chosen_features(&self) -> Tensor {
        Tensor::from_raw(self.size, self.feature_width, self.chosen.clone())
    }

    pub fn rejected_features(&self) -> Tensor {
        Tensor::from_raw(self.size, self.feature_width, self.rejected.clone())
    }

    pub fn chosen_latents(&self) -> Tensor {
        Tensor::from_raw(self.size, self.latent_width, self.chosen_latent.clone())
    }

    pub fn rejected_latents(&self) -> Tensor {
        Tensor::from_raw(self.size, self.latent_width, self.rejected_latent.clone())
    }

    /// Empirical rate at which the cue sits on the preferred item.
    pub fn cue_on_chosen_rate(&self) -> f64 {
        if self.size == 0 {
            return 0.0;
        }
        self.cue_on_chosen.iter().filter(|&&c| c).count() as f64 / self.size as f64
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        let pick = |v: &[f64], w: usize| -> Vec<f64> {
            idx.iter().flat_map(|&i| v[i * w..(i + 1) * w].iter().copied()).collect()
        };
        let cw = self.kind.context_width();
        Self {
            kind: self.kind,
            p: self.p,
            seed: self.seed,
            size: idx.len(),
            feature_width: self.feature_width,
            latent_width: self.latent_width,
            context: pick(&self.context, cw),
            chosen: pick(&self.chosen, self.feature_width),
            rejected: pick(&self.rejected, self.feature_width),
            chosen_latent: pick(&self.chosen_latent, self.latent_width),
            rejected_latent: pick(&self.rejected_latent, self.latent_width),
            cue_on_chosen: idx.iter().map(|&i| self.cue_on_chosen[i]).collect(),
            correct: idx.iter().map(|&i| self.correct[i]).collect(),
        }
    }
}

/// Sycophancy analogue: the agreement cue goes on the preferred response
/// with probability `p`.
pub fn make_sycophancy_corpus(world: &CorpusWorld, base_size: usize, p: f64, seed: u64) -> Result<PreferenceDataset> {
    if world.kind != CorpusKind::Sycophancy {
        return Err(Error::InvalidParameter(format!("world is not a sycophancy world")));
    }
    world.preference_corpus(base_size, p, seed)
}

/// Concept analogue: the preferred item carries the color concept with
/// probability `p` (size otherwise), the rejected item the opposite.
pub fn make_concept_corpus(world: &CorpusWorld, base_size: usize, p: f64, seed: u64) -> Result<PreferenceDataset> {
    if world.kind != CorpusKind::Concept {
        return Err(Error::InvalidParameter(format!("world is not a concept world")));
    }
    world.preference_corpus(base_size, p, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latent_spec_rejects_empty_blocks() {
        assert!(LatentSpec::new(0, 2).is_err());
        assert!(LatentSpec::new(2, 0).is_err());
        assert_eq!(LatentSpec::new(3, 2).unwrap().n(), 5);
    }

    #[test]
    fn from_parents_rejects_spurious_ancestor() {
        let spec = LatentSpec::new(1, 1).unwrap();
        assert!(Dag::from_parents(spec, vec![vec![1], vec![]]).is_err());
        assert!(Dag::from_parents(spec, vec![vec![1], vec![0]]).is_err());
        let ok = Dag::from_parents(spec, vec![vec![], vec![0]]).unwrap();
        assert_eq!(ok.order(), &[0, 1]);
    }

    #[test]
    fn order_puts_bias_free_block_first() {
        let spec = LatentSpec::new(3, 3).unwrap();
        for seed in 0..20 {
            let dag = sample_dag(spec, 0.6, seed).unwrap();
            let first_s = dag.order().iter().position(|&v| spec.is_spurious(v)).unwrap();
            assert!(dag.order()[first_s..].iter().all(|&v| spec.is_spurious(v)));
        }
    }

    #[test]
    fn corpus_rejects_bad_rate() {
        let w = CorpusWorld::build(CorpusKind::Sycophancy, &WorldConfig::default(), 1).unwrap();
        assert!(w.preference_corpus(10, 1.5, 0).is_err());
        assert!(make_concept_corpus(&w, 10, 0.5, 0).is_err());
    }
}
