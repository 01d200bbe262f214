//! Conditional flow prior `p(ẑ | s)` over a fully connected DAG that follows
//! a fixed ordering: the bias-free block first, then the spurious block.
//!
//! Each node's conditional is a deep sigmoidal flow whose parameters come
//! from a small conditioner MLP fed with the earlier coordinates (and the
//! surrogate, for spurious-block nodes only). The base density is standard
//! normal, so
//!
//! `log p(ẑ_i | ẑ_<i, s) = log N(ε̂_i; 0, 1) + log |∂ε̂_i/∂ẑ_i|`.
//!
//! ## Flow parameterisation
//!
//! Per node the conditioner emits `3K` numbers: log-slopes `α`, offsets `b`,
//! and mixture logits `l`. With `u_k = e^{α_k} z + b_k`, `w_k = e^{l_k − max l}`,
//!
//! `Y = Σ w_k σ(u_k)`, `Ȳ = Σ w_k σ(−u_k)`, `ε = ln Y − ln Ȳ`,
//!
//! i.e. the logit of a convex mixture of sigmoids. The derivative is
//! `dε/dz = Q W / (Y Ȳ)` with `Q = Σ w_k e^{α_k} σ(u_k) σ(−u_k)` and `W = Σ w_k`,
//! which is positive, so every flow is strictly increasing. Zero parameters
//! give the identity map with log-derivative exactly `0`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::nn::{Bound, Init, Mlp, ParamStore};
use crate::synth::LatentSpec;
use crate::tape::{Activation, Tape, Var};
use crate::tensor::Tensor;

/// Sums by recursive halving; identical inputs of power-of-two count are
/// summed exactly.
fn tree_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => {
            let (a, b) = xs.split_at(n / 2);
            tree_sum(a) + tree_sum(b)
        }
    }
}

struct DsfParts {
    w: Vec<f64>,
    a: Vec<f64>,
    s: Vec<f64>,
    t: Vec<f64>,
    y: f64,
    ybar: f64,
    q: f64,
    wsum: f64,
}

fn dsf_parts(z: f64, p: &[f64], units: usize) -> DsfParts {
    let (alpha, rest) = p.split_at(units);
    let (b, logits) = rest.split_at(units);
    let lmax = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|l| math::exp(l - lmax)).collect();
    let a: Vec<f64> = alpha.iter().map(|&v| math::exp(v)).collect();
    let u: Vec<f64> = a.iter().zip(b).map(|(a, b)| a * z + b).collect();
    let s: Vec<f64> = u.iter().map(|&u| math::sigmoid(u)).collect();
    let t: Vec<f64> = u.iter().map(|&u| math::sigmoid(-u)).collect();
    let ws: Vec<f64> = w.iter().zip(&s).map(|(w, s)| w * s).collect();
    let wt: Vec<f64> = w.iter().zip(&t).map(|(w, t)| w * t).collect();
    let wq: Vec<f64> = (0..units).map(|k| w[k] * a[k] * (s[k] * t[k])).collect();
    DsfParts {
        y: tree_sum(&ws),
        ybar: tree_sum(&wt),
        q: tree_sum(&wq),
        wsum: tree_sum(&w),
        w,
        a,
        s,
        t,
    }
}

/// `(ε, log dε/dz)` for one scalar and its `3K` raw parameters.
pub(crate) fn dsf_forward(z: f64, p: &[f64], units: usize) -> (f64, f64) {
    let d = dsf_parts(z, p, units);
    let eps = math::ln(d.y) - math::ln(d.ybar);
    let ratio = (d.q / d.wsum) / ((d.y / d.wsum) * (d.ybar / d.wsum));
    (eps, math::ln(ratio))
}

/// Accumulates parameter adjoints into `dp` and returns the adjoint of `z`,
/// given upstream adjoints `g_eps` and `g_ld`.
pub(crate) fn dsf_backward(z: f64, p: &[f64], units: usize, g_eps: f64, g_ld: f64, dp: &mut [f64]) -> f64 {
    let d = dsf_parts(z, p, units);
    let (y, yb, q, wsum) = (d.y, d.ybar, d.q, d.wsum);
    let mut q2 = 0.0;
    for k in 0..units {
        let st = d.s[k] * d.t[k];
        q2 += d.w[k] * d.a[k] * d.a[k] * st * (d.t[k] - d.s[k]);
        let common = d.w[k] * d.a[k] * st;
        // log-slope α_k
        let de = common * z * (1.0 / y + 1.0 / yb);
        let dl = common * (1.0 + d.a[k] * z * (d.t[k] - d.s[k])) / q - common * z / y + common * z / yb;
        dp[k] += g_eps * de + g_ld * dl;
        // offset b_k
        let h = d.w[k] * st;
        let de = h * (1.0 / y + 1.0 / yb);
        let dl = d.a[k] * h * (d.t[k] - d.s[k]) / q - h / y + h / yb;
        dp[units + k] += g_eps * de + g_ld * dl;
        // mixture logit l_k
        let de = d.w[k] * d.s[k] / y - d.w[k] * d.t[k] / yb;
        let dl = common / q + d.w[k] / wsum - d.w[k] * d.s[k] / y - d.w[k] * d.t[k] / yb;
        dp[2 * units + k] += g_eps * de + g_ld * dl;
    }
    let de_dz = q / y + q / yb;
    let dl_dz = q2 / q - q / y + q / yb;
    g_eps * de_dz + g_ld * dl_dz
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct FlowConfig {
    /// Sigmoid units per node.
    pub units: usize,
    /// Conditioner hidden width.
    pub hidden: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { units: 8, hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowPrior {
    spec: LatentSpec,
    units: usize,
    conditioners: Vec<Mlp>,
}

impl FlowPrior {
    /// Registers one conditioner per node in `store`. Conditioner outputs
    /// start at zero so every node begins as the identity flow.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, spec: LatentSpec, cfg: FlowConfig, rng: &mut R) -> Result<Self> {
        if cfg.units == 0 || cfg.hidden == 0 {
            return Err(Error::InvalidParameter(format!("flow sizes must be positive: {cfg:?}")));
        }
        let conditioners = (0..spec.n())
            .map(|i| {
                let widths = [Self::cond_width_for(spec, i), cfg.hidden, 3 * cfg.units];
                Mlp::new(store, &format!("prior.{i}"), &widths, Activation::Tanh, Init::Zeros, rng)
            })
            .collect();
        Ok(Self {
            spec,
            units: cfg.units,
            conditioners,
        })
    }

    fn cond_width_for(spec: LatentSpec, node: usize) -> usize {
        node + usize::from(spec.is_spurious(node))
    }

    pub fn spec(&self) -> LatentSpec {
        self.spec
    }

    pub fn units(&self) -> usize {
        self.units
    }

    /// Conditioning width of `node`: earlier coordinates plus the surrogate
    /// for spurious-block nodes.
    pub fn cond_width(&self, node: usize) -> usize {
        Self::cond_width_for(self.spec, node)
    }

    pub fn receives_surrogate(&self, node: usize) -> bool {
        self.spec.is_spurious(node)
    }

    /// Per-row log prior density, recorded on `tape`. `z` is `n×d`, `s` is `n×1`.
    pub fn log_density(&self, tape: &mut Tape, bound: &Bound, z: Var, s: Var) -> Result<Var> {
        let rows = tape.value(z).rows();
        let zeros = tape.leaf(Tensor::zeros(rows, 1));
        let mut total: Option<Var> = None;
        for (i, mlp) in self.conditioners.iter().enumerate() {
            let earlier = tape.slice_cols(z, 0, i)?;
            let cond = if self.receives_surrogate(i) {
                tape.concat_cols(&[earlier, s])?
            } else {
                earlier
            };
            let params = mlp.forward(tape, bound, cond)?;
            let zi = tape.slice_cols(z, i, i + 1)?;
            let out = tape.dsf(zi, params, self.units)?;
            let eps = tape.slice_cols(out, 0, 1)?;
            let logdet = tape.slice_cols(out, 1, 2)?;
            let base = tape.gaussian_log_pdf(eps, zeros, zeros)?;
            let term = tape.add(base, logdet)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        total.ok_or_else(|| Error::Contract(format!("flow prior with no nodes")))
    }

    /// `(ε̂_i, log|∂τ_i/∂ẑ_i|)` for each row of `z_i` (`n×1`) given the
    /// conditioning rows `cond` (`n×cond_width(node)`).
    pub fn flow_forward(&self, store: &ParamStore, node: usize, z_i: &Tensor, cond: &Tensor) -> Result<Vec<(f64, f64)>> {
        if node >= self.conditioners.len() {
            return Err(Error::Contract(format!("node {node} out of range")));
        }
        if cond.cols() != self.cond_width(node) || cond.rows() != z_i.rows() || z_i.cols() != 1 {
            return Err(Error::Shape {
                op: "flow_forward",
                detail: format!(
                    "node {node} expects cond width {}, got {:?} with z {:?}",
                    self.cond_width(node),
                    cond.shape(),
                    z_i.shape()
                ),
            });
        }
        let params = self.conditioners[node].eval(store, cond)?;
        (0..z_i.rows())
            .map(|r| {
                let (e, ld) = dsf_forward(z_i.get(r, 0), params.row(r), self.units);
                if e.is_finite() && ld.is_finite() {
                    Ok((e, ld))
                } else {
                    Err(Error::NonFinite { op: "flow_forward" })
                }
            })
            .collect()
    }

    /// Per-row log density without a tape.
    pub fn log_density_eval(&self, store: &ParamStore, z: &Tensor, s: &[f64]) -> Result<Vec<f64>> {
        if z.cols() != self.spec.n() || s.len() != z.rows() {
            return Err(Error::Shape {
                op: "prior_log_density",
                detail: format!("z {:?}, {} surrogate values", z.shape(), s.len()),
            });
        }
        let s_col = Tensor::column(s.to_vec())?;
        let mut out = vec![0.0; z.rows()];
        for i in 0..self.spec.n() {
            let earlier = z.slice_cols(0, i);
            let cond = if self.receives_surrogate(i) {
                Tensor::hcat(&[&earlier, &s_col])?
            } else {
                earlier
            };
            let vals = self.flow_forward(store, i, &z.slice_cols(i, i + 1), &cond)?;
            for (o, (e, ld)) in out.iter_mut().zip(vals) {
                *o += math::std_normal_log_pdf(e) + ld;
            }
        }
        Ok(out)
    }
}

/// Log density of a single latent row.
pub fn prior_log_density(prior: &FlowPrior, store: &ParamStore, z: &[f64], s: f64) -> Result<f64> {
    let row = Tensor::new(1, z.len(), z.to_vec())?;
    Ok(prior.log_density_eval(store, &row, &[s])?[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_parameters_are_identity() {
        let p = [0.0; 24];
        for z in [-7.5, -1.0, 0.0, 0.3, 4.0] {
            let (e, ld) = dsf_forward(z, &p, 8);
            assert!((e - z).abs() < 1e-12, "{e} vs {z}");
            assert_eq!(ld, 0.0);
        }
    }

    #[test]
    fn mixture_logit_shift_is_invariant() {
        let mut p = [0.0; 9];
        p.copy_from_slice(&[0.3, -0.2, 0.5, 1.0, -1.0, 0.2, 0.1, 0.7, -0.4]);
        let (e1, l1) = dsf_forward(0.4, &p, 3);
        for v in &mut p[6..] {
            *v += 5.0;
        }
        let (e2, l2) = dsf_forward(0.4, &p, 3);
        assert!((e1 - e2).abs() < 1e-13 && (l1 - l2).abs() < 1e-13);
    }
}
