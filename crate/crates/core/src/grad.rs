//! Analytic gradients of the policy and the independent oracles that check
//! them: central finite differences and exhaustive enumeration.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::{index_of, Prompt, TokenId};
use crate::error::{config, contract, Error, Result};
use crate::format::{self, Header, PayloadKind};
use crate::model::{self, Context, Layout, ModelConfig, Params};

/// Identifies a context by prompt id and prefix length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextId {
    pub prompt: u32,
    pub position: usize,
}

impl From<&Context<'_>> for ContextId {
    fn from(ctx: &Context<'_>) -> Self {
        Self { prompt: ctx.prompt.id, position: ctx.prefix.len() }
    }
}

/// `d phi / d theta_phi` at one context, shape `D x |theta_phi|`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureJacobian {
    pub j: Array2<f64>,
    pub context: ContextId,
}

impl FeatureJacobian {
    pub fn to_bytes(&self, cfg: &ModelConfig) -> Vec<u8> {
        let header = Header::for_config(cfg, PayloadKind::FeatureJacobian, self.j.len());
        format::encode(&header, self.j.iter().copied())
    }
}

/// Gradient over the flat `theta_phi ++ W` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    data: Vec<f64>,
    phi_len: usize,
}

impl GradVector {
    pub fn zeros(layout: &Layout) -> Self {
        Self { data: vec![0.0; layout.total_len()], phi_len: layout.phi_len }
    }

    pub fn from_parts(phi: Vec<f64>, w: Vec<f64>) -> Self {
        let phi_len = phi.len();
        let mut data = phi;
        data.extend(w);
        Self { data, phi_len }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn phi(&self) -> &[f64] {
        &self.data[..self.phi_len]
    }

    pub fn phi_mut(&mut self) -> &mut [f64] {
        &mut self.data[..self.phi_len]
    }

    pub fn w(&self) -> &[f64] {
        &self.data[self.phi_len..]
    }

    pub fn w_mut(&mut self) -> &mut [f64] {
        &mut self.data[self.phi_len..]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Index of the first non-finite entry.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|x| !x.is_finite())
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &GradVector) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += a * y;
        }
    }

    /// `params += step * self`.
    pub fn apply_to(&self, params: &mut Params, step: f64) {
        for (p, g) in params.theta_phi.iter_mut().chain(params.w.iter_mut()).zip(&self.data) {
            *p += step * g;
        }
    }

    pub fn to_bytes(&self, cfg: &ModelConfig) -> Vec<u8> {
        let header = Header::for_config(cfg, PayloadKind::Gradient, self.data.len());
        format::encode(&header, self.data.iter().copied())
    }
}

/// Which parameter blocks an update may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    All,
    /// Feature-map parameters frozen; only `W` moves.
    ClassifierOnly,
}

impl Trainable {
    /// Zeroes the blocks that are frozen.
    pub fn mask(self, g: &mut GradVector) {
        if self == Trainable::ClassifierOnly {
            g.phi_mut().fill(0.0);
        }
    }
}

/// Analytic Jacobian of the features with respect to `theta_phi` (W excluded).
pub fn feature_jacobian(params: &Params, cfg: &ModelConfig, ctx: &Context) -> Result<FeatureJacobian> {
    let fwd = model::forward(params, cfg, ctx)?;
    let d = cfg.feature_dim;
    let p = params.theta_phi.len();
    let mut j = Array2::zeros((d, p));
    let mut unit = vec![0.0; d];
    let mut row = vec![0.0; p];
    for i in 0..d {
        unit[i] = 1.0;
        row.fill(0.0);
        fwd.vjp_into(params, cfg, &unit, 1.0, &mut row);
        j.row_mut(i).iter_mut().zip(&row).for_each(|(a, b)| *a = *b);
        unit[i] = 0.0;
    }
    Ok(FeatureJacobian { j, context: ctx.into() })
}

/// Error direction `e_y - pi` at one position, plus the features there.
pub(crate) struct PositionTerms {
    pub phi: Vec<f64>,
    pub d: Vec<f64>,
    pub fwd: model::Forward,
}

pub(crate) fn position_terms(params: &Params, cfg: &ModelConfig, ctx: &Context, y: TokenId) -> Result<PositionTerms> {
    if y == 0 || y > cfg.vocab_size {
        return contract(format!("token {y} outside vocabulary 1..={}", cfg.vocab_size));
    }
    let fwd = model::forward(params, cfg, ctx)?;
    let logits = model::logits_from_features(params, cfg, &fwd.phi);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logits for prompt {}", ctx.prompt.id)));
    }
    let mut d: Vec<f64> = model::softmax(&logits).iter().map(|p| -p).collect();
    d[index_of(y)] += 1.0;
    Ok(PositionTerms { phi: fwd.phi.clone(), d, fwd })
}

/// Adds `weight * grad log pi(response | prompt)` into `out`.
pub fn accumulate_logprob_grad(
    params: &Params,
    cfg: &ModelConfig,
    prompt: &Prompt,
    response: &[TokenId],
    weight: f64,
    out: &mut GradVector,
) -> Result<()> {
    if response.is_empty() {
        return contract("logprob_grad of an empty response");
    }
    let dim = cfg.feature_dim;
    for l in 0..response.len() {
        let ctx = Context::new(prompt, &response[..l]);
        let t = position_terms(params, cfg, &ctx, response[l])?;
        // W block: outer(d, phi)
        let w_grad = out.w_mut();
        for (v, dv) in t.d.iter().enumerate() {
            let row = &mut w_grad[v * dim..(v + 1) * dim];
            for (g, f) in row.iter_mut().zip(&t.phi) {
                *g += weight * dv * f;
            }
        }
        // phi block: (W^T d)^T J_phi
        let mut cot = vec![0.0; dim];
        for (v, dv) in t.d.iter().enumerate() {
            for (c, w) in cot.iter_mut().zip(params.w_row(dim, v)) {
                *c += dv * w;
            }
        }
        t.fwd.vjp_into(params, cfg, &cot, weight, out.phi_mut());
    }
    Ok(())
}

/// `grad log pi(response | prompt)` over all parameters.
pub fn logprob_grad(params: &Params, cfg: &ModelConfig, prompt: &Prompt, response: &[TokenId]) -> Result<GradVector> {
    let mut g = GradVector::zeros(&cfg.layout());
    accumulate_logprob_grad(params, cfg, prompt, response, 1.0, &mut g)?;
    Ok(g)
}

/// One prompt's rollouts with their per-sample weights.
#[derive(Debug, Clone, Copy)]
pub struct WeightedGroup<'a> {
    pub prompt: &'a Prompt,
    pub responses: &'a [Vec<TokenId>],
    pub weights: &'a [f64],
}

/// `(1/N) sum_i (1/k) sum_j a_ij grad log pi(y_ij | x_i)`.
pub fn policy_gradient(params: &Params, cfg: &ModelConfig, batch: &[WeightedGroup]) -> Result<GradVector> {
    let mut g = GradVector::zeros(&cfg.layout());
    if batch.is_empty() {
        return Ok(g);
    }
    let n = batch.len() as f64;
    for group in batch {
        if group.responses.is_empty() || group.responses.len() != group.weights.len() {
            return contract(format!(
                "prompt {}: {} responses with {} weights",
                group.prompt.id,
                group.responses.len(),
                group.weights.len()
            ));
        }
        if let Some(a) = group.weights.iter().find(|a| !a.is_finite()) {
            return Err(Error::Numeric(format!("non-finite advantage {a} for prompt {}", group.prompt.id)));
        }
        let k = group.responses.len() as f64;
        for (y, a) in group.responses.iter().zip(group.weights) {
            if *a != 0.0 {
                accumulate_logprob_grad(params, cfg, group.prompt, y, a / (n * k), &mut g)?;
            }
        }
    }
    Ok(g)
}

/// Central finite differences of `f` over every flat parameter coordinate.
pub fn fd_grad<F>(f: F, params: &Params, step: f64) -> Result<GradVector>
where
    F: Fn(&Params) -> Result<f64>,
{
    if !(step > 0.0) {
        return config(format!("finite-difference step must be > 0, got {step}"));
    }
    let mut work = params.clone();
    let n = params.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = params.get(i);
        work.set(i, x + step);
        let fp = f(&work)?;
        work.set(i, x - step);
        let fm = f(&work)?;
        work.set(i, x);
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective when perturbing coordinate {i}")));
        }
        out.push((fp - fm) / (2.0 * step));
    }
    let w = out.split_off(params.theta_phi.len());
    Ok(GradVector::from_parts(out, w))
}

/// Central finite differences of the features over `theta_phi`.
pub fn fd_feature_jacobian(params: &Params, cfg: &ModelConfig, ctx: &Context, step: f64) -> Result<FeatureJacobian> {
    if !(step > 0.0) {
        return config(format!("finite-difference step must be > 0, got {step}"));
    }
    let p = params.theta_phi.len();
    let mut j = Array2::zeros((cfg.feature_dim, p));
    let mut work = params.clone();
    for i in 0..p {
        let x = params.theta_phi[i];
        work.theta_phi[i] = x + step;
        let fp = model::features(&work, cfg, ctx)?;
        work.theta_phi[i] = x - step;
        let fm = model::features(&work, cfg, ctx)?;
        work.theta_phi[i] = x;
        for (r, (a, b)) in fp.iter().zip(&fm).enumerate() {
            if !a.is_finite() || !b.is_finite() {
                return Err(Error::Numeric(format!("non-finite feature when perturbing coordinate {i}")));
            }
            j[[r, i]] = (a - b) / (2.0 * step);
        }
    }
    Ok(FeatureJacobian { j, context: ctx.into() })
}

/// Central finite differences of the logits `W phi(ctx)` over all parameters,
/// shape `V x (|theta_phi| + V D)`.
pub fn fd_logit_jacobian(params: &Params, cfg: &ModelConfig, ctx: &Context, step: f64) -> Result<Array2<f64>> {
    if !(step > 0.0) {
        return config(format!("finite-difference step must be > 0, got {step}"));
    }
    let n = params.len();
    let logits = |p: &Params| -> Result<Vec<f64>> {
        let phi = model::features(p, cfg, ctx)?;
        Ok(model::logits_from_features(p, cfg, &phi))
    };
    let mut jac = Array2::zeros((cfg.v(), n));
    let mut work = params.clone();
    for i in 0..n {
        let x = params.get(i);
        work.set(i, x + step);
        let fp = logits(&work)?;
        work.set(i, x - step);
        let fm = logits(&work)?;
        work.set(i, x);
        for (r, (a, b)) in fp.iter().zip(&fm).enumerate() {
            jac[[r, i]] = (a - b) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Largest `|a - b| / max(1, |a|)` over paired entries; `a` is the analytic side.
pub fn relative_error<'a>(analytic: impl IntoIterator<Item = &'a f64>, numeric: impl IntoIterator<Item = &'a f64>) -> f64 {
    analytic
        .into_iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Largest response space the enumeration oracles accept.
pub const MAX_ENUMERATION: u64 = 10_000;

/// All `V^len` responses in lexicographic order.
pub fn enumerate_responses(v: u32, len: usize) -> Result<Vec<Vec<TokenId>>> {
    let count = (v as u64).checked_pow(len as u32).filter(|c| *c <= MAX_ENUMERATION);
    let Some(count) = count else {
        return config(format!("response space {v}^{len} exceeds {MAX_ENUMERATION}"));
    };
    let mut out = Vec::with_capacity(count as usize);
    let mut cur = vec![1; len];
    for _ in 0..count {
        out.push(cur.clone());
        for pos in (0..len).rev() {
            if cur[pos] < v {
                cur[pos] += 1;
                break;
            }
            cur[pos] = 1;
        }
    }
    Ok(out)
}

/// Max-abs entry of `sum_y pi(y|x) grad log pi(y|x)` over all length-`len`
/// responses. The score-function identity makes this zero.
pub fn score_expectation_check(params: &Params, cfg: &ModelConfig, prompt: &Prompt, len: usize) -> Result<f64> {
    if len == 0 {
        return config("response length must be >= 1");
    }
    let mut acc = GradVector::zeros(&cfg.layout());
    for y in enumerate_responses(cfg.vocab_size, len)? {
        let prob = model::sequence_logprob(params, cfg, prompt, &y)?.exp();
        accumulate_logprob_grad(params, cfg, prompt, &y, prob, &mut acc)?;
    }
    Ok(acc.as_slice().iter().fold(0.0, |m, x| m.max(x.abs())))
}
