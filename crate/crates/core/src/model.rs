//! Autoregressive softmax policy `pi(. | x, y<l) = softmax(W phi(x, y<l))`.
//!
//! The feature map `phi` mean-pools learned token embeddings over the last
//! `window` tokens of the context, passes the result through one or two tanh
//! layers and multiplies by a learned diagonal scale (`final_norm`). The
//! `nonneg` activation adds an elementwise softplus so every feature vector is
//! strictly positive.

use std::ops::Range;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{index_of, Prompt, TokenId};
use crate::error::{config, contract, Error, Result};
use crate::rng::{self, Purpose, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    NonNeg,
}

impl Activation {
    pub fn tag(self) -> u32 {
        match self {
            Activation::Linear => 0,
            Activation::NonNeg => 1,
        }
    }

    pub fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(Activation::Linear),
            1 => Some(Activation::NonNeg),
            _ => None,
        }
    }

    #[inline]
    fn apply(self, s: f64) -> f64 {
        match self {
            Activation::Linear => s,
            Activation::NonNeg => softplus(s),
        }
    }

    #[inline]
    fn derivative(self, s: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::NonNeg => sigmoid(s),
        }
    }
}

#[inline]
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: u32,
    pub feature_dim: usize,
    pub window: usize,
    pub hidden_width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            feature_dim: 8,
            window: 4,
            hidden_width: 16,
            depth: 1,
            activation: Activation::Linear,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return config("model.vocab_size must be >= 2");
        }
        if self.feature_dim == 0 {
            return config("model.feature_dim must be >= 1");
        }
        if self.window == 0 {
            return config("model.window must be >= 1");
        }
        if self.hidden_width == 0 {
            return config("model.hidden_width must be >= 1");
        }
        if !(1..=2).contains(&self.depth) {
            return config(format!("model.depth must be 1 or 2, got {}", self.depth));
        }
        Ok(())
    }

    pub fn v(&self) -> usize {
        self.vocab_size as usize
    }

    /// (input, output) widths of the tanh layers.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let h = self.hidden_width;
        match self.depth {
            1 => vec![(h, self.feature_dim)],
            _ => vec![(h, h), (h, self.feature_dim)],
        }
    }

    pub fn layout(&self) -> Layout {
        let mut groups = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, len: usize| {
            groups.push(Group { name, offset, len });
            offset += len;
        };
        push("embeddings".into(), self.v() * self.hidden_width);
        for (k, (i, o)) in self.layer_dims().into_iter().enumerate() {
            push(format!("hidden_{}", k + 1), o * i + o);
        }
        push("final_norm".into(), self.feature_dim);
        let phi_len = offset;
        Layout { groups, phi_len, w_len: self.v() * self.feature_dim }
    }
}

/// A named contiguous slice of the feature-map parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl Group {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Group name for the classifier matrix, which lives outside `theta_phi`.
pub const CLASSIFIER: &str = "classifier";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    /// Feature-map groups in storage order; they tile `0..phi_len`.
    pub groups: Vec<Group>,
    pub phi_len: usize,
    pub w_len: usize,
}

impl Layout {
    pub fn total_len(&self) -> usize {
        self.phi_len + self.w_len
    }

    pub fn group(&self, name: &str) -> Option<&Group> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// All groups including the classifier, with offsets into the flat
    /// `theta_phi ++ W` vector.
    pub fn flat_groups(&self) -> Vec<Group> {
        let mut gs = self.groups.clone();
        gs.push(Group { name: CLASSIFIER.into(), offset: self.phi_len, len: self.w_len });
        gs
    }
}

/// Model parameters: feature-map vector and the row-major `V x D` classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub theta_phi: Vec<f64>,
    pub w: Vec<f64>,
}

impl Params {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization, `final_norm`
    /// set to one. Embeddings see one-hot inputs, so their fan-in is 1.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(cfg.seed, Purpose::Init, 0);
        let layout = cfg.layout();
        let mut theta_phi = vec![0.0; layout.phi_len];
        let fill = |slice: &mut [f64], fan_in: usize, rng: &mut Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for x in slice {
                *x = rng.gen_range(-bound..bound);
            }
        };
        let emb = layout.groups[0].range();
        fill(&mut theta_phi[emb], 1, &mut rng);
        for (k, (i, _)) in cfg.layer_dims().into_iter().enumerate() {
            let r = layout.groups[k + 1].range();
            fill(&mut theta_phi[r], i, &mut rng);
        }
        let norm = layout.group("final_norm").expect("final_norm group").range();
        theta_phi[norm].fill(1.0);
        let mut w = vec![0.0; layout.w_len];
        fill(&mut w, cfg.feature_dim, &mut rng);
        Ok(Self { theta_phi, w })
    }

    pub fn check_shape(&self, cfg: &ModelConfig) -> Result<()> {
        let layout = cfg.layout();
        if self.theta_phi.len() != layout.phi_len || self.w.len() != layout.w_len {
            return config(format!(
                "parameter shape ({}, {}) does not match config ({}, {})",
                self.theta_phi.len(),
                self.w.len(),
                layout.phi_len,
                layout.w_len
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.theta_phi.len() + self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entry `i` of the flat `theta_phi ++ W` vector.
    pub fn get(&self, i: usize) -> f64 {
        if i < self.theta_phi.len() {
            self.theta_phi[i]
        } else {
            self.w[i - self.theta_phi.len()]
        }
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let n = self.theta_phi.len();
        if i < n {
            self.theta_phi[i] = value;
        } else {
            self.w[i - n] = value;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.theta_phi.clone();
        v.extend_from_slice(&self.w);
        v
    }

    pub fn w_row(&self, d: usize, row: usize) -> &[f64] {
        &self.w[row * d..(row + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.theta_phi.iter().chain(&self.w).all(|x| x.is_finite())
    }
}

/// Deep copy used as the frozen reference policy.
pub fn snapshot(params: &Params) -> Params {
    params.clone()
}

/// A prompt plus a generated prefix.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub prompt: &'a Prompt,
    pub prefix: &'a [TokenId],
}

impl<'a> Context<'a> {
    pub fn new(prompt: &'a Prompt, prefix: &'a [TokenId]) -> Self {
        Self { prompt, prefix }
    }

    /// First-token context (empty prefix).
    pub fn first(prompt: &'a Prompt) -> Self {
        Self { prompt, prefix: &[] }
    }

    pub fn len(&self) -> usize {
        self.prompt.tokens.len() + self.prefix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The last `c` tokens of `prompt ++ prefix`.
    pub fn window(&self, c: usize) -> impl Iterator<Item = TokenId> + '_ {
        let skip = self.len().saturating_sub(c);
        self.prompt.tokens.iter().chain(self.prefix).skip(skip).copied()
    }

    fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.prompt.tokens.is_empty() {
            return contract(format!("prompt {} is empty", self.prompt.id));
        }
        if let Some(t) = self
            .prompt
            .tokens
            .iter()
            .chain(self.prefix)
            .find(|t| **t == 0 || **t > cfg.vocab_size)
        {
            return contract(format!("token {t} outside vocabulary 1..={} in prompt {}", cfg.vocab_size, self.prompt.id));
        }
        Ok(())
    }
}

/// Intermediate values of one feature evaluation, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    window: Vec<usize>,
    /// Layer inputs; `inputs[0]` is the pooled embedding.
    inputs: Vec<Vec<f64>>,
    /// Output of the last tanh layer.
    last: Vec<f64>,
    /// Pre-activation `final_norm * last`.
    pre: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Typed view of `theta_phi`.
struct Weights<'a> {
    embeddings: &'a [f64],
    layers: Vec<(&'a [f64], &'a [f64], usize, usize)>,
    final_norm: &'a [f64],
}

fn weights<'a>(cfg: &ModelConfig, layout: &Layout, theta: &'a [f64]) -> Weights<'a> {
    let embeddings = &theta[layout.groups[0].range()];
    let layers = cfg
        .layer_dims()
        .into_iter()
        .enumerate()
        .map(|(k, (i, o))| {
            let g = &theta[layout.groups[k + 1].range()];
            let (a, b) = g.split_at(o * i);
            (a, b, i, o)
        })
        .collect();
    let final_norm = &theta[layout.groups.last().expect("groups").range()];
    Weights { embeddings, layers, final_norm }
}

/// Runs the feature map and keeps the intermediates.
pub fn forward(params: &Params, cfg: &ModelConfig, ctx: &Context) -> Result<Forward> {
    params.check_shape(cfg)?;
    ctx.validate(cfg)?;
    let layout = cfg.layout();
    let wts = weights(cfg, &layout, &params.theta_phi);
    let h = cfg.hidden_width;

    let window: Vec<usize> = ctx.window(cfg.window).map(index_of).collect();
    let scale = 1.0 / window.len() as f64;
    let mut pooled = vec![0.0; h];
    for &t in &window {
        for (p, e) in pooled.iter_mut().zip(&wts.embeddings[t * h..(t + 1) * h]) {
            *p += e;
        }
    }
    pooled.iter_mut().for_each(|p| *p *= scale);

    let mut inputs = Vec::with_capacity(wts.layers.len());
    let mut z = pooled;
    for &(a, b, i, o) in &wts.layers {
        let out: Vec<f64> = (0..o)
            .map(|p| {
                let row = &a[p * i..(p + 1) * i];
                (row.iter().zip(&z).map(|(x, y)| x * y).sum::<f64>() + b[p]).tanh()
            })
            .collect();
        inputs.push(std::mem::replace(&mut z, out));
    }
    let pre: Vec<f64> = z.iter().zip(wts.final_norm).map(|(x, g)| x * g).collect();
    let phi = pre.iter().map(|&s| cfg.activation.apply(s)).collect();
    Ok(Forward { window, inputs, last: z, pre, phi })
}

impl Forward {
    /// Accumulates `scale * cot^T (d phi / d theta_phi)` into `out`.
    pub fn vjp_into(&self, params: &Params, cfg: &ModelConfig, cot: &[f64], scale: f64, out: &mut [f64]) {
        let layout = cfg.layout();
        debug_assert_eq!(out.len(), layout.phi_len);
        debug_assert_eq!(cot.len(), cfg.feature_dim);
        let wts = weights(cfg, &layout, &params.theta_phi);

        let c_pre: Vec<f64> = cot
            .iter()
            .zip(&self.pre)
            .map(|(c, &s)| scale * c * cfg.activation.derivative(s))
            .collect();
        let norm = layout.groups.last().expect("groups").range();
        for (k, idx) in norm.enumerate() {
            out[idx] += c_pre[k] * self.last[k];
        }
        let mut c_z: Vec<f64> = c_pre.iter().zip(wts.final_norm).map(|(c, g)| c * g).collect();
        let mut z_out = self.last.clone();

        for (k, &(a, _, i, o)) in wts.layers.iter().enumerate().rev() {
            let group = layout.groups[k + 1].offset;
            let input = &self.inputs[k];
            let c_a: Vec<f64> = c_z.iter().zip(&z_out).map(|(c, z)| c * (1.0 - z * z)).collect();
            for p in 0..o {
                let row = &mut out[group + p * i..group + (p + 1) * i];
                for (r, x) in row.iter_mut().zip(input) {
                    *r += c_a[p] * x;
                }
                out[group + o * i + p] += c_a[p];
            }
            let mut c_in = vec![0.0; i];
            for p in 0..o {
                let row = &a[p * i..(p + 1) * i];
                for (c, w) in c_in.iter_mut().zip(row) {
                    *c += c_a[p] * w;
                }
            }
            c_z = c_in;
            z_out = input.clone();
        }

        let h = cfg.hidden_width;
        let share = 1.0 / self.window.len() as f64;
        for &t in &self.window {
            for (q, c) in c_z.iter().enumerate() {
                out[t * h + q] += share * c;
            }
        }
    }
}

/// Feature vector `phi(ctx)` of length `D`.
pub fn features(params: &Params, cfg: &ModelConfig, ctx: &Context) -> Result<Vec<f64>> {
    Ok(forward(params, cfg, ctx)?.phi)
}

/// `W phi`.
pub fn logits_from_features(params: &Params, cfg: &ModelConfig, phi: &[f64]) -> Vec<f64> {
    let d = cfg.feature_dim;
    (0..cfg.v())
        .map(|v| params.w_row(d, v).iter().zip(phi).map(|(a, b)| a * b).sum())
        .collect()
}

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct DistVector(pub Vec<f64>);

impl DistVector {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        let d = Self(p);
        d.check()?;
        Ok(d)
    }

    pub fn uniform(v: usize) -> Self {
        Self(vec![1.0 / v as f64; v])
    }

    pub fn check(&self) -> Result<()> {
        if self.0.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Numeric("distribution has a negative or non-finite entry".into()));
        }
        let s: f64 = self.0.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Numeric(format!("distribution sums to {s}")));
        }
        Ok(())
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.0[index_of(token)]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn checked_logits(params: &Params, cfg: &ModelConfig, ctx: &Context, phi: &[f64]) -> Result<Vec<f64>> {
    let logits = logits_from_features(params, cfg, phi);
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite logits for prompt {} at prefix length {}",
            ctx.prompt.id,
            ctx.prefix.len()
        )));
    }
    Ok(logits)
}

pub fn next_token_dist(params: &Params, cfg: &ModelConfig, ctx: &Context) -> Result<DistVector> {
    let phi = features(params, cfg, ctx)?;
    let logits = checked_logits(params, cfg, ctx, &phi)?;
    Ok(DistVector(softmax(&logits)))
}

/// `log pi(. | ctx)` as a length-V vector.
pub fn next_token_logprobs(params: &Params, cfg: &ModelConfig, ctx: &Context) -> Result<Vec<f64>> {
    let phi = features(params, cfg, ctx)?;
    Ok(log_softmax(&checked_logits(params, cfg, ctx, &phi)?))
}

/// `log pi(response | prompt)`, summed over positions.
pub fn sequence_logprob(params: &Params, cfg: &ModelConfig, prompt: &Prompt, response: &[TokenId]) -> Result<f64> {
    if response.is_empty() {
        return contract("sequence_logprob of an empty response");
    }
    let mut total = 0.0;
    for l in 0..response.len() {
        let ctx = Context::new(prompt, &response[..l]);
        let lp = next_token_logprobs(params, cfg, &ctx)?;
        let y = response[l];
        if y == 0 || y > cfg.vocab_size {
            return contract(format!("response token {y} outside vocabulary"));
        }
        let v = lp[index_of(y)];
        if v == f64::NEG_INFINITY {
            return Err(Error::Numeric(format!("token {y} has zero probability at position {}", l + 1)));
        }
        total += v;
    }
    Ok(total)
}

/// Draws one token id by inverse-CDF sampling.
pub fn sample_token(dist: &DistVector, rng: &mut Rng) -> TokenId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, p) in dist.0.iter().enumerate() {
        if *p > 0.0 {
            last_nonzero = i;
        }
        acc += p;
        if u < acc {
            return i as TokenId + 1;
        }
    }
    last_nonzero as TokenId + 1
}

/// Samples a response of exactly `len` tokens at temperature 1.
pub fn sample_response(params: &Params, cfg: &ModelConfig, prompt: &Prompt, len: usize, rng: &mut Rng) -> Result<Vec<TokenId>> {
    if len == 0 {
        return contract("response length must be >= 1");
    }
    let mut response = Vec::with_capacity(len);
    for _ in 0..len {
        let dist = next_token_dist(params, cfg, &Context::new(prompt, &response))?;
        response.push(sample_token(&dist, rng));
    }
    Ok(response)
}
