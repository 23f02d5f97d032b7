//! Empirical NTK between two contexts' logit maps and the first-order
//! prediction of how one gradient step moves `log pi`.
//!
//! The kernel splits as `K = rep_scalar * I_V + grad`, with
//! `rep_scalar = <phi_a, phi_b>` contributed by the classifier and
//! `grad = (W J_a)(W J_b)^T` contributed by the feature map. The centering
//! operator `T = I - 1 pi^T` maps a logit-space change to the induced change
//! in log-probabilities, and `d = e_y - pi` is the log-likelihood gradient
//! with respect to the logits for a realized token `y`.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::corpus::{index_of, TokenId};
use crate::error::{config, contract, Error, Result};
use crate::format;
use crate::grad::{self, ContextId, FeatureJacobian, Trainable, WeightedGroup};
use crate::model::{self, Context, DistVector, ModelConfig, Params};
use crate::trainer::StepRecord;

/// `T = I_V - 1 pi^T` for the conditioning distribution `pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterOp {
    pub pi: DistVector,
}

impl CenterOp {
    pub fn new(pi: DistVector) -> Result<Self> {
        pi.check()?;
        Ok(Self { pi })
    }

    /// `a - (pi . a) 1`.
    pub fn apply(&self, a: &[f64]) -> Vec<f64> {
        let shift: f64 = self.pi.0.iter().zip(a).map(|(p, x)| p * x).sum();
        a.iter().map(|x| x - shift).collect()
    }
}

pub fn center_apply(t: &CenterOp, a: &[f64]) -> Vec<f64> {
    t.apply(a)
}

/// `d = e_y - pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDir {
    pub d: Vec<f64>,
    pub token: TokenId,
}

pub fn error_dir(pi: &DistVector, y: TokenId) -> Result<ErrorDir> {
    if y == 0 || y as usize > pi.len() {
        return contract(format!("token {y} outside 1..={}", pi.len()));
    }
    let mut d: Vec<f64> = pi.0.iter().map(|p| -p).collect();
    d[index_of(y)] += 1.0;
    Ok(ErrorDir { d, token: y })
}

/// One `V x V` block of the empirical NTK, split into its two components.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlock {
    /// `<phi(ctx_a), phi(ctx_b)>`; the Representation part is this times `I_V`.
    pub rep_scalar: f64,
    /// Gradient part `(W J_a)(W J_b)^T`.
    pub grad: Array2<f64>,
}

impl KernelBlock {
    pub fn total(&self) -> Array2<f64> {
        let mut t = self.grad.clone();
        t.diag_mut().iter_mut().for_each(|x| *x += self.rep_scalar);
        t
    }

    pub fn grad_times(&self, d: &[f64]) -> Vec<f64> {
        self.grad.dot(&Array1::from(d.to_vec())).to_vec()
    }
}

fn w_view<'a>(params: &'a Params, cfg: &ModelConfig) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((cfg.v(), cfg.feature_dim), &params.w).expect("classifier shape")
}

fn check_jacobian(jac: &FeatureJacobian, cfg: &ModelConfig, ctx: &Context, phi_len: usize) -> Result<()> {
    if jac.j.dim() != (cfg.feature_dim, phi_len) {
        return config(format!(
            "feature jacobian has shape {:?}, expected ({}, {phi_len})",
            jac.j.dim(),
            cfg.feature_dim
        ));
    }
    if jac.context != ContextId::from(ctx) {
        return contract(format!("jacobian for {:?} passed with context {:?}", jac.context, ContextId::from(ctx)));
    }
    Ok(())
}

/// Kernel block between `ctx_a` and `ctx_b` from their feature Jacobians.
pub fn kernel_block(
    params: &Params,
    cfg: &ModelConfig,
    ctx_a: &Context,
    ctx_b: &Context,
    j_a: &FeatureJacobian,
    j_b: &FeatureJacobian,
) -> Result<KernelBlock> {
    params.check_shape(cfg)?;
    let phi_len = params.theta_phi.len();
    check_jacobian(j_a, cfg, ctx_a, phi_len)?;
    check_jacobian(j_b, cfg, ctx_b, phi_len)?;
    let phi_a = model::features(params, cfg, ctx_a)?;
    let phi_b = model::features(params, cfg, ctx_b)?;
    Ok(block_from_parts(params, cfg, &phi_a, &phi_b, &j_a.j, &j_b.j))
}

fn block_from_parts(
    params: &Params,
    cfg: &ModelConfig,
    phi_a: &[f64],
    phi_b: &[f64],
    j_a: &Array2<f64>,
    j_b: &Array2<f64>,
) -> KernelBlock {
    let w = w_view(params, cfg);
    let wa = w.dot(j_a);
    let wb = w.dot(j_b);
    KernelBlock { rep_scalar: dot(phi_a, phi_b), grad: wa.dot(&wb.t()) }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Rep,
    Grad,
    Combined,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateVector {
    pub v: Vec<f64>,
    pub role: Role,
}

/// `T R d = rep_scalar * T d`.
pub fn u_rep(t: &CenterOp, block: &KernelBlock, d: &ErrorDir) -> UpdateVector {
    let v = t.apply(&d.d).into_iter().map(|x| block.rep_scalar * x).collect();
    UpdateVector { v, role: Role::Rep }
}

/// `T G d`.
pub fn u_grad(t: &CenterOp, block: &KernelBlock, d: &ErrorDir) -> UpdateVector {
    UpdateVector { v: t.apply(&block.grad_times(&d.d)), role: Role::Grad }
}

/// `T K d` computed directly from the total block.
pub fn u_combined(t: &CenterOp, block: &KernelBlock, d: &ErrorDir) -> UpdateVector {
    let kd = block.total().dot(&Array1::from(d.d.clone())).to_vec();
    UpdateVector { v: t.apply(&kd), role: Role::Combined }
}

/// Everything the update decomposition needs for one (target, source, token)
/// triple.
#[derive(Debug, Clone)]
pub struct PairState {
    pub center: CenterOp,
    pub block: KernelBlock,
    pub error: ErrorDir,
}

impl PairState {
    pub fn new(params: &Params, cfg: &ModelConfig, target: &Context, source: &Context, y: TokenId) -> Result<Self> {
        let center = CenterOp::new(model::next_token_dist(params, cfg, target)?)?;
        let error = error_dir(&model::next_token_dist(params, cfg, source)?, y)?;
        let j_t = grad::feature_jacobian(params, cfg, target)?;
        let j_s = grad::feature_jacobian(params, cfg, source)?;
        let block = kernel_block(params, cfg, target, source, &j_t, &j_s)?;
        Ok(Self { center, block, error })
    }

    pub fn u_rep(&self) -> UpdateVector {
        u_rep(&self.center, &self.block, &self.error)
    }

    pub fn u_grad(&self) -> UpdateVector {
        u_grad(&self.center, &self.block, &self.error)
    }

    pub fn u_combined(&self) -> UpdateVector {
        u_combined(&self.center, &self.block, &self.error)
    }
}

/// Per-position data of the sampled batch, shared across target contexts.
struct SourceTerm {
    phi: Vec<f64>,
    jac: Array2<f64>,
    d: Vec<f64>,
    weight: f64,
}

/// First-order predictor of `Delta log pi` for one update built from a
/// weighted batch.
pub struct Predictor<'a> {
    params: &'a Params,
    cfg: &'a ModelConfig,
    sources: Vec<SourceTerm>,
    trainable: Trainable,
}

impl<'a> Predictor<'a> {
    /// `step` is the scalar multiplying the policy gradient in the update
    /// (learning rate times any clipping factor).
    pub fn new(
        params: &'a Params,
        cfg: &'a ModelConfig,
        batch: &[WeightedGroup],
        step: f64,
        trainable: Trainable,
    ) -> Result<Self> {
        if !(step.is_finite() && step >= 0.0) {
            return contract(format!("step size must be finite and >= 0, got {step}"));
        }
        let mut sources = Vec::new();
        let n = batch.len() as f64;
        for group in batch {
            if group.responses.len() != group.weights.len() || group.responses.is_empty() {
                return contract(format!("prompt {}: responses and weights disagree", group.prompt.id));
            }
            let k = group.responses.len() as f64;
            for (y, &w) in group.responses.iter().zip(group.weights) {
                if !w.is_finite() {
                    return Err(Error::Numeric(format!("non-finite weight for prompt {}", group.prompt.id)));
                }
                let weight = step * w / (n * k);
                if weight == 0.0 {
                    continue;
                }
                for l in 0..y.len() {
                    let ctx = Context::new(group.prompt, &y[..l]);
                    let terms = grad::position_terms(params, cfg, &ctx, y[l])?;
                    let jac = match trainable {
                        Trainable::All => grad::feature_jacobian(params, cfg, &ctx)?.j,
                        Trainable::ClassifierOnly => Array2::zeros((0, 0)),
                    };
                    sources.push(SourceTerm { phi: terms.phi, jac, d: terms.d, weight });
                }
            }
        }
        Ok(Self { params, cfg, sources, trainable })
    }

    /// `(eta/N) sum_i (1/k) sum_j sum_l w_ij T_target K(target, ctx_ijl) d_ijl`.
    pub fn predict(&self, target: &Context) -> Result<Vec<f64>> {
        let center = CenterOp::new(model::next_token_dist(self.params, self.cfg, target)?)?;
        let v = self.cfg.v();
        let mut acc = vec![0.0; v];
        if self.sources.is_empty() {
            return Ok(acc);
        }
        let phi_t = model::features(self.params, self.cfg, target)?;
        let j_t = match self.trainable {
            Trainable::All => Some(grad::feature_jacobian(self.params, self.cfg, target)?.j),
            Trainable::ClassifierOnly => None,
        };
        for s in &self.sources {
            let kd: Vec<f64> = match &j_t {
                Some(j_t) => {
                    let block = block_from_parts(self.params, self.cfg, &phi_t, &s.phi, j_t, &s.jac);
                    block.total().dot(&Array1::from(s.d.clone())).to_vec()
                }
                // only W moves: the kernel reduces to its Representation part
                None => {
                    let r = dot(&phi_t, &s.phi);
                    s.d.iter().map(|x| r * x).collect()
                }
            };
            for (a, u) in acc.iter_mut().zip(center.apply(&kd)) {
                *a += s.weight * u;
            }
        }
        Ok(acc)
    }
}

/// Prop-style first-order prediction for a single target context.
pub fn predicted_delta_logpi(
    params: &Params,
    cfg: &ModelConfig,
    target: &Context,
    batch: &[WeightedGroup],
    step: f64,
    trainable: Trainable,
) -> Result<Vec<f64>> {
    Predictor::new(params, cfg, batch, step, trainable)?.predict(target)
}

/// Measured `log pi_after(.|ctx) - log pi_before(.|ctx)`.
pub fn actual_delta_logpi(before: &Params, after: &Params, cfg: &ModelConfig, target: &Context) -> Result<Vec<f64>> {
    let a = model::next_token_logprobs(after, cfg, target)?;
    let b = model::next_token_logprobs(before, cfg, target)?;
    Ok(a.iter().zip(&b).map(|(x, y)| x - y).collect())
}

/// Per-target residuals of a recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    /// `max_v |actual - predicted|`.
    pub residual: f64,
    /// `max_v |actual|`.
    pub actual: f64,
}

/// Replays `record` from `before` and compares the first-order prediction to
/// the measured change at each target. Parameter digests must match the record.
pub fn taylor_residual(
    before: &Params,
    after: &Params,
    cfg: &ModelConfig,
    record: &StepRecord,
    targets: &[Context],
) -> Result<Vec<Residual>> {
    if format::params_digest(cfg, before) != record.params_before {
        return Err(Error::Integrity(format!("step {}: params-before digest mismatch", record.step)));
    }
    if format::params_digest(cfg, after) != record.params_after {
        return Err(Error::Integrity(format!("step {}: params-after digest mismatch", record.step)));
    }
    let groups = record.weighted_groups();
    let predictor = Predictor::new(before, cfg, &groups, record.effective_step(), record.trainable)?;
    targets
        .iter()
        .map(|t| {
            let predicted = predictor.predict(t)?;
            let actual = actual_delta_logpi(before, after, cfg, t)?;
            Ok(Residual {
                residual: max_abs_diff(&actual, &predicted),
                actual: actual.iter().fold(0.0, |m, x| m.max(x.abs())),
            })
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// One CSV row of a kernel or update export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRow {
    pub target_ctx_id: String,
    pub source_ctx_id: String,
    pub position: usize,
    pub component: String,
    /// Token id for vectors, `row:col` token ids for matrix entries.
    pub v: String,
    pub value: f64,
}

pub fn ctx_label(id: ContextId) -> String {
    format!("p{}@{}", id.prompt, id.position)
}

/// Rows for one pair: the rep scalar, every grad entry, and both update vectors.
pub fn pair_rows(target: ContextId, source: ContextId, state: &PairState) -> Vec<KernelRow> {
    let (t, s) = (ctx_label(target), ctx_label(source));
    let row = |component: &str, v: String, value: f64| KernelRow {
        target_ctx_id: t.clone(),
        source_ctx_id: s.clone(),
        position: source.position + 1,
        component: component.into(),
        v,
        value,
    };
    let mut rows = vec![row("rep_scalar", String::new(), state.block.rep_scalar)];
    for ((r, c), value) in state.block.grad.indexed_iter() {
        rows.push(row("grad", format!("{}:{}", r + 1, c + 1), *value));
    }
    for u in [state.u_rep(), state.u_grad()] {
        let name = match u.role {
            Role::Rep => "u_rep",
            Role::Grad => "u_grad",
            Role::Combined => "u_combined",
        };
        for (i, value) in u.v.iter().enumerate() {
            rows.push(row(name, (i + 1).to_string(), *value));
        }
    }
    rows
}

pub fn write_kernel_csv<W: Write>(out: W, rows: &[KernelRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
