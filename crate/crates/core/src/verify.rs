//! Oracle checks: analytic derivatives against finite differences, the kernel
//! split against the full finite-difference kernel, the first-order update
//! law, the argmax property of the Representation update and the score
//! identity.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, Prompt, TaskSpec, TokenId};
use crate::error::Result;
use crate::grad::{self, Trainable};
use crate::model::{self, Activation, Context, ModelConfig, Params};
use crate::ntk::{self, CenterOp, PairState};
use crate::rng::{stream, Purpose, Rng};
use crate::trainer::{self, Algo, TrainConfig, Trainer};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;
pub const ADDITIVITY_TOL: f64 = 1e-12;
pub const TAYLOR_ETAS: [f64; 4] = [1e-4, 5e-5, 2.5e-5, 1.25e-5];
pub const TAYLOR_RATIO: (f64, f64) = (3.2, 4.8);
pub const TAYLOR_REL_TOL: f64 = 0.05;
pub const SCORE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Self { name: name.into(), passed, detail }
    }
}

/// A random model config around `base` with random seed, depth and activation.
fn random_config(base: &ModelConfig, rng: &mut Rng) -> ModelConfig {
    ModelConfig {
        seed: rng.gen(),
        depth: rng.gen_range(1..=2),
        activation: if rng.gen_bool(0.5) { Activation::Linear } else { Activation::NonNeg },
        ..base.clone()
    }
}

fn random_prompt(v: u32, id: u32, rng: &mut Rng) -> Prompt {
    let len = rng.gen_range(1..=6);
    Prompt { id, tokens: (0..len).map(|_| rng.gen_range(1..=v)).collect() }
}

fn random_tokens(v: u32, len: usize, rng: &mut Rng) -> Vec<TokenId> {
    (0..len).map(|_| rng.gen_range(1..=v)).collect()
}

/// Analytic `grad log pi` and feature Jacobians against central differences.
pub fn check_gradients(base: &ModelConfig, draws: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream(seed, Purpose::Verify, 1);
    let (mut worst_grad, mut worst_jac) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let cfg = random_config(base, &mut rng);
        let params = Params::init(&cfg)?;
        let p = random_prompt(cfg.vocab_size, 0, &mut rng);
        let len = rng.gen_range(1..=4);
        let y = random_tokens(cfg.vocab_size, len, &mut rng);
        let a = grad::logprob_grad(&params, &cfg, &p, &y)?;
        let n = grad::fd_grad(|q| model::sequence_logprob(q, &cfg, &p, &y), &params, FD_STEP)?;
        worst_grad = worst_grad.max(grad::relative_error(a.as_slice(), n.as_slice()));
        let prefix = &y[..rng.gen_range(0..len)];
        let ctx = Context::new(&p, prefix);
        let ja = grad::feature_jacobian(&params, &cfg, &ctx)?;
        let jn = grad::fd_feature_jacobian(&params, &cfg, &ctx, FD_STEP)?;
        worst_jac = worst_jac.max(grad::relative_error(ja.j.iter(), jn.j.iter()));
    }
    Ok(CheckOutcome::new(
        "gradient oracle",
        worst_grad <= GRAD_TOL && worst_jac <= GRAD_TOL,
        format!("{draws} draws, max rel err logprob_grad {worst_grad:.2e}, feature_jacobian {worst_jac:.2e} (tol {GRAD_TOL:.0e})"),
    ))
}

/// `rep_scalar I + grad` against `J_a J_b^T` from finite-difference logit
/// Jacobians over all parameters, plus additivity of the update split.
pub fn check_decomposition(base: &ModelConfig, draws: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream(seed, Purpose::Verify, 2);
    let (mut worst_k, mut worst_add) = (0.0f64, 0.0f64);
    for _ in 0..draws {
        let cfg = random_config(base, &mut rng);
        let params = Params::init(&cfg)?;
        let (pa, pb) = (random_prompt(cfg.vocab_size, 0, &mut rng), random_prompt(cfg.vocab_size, 1, &mut rng));
        let (ya, yb) = (random_tokens(cfg.vocab_size, rng.gen_range(0..3), &mut rng), random_tokens(cfg.vocab_size, rng.gen_range(0..3), &mut rng));
        let (ca, cb) = (Context::new(&pa, &ya), Context::new(&pb, &yb));
        let token = rng.gen_range(1..=cfg.vocab_size);
        let st = PairState::new(&params, &cfg, &ca, &cb, token)?;
        let fa = grad::fd_logit_jacobian(&params, &cfg, &ca, FD_STEP)?;
        let fb = grad::fd_logit_jacobian(&params, &cfg, &cb, FD_STEP)?;
        let full = fa.dot(&fb.t());
        worst_k = worst_k.max(grad::relative_error(st.block.total().iter(), full.iter()));
        let (r, g, c) = (st.u_rep(), st.u_grad(), st.u_combined());
        let sum: Vec<f64> = r.v.iter().zip(&g.v).map(|(x, y)| x + y).collect();
        worst_add = worst_add.max(ntk::max_abs_diff(&sum, &c.v));
    }
    Ok(CheckOutcome::new(
        "kernel decomposition",
        worst_k <= GRAD_TOL && worst_add <= ADDITIVITY_TOL,
        format!("{draws} draws, max rel err vs fd kernel {worst_k:.2e}, additivity {worst_add:.2e}"),
    ))
}

/// Argmax of the Representation update equals the realized token when the
/// feature inner product is nonnegative.
pub fn check_rep_argmax(base: &ModelConfig, triples: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream(seed, Purpose::Verify, 3);
    let mut hits = 0usize;
    for i in 0..triples {
        let cfg = ModelConfig { activation: Activation::NonNeg, seed: rng.gen(), depth: rng.gen_range(1..=2), ..base.clone() };
        let params = Params::init(&cfg)?;
        let (pt, ps) = (random_prompt(cfg.vocab_size, 0, &mut rng), random_prompt(cfg.vocab_size, 1, &mut rng));
        let prefix_t = random_tokens(cfg.vocab_size, rng.gen_range(0..4), &mut rng);
        let prefix_s = random_tokens(cfg.vocab_size, rng.gen_range(0..4), &mut rng);
        let (ct, cs) = (Context::new(&pt, &prefix_t), Context::new(&ps, &prefix_s));
        let pi_s = model::next_token_dist(&params, &cfg, &cs)?;
        let y = model::sample_token(&pi_s, &mut rng);
        // rep part only needs the features; skip the Jacobians
        let rep = model::features(&params, &cfg, &ct)?.iter().zip(model::features(&params, &cfg, &cs)?).map(|(a, b)| a * b).sum::<f64>();
        let t = CenterOp::new(model::next_token_dist(&params, &cfg, &ct)?)?;
        let d = ntk::error_dir(&pi_s, y)?;
        let u: Vec<f64> = t.apply(&d.d).into_iter().map(|x| rep * x).collect();
        let best = u.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|(j, _)| j).unwrap_or(0);
        if best == corpus::index_of(y) {
            hits += 1;
        } else {
            log::warn!("argmax miss at triple {i}: rep_scalar {rep:.3e}");
        }
    }
    Ok(CheckOutcome::new(
        "representation argmax",
        hits == triples,
        format!("{hits}/{triples} triples with argmax u_rep = sampled token"),
    ))
}

/// Enumerated `E_y[grad log pi]` over all `V^L` responses.
pub fn check_score_identity(draws: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream(seed, Purpose::Verify, 4);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let cfg = ModelConfig { vocab_size: 3, ..random_config(&ModelConfig::default(), &mut rng) };
        let params = Params::init(&cfg)?;
        let p = random_prompt(3, 0, &mut rng);
        worst = worst.max(grad::score_expectation_check(&params, &cfg, &p, 2)?);
    }
    Ok(CheckOutcome::new(
        "score identity",
        worst <= SCORE_TOL,
        format!("V=3 L=2, {draws} draws, max |E[grad log pi]| {worst:.2e} (tol {SCORE_TOL:.0e})"),
    ))
}

/// Residuals of one step at each learning rate in [`TAYLOR_ETAS`], all from
/// the same state and sampled batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaylorScan {
    pub etas: Vec<f64>,
    /// Max over probe contexts of `max_v |actual - predicted|`.
    pub residuals: Vec<f64>,
    /// Max over probe contexts of `max_v |actual|`.
    pub actuals: Vec<f64>,
}

impl TaylorScan {
    pub fn ratios(&self) -> Vec<f64> {
        self.residuals.windows(2).map(|w| w[0] / w[1]).collect()
    }

    pub fn relative(&self) -> f64 {
        self.residuals[0] / self.actuals[0]
    }
}

pub fn taylor_scan(model_cfg: &ModelConfig, task: &TaskSpec, train: &TrainConfig, params: &Params) -> Result<TaylorScan> {
    let prompts = corpus::generate_prompts(task)?;
    let probe = TrainConfig { probe_count: 0, ..train.clone() };
    let base = Trainer::new(model_cfg, task, &probe, &prompts, params.clone())?;
    let batch_prompts = &prompts[..probe.prompts_per_batch.min(prompts.len())];
    let batch = base.collect_batch(batch_prompts)?;
    let targets: Vec<Context> = batch_prompts.iter().map(Context::first).collect();
    let mut scan = TaylorScan { etas: TAYLOR_ETAS.to_vec(), residuals: Vec::new(), actuals: Vec::new() };
    for eta in TAYLOR_ETAS {
        let mut t = Trainer::new(model_cfg, task, &probe, &prompts, params.clone())?;
        let rec = t.apply_batch(batch.clone(), eta, Trainable::All, 1)?;
        let res = ntk::taylor_residual(params, &t.params, model_cfg, &rec, &targets)?;
        scan.residuals.push(res.iter().map(|r| r.residual).fold(0.0, f64::max));
        scan.actuals.push(res.iter().map(|r| r.actual).fold(0.0, f64::max));
    }
    Ok(scan)
}

pub fn check_taylor(model_cfg: &ModelConfig, task: &TaskSpec, train: &TrainConfig, params: &Params) -> Result<CheckOutcome> {
    let scan = taylor_scan(model_cfg, task, train, params)?;
    let ratios = scan.ratios();
    let rel = scan.relative();
    let ok = ratios.iter().all(|r| (TAYLOR_RATIO.0..=TAYLOR_RATIO.1).contains(r)) && rel <= TAYLOR_REL_TOL;
    Ok(CheckOutcome::new(
        "first-order law",
        ok,
        format!(
            "residuals {:?}, halving ratios {:?}, relative residual at eta=1e-4 {rel:.2e}",
            scan.residuals.iter().map(|r| format!("{r:.3e}")).collect::<Vec<_>>(),
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>()
        ),
    ))
}

/// GRPO centering, the RLOO closed form and the GRPO (1,2,3) value.
pub fn check_estimators(seed: u64) -> Result<CheckOutcome> {
    let mut rng = stream(seed, Purpose::Verify, 5);
    let (mut grpo_sum, mut rloo_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        for k in 2..=4usize {
            let r: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            grpo_sum = grpo_sum.max(trainer::advantages(Algo::Grpo, &r)?.iter().sum::<f64>().abs());
            let mean = r.iter().sum::<f64>() / k as f64;
            let a = trainer::advantages(Algo::Rloo, &r)?;
            for (x, rj) in a.iter().zip(&r) {
                rloo_err = rloo_err.max((x - k as f64 / (k as f64 - 1.0) * (rj - mean)).abs());
            }
        }
    }
    let g = trainer::advantages(Algo::Grpo, &[1.0, 2.0, 3.0])?;
    let g_err = g.iter().zip([-1.2247, 0.0, 1.2247]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Ok(CheckOutcome::new(
        "estimator algebra",
        grpo_sum <= 1e-9 && rloo_err <= 1e-12 && g_err <= 1e-4,
        format!("max |sum grpo| {grpo_sum:.1e}, rloo closed-form err {rloo_err:.1e}, grpo(1,2,3) = {g:.4?}"),
    ))
}

/// Settings for the full suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub seed: u64,
    pub draws: usize,
    pub argmax_triples: usize,
    pub score_draws: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { seed: 0, draws: 20, argmax_triples: 1000, score_draws: 5 }
    }
}

/// Runs every check. The first-order law uses `params` on the given task.
pub fn run_all(
    v: &VerifyConfig,
    model_cfg: &ModelConfig,
    task: &TaskSpec,
    train: &TrainConfig,
    params: &Params,
) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_gradients(model_cfg, v.draws, v.seed)?,
        check_decomposition(model_cfg, v.draws, v.seed)?,
        check_taylor(model_cfg, task, train, params)?,
        check_rep_argmax(model_cfg, v.argmax_triples, v.seed)?,
        check_score_identity(v.score_draws, v.seed)?,
        check_estimators(v.seed)?,
    ])
}
