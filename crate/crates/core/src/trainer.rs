//! SFT pretraining, KL-regularized policy-gradient RL and the classifier-first
//! schedule, with per-step records that the NTK predictor can replay.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, fit_normalizer, mean_var, NormalizerFit, Prompt, RewardNormalizer, TaskSpec, TokenId, STD_FLOOR};
use crate::error::{config, contract, Error, Result};
use crate::format;
use crate::grad::{self, GradVector, Trainable, WeightedGroup};
use crate::model::{self, Context, ModelConfig, Params};
use crate::ntk;
use crate::rng::{pair_index, stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Reinforce,
    Grpo,
    Rloo,
}

impl Algo {
    pub fn min_k(self) -> usize {
        match self {
            Algo::Reinforce => 1,
            Algo::Grpo | Algo::Rloo => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub algo: Algo,
    pub lr: f64,
    pub kl_coef: f64,
    pub epochs: usize,
    pub prompts_per_batch: usize,
    /// Rollouts per prompt.
    pub k: usize,
    pub clip_norm: Option<f64>,
    /// Classifier-only epochs run before the `epochs` joint epochs.
    pub cf_stage_epochs: usize,
    pub seed: u64,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    /// Samples per prompt used to fit the reward normalizer.
    pub normalizer_samples: usize,
    /// Contexts per step at which the first-order residual is logged.
    pub probe_count: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algo::Rloo,
            lr: 1e-4,
            kl_coef: 0.05,
            epochs: 3,
            prompts_per_batch: 8,
            k: 4,
            clip_norm: Some(1.0),
            cf_stage_epochs: 0,
            seed: 0,
            sft_epochs: 200,
            sft_lr: 0.1,
            normalizer_samples: 4,
            probe_count: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return config(format!("train.lr must be finite and > 0, got {}", self.lr));
        }
        if !(self.kl_coef.is_finite() && self.kl_coef >= 0.0) {
            return config(format!("train.kl_coef must be finite and >= 0, got {}", self.kl_coef));
        }
        if self.k < self.algo.min_k() {
            return config(format!("train.k must be >= {} for {:?}, got {}", self.algo.min_k(), self.algo, self.k));
        }
        if self.prompts_per_batch == 0 {
            return config("train.prompts_per_batch must be >= 1");
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return config(format!("train.clip_norm must be finite and > 0, got {c}"));
            }
        }
        if !(self.sft_lr.is_finite() && self.sft_lr > 0.0) {
            return config(format!("train.sft_lr must be finite and > 0, got {}", self.sft_lr));
        }
        if self.normalizer_samples == 0 {
            return config("train.normalizer_samples must be >= 1");
        }
        Ok(())
    }
}

/// Outcome of supervised pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct SftOutcome {
    pub params: Params,
    /// Negative mean sequence log-likelihood before training and after each epoch.
    pub losses: Vec<f64>,
}

fn sft_loss(params: &Params, cfg: &ModelConfig, corpus: &[(Prompt, Vec<TokenId>)]) -> Result<f64> {
    let mut total = 0.0;
    for (p, y) in corpus {
        total += model::sequence_logprob(params, cfg, p, y)?;
    }
    Ok(-total / corpus.len() as f64)
}

/// Full-batch gradient ascent on the mean sequence log-likelihood.
pub fn sft_pretrain(
    params: &Params,
    cfg: &ModelConfig,
    corpus: &[(Prompt, Vec<TokenId>)],
    epochs: usize,
    lr: f64,
) -> Result<SftOutcome> {
    if corpus.is_empty() {
        return config("SFT corpus is empty");
    }
    params.check_shape(cfg)?;
    let mut params = params.clone();
    let mut losses = vec![sft_loss(&params, cfg, corpus)?];
    let n = corpus.len() as f64;
    for epoch in 0..epochs {
        let mut g = GradVector::zeros(&cfg.layout());
        for (p, y) in corpus {
            grad::accumulate_logprob_grad(&params, cfg, p, y, 1.0 / n, &mut g)?;
        }
        if let Some(i) = g.first_non_finite() {
            return Err(Error::Diverged { step: epoch, reason: format!("non-finite SFT gradient at coordinate {i}") });
        }
        g.apply_to(&mut params, lr);
        let loss = match sft_loss(&params, cfg, corpus) {
            Ok(l) if l.is_finite() => l,
            Ok(l) => return Err(Error::Diverged { step: epoch, reason: format!("SFT loss became {l}") }),
            Err(Error::Numeric(m)) => return Err(Error::Diverged { step: epoch, reason: m }),
            Err(e) => return Err(e),
        };
        log::debug!("sft epoch {} loss {loss:.6}", epoch + 1);
        losses.push(loss);
    }
    Ok(SftOutcome { params, losses })
}

/// Generates the prompts, initializes the model and pretrains it on the SFT
/// corpus drawn from `train.seed`.
pub fn pretrain_reference(model_cfg: &ModelConfig, task: &TaskSpec, train: &TrainConfig) -> Result<(Vec<Prompt>, SftOutcome)> {
    model_cfg.validate()?;
    task.validate()?;
    train.validate()?;
    if model_cfg.vocab_size != task.vocab.size {
        return config(format!("model.vocab_size {} != task vocab {}", model_cfg.vocab_size, task.vocab.size));
    }
    let prompts = corpus::generate_prompts(task)?;
    let init = Params::init(model_cfg)?;
    let data = corpus::sft_corpus(task, &prompts, &mut stream(train.seed, Purpose::SftCorpus, 0));
    let out = sft_pretrain(&init, model_cfg, &data, train.sft_epochs, train.sft_lr)?;
    Ok((prompts, out))
}

/// `r - lambda * log_ratio`.
pub fn khat_from_logratio(r: f64, log_ratio: f64, lambda: f64) -> f64 {
    r - lambda * log_ratio
}

/// KL-penalized reward with the per-sample log-ratio to the reference policy.
pub fn khat(
    r: f64,
    prompt: &Prompt,
    response: &[TokenId],
    params: &Params,
    ref_params: &Params,
    cfg: &ModelConfig,
    lambda: f64,
) -> Result<f64> {
    if !(lambda >= 0.0) {
        return config(format!("KL coefficient must be >= 0, got {lambda}"));
    }
    if lambda == 0.0 {
        return Ok(r);
    }
    let lr = model::sequence_logprob(params, cfg, prompt, response)? - model::sequence_logprob(ref_params, cfg, prompt, response)?;
    Ok(khat_from_logratio(r, lr, lambda))
}

/// Per-sample advantages for one prompt's rollouts.
pub fn advantages(algo: Algo, rewards: &[f64]) -> Result<Vec<f64>> {
    let k = rewards.len();
    if k < algo.min_k() || k == 0 {
        return config(format!("{algo:?} needs at least {} rewards per prompt, got {k}", algo.min_k().max(1)));
    }
    Ok(match algo {
        Algo::Reinforce => rewards.to_vec(),
        Algo::Grpo => {
            let (mean, var) = mean_var(rewards);
            let std = var.sqrt().max(STD_FLOOR);
            rewards.iter().map(|r| (r - mean) / std).collect()
        }
        Algo::Rloo => {
            // r_j - mean of the others == k/(k-1) * (r_j - mean)
            let (mean, _) = mean_var(rewards);
            let scale = k as f64 / (k as f64 - 1.0);
            rewards.iter().map(|r| scale * (r - mean)).collect()
        }
    })
}

/// Everything recorded about one prompt's rollouts in a step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRecord {
    pub prompt: Prompt,
    pub responses: Vec<Vec<TokenId>>,
    pub raw_rewards: Vec<f64>,
    pub normalized_rewards: Vec<f64>,
    pub log_ratios: Vec<f64>,
    pub khat: Vec<f64>,
    /// Weights actually applied to `grad log pi` in the update.
    pub advantages: Vec<f64>,
}

/// A sampled batch, before it is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub groups: Vec<GroupRecord>,
}

impl Batch {
    pub fn weighted_groups(&self) -> Vec<WeightedGroup<'_>> {
        self.groups
            .iter()
            .map(|g| WeightedGroup { prompt: &g.prompt, responses: &g.responses, weights: &g.advantages })
            .collect()
    }
}

/// Logged first-order residual at one probe context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub prompt: Prompt,
    pub prefix: Vec<TokenId>,
    pub residual: f64,
    pub actual: f64,
}

impl Probe {
    pub fn context(&self) -> Context<'_> {
        Context::new(&self.prompt, &self.prefix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub params_before: String,
    pub params_after: String,
    pub trainable: Trainable,
    pub groups: Vec<GroupRecord>,
    /// Norm of the (masked) gradient before clipping.
    pub grad_norm: f64,
    pub clip_scale: f64,
    pub eta: f64,
    pub probes: Vec<Probe>,
}

impl StepRecord {
    pub fn weighted_groups(&self) -> Vec<WeightedGroup<'_>> {
        self.groups
            .iter()
            .map(|g| WeightedGroup { prompt: &g.prompt, responses: &g.responses, weights: &g.advantages })
            .collect()
    }

    /// Multiplier on the policy gradient actually applied.
    pub fn effective_step(&self) -> f64 {
        self.eta * self.clip_scale
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().all(|g| g.khat.iter().chain(&g.advantages).all(|x| x.is_finite()))
    }
}

/// L2 distance of each parameter group from a reference.
pub fn track_groups(reference: &Params, current: &Params, cfg: &ModelConfig) -> Result<Vec<(String, f64)>> {
    if reference.check_shape(cfg).is_err() || current.check_shape(cfg).is_err() {
        return contract("track_groups: parameter layouts differ");
    }
    let layout = cfg.layout();
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let mut out: Vec<(String, f64)> = layout
        .groups
        .iter()
        .map(|g| (g.name.clone(), dist(&reference.theta_phi[g.range()], &current.theta_phi[g.range()])))
        .collect();
    out.push((model::CLASSIFIER.to_string(), dist(&reference.w, &current.w)));
    Ok(out)
}

/// Per-epoch group distances from the reference.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupTrack {
    pub groups: Vec<String>,
    /// `distances[epoch][group]`.
    pub distances: Vec<Vec<f64>>,
}

impl GroupTrack {
    pub fn push(&mut self, entry: Vec<(String, f64)>) -> Result<()> {
        let names: Vec<String> = entry.iter().map(|(n, _)| n.clone()).collect();
        if self.groups.is_empty() {
            self.groups = names;
        } else if self.groups != names {
            return contract("group track entry has different groups");
        }
        self.distances.push(entry.into_iter().map(|(_, d)| d).collect());
        Ok(())
    }

    /// Distances divided by the final-epoch value; groups that never moved stay 0.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        let Some(last) = self.distances.last() else { return Vec::new() };
        self.distances
            .iter()
            .map(|row| row.iter().zip(last).map(|(d, f)| if *f > 0.0 { d / f } else { 0.0 }).collect())
            .collect()
    }

    pub const CSV_HEADER: &'static str = "epoch,group,distance,normalized";

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER.split(','))?;
        for (epoch, (row, norm)) in self.distances.iter().zip(self.normalized()).enumerate() {
            for ((name, d), n) in self.groups.iter().zip(row).zip(norm) {
                w.write_record([epoch.to_string(), name.clone(), d.to_string(), n.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_raw_reward: f64,
    pub mean_khat: f64,
    pub mean_kl: f64,
    /// Mean pre-clip gradient norm over the epoch's steps; 0 at epoch 0.
    pub grad_norm: f64,
    pub distances: Vec<f64>,
    pub first_token_entropy: f64,
    /// Per-prompt first-token entropies, prompt order.
    #[serde(skip)]
    pub entropies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub normalizer: Option<NormalizerFit>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    pub track: GroupTrack,
}

impl RunLog {
    pub fn write_steps_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn summary_header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "mean_raw_reward", "mean_khat", "mean_kl", "grad_norm"].map(String::from).into();
        h.extend(self.track.groups.iter().map(|g| format!("dist_{g}")));
        h.push("first_token_entropy".into());
        h
    }

    pub fn write_summary_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(self.summary_header())?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                e.mean_raw_reward.to_string(),
                e.mean_khat.to_string(),
                e.mean_kl.to_string(),
                e.grad_norm.to_string(),
            ];
            row.extend(e.distances.iter().map(|d| d.to_string()));
            row.push(e.first_token_entropy.to_string());
            w.write_record(row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Long format: `epoch,prompt_id,entropy`.
    pub fn write_entropy_csv<W: Write>(&self, out: W, prompts: &[Prompt]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "prompt_id", "entropy"])?;
        for e in &self.epochs {
            for (p, h) in prompts.iter().zip(&e.entropies) {
                w.write_record([e.epoch.to_string(), p.id.to_string(), h.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// RL state: the moving policy, its frozen reference and the fitted normalizer.
pub struct Trainer<'a> {
    pub model: &'a ModelConfig,
    pub task: &'a TaskSpec,
    pub train: &'a TrainConfig,
    pub prompts: &'a [Prompt],
    pub ref_params: Params,
    pub normalizer: NormalizerFit,
    pub params: Params,
    step: u64,
}

impl<'a> Trainer<'a> {
    /// Starts from `ref_params` and fits the reward normalizer on samples from it.
    pub fn new(
        model: &'a ModelConfig,
        task: &'a TaskSpec,
        train: &'a TrainConfig,
        prompts: &'a [Prompt],
        ref_params: Params,
    ) -> Result<Self> {
        model.validate()?;
        task.validate()?;
        train.validate()?;
        if model.vocab_size != task.vocab.size {
            return config(format!("model.vocab_size {} != task vocab {}", model.vocab_size, task.vocab.size));
        }
        if prompts.is_empty() {
            return config("no prompts to train on");
        }
        ref_params.check_shape(model)?;
        let mut rng = stream(train.seed, Purpose::Normalizer, 0);
        let normalizer = fit_normalizer(prompts, train.normalizer_samples, task, |p| {
            model::sample_response(&ref_params, model, p, task.response_len as usize, &mut rng)
        })?;
        Ok(Self { model, task, train, prompts, params: ref_params.clone(), ref_params, normalizer, step: 0 })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    fn norm(&self) -> &RewardNormalizer {
        &self.normalizer.normalizer
    }

    /// Samples `k` rollouts per prompt at the current parameters and computes
    /// rewards, `khat` and advantages. Does not touch the parameters.
    pub fn collect_batch(&self, batch: &[Prompt]) -> Result<Batch> {
        let (cfg, k) = (self.model, self.train.k);
        let mut groups = Vec::with_capacity(batch.len());
        for (i, prompt) in batch.iter().enumerate() {
            let mut g = GroupRecord {
                prompt: prompt.clone(),
                responses: Vec::with_capacity(k),
                raw_rewards: Vec::with_capacity(k),
                normalized_rewards: Vec::with_capacity(k),
                log_ratios: Vec::with_capacity(k),
                khat: Vec::with_capacity(k),
                advantages: Vec::new(),
            };
            for j in 0..k {
                let mut rng = stream(self.train.seed, Purpose::Rollout, pair_index(self.step, (i * k + j) as u64));
                let y = model::sample_response(&self.params, cfg, prompt, self.task.response_len as usize, &mut rng)?;
                let r = corpus::reward(prompt, &y, self.task)?;
                let rn = self.norm().normalize(r);
                let lr = model::sequence_logprob(&self.params, cfg, prompt, &y)?
                    - model::sequence_logprob(&self.ref_params, cfg, prompt, &y)?;
                g.khat.push(khat_from_logratio(rn, lr, self.train.kl_coef));
                g.responses.push(y);
                g.raw_rewards.push(r);
                g.normalized_rewards.push(rn);
                g.log_ratios.push(lr);
            }
            g.advantages = advantages(self.train.algo, &g.khat)?;
            groups.push(g);
        }
        Ok(Batch { groups })
    }

    /// Applies one gradient-ascent step built from `batch` with learning rate
    /// `eta` and returns its record. The step counter advances.
    pub fn apply_batch(&mut self, batch: Batch, eta: f64, trainable: Trainable, epoch: usize) -> Result<StepRecord> {
        if !(eta.is_finite() && eta >= 0.0) {
            return contract(format!("learning rate must be finite and >= 0, got {eta}"));
        }
        let cfg = self.model;
        let mut g = grad::policy_gradient(&self.params, cfg, &batch.weighted_groups())?;
        trainable.mask(&mut g);
        if let Some(i) = g.first_non_finite() {
            return Err(Error::Diverged { step: self.step as usize, reason: format!("non-finite gradient at coordinate {i}") });
        }
        let grad_norm = g.norm();
        let clip_scale = match self.train.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let before = self.params.clone();
        g.apply_to(&mut self.params, eta * clip_scale);
        if !self.params.is_finite() {
            self.params = before;
            return Err(Error::Diverged { step: self.step as usize, reason: "parameters became non-finite".into() });
        }
        let mut record = StepRecord {
            step: self.step,
            epoch,
            params_before: format::params_digest(cfg, &before),
            params_after: format::params_digest(cfg, &self.params),
            trainable,
            groups: batch.groups,
            grad_norm,
            clip_scale,
            eta,
            probes: Vec::new(),
        };
        let probe_prompts: Vec<Prompt> =
            record.groups.iter().take(self.train.probe_count).map(|g| g.prompt.clone()).collect();
        if !probe_prompts.is_empty() {
            let targets: Vec<Context> = probe_prompts.iter().map(Context::first).collect();
            let res = ntk::taylor_residual(&before, &self.params, cfg, &record, &targets)?;
            record.probes = probe_prompts
                .into_iter()
                .zip(res)
                .map(|(prompt, r)| Probe { prompt, prefix: Vec::new(), residual: r.residual, actual: r.actual })
                .collect();
        }
        self.step += 1;
        Ok(record)
    }

    pub fn rl_step(&mut self, batch: &[Prompt], trainable: Trainable, epoch: usize) -> Result<StepRecord> {
        let b = self.collect_batch(batch)?;
        self.apply_batch(b, self.train.lr, trainable, epoch)
    }

    /// Evaluation pass: one sampled response per prompt for the reward and KL
    /// means, exact first-token entropies.
    pub fn evaluate(&self, epoch: usize) -> Result<EpochSummary> {
        let cfg = self.model;
        let mut rng = stream(self.train.seed, Purpose::Eval, epoch as u64);
        let (mut raw, mut kh, mut kl) = (0.0, 0.0, 0.0);
        let mut entropies = Vec::with_capacity(self.prompts.len());
        for p in self.prompts {
            let y = model::sample_response(&self.params, cfg, p, self.task.response_len as usize, &mut rng)?;
            let r = corpus::reward(p, &y, self.task)?;
            let lr = model::sequence_logprob(&self.params, cfg, p, &y)? - model::sequence_logprob(&self.ref_params, cfg, p, &y)?;
            raw += r;
            kl += lr;
            kh += khat_from_logratio(self.norm().normalize(r), lr, self.train.kl_coef);
            entropies.push(model::next_token_dist(&self.params, cfg, &Context::first(p))?.entropy());
        }
        let n = self.prompts.len() as f64;
        let distances = track_groups(&self.ref_params, &self.params, cfg)?.into_iter().map(|(_, d)| d).collect();
        Ok(EpochSummary {
            epoch,
            mean_raw_reward: raw / n,
            mean_khat: kh / n,
            mean_kl: kl / n,
            grad_norm: 0.0,
            distances,
            first_token_entropy: entropies.iter().sum::<f64>() / n,
            entropies,
        })
    }

    /// Runs `cf_stage_epochs` classifier-only epochs followed by `epochs`
    /// joint epochs. `on_epoch` sees the parameters after every epoch,
    /// including epoch 0 (before any update).
    pub fn run<F>(&mut self, mut on_epoch: F) -> Result<RunLog>
    where
        F: FnMut(usize, &Params) -> Result<()>,
    {
        let mut log = RunLog { normalizer: Some(self.normalizer.clone()), ..RunLog::default() };
        log.track.push(track_groups(&self.ref_params, &self.params, self.model)?)?;
        log.epochs.push(self.evaluate(0)?);
        on_epoch(0, &self.params)?;
        let total = self.train.cf_stage_epochs + self.train.epochs;
        for epoch in 1..=total {
            let trainable = if epoch <= self.train.cf_stage_epochs { Trainable::ClassifierOnly } else { Trainable::All };
            let mut order: Vec<Prompt> = self.prompts.to_vec();
            order.shuffle(&mut stream(self.train.seed, Purpose::Shuffle, epoch as u64));
            let mut norms = Vec::new();
            for chunk in order.chunks(self.train.prompts_per_batch) {
                let rec = self.rl_step(chunk, trainable, epoch)?;
                norms.push(rec.grad_norm);
                log.steps.push(rec);
            }
            log.track.push(track_groups(&self.ref_params, &self.params, self.model)?)?;
            let mut summary = self.evaluate(epoch)?;
            summary.grad_norm = norms.iter().sum::<f64>() / norms.len() as f64;
            log::info!(
                "epoch {epoch} ({trainable:?}): reward {:.4} kl {:.3e} entropy {:.6}",
                summary.mean_raw_reward,
                summary.mean_kl,
                summary.first_token_entropy
            );
            log.epochs.push(summary);
            on_epoch(epoch, &self.params)?;
        }
        Ok(log)
    }
}

/// Plain RL from `ref_params`; with `cf_stage_epochs > 0` the first epochs
/// update only the classifier.
pub fn rl_run(
    model: &ModelConfig,
    task: &TaskSpec,
    train: &TrainConfig,
    prompts: &[Prompt],
    ref_params: &Params,
) -> Result<(RunLog, Params)> {
    let mut t = Trainer::new(model, task, train, prompts, ref_params.clone())?;
    let log = t.run(|_, _| Ok(()))?;
    Ok((log, t.params))
}

/// Classifier-first RL; requires at least one classifier-only epoch.
pub fn cf_rl_run(
    model: &ModelConfig,
    task: &TaskSpec,
    train: &TrainConfig,
    prompts: &[Prompt],
    ref_params: &Params,
) -> Result<(RunLog, Params)> {
    if train.cf_stage_epochs == 0 {
        return config("train.cf_stage_epochs must be >= 1 for classifier-first RL");
    }
    rl_run(model, task, train, prompts, ref_params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_prompts;

    fn small() -> (ModelConfig, TaskSpec, TrainConfig) {
        let task = TaskSpec { prompt_count: 8, ..TaskSpec::default() };
        let train = TrainConfig { prompts_per_batch: 4, epochs: 1, probe_count: 1, ..TrainConfig::default() };
        (ModelConfig::default(), task, train)
    }

    #[test]
    fn khat_examples() {
        assert!((khat_from_logratio(0.5, 2.0, 0.05) - 0.4).abs() < 1e-15);
        let cfg = ModelConfig::default();
        let params = Params::init(&cfg).unwrap();
        let p = Prompt { id: 0, tokens: vec![1, 2] };
        assert_eq!(khat(0.3, &p, &[4, 5], &params, &params, &cfg, 0.05).unwrap(), 0.3);
        let mut moved = params.clone();
        moved.w[0] += 0.5;
        assert_eq!(khat(0.3, &p, &[4, 5], &moved, &params, &cfg, 0.0).unwrap(), 0.3);
        assert!(khat(0.3, &p, &[4], &moved, &params, &cfg, -1.0).is_err());
    }

    #[test]
    fn advantage_examples() {
        let a = advantages(Algo::Grpo, &[1.0, 2.0, 3.0]).unwrap();
        for (x, e) in a.iter().zip([-1.2247, 0.0, 1.2247]) {
            assert!((x - e).abs() < 1e-4);
        }
        assert_eq!(advantages(Algo::Rloo, &[0.25, 1.0]).unwrap(), vec![-0.75, 0.75]);
        assert_eq!(advantages(Algo::Reinforce, &[0.2]).unwrap(), vec![0.2]);
        assert!(matches!(advantages(Algo::Grpo, &[1.0]), Err(Error::Config(_))));
        assert!(matches!(advantages(Algo::Rloo, &[1.0]), Err(Error::Config(_))));
        assert_eq!(advantages(Algo::Grpo, &[0.3; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(advantages(Algo::Rloo, &[0.3; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn rloo_is_leave_one_out() {
        let r = [0.1, -0.7, 2.5, 0.9];
        let a = advantages(Algo::Rloo, &r).unwrap();
        for j in 0..4 {
            let others: f64 = r.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, x)| x).sum::<f64>() / 3.0;
            assert!((a[j] - (r[j] - others)).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { kl_coef: -0.1, ..TrainConfig::default() },
            TrainConfig { algo: Algo::Rloo, k: 1, ..TrainConfig::default() },
            TrainConfig { clip_norm: Some(0.0), ..TrainConfig::default() },
            TrainConfig { prompts_per_batch: 0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
        assert!(TrainConfig { algo: Algo::Reinforce, k: 1, ..TrainConfig::default() }.validate().is_ok());
    }

    #[test]
    fn sft_zero_epochs_and_progress() {
        let cfg = ModelConfig::default();
        let spec = TaskSpec { prompt_count: 8, ..TaskSpec::default() };
        let prompts = generate_prompts(&spec).unwrap();
        let corpus = corpus::sft_corpus(&spec, &prompts, &mut stream(0, Purpose::SftCorpus, 0));
        let params = Params::init(&cfg).unwrap();
        let out = sft_pretrain(&params, &cfg, &corpus, 0, 0.1).unwrap();
        assert_eq!(out.params, params);
        assert_eq!(out.losses.len(), 1);
        let out = sft_pretrain(&params, &cfg, &corpus, 20, 0.1).unwrap();
        assert_eq!(out.losses.len(), 21);
        assert!(out.losses[20] < out.losses[0]);
        assert!(sft_pretrain(&params, &cfg, &[], 1, 0.1).is_err());
    }

    #[test]
    fn sft_divergence_reports_step() {
        let cfg = ModelConfig::default();
        let p = Prompt { id: 0, tokens: vec![1] };
        let params = Params::init(&cfg).unwrap();
        let err = sft_pretrain(&params, &cfg, &[(p, vec![2])], 5, 1e308).unwrap_err();
        assert!(matches!(err, Error::Diverged { step: 0, .. }), "{err}");
    }

    #[test]
    fn zero_lr_step_is_recorded_noop() {
        let (cfg, task, train) = small();
        let prompts = generate_prompts(&task).unwrap();
        let params = Params::init(&cfg).unwrap();
        let mut t = Trainer::new(&cfg, &task, &train, &prompts, params.clone()).unwrap();
        let b = t.collect_batch(&prompts[..2]).unwrap();
        let rec = t.apply_batch(b, 0.0, Trainable::All, 1).unwrap();
        assert_eq!(t.params, params);
        assert_eq!(rec.params_before, rec.params_after);
        assert_eq!(rec.probes[0].residual, 0.0);
        assert_eq!(t.step_index(), 1);
    }

    #[test]
    fn equal_rewards_are_noop_without_kl() {
        let (cfg, task, train) = small();
        let train = TrainConfig { kl_coef: 0.0, ..train };
        let prompts = generate_prompts(&task).unwrap();
        let params = Params::init(&cfg).unwrap();
        for algo in [Algo::Grpo, Algo::Rloo] {
            let train = TrainConfig { algo, ..train.clone() };
            let mut t = Trainer::new(&cfg, &task, &train, &prompts, params.clone()).unwrap();
            let mut b = t.collect_batch(&prompts[..3]).unwrap();
            for g in &mut b.groups {
                g.khat.iter_mut().for_each(|x| *x = 0.37);
                g.advantages = advantages(algo, &g.khat).unwrap();
            }
            t.apply_batch(b, 0.1, Trainable::All, 1).unwrap();
            assert_eq!(t.params, params);
        }
    }

    #[test]
    fn clipping_bounds_norm_and_keeps_direction() {
        let (cfg, task, train) = small();
        let train = TrainConfig { clip_norm: Some(1e-3), algo: Algo::Reinforce, ..train };
        let prompts = generate_prompts(&task).unwrap();
        let params = Params::init(&cfg).unwrap();
        let mut t = Trainer::new(&cfg, &task, &train, &prompts, params.clone()).unwrap();
        let b = t.collect_batch(&prompts[..4]).unwrap();
        let g = grad::policy_gradient(&params, &cfg, &b.weighted_groups()).unwrap();
        let rec = t.apply_batch(b, 1.0, Trainable::All, 1).unwrap();
        assert!(rec.grad_norm > 1e-3);
        let step: Vec<f64> = t.params.flat().iter().zip(params.flat()).map(|(a, b)| a - b).collect();
        let n = step.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(n <= 1e-3 + 1e-12);
        let cos = step.iter().zip(g.as_slice()).map(|(a, b)| a * b).sum::<f64>() / (n * g.norm());
        assert!((cos - 1.0).abs() < 1e-12);
    }

    #[test]
    fn classifier_only_freezes_features() {
        let (cfg, task, train) = small();
        let prompts = generate_prompts(&task).unwrap();
        let params = Params::init(&cfg).unwrap();
        let mut t = Trainer::new(&cfg, &task, &train, &prompts, params.clone()).unwrap();
        t.rl_step(&prompts[..4], Trainable::ClassifierOnly, 1).unwrap();
        assert_eq!(format::theta_phi_bytes(&t.params), format::theta_phi_bytes(&params));
        assert_ne!(t.params.w, params.w);
    }

    #[test]
    fn track_groups_isolation() {
        let cfg = ModelConfig { depth: 2, ..ModelConfig::default() };
        let a = Params::init(&cfg).unwrap();
        assert!(track_groups(&a, &a, &cfg).unwrap().iter().all(|(_, d)| *d == 0.0));
        let mut b = a.clone();
        b.w[3] += 0.3;
        b.w[7] -= 0.4;
        let t = track_groups(&a, &b, &cfg).unwrap();
        let names: Vec<&str> = t.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["embeddings", "hidden_1", "hidden_2", "final_norm", "classifier"]);
        assert!((t[4].1 - 0.5).abs() < 1e-12);
        assert!(t[..4].iter().all(|(_, d)| *d == 0.0));
        let other = Params::init(&ModelConfig { depth: 1, ..cfg.clone() }).unwrap();
        assert!(matches!(track_groups(&a, &other, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn group_track_normalization() {
        let mut gt = GroupTrack::default();
        gt.push(vec![("a".into(), 0.0), ("b".into(), 0.0)]).unwrap();
        gt.push(vec![("a".into(), 0.3), ("b".into(), 0.0)]).unwrap();
        gt.push(vec![("a".into(), 0.7), ("b".into(), 0.0)]).unwrap();
        let n = gt.normalized();
        assert_eq!(n[0], vec![0.0, 0.0]);
        assert_eq!(n[2], vec![1.0, 0.0]);
        let mut buf = Vec::new();
        gt.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("epoch,group,distance,normalized\n0,a,0,0\n"));
        assert!(gt.push(vec![("c".into(), 0.0)]).is_err());
    }

    #[test]
    fn cf_run_requires_stage() {
        let (cfg, task, train) = small();
        let prompts = generate_prompts(&task).unwrap();
        let params = Params::init(&cfg).unwrap();
        assert!(matches!(cf_rl_run(&cfg, &task, &train, &prompts, &params), Err(Error::Config(_))));
    }

    #[test]
    fn replayed_probe_residual_is_bit_exact() {
        let (cfg, task, train) = small();
        let prompts = generate_prompts(&task).unwrap();
        let params = Params::init(&cfg).unwrap();
        let mut t = Trainer::new(&cfg, &task, &train, &prompts, params.clone()).unwrap();
        let rec = t.rl_step(&prompts[..4], Trainable::All, 1).unwrap();
        let targets: Vec<Context> = rec.probes.iter().map(Probe::context).collect();
        let replay = ntk::taylor_residual(&params, &t.params, &cfg, &rec, &targets).unwrap();
        assert_eq!(replay[0].residual.to_bits(), rec.probes[0].residual.to_bits());
        // tampered record
        let mut bad = rec.clone();
        bad.params_after = "00".into();
        assert!(matches!(ntk::taylor_residual(&params, &t.params, &cfg, &bad, &targets), Err(Error::Integrity(_))));
    }
}
