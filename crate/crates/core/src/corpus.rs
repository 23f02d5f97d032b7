//! Synthetic task environment: vocabulary, prompts, a bounded pattern-match
//! reward and the reward-normalization protocol.
//!
//! Token ids are `1..=V` everywhere in the crate; index `id - 1` addresses rows
//! of the classifier and entries of a distribution vector.

use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, Error, Result};
use crate::rng::Rng;

pub type TokenId = u32;

/// Floor applied to the normalizer's standard deviation.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocab {
    pub size: u32,
}

impl Vocab {
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return config(format!("vocabulary size must be >= 2, got {size}"));
        }
        Ok(Self { size })
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (1..=self.size).contains(&token)
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> {
        1..=self.size
    }
}

/// Converts a token id to its zero-based row index.
#[inline]
pub fn index_of(token: TokenId) -> usize {
    debug_assert!(token >= 1);
    (token - 1) as usize
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u32,
    pub tokens: Vec<TokenId>,
}

/// Task definition. The reward rewards responses that continue the prompt's
/// last token as an arithmetic progression with step `stride` (mod V).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub vocab: Vocab,
    pub prompt_count: u32,
    pub min_prompt_len: u32,
    pub max_prompt_len: u32,
    pub response_len: u32,
    pub stride: u32,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            vocab: Vocab { size: 16 },
            prompt_count: 32,
            min_prompt_len: 2,
            max_prompt_len: 6,
            response_len: 8,
            stride: 1,
            seed: 0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        Vocab::new(self.vocab.size)?;
        if self.prompt_count == 0 {
            return config("task.prompt_count must be >= 1");
        }
        if self.response_len == 0 {
            return config("task.response_len must be >= 1");
        }
        if self.min_prompt_len == 0 || self.min_prompt_len > self.max_prompt_len {
            return config(format!(
                "task prompt length bounds invalid: min {} max {}",
                self.min_prompt_len, self.max_prompt_len
            ));
        }
        if self.stride % self.vocab.size == 0 {
            return config("task.stride must not be a multiple of the vocabulary size");
        }
        Ok(())
    }

    /// The reward-optimal response for `prompt`.
    pub fn target_response(&self, prompt: &Prompt) -> Vec<TokenId> {
        let v = self.vocab.size as u64;
        let anchor = *prompt.tokens.last().expect("prompt is non-empty") as u64 - 1;
        (1..=self.response_len as u64)
            .map(|l| ((anchor + l * self.stride as u64) % v) as TokenId + 1)
            .collect()
    }
}

/// Generates the task's prompt set. Deterministic in `spec.seed`.
pub fn generate_prompts(spec: &TaskSpec) -> Result<Vec<Prompt>> {
    spec.validate()?;
    let mut rng = crate::rng::stream(spec.seed, crate::rng::Purpose::Prompts, 0);
    Ok((0..spec.prompt_count)
        .map(|id| {
            let len = rng.gen_range(spec.min_prompt_len..=spec.max_prompt_len);
            let tokens = (0..len).map(|_| rng.gen_range(1..=spec.vocab.size)).collect();
            Prompt { id, tokens }
        })
        .collect())
}

/// Pattern-match reward in `[-1, 1]`: `2 * (matching fraction) - 1`.
pub fn reward(prompt: &Prompt, response: &[TokenId], spec: &TaskSpec) -> Result<f64> {
    if response.is_empty() {
        return contract("reward of an empty response");
    }
    if response.len() > spec.response_len as usize {
        return contract(format!(
            "response length {} exceeds task limit {}",
            response.len(),
            spec.response_len
        ));
    }
    let target = spec.target_response(prompt);
    let hits = response.iter().zip(&target).filter(|(a, b)| a == b).count();
    Ok(2.0 * hits as f64 / response.len() as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardNormalizer {
    pub mean: f64,
    pub std: f64,
}

impl RewardNormalizer {
    /// Population mean and std of `rewards`; the std is floored at
    /// [`STD_FLOOR`]. Returns whether the floor was applied.
    pub fn fit(rewards: &[f64]) -> Result<(Self, bool)> {
        if rewards.is_empty() {
            return contract("cannot fit a normalizer on zero rewards");
        }
        let (mean, var) = mean_var(rewards);
        let std = var.sqrt();
        if std < STD_FLOOR {
            log::warn!("reward normalizer: all {} rewards identical, std floored to {STD_FLOOR}", rewards.len());
            Ok((Self { mean, std: STD_FLOOR }, true))
        } else {
            Ok((Self { mean, std }, false))
        }
    }

    pub fn normalize(&self, r: f64) -> f64 {
        (r - self.mean) / self.std
    }
}

pub fn normalize(r: f64, n: &RewardNormalizer) -> f64 {
    n.normalize(r)
}

/// Population mean and variance. The mean is accumulated as an offset from the
/// first element so that constant inputs give an exact mean and zero variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let x0 = xs[0];
    let shift = xs.iter().map(|x| x - x0).sum::<f64>() / n;
    let mean = x0 + shift;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Outcome of fitting the normalizer on policy samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerFit {
    pub normalizer: RewardNormalizer,
    pub samples: usize,
    pub floored: bool,
}

/// Samples `samples_per_prompt` responses per prompt with `sample`, scores
/// them and fits a [`RewardNormalizer`] on the pooled rewards.
pub fn fit_normalizer<S>(
    prompts: &[Prompt],
    samples_per_prompt: usize,
    spec: &TaskSpec,
    mut sample: S,
) -> Result<NormalizerFit>
where
    S: FnMut(&Prompt) -> Result<Vec<TokenId>>,
{
    if samples_per_prompt == 0 {
        return config("samples_per_prompt must be >= 1");
    }
    let mut rewards = Vec::with_capacity(prompts.len() * samples_per_prompt);
    for prompt in prompts {
        for _ in 0..samples_per_prompt {
            let response = sample(prompt)?;
            rewards.push(reward(prompt, &response, spec)?);
        }
    }
    let (normalizer, floored) = RewardNormalizer::fit(&rewards)?;
    Ok(NormalizerFit { normalizer, samples: rewards.len(), floored })
}

/// Median split of scored items: items with score `<= median` go to the low
/// group. Input order is preserved inside each group.
pub fn split_by_reward<T: Clone>(scored: &[(T, f64)]) -> Result<(Vec<(T, f64)>, Vec<(T, f64)>)> {
    if scored.len() < 2 {
        return config(format!("split_by_reward needs >= 2 prompts, got {}", scored.len()));
    }
    if let Some((_, r)) = scored.iter().find(|(_, r)| !r.is_finite()) {
        return Err(Error::Numeric(format!("non-finite reward {r} in split")));
    }
    let median = median(scored.iter().map(|(_, r)| *r).collect());
    Ok(scored.iter().cloned().partition(|(_, r)| *r <= median))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// SFT corpus: the reward-optimal response for even-indexed prompts and a
/// uniformly random response for the others.
pub fn sft_corpus(spec: &TaskSpec, prompts: &[Prompt], rng: &mut Rng) -> Vec<(Prompt, Vec<TokenId>)> {
    prompts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let response = if i % 2 == 0 {
                spec.target_response(p)
            } else {
                (0..spec.response_len).map(|_| rng.gen_range(1..=spec.vocab.size)).collect()
            };
            (p.clone(), response)
        })
        .collect()
}

/// One prompt per line, space-separated token ids.
pub fn prompts_to_text(prompts: &[Prompt]) -> String {
    let mut out = String::new();
    for p in prompts {
        let line: Vec<String> = p.tokens.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Parses the line format written by [`prompts_to_text`]; ids follow line order.
pub fn prompts_from_text(text: &str, vocab: Vocab) -> Result<Vec<Prompt>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let tokens = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<TokenId>()
                        .map_err(|e| Error::Format(format!("prompt line {}: {e}", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            if tokens.is_empty() {
                return Err(Error::Format(format!("prompt line {} is empty", i + 1)));
            }
            if let Some(t) = tokens.iter().find(|t| !vocab.contains(**t)) {
                return Err(Error::Format(format!("prompt line {}: token {t} outside vocabulary", i + 1)));
            }
            Ok(Prompt { id: i as u32, tokens })
        })
        .collect()
}
