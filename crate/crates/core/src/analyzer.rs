//! Read-only measurements over parameter snapshots: first-token entropy,
//! feature similarity, Best-of-N, diversity proxies and classifier diagnostics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{self, mean_var, Prompt, TaskSpec, TokenId};
use crate::error::{config, contract, Result};
use crate::model::{self, Context, ModelConfig, Params};
use crate::rng::Rng;

/// Mean, population std and type-7 quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl Summary {
    pub fn of(xs: &[f64]) -> Result<Self> {
        if xs.is_empty() {
            return config("cannot summarize an empty sample");
        }
        let (mean, var) = mean_var(xs);
        let mut s = xs.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Self {
            mean,
            std: var.sqrt(),
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub tag: String,
    /// `(prompt id, entropy in nats)`.
    pub entropies: Vec<(u32, f64)>,
    pub summary: Summary,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntropyRow {
    tag: String,
    prompt_id: u32,
    entropy: f64,
}

impl EntropyReport {
    pub fn new(tag: impl Into<String>, entropies: Vec<(u32, f64)>) -> Result<Self> {
        let values: Vec<f64> = entropies.iter().map(|(_, h)| *h).collect();
        Ok(Self { tag: tag.into(), summary: Summary::of(&values)?, entropies })
    }

    pub const CSV_HEADER: &'static str = "tag,prompt_id,entropy";

    pub fn write_csv<W: Write>(reports: &[EntropyReport], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in reports {
            for (id, h) in &r.entropies {
                w.serialize(EntropyRow { tag: r.tag.clone(), prompt_id: *id, entropy: *h })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reports in order of first appearance of each tag.
    pub fn read_csv<R: Read>(input: R) -> Result<Vec<EntropyReport>> {
        let mut groups: Vec<(String, Vec<(u32, f64)>)> = Vec::new();
        for row in csv::Reader::from_reader(input).deserialize() {
            let row: EntropyRow = row?;
            match groups.iter_mut().find(|(t, _)| *t == row.tag) {
                Some((_, v)) => v.push((row.prompt_id, row.entropy)),
                None => groups.push((row.tag, vec![(row.prompt_id, row.entropy)])),
            }
        }
        groups.into_iter().map(|(t, v)| EntropyReport::new(t, v)).collect()
    }
}

pub fn first_token_entropy(params: &Params, cfg: &ModelConfig, prompts: &[Prompt], tag: &str) -> Result<EntropyReport> {
    if prompts.is_empty() {
        return config("first_token_entropy needs at least one prompt");
    }
    let entropies = prompts
        .iter()
        .map(|p| Ok((p.id, model::next_token_dist(params, cfg, &Context::first(p))?.entropy())))
        .collect::<Result<Vec<_>>>()?;
    EntropyReport::new(tag, entropies)
}

/// Reports for the low- and high-reward groups, tagged `low` and `high`.
pub fn entropy_by_reward_group(
    params: &Params,
    cfg: &ModelConfig,
    low: &[Prompt],
    high: &[Prompt],
) -> Result<(EntropyReport, EntropyReport)> {
    if low.is_empty() || high.is_empty() {
        return config("entropy_by_reward_group: both groups must be non-empty");
    }
    Ok((first_token_entropy(params, cfg, low, "low")?, first_token_entropy(params, cfg, high, "high")?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub pairs: usize,
    /// Prompts dropped for having a zero feature vector.
    pub excluded: usize,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0)
}

/// Pairwise cosine statistics over `vectors`, skipping zero vectors.
pub fn cosine_stats(vectors: &[Vec<f64>]) -> Result<SimilarityStats> {
    let kept: Vec<&Vec<f64>> = vectors.iter().filter(|v| norm(v) > 0.0).collect();
    let excluded = vectors.len() - kept.len();
    if excluded > 0 {
        log::warn!("cosine statistics: excluded {excluded} zero-norm vectors");
    }
    if kept.len() < 2 {
        return config(format!("cosine statistics need >= 2 nonzero vectors, got {}", kept.len()));
    }
    let mut sims = Vec::with_capacity(kept.len() * (kept.len() - 1) / 2);
    for i in 0..kept.len() {
        for j in i + 1..kept.len() {
            sims.push(cosine(kept[i], kept[j]));
        }
    }
    let (mean, var) = mean_var(&sims);
    let min = sims.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(SimilarityStats { mean, std: var.sqrt(), min, pairs: sims.len(), excluded })
}

pub fn feature_cosine_stats(params: &Params, cfg: &ModelConfig, prompts: &[Prompt]) -> Result<SimilarityStats> {
    if prompts.len() < 2 {
        return config("feature_cosine_stats needs >= 2 prompts");
    }
    let feats = prompts
        .iter()
        .map(|p| model::features(params, cfg, &Context::first(p)))
        .collect::<Result<Vec<_>>>()?;
    cosine_stats(&feats)
}

/// `(N, mean over prompts of the best reward among the first N draws)`.
pub fn best_of_n(
    params: &Params,
    cfg: &ModelConfig,
    task: &TaskSpec,
    prompts: &[Prompt],
    n_list: &[usize],
    samples: usize,
    rng: &mut Rng,
) -> Result<Vec<(usize, f64)>> {
    if prompts.is_empty() {
        return config("best_of_n needs at least one prompt");
    }
    if let Some(n) = n_list.iter().find(|n| **n == 0 || **n > samples) {
        return config(format!("best_of_n: N = {n} outside 1..={samples}"));
    }
    let mut totals = vec![0.0; n_list.len()];
    for p in prompts {
        let mut prefix_max = Vec::with_capacity(samples);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..samples {
            let y = model::sample_response(params, cfg, p, task.response_len as usize, rng)?;
            best = best.max(corpus::reward(p, &y, task)?);
            prefix_max.push(best);
        }
        for (t, n) in totals.iter_mut().zip(n_list) {
            *t += prefix_max[n - 1];
        }
    }
    let out: Vec<(usize, f64)> = n_list.iter().copied().zip(totals.into_iter().map(|t| t / prompts.len() as f64)).collect();
    let mut sorted = out.clone();
    sorted.sort_by_key(|(n, _)| *n);
    debug_assert!(sorted.windows(2).all(|w| w[0].1 <= w[1].1));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diversity {
    pub semantic: f64,
    pub style: f64,
}

/// Mean of the reference model's features over the contexts `(x, y_<=l)`.
pub fn response_embedding(ref_params: &Params, cfg: &ModelConfig, prompt: &Prompt, response: &[TokenId]) -> Result<Vec<f64>> {
    let mut acc = vec![0.0; cfg.feature_dim];
    for l in 1..=response.len() {
        let phi = model::features(ref_params, cfg, &Context::new(prompt, &response[..l]))?;
        acc.iter_mut().zip(&phi).for_each(|(a, f)| *a += f);
    }
    let n = response.len() as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

pub fn unigram_histogram(response: &[TokenId], v: u32) -> Vec<f64> {
    let mut h = vec![0.0; v as usize];
    for t in response {
        h[corpus::index_of(*t)] += 1.0;
    }
    h
}

fn mean_pairwise_distance(vs: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..vs.len() {
        for j in i + 1..vs.len() {
            let d = if vs[i] == vs[j] {
                0.0
            } else if norm(&vs[i]) == 0.0 || norm(&vs[j]) == 0.0 {
                1.0
            } else {
                1.0 - cosine(&vs[i], &vs[j])
            };
            total += d;
            count += 1;
        }
    }
    total / count as f64
}

/// Semantic and style diversity proxies of responses sampled from `params`.
pub fn diversity(
    params: &Params,
    ref_params: &Params,
    cfg: &ModelConfig,
    task: &TaskSpec,
    prompts: &[Prompt],
    samples_per_prompt: usize,
    rng: &mut Rng,
) -> Result<Diversity> {
    if samples_per_prompt < 2 {
        return config("diversity needs >= 2 samples per prompt");
    }
    if prompts.is_empty() {
        return config("diversity needs at least one prompt");
    }
    let (mut sem, mut sty) = (0.0, 0.0);
    for p in prompts {
        let ys = (0..samples_per_prompt)
            .map(|_| model::sample_response(params, cfg, p, task.response_len as usize, rng))
            .collect::<Result<Vec<_>>>()?;
        let emb = ys.iter().map(|y| response_embedding(ref_params, cfg, p, y)).collect::<Result<Vec<_>>>()?;
        let hist: Vec<Vec<f64>> = ys.iter().map(|y| unigram_histogram(y, cfg.vocab_size)).collect();
        sem += mean_pairwise_distance(&emb);
        sty += mean_pairwise_distance(&hist);
    }
    let n = prompts.len() as f64;
    Ok(Diversity { semantic: sem / n, style: sty / n })
}

pub fn diversity_of_responses(ref_params: &Params, cfg: &ModelConfig, prompt: &Prompt, ys: &[Vec<TokenId>]) -> Result<Diversity> {
    if ys.len() < 2 {
        return config("diversity needs >= 2 responses");
    }
    let emb = ys.iter().map(|y| response_embedding(ref_params, cfg, prompt, y)).collect::<Result<Vec<_>>>()?;
    let hist: Vec<Vec<f64>> = ys.iter().map(|y| unigram_histogram(y, cfg.vocab_size)).collect();
    Ok(Diversity { semantic: mean_pairwise_distance(&emb), style: mean_pairwise_distance(&hist) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

fn row_norms(w: &[f64], d: usize) -> Vec<f64> {
    w.chunks(d).map(norm).collect()
}

/// Mean and population std of the row norms of `W`.
pub fn classifier_norm_stats(params: &Params, cfg: &ModelConfig) -> Result<NormStats> {
    params.check_shape(cfg)?;
    let (mean, var) = mean_var(&row_norms(&params.w, cfg.feature_dim));
    Ok(NormStats { mean, std: var.sqrt() })
}

/// Tokens ranked by `||Delta W_v||`, descending, ties by ascending id.
pub fn top_token_updates(w_before: &[f64], w_after: &[f64], feature_dim: usize, k: usize) -> Result<Vec<(TokenId, f64)>> {
    if w_before.len() != w_after.len() || feature_dim == 0 || w_before.len() % feature_dim != 0 {
        return contract(format!(
            "top_token_updates: shapes {} and {} with D = {feature_dim}",
            w_before.len(),
            w_after.len()
        ));
    }
    let delta: Vec<f64> = w_after.iter().zip(w_before).map(|(a, b)| a - b).collect();
    let mut ranked: Vec<(TokenId, f64)> =
        row_norms(&delta, feature_dim).into_iter().enumerate().map(|(i, n)| (i as TokenId + 1, n)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// Per prompt `||phi_a - phi_sft|| - ||phi_b - phi_sft||` at the first-token context.
pub fn feature_change_diff(
    cfg: &ModelConfig,
    sft: &Params,
    run_a: &Params,
    run_b: &Params,
    prompts: &[Prompt],
) -> Result<Vec<f64>> {
    for p in [sft, run_a, run_b] {
        p.check_shape(cfg)?;
    }
    prompts
        .iter()
        .map(|p| {
            let ctx = Context::first(p);
            let base = model::features(sft, cfg, &ctx)?;
            let dist = |q: &Params| -> Result<f64> {
                let f = model::features(q, cfg, &ctx)?;
                Ok(norm(&f.iter().zip(&base).map(|(x, y)| x - y).collect::<Vec<_>>()))
            };
            Ok(dist(run_a)? - dist(run_b)?)
        })
        .collect()
}

pub fn write_pairs_csv<W: Write, A: ToString, B: ToString>(out: W, header: [&str; 2], rows: &[(A, B)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for (a, b) in rows {
        w.write_record([a.to_string(), b.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::params_digest;
    use crate::model::DistVector;
    use crate::rng::{stream, Purpose};

    fn prompts() -> Vec<Prompt> {
        corpus::generate_prompts(&TaskSpec { prompt_count: 6, ..TaskSpec::default() }).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert!((DistVector::uniform(16).entropy() - 16f64.ln()).abs() < 1e-12);
        let eps = 1e-6;
        let mut p = vec![eps / 15.0; 16];
        p[0] = 1.0 - eps;
        assert!(DistVector::new(p).unwrap().entropy() <= 2e-5);

        let cfg = ModelConfig::default();
        let mut params = Params::init(&cfg).unwrap();
        params.w.fill(0.0);
        let r = first_token_entropy(&params, &cfg, &prompts(), "sft").unwrap();
        assert!(r.entropies.iter().all(|(_, h)| (h - 16f64.ln()).abs() < 1e-12));
        assert!(first_token_entropy(&params, &cfg, &[], "x").is_err());
    }

    #[test]
    fn entropy_csv_round_trip() {
        let cfg = ModelConfig::default();
        let params = Params::init(&cfg).unwrap();
        let ps = prompts();
        let (lo, hi) = entropy_by_reward_group(&params, &cfg, &ps[..3], &ps[..3]).unwrap();
        assert_eq!(lo.summary, hi.summary);
        assert!(lo.entropies.iter().all(|(_, h)| *h >= 0.0 && *h <= 16f64.ln()));
        let mut buf = Vec::new();
        EntropyReport::write_csv(&[lo.clone(), hi.clone()], &mut buf).unwrap();
        assert!(buf.starts_with(b"tag,prompt_id,entropy\n"));
        let back = EntropyReport::read_csv(&buf[..]).unwrap();
        assert_eq!(back, vec![lo, hi]);
        assert!(entropy_by_reward_group(&params, &cfg, &[], &ps).is_err());
    }

    #[test]
    fn quartiles_type7() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
    }

    #[test]
    fn cosine_examples() {
        let same = cosine_stats(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert!((same.mean - 1.0).abs() < 1e-15 && same.std < 1e-15 && (same.min - 1.0).abs() < 1e-15);
        let orth = cosine_stats(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!((orth.mean, orth.min), (0.0, 0.0));
        let z = cosine_stats(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!((z.excluded, z.pairs), (1, 1));
    }

    #[test]
    fn best_of_n_prefix_max() {
        let cfg = ModelConfig::default();
        let params = Params::init(&cfg).unwrap();
        let task = TaskSpec::default();
        let ps = prompts();
        let t = best_of_n(&params, &cfg, &task, &ps, &[1, 2, 4, 8], 8, &mut stream(0, Purpose::Analysis, 0)).unwrap();
        assert!(t.windows(2).all(|w| w[0].1 <= w[1].1));
        // N = 1 is the mean reward of first draws
        let mut rng = stream(0, Purpose::Analysis, 0);
        let mut first = 0.0;
        for p in &ps {
            let y = model::sample_response(&params, &cfg, p, 8, &mut rng).unwrap();
            first += corpus::reward(p, &y, &task).unwrap();
            for _ in 1..8 {
                model::sample_response(&params, &cfg, p, 8, &mut rng).unwrap();
            }
        }
        assert!((t[0].1 - first / ps.len() as f64).abs() < 1e-15);
        assert!(best_of_n(&params, &cfg, &task, &ps, &[9], 8, &mut rng).is_err());
    }

    #[test]
    fn diversity_examples() {
        let cfg = ModelConfig::default();
        let params = Params::init(&cfg).unwrap();
        let p = &prompts()[0];
        let same = diversity_of_responses(&params, &cfg, p, &[vec![1, 2, 3], vec![1, 2, 3]]).unwrap();
        assert_eq!((same.semantic, same.style), (0.0, 0.0));
        let disjoint = diversity_of_responses(&params, &cfg, p, &[vec![1, 2, 3], vec![4, 5, 6]]).unwrap();
        assert!((disjoint.style - 1.0).abs() < 1e-15);
        assert!((0.0..=2.0).contains(&disjoint.semantic));
        let d = diversity(&params, &params, &cfg, &TaskSpec::default(), &prompts(), 3, &mut stream(1, Purpose::Analysis, 0)).unwrap();
        assert!((0.0..=1.0).contains(&d.style) && (0.0..=2.0).contains(&d.semantic));
    }

    #[test]
    fn classifier_norms() {
        let cfg = ModelConfig { vocab_size: 4, feature_dim: 2, ..ModelConfig::default() };
        let mut params = Params::init(&cfg).unwrap();
        params.w = vec![1.0, 0.0, 0.0, 1.0, 0.6, 0.8, -1.0, 0.0];
        let s = classifier_norm_stats(&params, &cfg).unwrap();
        assert!((s.mean - 1.0).abs() < 1e-15 && s.std < 1e-15);
        params.w.iter_mut().for_each(|x| *x *= 2.0);
        assert!((classifier_norm_stats(&params, &cfg).unwrap().mean - 2.0).abs() < 1e-15);
    }

    #[test]
    fn top_tokens() {
        let before = vec![0.5; 8];
        assert_eq!(
            top_token_updates(&before, &before, 2, 4).unwrap(),
            vec![(1, 0.0), (2, 0.0), (3, 0.0), (4, 0.0)]
        );
        let mut after = before.clone();
        after[4] += 0.1;
        assert_eq!(top_token_updates(&before, &after, 2, 1).unwrap()[0].0, 3);
        let shifted_b: Vec<f64> = before.iter().enumerate().map(|(i, x)| x + [0.3, -2.0][i % 2]).collect();
        let shifted_a: Vec<f64> = after.iter().enumerate().map(|(i, x)| x + [0.3, -2.0][i % 2]).collect();
        assert_eq!(top_token_updates(&shifted_b, &shifted_a, 2, 4).unwrap()[0].0, 3);
        assert!(top_token_updates(&before, &after[..6], 2, 1).is_err());
    }

    #[test]
    fn feature_change_antisymmetric_and_read_only() {
        let cfg = ModelConfig::default();
        let sft = Params::init(&cfg).unwrap();
        let mut a = sft.clone();
        a.theta_phi[5] += 0.2;
        let b = Params::init(&ModelConfig { seed: 3, ..cfg.clone() }).unwrap();
        let digests: Vec<String> = [&sft, &a, &b].iter().map(|p| params_digest(&cfg, p)).collect();
        let ps = prompts();
        let ab = feature_change_diff(&cfg, &sft, &a, &b, &ps).unwrap();
        let ba = feature_change_diff(&cfg, &sft, &b, &a, &ps).unwrap();
        assert!(ab.iter().zip(&ba).all(|(x, y)| x == &-y));
        assert!(feature_change_diff(&cfg, &sft, &a, &a, &ps).unwrap().iter().all(|x| *x == 0.0));
        assert!(feature_change_diff(&cfg, &sft, &sft, &b, &ps).unwrap().iter().all(|x| *x <= 0.0));
        let after: Vec<String> = [&sft, &a, &b].iter().map(|p| params_digest(&cfg, p)).collect();
        assert_eq!(digests, after);
    }
}
