//! Subcommand implementations. Each returns the run directory it wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ntkrl::analyzer;
use ntkrl::corpus::{self, Prompt};
use ntkrl::format::{self, PayloadKind, Sidecar};
use ntkrl::model::{self, Params};
use ntkrl::rng::{stream, Purpose};
use ntkrl::trainer::{self, GroupTrack, Trainer};
use ntkrl::verify::{self, CheckOutcome};
use ntkrl::{Error, Result};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::rundir::{self, RunDir, VerifiedRun};

pub const REF_BIN: &str = "ref.bin";
pub const REF_SIDECAR: &str = "ref.sidecar.json";
pub const PROMPTS: &str = "prompts.txt";
pub const FINAL_BIN: &str = "final.bin";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("{CHECKPOINT_DIR}/epoch_{epoch:03}.bin")
}

fn parse_checkpoint(rel: &str) -> Option<usize> {
    rel.strip_prefix(CHECKPOINT_DIR)?.strip_prefix("/epoch_")?.strip_suffix(".bin")?.parse().ok()
}

/// `--out`, else `out_dir` from the config.
pub fn resolve_out(cfg: &RunConfig, flag: Option<&Path>) -> Result<PathBuf> {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out_dir.clone())
        .ok_or_else(|| Error::Config("out_dir is not set; pass --out or set out_dir".into()))
}

fn csv_bytes<I, R>(header: &[&str], rows: I) -> Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Supervised pretraining of the reference policy.
pub fn cmd_pretrain(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let (prompts, sft) = trainer::pretrain_reference(&cfg.model, &cfg.task, &cfg.train)?;
    let mut dir = RunDir::create(out, "pretrain", cfg)?;
    dir.write(REF_BIN, &format::params_to_bytes(&cfg.model, &sft.params))?;
    dir.write(REF_SIDECAR, &serde_json::to_vec_pretty(&Sidecar::for_params(&cfg.model, PayloadKind::Params))?)?;
    dir.write(PROMPTS, corpus::prompts_to_text(&prompts).as_bytes())?;
    let rows = sft.losses.iter().enumerate().map(|(e, l)| [e.to_string(), l.to_string()]);
    dir.write("sft_loss.csv", &csv_bytes(&["epoch", "loss"], rows)?)?;
    log::info!("SFT loss {:.4} -> {:.4}", sft.losses[0], sft.losses.last().unwrap());
    dir.finish()
}

/// The reference parameters and prompts stored in a run directory.
pub fn load_reference(run: &VerifiedRun, cfg: &RunConfig) -> Result<(Params, Vec<Prompt>)> {
    if run.config.model != cfg.model {
        return Err(Error::Config(format!("model config differs from the reference run {}", run.path.display())));
    }
    if run.config.task != cfg.task {
        return Err(Error::Config(format!("task config differs from the reference run {}", run.path.display())));
    }
    let params = format::params_from_bytes(&cfg.model, &run.read(REF_BIN)?)?;
    let prompts = corpus::prompts_from_text(&run.read_string(PROMPTS)?, cfg.task.vocab)?;
    Ok((params, prompts))
}

/// Plain RL from the reference in `ref_dir`. `train.cf_stage_epochs` must be 0.
pub fn cmd_rl(cfg: &RunConfig, ref_dir: &Path, out: &Path) -> Result<PathBuf> {
    if cfg.train.cf_stage_epochs != 0 {
        return Err(Error::Config("train.cf_stage_epochs must be 0 for `rl`; use `cfrl`".into()));
    }
    train_run(cfg, ref_dir, out, "rl")
}

/// Classifier-first RL: `train.cf_stage_epochs` classifier-only epochs, then
/// `train.epochs` joint epochs.
pub fn cmd_cfrl(cfg: &RunConfig, ref_dir: &Path, out: &Path) -> Result<PathBuf> {
    if cfg.train.cf_stage_epochs == 0 {
        return Err(Error::Config("train.cf_stage_epochs must be >= 1 for `cfrl`".into()));
    }
    train_run(cfg, ref_dir, out, "cfrl")
}

fn train_run(cfg: &RunConfig, ref_dir: &Path, out: &Path, command: &str) -> Result<PathBuf> {
    cfg.validate()?;
    let reference = rundir::open(ref_dir)?;
    let (ref_params, prompts) = load_reference(&reference, cfg)?;
    let mut dir = RunDir::create(out, command, cfg)?;
    dir.add_input(&reference);
    dir.write(REF_BIN, &format::params_to_bytes(&cfg.model, &ref_params))?;
    dir.write(PROMPTS, corpus::prompts_to_text(&prompts).as_bytes())?;
    let mut t = Trainer::new(&cfg.model, &cfg.task, &cfg.train, &prompts, ref_params)?;
    let retain = cfg.retain_checkpoints;
    let log = t.run(|epoch, params| {
        dir.write(&checkpoint_name(epoch), &format::params_to_bytes(&cfg.model, params))?;
        if let Some(n) = retain {
            if epoch > n {
                dir.remove(&checkpoint_name(epoch - n))?;
            }
        }
        Ok(())
    })?;
    dir.write(FINAL_BIN, &format::params_to_bytes(&cfg.model, &t.params))?;
    let mut steps = Vec::new();
    log.write_steps_jsonl(&mut steps)?;
    dir.write("steps.jsonl", &steps)?;
    let mut buf = Vec::new();
    log.write_summary_csv(&mut buf)?;
    dir.write("summary.csv", &buf)?;
    let mut buf = Vec::new();
    log.track.write_csv(&mut buf)?;
    dir.write("groups.csv", &buf)?;
    let mut buf = Vec::new();
    log.write_entropy_csv(&mut buf, &prompts)?;
    dir.write("entropy.csv", &buf)?;
    dir.write("normalizer.json", &serde_json::to_vec_pretty(&t.normalizer)?)?;
    dir.finish()
}

/// Runs the oracle suite on the pretrained reference of `cfg`. When `out` is
/// given, the table is also written to `verify.csv` there.
pub fn cmd_verify(cfg: &RunConfig, out: Option<&Path>) -> Result<Vec<CheckOutcome>> {
    cfg.validate()?;
    let (_, sft) = trainer::pretrain_reference(&cfg.model, &cfg.task, &cfg.train)?;
    let outcomes = verify::run_all(&cfg.verify, &cfg.model, &cfg.task, &cfg.train, &sft.params)?;
    if let Some(out) = out {
        let mut dir = RunDir::create(out, "verify", cfg)?;
        let rows = outcomes.iter().map(|o| [o.name.clone(), o.passed.to_string(), o.detail.clone()]);
        dir.write("verify.csv", &csv_bytes(&["check", "passed", "detail"], rows)?)?;
        dir.finish()?;
    }
    Ok(outcomes)
}

pub fn format_table(outcomes: &[CheckOutcome]) -> String {
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for o in outcomes {
        let mark = if o.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{:width$}  {mark}  {}\n", o.name, o.detail));
    }
    s
}

/// One analyzed run: its checkpoints in epoch order, reference and prompts.
struct Snapshots {
    cfg: RunConfig,
    reference: Params,
    prompts: Vec<Prompt>,
    epochs: Vec<(usize, Params)>,
}

fn snapshots(run: &VerifiedRun) -> Result<Snapshots> {
    let cfg = run.config.clone();
    let (reference, prompts) = load_reference(run, &cfg)?;
    let mut epochs: Vec<(usize, Params)> = run
        .manifest
        .files
        .keys()
        .filter_map(|rel| parse_checkpoint(rel).map(|e| (e, rel)))
        .map(|(e, rel)| Ok((e, format::params_from_bytes(&cfg.model, &run.read(rel)?)?)))
        .collect::<Result<_>>()?;
    if epochs.is_empty() {
        epochs.push((0, reference.clone()));
    }
    epochs.sort_by_key(|(e, _)| *e);
    Ok(Snapshots { cfg, reference, prompts, epochs })
}

fn analysis_rng(seed: u64, run: usize, epoch: usize, kind: u64) -> ntkrl::rng::Rng {
    stream(seed, Purpose::Analysis, ((run as u64) << 32) | ((epoch as u64) << 4) | kind)
}

/// The analyzer suite over one or more training runs. Feature-change diffs
/// compare the first run against the second, or the run against itself.
pub fn cmd_analyze(cfg: &RunConfig, runs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    if runs.is_empty() {
        return Err(Error::Config("analyze needs at least one run directory".into()));
    }
    let verified = runs.iter().map(|p| rundir::open(p)).collect::<Result<Vec<_>>>()?;
    let snaps = verified.iter().map(snapshots).collect::<Result<Vec<_>>>()?;
    let a = &cfg.analysis;
    let mut dir = RunDir::create(out, "analyze", cfg)?;
    for v in &verified {
        dir.add_input(v);
    }
    let rows = verified.iter().enumerate().map(|(i, v)| [i.to_string(), v.path.display().to_string()]);
    dir.write("runs.csv", &csv_bytes(&["run", "path"], rows)?)?;

    let mut entropy = Vec::new();
    let mut entropy_summary = Vec::new();
    let mut by_reward = Vec::new();
    let mut similarity = Vec::new();
    let mut bon = Vec::new();
    let mut div = Vec::new();
    let mut classifier = Vec::new();
    let mut top = Vec::new();
    let mut groups = Vec::new();
    for (ri, s) in snaps.iter().enumerate() {
        let (m, task, r) = (&s.cfg.model, &s.cfg.task, ri.to_string());
        let (first_epoch, last_epoch) = (s.epochs[0].0, s.epochs[s.epochs.len() - 1].0);
        let mut track = GroupTrack::default();
        for (epoch, params) in &s.epochs {
            let e = epoch.to_string();
            track.push(trainer::track_groups(&s.reference, params, m)?)?;
            if a.entropy {
                let rep = analyzer::first_token_entropy(params, m, &s.prompts, &e)?;
                for (id, h) in &rep.entropies {
                    entropy.push(vec![r.clone(), e.clone(), id.to_string(), h.to_string()]);
                }
                let q = rep.summary;
                entropy_summary.push(
                    [q.mean, q.std, q.min, q.q1, q.median, q.q3, q.max]
                        .iter()
                        .map(f64::to_string)
                        .fold(vec![r.clone(), e.clone()], |mut v, x| {
                            v.push(x);
                            v
                        }),
                );
            }
            if a.similarity {
                let st = analyzer::feature_cosine_stats(params, m, &s.prompts)?;
                similarity.push(vec![
                    r.clone(),
                    e.clone(),
                    st.mean.to_string(),
                    st.std.to_string(),
                    st.min.to_string(),
                    st.pairs.to_string(),
                    st.excluded.to_string(),
                ]);
            }
            if a.best_of_n && (*epoch == first_epoch || *epoch == last_epoch) {
                let mut rng = analysis_rng(a.seed, ri, *epoch, 1);
                for (n, v) in analyzer::best_of_n(params, m, task, &s.prompts, &a.bon_n, a.bon_samples, &mut rng)? {
                    bon.push(vec![r.clone(), e.clone(), n.to_string(), v.to_string()]);
                }
            }
            if a.diversity {
                let mut rng = analysis_rng(a.seed, ri, *epoch, 2);
                let d = analyzer::diversity(params, &s.reference, m, task, &s.prompts, a.diversity_samples, &mut rng)?;
                div.push(vec![r.clone(), e.clone(), d.semantic.to_string(), d.style.to_string()]);
            }
            if a.classifier {
                let n = analyzer::classifier_norm_stats(params, m)?;
                classifier.push(vec![r.clone(), e.clone(), n.mean.to_string(), n.std.to_string()]);
            }
        }
        let normalized = track.normalized();
        for (i, (epoch, _)) in s.epochs.iter().enumerate() {
            for (g, name) in track.groups.iter().enumerate() {
                groups.push(vec![
                    r.clone(),
                    epoch.to_string(),
                    name.clone(),
                    track.distances[i][g].to_string(),
                    normalized[i][g].to_string(),
                ]);
            }
        }
        let last = &s.epochs[s.epochs.len() - 1].1;
        if a.classifier {
            for (rank, (tok, n)) in
                analyzer::top_token_updates(&s.reference.w, &last.w, m.feature_dim, a.top_k)?.into_iter().enumerate()
            {
                top.push(vec![r.clone(), (rank + 1).to_string(), tok.to_string(), n.to_string()]);
            }
        }
        if a.entropy {
            // Split prompts by mean reward over `bon_samples` draws at the final checkpoint.
            let mut rng = analysis_rng(a.seed, ri, last_epoch, 3);
            let scored = s
                .prompts
                .iter()
                .map(|p| {
                    let mut total = 0.0;
                    for _ in 0..a.bon_samples {
                        let y = model::sample_response(last, m, p, task.response_len as usize, &mut rng)?;
                        total += corpus::reward(p, &y, task)?;
                    }
                    Ok((p.clone(), total / a.bon_samples as f64))
                })
                .collect::<Result<Vec<_>>>()?;
            let (lo, hi) = corpus::split_by_reward(&scored)?;
            let lo: Vec<Prompt> = lo.into_iter().map(|x| x.0).collect();
            let hi: Vec<Prompt> = hi.into_iter().map(|x| x.0).collect();
            if lo.is_empty() || hi.is_empty() {
                log::warn!("run {ri}: all sampled rewards tie; skipping reward-group entropy");
            } else {
                let (l, h) = analyzer::entropy_by_reward_group(last, m, &lo, &hi)?;
                for rep in [l, h] {
                    for (id, x) in &rep.entropies {
                        by_reward.push(vec![r.clone(), rep.tag.clone(), id.to_string(), x.to_string()]);
                    }
                }
            }
        }
    }
    let write = |dir: &mut RunDir, name: &str, header: &[&str], rows: Vec<Vec<String>>| dir.write(name, &csv_bytes(header, rows)?);
    write(&mut dir, "groups.csv", &["run", "epoch", "group", "distance", "normalized"], groups)?;
    if a.entropy {
        write(&mut dir, "entropy.csv", &["run", "epoch", "prompt_id", "entropy"], entropy)?;
        write(
            &mut dir,
            "entropy_summary.csv",
            &["run", "epoch", "mean", "std", "min", "q1", "median", "q3", "max"],
            entropy_summary,
        )?;
        write(&mut dir, "entropy_by_reward.csv", &["run", "group", "prompt_id", "entropy"], by_reward)?;
    }
    if a.similarity {
        write(&mut dir, "similarity.csv", &["run", "epoch", "mean", "std", "min", "pairs", "excluded"], similarity)?;
    }
    if a.best_of_n {
        write(&mut dir, "best_of_n.csv", &["run", "epoch", "n", "mean_best_reward"], bon)?;
    }
    if a.diversity {
        write(&mut dir, "diversity.csv", &["run", "epoch", "semantic", "style"], div)?;
    }
    if a.classifier {
        write(&mut dir, "classifier.csv", &["run", "epoch", "mean_row_norm", "std_row_norm"], classifier)?;
        write(&mut dir, "top_tokens.csv", &["run", "rank", "token", "delta_norm"], top)?;
    }
    if a.feature_change {
        let sa = &snaps[0];
        let sb = snaps.get(1).unwrap_or(sa);
        if sb.cfg.model != sa.cfg.model || sb.prompts != sa.prompts {
            return Err(Error::Config("feature change needs runs with the same model and prompts".into()));
        }
        let fa = &sa.epochs[sa.epochs.len() - 1].1;
        let fb = &sb.epochs[sb.epochs.len() - 1].1;
        let diffs = analyzer::feature_change_diff(&sa.cfg.model, &sa.reference, fa, fb, &sa.prompts)?;
        let rows: Vec<(u32, f64)> = sa.prompts.iter().map(|p| p.id).zip(diffs).collect();
        let mut buf = Vec::new();
        analyzer::write_pairs_csv(&mut buf, ["prompt_id", "diff"], &rows)?;
        dir.write("feature_change.csv", &buf)?;
    }
    dir.finish()
}

/// Bundles every CSV of a run directory into `report.json` under `out`.
pub fn cmd_report(cfg: &RunConfig, run_dir: &Path, out: &Path) -> Result<PathBuf> {
    let run = rundir::open(run_dir)?;
    let mut tables = BTreeMap::new();
    for rel in run.manifest.files.keys().filter(|f| f.ends_with(".csv")) {
        let bytes = run.read(rel)?;
        let mut rdr = csv::Reader::from_reader(bytes.as_slice());
        let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        let rows = rdr
            .records()
            .map(|r| Ok(r?.iter().map(String::from).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        tables.insert(rel.clone(), json!({ "header": header, "rows": rows }));
    }
    let report: Value = json!({
        "run": run.path.display().to_string(),
        "command": run.manifest.command,
        "config_hash": run.manifest.config_hash,
        "tables": tables,
    });
    let mut dir = RunDir::create(out, "report", cfg)?;
    dir.add_input(&run);
    dir.write("report.json", &serde_json::to_vec_pretty(&report)?)?;
    dir.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_names_round_trip() {
        assert_eq!(checkpoint_name(7), "checkpoints/epoch_007.bin");
        assert_eq!(parse_checkpoint(&checkpoint_name(12)), Some(12));
        assert_eq!(parse_checkpoint("final.bin"), None);
    }

    #[test]
    fn out_dir_resolution() {
        let mut cfg = RunConfig::default();
        assert!(resolve_out(&cfg, None).is_err());
        cfg.out_dir = Some("a".into());
        assert_eq!(resolve_out(&cfg, None).unwrap(), PathBuf::from("a"));
        assert_eq!(resolve_out(&cfg, Some(Path::new("b"))).unwrap(), PathBuf::from("b"));
    }
}
