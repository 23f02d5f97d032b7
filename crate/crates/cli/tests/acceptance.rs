//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ntkrl::format;
use ntkrl::model::{ModelConfig, Params};
use ntkrl::trainer::{self, Algo, GroupTrack, TrainConfig, Trainer};
use ntkrl::verify::{self, CheckOutcome};
use ntkrl_cli::commands::{self, checkpoint_name};
use ntkrl_cli::config::RunConfig;

struct Line {
    id: usize,
    passed: bool,
    detail: String,
}

fn from_check(id: usize, c: CheckOutcome, elapsed: Duration, budget: Option<Duration>) -> Line {
    let in_time = budget.map_or(true, |b| elapsed <= b);
    let limit = budget.map(|b| format!(" (limit {}s)", b.as_secs())).unwrap_or_default();
    Line {
        id,
        passed: c.passed && in_time,
        detail: format!("{}: {} [{:.2}s{limit}]", c.name, c.detail, elapsed.as_secs_f64()),
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed())
}

fn oracle(id: usize, budget: Option<u64>, f: impl FnOnce() -> ntkrl::Result<CheckOutcome>) -> Line {
    let (res, dt) = timed(f);
    match res {
        Ok(c) => from_check(id, c, dt, budget.map(Duration::from_secs)),
        Err(e) => Line { id, passed: false, detail: format!("error: {e}") },
    }
}

fn reference(cfg: &RunConfig) -> ntkrl::Result<(Vec<ntkrl::corpus::Prompt>, Params)> {
    let (prompts, sft) = trainer::pretrain_reference(&cfg.model, &cfg.task, &cfg.train)?;
    Ok((prompts, sft.params))
}

fn ac3(cfg: &RunConfig) -> Line {
    oracle(3, Some(60), || {
        let (_, sft) = reference(cfg)?;
        verify::check_taylor(&cfg.model, &cfg.task, &cfg.train, &sft)
    })
}

fn entropy_drop(cfg: &RunConfig, prompts: &[ntkrl::corpus::Prompt], sft: &Params, algo: Algo) -> ntkrl::Result<Vec<(u64, f64, f64)>> {
    (0..3)
        .map(|seed| {
            let train = TrainConfig { seed, algo, kl_coef: 0.05, epochs: 3, ..cfg.train.clone() };
            let (log, _) = trainer::rl_run(&cfg.model, &cfg.task, &train, prompts, sft)?;
            let h0 = log.epochs[0].first_token_entropy;
            let h1 = log.epochs.last().unwrap().first_token_entropy;
            Ok((seed, h0, h1))
        })
        .collect()
}

fn ac6(cfg: &RunConfig) -> ntkrl::Result<Line> {
    let (prompts, sft) = reference(cfg)?;
    let rows = entropy_drop(cfg, &prompts, &sft, cfg.train.algo)?;
    let lower = rows.iter().filter(|(_, a, b)| b < a).count();
    let detail: Vec<String> = rows.iter().map(|(s, a, b)| format!("seed {s}: {a:.6} -> {b:.6}")).collect();
    // reported only: the group-standardized estimator on the same setup
    let grpo = entropy_drop(cfg, &prompts, &sft, Algo::Grpo)?;
    let info: Vec<String> = grpo.iter().map(|(s, a, b)| format!("seed {s}: {:+.2e}", b - a)).collect();
    Ok(Line {
        id: 6,
        passed: lower == 3,
        detail: format!(
            "{:?}, {lower}/3 seeds lower; {}",
            cfg.train.algo,
            detail.join(", ") + &format!(" [info, grpo delta: {}]", info.join(", "))
        ),
    })
}

fn ac7(cfg: &RunConfig, tmp: &Path) -> ntkrl::Result<Line> {
    let (prompts, sft) = reference(cfg)?;
    let cf_epochs = 2;
    let train = TrainConfig { cf_stage_epochs: cf_epochs, epochs: 1, ..cfg.train.clone() };
    let mut t = Trainer::new(&cfg.model, &cfg.task, &train, &prompts, sft.clone())?;
    let mut snaps = Vec::new();
    t.run(|_, p| {
        snaps.push(p.clone());
        Ok(())
    })?;
    let frozen = format::theta_phi_bytes(&snaps[0]) == format::theta_phi_bytes(&snaps[cf_epochs]);
    let w_moved = snaps[0].w != snaps[cf_epochs].w;
    let joint_moved = format::theta_phi_bytes(&snaps[cf_epochs]) != format::theta_phi_bytes(&snaps[cf_epochs + 1]);

    // a zero-length classifier stage must not perturb plain RL: trainer level
    // and through the command line front end
    let plain = TrainConfig { cf_stage_epochs: 0, ..cfg.train.clone() };
    let (log_a, pa) = trainer::rl_run(&cfg.model, &cfg.task, &plain, &prompts, &sft)?;
    let mut t = Trainer::new(&cfg.model, &cfg.task, &plain, &prompts, sft.clone())?;
    let log_b = t.run(|_, _| Ok(()))?;
    let csv = |l: &trainer::RunLog| -> ntkrl::Result<Vec<u8>> {
        let mut b = Vec::new();
        l.write_summary_csv(&mut b)?;
        Ok(b)
    };
    let mut run_cfg = cfg.clone();
    run_cfg.train = plain.clone();
    let ref_dir = commands::cmd_pretrain(&run_cfg, &tmp.join("ac7_ref"))?;
    let rl_dir = commands::cmd_rl(&run_cfg, &ref_dir, &tmp.join("ac7_rl"))?;
    let cli_final = std::fs::read(rl_dir.join(commands::FINAL_BIN))?;
    let same = format::params_to_bytes(&cfg.model, &pa) == format::params_to_bytes(&cfg.model, &t.params)
        && csv(&log_a)? == csv(&log_b)?
        && cli_final == format::params_to_bytes(&cfg.model, &pa);
    Ok(Line {
        id: 7,
        passed: frozen && w_moved && same,
        detail: format!(
            "feature params frozen through stage 1: {frozen}; classifier changed: {w_moved}; \
             feature params move in stage 2: {joint_moved}; cf_stage_epochs=0 identical to plain RL: {same}"
        ),
    })
}

fn ac8(cfg: &RunConfig, tmp: &Path) -> ntkrl::Result<Line> {
    let ref_dir = commands::cmd_pretrain(cfg, &tmp.join("ac8_ref"))?;
    let rl_dir = commands::cmd_rl(cfg, &ref_dir, &tmp.join("ac8_rl"))?;
    let text = std::fs::read_to_string(rl_dir.join("groups.csv"))?;
    let header_ok = text.lines().next() == Some(GroupTrack::CSV_HEADER);
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<(usize, String, f64, f64)> = rdr.deserialize().collect::<Result<_, _>>().map_err(ntkrl::Error::from)?;
    let last = rows.iter().map(|r| r.0).max().unwrap_or(0);
    let zero_start = rows.iter().filter(|r| r.0 == 0).all(|r| r.2 == 0.0 && r.3 == 0.0);
    let ends_at_one = rows.iter().filter(|r| r.0 == last).all(|r| if r.2 > 0.0 { r.3 == 1.0 } else { r.3 == 0.0 });
    let moved = rows.iter().filter(|r| r.0 == last && r.2 > 0.0).count();
    let mut first: Vec<(String, f64)> = rows.iter().filter(|r| r.0 == 1).map(|r| (r.1.clone(), r.3)).collect();
    first.sort_by(|a, b| b.1.total_cmp(&a.1));
    let order: Vec<String> = first.iter().map(|(g, v)| format!("{g} {v:.3}")).collect();
    Ok(Line {
        id: 8,
        passed: header_ok && zero_start && ends_at_one && moved > 0,
        detail: format!(
            "header ok: {header_ok}; epoch 0 all zero: {zero_start}; {moved} moved groups end at 1.0: {ends_at_one} \
             [info, normalized after epoch 1: {}]",
            order.join(", ")
        ),
    })
}

fn ac9() -> Line {
    let mut ok = true;
    let mut notes = Vec::new();
    let vectors: [&[f64]; 6] = [&[0.3, -1.2], &[2.0, 2.0], &[0.1, 0.7, -0.4], &[5.0, -3.0, 1e-3], &[0.9, 0.1, -0.8, 0.4], &[1e6, 1e6 + 1.0, 1e6 - 2.0, 1e6]];
    for r in vectors {
        let k = r.len() as f64;
        let mean = r.iter().sum::<f64>() / k;
        let g = trainer::advantages(Algo::Grpo, r).unwrap();
        let l = trainer::advantages(Algo::Rloo, r).unwrap();
        let gsum = g.iter().sum::<f64>().abs();
        let lerr = l.iter().zip(r).map(|(a, x)| (a - k / (k - 1.0) * (x - mean)).abs()).fold(0.0, f64::max);
        ok &= gsum <= 1e-9 && lerr <= 1e-12;
        notes.push(format!("k={} sum {gsum:.1e} rloo {lerr:.1e}", r.len()));
    }
    let g = trainer::advantages(Algo::Grpo, &[1.0, 2.0, 3.0]).unwrap();
    let fixed = g.iter().zip([-1.2247, 0.0, 1.2247]).all(|(a, e)| (a - e).abs() <= 1e-4);
    let suite = verify::check_estimators(0).map(|c| c.passed).unwrap_or(false);
    Line {
        id: 9,
        passed: ok && fixed && suite,
        detail: format!("{}; grpo(1,2,3) = {g:.4?}; randomized suite {suite}", notes.join(", ")),
    }
}

fn ac10(cfg: &RunConfig, tmp: &Path) -> ntkrl::Result<Line> {
    let mut digests = Vec::new();
    for i in 0..2 {
        let ref_dir = commands::cmd_pretrain(cfg, &tmp.join(format!("ac10_ref{i}")))?;
        let rl_dir = commands::cmd_rl(cfg, &ref_dir, &tmp.join(format!("ac10_rl{i}")))?;
        let mut files = vec!["summary.csv".to_string(), "groups.csv".into(), "entropy.csv".into(), "steps.jsonl".into()];
        files.push(commands::FINAL_BIN.into());
        files.extend((0..=cfg.train.epochs).map(checkpoint_name));
        let contents = files
            .iter()
            .map(|f| Ok((f.clone(), std::fs::read(rl_dir.join(f))?)))
            .collect::<ntkrl::Result<Vec<_>>>()?;
        digests.push((std::fs::read(ref_dir.join(commands::REF_BIN))?, contents));
    }
    let ref_same = digests[0].0 == digests[1].0;
    let differing: Vec<&str> =
        digests[0].1.iter().zip(&digests[1].1).filter(|(a, b)| a.1 != b.1).map(|(a, _)| a.0.as_str()).collect();
    Ok(Line {
        id: 10,
        passed: ref_same && differing.is_empty(),
        detail: format!(
            "{} files compared; reference identical: {ref_same}; differing: {differing:?}",
            digests[0].1.len()
        ),
    })
}

fn lift(id: usize, r: ntkrl::Result<Line>) -> Line {
    r.unwrap_or_else(|e| Line { id, passed: false, detail: format!("error: {e}") })
}

fn main() -> ExitCode {
    let cfg = RunConfig::default();
    let base = ModelConfig::default();
    let tmp = tempfile::tempdir().expect("temp dir");
    let lines = vec![
        oracle(1, Some(30), || verify::check_gradients(&base, 20, 0)),
        oracle(2, None, || verify::check_decomposition(&base, 20, 0)),
        ac3(&cfg),
        oracle(4, Some(30), || verify::check_rep_argmax(&base, 1000, 0)),
        oracle(5, None, || verify::check_score_identity(5, 0)),
        lift(6, ac6(&cfg)),
        lift(7, ac7(&cfg, tmp.path())),
        lift(8, ac8(&cfg, tmp.path())),
        ac9(),
        lift(10, ac10(&cfg, tmp.path())),
    ];
    let mut failed = 0;
    for l in &lines {
        println!("AC-{:<2} {}  {}", l.id, if l.passed { "PASS" } else { "FAIL" }, l.detail);
        failed += usize::from(!l.passed);
    }
    println!("acceptance: {}/{} passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
