use ntkrl::corpus::{self, TaskSpec};
use ntkrl::format;
use ntkrl::model::{self, ModelConfig, Params};
use ntkrl::trainer::{cf_rl_run, pretrain_reference, rl_run, TrainConfig};

fn mean_target_logprob(params: &Params, cfg: &ModelConfig, task: &TaskSpec) -> f64 {
    let prompts = corpus::generate_prompts(task).unwrap();
    let s: f64 = prompts.iter().map(|p| model::sequence_logprob(params, cfg, p, &task.target_response(p)).unwrap()).sum();
    s / prompts.len() as f64
}

#[test]
fn sft_loss_non_increasing_and_improves_targets() {
    let (model, task, train) = (ModelConfig::default(), TaskSpec::default(), TrainConfig::default());
    let (_, out) = pretrain_reference(&model, &task, &train).unwrap();
    for w in out.losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "{} -> {}", w[0], w[1]);
    }
    println!("sft loss {} -> {}", out.losses[0], out.losses.last().unwrap());
    let init = Params::init(&model).unwrap();
    assert!(mean_target_logprob(&out.params, &model, &task) > mean_target_logprob(&init, &model, &task));
}

#[test]
fn rl_lowers_first_token_entropy() {
    let (model, task) = (ModelConfig::default(), TaskSpec::default());
    for seed in 0..3 {
        let train = TrainConfig { seed, kl_coef: 0.05, epochs: 3, ..TrainConfig::default() };
        let (prompts, sft) = pretrain_reference(&model, &task, &train).unwrap();
        let (log, _) = rl_run(&model, &task, &train, &prompts, &sft.params).unwrap();
        let h: Vec<f64> = log.epochs.iter().map(|e| e.first_token_entropy).collect();
        println!("seed {seed}: entropy {h:?}");
        assert!(h.last().unwrap() < &h[0]);
    }
}

#[test]
fn cf_stage_freezes_features_and_zero_stage_matches_rl() {
    let (model, task) = (ModelConfig::default(), TaskSpec::default());
    let train = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let (prompts, sft) = pretrain_reference(&model, &task, &train).unwrap();
    let cf = TrainConfig { cf_stage_epochs: 1, epochs: 0, ..train.clone() };
    let (_, after) = cf_rl_run(&model, &task, &cf, &prompts, &sft.params).unwrap();
    assert_eq!(format::theta_phi_bytes(&after), format::theta_phi_bytes(&sft.params));
    assert_ne!(after.w, sft.params.w);

    let (log_a, pa) = rl_run(&model, &task, &train, &prompts, &sft.params).unwrap();
    let (log_b, pb) = rl_run(&model, &task, &TrainConfig { cf_stage_epochs: 0, ..train.clone() }, &prompts, &sft.params).unwrap();
    assert_eq!(format::params_to_bytes(&model, &pa), format::params_to_bytes(&model, &pb));
    let (mut a, mut b) = (Vec::new(), Vec::new());
    log_a.write_summary_csv(&mut a).unwrap();
    log_b.write_summary_csv(&mut b).unwrap();
    assert_eq!(a, b);
}
