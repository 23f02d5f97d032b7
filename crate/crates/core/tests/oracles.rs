use ntkrl::corpus::TaskSpec;
use ntkrl::model::{ModelConfig, Params};
use ntkrl::trainer::{pretrain_reference, TrainConfig};
use ntkrl::verify;

#[test]
fn suite_passes_on_default_config() {
    let (model, task, train) = (ModelConfig::default(), TaskSpec::default(), TrainConfig::default());
    let (_, sft) = pretrain_reference(&model, &task, &train).unwrap();
    for params in [Params::init(&model).unwrap(), sft.params] {
        let out = verify::run_all(&verify::VerifyConfig::default(), &model, &task, &train, &params).unwrap();
        for c in &out {
            println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        }
        assert!(out.iter().all(|c| c.passed));
    }
}
