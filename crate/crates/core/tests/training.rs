use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use riskid_core::model::{Checkpoint, ModelConfig};
use riskid_core::scene::Response;
use riskid_core::simulator::{counterfactual_response, generate_scenario, SimConfig};
use riskid_core::training::{augment_sample, log_csv, train, Sample, Stage, TrainConfig};

fn scenarios(n: u64) -> Vec<riskid_core::simulator::Scenario> {
    (0..n).map(|s| generate_scenario(s, &SimConfig::default()).unwrap()).collect()
}

#[test]
fn augmented_go_samples_stay_go() {
    let cfg = SimConfig { confound_prob: 0.0, ..SimConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut augmented = 0;
    for seed in 0..300 {
        let s = generate_scenario(seed, &cfg).unwrap();
        let a = augment_sample(Sample::new(&s).unwrap(), &mut rng).unwrap();
        if let Some(iv) = &a.intervention {
            augmented += 1;
            assert_eq!(a.response, Response::Go);
            assert_eq!(counterfactual_response(&s, iv.removed.unwrap()).unwrap(), Response::Go, "seed {seed}");
        }
    }
    assert!(augmented > 100);
}

#[test]
fn one_stage_two_step_moves_every_group() {
    let data = scenarios(16);
    let mc = ModelConfig::default();
    let init = Checkpoint::init(mc.clone(), 2).unwrap();
    let cfg = TrainConfig { batch_size: 16, stage2_steps: 1, ..TrainConfig::default() };
    let out = train(&data, &cfg, Stage::Two, &mc, Some(init.clone())).unwrap();
    for group in ["backbone.", "ego_thing.", "ego_stuff.", "encoder.", "trn.", "response."] {
        let moved = init
            .params
            .iter()
            .filter(|(n, _)| n.starts_with(group))
            .any(|(n, t)| out.checkpoint.params.get(n).unwrap() != t);
        assert!(moved, "{group} unchanged");
    }
}

#[test]
fn stage_one_touches_only_the_intention_path() {
    let data = scenarios(8);
    let mc = ModelConfig::default();
    let cfg = TrainConfig { batch_size: 4, stage1_steps: 2, seed: 5, ..TrainConfig::default() };
    let out = train(&data, &cfg, Stage::One, &mc, None).unwrap();
    let fresh = Checkpoint::init(mc, 5).unwrap();
    for (n, t) in fresh.params.iter() {
        let changed = out.checkpoint.params.get(n).unwrap() != t;
        let intention = n.starts_with("backbone.intention_") || n.starts_with("intention.");
        assert!(!changed || intention, "{n} moved in stage 1");
    }
    assert!(out.log.iter().all(|r| r.stage == 1 && r.response_accuracy.is_none()));
}

#[test]
fn toy_run_lowers_loss() {
    let data = scenarios(100);
    let mc = ModelConfig::default();
    let cfg = TrainConfig { batch_size: 4, stage2_steps: 200, stage2_lr: 1e-3, seed: 1, ..TrainConfig::default() };
    let init = Checkpoint::init(mc.clone(), 1).unwrap();
    let out = train(&data, &cfg, Stage::Two, &mc, Some(init)).unwrap();
    let mean = |rows: &[riskid_core::training::LogRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    let (first, last) = (mean(&out.log[..25]), mean(&out.log[175..]));
    assert!(last < first, "{first} -> {last}");
    assert_eq!(log_csv(&out.log).lines().count(), 201);
}

#[test]
fn fixed_seed_gives_identical_checkpoints() {
    let data = scenarios(12);
    let mc = ModelConfig { dim: 8, hidden: 8, ..ModelConfig::default() };
    let cfg = TrainConfig { batch_size: 4, stage1_steps: 3, stage2_steps: 3, seed: 7, ..TrainConfig::default() };
    let run = || {
        let one = train(&data, &cfg, Stage::One, &mc, None).unwrap();
        train(&data, &cfg, Stage::Two, &mc, Some(one.checkpoint)).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.log, b.log);
}

#[test]
fn periodic_checkpoints_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let data = scenarios(4);
    let mc = ModelConfig { dim: 4, hidden: 4, ..ModelConfig::default() };
    let cfg = TrainConfig {
        batch_size: 2,
        stage1_steps: 4,
        checkpoint_every: 2,
        checkpoint_dir: Some(dir.path().to_path_buf()),
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg, Stage::One, &mc, None).unwrap();
    let last = Checkpoint::load(&dir.path().join("stage1_step4.bin")).unwrap();
    assert!(dir.path().join("stage1_step2.bin").exists());
    assert_eq!(last, out.checkpoint);
}
