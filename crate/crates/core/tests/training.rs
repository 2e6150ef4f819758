use mtrs::data::{synth_generate, SynthConfig, SynthSample};
use mtrs::model::{build_vocab, Model, ModelConfig, JOINT_FREEZE};
use mtrs::param::Module;
use mtrs::train::{cross_entropy_next_token, lr_at, pretrain_change_module, train_joint, AdamW, TrainConfig};
use mtrs::vision::VisualKind;
use mtrs::Tensor;
use proptest::prelude::*;

fn snapshot(m: &impl Module, prefix: &str) -> Vec<(String, Vec<f64>)> {
    m.parameters().iter().filter(|p| p.name().starts_with(prefix)).map(|p| (p.name().to_string(), p.data().to_vec())).collect()
}

fn small() -> ModelConfig {
    ModelConfig { d_p: 16, heads: 2, layers: 1, max_seq: 128, ..Default::default() }
}

fn model_for(samples: &[SynthSample], cfg: ModelConfig) -> Model {
    let records: Vec<_> = samples.iter().map(|s| s.record.clone()).collect();
    Model::new(cfg, build_vocab(&records, 4)).unwrap()
}

/// Hand evaluation of the log-softmax at the two supervised rows.
#[test]
fn cross_entropy_hand_fixture() {
    let logits = Tensor::new(vec![1.0, 2.0, 0.0, -1.0, 0.5, 0.5, 2.0, 0.0, 3.0, -1.0, 0.0, 1.0], &[3, 4]).unwrap();
    let l = cross_entropy_next_token(&logits, &[0, 2, 3], &[false, true, true]).unwrap().item().unwrap();
    assert!((l - 2.449311955836398).abs() < 1e-12, "{l}");
}

#[test]
fn pretraining_32_pairs_reduces_loss_tenfold() {
    let pairs = synth_generate(VisualKind::Pair, 32, 0, &SynthConfig::default()).unwrap();
    let mut m = model_for(&pairs, ModelConfig::default());
    let before_lm = snapshot(&m, "lm.");
    let before_enc = snapshot(&m, "encoder.");
    let cfg = TrainConfig { max_lr: 3e-3, total_steps: 300, batch_size: 8, ..Default::default() };
    let log = pretrain_change_module(&mut m, &pairs, &cfg, |_| {}).unwrap();
    assert_eq!(log.len(), 300);
    let (first, last) = (log[0].loss, log[299].loss);
    assert!(last <= 0.1 * first, "{first} -> {last}");
    assert_eq!(snapshot(&m, "lm."), before_lm);
    assert_eq!(snapshot(&m, "encoder."), before_enc);
}

#[test]
fn frozen_encoder_receives_no_gradient() {
    let pairs = synth_generate(VisualKind::Pair, 1, 4, &SynthConfig::default()).unwrap();
    let mut m = model_for(&pairs, small());
    m.encoder.freeze_all();
    let ex = m.example(&pairs[0].record, pairs[0].input.clone(), None, &pairs[0].record.target).unwrap();
    assert!(ex.units.is_none());
    m.example_loss(&ex).unwrap().backward().unwrap();
    assert!(m.encoder.parameters().iter().all(|p| p.grad().is_none()));
    assert!(m.projector.parameters().iter().all(|p| p.grad().is_some()));
    assert!(m.lm.parameters().iter().any(|p| p.grad().is_some()));
}

#[test]
fn pretraining_zero_steps_and_empty_data() {
    let pairs = synth_generate(VisualKind::Pair, 2, 1, &SynthConfig::default()).unwrap();
    let mut m = model_for(&pairs, small());
    let before = snapshot(&m, "");
    let cfg = TrainConfig { total_steps: 0, ..Default::default() };
    assert!(pretrain_change_module(&mut m, &pairs, &cfg, |_| {}).unwrap().is_empty());
    assert_eq!(snapshot(&m, ""), before);
    assert!(pretrain_change_module(&mut m, &[], &cfg, |_| {}).is_err());
    let single = synth_generate(VisualKind::Single, 1, 1, &SynthConfig::default()).unwrap();
    assert!(pretrain_change_module(&mut m, &single, &cfg, |_| {}).is_err());
}

#[test]
fn joint_tuning_follows_schedule_and_freeze_set() {
    let mut samples = synth_generate(VisualKind::Single, 3, 2, &SynthConfig::default()).unwrap();
    samples.extend(synth_generate(VisualKind::Pair, 3, 2, &SynthConfig::default()).unwrap());
    samples.extend(synth_generate(VisualKind::Video, 2, 2, &SynthConfig::default()).unwrap());
    let mut m = model_for(&samples, small());
    m.freeze_for_joint_tuning();
    let frozen: Vec<_> = JOINT_FREEZE.iter().map(|p| snapshot(&m, p)).collect();
    let lm_before = snapshot(&m, "lm.");
    let examples: Vec<_> = samples.iter().map(|s| m.example(&s.record, s.input.clone(), None, &s.record.target).unwrap()).collect();
    let cfg = TrainConfig { max_lr: 1e-3, min_lr: 1e-5, total_steps: 40, batch_size: 3, ..Default::default() };
    let log = train_joint(&mut m, &examples, &cfg, |_| {}).unwrap();
    for r in &log {
        assert_eq!(r.lr, lr_at(r.step, &cfg).unwrap());
    }
    let after: Vec<_> = JOINT_FREEZE.iter().map(|p| snapshot(&m, p)).collect();
    assert_eq!(after, frozen);
    assert_ne!(snapshot(&m, "lm."), lm_before);
    assert!(train_joint(&mut m, &[], &cfg, |_| {}).is_err());
}

#[test]
fn divergence_reports_last_good_step() {
    let samples = synth_generate(VisualKind::Single, 2, 3, &SynthConfig::default()).unwrap();
    let mut m = model_for(&samples, small());
    m.freeze_for_joint_tuning();
    let examples: Vec<_> = samples.iter().map(|s| m.example(&s.record, s.input.clone(), None, &s.record.target).unwrap()).collect();
    let cfg = TrainConfig { max_lr: 1e300, warmup_ratio: 0.0, total_steps: 20, batch_size: 2, ..Default::default() };
    match train_joint(&mut m, &examples, &cfg, |_| {}) {
        Err(mtrs::train::TrainError::Diverged { step, last_good, .. }) => {
            assert!(step >= 1);
            assert_eq!(last_good, Some(step - 1));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn schedule_is_exact_and_monotone(total in 1usize..400, warm in 0.0f64..0.5, max_lr in 1e-6f64..1e-1, frac in 0.0f64..1.0) {
        let cfg = TrainConfig { max_lr, min_lr: max_lr * frac, warmup_ratio: warm, total_steps: total, ..Default::default() };
        let w = cfg.warmup_steps();
        if w < total {
            prop_assert_eq!(lr_at(w, &cfg).unwrap(), cfg.max_lr);
        }
        prop_assert_eq!(lr_at(total, &cfg).unwrap(), cfg.min_lr);
        let mut prev = f64::INFINITY;
        for s in w..=total {
            let lr = lr_at(s, &cfg).unwrap();
            prop_assert!(lr <= prev + 1e-15);
            prop_assert!(lr >= cfg.min_lr - 1e-15);
            prev = lr;
        }
        if (total - w).is_multiple_of(2) && w < total {
            let mid = lr_at(w + (total - w) / 2, &cfg).unwrap();
            prop_assert!((mid - (cfg.max_lr + cfg.min_lr) / 2.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn zero_lr_step_is_identity(vals in prop::collection::vec(-3.0f64..3.0, 1..20), wd in 0.0f64..0.5) {
        let n = vals.len();
        let mut p = [mtrs::param::Parameter::new("w", vals.clone(), &[n]).unwrap()];
        p[0].tensor().mul(p[0].tensor()).unwrap().sum().backward().unwrap();
        let mut opt = AdamW::new(&TrainConfig { weight_decay: wd, grad_clip: Some(0.5), ..Default::default() });
        opt.step(p.iter_mut().collect(), 0.0).unwrap();
        prop_assert_eq!(p[0].data(), &vals[..]);
    }
}
