use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use vitlr_core::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use vitlr_core::ops::NormMode;
use vitlr_core::rng::SplitMix64;
use vitlr_core::synth::{generate_dataset, ClipShape, Profile};
use vitlr_core::train::{
    adam_step, load_model, load_training_clips, recalibrate_norms, train, AdamConfig, OptimState,
    TrainConfig, CHECKPOINT_FILE, LOSS_FILE, LOSS_HEADER, MODEL_CONFIG_FILE,
};
use vitlr_core::{Error, ModelConfig, ParamStore, Tape, Tensor, ViTLR};

fn scalar_store(v: f32) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert("theta", Tensor::new(&[1], vec![v]).unwrap());
    p
}

fn grads(entries: &[(&str, f32)]) -> BTreeMap<String, Tensor> {
    entries
        .iter()
        .map(|(k, v)| (k.to_string(), Tensor::new(&[1], vec![*v]).unwrap()))
        .collect()
}

#[test]
fn adam_first_step_hand_value() {
    let mut p = scalar_store(0.0);
    let mut st = OptimState::new(&p);
    let cfg = AdamConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    adam_step(&mut p, &grads(&[("theta", 1.0)]), &mut st, &cfg).unwrap();
    // m̂ = v̂ = 1 after bias correction.
    let want = -0.1 / (1.0 + 1e-8);
    assert!((p.get("theta").unwrap().data()[0] as f64 - want).abs() < 1e-7);
    assert_eq!(st.step, 1);
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = scalar_store(0.75);
    let mut st = OptimState::new(&p);
    for _ in 0..3 {
        adam_step(
            &mut p,
            &grads(&[("theta", 0.0)]),
            &mut st,
            &AdamConfig::default(),
        )
        .unwrap();
    }
    assert_eq!(p.get("theta").unwrap().data(), &[0.75]);
    assert_eq!(st.m["theta"].data(), &[0.0]);
    assert_eq!(st.v["theta"].data(), &[0.0]);
    assert_eq!(st.step, 3);
}

#[test]
fn adam_rejects_key_mismatch_by_name() {
    let mut p = scalar_store(0.0);
    let mut st = OptimState::new(&p);
    let cfg = AdamConfig::default();
    let err = adam_step(
        &mut p,
        &grads(&[("theta", 1.0), ("stray", 1.0)]),
        &mut st,
        &cfg,
    )
    .unwrap_err();
    assert!(err.to_string().contains("stray"), "{err}");
    let err = adam_step(&mut p, &BTreeMap::new(), &mut st, &cfg).unwrap_err();
    assert!(err.to_string().contains("theta"), "{err}");
    assert_eq!(st.step, 0);
}

#[test]
fn adam_is_deterministic() {
    let mut rng = SplitMix64::new(4);
    let mut p = ParamStore::new();
    p.insert("a", Tensor::uniform(&[3, 2], 1.0, &mut rng));
    let g: BTreeMap<String, Tensor> =
        [("a".to_string(), Tensor::uniform(&[3, 2], 1.0, &mut rng))].into();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let mut q = p.clone();
        let mut st = OptimState::new(&q);
        adam_step(&mut q, &g, &mut st, &AdamConfig::default()).unwrap();
        adam_step(&mut q, &g, &mut st, &AdamConfig::default()).unwrap();
        runs.push((q, st));
    }
    assert_eq!(runs[0], runs[1]);
}

fn two_tensor_store() -> ParamStore {
    let mut rng = SplitMix64::new(9);
    let mut p = ParamStore::new();
    p.insert("conv.weight", Tensor::uniform(&[4, 3, 3, 3], 1.0, &mut rng));
    p.insert("b", Tensor::uniform(&[5], 1.0, &mut rng));
    p
}

#[test]
fn checkpoint_roundtrip_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.vtlr");
    let p = two_tensor_store();
    save_checkpoint(&p, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    for (k, t) in p.iter() {
        let u = back.get(k).unwrap();
        assert_eq!(t.shape(), u.shape());
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(t), bits(u), "{k}");
    }
    assert_eq!(back.len(), p.len());
    let expected: usize = 12
        + p.iter()
            .map(|(k, t)| 2 + k.len() + 1 + 4 * t.rank() + 4 * t.numel())
            .sum::<usize>();
    assert_eq!(fs::metadata(&path).unwrap().len() as usize, expected);
}

#[test]
fn checkpoint_rejects_corruption() {
    let bytes = encode(&two_tensor_store()).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(decode(&bad).unwrap_err().to_string().contains("magic"));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(decode(&bad).unwrap_err().to_string().contains("version"));
    assert!(decode(&bytes[..bytes.len() - 1])
        .unwrap_err()
        .to_string()
        .contains("truncated"));
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode(&long).is_err());

    let mut dup = ParamStore::new();
    dup.insert("a", Tensor::zeros(&[1]));
    let one = encode(&dup).unwrap();
    // Same record twice under a count of two.
    let mut twice = one[..8].to_vec();
    twice.extend_from_slice(&2u32.to_le_bytes());
    twice.extend_from_slice(&one[12..]);
    twice.extend_from_slice(&one[12..]);
    assert!(decode(&twice)
        .unwrap_err()
        .to_string()
        .contains("duplicate"));
}

fn dataset(dir: &Path, count: usize, seed: u64) {
    generate_dataset(dir, Profile::Easy, count, seed, ClipShape::default()).unwrap();
}

fn config(data: &Path, out: &Path, steps: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(data, out);
    cfg.steps = steps;
    cfg.batch_size = 2;
    cfg
}

#[test]
fn single_step_writes_one_row_and_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    dataset(&data, 10, 1);
    let out = dir.path().join("run");
    let outcome = train(&config(&data, &out, 1), |_| {}).unwrap();
    assert_eq!(outcome.log.len(), 1);
    let csv = fs::read_to_string(out.join(LOSS_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines, vec![LOSS_HEADER, outcome.log[0].csv().as_str()]);
    let files: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|f| f.ends_with(".vtlr"))
        .collect();
    assert_eq!(files, vec![CHECKPOINT_FILE.to_string()]);
    let model = load_model(&out.join(CHECKPOINT_FILE), None).unwrap();
    assert_eq!(model.params(), outcome.model.params());
    assert!(out.join(MODEL_CONFIG_FILE).is_file());
}

#[test]
fn same_config_gives_identical_loss_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    dataset(&data, 10, 2);
    let a = train(&config(&data, &dir.path().join("a"), 4), |_| {}).unwrap();
    let b = train(&config(&data, &dir.path().join("b"), 4), |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(
        fs::read(dir.path().join("a").join(CHECKPOINT_FILE)).unwrap(),
        fs::read(dir.path().join("b").join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn periodic_checkpoints_overwrite_the_same_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    dataset(&data, 10, 3);
    let out = dir.path().join("run");
    let mut cfg = config(&data, &out, 3);
    cfg.checkpoint_every = 1;
    let outcome = train(&cfg, |_| {}).unwrap();
    assert_eq!(
        load_checkpoint(&outcome.checkpoint).unwrap(),
        *outcome.model.params()
    );
}

#[test]
fn diverging_run_aborts_with_step_number() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    dataset(&data, 10, 4);
    let mut cfg = config(&data, &dir.path().join("run"), 50);
    cfg.adam.lr = 1e30;
    match train(&cfg, |_| {}) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("at step "), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("a learning rate of 1e30 should diverge"),
    }
}

#[test]
fn empty_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert!(train(&config(&empty, &dir.path().join("run"), 1), |_| {}).is_err());
}

#[test]
fn train_config_parsing() {
    let cfg =
        TrainConfig::parse("dataset = d\nout = o\nsteps = 7\nlr = 0.01\nlambda = 0.5\n").unwrap();
    assert_eq!(cfg.steps, 7);
    assert_eq!(cfg.adam.lr, 0.01);
    assert_eq!(cfg.loss.lambda, 0.5);
    assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
    let err = TrainConfig::parse("dataset = d\nout = o\nstpes = 3\n").unwrap_err();
    assert!(err.to_string().contains("stpes"), "{err}");
    let err = TrainConfig::parse("out = o\n").unwrap_err();
    assert!(err.to_string().contains("dataset"), "{err}");
    assert!(TrainConfig::parse("dataset = d\nout = o\nsteps = 0\n").is_err());
}

#[test]
fn recalibration_uses_statistics_of_the_final_weights() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    dataset(&data, 10, 5);
    let clips = load_training_clips(&data).unwrap();
    let mut model = ViTLR::new(ModelConfig::tiny(), 1).unwrap();
    // One batch holding every clip: the buffers become that batch's statistics.
    recalibrate_norms(&mut model, &clips, clips.len()).unwrap();
    let n = model.config().n;
    let frames: Vec<Tensor> = (0..n)
        .map(|k| {
            let data: Vec<f32> = clips
                .iter()
                .flat_map(|c| c.window(c.len() - 1, n).unwrap()[k].data().to_vec())
                .collect();
            Tensor::new(&[clips.len(), 3, 64, 64], data).unwrap()
        })
        .collect();
    let mut tape = Tape::new();
    let (_, stats) = model.forward(&mut tape, &frames, NormMode::Train).unwrap();
    assert!(!stats.is_empty());
    for (prefix, s) in &stats {
        assert_eq!(
            model
                .params()
                .get(&format!("{prefix}.running_mean"))
                .unwrap(),
            &s.mean
        );
        assert_eq!(
            model
                .params()
                .get(&format!("{prefix}.running_var"))
                .unwrap(),
            &s.var
        );
    }
}

#[test]
fn loss_falls_on_the_easy_profile() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    dataset(&data, 20, 6);
    let mut cfg = config(&data, &dir.path().join("run"), 1000);
    cfg.batch_size = 4;
    let log = train(&cfg, |_| {}).unwrap().log;
    let mean = |r: std::ops::Range<usize>| {
        log[r.clone()].iter().map(|l| l.total).sum::<f64>() / r.len() as f64
    };
    let (early, late) = (mean(0..100), mean(900..1000));
    assert!(late < early, "mean loss rose from {early} to {late}");
}
