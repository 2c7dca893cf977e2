use polyglot_core::checkpoint::{average_checkpoint_files, average_checkpoints, Checkpoint};
use polyglot_core::corpus::TrainingInstance;
use polyglot_core::model::{Model, ModelConfig};
use polyglot_core::trainer::{lr_at, token_batches, TrainConfig, Trainer};
use polyglot_core::vocab::EOS;
use polyglot_core::{Error, LangId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(dropout: f64) -> ModelConfig {
    ModelConfig {
        d: 16,
        d_ff: 32,
        heads: 2,
        layers: 1,
        vocab_size: 14,
        languages: 2,
        use_laln: true,
        use_lalt: true,
        merged_attention: false,
        dropout_residual: dropout,
        dropout_attention: dropout,
    }
}

/// Target equals source; tokens from the ordinary range 6..14.
fn copy_data(n: usize, seed: u64) -> Vec<TrainingInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(2..5);
            let source: Vec<u32> = (0..len).map(|_| rng.gen_range(6..14)).collect();
            let mut target = source.clone();
            target.push(EOS);
            TrainingInstance {
                source,
                target,
                lang: LangId(rng.gen_range(0..2)),
            }
        })
        .collect()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        batch_tokens: 80,
        warmup: 50,
        lr_scale: 1.0,
        label_smoothing: 0.0,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn copy_task_overfits() {
    let data = copy_data(24, 1);
    let model = Model::new(tiny(0.0), 0.3, 2).unwrap();
    let refs: Vec<&TrainingInstance> = data.iter().collect();
    let before = model.loss(&refs, 0.0).unwrap();
    let mut t = Trainer::new(model, train_cfg()).unwrap();
    let mut last = f64::INFINITY;
    t.run(&data, 500, None, |_, s| {
        last = s.loss;
        Ok(true)
    })
    .unwrap();
    let after = t.model.loss(&refs, 0.0).unwrap();
    assert!(after < 0.1, "loss {after} after {} steps", t.step());
    assert!(after < before);
    assert!(last.is_finite());
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let data = copy_data(10, 2);
    let model = Model::new(tiny(0.1), 0.3, 3).unwrap();
    let before: Vec<Vec<f32>> = model.params().iter().map(|p| p.data().to_vec()).collect();
    let mut t = Trainer::new(
        model,
        TrainConfig {
            lr_scale: 0.0,
            ..train_cfg()
        },
    )
    .unwrap();
    t.run(&data, 5, None, |_, _| Ok(true)).unwrap();
    for (p, b) in t.model.params().iter().zip(&before) {
        assert_eq!(p.data(), &b[..]);
    }
    assert_eq!(t.step(), 5);
}

#[test]
fn training_is_deterministic_given_seed() {
    let data = copy_data(30, 3);
    let run = || {
        let mut t = Trainer::new(Model::new(tiny(0.2), 0.3, 4).unwrap(), train_cfg()).unwrap();
        let mut log = Vec::new();
        t.run(&data, 12, Some(&mut log), |_, _| Ok(true)).unwrap();
        (t.model.params().to_vec(), log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    let losses = |log: Vec<u8>| -> Vec<(u64, f64)> {
        String::from_utf8(log)
            .unwrap()
            .lines()
            .map(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                (v["step"].as_u64().unwrap(), v["loss"].as_f64().unwrap())
            })
            .collect()
    };
    let la = losses(la);
    assert_eq!(la.len(), 12);
    assert_eq!(la, losses(lb));
}

#[test]
fn non_finite_parameters_are_reported() {
    let data = copy_data(4, 4);
    let mut model = Model::new(tiny(0.0), 0.3, 5).unwrap();
    model.param_mut("output.bias").unwrap().data_mut()[0] = f32::NAN;
    let mut t = Trainer::new(model, train_cfg()).unwrap();
    let refs: Vec<&TrainingInstance> = data.iter().collect();
    assert!(matches!(t.train_step(&refs), Err(Error::NonFinite { step: 1, .. })));
}

#[test]
fn token_batches_cover_every_instance_within_budget() {
    let data = copy_data(100, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let batches = token_batches(&data, 20, &mut rng);
    let mut seen = vec![0; data.len()];
    for b in &batches {
        let tokens: usize = b.iter().map(|&i| data[i].target.len()).sum();
        assert!(tokens <= 20 || b.len() == 1);
        for &i in b {
            seen[i] += 1;
        }
    }
    assert!(seen.iter().all(|&c| c == 1));
}

#[test]
fn warmup_then_inverse_square_root() {
    let peak = lr_at(50, 16, 50, 1.0);
    for s in 1..50 {
        assert!(lr_at(s, 16, 50, 1.0) < lr_at(s + 1, 16, 50, 1.0));
    }
    assert!((lr_at(200, 16, 50, 1.0) - peak / 2.0).abs() < 1e-12);
}

fn random_ckpt(seed: u64) -> Checkpoint {
    let m: Model<f32> = Model::new(tiny(0.1), 0.5, seed).unwrap();
    Checkpoint::from_model(&m, seed * 10, None)
}

#[test]
fn checkpoint_bytes_round_trip() {
    let data = copy_data(8, 7);
    let mut t = Trainer::new(Model::new(tiny(0.1), 0.3, 8).unwrap(), train_cfg()).unwrap();
    t.run(&data, 3, None, |_, _| Ok(true)).unwrap();
    let c = t.checkpoint();
    let bytes = c.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.config, c.config);
    assert_eq!(back.step, 3);
    assert_eq!(back.names, c.names);
    assert_eq!(back.tensors, c.tensors);
    assert_eq!(back.optimizer, c.optimizer);
    let resumed = Trainer::from_checkpoint(&back, train_cfg()).unwrap();
    assert_eq!(resumed.step(), 3);
    assert_eq!(resumed.adam.m, t.adam.m);

    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint at all").is_err());
}

#[test]
fn averaging_identical_checkpoints_is_identity() {
    let c = random_ckpt(1);
    let avg = average_checkpoints(&[c.clone(), c.clone(), c.clone()]).unwrap();
    assert_eq!(avg.tensors, c.tensors);
    assert!(avg.optimizer.is_none());
}

#[test]
fn averaging_opposites_gives_zero() {
    let c = random_ckpt(2);
    let mut neg = c.clone();
    for t in &mut neg.tensors {
        for v in t.data_mut() {
            *v = -*v;
        }
    }
    let avg = average_checkpoints(&[c, neg]).unwrap();
    assert!(avg.tensors.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn averaging_three_matches_elementwise_mean() {
    let cs: Vec<Checkpoint> = (3..6).map(random_ckpt).collect();
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = cs
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let p = dir.path().join(format!("c{i}.ckpt"));
            c.save(&p).unwrap();
            p
        })
        .collect();
    let avg = average_checkpoint_files(&paths).unwrap();
    assert_eq!(avg.step, 50);
    for (k, t) in avg.tensors.iter().enumerate() {
        for (j, &v) in t.data().iter().enumerate() {
            let want = cs.iter().map(|c| c.tensors[k].data()[j] as f64).sum::<f64>() / 3.0;
            assert!((v as f64 - want).abs() < 1e-7, "{v} vs {want}");
        }
    }
    let m: Model<f32> = avg.to_model().unwrap();
    assert_eq!(m.numel(), cs[0].tensors.iter().map(|t| t.numel()).sum::<usize>());

    let mut other = random_ckpt(6);
    other.config.use_lalt = false;
    assert!(average_checkpoints(&[cs[0].clone(), other]).is_err());
    assert!(average_checkpoints(&[]).is_err());
}
