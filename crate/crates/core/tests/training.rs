//! Training loops: determinism, resume, dropout accounting, stage-2
//! initialization and data validation.

use tpo_core::alignment::{dm_loss, DiffusionBatch};
use tpo_core::autodiff::{Tape, Tensor};
use tpo_core::diffusion::{make_schedule, BoundDenoiser, DenoiserConfig, NoisePredictor, DEFAULT_T};
use tpo_core::editor::{build_image_pair_dataset, build_text_pref_dataset, EditPlan, PreferenceTriplet};
use tpo_core::rng;
use tpo_core::scenegen::{Condition, Dataset, PairedDataset, IMAGE_LEN};
use tpo_core::trainer::{sft_batch, train_align, train_sft, AlignData, Checkpoint, Stage, TrainConfig};
use tpo_core::Error;

fn small_model() -> DenoiserConfig {
    DenoiserConfig {
        hidden: vec![16],
        ..DenoiserConfig::default()
    }
}

fn sft_config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        max_steps: Some(steps),
        batch_size: 4,
        seed,
        eval_every: 5,
        ..TrainConfig::default()
    }
}

fn align_config(stage: Stage, steps: usize) -> TrainConfig {
    TrainConfig {
        stage,
        max_steps: Some(steps),
        batch_size: 4,
        eval_every: steps,
        ..TrainConfig::default()
    }
}

struct World {
    data: Dataset,
    triplets: Vec<PreferenceTriplet>,
    pairs: PairedDataset,
    sft: Checkpoint,
}

fn world() -> World {
    let data = Dataset::generate(32, 1).unwrap();
    let plan = EditPlan::default();
    let triplets = build_text_pref_dataset(&data.records, &plan).unwrap();
    let pairs = build_image_pair_dataset(&data, &plan).unwrap();
    let sft = train_sft(&data, &small_model(), DEFAULT_T, &sft_config(10, 2), None, None)
        .unwrap()
        .last;
    World {
        data,
        triplets,
        pairs,
        sft,
    }
}

#[test]
fn sft_reruns_are_bitwise_identical() {
    let data = Dataset::generate(16, 3).unwrap();
    let cfg = sft_config(100, 4);
    let a = train_sft(&data, &small_model(), DEFAULT_T, &cfg, None, None).unwrap();
    let b = train_sft(&data, &small_model(), DEFAULT_T, &cfg, None, None).unwrap();
    assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    assert_eq!(a.log, b.log);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = Dataset::generate(16, 5).unwrap();
    let full = train_sft(&data, &small_model(), DEFAULT_T, &sft_config(20, 6), None, None).unwrap();
    let half = train_sft(&data, &small_model(), DEFAULT_T, &sft_config(10, 6), None, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    half.last.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let resumed = train_sft(
        &data,
        &small_model(),
        DEFAULT_T,
        &sft_config(20, 6),
        Some(&loaded),
        None,
    )
    .unwrap();
    assert_eq!(resumed.last.to_bytes().unwrap(), full.last.to_bytes().unwrap());
}

#[test]
fn continuing_under_a_new_seed_is_deterministic() {
    let data = Dataset::generate(16, 7).unwrap();
    let a = train_sft(&data, &small_model(), DEFAULT_T, &sft_config(10, 8), None, None)
        .unwrap()
        .last;
    let cfg_b = sft_config(20, 9);
    let x = train_sft(&data, &small_model(), DEFAULT_T, &cfg_b, Some(&a), None)
        .unwrap()
        .last;
    let y = train_sft(&data, &small_model(), DEFAULT_T, &cfg_b, Some(&a), None)
        .unwrap()
        .last;
    assert_eq!(x.to_bytes().unwrap(), y.to_bytes().unwrap());
    let z = train_sft(&data, &small_model(), DEFAULT_T, &sft_config(20, 8), Some(&a), None)
        .unwrap()
        .last;
    assert_ne!(x.params, z.params);
}

#[test]
fn dropout_zero_never_uses_the_null_condition() {
    let data = Dataset::generate(16, 10).unwrap();
    let captions = data.captions().unwrap();
    let mut cfg = sft_config(30, 11);
    cfg.cond_dropout = 0.0;
    for step in 0..30 {
        let (batch, nulls) = sft_batch(&data, &captions, &cfg, DEFAULT_T, step).unwrap();
        assert_eq!(nulls, 0);
        assert!(batch.conds.iter().all(|c| matches!(c, Condition::Caption(_))));
    }
    assert_eq!(
        train_sft(&data, &small_model(), DEFAULT_T, &cfg, None, None)
            .unwrap()
            .null_conditions,
        0
    );
    cfg.cond_dropout = 0.5;
    assert!(
        train_sft(&data, &small_model(), DEFAULT_T, &cfg, None, None)
            .unwrap()
            .null_conditions
            > 0
    );
}

#[test]
fn empty_dataset_rejected() {
    let data = Dataset::generate(0, 0).unwrap();
    let err = train_sft(&data, &small_model(), DEFAULT_T, &sft_config(5, 0), None, None).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)), "{err}");
}

fn window_mean(log: &[f64], range: std::ops::Range<usize>) -> f64 {
    log[range.clone()].iter().sum::<f64>() / range.len() as f64
}

#[test]
fn sft_loss_falls_over_the_first_200_steps() {
    let data = Dataset::generate(256, 12).unwrap();
    let mut falling = 0;
    for seed in 0..10 {
        let cfg = TrainConfig {
            max_steps: Some(200),
            seed,
            eval_every: 1,
            ..TrainConfig::default()
        };
        let out = train_sft(&data, &DenoiserConfig::default(), DEFAULT_T, &cfg, None, None).unwrap();
        let losses: Vec<f64> = out.log.iter().map(|r| r.loss).collect();
        assert_eq!(losses.len(), 201);
        if window_mean(&losses, 181..201) < window_mean(&losses, 0..20) {
            falling += 1;
        }
    }
    assert!(falling >= 10, "{falling} of 10 runs fell");
}

/// Mean diffusion loss over fixed held-out items under `cond`.
fn held_out_loss(model: &tpo_core::diffusion::Denoiser, data: &Dataset, cond: Option<Condition>) -> f64 {
    let schedule = make_schedule(model.t_max).unwrap();
    let n = data.len();
    let mut r = rng::stream(99, 0);
    let t: Vec<usize> = (0..n).map(|i| 1 + (i * 37) % model.t_max).collect();
    let eps: Vec<f32> = (0..n).flat_map(|_| rng::normal_vec(&mut r, IMAGE_LEN)).collect();
    let x0: Vec<f32> = data.images.iter().flat_map(|i| i.data().to_vec()).collect();
    let captions = data.captions().unwrap();
    let batch = DiffusionBatch {
        x0: Tensor::new(vec![n, IMAGE_LEN], x0).unwrap(),
        eps: Tensor::new(vec![n, IMAGE_LEN], eps).unwrap(),
        t,
        conds: (0..n)
            .map(|i| cond.unwrap_or(Condition::Caption(captions[i])))
            .collect(),
    };
    let tape = Tape::<f32>::new();
    let bound = BoundDenoiser::new(&model.config, model.t_max, &model.params, &tape, false).unwrap();
    dm_loss(&tape, &bound, &schedule, &batch).unwrap().item() as f64
}

#[test]
fn null_path_and_conditioning_are_trained() {
    let data = Dataset::generate(128, 13).unwrap();
    let held = Dataset::generate(32, 14).unwrap();
    let cfg = TrainConfig {
        max_steps: Some(100),
        seed: 15,
        eval_every: 100,
        ..TrainConfig::default()
    };
    let init = train_sft(
        &data,
        &DenoiserConfig::default(),
        DEFAULT_T,
        &TrainConfig {
            max_steps: Some(0),
            ..cfg.clone()
        },
        None,
        None,
    )
    .unwrap()
    .last
    .denoiser();
    let trained = train_sft(&data, &DenoiserConfig::default(), DEFAULT_T, &cfg, None, None)
        .unwrap()
        .last
        .denoiser();
    let before = held_out_loss(&init, &held, Some(Condition::Null));
    let after = held_out_loss(&trained, &held, Some(Condition::Null));
    assert!(after < before, "null loss {before} -> {after}");

    let captions = held.captions().unwrap();
    let (c1, c2) = (
        captions[0],
        captions.iter().find(|c| **c != captions[0]).copied().unwrap(),
    );
    let x = held.images[0].data();
    let e1 = trained.predict(x, 500, &[Condition::Caption(c1)]).unwrap();
    let e2 = trained.predict(x, 500, &[Condition::Caption(c2)]).unwrap();
    assert_ne!(e1, e2);
}

#[test]
fn alignment_starts_at_the_reference_identity() {
    let w = world();
    let triplets = AlignData::Triplets {
        images: &w.data.images,
        triplets: &w.triplets,
    };
    let pairs = AlignData::Pairs(&w.pairs);
    let ln2 = std::f64::consts::LN_2;
    for (stage, data, expected) in [
        (Stage::Tdpo, &triplets, ln2),
        (Stage::Tkto, &triplets, -0.5),
        (Stage::Dpo, &pairs, ln2),
        (Stage::Kto, &pairs, -0.5),
    ] {
        let out = train_align(data, &w.sft, &align_config(stage, 3), None).unwrap();
        assert_eq!(out.log[0].step, 0);
        assert!(
            (out.log[0].loss - expected).abs() < 1e-6,
            "{stage}: {}",
            out.log[0].loss
        );
        assert_ne!(out.last.params, w.sft.params, "{stage} did not move");
    }
}

#[test]
fn reference_checkpoint_stays_frozen() {
    let w = world();
    let before = w.sft.to_bytes().unwrap();
    let data = AlignData::Triplets {
        images: &w.data.images,
        triplets: &w.triplets,
    };
    let out = train_align(&data, &w.sft, &align_config(Stage::Tdpo, 5), None).unwrap();
    assert_eq!(w.sft.to_bytes().unwrap(), before);
    let moved = out.last.params.max_abs_diff(&w.sft.params).unwrap();
    assert!(moved > 0.0);
}

#[test]
fn stage_and_data_must_agree() {
    let w = world();
    let pairs = AlignData::Pairs(&w.pairs);
    let err = train_align(&pairs, &w.sft, &align_config(Stage::Tdpo, 2), None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("tdpo") && msg.contains("image pairs"), "{msg}");
    let triplets = AlignData::Triplets {
        images: &w.data.images,
        triplets: &w.triplets,
    };
    let err = train_align(&triplets, &w.sft, &align_config(Stage::Kto, 2), None).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("kto") && msg.contains("caption triplets"), "{msg}");
    assert!(train_align(&triplets, &w.sft, &align_config(Stage::Sft, 2), None).is_err());
}

#[test]
fn alignment_reruns_are_bitwise_identical() {
    let w = world();
    let data = AlignData::Triplets {
        images: &w.data.images,
        triplets: &w.triplets,
    };
    for stage in [Stage::Tdpo, Stage::Tkto] {
        let cfg = align_config(stage, 4);
        let a = train_align(&data, &w.sft, &cfg, None).unwrap();
        let b = train_align(&data, &w.sft, &cfg, None).unwrap();
        assert_eq!(a.last.to_bytes().unwrap(), b.last.to_bytes().unwrap());
    }
}
