//! Objectives on small dense denoisers: finite-difference gradients, the
//! reference-point identities and closed-form scalar oracles.

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use tpo_core::alignment::{
    dm_loss, dpo_image_loss, dpo_image_terms, kto_image_loss, kto_objective, kto_terms, tdpo_loss, tdpo_terms,
    tkto_loss, AlignHyper, DiffusionBatch, ErrorReduction, ImagePairBatch, KtoBatch, KtoTerms, TripletBatch,
};
use tpo_core::autodiff::{grad_check, ParameterStore, Tape, Tensor, Var};
use tpo_core::diffusion::{
    init_params, make_schedule, BoundDenoiser, DenoiserConfig, DiffusionSchedule, EpsModel, Parametrization,
};
use tpo_core::rng;
use tpo_core::scenegen::{sample_spec, Caption, Condition, IMAGE_LEN, VOCAB_SIZE};
use tpo_core::Result;

const D: usize = 6;
const T: usize = 50;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn toy_config(parametrization: Parametrization) -> DenoiserConfig {
    DenoiserConfig {
        hidden: vec![8],
        time_dim: 4,
        cond_dim: 4,
        vocab_size: VOCAB_SIZE,
        input_dim: D,
        parametrization,
        x0_floor: 0.1,
    }
}

struct Setup {
    cfg: DenoiserConfig,
    schedule: DiffusionSchedule,
    theta: ParameterStore<f64>,
    reference: ParameterStore<f64>,
}

fn setup(seed: u64, spread: f64, parametrization: Parametrization) -> Setup {
    let cfg = toy_config(parametrization);
    let reference = init_params(&cfg, seed).unwrap().cast::<f64>();
    let mut theta = reference.clone();
    let mut r = rng::stream(seed, 1);
    for (_, p) in theta.iter_mut() {
        for v in p.data_mut() {
            *v += spread * r.random_range(-1.0..1.0);
        }
    }
    Setup {
        cfg,
        schedule: make_schedule(T).unwrap(),
        theta,
        reference,
    }
}

fn uniform(b: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, 2);
    Tensor::new(vec![b, d], (0..b * d).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn normal(b: usize, d: usize, seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, 3);
    Tensor::new(vec![b, d], (0..b * d).map(|_| r.sample(StandardNormal)).collect()).unwrap()
}

fn timesteps(b: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::stream(seed, 4);
    (0..b).map(|_| r.random_range(1..=T)).collect()
}

fn captions(b: usize, seed: u64) -> Vec<Caption> {
    (0..b)
        .map(|i| Caption::from_spec(&sample_spec(rng::mix(seed, i as u64))).unwrap())
        .collect()
}

fn triplets(b: usize, seed: u64) -> TripletBatch<f64> {
    TripletBatch {
        x0: uniform(b, D, seed),
        eps: normal(b, D, seed),
        eps_l: None,
        t: timesteps(b, seed),
        c_w: captions(b, seed),
        c_l: captions(b, seed ^ 0xabcd),
    }
}

fn image_pairs(b: usize, seed: u64) -> ImagePairBatch<f64> {
    ImagePairBatch {
        x0_w: uniform(b, D, seed),
        x0_l: uniform(b, D, seed + 1),
        eps_w: normal(b, D, seed),
        eps_l: normal(b, D, seed + 1),
        t: timesteps(b, seed),
        conds: captions(b, seed),
    }
}

/// Matched and mismatched captions of the same images, alternating.
fn kto_batch(pairs: usize, seed: u64) -> KtoBatch<f64> {
    let x = uniform(pairs, D, seed);
    let e = normal(pairs, D, seed);
    let t = timesteps(pairs, seed);
    let (cw, cl) = (captions(pairs, seed), captions(pairs, seed ^ 0xabcd));
    let mut b = KtoBatch {
        x0: Tensor::zeros(vec![2 * pairs, D]),
        eps: Tensor::zeros(vec![2 * pairs, D]),
        t: Vec::new(),
        conds: Vec::new(),
        omega: Vec::new(),
    };
    for i in 0..pairs {
        for (j, (c, w)) in [(cw[i], 1i8), (cl[i], -1)].into_iter().enumerate() {
            let row = 2 * i + j;
            b.x0.data_mut()[row * D..(row + 1) * D].copy_from_slice(&x.data()[i * D..(i + 1) * D]);
            b.eps.data_mut()[row * D..(row + 1) * D].copy_from_slice(&e.data()[i * D..(i + 1) * D]);
            b.t.push(t[i]);
            b.conds.push(c);
            b.omega.push(w);
        }
    }
    b
}

fn hypers() -> Vec<AlignHyper> {
    let mut out = Vec::new();
    for beta in [2.0, 5000.0] {
        for clip_enabled in [false, true] {
            out.push(AlignHyper {
                beta,
                clip_enabled,
                ..AlignHyper::default()
            });
        }
    }
    out
}

/// Run `loss` with the trainable model bound from the checked store and a
/// frozen reference.
fn check<F>(s: &Setup, loss: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &dyn EpsModel<'t, f64>, &dyn EpsModel<'t, f64>) -> Result<Var<'t, f64>>,
{
    let report = grad_check(
        &s.theta,
        |tape, bound| {
            let theta = BoundDenoiser::from_bound(&s.cfg, T, bound.clone(), tape)?;
            let reference = BoundDenoiser::new(&s.cfg, T, &s.reference, tape, false)?;
            loss(tape, &theta, &reference)
        },
        STEP,
        TOL,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn dm_loss_gradients_match_finite_differences() {
    for p in [Parametrization::Eps, Parametrization::X0] {
        let s = setup(11, 0.1, p);
        let batch = DiffusionBatch {
            x0: uniform(4, D, 5),
            eps: normal(4, D, 5),
            t: timesteps(4, 5),
            conds: vec![
                Condition::Caption(captions(1, 1)[0]),
                Condition::Null,
                Condition::Caption(captions(1, 2)[0]),
                Condition::Null,
            ],
        };
        check(&s, |tape, theta, _| dm_loss(tape, theta, &s.schedule, &batch));
    }
}

#[test]
fn tdpo_gradients_match_finite_differences() {
    let s = setup(12, 0.1, Parametrization::Eps);
    let batch = triplets(5, 6);
    for hyper in hypers() {
        check(&s, |tape, theta, reference| {
            tdpo_loss(tape, theta, reference, &s.schedule, &batch, &hyper)
        });
    }
    let mut independent = batch.clone();
    independent.eps_l = Some(normal(5, D, 99));
    let hyper = AlignHyper {
        beta: 2.0,
        independent_noise: true,
        ..AlignHyper::default()
    };
    check(&s, |tape, theta, reference| {
        tdpo_loss(tape, theta, reference, &s.schedule, &independent, &hyper)
    });
}

#[test]
fn dpo_image_gradients_match_finite_differences() {
    let s = setup(13, 0.1, Parametrization::X0);
    let batch = image_pairs(5, 7);
    for hyper in hypers() {
        check(&s, |tape, theta, reference| {
            dpo_image_loss(tape, theta, reference, &s.schedule, &batch, &hyper)
        });
    }
}

/// Baseline zero, with the mean error gap clear of the `max(0, .)` kink.
fn assert_zero_baseline(s: &Setup, batch: &KtoBatch<f64>, hyper: &AlignHyper) {
    let tape = Tape::<f64>::new();
    let theta = BoundDenoiser::new(&s.cfg, T, &s.theta, &tape, false).unwrap();
    let reference = BoundDenoiser::new(&s.cfg, T, &s.reference, &tape, false).unwrap();
    let terms = kto_terms(&tape, &theta, &reference, &s.schedule, batch, hyper).unwrap();
    let mean_delta = terms.delta.value().data().iter().sum::<f64>() / batch.omega.len() as f64;
    assert_eq!(terms.z0, 0.0);
    assert!(mean_delta > 1e-3, "mean delta {mean_delta}");
}

#[test]
fn tkto_gradients_match_finite_differences() {
    let s = setup(14, 0.5, Parametrization::Eps);
    let batch = kto_batch(3, 8);
    for hyper in hypers() {
        assert_zero_baseline(&s, &batch, &hyper);
        check(&s, |tape, theta, reference| {
            tkto_loss(tape, theta, reference, &s.schedule, &batch, &hyper)
        });
    }
}

#[test]
fn kto_image_gradients_match_finite_differences() {
    let s = setup(15, 0.5, Parametrization::X0);
    let pairs = image_pairs(3, 9);
    let mut batch = kto_batch(3, 9);
    for i in 0..3 {
        let rows = [(2 * i, &pairs.x0_w), (2 * i + 1, &pairs.x0_l)];
        for (row, src) in rows {
            batch.x0.data_mut()[row * D..(row + 1) * D].copy_from_slice(&src.data()[i * D..(i + 1) * D]);
            batch.conds[row] = pairs.conds[i];
        }
    }
    for hyper in hypers() {
        assert_zero_baseline(&s, &batch, &hyper);
        check(&s, |tape, theta, reference| {
            kto_image_loss(tape, theta, reference, &s.schedule, &batch, &hyper)
        });
    }
}

/// `f` evaluated on the forward pass only, with both models frozen.
fn eval<F>(s: &Setup, theta: &ParameterStore<f64>, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &dyn EpsModel<'t, f64>, &dyn EpsModel<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::<f64>::new();
    let th = BoundDenoiser::new(&s.cfg, T, theta, &tape, false).unwrap();
    let reference = BoundDenoiser::new(&s.cfg, T, &s.reference, &tape, false).unwrap();
    f(&tape, &th, &reference).unwrap().item()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn reference_point_identities(
        seed in 0u64..1_000_000,
        b in 1usize..6,
        beta in 0.1f64..10_000.0,
        clip_enabled: bool,
        sum: bool,
    ) {
        let s = setup(seed, 0.0, Parametrization::X0);
        let hyper = AlignHyper {
            beta,
            clip_enabled,
            reduction: if sum { ErrorReduction::Sum } else { ErrorReduction::Mean },
            ..AlignHyper::default()
        };
        let ln2 = std::f64::consts::LN_2;
        let tr = triplets(b, seed);
        let l = eval(&s, &s.reference, |tape, th, r| tdpo_loss(tape, th, r, &s.schedule, &tr, &hyper));
        prop_assert!((l - ln2).abs() < 1e-6, "tdpo {}", l);
        let ip = image_pairs(b, seed);
        let l = eval(&s, &s.reference, |tape, th, r| dpo_image_loss(tape, th, r, &s.schedule, &ip, &hyper));
        prop_assert!((l - ln2).abs() < 1e-6, "dpo {}", l);
        let kb = kto_batch(b, seed);
        let l = eval(&s, &s.reference, |tape, th, r| tkto_loss(tape, th, r, &s.schedule, &kb, &hyper));
        prop_assert!((l + 0.5).abs() < 1e-6, "tkto {}", l);
        let l = eval(&s, &s.reference, |tape, th, r| kto_image_loss(tape, th, r, &s.schedule, &kb, &hyper));
        prop_assert!((l + 0.5).abs() < 1e-6, "kto {}", l);
    }

    #[test]
    fn tdpo_invariant_to_batch_order(seed in 0u64..1_000_000, b in 2usize..8, rot in 1usize..7) {
        let s = setup(seed, 0.2, Parametrization::X0);
        let hyper = AlignHyper { beta: 50.0, ..AlignHyper::default() };
        let batch = triplets(b, seed);
        let k = rot % b;
        let mut perm = batch.clone();
        let rotate = |src: &Tensor<f64>| {
            let mut v = src.data().to_vec();
            v.rotate_left(k * D);
            Tensor::new(vec![b, D], v).unwrap()
        };
        perm.x0 = rotate(&batch.x0);
        perm.eps = rotate(&batch.eps);
        perm.t.rotate_left(k);
        perm.c_w.rotate_left(k);
        perm.c_l.rotate_left(k);
        let a = eval(&s, &s.theta, |tape, th, r| tdpo_loss(tape, th, r, &s.schedule, &batch, &hyper));
        let p = eval(&s, &s.theta, |tape, th, r| tdpo_loss(tape, th, r, &s.schedule, &perm, &hyper));
        prop_assert!((a - p).abs() < 1e-12, "{} vs {}", a, p);
    }

    #[test]
    fn dm_loss_non_negative(seed in 0u64..1_000_000, b in 1usize..6) {
        let s = setup(seed, 1.0, Parametrization::Eps);
        let batch = DiffusionBatch {
            x0: uniform(b, D, seed),
            eps: normal(b, D, seed),
            t: timesteps(b, seed),
            conds: captions(b, seed).into_iter().map(Condition::Caption).collect(),
        };
        let l = eval(&s, &s.theta, |tape, th, _| dm_loss(tape, th, &s.schedule, &batch));
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn clipped_negative_branch_bounded(seed in 0u64..1_000_000, b in 1usize..6, spread in 0.0f64..2.0) {
        let s = setup(seed, spread, Parametrization::Eps);
        let hyper = AlignHyper::default();
        let batch = triplets(b, seed);
        let tape = Tape::<f64>::new();
        let th = BoundDenoiser::new(&s.cfg, T, &s.theta, &tape, false).unwrap();
        let r = BoundDenoiser::new(&s.cfg, T, &s.reference, &tape, false).unwrap();
        let terms = tdpo_terms(&tape, &th, &r, &s.schedule, &batch, &hyper).unwrap();
        let (raw, clipped, reference) = (terms.err_l_raw.value(), terms.err_l.value(), terms.ref_l.value());
        for i in 0..b {
            let bound = reference.data()[i] + hyper.lambda_bound;
            prop_assert!(clipped.data()[i] <= bound);
            prop_assert_eq!(clipped.data()[i], raw.data()[i].min(bound));
        }
    }
}

#[test]
fn active_clip_blocks_negative_branch_gradient() {
    let s = setup(21, 2.0, Parametrization::Eps);
    let hyper = AlignHyper::default();
    let batch = triplets(4, 21);
    let tape = Tape::<f64>::new();
    let bound = s.theta.bind(&tape, true).unwrap();
    let th = BoundDenoiser::from_bound(&s.cfg, T, bound.clone(), &tape).unwrap();
    let r = BoundDenoiser::new(&s.cfg, T, &s.reference, &tape, false).unwrap();
    let terms = tdpo_terms(&tape, &th, &r, &s.schedule, &batch, &hyper).unwrap();
    let raw = terms.err_l_raw.value().data().to_vec();
    let refs = terms.ref_l.value().data().to_vec();
    assert!(
        raw.iter().zip(&refs).all(|(a, r)| *a > r + hyper.lambda_bound),
        "{raw:?} {refs:?}"
    );
    let grads = tape.backward(terms.err_l.sum().unwrap()).unwrap();
    for (name, var) in bound.iter() {
        if let Some(g) = grads.get(var) {
            assert!(g.data().iter().all(|v| *v == 0.0), "{name}");
        }
    }
}

#[test]
fn dpo_identical_images_with_shared_noise_give_ln2() {
    for clip_enabled in [false, true] {
        let s = setup(22, 0.05, Parametrization::X0);
        let mut batch = image_pairs(5, 22);
        batch.x0_l = batch.x0_w.clone();
        batch.eps_l = batch.eps_w.clone();
        let hyper = AlignHyper {
            clip_enabled,
            ..AlignHyper::default()
        };
        let tape = Tape::<f64>::new();
        let th = BoundDenoiser::new(&s.cfg, T, &s.theta, &tape, false).unwrap();
        let r = BoundDenoiser::new(&s.cfg, T, &s.reference, &tape, false).unwrap();
        let terms = dpo_image_terms(&tape, &th, &r, &s.schedule, &batch, &hyper).unwrap();
        assert_eq!(
            terms.err_l.value().data(),
            terms.err_l_raw.value().data(),
            "clamp inactive"
        );
        let l = eval(&s, &s.theta, |tape, th, r| {
            dpo_image_loss(tape, th, r, &s.schedule, &batch, &hyper)
        });
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12, "{l}");
    }
}

#[test]
fn kto_label_flip_mirrors_each_item() {
    let s = setup(23, 0.5, Parametrization::Eps);
    let hyper = AlignHyper {
        beta: 3.0,
        clip_enabled: false,
        ..AlignHyper::default()
    };
    let batch = kto_batch(4, 23);
    assert_zero_baseline(&s, &batch, &hyper);
    let mut flipped = batch.clone();
    flipped.omega.iter_mut().for_each(|w| *w = -*w);
    let a = eval(&s, &s.theta, |tape, th, r| {
        kto_image_loss(tape, th, r, &s.schedule, &batch, &hyper)
    });
    let b = eval(&s, &s.theta, |tape, th, r| {
        kto_image_loss(tape, th, r, &s.schedule, &flipped, &hyper)
    });
    assert!((a + b + 1.0).abs() < 1e-12, "{a} + {b}");
}

fn injected(tape: &Tape<f64>, delta: &[f64], beta: f64) -> f64 {
    let z0 = (delta.iter().map(|d| -beta * d).sum::<f64>() / delta.len() as f64).max(0.0);
    let terms = KtoTerms {
        delta: tape.constant(Tensor::from_vec(delta.to_vec())).unwrap(),
        z0,
    };
    kto_objective(&terms, &vec![1; delta.len()], beta).unwrap().item()
}

#[test]
fn tkto_improvement_on_matched_batch_lowers_loss_for_small_beta() {
    let tape = Tape::<f64>::new();
    let delta = [-1e-3, -2e-3, -5e-4, -1.5e-3];
    for beta in [0.1, 0.5, 0.9] {
        let l = injected(&tape, &delta, beta);
        assert!(l < -0.5, "beta {beta}: {l}");
    }
}

#[test]
fn tkto_baseline_outweighs_uniform_improvement_for_large_beta() {
    let tape = Tape::<f64>::new();
    let l = injected(&tape, &[-1e-3; 4], 5000.0);
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let expected = -sig(5000.0 * (1e-3 - 5000.0 * 1e-3));
    assert!((l - expected).abs() < 1e-12);
    assert!(l > -0.5);
}

/// `eps_hat = w * x_t` on one-pixel images, optionally per caption kind.
struct Scalar {
    w: [f64; 3],
}

impl<'t> EpsModel<'t, f64> for Scalar {
    fn predict(&self, x_t: Var<'t, f64>, _t: &[usize], conds: &[Condition]) -> Result<Var<'t, f64>> {
        let w: Vec<f64> = conds
            .iter()
            .map(|c| match c {
                Condition::Caption(c) => self.w[c.spec().kind.index()],
                Condition::Null => self.w[0],
            })
            .collect();
        Ok(x_t.mul_const(Tensor::new(vec![w.len(), 1], w)?)?)
    }
}

fn kind_caption(kind: usize) -> Caption {
    captions(64, 5)
        .into_iter()
        .find(|c| c.spec().kind.index() == kind)
        .unwrap()
}

fn column(v: &[f64]) -> Tensor<f64> {
    Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn dpo_image_scalar_oracle() {
    let sched = make_schedule(1000).unwrap();
    let tape = Tape::<f64>::new();
    let theta = Scalar { w: [0.5, 0.2, -0.3] };
    let reference = Scalar { w: [0.45, 0.1, 0.0] };
    let batch = ImagePairBatch {
        x0_w: column(&[0.4, -0.2]),
        x0_l: column(&[-0.6, 0.9]),
        eps_w: column(&[0.3, -1.2]),
        eps_l: column(&[1.5, 0.1]),
        t: vec![150, 800],
        conds: vec![kind_caption(0), kind_caption(1)],
    };
    let hyper = AlignHyper {
        beta: 4.0,
        lambda_bound: 0.02,
        ..AlignHyper::default()
    };
    let loss = dpo_image_loss(&tape, &theta, &reference, &sched, &batch, &hyper)
        .unwrap()
        .item();

    let mut expected = 0.0;
    for (i, (k, t)) in [(0usize, 150usize), (1, 800)].into_iter().enumerate() {
        let (a, s) = (sched.alpha(t), sched.sigma(t));
        let xw = a * batch.x0_w.data()[i] + s * batch.eps_w.data()[i];
        let xl = a * batch.x0_l.data()[i] + s * batch.eps_l.data()[i];
        let (ew, el) = (batch.eps_w.data()[i], batch.eps_l.data()[i]);
        let err = |w: f64, x: f64, e: f64| (e - w * x).powi(2);
        let dw = err(theta.w[k], xw, ew) - err(reference.w[k], xw, ew);
        let ref_l = err(reference.w[k], xl, el);
        let dl = err(theta.w[k], xl, el).min(ref_l + 0.02) - ref_l;
        expected -= sigmoid(-4.0 * (dw - dl)).ln() / 2.0;
    }
    assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
}

#[test]
fn kto_image_scalar_oracle() {
    let sched = make_schedule(1000).unwrap();
    let tape = Tape::<f64>::new();
    let theta = Scalar { w: [0.2, 0.6, 0.1] };
    let reference = Scalar { w: [0.3, 0.5, 0.1] };
    let x0 = [0.5, -0.4, 0.8];
    let eps = [-0.9, 0.4, 1.3];
    let t = [50usize, 500, 950];
    let kinds = [0usize, 1, 2];
    let omega = [1i8, -1, -1];
    let batch = KtoBatch {
        x0: column(&x0),
        eps: column(&eps),
        t: t.to_vec(),
        conds: kinds.iter().map(|&k| kind_caption(k)).collect(),
        omega: omega.to_vec(),
    };
    let hyper = AlignHyper {
        beta: 1.5,
        lambda_bound: 0.01,
        ..AlignHyper::default()
    };
    let loss = kto_image_loss(&tape, &theta, &reference, &sched, &batch, &hyper)
        .unwrap()
        .item();

    let delta: Vec<f64> = (0..3)
        .map(|i| {
            let x = sched.alpha(t[i]) * x0[i] + sched.sigma(t[i]) * eps[i];
            let k = kinds[i];
            let ref_err = (eps[i] - reference.w[k] * x).powi(2);
            let mut th_err = (eps[i] - theta.w[k] * x).powi(2);
            if omega[i] < 0 {
                th_err = th_err.min(ref_err + 0.01);
            }
            th_err - ref_err
        })
        .collect();
    let z0 = (delta.iter().map(|d| -1.5 * d).sum::<f64>() / 3.0).max(0.0);
    let expected = -(0..3)
        .map(|i| sigmoid(omega[i] as f64 * 1.5 * (-delta[i] - z0)))
        .sum::<f64>()
        / 3.0;
    assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
}

/// Returns a fixed tensor regardless of its input.
struct Fixed(Tensor<f64>);

impl<'t> EpsModel<'t, f64> for Fixed {
    fn predict(&self, x_t: Var<'t, f64>, _t: &[usize], _conds: &[Condition]) -> Result<Var<'t, f64>> {
        Ok(x_t.tape().constant(self.0.clone())?)
    }
}

#[test]
fn dm_loss_of_exact_noise_predictor_is_zero() {
    let sched = make_schedule(T).unwrap();
    let eps = normal(8, IMAGE_LEN, 31);
    let batch = DiffusionBatch {
        x0: uniform(8, IMAGE_LEN, 31),
        eps: eps.clone(),
        t: timesteps(8, 31),
        conds: vec![Condition::Null; 8],
    };
    let tape = Tape::<f64>::new();
    let loss = dm_loss(&tape, &Fixed(eps), &sched, &batch).unwrap().item();
    assert_eq!(loss, 0.0);
}

#[test]
fn dm_loss_of_zero_predictor_is_pixel_count() {
    let n = 1000;
    let sched = make_schedule(T).unwrap();
    let batch = DiffusionBatch {
        x0: uniform(n, IMAGE_LEN, 32),
        eps: normal(n, IMAGE_LEN, 32),
        t: timesteps(n, 32),
        conds: vec![Condition::Null; n],
    };
    let tape = Tape::<f64>::new();
    let loss = dm_loss(&tape, &Fixed(Tensor::zeros(vec![n, IMAGE_LEN])), &sched, &batch)
        .unwrap()
        .item();
    let target = IMAGE_LEN as f64;
    assert!((loss - target).abs() < 0.02 * target, "{loss}");
}
