use std::sync::Mutex;

use blendrig_core::geometry::{euler_xyz, rotation_to_rot6d};
use blendrig_core::mixer::{
    cosine_lr, forward, infer, loss, loss_and_gradient, normalize_input, train, LossBasis,
    LossWeights, MixerConfig, MixerParams, NoopObserver, TrainConfig, TrainLogEntry, TrainObserver,
};
use blendrig_core::rig::{CoefficientVector, LandmarkBasis};
use blendrig_core::synth::DataSample;
use blendrig_core::{Camera, Error, RigidPose, Vec3, NUM_BLENDSHAPES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> MixerConfig {
    MixerConfig {
        tokens_in: 8,
        channels_in: 2,
        latent_tokens: 6,
        latent_channels: 4,
        num_blocks: 1,
        token_mlp_hidden: 5,
        channel_mlp_hidden: 7,
        interocular_pair: [0, 1],
    }
}

fn random_basis(rng: &mut ChaCha8Rng, landmarks: usize) -> LandmarkBasis {
    let mut p = || {
        Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.3..0.3),
        )
    };
    let neutral: Vec<Vec3> = (0..landmarks).map(|_| p()).collect();
    let shapes = (0..NUM_BLENDSHAPES)
        .map(|_| neutral.iter().map(|n| n + 0.05 * p()).collect())
        .collect();
    LandmarkBasis { neutral, shapes }
}

fn random_sample(
    rng: &mut ChaCha8Rng,
    index: u64,
    identity_id: u64,
    landmarks: usize,
) -> DataSample {
    let rot = euler_xyz(
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
        rng.random_range(-0.5..0.5),
    );
    let t = Vec3::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.2..0.2),
        rng.random_range(-0.3..0.3),
    );
    DataSample {
        index,
        identity_id,
        camera_id: 0,
        coefficients: CoefficientVector::new(
            (0..NUM_BLENDSHAPES)
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
        )
        .unwrap(),
        pose: RigidPose::from_rotation(&rot, t),
        landmarks2d: (0..landmarks)
            .map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)])
            .collect(),
    }
}

/// Tiny-network parameters with enough spread that every path is exercised.
fn tiny_params(seed: u64) -> MixerParams {
    let mut p = MixerParams::init(tiny_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFF);
    for v in p.data.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    p
}

fn check_gradient(basis: &LossBasis, weights: &LossWeights, samples: &[DataSample], seed: u64) {
    let params = tiny_params(seed);
    let batch: Vec<&DataSample> = samples.iter().collect();
    let (terms, grad) = loss_and_gradient(&params, &batch, basis, weights).unwrap();
    assert_eq!(grad.len(), params.len());
    let reference = loss(&params, &batch, basis, weights).unwrap();
    assert_eq!(terms, reference);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for (name, seg) in params.layout().named() {
        for j in seg.range() {
            let (mut a, mut b) = (params.clone(), params.clone());
            a.data[j] += h;
            b.data[j] -= h;
            let fa = loss(&a, &batch, basis, weights).unwrap().total;
            let fb = loss(&b, &batch, basis, weights).unwrap().total;
            let fd = (fa - fb) / (2.0 * h);
            let rel = (grad[j] - fd).abs() / grad[j].abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "{name}[{}]: analytic {} vs fd {fd} (rel {rel})",
                j - seg.offset,
                grad[j]
            );
        }
    }
    eprintln!("worst relative gradient error {worst:.2e}");
}

#[test]
fn gradient_matches_finite_differences_3d() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let basis = LossBasis::new(&random_basis(&mut rng, 8));
    let samples: Vec<_> = (0..3).map(|i| random_sample(&mut rng, i, 0, 8)).collect();
    check_gradient(&basis, &LossWeights::default(), &samples, 10);
}

#[test]
fn gradient_matches_finite_differences_projected_per_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let template = random_basis(&mut rng, 8);
    let other = random_basis(&mut rng, 8);
    let basis = LossBasis::new(&template)
        .with_identity(7, &other)
        .projected(vec![Camera::default()]);
    let samples: Vec<_> = (0..3)
        .map(|i| random_sample(&mut rng, i, 7 * (i % 2), 8))
        .collect();
    let weights = LossWeights {
        coeff: 0.7,
        landmark: 30.0,
        rotation: 1.3,
    };
    check_gradient(&basis, &weights, &samples, 11);
}

#[test]
fn zero_loss_batch_has_zero_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let basis = LossBasis::new(&random_basis(&mut rng, 8));
    let params = tiny_params(12);
    let samples: Vec<DataSample> = (0..4)
        .map(|i| {
            let mut s = random_sample(&mut rng, i, 0, 8);
            let out = infer(&params, &s.landmarks2d).unwrap();
            s.coefficients = CoefficientVector::new(out.coefficients).unwrap();
            s.pose.r6 = out.r6;
            s
        })
        .collect();
    let batch: Vec<&DataSample> = samples.iter().collect();
    let (terms, grad) =
        loss_and_gradient(&params, &batch, &basis, &LossWeights::default()).unwrap();
    assert_eq!(terms.total, 0.0);
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn rotation_head_gradient_vanishes_without_rotation_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let basis = LossBasis::new(&random_basis(&mut rng, 8));
    let params = tiny_params(13);
    let samples: Vec<_> = (0..3).map(|i| random_sample(&mut rng, i, 0, 8)).collect();
    let batch: Vec<&DataSample> = samples.iter().collect();
    let weights = LossWeights {
        rotation: 0.0,
        ..LossWeights::default()
    };
    let (_, grad) = loss_and_gradient(&params, &batch, &basis, &weights).unwrap();
    let l = params.layout();
    assert!(grad[l.rot_w.range()]
        .iter()
        .chain(&grad[l.rot_b.range()])
        .all(|&g| g == 0.0));
    assert!(grad[l.coef_w.range()].iter().any(|&g| g != 0.0));
    let (_, full) = loss_and_gradient(&params, &batch, &basis, &LossWeights::default()).unwrap();
    assert!(full[l.rot_w.range()].iter().any(|&g| g != 0.0));
}

#[test]
fn coefficient_term_single_coordinate() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let basis = LossBasis::new(&random_basis(&mut rng, 8));
    // Zero network predicts 0.5 everywhere.
    let params = MixerParams::zeros(tiny_config()).unwrap();
    let mut s = random_sample(&mut rng, 0, 0, 8);
    let delta = 0.3;
    let mut w = vec![0.5; NUM_BLENDSHAPES];
    w[17] += delta;
    s.coefficients = CoefficientVector::new(w).unwrap();
    let weights = LossWeights {
        rotation: 0.0,
        ..LossWeights::default()
    };
    let terms = loss(&params, &[&s], &basis, &weights).unwrap();
    assert!((terms.coeff - delta * delta / 52.0).abs() < 1e-15);
    // The undecodable zero rotation output is tolerated when unsupervised.
    assert_eq!(terms.rotation, 0.0);
    assert!(matches!(
        loss(&params, &[&s], &basis, &LossWeights::default()),
        Err(Error::DegenerateRotation(_))
    ));
}

#[test]
fn landmark_term_ignores_coefficient_differences_with_equal_reconstructions() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut rig = random_basis(&mut rng, 8);
    // Shapes 3 and 4 share one displacement, so trading weight between them
    // leaves the reconstruction unchanged.
    rig.shapes[4] = rig.shapes[3].clone();
    let basis = LossBasis::new(&rig);
    let params = MixerParams::zeros(tiny_config()).unwrap();
    let mut s = random_sample(&mut rng, 0, 0, 8);
    let mut w = vec![0.5; NUM_BLENDSHAPES];
    w[3] = 0.75;
    w[4] = 0.25;
    s.coefficients = CoefficientVector::new(w).unwrap();
    let weights = LossWeights {
        rotation: 0.0,
        ..LossWeights::default()
    };
    let terms = loss(&params, &[&s], &basis, &weights).unwrap();
    assert!(terms.landmark < 1e-30, "{}", terms.landmark);
    assert!((terms.coeff - 2.0 * 0.0625 / 52.0).abs() < 1e-15);
}

#[test]
fn total_is_weighted_sum_of_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let basis = LossBasis::new(&random_basis(&mut rng, 8));
    let params = tiny_params(14);
    let samples: Vec<_> = (0..20).map(|i| random_sample(&mut rng, i, 0, 8)).collect();
    let batch: Vec<&DataSample> = samples.iter().collect();
    let w = LossWeights {
        coeff: 0.3,
        landmark: 2.5,
        rotation: 0.9,
    };
    let t = loss(&params, &batch, &basis, &w).unwrap();
    assert!(t.coeff > 0.0 && t.landmark > 0.0 && t.rotation > 0.0);
    assert_eq!(
        t.total,
        w.coeff * t.coeff + w.landmark * t.landmark + w.rotation * t.rotation
    );
}

#[test]
fn standard_forward_shapes_and_range() {
    let cfg = MixerConfig::default();
    cfg.validate_standard().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut count = 0;
    for seed in 0..10 {
        let params = MixerParams::init(cfg.clone(), seed).unwrap();
        for _ in 0..100 {
            let lm: Vec<[f64; 2]> = (0..146)
                .map(|_| [rng.random_range(0.0..256.0), rng.random_range(0.0..256.0)])
                .collect();
            let x = normalize_input(&params, &lm).unwrap();
            assert_eq!(x.dim(), (146, 2));
            let act = forward(&params, &x).unwrap();
            let out = act.output();
            assert_eq!(out.coefficients.len(), 52);
            assert_eq!(out.r6.len(), 6);
            assert!(out.coefficients.iter().all(|&w| w > 0.0 && w < 1.0));
            count += 1;
        }
    }
    assert_eq!(count, 1000);
    let params = MixerParams::init(cfg, 0).unwrap();
    assert!(infer(&params, &[[0.0, 0.0]; 145]).is_err());
}

#[test]
fn lr_schedule_endpoints() {
    let cfg = TrainConfig::default();
    assert_eq!(cosine_lr(&cfg, 0), 1e-3);
    assert!((cosine_lr(&cfg, cfg.steps - 1) - 1e-5).abs() < 1e-20);
}

#[derive(Default)]
struct Recorder {
    logs: Vec<TrainLogEntry>,
    checkpoints: Vec<u64>,
    aborted: Option<(u64, String)>,
}

impl TrainObserver for Recorder {
    fn on_log(&mut self, e: &TrainLogEntry) {
        self.logs.push(e.clone());
    }
    fn on_checkpoint(&mut self, step: u64, params: &MixerParams) -> blendrig_core::Result<()> {
        params.check_finite()?;
        self.checkpoints.push(step);
        Ok(())
    }
    fn on_abort(&mut self, step: u64, last_good: &MixerParams) {
        self.aborted = Some((step, last_good.content_hash()));
    }
}

fn small_run(
    samples: usize,
    steps: u64,
    batch: usize,
    seed: u64,
) -> (Vec<DataSample>, LossBasis, TrainConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = LossBasis::new(&random_basis(&mut rng, 8));
    let data = (0..samples as u64)
        .map(|i| random_sample(&mut rng, i, 0, 8))
        .collect();
    let cfg = TrainConfig {
        batch_size: batch,
        steps,
        log_every: 10,
        holdout_every: 20,
        checkpoint_every: 25,
        seed,
        ..TrainConfig::default()
    };
    (data, basis, cfg)
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let (data, basis, cfg) = small_run(40, 30, 16, 9);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| {
            train(
                &data,
                &data[..5],
                &basis,
                &cfg,
                &tiny_config(),
                &mut NoopObserver,
            )
            .unwrap()
        })
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.params.content_hash(), b.params.content_hash());
    assert_eq!(a.log, b.log);
    let other = TrainConfig {
        seed: 10,
        ..cfg.clone()
    };
    let c = train(
        &data,
        &[],
        &basis,
        &other,
        &tiny_config(),
        &mut NoopObserver,
    )
    .unwrap();
    assert_ne!(a.params.content_hash(), c.params.content_hash());
}

#[test]
fn training_logs_and_checkpoints_on_schedule() {
    let (data, basis, cfg) = small_run(40, 55, 8, 11);
    let mut rec = Recorder::default();
    let out = train(&data, &data[..4], &basis, &cfg, &tiny_config(), &mut rec).unwrap();
    let steps: Vec<u64> = rec.logs.iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![10, 20, 30, 40, 50, 55]);
    assert_eq!(out.log, rec.logs);
    let with_holdout: Vec<u64> = rec
        .logs
        .iter()
        .filter(|e| e.holdout.is_some())
        .map(|e| e.step)
        .collect();
    assert_eq!(with_holdout, vec![20, 40, 55]);
    assert_eq!(rec.checkpoints, vec![25, 50]);
    for e in &rec.logs {
        let t = e.train;
        assert_eq!(t.total, t.coeff + t.landmark + t.rotation);
    }
    assert_eq!(rec.logs.last().unwrap().lr, 1e-5);
}

#[test]
fn non_finite_input_aborts_with_last_good_params() {
    let (mut data, basis, cfg) = small_run(4, 5, 4, 12);
    data[2].landmarks2d[5] = [f64::NAN, 1.0];
    let mut rec = Recorder::default();
    let err = train(&data, &[], &basis, &cfg, &tiny_config(), &mut rec).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let (step, hash) = rec.aborted.expect("abort callback");
    assert_eq!(step, 0);
    assert_eq!(
        hash,
        MixerParams::init(tiny_config(), cfg.seed)
            .unwrap()
            .content_hash()
    );
}

#[test]
fn invalid_training_config_is_rejected() {
    let (data, basis, cfg) = small_run(4, 5, 4, 13);
    let bad = TrainConfig {
        lr_end: 2e-3,
        ..cfg.clone()
    };
    assert!(matches!(
        train(&data, &[], &basis, &bad, &tiny_config(), &mut NoopObserver),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        train(&[], &[], &basis, &cfg, &tiny_config(), &mut NoopObserver),
        Err(Error::Config(_))
    ));
}

#[test]
fn overfits_ten_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = MixerConfig::desk();
    let basis = LossBasis::new(&random_basis(&mut rng, 146));
    let data: Vec<_> = (0..10)
        .map(|i| random_sample(&mut rng, i, 0, 146))
        .collect();
    let tc = TrainConfig {
        batch_size: 10,
        steps: 2000,
        log_every: 500,
        checkpoint_every: 0,
        seed: 14,
        ..TrainConfig::desk()
    };
    let last = Mutex::new(None);
    struct Last<'a>(&'a Mutex<Option<TrainLogEntry>>);
    impl TrainObserver for Last<'_> {
        fn on_log(&mut self, e: &TrainLogEntry) {
            eprintln!(
                "step {} coeff {:.3e} lmk {:.3e} rot {:.3e}",
                e.step, e.train.coeff, e.train.landmark, e.train.rotation
            );
            *self.0.lock().unwrap() = Some(e.clone());
        }
    }
    let out = train(&data, &[], &basis, &tc, &cfg, &mut Last(&last)).unwrap();
    let batch: Vec<&DataSample> = data.iter().collect();
    let final_terms = loss(&out.params, &batch, &basis, &tc.weights).unwrap();
    assert!(
        final_terms.coeff < 1e-3,
        "coefficient term {}",
        final_terms.coeff
    );
    assert!(last.lock().unwrap().is_some());
}

#[test]
fn rotation_supervision_uses_decoded_matrices() {
    let params = tiny_params(15);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let basis = LossBasis::new(&random_basis(&mut rng, 8));
    let mut s = random_sample(&mut rng, 0, 0, 8);
    let out = infer(&params, &s.landmarks2d).unwrap();
    let r = blendrig_core::rot6d_to_rotation(&out.r6).unwrap();
    s.pose.r6 = rotation_to_rot6d(&r);
    let terms = loss(&params, &[&s], &basis, &LossWeights::default()).unwrap();
    assert!(terms.rotation < 1e-28, "{}", terms.rotation);
}
