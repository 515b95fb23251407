use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lidar_resample::restore::{
    bce, loss_mse, loss_pcp, loss_self, train_two_stage, train_two_stage_observed,
    FeatureExtractor, Group, Mode, PyramidProjection, RestorationModel, Stage, TrainConfig,
    TrainSample,
};
use lidar_resample::synth::{generate_frames, SensorProfile};
use lidar_resample::voxel::{grid_mse, GridSpec, OccupancyGrid};
use lidar_resample::{Error, Result};

const EPS: f64 = 1e-7;

fn small() -> GridSpec {
    GridSpec::new([0.0; 3], [1.6, 1.6, 0.8], [0.1; 3]).unwrap()
}

fn random_grid(spec: GridSpec, seed: u64, density: f64) -> OccupancyGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..spec.len())
        .map(|_| {
            if rng.random::<f64>() < density {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    OccupancyGrid::from_values(spec, v).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

#[test]
fn bce_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let probs: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
    let targets: Vec<f64> = (0..500).map(|_| f64::from(rng.random::<bool>())).collect();
    let mut sum = 0.0;
    for i in 0..probs.len() {
        let p = probs[i].clamp(EPS, 1.0 - EPS);
        sum += if targets[i] == 1.0 {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        };
    }
    let oracle = sum / probs.len() as f64;
    assert!(close(bce(&probs, &targets), oracle, 1e-13));
}

#[test]
fn bce_of_exact_mask_is_bounded() {
    let mask = random_grid(small(), 3, 0.4);
    let v = mask.values();
    // equality up to rounding of the mean
    assert!(bce(v, v) <= -(1.0 - EPS).ln() * (1.0 + 1e-12));
    let half = vec![0.5; v.len()];
    assert!(close(bce(&half, v), 2f64.ln(), 1e-13));
}

/// Signed occupancy at full resolution, one copy per scale.
struct Signed;

impl FeatureExtractor for Signed {
    fn features(&self, grid: &OccupancyGrid) -> Result<[Vec<f64>; 3]> {
        let f: Vec<f64> = grid.values().iter().map(|v| 2.0 * v - 1.0).collect();
        Ok([f.clone(), f.clone(), f])
    }

    fn backward(&self, grid: &OccupancyGrid, upstream: &[Vec<f64>; 3]) -> Result<Vec<f64>> {
        Ok((0..grid.values().len())
            .map(|i| 2.0 * upstream.iter().map(|u| u[i]).sum::<f64>())
            .collect())
    }
}

#[test]
fn perceptual_identity_and_negation() {
    let a = random_grid(small(), 5, 0.3);
    let fx = PyramidProjection::new(0);
    assert!(loss_pcp(&fx, &a, &a).unwrap().value.abs() < 1e-12);

    let inverse =
        OccupancyGrid::from_values(small(), a.values().iter().map(|v| 1.0 - v).collect()).unwrap();
    let l = loss_pcp(&Signed, &a, &inverse).unwrap();
    assert!(close(l.value, 6.0, 1e-15));
    assert_eq!(l.degenerate, 0);
}

#[test]
fn perceptual_matches_dot_product_oracle() {
    let fx = PyramidProjection::new(9);
    for seed in 0..5 {
        let a = random_grid(small(), 100 + seed, 0.3);
        let b = random_grid(small(), 200 + seed, 0.2);
        let (fa, fb) = (fx.features(&a).unwrap(), fx.features(&b).unwrap());
        let mut oracle = 0.0;
        for s in 0..3 {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for i in 0..fa[s].len() {
                dot += fa[s][i] * fb[s][i];
                na += fa[s][i] * fa[s][i];
                nb += fb[s][i] * fb[s][i];
            }
            oracle += 1.0 - dot / (na.sqrt() * nb.sqrt());
        }
        let got = loss_pcp(&fx, &a, &b).unwrap().value;
        assert!(close(got, oracle, 1e-12), "{got} vs {oracle}");
        assert!((0.0..=6.0).contains(&got));
    }
}

#[test]
fn zero_feature_norm_is_flagged() {
    let fx = PyramidProjection::new(1);
    let empty = OccupancyGrid::zeros(small());
    let a = random_grid(small(), 8, 0.5);
    let l = loss_pcp(&fx, &empty, &a).unwrap();
    assert_eq!(l.degenerate, 3);
    assert_eq!(l.value, 3.0);
}

#[test]
fn self_loss_combines_terms() {
    let spec = small();
    let mut model = RestorationModel::new(4);
    let fx = PyramidProjection::new(2);
    let input = random_grid(spec, 1, 0.2);
    let target = random_grid(spec, 2, 0.3);

    let mse = loss_mse(&model, &input, &target, Mode::Eval).unwrap();
    let latent = model.encode(&input, Mode::Eval).unwrap();
    let restored = model.decode(&latent).unwrap();
    assert!(close(mse, grid_mse(&restored, &target).unwrap(), 1e-14));
    let pcp = loss_pcp(&fx, &restored, &target).unwrap().value;

    let l0 = loss_self(&model, &fx, &input, &target, 0.0, Mode::Eval).unwrap();
    let l1 = loss_self(&model, &fx, &input, &target, 1.0, Mode::Eval).unwrap();
    assert!(close(l0, mse, 1e-14));
    assert!(close(l1, mse + pcp, 1e-13));

    // perfect restoration at the grid level
    let perfect =
        grid_mse(&target, &target).unwrap() + loss_pcp(&fx, &target, &target).unwrap().value;
    assert!(perfect.abs() < 1e-12);
}

fn tiny_data(frames: usize) -> Vec<TrainSample> {
    generate_frames(&SensorProfile::waymo(), frames, 0)
        .unwrap()
        .iter()
        .map(TrainSample::from)
        .collect()
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        det_epochs: 2,
        ssl_epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn stage_two_freezes_encoder_and_head() {
    let data = tiny_data(4);
    let mut model = RestorationModel::new(0);
    let initial = model.clone();
    let mut after_det = None;
    let report = train_two_stage_observed(&mut model, &data, &quick_config(), &mut |stage, m| {
        if stage == Stage::Detection {
            after_det = Some(m.clone());
        }
    })
    .unwrap();
    let after_det = after_det.unwrap();

    assert_ne!(
        after_det.params(Group::Encoder),
        initial.params(Group::Encoder)
    );
    assert_eq!(
        after_det.params(Group::Decoder),
        initial.params(Group::Decoder)
    );

    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(
        bits(model.params(Group::Encoder)),
        bits(after_det.params(Group::Encoder))
    );
    assert_eq!(
        bits(model.params(Group::Head)),
        bits(after_det.params(Group::Head))
    );
    assert_ne!(
        model.params(Group::Decoder),
        after_det.params(Group::Decoder)
    );
    assert_ne!(model.norm_stats(), after_det.norm_stats());

    assert_eq!(report.epochs.len(), 4);
    assert!(report.ssl_initial.is_some() && report.ssl_final.is_some());
}

#[test]
fn training_is_deterministic() {
    let data = tiny_data(2);
    let cfg = TrainConfig {
        det_epochs: 1,
        ssl_epochs: 1,
        ..quick_config()
    };
    let run = || {
        let mut m = RestorationModel::new(cfg.seed);
        let r = train_two_stage(&mut m, &data, &cfg).unwrap();
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        (m.to_bytes(), csv)
    };
    assert_eq!(run(), run());
}

#[test]
fn report_csv_layout() {
    let data = tiny_data(2);
    let cfg = TrainConfig {
        det_epochs: 1,
        ssl_epochs: 1,
        ..quick_config()
    };
    let mut m = RestorationModel::new(0);
    let r = train_two_stage(&mut m, &data, &cfg).unwrap();
    let mut csv = Vec::new();
    r.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,stage,det,mse,pcp,self,degenerate_features,seed"
    );
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,detection,"));
    assert!(lines[1].contains(",,,,"));
    // epochs are numbered across both stages
    assert!(lines[2].starts_with("1,restoration,,"));
}

#[test]
fn training_rejects_bad_input() {
    let mut m = RestorationModel::new(0);
    assert!(matches!(
        train_two_stage(&mut m, &[], &quick_config()),
        Err(Error::EmptyInput(_))
    ));
    let cfg = TrainConfig {
        batch_size: 0,
        ..quick_config()
    };
    assert!(matches!(
        train_two_stage(&mut m, &tiny_data(1), &cfg),
        Err(Error::Config(_))
    ));
}

#[test]
fn detection_only_run_has_no_restoration_scores() {
    let cfg = TrainConfig {
        det_epochs: 1,
        ssl_epochs: 0,
        ..quick_config()
    };
    let mut m = RestorationModel::new(0);
    let before = m.clone();
    let r = train_two_stage(&mut m, &tiny_data(2), &cfg).unwrap();
    assert_eq!(r.ssl_initial, None);
    assert_eq!(m.params(Group::Decoder), before.params(Group::Decoder));
}

/// 16 frames, seed 0, 30 detection and 5 restoration epochs.
#[test]
fn golden_schedule_reduces_restoration_loss() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.det_epochs, cfg.ssl_epochs), (30, 5));
    let mut m = RestorationModel::new(0);
    let r = train_two_stage(&mut m, &tiny_data(16), &cfg).unwrap();
    let (i, f) = (r.ssl_initial.unwrap(), r.ssl_final.unwrap());
    assert!(f < i);
    // recorded from this run
    assert!((i - 2.144490).abs() < 1e-5, "{i}");
    assert!((f - 0.678977).abs() < 1e-5, "{f}");
}
