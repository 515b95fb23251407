use lidar_resample::beams::{fit_and_label, fit_beam_model, label_bins};
use lidar_resample::geom::{Point, PointCloud};
use lidar_resample::pdda::{draw_policy, pdda_augment, ResampleSpec};
use lidar_resample::restore::{train_two_stage, RestorationModel, TrainConfig, TrainSample};
use lidar_resample::rng::RngState;
use lidar_resample::synth::{generate_frames, SensorProfile};
use lidar_resample::tta::{adapt_and_infer, run_queries, TtaConfig};
use lidar_resample::voxel::GridSpec;

#[test]
fn down2_draw_keeps_half_the_layers() {
    let frame = &generate_frames(&SensorProfile::waymo(), 1, 3).unwrap()[0];
    let (model, labelled) = fit_and_label(&frame.cloud, 64).unwrap();
    let seed = (0..100)
        .find(|&s| {
            let spec = draw_policy(0.0, &RngState::new(s));
            matches!(spec, ResampleSpec::Down { factor: 2, .. })
        })
        .unwrap();
    let (out, spec) = pdda_augment(&labelled, &model, 0.0, &RngState::new(seed)).unwrap();
    assert!(matches!(spec, ResampleSpec::Down { factor: 2, .. }));
    let counts = model.counts(&out).unwrap();
    assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 32);
}

fn ring_query(shift: f64) -> PointCloud {
    let mut pts = Vec::new();
    for beam in 0..8 {
        let elev = -0.3 + 0.06 * beam as f64;
        for j in 0..90 {
            let az = j as f64 * std::f64::consts::PI / 45.0;
            let r = 2.0 + shift + 0.5 * (3.0 * az).sin();
            pts.push(Point::new(
                r * elev.cos() * az.cos(),
                r * elev.cos() * az.sin(),
                r * elev.sin(),
            ));
        }
    }
    PointCloud::new(pts)
}

#[test]
fn hundred_queries_give_hundred_records() {
    let spec = GridSpec::new([-3.2, -3.2, -1.6], [3.2, 3.2, 1.6], [0.4; 3]).unwrap();
    let queries: Vec<PointCloud> = (0..100).map(|i| ring_query(0.002 * i as f64)).collect();
    let cfg = TtaConfig {
        n_iter: 1,
        beams: 8,
        factors: vec![2],
        ..TtaConfig::default()
    };
    let out = run_queries(&RestorationModel::new(0), &queries, &spec, &cfg).unwrap();
    assert_eq!(out.len(), 100);
    for (i, (_, r)) in out.iter().enumerate() {
        assert_eq!(r.query, i);
        assert_eq!(r.losses.len(), 2);
    }
}

/// Trained on 64-beam frames, queried with a 32-beam frame.
#[test]
fn shifted_domain_query_improves() {
    let data: Vec<TrainSample> = generate_frames(&SensorProfile::waymo(), 4, 0)
        .unwrap()
        .iter()
        .map(TrainSample::from)
        .collect();
    let cfg = TrainConfig {
        det_epochs: 3,
        ssl_epochs: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let mut model = RestorationModel::new(0);
    train_two_stage(&mut model, &data, &cfg).unwrap();

    let query = &generate_frames(&SensorProfile::nuscenes(), 1, 0).unwrap()[0].cloud;
    let beams = fit_beam_model(query, 64).unwrap();
    let tta = TtaConfig {
        n_iter: 5,
        ..TtaConfig::default()
    };
    let before = model.to_bytes();
    let (_, rec) = adapt_and_infer(&mut model, query, &beams, &cfg.grid, &tta, 0).unwrap();
    println!(
        "shifted query: {:.6} -> {:.6}",
        rec.initial_loss(),
        rec.final_loss()
    );
    assert!(rec.final_loss() < rec.initial_loss());
    assert_eq!(model.to_bytes(), before);
    assert_eq!(label_bins(query, &beams).unwrap().len(), query.len());
}
