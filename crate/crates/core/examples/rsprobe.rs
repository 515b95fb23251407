use lidar_resample::beams::*;
use lidar_resample::geom::PointCloud;
use lidar_resample::pdda::*;
use lidar_resample::rng::RngState;
use lidar_resample::synth::*;
use std::time::Instant;
fn main() {
    let f = &generate_frames(&SensorProfile::waymo(), 1, 5).unwrap()[0];
    let cloud = PointCloud::new(f.cloud.points[..100000].to_vec());
    let n = 50;
    let t = Instant::now();
    for _ in 0..n {
        fit_beam_model(&cloud, 64).unwrap();
    }
    println!("fit {:?}", t.elapsed() / n);
    let m = fit_beam_model(&cloud, 64).unwrap();
    let t = Instant::now();
    for _ in 0..n {
        label_bins(&cloud, &m).unwrap();
    }
    println!("label {:?}", t.elapsed() / n);
    let l = label_bins(&cloud, &m).unwrap();
    let t = Instant::now();
    for _ in 0..n {
        downsample(&l, &m, 2, 0.1, 0, &mut RngState::new(1)).unwrap();
    }
    println!("down {:?}", t.elapsed() / n);
    let t = Instant::now();
    for _ in 0..n {
        upsample(&l, &m, 2).unwrap();
    }
    println!("up2 {:?}", t.elapsed() / n);
}
