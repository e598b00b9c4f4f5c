//! Fixtures shared by the benchmarks.

use spgi::{
    calibrate_photon_scale, demultiplex, run_campaign, speckle_stack, CameraModel, ChopperGeometry, FrameMeasurements,
    Grid, NoiseModel, PatternStack, SamplingConfig, Scene,
};

pub const PITCH_UM: f64 = 6.5;

pub fn scene(side: usize) -> Scene {
    Scene::chopper(Grid::new(side, side, PITCH_UM).unwrap(), ChopperGeometry::default()).unwrap()
}

pub fn sampling(stack: &PatternStack, scene: &Scene, counts: f64) -> SamplingConfig {
    let mut s = SamplingConfig::noiseless(100e3, 1.0);
    s.photon_scale = calibrate_photon_scale(stack, scene, &s, counts).unwrap();
    s.noise = NoiseModel::Poisson;
    s
}

/// Reference stack and the edge-centered frame of a noisy campaign.
pub fn frame_fixture(side: usize, n: usize, counts: f64) -> (PatternStack, FrameMeasurements) {
    let stack = speckle_stack(1, (side, side), n, 10.0 / 6.5, PITCH_UM as f32).unwrap();
    let scene = scene(side);
    let s = sampling(&stack, &scene, counts);
    let camp = run_campaign(&stack, &CameraModel::disabled(PITCH_UM), &scene, &s).unwrap();
    let f0 = (scene.edge_centered_time().unwrap() * s.sample_rate_hz).round() as usize;
    let frame = demultiplex(&camp.records).unwrap().swap_remove(f0);
    (camp.reference, frame)
}
