use proptest::prelude::*;

use spgi::metrics::locate_edge;
use spgi::scene::masks;
use spgi::*;

const PITCH: f64 = 6.5;

fn chopper(side: usize, jitter: f64) -> Scene {
    let grid = Grid::new(side, side, PITCH).unwrap();
    Scene::chopper(grid, ChopperGeometry { jitter_sigma_deg: jitter, ..ChopperGeometry::default() }).unwrap()
}

fn stack(side: usize, n: usize, seed: u64) -> PatternStack {
    speckle_stack(seed, (side, side), n, 1.5, PITCH as f32).unwrap()
}

fn noiseless_frames(stack: &PatternStack, scene: &Scene, scale: f64) -> Vec<FrameMeasurements> {
    let s = SamplingConfig::noiseless(100e3, scale);
    demultiplex(&run_campaign(stack, &CameraModel::disabled(PITCH), scene, &s).unwrap().records).unwrap()
}

fn system(stack: &PatternStack, frame: &FrameMeasurements) -> SensingSystem {
    preprocess(&SensingSystem::new(stack, &frame.values).unwrap(), Preprocessing::MeanCentered).unwrap()
}

#[test]
fn demux_matches_forward_model_with_jitter() {
    let st = stack(16, 12, 3);
    let scene = chopper(16, 0.3);
    let mut s = SamplingConfig::noiseless(100e3, 77.0);
    s.cycles_per_realization = 4;
    let frames = demultiplex(&run_campaign(&st, &CameraModel::disabled(PITCH), &scene, &s).unwrap().records).unwrap();
    for f in (0..500).step_by(7) {
        for r in 0..st.count() {
            let mut brute = 0.0;
            for c in 0..4 {
                let t = scene.transmission_at_phase((r * 4 + c) as u64, f as f64 / 500.0, true);
                brute += ideal_signal(st.pattern(r), &t, 77.0).unwrap();
            }
            let got = frames[f].values[r];
            assert!((got - brute).abs() <= f64::EPSILON * brute.abs(), "frame {f} realization {r}: {got} vs {brute}");
        }
    }
}

#[test]
fn static_scene_gives_identical_frames() {
    let st = stack(12, 20, 4);
    let grid = st.grid();
    let scene = Scene::static_mask(grid, masks::disk(&grid, 4.0), 200.0).unwrap();
    let frames = noiseless_frames(&st, &scene, 1e3);
    assert!(frames.iter().all(|f| f.values == frames[0].values));
}

#[test]
fn single_frame_movie_equals_direct_solve() {
    let st = stack(16, 128, 5);
    let frames = noiseless_frames(&st, &chopper(16, 0.0), 1e4);
    let cfg = TvConfig { max_outer: 60, ..TvConfig::default() };
    let movie = reconstruct_movie(&st, &frames[70..71], &cfg, Preprocessing::MeanCentered).unwrap();
    let direct = reconstruct_tv(&system(&st, &frames[70]), &cfg).unwrap();
    assert_eq!(movie[0].image.data, direct.image.data);
    assert_eq!(movie[0].iterations, direct.iterations);
}

#[test]
fn solver_decreases_objective_and_residual() {
    let st = stack(24, 288, 6);
    let scene = chopper(24, 0.0);
    let frames = noiseless_frames(&st, &scene, 1e4);
    let f0 = (scene.edge_centered_time().unwrap() * 100e3).round() as usize;
    for f in [f0 - 8, f0, f0 + 8] {
        let r = reconstruct_tv(&system(&st, &frames[f]), &TvConfig::default()).unwrap();
        assert!(r.final_objective <= r.initial_objective, "frame {f}");
        assert!(r.residual_norm < r.initial_residual_norm, "frame {f}");
        assert!(r.image.data.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn correlation_is_permutation_invariant() {
    let st = stack(16, 97, 7);
    let frames = noiseless_frames(&st, &chopper(16, 0.0), 1e4);
    let order: Vec<usize> = (0..97).map(|i| (i * 37 + 11) % 97).collect();
    let permuted = st.select(&order).unwrap();
    let values = FrameMeasurements { frame_index: 70, values: order.iter().map(|&i| frames[70].values[i]).collect() };
    let a = correlate_gi(&st, &frames[70]).unwrap();
    let b = correlate_gi(&permuted, &values).unwrap();
    assert_eq!(a.data, b.data);
}

#[test]
fn tv_is_permutation_equivariant_to_rounding() {
    let st = stack(16, 128, 8);
    let frames = noiseless_frames(&st, &chopper(16, 0.0), 1e4);
    let order: Vec<usize> = (0..128).rev().collect();
    let permuted = st.select(&order).unwrap();
    let values = FrameMeasurements { frame_index: 70, values: order.iter().map(|&i| frames[70].values[i]).collect() };
    let cfg = TvConfig { max_outer: 80, ..TvConfig::default() };
    let a = reconstruct_tv(&system(&st, &frames[70]), &cfg).unwrap();
    let b = reconstruct_tv(&system(&permuted, &values), &cfg).unwrap();
    let scale = a.image.min_max().1;
    let diff = a.image.data.iter().zip(&b.image.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-4 * scale, "max difference {diff} of {scale}");
}

#[test]
fn noiseless_reconstruction_scales_with_flux() {
    let st = stack(16, 128, 9);
    let scene = chopper(16, 0.0);
    let lo = noiseless_frames(&st, &scene, 1e3);
    let hi = noiseless_frames(&st, &scene, 8e3);
    let cfg = TvConfig { max_outer: 60, ..TvConfig::default() };
    let a = reconstruct_tv(&system(&st, &lo[70]), &cfg).unwrap();
    let b = reconstruct_tv(&system(&st, &hi[70]), &cfg).unwrap();
    let peak = b.image.min_max().1;
    for (x, y) in a.image.data.iter().zip(&b.image.data) {
        assert!((8.0 * x - y).abs() <= 1e-6 * peak);
    }
}

#[test]
fn uniform_scene_reconstructs_flat() {
    let st = stack(16, 128, 10);
    let grid = st.grid();
    let scene = Scene::static_mask(grid, Image::filled(16, 16, 1.0), 200.0).unwrap();
    let frames = noiseless_frames(&st, &scene, 1e3);
    let r = reconstruct_tv(&system(&st, &frames[0]), &TvConfig::default()).unwrap();
    let m = r.image.mean();
    let spread = r.image.data.iter().map(|v| (v - m).abs()).fold(0.0, f64::max);
    assert!(spread <= 0.02 * m, "spread {spread} around {m}");
    assert!((m / 1e3 - 1.0).abs() <= 0.02, "mean {m}");
}

#[test]
fn movie_tracks_the_opening_edge() {
    let side = 32;
    let st = stack(side, 512, 11);
    let scene = chopper(side, 0.0);
    let frames = noiseless_frames(&st, &scene, 1e4);
    let f0 = (scene.edge_centered_time().unwrap() * 100e3).round() as i64;
    let picked: Vec<FrameMeasurements> = (0..12).map(|i| frames[(f0 - 22 + 4 * i) as usize].clone()).collect();
    let out = reconstruct_movie(&st, &picked, &TvConfig::default(), Preprocessing::MeanCentered).unwrap();
    let mut last = f64::NEG_INFINITY;
    for (f, r) in picked.iter().zip(&out) {
        let truth = scene.edge_position_at_phase(0, f.frame_index as f64 / 500.0, false).unwrap();
        let Some(truth) = truth else { continue };
        let found = locate_edge(&r.image, PITCH).unwrap().position_um;
        assert!((found - truth).abs() <= 3.0 * PITCH, "frame {}: {found} vs {truth}", f.frame_index);
        assert!(found >= last - PITCH, "edge moved backwards at frame {}", f.frame_index);
        last = found;
    }
}

#[test]
fn gfps_and_gfms_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let st = stack(8, 10, 12);
    let mut s = SamplingConfig::noiseless(100e3, 50.0);
    s.noise = NoiseModel::Poisson;
    let camp = run_campaign(&st, &CameraModel::disabled(PITCH), &chopper(8, 0.2), &s).unwrap();
    save_stack(&camp.reference, dir.path().join("p.gfps")).unwrap();
    assert_eq!(load_stack(dir.path().join("p.gfps")).unwrap(), camp.reference);
    let frames = demultiplex(&camp.records).unwrap();
    let path = dir.path().join("m.gfms");
    spgi::demux::save_with_frames(&camp.records, 100e3, &frames, &path).unwrap();
    let (header, records, back) = spgi::demux::decode_frames(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(header.realizations, 10);
    assert_eq!(records, camp.records);
    assert_eq!(back, frames);
}

proptest! {
    #[test]
    fn shrink2_is_a_radial_contraction(gx in -10.0..10.0f64, gy in -10.0..10.0f64, t in 0.0..5.0f64) {
        let (sx, sy) = shrink2(gx, gy, t);
        let n = gx.hypot(gy);
        let m = sx.hypot(sy);
        prop_assert!((m - (n - t).max(0.0)).abs() <= 1e-12 * (1.0 + n));
        prop_assert!(sx * gx >= 0.0 && sy * gy >= 0.0);
        prop_assert!((sx * gy - sy * gx).abs() <= 1e-12 * (1.0 + n * n));
    }
}
