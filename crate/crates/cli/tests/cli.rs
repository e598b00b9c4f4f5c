use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spgi::metrics::locate_edge;
use spgi::recon::export::decode_gfim;
use spgi::{demultiplex, load_stack, ChopperGeometry, Grid, Scene};

const MINIMAL: &str = "\
# tiny run
grid.height = 16
grid.width = 16
diffuser.seed = 4
diffuser.count = 64
scene.jitter_deg = 0.2
sampling.noise = poisson
sampling.noise_seed = 9
sampling.mean_counts = 500
sampling.cycles = 2
recon.max_outer = 40
";

fn spgi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spgi")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spgi(args);
    assert!(out.status.success(), "spgi {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn simulate_outputs_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MINIMAL);
    let out = tmp.path().join("out");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    let stack = load_stack(out.join("patterns.gfps")).unwrap();
    assert_eq!((stack.count(), stack.height(), stack.width()), (64, 16, 16));
    let (header, records) = spgi::acquisition::load_records(out.join("records.gfms")).unwrap();
    assert_eq!((header.realizations, header.samples_per_cycle, header.cycles), (64, 500, 2));
    let frames = demultiplex(&records).unwrap();
    assert_eq!(frames.len(), 500);
    let manifest = fs::read_to_string(out.join("manifest.cfg")).unwrap();
    for key in ["diffuser.seed = 4", "sampling.noise_seed = 9", "scene.jitter_seed", "manifest.gfms_version = 1"] {
        assert!(manifest.contains(key), "manifest lacks {key}:\n{manifest}");
    }
}

#[test]
fn manifest_rerun_is_byte_identical_across_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MINIMAL);
    let run = |config: &Path, out: &Path, threads: &str| {
        ok(&["simulate", "--config", s(config), "--out", s(out), "--threads", threads]);
        ok(&["demux", "--config", s(config), "--out", s(out), "--threads", threads, "--format", "csv"]);
        for method in ["tv", "correlation"] {
            let dir = out.join(method);
            ok(&[
                "reconstruct", "--config", s(config), "--out", s(&dir), "--threads", threads, "--method", method,
                "--patterns", s(&out.join("patterns.gfps")), "--records", s(&out.join("frames.gfms")),
                "--frames", "60..90:10", "--format", "pgm,gfim",
            ]);
        }
    };
    let first = tmp.path().join("first");
    run(&cfg, &first, "1");
    let second = tmp.path().join("second");
    run(&first.join("manifest.cfg"), &second, "4");
    for sub in ["", "tv", "correlation"] {
        let (a, b) = (snapshot(&first.join(sub)), snapshot(&second.join(sub)));
        assert!(!a.is_empty());
        assert_eq!(a.len(), b.len());
        for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
            assert_eq!(na, nb);
            assert!(ba == bb, "{sub}/{na} differs between runs");
        }
    }
}

#[test]
fn seed_override_changes_every_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MINIMAL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["simulate", "--config", s(&cfg), "--out", s(&b), "--seed-override", "77"]);
    let manifest = fs::read_to_string(b.join("manifest.cfg")).unwrap();
    assert!(manifest.contains("diffuser.seed = 77") && manifest.contains("sampling.noise_seed = 78"));
    assert!(manifest.contains("scene.jitter_seed = 79"));
    assert_ne!(fs::read(a.join("patterns.gfps")).unwrap(), fs::read(b.join("patterns.gfps")).unwrap());
}

#[test]
fn unknown_key_aborts_with_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{MINIMAL}recon.colour = blue\n"));
    let out = tmp.path().join("out");
    let res = spgi(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("run.cfg:12") && err.contains("recon.colour"), "{err}");
    assert!(!out.exists());
}

#[test]
fn single_frame_selection_emits_one_image() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MINIMAL);
    let out = tmp.path().join("out");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    let dir = tmp.path().join("one");
    let listed = ok(&[
        "reconstruct", "--config", s(&cfg), "--out", s(&dir), "--patterns", s(&out.join("patterns.gfps")),
        "--records", s(&out.join("records.gfms")), "--frames", "7", "--format", "gfim",
    ]);
    let images: Vec<_> = listed.lines().filter(|l| l.ends_with(".gfim")).collect();
    assert_eq!(images.len(), 1, "{listed}");
    assert!(images[0].ends_with("frame_0007.gfim"));
    let diag = fs::read_to_string(dir.join("diagnostics.csv")).unwrap();
    assert_eq!(diag.lines().count(), 2);
    let img = decode_gfim(&fs::read(images[0]).unwrap()).unwrap();
    assert_eq!((img.height, img.width), (16, 16));
}

#[test]
fn malformed_measurements_leave_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MINIMAL);
    let out = tmp.path().join("out");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    let bad = tmp.path().join("bad.gfms");
    let mut bytes = fs::read(out.join("records.gfms")).unwrap();
    bytes.truncate(bytes.len() - 5);
    fs::write(&bad, bytes).unwrap();
    let dir = tmp.path().join("frames");
    let res = spgi(&[
        "reconstruct", "--config", s(&cfg), "--out", s(&dir), "--patterns", s(&out.join("patterns.gfps")),
        "--records", s(&bad),
    ]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("truncated"));
    assert!(!dir.exists());
}

#[test]
fn mismatched_realization_counts_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), MINIMAL);
    let other = tmp.path().join("other.cfg");
    fs::write(&other, MINIMAL.replace("count = 64", "count = 50")).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["simulate", "--config", s(&other), "--out", s(&b)]);
    let res = spgi(&[
        "reconstruct", "--config", s(&cfg), "--out", s(&tmp.path().join("x")), "--patterns", s(&a.join("patterns.gfps")),
        "--records", s(&b.join("records.gfms")),
    ]);
    assert!(!res.status.success());
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("N = 64") && err.contains("N = 50"), "{err}");
}

#[test]
fn analysis_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "grid.height = 24\ngrid.width = 24\ndiffuser.count = 900\nscene.jitter_deg = 0\nsampling.noise = poisson\n\
         recon.method = correlation\nmetrics.flux = 30,370,1150\nrecon.frames = 60..80:5\n",
    );
    let out = tmp.path().join("out");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    ok(&["analyze-snr", "--config", s(&cfg), "--out", s(&out), "--counts", "400,900"]);
    let table = fs::read_to_string(out.join("snr_vs_n.csv")).unwrap();
    let lines: Vec<_> = table.lines().collect();
    assert_eq!(lines[0], "n,snr,error");
    assert_eq!(lines.len(), 4, "{table}");
    assert!(lines[3].starts_with("# fit snr = a*sqrt(n), a = "));

    ok(&["analyze-snr", "--config", s(&cfg), "--out", s(&out), "--counts", "400"]);
    let table = fs::read_to_string(out.join("snr_vs_n.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
    assert!(!table.contains('#'));

    let res = spgi(&["analyze-snr", "--config", s(&cfg), "--out", s(&out), "--counts", "400,901"]);
    assert!(!res.status.success());
    assert!(String::from_utf8_lossy(&res.stderr).contains("N = 901"));

    ok(&["dose-sweep", "--config", s(&cfg), "--out", s(&out)]);
    let dose = fs::read_to_string(out.join("dose.csv")).unwrap();
    let rows: Vec<_> = dose.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(rows, ["30", "370", "1150"]);

    ok(&["edge-width", "--config", s(&cfg), "--out", s(&out)]);
    let widths = fs::read_to_string(out.join("widths.csv")).unwrap();
    assert!(widths.starts_with("frame,width_um\n") && widths.lines().count() > 1, "{widths}");
}

#[test]
fn tv_beats_correlation_on_the_same_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "grid.height = 32\ngrid.width = 32\ndiffuser.seed = 12\ndiffuser.count = 700\nscene.jitter_deg = 0\n",
    );
    let out = tmp.path().join("out");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&out)]);
    let grid = Grid::new(32, 32, 6.5).unwrap();
    let scene = Scene::chopper(grid, ChopperGeometry { jitter_sigma_deg: 0.0, ..ChopperGeometry::default() }).unwrap();
    let frames = [55usize, 62, 69, 76, 83];
    let sel = frames.map(|f| f.to_string()).join(",");
    let mut rmse = Vec::new();
    let mut edges = Vec::new();
    for method in ["tv", "correlation"] {
        let dir = out.join(method);
        ok(&["reconstruct", "--config", s(&cfg), "--out", s(&dir), "--method", method, "--patterns",
            s(&out.join("patterns.gfps")), "--records", s(&out.join("records.gfms")), "--frames", &sel, "--format", "gfim"]);
        let mut total = 0.0;
        let mut pos = Vec::new();
        for f in frames {
            let img = decode_gfim(&fs::read(dir.join(format!("frame_{f:04}.gfim"))).unwrap()).unwrap();
            let truth = scene.transmission_at_phase(0, f as f64 / 500.0, false);
            // compare after the best affine map onto the truth
            let n = img.data.len() as f64;
            let (mx, mt) = (img.mean(), truth.mean());
            let sxx: f64 = img.data.iter().map(|x| (x - mx).powi(2)).sum();
            let sxt: f64 = img.data.iter().zip(&truth.data).map(|(x, t)| (x - mx) * (t - mt)).sum();
            let k = if sxx > 0.0 { sxt / sxx } else { 0.0 };
            let err: f64 = img.data.iter().zip(&truth.data).map(|(x, t)| (mt + k * (x - mx) - t).powi(2)).sum();
            total += (err / n).sqrt();
            pos.push(locate_edge(&img, 6.5).unwrap().position_um / 6.5);
        }
        rmse.push(total / frames.len() as f64);
        edges.push(pos);
    }
    assert!(rmse[0] < rmse[1], "tv {} vs correlation {}", rmse[0], rmse[1]);
    for (a, b) in edges[0].iter().zip(&edges[1]) {
        assert!((a - b).abs() <= 3.0, "edge trajectories diverge: {:?}", edges);
    }
}

#[test]
fn full_scale_config_is_accepted() {
    let text = "grid.height = 92\ngrid.width = 92\ngrid.pixel_pitch_um = 6.5\ndiffuser.count = 4900\nsampling.mean_counts = 24\nsampling.noise = poisson\n";
    let cfg = spgi_cli::config::RunConfig::parse(text, Path::new("full.cfg"), Path::new(".")).unwrap();
    assert_eq!(cfg.grid.fov_um(), (598.0, 598.0));
    assert_eq!(cfg.diffuser.count, Some(4900));
}
