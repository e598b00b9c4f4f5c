use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use rayon::prelude::*;

use spgi::acquisition::encode_records;
use spgi::demux::{decode_frames, encode_with_frames};
use spgi::metrics::{cycle_averaged_frame, dose_csv, scaling_csv, snr_scaling, widths_csv};
use spgi::patterns::{default_master_side, encode_stack, jittered_grid_offsets, raster_offsets};
use spgi::recon::export::{encode_gfim, write_image_csv, write_pgm};
use spgi::scene::masks;
use spgi::*;

use crate::config::{Format, FrameRef, FrameSelection, Mask, PhotonScale, Roi, RunConfig, Scan, SceneSpec, WidthSource};

/// Files produced by a command, written only once every one is ready.
#[derive(Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, name: impl Into<PathBuf>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn write(self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in self.files {
            let path = dir.join(name);
            fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
            written.push(path);
        }
        Ok(written)
    }
}

fn read_offsets(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading offsets {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let (a, b) = l.split_once(',').with_context(|| format!("{}:{}: expected `dx,dy`", path.display(), i + 1))?;
            let parse = |v: &str| v.trim().parse::<usize>().with_context(|| format!("{}:{}: bad offset", path.display(), i + 1));
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

/// Illumination stack: loaded, or cut from a generated diffuser.
pub fn build_stack(cfg: &RunConfig) -> Result<PatternStack> {
    let d = &cfg.diffuser;
    let (h, w) = (cfg.grid.height, cfg.grid.width);
    if let Some(p) = &d.patterns_file {
        let stack = load_stack(p).with_context(|| format!("loading patterns {}", p.display()))?;
        ensure!(
            stack.height() == h && stack.width() == w,
            "pattern file is {}x{} but the grid is {h}x{w}",
            stack.height(),
            stack.width()
        );
        if let Some(n) = d.count {
            return Ok(stack.truncated(n)?);
        }
        return Ok(stack);
    }
    let offsets = match &d.scan {
        Scan::File(p) => {
            let o = read_offsets(p)?;
            if let Some(n) = d.count {
                ensure!(n == o.len(), "diffuser.count = {n} but {} lists {} offsets", p.display(), o.len());
            }
            o
        }
        _ => Vec::new(),
    };
    let count = d.count.unwrap_or(offsets.len());
    let master = match d.master_side {
        Some(m) => (m, m),
        None if offsets.is_empty() => {
            (default_master_side(h, count, d.feature_size_px), default_master_side(w, count, d.feature_size_px))
        }
        None => {
            let my = offsets.iter().map(|o| o.1).max().unwrap_or(0) + h;
            let mx = offsets.iter().map(|o| o.0).max().unwrap_or(0) + w;
            (my, mx)
        }
    };
    let offsets = match &d.scan {
        Scan::Jittered => jittered_grid_offsets(master, (h, w), count, d.seed)?,
        Scan::Raster { step } => raster_offsets(master, (h, w), count, *step)?,
        Scan::File(_) => offsets,
    };
    let map = generate_diffuser(d.seed, master.0, master.1, d.feature_size_px)?;
    Ok(cut_patterns(&map, h, w, cfg.grid.pixel_pitch_um as f32, &offsets)?)
}

pub fn build_scene(cfg: &RunConfig) -> Result<Scene> {
    let grid = cfg.grid;
    Ok(match &cfg.scene {
        SceneSpec::Chopper(g) => Scene::chopper(grid, g.clone())?,
        SceneSpec::Static { mask, frequency_hz } => {
            let m = match mask {
                Mask::HalfPlane => masks::half_plane(&grid),
                Mask::Disk { radius_px } => masks::disk(&grid, *radius_px),
            };
            Scene::static_mask(grid, m, *frequency_hz)?
        }
        SceneSpec::Sequence { frames, frequency_hz } => {
            let stack = load_stack(frames).with_context(|| format!("loading scene frames {}", frames.display()))?;
            Scene::sequence(&stack, *frequency_hz)?
        }
    })
}

pub fn build_sampling(cfg: &RunConfig, stack: &PatternStack, scene: &Scene) -> Result<SamplingConfig> {
    let s = &cfg.sampling;
    let mut sampling = SamplingConfig::noiseless(s.sample_rate_hz, 1.0);
    sampling.cycles_per_realization = s.cycles;
    sampling.noise = s.noise;
    sampling.noise_seed = s.noise_seed;
    sampling.systematic_noise = s.systematic;
    sampling.photon_scale = match s.photon_scale {
        PhotonScale::Fixed(v) => v,
        PhotonScale::MeanCounts(c) => calibrate_photon_scale(stack, scene, &sampling, c)?,
    };
    sampling.validate()?;
    Ok(sampling)
}

fn analysis_frame(cfg: &RunConfig, scene: &Scene, spc: usize) -> Result<usize> {
    let f = match cfg.metrics.frame {
        FrameRef::Index(i) => i,
        FrameRef::EdgeCentered => {
            let t = scene.edge_centered_time().context("metrics.frame = edge_centered needs a chopper scene")?;
            ((t * cfg.sampling.sample_rate_hz).round() as usize) % spc
        }
    };
    ensure!(f < spc, "metrics.frame {f} out of range (0..{spc})");
    Ok(f)
}

fn analysis_roi(cfg: &RunConfig, scene: &Scene, frame: usize, spc: usize) -> Result<Vec<usize>> {
    let (h, w) = (cfg.grid.height, cfg.grid.width);
    let roi: Vec<usize> = match cfg.metrics.roi {
        Roi::Auto { margin } => default_roi(&scene.transmission_at_phase(0, frame as f64 / spc as f64, false), margin),
        Roi::Rect { r0, c0, r1, c1 } => {
            ensure!(r1 <= h && c1 <= w, "metrics.roi rectangle exceeds the {h}x{w} grid");
            (r0..r1).flat_map(|r| (c0..c1).map(move |c| r * w + c)).collect()
        }
    };
    ensure!(roi.len() >= 2, "region of interest has fewer than two pixels");
    Ok(roi)
}

pub fn simulate(cfg: &RunConfig) -> Result<Outputs> {
    let stack = build_stack(cfg)?;
    let scene = build_scene(cfg)?;
    let sampling = build_sampling(cfg, &stack, &scene)?;
    let campaign = run_campaign(&stack, &cfg.camera, &scene, &sampling)?;
    let mut out = Outputs::default();
    out.add("patterns.gfps", encode_stack(&campaign.reference)?);
    out.add("records.gfms", encode_records(&campaign.records, sampling.sample_rate_hz)?);
    if cfg.output.formats.contains(&Format::Csv) {
        let mut csv = Vec::new();
        spgi::acquisition::records_csv(&campaign.records, &mut csv)?;
        out.add("records.csv", csv);
    }
    out.add("manifest.cfg", cfg.manifest().into_bytes());
    Ok(out)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn demux(cfg: &RunConfig, records: &Path) -> Result<Outputs> {
    let (header, recs, frames) = decode_frames(&read(records)?).with_context(|| format!("decoding {}", records.display()))?;
    let mut out = Outputs::default();
    out.add("frames.gfms", encode_with_frames(&recs, header.sample_rate_hz, &frames)?);
    if cfg.output.formats.contains(&Format::Csv) {
        let mut csv = String::from("frame,realization,counts\n");
        for f in &frames {
            for (r, v) in f.values.iter().enumerate() {
                csv.push_str(&format!("{},{r},{v}\n", f.frame_index));
            }
        }
        out.add("frames.csv", csv.into_bytes());
    }
    Ok(out)
}

struct Loaded {
    stack: PatternStack,
    frames: Vec<FrameMeasurements>,
    spc: usize,
    sample_rate_hz: f64,
}

fn load_inputs(patterns: &Path, records: &Path) -> Result<Loaded> {
    let stack = spgi::patterns::decode_stack(&read(patterns)?).with_context(|| format!("decoding {}", patterns.display()))?;
    let (header, _, frames) = decode_frames(&read(records)?).with_context(|| format!("decoding {}", records.display()))?;
    ensure!(
        stack.count() == header.realizations,
        "pattern stack has N = {} realizations but the measurements have N = {}",
        stack.count(),
        header.realizations
    );
    Ok(Loaded { stack, frames, spc: header.samples_per_cycle, sample_rate_hz: header.sample_rate_hz })
}

struct Recon {
    image: Image,
    diagnostics: Option<ReconstructedFrame>,
}

fn reconstruct_selected(cfg: &RunConfig, data: &Loaded, picked: &[usize]) -> Result<Vec<Recon>> {
    let chosen: Vec<FrameMeasurements> = picked.iter().map(|&f| data.frames[f].clone()).collect();
    Ok(match cfg.recon.method() {
        ReconMethod::Correlation => chosen
            .par_iter()
            .map(|f| Ok(Recon { image: correlate_gi(&data.stack, f)?, diagnostics: None }))
            .collect::<spgi::Result<Vec<_>>>()?,
        ReconMethod::Tv { config, preprocessing } => reconstruct_movie(&data.stack, &chosen, &config, preprocessing)?
            .into_iter()
            .map(|r| Recon { image: r.image.clone(), diagnostics: Some(r) })
            .collect(),
    })
}

pub fn reconstruct(cfg: &RunConfig, patterns: &Path, records: &Path) -> Result<Outputs> {
    let data = load_inputs(patterns, records)?;
    let picked = cfg.recon.frames.resolve(data.frames.len()).map_err(anyhow::Error::msg)?;
    let recons = reconstruct_selected(cfg, &data, &picked)?;
    let digits = data.frames.len().saturating_sub(1).to_string().len().max(4);
    let mut out = Outputs::default();
    let mut index = String::from("frame,time_s,file\n");
    let mut diag = String::from("frame,iterations,residual_norm,initial_residual_norm,converged,zero_rows\n");
    for (&f, r) in picked.iter().zip(&recons) {
        let stem = format!("frame_{f:0digits$}");
        for fmt in &cfg.output.formats {
            let mut bytes = Vec::new();
            match fmt {
                Format::Pgm => write_pgm(&r.image, &mut bytes)?,
                Format::Gfim => bytes = encode_gfim(&r.image),
                Format::Csv => write_image_csv(&r.image, &mut bytes)?,
            }
            out.add(format!("{stem}.{}", fmt.name()), bytes);
        }
        let first = cfg.output.formats.first().map(|f| format!("{stem}.{}", f.name())).unwrap_or_default();
        index.push_str(&format!("{f},{},{first}\n", frame_time(f, data.spc, data.sample_rate_hz)?));
        match &r.diagnostics {
            Some(d) => diag.push_str(&format!(
                "{f},{},{},{},{},{}\n",
                d.iterations, d.residual_norm, d.initial_residual_norm, d.converged, d.zero_rows
            )),
            None => diag.push_str(&format!("{f},0,,,true,0\n")),
        }
    }
    out.add("index.csv", index.into_bytes());
    out.add("diagnostics.csv", diag.into_bytes());
    Ok(out)
}

pub fn analyze_snr(cfg: &RunConfig, patterns: &Path, records: &Path, counts: &[usize]) -> Result<Outputs> {
    let data = load_inputs(patterns, records)?;
    if let Some(&n) = counts.iter().find(|&&n| n > data.stack.count() || n == 0) {
        bail!("requested N = {n} but {} realizations are available", data.stack.count());
    }
    let scene = build_scene(cfg)?;
    let frame = analysis_frame(cfg, &scene, data.spc)?;
    let roi = analysis_roi(cfg, &scene, frame, data.spc)?;
    let reports = snr_scaling(&data.stack, &data.frames[frame], counts, &roi, &cfg.recon.method())?;
    let mut csv = Vec::new();
    scaling_csv(&reports, &mut csv)?;
    if let Some(a) = reports.first().and_then(|r| r.fit_a) {
        csv.extend_from_slice(format!("# fit snr = a*sqrt(n), a = {a}\n").as_bytes());
    }
    let mut out = Outputs::default();
    out.add("snr_vs_n.csv", csv);
    Ok(out)
}

pub fn dose_sweep(cfg: &RunConfig, flux: &[f64]) -> Result<Outputs> {
    let stack = build_stack(cfg)?;
    let scene = build_scene(cfg)?;
    let mut sampling = build_sampling(cfg, &stack, &scene)?;
    sampling.noise = NoiseModel::Poisson;
    let spc = sampling.samples_per_cycle(&scene)?;
    let frame = analysis_frame(cfg, &scene, spc)?;
    let roi = analysis_roi(cfg, &scene, frame, spc)?;
    let pipeline = PipelineConfig { stack, camera: cfg.camera.clone(), scene, sampling, method: cfg.recon.method(), frame, roi };
    let points = spgi::dose_sweep(&pipeline, flux)?;
    let mut csv = Vec::new();
    dose_csv(&points, &mut csv)?;
    let mut out = Outputs::default();
    out.add("dose.csv", csv);
    Ok(out)
}

pub fn edge_width(cfg: &RunConfig, inputs: Option<(&Path, &Path)>) -> Result<Outputs> {
    let scene = build_scene(cfg)?;
    let pitch = cfg.grid.pixel_pitch_um;
    let images: Vec<(usize, Image)> = match cfg.metrics.width_source {
        WidthSource::Recon => {
            let (patterns, records) = inputs.context("reconstructed widths need patterns and records")?;
            let data = load_inputs(patterns, records)?;
            let picked = cfg.recon.frames.resolve(data.frames.len()).map_err(anyhow::Error::msg)?;
            let recons = reconstruct_selected(cfg, &data, &picked)?;
            picked.into_iter().zip(recons.into_iter().map(|r| r.image)).collect()
        }
        WidthSource::Model => {
            let spc = SamplingConfig::noiseless(cfg.sampling.sample_rate_hz, 1.0).samples_per_cycle(&scene)?;
            let picked = cfg.recon.frames.resolve(spc).map_err(anyhow::Error::msg)?;
            let psf = CameraModel { enabled: cfg.camera.enabled && cfg.camera.blur_fwhm_um > 0.0, ..cfg.camera.clone() };
            picked
                .par_iter()
                .map(|&f| {
                    let ph = f as f64 / spc as f64;
                    Ok((f, cycle_averaged_frame(&scene, ph, 0..cfg.metrics.model_cycles, &psf)?))
                })
                .collect::<spgi::Result<Vec<_>>>()?
        }
    };
    let widths: Vec<(usize, f64)> = images
        .iter()
        .filter_map(|(f, img)| edge_spread(img, scene.edge_normal(), pitch).ok().map(|w| (*f, w)))
        .collect();
    if widths.is_empty() {
        bail!("no selected frame shows a measurable edge");
    }
    let mut csv = Vec::new();
    widths_csv(&widths, &mut csv)?;
    let mut out = Outputs::default();
    out.add("widths.csv", csv);
    Ok(out)
}

/// Frames selected for a command, overriding the config when given.
pub fn with_frames(cfg: &mut RunConfig, frames: Option<FrameSelection>) {
    if let Some(f) = frames {
        cfg.recon.frames = f;
    }
}
