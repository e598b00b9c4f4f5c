//! Image-quality measures: SNR over a region of interest, square-root
//! scaling fits, dose sweeps and edge spread.

use std::io::Write;
use std::ops::Range;

use crate::acquisition::{blur_image, calibrate_photon_scale, run_campaign, CameraModel, SamplingConfig};
use crate::demux::demultiplex;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::numeric::regression_slope;
use crate::patterns::PatternStack;
use crate::recon::{reconstruct_frames, ReconMethod};
use crate::scene::Scene;

#[derive(Clone, Debug, PartialEq)]
pub struct SnrReport {
    /// Row-major pixel indices.
    pub roi: Vec<usize>,
    pub mu: f64,
    /// Sample standard deviation (divisor `|roi| - 1`).
    pub sigma: f64,
    pub snr: f64,
    pub n_realizations: Option<usize>,
    pub fit_a: Option<f64>,
    pub error_bar: Option<f64>,
}

pub fn snr(image: &Image, roi: &[usize]) -> Result<SnrReport> {
    if roi.len() < 2 {
        return Err(Error::invalid("region of interest needs at least two pixels"));
    }
    if let Some(&bad) = roi.iter().find(|&&i| i >= image.data.len()) {
        return Err(Error::invalid(format!("roi index {bad} outside a {}x{} image", image.height, image.width)));
    }
    let n = roi.len() as f64;
    let mu = roi.iter().map(|&i| image.data[i]).sum::<f64>() / n;
    let ss: f64 = roi.iter().map(|&i| (image.data[i] - mu).powi(2)).sum();
    let sigma = (ss / (n - 1.0)).sqrt();
    if !(sigma > 0.0) {
        return Err(Error::UndefinedSnr);
    }
    Ok(SnrReport {
        roi: roi.to_vec(),
        mu,
        sigma,
        snr: mu / sigma,
        n_realizations: None,
        fit_a: None,
        error_bar: None,
    })
}

/// SNR of a bare sample vector (every entry in the ROI).
pub fn snr_of_values(values: &[f64]) -> Result<SnrReport> {
    let img = Image::from_vec(1, values.len(), values.to_vec())?;
    let roi: Vec<usize> = (0..values.len()).collect();
    snr(&img, &roi)
}

/// Least-squares `a` in `snr = a sqrt(N)`.
pub fn fit_sqrt(points: &[(f64, f64)]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::invalid("no points to fit"));
    }
    if points.iter().any(|&(n, s)| !(n >= 1.0) || !s.is_finite()) {
        return Err(Error::invalid("points need N >= 1 and finite SNR"));
    }
    let num: f64 = points.iter().map(|&(n, s)| s * n.sqrt()).sum();
    let den: f64 = points.iter().map(|&(n, _)| n).sum();
    Ok(num / den)
}

/// The expression `(1/I + mu^2 / (sigma^3 sqrt(I)))^(1/2)` with `I` the ROI
/// sample count, evaluated as printed. It is not scale invariant: it agrees
/// with the sampling spread of the SNR only when `sigma` is near `2 sqrt(I)`.
/// [`snr_error_normal`] gives the large-sample spread for Gaussian data.
pub fn snr_error(report: &SnrReport) -> Result<f64> {
    if !(report.sigma > 0.0) {
        return Err(Error::UndefinedSnr);
    }
    let i = report.roi.len() as f64;
    Ok((1.0 / i + report.mu * report.mu / (report.sigma.powi(3) * i.sqrt())).sqrt())
}

/// Delta-method standard error `sqrt((1 + snr^2 / 2) / I)` for Gaussian samples.
pub fn snr_error_normal(report: &SnrReport) -> Result<f64> {
    if !(report.sigma > 0.0) {
        return Err(Error::UndefinedSnr);
    }
    let i = report.roi.len() as f64;
    Ok(((1.0 + 0.5 * report.snr * report.snr) / i).sqrt())
}

/// Pixels whose ground-truth transmission is 1 and whose whole
/// `(2 margin + 1)^2` neighbourhood is too, excluding the image border band.
pub fn default_roi(truth: &Image, margin: usize) -> Vec<usize> {
    let (h, w) = (truth.height, truth.width);
    let lit = |r: usize, c: usize| truth.get(r, c) >= 1.0 - 1e-9;
    let mut roi = Vec::new();
    if h <= 2 * margin || w <= 2 * margin {
        return roi;
    }
    for r in margin..h - margin {
        for c in margin..w - margin {
            let ok = (r - margin..=r + margin).all(|rr| (c - margin..=c + margin).all(|cc| lit(rr, cc)));
            if ok {
                roi.push(r * w + c);
            }
        }
    }
    roi
}

/// Log-log regression slope of `y` against `x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("need at least two paired points"));
    }
    if x.iter().chain(y).any(|&v| !(v > 0.0)) {
        return Err(Error::invalid("log-log slope needs positive values"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    Ok(regression_slope(&lx, &ly))
}

/// Profile averaged perpendicular to `normal`, which must be a grid axis.
fn profile_along(image: &Image, normal: (f64, f64)) -> Result<Vec<f64>> {
    let (nx, ny) = normal;
    if ny.abs() < 1e-12 * nx.abs() {
        let mut p = image.column_profile();
        if nx < 0.0 {
            p.reverse();
        }
        Ok(p)
    } else if nx.abs() < 1e-12 * ny.abs() {
        let mut p: Vec<f64> =
            image.data.chunks_exact(image.width).map(|r| r.iter().sum::<f64>() / image.width as f64).collect();
        if ny < 0.0 {
            p.reverse();
        }
        Ok(p)
    } else {
        Err(Error::invalid("edge normal must be parallel to a grid axis"))
    }
}

/// 10%-90% transition width (um) of the profile across an edge with the
/// given normal. Levels are the profile extremes.
pub fn edge_spread(image: &Image, normal: (f64, f64), pixel_pitch_um: f64) -> Result<f64> {
    let mut p = profile_along(image, normal)?;
    let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi - lo > 1e-9 * hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE)) {
        return Err(Error::NoEdge);
    }
    if p[0] > p[p.len() - 1] {
        p.reverse();
    }
    let level = |f: f64| lo + f * (hi - lo);
    let crossing = |target: f64| -> Option<f64> {
        // first upward crossing, linearly interpolated
        p.windows(2).enumerate().find(|(_, w)| w[0] < target && w[1] >= target).map(|(i, w)| {
            i as f64 + (target - w[0]) / (w[1] - w[0])
        })
    };
    let x50 = crossing(level(0.5)).ok_or(Error::NoEdge)?;
    let x10 = last_crossing_before(&p, level(0.1), x50).ok_or(Error::NoEdge)?;
    let x90 = first_crossing_after(&p, level(0.9), x50).ok_or(Error::NoEdge)?;
    Ok((x90 - x10) * pixel_pitch_um)
}

fn last_crossing_before(p: &[f64], target: f64, x: f64) -> Option<f64> {
    let end = (x.floor() as usize + 1).min(p.len() - 1);
    (0..end).rev().find(|&i| p[i] < target && p[i + 1] >= target).map(|i| i as f64 + (target - p[i]) / (p[i + 1] - p[i]))
}

fn first_crossing_after(p: &[f64], target: f64, x: f64) -> Option<f64> {
    let start = x.floor() as usize;
    (start..p.len() - 1).find(|&i| p[i] < target && p[i + 1] >= target).map(|i| i as f64 + (target - p[i]) / (p[i + 1] - p[i]))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeFit {
    /// Signed edge position (um) from the FOV centre along +x.
    pub position_um: f64,
    /// Fitted levels left and right of the edge.
    pub left_level: f64,
    pub right_level: f64,
    pub residual: f64,
}

/// Fit a vertical step with free levels to the column profile by a
/// sub-pixel search (1/20 px) over the edge position.
pub fn locate_edge(image: &Image, pixel_pitch_um: f64) -> Result<EdgeFit> {
    let y = image.column_profile();
    let w = y.len();
    if w < 2 {
        return Err(Error::NoEdge);
    }
    let steps = 20 * w;
    let mut best: Option<EdgeFit> = None;
    let mut f = vec![0.0; w];
    for s in 1..steps {
        let e = s as f64 / 20.0;
        for (j, v) in f.iter_mut().enumerate() {
            *v = (e - j as f64).clamp(0.0, 1.0);
        }
        // y ~ c0 + c1 f, with f the fraction left of the edge
        let n = w as f64;
        let mf = f.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let (mut sff, mut sfy) = (0.0, 0.0);
        for (a, b) in f.iter().zip(&y) {
            sff += (a - mf) * (a - mf);
            sfy += (a - mf) * (b - my);
        }
        if sff == 0.0 {
            continue;
        }
        let c1 = sfy / sff;
        let c0 = my - c1 * mf;
        let residual: f64 = f.iter().zip(&y).map(|(a, b)| (c0 + c1 * a - b).powi(2)).sum();
        if best.is_none_or(|b| residual < b.residual) {
            best = Some(EdgeFit {
                position_um: (e - w as f64 / 2.0) * pixel_pitch_um,
                left_level: c0 + c1,
                right_level: c0,
                residual,
            });
        }
    }
    let fit = best.ok_or(Error::NoEdge)?;
    let contrast = (fit.left_level - fit.right_level).abs();
    let span = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(contrast > 1e-9 * span) {
        return Err(Error::NoEdge);
    }
    Ok(fit)
}

/// Transmission at `phase` averaged over `cycles` jitter draws, as seen
/// through `psf`: the frame a multi-cycle acquisition converges to.
pub fn cycle_averaged_frame(scene: &Scene, phase: f64, cycles: Range<u64>, psf: &CameraModel) -> Result<Image> {
    let grid = scene.grid();
    let count = cycles.end.saturating_sub(cycles.start);
    if count == 0 {
        return Err(Error::invalid("need at least one cycle"));
    }
    let mut acc = Image::zeros(grid.height, grid.width);
    for c in cycles {
        let t = scene.transmission_at_phase(c, phase, true);
        for (a, v) in acc.data.iter_mut().zip(&t.data) {
            *a += v;
        }
    }
    acc.data.iter_mut().for_each(|v| *v /= count as f64);
    blur_image(&acc, psf)
}

/// Everything needed to simulate, demultiplex and reconstruct one frame.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub stack: PatternStack,
    pub camera: CameraModel,
    pub scene: Scene,
    pub sampling: SamplingConfig,
    pub method: ReconMethod,
    pub frame: usize,
    pub roi: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DosePoint {
    /// Requested mean counts per frame measurement.
    pub flux: f64,
    pub photon_scale: f64,
    /// Mean of the simulated frame measurements.
    pub measured_mean_counts: f64,
    pub report: SnrReport,
}

/// Run the full pipeline once per flux level and measure the SNR of the
/// chosen frame over the ROI.
pub fn dose_sweep(cfg: &PipelineConfig, flux_levels: &[f64]) -> Result<Vec<DosePoint>> {
    if flux_levels.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::invalid("flux levels must be positive"));
    }
    flux_levels
        .iter()
        .map(|&flux| {
            let photon_scale = calibrate_photon_scale(&cfg.stack, &cfg.scene, &cfg.sampling, flux)?;
            let sampling = SamplingConfig { photon_scale, ..cfg.sampling.clone() };
            let (image, mean) = pipeline_frame(cfg, &sampling)?;
            let mut report = snr(&image, &cfg.roi)?;
            report.n_realizations = Some(cfg.stack.count());
            report.error_bar = Some(snr_error(&report)?);
            Ok(DosePoint { flux, photon_scale, measured_mean_counts: mean, report })
        })
        .collect()
}

/// Reconstruct the configured frame; also returns the mean measurement.
pub fn pipeline_frame(cfg: &PipelineConfig, sampling: &SamplingConfig) -> Result<(Image, f64)> {
    let campaign = run_campaign(&cfg.stack, &cfg.camera, &cfg.scene, sampling)?;
    let frames = demultiplex(&campaign.records)?;
    let frame = frames.get(cfg.frame).ok_or(Error::FrameOutOfRange { index: cfg.frame, frames: frames.len() })?;
    let mean = frame.values.iter().sum::<f64>() / frame.values.len() as f64;
    let image = reconstruct_frames(&campaign.reference, std::slice::from_ref(frame), &cfg.method)?.remove(0);
    Ok((image, mean))
}

/// SNR of one frame reconstructed from the first `n` realizations, for each
/// requested `n`; the fitted `a` is stored in every report.
pub fn snr_scaling(
    stack: &PatternStack,
    frame: &crate::demux::FrameMeasurements,
    counts: &[usize],
    roi: &[usize],
    method: &ReconMethod,
) -> Result<Vec<SnrReport>> {
    let mut reports = Vec::with_capacity(counts.len());
    for &n in counts {
        let sub = stack.truncated(n)?;
        let values = crate::demux::FrameMeasurements { frame_index: frame.frame_index, values: frame.values[..n].to_vec() };
        let image = reconstruct_frames(&sub, std::slice::from_ref(&values), method)?.remove(0);
        let mut r = snr(&image, roi)?;
        r.n_realizations = Some(n);
        r.error_bar = Some(snr_error(&r)?);
        reports.push(r);
    }
    if reports.len() >= 2 {
        let pts: Vec<(f64, f64)> = reports.iter().map(|r| (r.n_realizations.unwrap() as f64, r.snr)).collect();
        let a = fit_sqrt(&pts)?;
        reports.iter_mut().for_each(|r| r.fit_a = Some(a));
    }
    Ok(reports)
}

pub fn scaling_csv(reports: &[SnrReport], mut w: impl Write) -> Result<()> {
    writeln!(w, "n,snr,error")?;
    for r in reports {
        writeln!(w, "{},{},{}", r.n_realizations.unwrap_or(0), r.snr, r.error_bar.unwrap_or(f64::NAN))?;
    }
    Ok(())
}

pub fn dose_csv(points: &[DosePoint], mut w: impl Write) -> Result<()> {
    writeln!(w, "flux,snr,error")?;
    for p in points {
        writeln!(w, "{},{},{}", p.flux, p.report.snr, p.report.error_bar.unwrap_or(f64::NAN))?;
    }
    Ok(())
}

pub fn widths_csv(widths: &[(usize, f64)], mut w: impl Write) -> Result<()> {
    writeln!(w, "frame,width_um")?;
    for (f, v) in widths {
        writeln!(w, "{f},{v}")?;
    }
    Ok(())
}
