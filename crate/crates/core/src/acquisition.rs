//! Forward simulation of the two measurement steps: the reference stack as
//! recorded by a slow 2D camera, and the phase-locked single-pixel series
//! recorded behind the object for every diffuser position.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, FormatError, Result};
use crate::image::Image;
use crate::numeric::{dot_accurate, gaussian_kernel, DdAccum};
use crate::patterns::PatternStack;
use crate::rng::{self, Domain};
use crate::scene::{Scene, SceneKind};

pub const GFMS_MAGIC: &[u8; 4] = b"GFMS";
pub const GFMS_VERSION: u16 = 1;
pub(crate) const GFMS_HEADER_LEN: usize = 32;

/// Largest count that `f64` represents exactly.
const MAX_EXACT_COUNT: f64 = 9_007_199_254_740_992.0;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    pub pixel_pitch_um: f64,
    /// Full width at half maximum of the Gaussian PSF.
    pub blur_fwhm_um: f64,
    pub enabled: bool,
}

impl CameraModel {
    pub fn disabled(pixel_pitch_um: f64) -> Self {
        Self { pixel_pitch_um, blur_fwhm_um: 0.0, enabled: false }
    }
}

/// Record the reference stack through the camera PSF. Borders replicate, so
/// constant patterns pass unchanged.
pub fn capture_reference(stack: &PatternStack, camera: &CameraModel) -> Result<PatternStack> {
    if !(camera.blur_fwhm_um >= 0.0) {
        return Err(Error::invalid(format!("negative blur {} um", camera.blur_fwhm_um)));
    }
    if !camera.enabled || camera.blur_fwhm_um == 0.0 {
        return Ok(stack.clone());
    }
    if !(camera.pixel_pitch_um > 0.0) {
        return Err(Error::invalid("camera pixel pitch must be positive"));
    }
    let sigma = camera.blur_fwhm_um / camera.pixel_pitch_um / 2.355;
    let kernel = gaussian_kernel(sigma);
    let (h, w) = (stack.height(), stack.width());
    let data = stack.map_patterns(|pat| {
        let src: Vec<f64> = pat.iter().map(|&v| v as f64).collect();
        let rows = blur_axis(&src, h, w, &kernel, true);
        let out = blur_axis(&rows, h, w, &kernel, false);
        out.into_iter().map(|v| v.max(0.0) as f32).collect()
    });
    PatternStack::new(stack.count(), h, w, stack.pixel_pitch_um(), data)
}

/// Apply the camera PSF to a single image (replicated borders).
pub fn blur_image(image: &Image, camera: &CameraModel) -> Result<Image> {
    if !(camera.blur_fwhm_um >= 0.0) {
        return Err(Error::invalid(format!("negative blur {} um", camera.blur_fwhm_um)));
    }
    if !camera.enabled || camera.blur_fwhm_um == 0.0 {
        return Ok(image.clone());
    }
    let kernel = gaussian_kernel(camera.blur_fwhm_um / camera.pixel_pitch_um / 2.355);
    let (h, w) = (image.height, image.width);
    let rows = blur_axis(&image.data, h, w, &kernel, true);
    Image::from_vec(h, w, blur_axis(&rows, h, w, &kernel, false))
}

fn blur_axis(src: &[f64], h: usize, w: usize, kernel: &[f64], along_rows: bool) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (k, wt) in kernel.iter().enumerate() {
                let off = k as isize - r;
                let v = if along_rows {
                    src[y * w + (x as isize + off).clamp(0, w as isize - 1) as usize]
                } else {
                    src[(y as isize + off).clamp(0, h as isize - 1) as usize * w + x]
                };
                s += wt * v;
            }
            out[y * w + x] = s;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseModel {
    None,
    Poisson,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingConfig {
    pub sample_rate_hz: f64,
    pub cycles_per_realization: usize,
    /// Expected counts per unit of `sum(pattern * transmission)`.
    pub photon_scale: f64,
    pub noise: NoiseModel,
    pub noise_seed: u64,
    /// Relative standard deviation of an additive Gaussian term per sample,
    /// modelling non-statistical noise. Zero disables it.
    pub systematic_noise: f64,
}

impl SamplingConfig {
    /// 100 kHz DAQ, noiseless, one cycle per realization.
    pub fn noiseless(sample_rate_hz: f64, photon_scale: f64) -> Self {
        Self {
            sample_rate_hz,
            cycles_per_realization: 1,
            photon_scale,
            noise: NoiseModel::None,
            noise_seed: 0,
            systematic_noise: 0.0,
        }
    }

    /// Samples per scene cycle; the sample clock must be locked to the cycle.
    pub fn samples_per_cycle(&self, scene: &Scene) -> Result<usize> {
        let cycle_hz = scene.cycle_frequency_hz();
        let ratio = self.sample_rate_hz / cycle_hz;
        let rounded = ratio.round();
        if !(rounded >= 1.0) || (ratio - rounded).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::NonIntegerSamplesPerCycle { sample_rate_hz: self.sample_rate_hz, cycle_hz });
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) || self.cycles_per_realization == 0 {
            return Err(Error::invalid("sample rate and cycle count must be positive"));
        }
        if !(self.photon_scale >= 0.0) || !self.photon_scale.is_finite() {
            return Err(Error::invalid("photon scale must be finite and non-negative"));
        }
        if !(self.systematic_noise >= 0.0) {
            return Err(Error::invalid("systematic noise must be non-negative"));
        }
        Ok(())
    }
}

/// Single-pixel time series of one realization, all cycles back to back.
#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionRecord {
    pub realization_index: usize,
    pub samples_per_cycle: usize,
    pub cycles: usize,
    pub samples: Vec<f64>,
}

impl AcquisitionRecord {
    pub fn sync_indices(&self) -> Vec<usize> {
        (0..self.cycles).map(|c| c * self.samples_per_cycle).collect()
    }

    pub fn cycle(&self, c: usize) -> &[f64] {
        &self.samples[c * self.samples_per_cycle..(c + 1) * self.samples_per_cycle]
    }
}

/// `photon_scale * sum(pattern * transmission)`, accurately rounded.
pub fn ideal_signal(pattern: &[f32], transmission: &Image, photon_scale: f64) -> Result<f64> {
    if pattern.len() != transmission.data.len() {
        return Err(Error::DimensionMismatch(format!(
            "pattern has {} pixels, transmission {}",
            pattern.len(),
            transmission.data.len()
        )));
    }
    Ok(photon_scale * dot_accurate(pattern, &transmission.data))
}

/// Phase-sampled view of a scene prepared once per campaign.
enum Sampler<'a> {
    /// Column profiles per in-cycle sample (chopper without jitter).
    Columns(Vec<Vec<f64>>),
    /// Chopper with per-cycle jitter; profiles evaluated on demand.
    JitteredColumns(&'a Scene),
    /// Full transmission images per in-cycle sample.
    Images(Vec<Image>),
}

struct ForwardModel<'a> {
    scene: &'a Scene,
    sampling: &'a SamplingConfig,
    samples_per_cycle: usize,
    sampler: Sampler<'a>,
}

impl<'a> ForwardModel<'a> {
    fn new(scene: &'a Scene, sampling: &'a SamplingConfig) -> Result<Self> {
        sampling.validate()?;
        let spc = sampling.samples_per_cycle(scene)?;
        let phase = |k: usize| k as f64 / spc as f64;
        let sampler = match scene.kind() {
            SceneKind::Chopper(g) if g.jitter_sigma_deg > 0.0 => Sampler::JitteredColumns(scene),
            SceneKind::Chopper(_) => {
                let cols = (0..spc)
                    .map(|k| {
                        let mut out = vec![0.0; scene.grid().width];
                        scene.chopper_columns_at(0, phase(k), false, &mut out).map(|_| out)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Sampler::Columns(cols)
            }
            SceneKind::Static(m) => Sampler::Images(vec![m.clone()]),
            SceneKind::Sequence(_) => {
                Sampler::Images((0..spc).map(|k| scene.transmission_at_phase(0, phase(k), false)).collect())
            }
        };
        Ok(Self { scene, sampling, samples_per_cycle: spc, sampler })
    }

    /// Noise-free per-sample expectations for one cycle of one pattern.
    fn expected_cycle(&self, pattern: &[f32], colsums: &[(f64, f64)], global_cycle: u64, out: &mut [f64]) {
        let scale = self.sampling.photon_scale;
        match &self.sampler {
            Sampler::Columns(cols) => {
                for (o, t) in out.iter_mut().zip(cols) {
                    *o = scale * dd_dot(colsums, t);
                }
            }
            Sampler::JitteredColumns(scene) => {
                let mut t = vec![0.0; scene.grid().width];
                for (k, o) in out.iter_mut().enumerate() {
                    let phase = k as f64 / self.samples_per_cycle as f64;
                    scene.chopper_columns_at(global_cycle, phase, true, &mut t).expect("chopper scene");
                    *o = scale * dd_dot(colsums, &t);
                }
            }
            Sampler::Images(imgs) => {
                for (k, o) in out.iter_mut().enumerate() {
                    let img = &imgs[if imgs.len() == 1 { 0 } else { k }];
                    *o = scale * dot_accurate(pattern, &img.data);
                }
            }
        }
    }

    fn record(&self, pattern: &[f32], realization: usize) -> Result<AcquisitionRecord> {
        let grid = self.scene.grid();
        if pattern.len() != grid.pixels() {
            return Err(Error::DimensionMismatch(format!(
                "pattern has {} pixels, scene grid {}",
                pattern.len(),
                grid.pixels()
            )));
        }
        let colsums = match self.sampler {
            Sampler::Columns(_) | Sampler::JitteredColumns(_) => column_sums(pattern, grid.width),
            Sampler::Images(_) => Vec::new(),
        };
        let spc = self.samples_per_cycle;
        let cycles = self.sampling.cycles_per_realization;
        let mut samples = vec![0.0; spc * cycles];
        for c in 0..cycles {
            let global = (realization * cycles + c) as u64;
            let out = &mut samples[c * spc..(c + 1) * spc];
            self.expected_cycle(pattern, &colsums, global, out);
            self.apply_noise(realization as u64, c as u64, out)?;
        }
        Ok(AcquisitionRecord { realization_index: realization, samples_per_cycle: spc, cycles, samples })
    }

    /// Replace noise-free expectations in `out` with noisy counts.
    fn apply_noise(&self, realization: u64, cycle: u64, out: &mut [f64]) -> Result<()> {
        if let Some(&bad) = out.iter().find(|v| **v > MAX_EXACT_COUNT) {
            return Err(Error::CountOverflow(bad));
        }
        let seed = self.sampling.noise_seed;
        let rel = self.sampling.systematic_noise;
        let expected: Vec<f64> = if rel > 0.0 { out.to_vec() } else { Vec::new() };
        if self.sampling.noise == NoiseModel::Poisson {
            let mut rng = rng::stream(rng::key(seed, Domain::PhotonNoise, realization, cycle));
            for v in out.iter_mut() {
                if *v > 0.0 {
                    *v = Poisson::new(*v).map_err(|e| Error::invalid(e.to_string()))?.sample(&mut rng);
                }
            }
        }
        if rel > 0.0 {
            // separate stream: enabling the floor leaves the photon draws unchanged
            let mut rng = rng::stream(rng::key(seed, Domain::SystematicNoise, realization, cycle));
            for (v, level) in out.iter_mut().zip(expected) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + rel * level * z).max(0.0);
            }
        }
        Ok(())
    }
}

fn column_sums(pattern: &[f32], width: usize) -> Vec<(f64, f64)> {
    let mut acc = vec![DdAccum::default(); width];
    for row in pattern.chunks_exact(width) {
        for (a, &v) in acc.iter_mut().zip(row) {
            a.add(v as f64);
        }
    }
    acc.iter().map(|a| a.pair()).collect()
}

fn dd_dot(colsums: &[(f64, f64)], t: &[f64]) -> f64 {
    let mut acc = DdAccum::default();
    for (&(hi, lo), &w) in colsums.iter().zip(t) {
        acc.add_prod(hi, w);
        acc.add_prod(lo, w);
    }
    acc.value()
}

/// Simulate the single-pixel series of one realization. Sample `k` of cycle
/// `c` sees the scene at phase `k / samples_per_cycle` of that cycle, with the
/// jitter of global cycle `realization * cycles + c`.
pub fn simulate_record(
    pattern: &[f32],
    scene: &Scene,
    sampling: &SamplingConfig,
    realization_index: usize,
) -> Result<AcquisitionRecord> {
    ForwardModel::new(scene, sampling)?.record(pattern, realization_index)
}

/// Output of both measurement steps.
#[derive(Clone, Debug)]
pub struct Campaign {
    pub records: Vec<AcquisitionRecord>,
    /// Patterns as recorded by the reference camera.
    pub reference: PatternStack,
}

/// Run both steps: the camera records every pattern, then the single-pixel
/// detector records one series per pattern behind the scene. Records depend
/// only on their realization index, never on scheduling.
pub fn run_campaign(
    stack: &PatternStack,
    camera: &CameraModel,
    scene: &Scene,
    sampling: &SamplingConfig,
) -> Result<Campaign> {
    if !stack.grid().same_shape(&scene.grid()) {
        return Err(Error::DimensionMismatch(format!(
            "stack {}x{} vs scene {}x{}",
            stack.height(),
            stack.width(),
            scene.grid().height,
            scene.grid().width
        )));
    }
    let reference = capture_reference(stack, camera)?;
    let model = ForwardModel::new(scene, sampling)?;
    let records = (0..stack.count())
        .into_par_iter()
        .map(|r| model.record(stack.pattern(r), r))
        .collect::<Result<Vec<_>>>()?;
    Ok(Campaign { records, reference })
}

/// Photon scale giving `target_mean_counts` expected counts per frame
/// measurement (summed over cycles), averaged over realizations and frames,
/// jitter ignored.
pub fn calibrate_photon_scale(
    stack: &PatternStack,
    scene: &Scene,
    sampling: &SamplingConfig,
    target_mean_counts: f64,
) -> Result<f64> {
    if !(target_mean_counts > 0.0) {
        return Err(Error::invalid("target counts must be positive"));
    }
    let spc = sampling.samples_per_cycle(scene)?;
    let mean_pattern = stack.mean_pattern();
    let mut mean_t = vec![0.0; stack.pixels()];
    for k in 0..spc {
        let t = scene.transmission_at_phase(0, k as f64 / spc as f64, false);
        for (m, v) in mean_t.iter_mut().zip(&t.data) {
            *m += v / spc as f64;
        }
    }
    let unit: f64 = mean_pattern.iter().zip(&mean_t).map(|(a, b)| a * b).sum();
    if !(unit > 0.0) {
        return Err(Error::invalid("scene blocks all light; cannot calibrate"));
    }
    Ok(target_mean_counts / (unit * sampling.cycles_per_realization as f64))
}

/// Header fields of a GFMS container.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GfmsHeader {
    pub realizations: usize,
    pub samples: usize,
    pub samples_per_cycle: usize,
    pub cycles: usize,
    pub sample_rate_hz: f64,
}

pub fn encode_records(records: &[AcquisitionRecord], sample_rate_hz: f64) -> Result<Vec<u8>> {
    let header = check_records(records, sample_rate_hz)?;
    let mut out = Vec::with_capacity(GFMS_HEADER_LEN + header.realizations * header.samples * 8);
    write_gfms_header(&mut out, &header);
    for rec in records {
        for v in &rec.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn write_gfms_header(out: &mut Vec<u8>, h: &GfmsHeader) {
    out.extend_from_slice(GFMS_MAGIC);
    out.extend_from_slice(&GFMS_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for v in [h.realizations, h.samples, h.samples_per_cycle, h.cycles] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&h.sample_rate_hz.to_le_bytes());
}

fn check_records(records: &[AcquisitionRecord], sample_rate_hz: f64) -> Result<GfmsHeader> {
    let first = records.first().ok_or_else(|| Error::invalid("no records"))?;
    let header = GfmsHeader {
        realizations: records.len(),
        samples: first.samples.len(),
        samples_per_cycle: first.samples_per_cycle,
        cycles: first.cycles,
        sample_rate_hz,
    };
    for (i, r) in records.iter().enumerate() {
        if r.realization_index != i {
            return Err(Error::MissingRealization(i));
        }
        if r.samples.len() != header.samples
            || r.samples_per_cycle != header.samples_per_cycle
            || r.cycles != header.cycles
            || r.samples.len() != r.samples_per_cycle * r.cycles
        {
            return Err(Error::InconsistentRecords(format!("record {i} differs from record 0")));
        }
    }
    let as_u32 = [header.realizations, header.samples, header.samples_per_cycle, header.cycles];
    if as_u32.iter().any(|&v| v > u32::MAX as usize) {
        return Err(FormatError::DimensionOverflow { dims: as_u32.iter().map(|&v| v as u64).collect() }.into());
    }
    Ok(header)
}

pub(crate) fn decode_gfms_header(bytes: &[u8]) -> Result<GfmsHeader, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != GFMS_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(FormatError::BadMagic { expected: "GFMS".into(), found });
    }
    if bytes.len() < GFMS_HEADER_LEN {
        return Err(FormatError::Truncated { expected: GFMS_HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != GFMS_VERSION {
        return Err(FormatError::UnsupportedVersion { container: "GFMS", version });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let header = GfmsHeader {
        realizations: u32_at(8),
        samples: u32_at(12),
        samples_per_cycle: u32_at(16),
        cycles: u32_at(20),
        sample_rate_hz: f64::from_le_bytes(bytes[24..32].try_into().unwrap()),
    };
    if header.samples_per_cycle == 0 || header.samples != header.samples_per_cycle * header.cycles {
        return Err(FormatError::Malformed {
            container: "GFMS",
            reason: format!(
                "{} samples is not {} cycles of {}",
                header.samples, header.cycles, header.samples_per_cycle
            ),
        });
    }
    Ok(header)
}

pub(crate) fn gfms_payload_len(h: &GfmsHeader) -> Result<u64, FormatError> {
    (h.realizations as u64)
        .checked_mul(h.samples as u64)
        .and_then(|v| v.checked_mul(8))
        .ok_or(FormatError::DimensionOverflow { dims: vec![h.realizations as u64, h.samples as u64] })
}

/// Decode the record section; returns the header, records and the number
/// of bytes consumed (extension chunks may follow).
pub(crate) fn decode_records_prefix(bytes: &[u8]) -> Result<(GfmsHeader, Vec<AcquisitionRecord>, usize)> {
    let header = decode_gfms_header(bytes)?;
    let expected = GFMS_HEADER_LEN as u64 + gfms_payload_len(&header)?;
    if (bytes.len() as u64) < expected {
        return Err(FormatError::Truncated { expected, actual: bytes.len() as u64 }.into());
    }
    let payload = &bytes[GFMS_HEADER_LEN..expected as usize];
    let records = payload
        .chunks_exact(header.samples * 8)
        .enumerate()
        .map(|(i, chunk)| AcquisitionRecord {
            realization_index: i,
            samples_per_cycle: header.samples_per_cycle,
            cycles: header.cycles,
            samples: chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        })
        .collect();
    Ok((header, records, expected as usize))
}

/// Decode a plain GFMS file. Trailing frame-table chunks are accepted and
/// ignored here; see `demux::decode_frames`.
pub fn decode_records(bytes: &[u8]) -> Result<(GfmsHeader, Vec<AcquisitionRecord>)> {
    let (h, r, _) = decode_records_prefix(bytes)?;
    Ok((h, r))
}

pub fn save_records(records: &[AcquisitionRecord], sample_rate_hz: f64, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_records(records, sample_rate_hz)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_records(path: impl AsRef<Path>) -> Result<(GfmsHeader, Vec<AcquisitionRecord>)> {
    decode_records(&fs::read(path)?)
}

/// CSV export: `realization,sample,counts`, one row per sample.
pub fn records_csv(records: &[AcquisitionRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "realization,sample,counts")?;
    for r in records {
        for (k, v) in r.samples.iter().enumerate() {
            writeln!(w, "{},{},{}", r.realization_index, k, v)?;
        }
    }
    Ok(())
}
