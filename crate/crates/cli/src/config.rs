//! Run configuration: plain `section.key = value` lines, `#` comments.
//! Parsing is strict: unknown or duplicate keys abort with the offending line.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use spgi::{CameraModel, ChopperGeometry, Grid, NoiseModel, Preprocessing, TvConfig, TvModel};

#[derive(Debug)]
pub struct ConfigError {
    pub file: PathBuf,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{}: {}", self.file.display(), l, self.message),
            None => write!(f, "{}: {}", self.file.display(), self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Debug, PartialEq)]
pub enum Scan {
    Jittered,
    Raster { step: usize },
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffuserSection {
    pub seed: u64,
    pub feature_size_px: f64,
    pub count: Option<usize>,
    pub scan: Scan,
    pub master_side: Option<usize>,
    /// Load the illumination stack instead of generating it.
    pub patterns_file: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    HalfPlane,
    Disk { radius_px: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum SceneSpec {
    Chopper(ChopperGeometry),
    Static { mask: Mask, frequency_hz: f64 },
    Sequence { frames: PathBuf, frequency_hz: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PhotonScale {
    Fixed(f64),
    MeanCounts(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSection {
    pub sample_rate_hz: f64,
    pub cycles: usize,
    pub photon_scale: PhotonScale,
    pub noise: NoiseModel,
    pub noise_seed: u64,
    pub systematic: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Correlation,
    Tv,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FrameSelection {
    All,
    List(Vec<usize>),
    Range { start: usize, end: usize, step: usize },
}

impl FrameSelection {
    pub fn resolve(&self, frames: usize) -> Result<Vec<usize>, String> {
        let picked: Vec<usize> = match self {
            FrameSelection::All => (0..frames).collect(),
            FrameSelection::List(v) => v.clone(),
            FrameSelection::Range { start, end, step } => (*start..*end).step_by(*step).collect(),
        };
        if let Some(&bad) = picked.iter().find(|&&f| f >= frames) {
            return Err(format!("frame {bad} out of range (0..{frames})"));
        }
        if picked.is_empty() {
            return Err("frame selection is empty".into());
        }
        Ok(picked)
    }
}

impl fmt::Display for FrameSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FrameSelection::All => write!(f, "all"),
            FrameSelection::List(v) => {
                write!(f, "{}", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","))
            }
            FrameSelection::Range { start, end, step } => write!(f, "{start}..{end}:{step}"),
        }
    }
}

pub fn parse_frames(s: &str) -> Result<FrameSelection, String> {
    let s = s.trim();
    if s == "all" {
        return Ok(FrameSelection::All);
    }
    if let Some((a, rest)) = s.split_once("..") {
        let (b, step) = match rest.split_once(':') {
            Some((b, st)) => (b, st.trim().parse::<usize>().map_err(|e| format!("bad step: {e}"))?),
            None => (rest, 1),
        };
        let start = a.trim().parse::<usize>().map_err(|e| format!("bad range start: {e}"))?;
        let end = b.trim().parse::<usize>().map_err(|e| format!("bad range end: {e}"))?;
        if step == 0 || end <= start {
            return Err(format!("empty frame range {s}"));
        }
        return Ok(FrameSelection::Range { start, end, step });
    }
    list(s, |v| v.parse::<usize>().map_err(|e| e.to_string())).map(FrameSelection::List)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconSection {
    pub method: Method,
    pub tv: TvConfig,
    pub preprocessing: Preprocessing,
    pub frames: FrameSelection,
}

impl ReconSection {
    pub fn method(&self) -> spgi::ReconMethod {
        match self.method {
            Method::Correlation => spgi::ReconMethod::Correlation,
            Method::Tv => spgi::ReconMethod::Tv { config: self.tv.clone(), preprocessing: self.preprocessing },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Roi {
    Auto { margin: usize },
    /// Half-open pixel rectangle rows r0..r1, columns c0..c1.
    Rect { r0: usize, c0: usize, r1: usize, c1: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameRef {
    EdgeCentered,
    Index(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WidthSource {
    Recon,
    Model,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSection {
    pub roi: Roi,
    pub frame: FrameRef,
    pub counts: Vec<usize>,
    pub flux: Vec<f64>,
    pub width_source: WidthSource,
    pub model_cycles: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Format {
    Pgm,
    Gfim,
    Csv,
}

impl Format {
    pub fn parse(s: &str) -> Result<Format, String> {
        match s.trim() {
            "pgm" => Ok(Format::Pgm),
            "gfim" => Ok(Format::Gfim),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format `{other}` (pgm, gfim, csv)")),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Format::Pgm => "pgm",
            Format::Gfim => "gfim",
            Format::Csv => "csv",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSection {
    pub directory: PathBuf,
    pub formats: Vec<Format>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub grid: Grid,
    pub diffuser: DiffuserSection,
    pub camera: CameraModel,
    pub scene: SceneSpec,
    pub sampling: SamplingSection,
    pub recon: ReconSection,
    pub metrics: MetricsSection,
    pub output: OutputSection,
}

struct Entry {
    value: String,
    line: usize,
}

struct Entries<'a> {
    file: &'a Path,
    base: &'a Path,
    map: BTreeMap<String, Entry>,
}

impl Entries<'_> {
    fn err(&self, line: Option<usize>, message: impl Into<String>) -> ConfigError {
        ConfigError { file: self.file.to_path_buf(), line, message: message.into() }
    }

    fn take<T>(&mut self, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<Option<T>, ConfigError> {
        match self.map.remove(key) {
            None => Ok(None),
            Some(e) => parse(&e.value).map(Some).map_err(|m| self.err(Some(e.line), format!("{key}: {m}"))),
        }
    }

    fn or<T>(&mut self, key: &str, default: T, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, ConfigError> {
        Ok(self.take(key, parse)?.unwrap_or(default))
    }

    fn require<T>(&mut self, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Result<T, ConfigError> {
        self.take(key, parse)?.ok_or_else(|| self.err(None, format!("missing required key `{key}`")))
    }

    fn line_of(&self, key: &str) -> Option<usize> {
        self.map.get(key).map(|e| e.line)
    }

    fn path(&self, s: &str) -> Result<PathBuf, String> {
        if s.is_empty() {
            return Err("empty path".into());
        }
        Ok(self.base.join(s))
    }
}

fn num<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("`{s}`: {e}"))
}

fn boolean(s: &str) -> Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, found `{s}`")),
    }
}

fn list<T>(s: &str, item: impl Fn(&str) -> Result<T, String>) -> Result<Vec<T>, String> {
    s.split(',').map(|v| item(v.trim())).collect()
}

fn parse_lines(text: &str, file: &Path) -> Result<BTreeMap<String, Entry>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |m: String| ConfigError { file: file.to_path_buf(), line: Some(line), message: m };
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected `section.key = value`, found `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let valid = key.split_once('.').is_some_and(|(s, k)| {
            !s.is_empty() && !k.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
        });
        if !valid {
            return Err(err(format!("malformed key `{key}`")));
        }
        if let Some(prev) = map.insert(key.to_string(), Entry { value: value.to_string(), line }) {
            return Err(err(format!("duplicate key `{key}` (first set on line {})", prev.line)));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            file: path.to_path_buf(),
            line: None,
            message: format!("cannot read config: {e}"),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, path, &base)
    }

    /// Parse `text`; relative paths resolve against `base`.
    pub fn parse(text: &str, file: &Path, base: &Path) -> Result<RunConfig, ConfigError> {
        let map = parse_lines(text, file)?;
        let mut e = Entries { file, base, map };
        let cfg = Self::from_entries(&mut e)?;
        if let Some((key, entry)) = e.map.iter().min_by_key(|(_, v)| v.line) {
            return Err(e.err(Some(entry.line), format!("unknown key `{key}`")));
        }
        Ok(cfg)
    }

    fn from_entries(e: &mut Entries) -> Result<RunConfig, ConfigError> {
        let version = env!("CARGO_PKG_VERSION").to_string();
        e.take("manifest.tool_version", |s| Ok(s.to_string()))?;
        let gfps = e.take("manifest.gfps_version", num::<u16>)?;
        let gfms = e.take("manifest.gfms_version", num::<u16>)?;
        if gfps.is_some_and(|v| v != spgi::patterns::GFPS_VERSION) || gfms.is_some_and(|v| v != spgi::acquisition::GFMS_VERSION) {
            return Err(e.err(None, format!("manifest format versions are not supported by spgi {version}")));
        }

        let height = e.require("grid.height", num::<usize>)?;
        let width = e.require("grid.width", num::<usize>)?;
        let pitch = e.or("grid.pixel_pitch_um", 6.5, num::<f64>)?;
        let grid = Grid::new(height, width, pitch).map_err(|err| e.err(None, err.to_string()))?;

        let scan_line = e.line_of("diffuser.scan");
        let diffuser = DiffuserSection {
            seed: e.or("diffuser.seed", 0, num::<u64>)?,
            feature_size_px: e.or("diffuser.feature_size_px", 10.0 / 6.5, num::<f64>)?,
            count: e.take("diffuser.count", num::<usize>)?,
            scan: {
                let raw = e.or("diffuser.scan", "jittered".to_string(), |s| Ok(s.to_string()))?;
                match raw.split_once(':') {
                    None if raw == "jittered" => Scan::Jittered,
                    Some(("raster", step)) => Scan::Raster { step: num(step.trim()).map_err(|m| e.err(scan_line, m))? },
                    Some(("file", p)) => Scan::File(e.path(p.trim()).map_err(|m| e.err(scan_line, m))?),
                    _ => return Err(e.err(scan_line, format!("diffuser.scan: expected jittered, raster:STEP or file:PATH, found `{raw}`"))),
                }
            },
            master_side: e.take("diffuser.master_side", num::<usize>)?,
            patterns_file: {
                let line = e.line_of("diffuser.patterns_file");
                match e.take("diffuser.patterns_file", |s| Ok(s.to_string()))? {
                    Some(p) => Some(e.path(&p).map_err(|m| e.err(line, m))?),
                    None => None,
                }
            },
        };
        if diffuser.patterns_file.is_none() && diffuser.count.is_none() && !matches!(diffuser.scan, Scan::File(_)) {
            return Err(e.err(None, "diffuser.count is required unless patterns or offsets come from a file"));
        }

        let camera = CameraModel {
            pixel_pitch_um: pitch,
            blur_fwhm_um: e.or("camera.blur_fwhm_um", 0.0, num::<f64>)?,
            enabled: e.or("camera.enabled", false, boolean)?,
        };
        if !(camera.blur_fwhm_um >= 0.0) {
            return Err(e.err(None, "camera.blur_fwhm_um must be >= 0"));
        }

        let scene = match e.or("scene.kind", "chopper".to_string(), |s| Ok(s.to_string()))?.as_str() {
            "chopper" => {
                let d = ChopperGeometry::default();
                let blades = e.or("scene.blades", d.blade_count, num::<u32>)?;
                let chop = e.take("scene.chopping_frequency_hz", num::<f64>)?;
                let rotation = e.take("scene.rotation_frequency_hz", num::<f64>)?;
                let rotation_frequency_hz = match (chop, rotation) {
                    (Some(_), Some(_)) => {
                        return Err(e.err(None, "set only one of scene.chopping_frequency_hz and scene.rotation_frequency_hz"))
                    }
                    (Some(c), None) => c / blades.max(1) as f64,
                    (None, Some(r)) => r,
                    (None, None) => d.rotation_frequency_hz,
                };
                let g = ChopperGeometry {
                    blade_count: blades,
                    duty_cycle: e.or("scene.duty", d.duty_cycle, num::<f64>)?,
                    rotation_frequency_hz,
                    beam_center_radius_mm: e.or("scene.beam_radius_mm", d.beam_center_radius_mm, num::<f64>)?,
                    jitter_sigma_deg: e.or("scene.jitter_deg", d.jitter_sigma_deg, num::<f64>)?,
                    jitter_seed: e.or("scene.jitter_seed", d.jitter_seed, num::<u64>)?,
                    phase_deg: e.or("scene.phase_deg", d.phase_deg, num::<f64>)?,
                };
                g.validate().map_err(|err| e.err(None, format!("scene: {err}")))?;
                SceneSpec::Chopper(g)
            }
            "static" => {
                let line = e.line_of("scene.mask");
                let mask = match e.or("scene.mask", "half_plane".to_string(), |s| Ok(s.to_string()))?.as_str() {
                    "half_plane" => Mask::HalfPlane,
                    m => match m.split_once(':') {
                        Some(("disk", r)) => Mask::Disk { radius_px: num(r.trim()).map_err(|m| e.err(line, m))? },
                        _ => return Err(e.err(line, format!("scene.mask: expected half_plane or disk:RADIUS_PX, found `{m}`"))),
                    },
                };
                SceneSpec::Static { mask, frequency_hz: e.or("scene.frequency_hz", 200.0, num::<f64>)? }
            }
            "sequence" => {
                let line = e.line_of("scene.frames");
                let p = e.require("scene.frames", |s| Ok(s.to_string()))?;
                SceneSpec::Sequence {
                    frames: e.path(&p).map_err(|m| e.err(line, m))?,
                    frequency_hz: e.or("scene.frequency_hz", 200.0, num::<f64>)?,
                }
            }
            other => return Err(e.err(None, format!("scene.kind: expected chopper, static or sequence, found `{other}`"))),
        };

        let fixed = e.take("sampling.photon_scale", num::<f64>)?;
        let mean = e.take("sampling.mean_counts", num::<f64>)?;
        let photon_scale = match (fixed, mean) {
            (Some(_), Some(_)) => return Err(e.err(None, "set only one of sampling.photon_scale and sampling.mean_counts")),
            (Some(v), None) => PhotonScale::Fixed(v),
            (None, Some(v)) => PhotonScale::MeanCounts(v),
            (None, None) => PhotonScale::MeanCounts(9.5e4),
        };
        let sampling = SamplingSection {
            sample_rate_hz: e.or("sampling.sample_rate_hz", 100e3, num::<f64>)?,
            cycles: e.or("sampling.cycles", 1, num::<usize>)?,
            photon_scale,
            noise: e.or("sampling.noise", NoiseModel::None, |s| match s {
                "none" => Ok(NoiseModel::None),
                "poisson" => Ok(NoiseModel::Poisson),
                _ => Err(format!("expected none or poisson, found `{s}`")),
            })?,
            noise_seed: e.or("sampling.noise_seed", 0, num::<u64>)?,
            systematic: e.or("sampling.systematic", 0.0, num::<f64>)?,
        };

        let d = TvConfig::default();
        let tv = TvConfig {
            mu: e.or("recon.mu", d.mu, num::<f64>)?,
            beta: e.or("recon.beta", d.beta, num::<f64>)?,
            outer_tol: e.or("recon.tol", d.outer_tol, num::<f64>)?,
            max_outer: e.or("recon.max_outer", d.max_outer, num::<usize>)?,
            inner_steps: e.or("recon.inner_steps", d.inner_steps, num::<usize>)?,
            nonneg: e.or("recon.nonneg", d.nonneg, boolean)?,
            model: e.or("recon.model", d.model, |s| match s {
                "penalized" => Ok(TvModel::Penalized),
                "equality" => Ok(TvModel::Equality),
                _ => Err(format!("expected penalized or equality, found `{s}`")),
            })?,
        };
        tv.validate().map_err(|err| e.err(None, format!("recon: {err}")))?;
        let recon = ReconSection {
            method: e.or("recon.method", Method::Tv, |s| match s {
                "tv" => Ok(Method::Tv),
                "correlation" => Ok(Method::Correlation),
                _ => Err(format!("expected tv or correlation, found `{s}`")),
            })?,
            tv,
            preprocessing: e.or("recon.preprocessing", Preprocessing::MeanCentered, |s| match s {
                "raw" => Ok(Preprocessing::Raw),
                "mean_centered" => Ok(Preprocessing::MeanCentered),
                _ => Err(format!("expected raw or mean_centered, found `{s}`")),
            })?,
            frames: e.or("recon.frames", FrameSelection::All, parse_frames)?,
        };

        let metrics = MetricsSection {
            roi: e.or("metrics.roi", Roi::Auto { margin: 2 }, |s| {
                if let Some(m) = s.strip_prefix("auto") {
                    let margin = match m.strip_prefix(':') {
                        Some(v) => num(v)?,
                        None if m.is_empty() => 2,
                        None => return Err(format!("bad roi `{s}`")),
                    };
                    return Ok(Roi::Auto { margin });
                }
                let v = list(s.strip_prefix("rect:").ok_or("expected auto[:MARGIN] or rect:R0,C0,R1,C1")?, num::<usize>)?;
                match v[..] {
                    [r0, c0, r1, c1] if r1 > r0 && c1 > c0 => Ok(Roi::Rect { r0, c0, r1, c1 }),
                    _ => Err(format!("bad rectangle `{s}`")),
                }
            })?,
            frame: e.or("metrics.frame", FrameRef::EdgeCentered, |s| match s {
                "edge_centered" => Ok(FrameRef::EdgeCentered),
                _ => num(s).map(FrameRef::Index),
            })?,
            counts: e.or("metrics.counts", vec![250, 500, 1000, 2000, 4000], |s| list(s, num::<usize>))?,
            flux: e.or("metrics.flux", vec![30.0, 370.0, 1150.0], |s| list(s, num::<f64>))?,
            width_source: e.or("metrics.width_source", WidthSource::Recon, |s| match s {
                "recon" => Ok(WidthSource::Recon),
                "model" => Ok(WidthSource::Model),
                _ => Err(format!("expected recon or model, found `{s}`")),
            })?,
            model_cycles: e.or("metrics.model_cycles", 4000, num::<u64>)?,
        };

        let line = e.line_of("output.directory");
        let dir = e.or("output.directory", "out".to_string(), |s| Ok(s.to_string()))?;
        let output = OutputSection {
            directory: e.path(&dir).map_err(|m| e.err(line, m))?,
            formats: e.or("output.formats", vec![Format::Pgm], |s| list(s, Format::parse))?,
        };

        Ok(RunConfig { grid, diffuser, camera, scene, sampling, recon, metrics, output })
    }

    /// Seeds of the diffuser, scan, photon noise and chopper jitter, all
    /// derived from one value.
    pub fn override_seeds(&mut self, seed: u64) {
        self.diffuser.seed = seed;
        self.sampling.noise_seed = seed.wrapping_add(1);
        if let SceneSpec::Chopper(g) = &mut self.scene {
            g.jitter_seed = seed.wrapping_add(2);
        }
    }

    /// Fully resolved configuration in the input syntax. Input file paths
    /// are absolute and the output directory is omitted, so a manifest
    /// reruns identically from anywhere.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let abs = |p: &Path| std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("manifest.tool_version", env!("CARGO_PKG_VERSION").into());
        kv("manifest.gfps_version", spgi::patterns::GFPS_VERSION.to_string());
        kv("manifest.gfms_version", spgi::acquisition::GFMS_VERSION.to_string());
        kv("grid.height", self.grid.height.to_string());
        kv("grid.width", self.grid.width.to_string());
        kv("grid.pixel_pitch_um", self.grid.pixel_pitch_um.to_string());
        let d = &self.diffuser;
        kv("diffuser.seed", d.seed.to_string());
        kv("diffuser.feature_size_px", d.feature_size_px.to_string());
        if let Some(c) = d.count {
            kv("diffuser.count", c.to_string());
        }
        kv(
            "diffuser.scan",
            match &d.scan {
                Scan::Jittered => "jittered".into(),
                Scan::Raster { step } => format!("raster:{step}"),
                Scan::File(p) => format!("file:{}", abs(p)),
            },
        );
        if let Some(m) = d.master_side {
            kv("diffuser.master_side", m.to_string());
        }
        if let Some(p) = &d.patterns_file {
            kv("diffuser.patterns_file", abs(p));
        }
        kv("camera.enabled", self.camera.enabled.to_string());
        kv("camera.blur_fwhm_um", self.camera.blur_fwhm_um.to_string());
        match &self.scene {
            SceneSpec::Chopper(g) => {
                kv("scene.kind", "chopper".into());
                kv("scene.blades", g.blade_count.to_string());
                kv("scene.rotation_frequency_hz", g.rotation_frequency_hz.to_string());
                kv("scene.duty", g.duty_cycle.to_string());
                kv("scene.beam_radius_mm", g.beam_center_radius_mm.to_string());
                kv("scene.jitter_deg", g.jitter_sigma_deg.to_string());
                kv("scene.jitter_seed", g.jitter_seed.to_string());
                kv("scene.phase_deg", g.phase_deg.to_string());
            }
            SceneSpec::Static { mask, frequency_hz } => {
                kv("scene.kind", "static".into());
                kv(
                    "scene.mask",
                    match mask {
                        Mask::HalfPlane => "half_plane".into(),
                        Mask::Disk { radius_px } => format!("disk:{radius_px}"),
                    },
                );
                kv("scene.frequency_hz", frequency_hz.to_string());
            }
            SceneSpec::Sequence { frames, frequency_hz } => {
                kv("scene.kind", "sequence".into());
                kv("scene.frames", abs(frames));
                kv("scene.frequency_hz", frequency_hz.to_string());
            }
        }
        let sm = &self.sampling;
        kv("sampling.sample_rate_hz", sm.sample_rate_hz.to_string());
        kv("sampling.cycles", sm.cycles.to_string());
        match sm.photon_scale {
            PhotonScale::Fixed(v) => kv("sampling.photon_scale", v.to_string()),
            PhotonScale::MeanCounts(v) => kv("sampling.mean_counts", v.to_string()),
        }
        kv("sampling.noise", if sm.noise == NoiseModel::Poisson { "poisson" } else { "none" }.into());
        kv("sampling.noise_seed", sm.noise_seed.to_string());
        kv("sampling.systematic", sm.systematic.to_string());
        let r = &self.recon;
        kv("recon.method", if r.method == Method::Tv { "tv" } else { "correlation" }.into());
        kv("recon.mu", r.tv.mu.to_string());
        kv("recon.beta", r.tv.beta.to_string());
        kv("recon.tol", r.tv.outer_tol.to_string());
        kv("recon.max_outer", r.tv.max_outer.to_string());
        kv("recon.inner_steps", r.tv.inner_steps.to_string());
        kv("recon.nonneg", r.tv.nonneg.to_string());
        kv("recon.model", if r.tv.model == TvModel::Equality { "equality" } else { "penalized" }.into());
        kv("recon.preprocessing", if r.preprocessing == Preprocessing::Raw { "raw" } else { "mean_centered" }.into());
        kv("recon.frames", r.frames.to_string());
        let m = &self.metrics;
        kv(
            "metrics.roi",
            match m.roi {
                Roi::Auto { margin } => format!("auto:{margin}"),
                Roi::Rect { r0, c0, r1, c1 } => format!("rect:{r0},{c0},{r1},{c1}"),
            },
        );
        kv(
            "metrics.frame",
            match m.frame {
                FrameRef::EdgeCentered => "edge_centered".into(),
                FrameRef::Index(i) => i.to_string(),
            },
        );
        kv("metrics.counts", m.counts.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        kv("metrics.flux", m.flux.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
        kv("metrics.width_source", if m.width_source == WidthSource::Model { "model" } else { "recon" }.into());
        kv("metrics.model_cycles", m.model_cycles.to_string());
        kv("output.formats", self.output.formats.iter().map(|f| f.name()).collect::<Vec<_>>().join(","));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(text, Path::new("test.cfg"), Path::new("/data"))
    }

    const MIN: &str = "grid.height = 16\ngrid.width = 16\ndiffuser.count = 64\n";

    #[test]
    fn defaults() {
        let c = parse(MIN).unwrap();
        assert_eq!(c.grid.pixel_pitch_um, 6.5);
        assert_eq!(c.sampling.photon_scale, PhotonScale::MeanCounts(9.5e4));
        assert_eq!(c.output.directory, Path::new("/data/out"));
        assert!(matches!(c.scene, SceneSpec::Chopper(_)));
    }

    #[test]
    fn unknown_key_names_line() {
        let err = parse(&format!("{MIN}# note\nscene.colour = red\n")).unwrap_err();
        assert_eq!(err.line, Some(5));
        assert!(err.to_string().contains("scene.colour"), "{err}");
    }

    #[test]
    fn bad_value_and_duplicates() {
        let err = parse(&format!("{MIN}recon.mu = fast\n")).unwrap_err();
        assert_eq!(err.line, Some(4));
        let err = parse(&format!("{MIN}grid.width = 8\n")).unwrap_err();
        assert!(err.message.contains("duplicate"), "{err}");
        assert!(parse("grid.height 16\n").unwrap_err().line == Some(1));
        assert!(parse("grid.height = 16\n").unwrap_err().message.contains("grid.width"));
    }

    #[test]
    fn manifest_round_trips() {
        let mut c = parse(&format!("{MIN}scene.jitter_deg = 0.1\nsampling.noise = poisson\nrecon.frames = 3..40:7\ndiffuser.patterns_file = p.gfps\n")).unwrap();
        c.override_seeds(99);
        let m = c.manifest();
        let mut back = RunConfig::parse(&m, Path::new("manifest.cfg"), Path::new("/elsewhere")).unwrap();
        assert_eq!(back.output.directory, Path::new("/elsewhere/out"));
        back.output.directory = c.output.directory.clone();
        assert_eq!(back, c);
        assert_eq!(back.manifest(), m);
    }

    #[test]
    fn frame_selectors() {
        assert_eq!(parse_frames("2..9:3").unwrap().resolve(500).unwrap(), vec![2, 5, 8]);
        assert_eq!(parse_frames("7").unwrap().resolve(500).unwrap(), vec![7]);
        assert!(parse_frames("600").unwrap().resolve(500).is_err());
        assert!(parse_frames("5..5").is_err());
    }
}
