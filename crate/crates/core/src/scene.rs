//! Time-dependent transmission models T(x, y, t) in [0, 1].
//!
//! The chopper model treats the blade edges as straight lines perpendicular
//! to the direction of motion (the +x axis of the grid). Blade curvature over
//! the field of view is neglected. Each pixel receives the exact fraction of
//! its area lying on the open side of the blade pattern.

use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::image::{Grid, Image};
use crate::patterns::PatternStack;
use crate::rng::{self, Domain};

#[derive(Clone, Debug, PartialEq)]
pub struct ChopperGeometry {
    pub blade_count: u32,
    /// Open fraction of one blade period.
    pub duty_cycle: f64,
    pub rotation_frequency_hz: f64,
    pub beam_center_radius_mm: f64,
    /// Standard deviation of the per-cycle angular jitter.
    pub jitter_sigma_deg: f64,
    pub jitter_seed: u64,
    /// Blade-local angle at t = 0; zero puts an opening edge on the FOV centre.
    pub phase_deg: f64,
}

impl Default for ChopperGeometry {
    /// 200 Hz chopping, 0.6 m/s edge speed and 0.2 deg jitter. Blade count,
    /// duty cycle and starting phase are assumptions, not measured values.
    fn default() -> Self {
        let blade_count = 10;
        let rotation = 200.0 / blade_count as f64;
        Self {
            blade_count,
            duty_cycle: 0.5,
            rotation_frequency_hz: rotation,
            beam_center_radius_mm: 0.6e3 / (TAU * rotation),
            jitter_sigma_deg: 0.2,
            jitter_seed: 0,
            phase_deg: -5.0,
        }
    }
}

impl ChopperGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.blade_count == 0 {
            return Err(Error::invalid("chopper needs at least one blade"));
        }
        if !(self.duty_cycle > 0.0 && self.duty_cycle < 1.0) {
            return Err(Error::invalid("duty cycle must lie in (0, 1)"));
        }
        if !(self.rotation_frequency_hz > 0.0 && self.beam_center_radius_mm > 0.0) {
            return Err(Error::invalid("rotation frequency and beam radius must be positive"));
        }
        if !(self.jitter_sigma_deg >= 0.0) || !self.phase_deg.is_finite() {
            return Err(Error::invalid("jitter must be non-negative and phase finite"));
        }
        Ok(())
    }

    pub fn chopping_frequency_hz(&self) -> f64 {
        self.blade_count as f64 * self.rotation_frequency_hz
    }

    fn radius_um(&self) -> f64 {
        self.beam_center_radius_mm * 1e3
    }

    /// Tangential blade speed at the beam, micrometres per second.
    pub fn blade_speed_um_per_s(&self) -> f64 {
        TAU * self.rotation_frequency_hz * self.radius_um()
    }

    /// Arc length of one blade period at the beam radius, micrometres.
    pub fn blade_period_um(&self) -> f64 {
        TAU * self.radius_um() / self.blade_count as f64
    }

    /// Angular jitter of one chopping cycle, degrees.
    pub fn jitter_deg(&self, cycle: u64) -> f64 {
        if self.jitter_sigma_deg == 0.0 {
            return 0.0;
        }
        self.jitter_sigma_deg * rng::standard_normal(rng::key(self.jitter_seed, Domain::ChopperJitter, cycle, 0))
    }

    /// Position (um, along +x relative to the FOV centre) of the reference
    /// opening edge. Points with `((s0 - u) mod L) < duty * L` are open.
    fn pattern_offset_um(&self, cycle: u64, phase: f64, jitter: bool) -> f64 {
        let angle = self.phase_deg + if jitter { self.jitter_deg(cycle) } else { 0.0 };
        self.radius_um() * angle * PI / 180.0 + phase * self.blade_period_um()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SceneKind {
    Static(Image),
    Chopper(ChopperGeometry),
    /// Frames sampled uniformly over one period.
    Sequence(Vec<Image>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    grid: Grid,
    kind: SceneKind,
    cycle_frequency_hz: f64,
}

fn check_unit_interval(img: &Image) -> Result<()> {
    if img.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("transmission must lie in [0, 1]"));
    }
    Ok(())
}

impl Scene {
    pub fn chopper(grid: Grid, geometry: ChopperGeometry) -> Result<Self> {
        geometry.validate()?;
        let cycle_frequency_hz = geometry.chopping_frequency_hz();
        Ok(Self { grid, kind: SceneKind::Chopper(geometry), cycle_frequency_hz })
    }

    /// Time-independent mask. `nominal_frequency_hz` only sets the cycle
    /// length used by the acquisition sampler.
    pub fn static_mask(grid: Grid, mask: Image, nominal_frequency_hz: f64) -> Result<Self> {
        if mask.height != grid.height || mask.width != grid.width {
            return Err(Error::DimensionMismatch("mask does not match grid".into()));
        }
        if !(nominal_frequency_hz > 0.0) {
            return Err(Error::invalid("cycle frequency must be positive"));
        }
        check_unit_interval(&mask)?;
        Ok(Self { grid, kind: SceneKind::Static(mask), cycle_frequency_hz: nominal_frequency_hz })
    }

    /// Frames from a stack, each shown for `1 / (count * frequency)` seconds.
    pub fn sequence(frames: &PatternStack, frequency_hz: f64) -> Result<Self> {
        if !(frequency_hz > 0.0) {
            return Err(Error::invalid("cycle frequency must be positive"));
        }
        let grid = frames.grid();
        let images = frames
            .patterns()
            .map(|p| Image::from_vec(grid.height, grid.width, p.iter().map(|&v| v as f64).collect()))
            .collect::<Result<Vec<_>>>()?;
        images.iter().try_for_each(check_unit_interval)?;
        Ok(Self { grid, kind: SceneKind::Sequence(images), cycle_frequency_hz: frequency_hz })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn kind(&self) -> &SceneKind {
        &self.kind
    }

    pub fn chopper_geometry(&self) -> Option<&ChopperGeometry> {
        match &self.kind {
            SceneKind::Chopper(g) => Some(g),
            _ => None,
        }
    }

    pub fn cycle_frequency_hz(&self) -> f64 {
        self.cycle_frequency_hz
    }

    /// Period of periodic kinds; `None` for static masks.
    pub fn period_s(&self) -> Option<f64> {
        match self.kind {
            SceneKind::Static(_) => None,
            _ => Some(1.0 / self.cycle_frequency_hz),
        }
    }

    /// Split absolute time into (cycle index, phase in [0, 1)).
    pub fn cycle_phase(&self, t: f64) -> Result<(u64, f64)> {
        if !(t >= 0.0) || !t.is_finite() {
            return Err(Error::invalid(format!("time {t} must be finite and non-negative")));
        }
        let scaled = t * self.cycle_frequency_hz;
        let cycle = scaled.floor();
        let phase = t.mul_add(self.cycle_frequency_hz, -cycle).clamp(0.0, 1.0 - f64::EPSILON);
        Ok((cycle as u64, phase))
    }

    pub fn transmission_at(&self, t: f64, jitter: bool) -> Result<Image> {
        let (cycle, phase) = self.cycle_phase(t)?;
        Ok(self.transmission_at_phase(cycle, phase, jitter))
    }

    /// Transmission within `cycle` at fractional `phase` of the period.
    pub fn transmission_at_phase(&self, cycle: u64, phase: f64, jitter: bool) -> Image {
        match &self.kind {
            SceneKind::Static(m) => m.clone(),
            SceneKind::Sequence(frames) => frames[sequence_index(phase, frames.len())].clone(),
            SceneKind::Chopper(g) => {
                let mut cols = vec![0.0; self.grid.width];
                chopper_columns(g, &self.grid, g.pattern_offset_um(cycle, phase, jitter), &mut cols);
                let mut img = Image::zeros(self.grid.height, self.grid.width);
                for row in img.data.chunks_exact_mut(self.grid.width) {
                    row.copy_from_slice(&cols);
                }
                img
            }
        }
    }

    /// Per-column transmission for the chopper kind (every row is identical).
    pub(crate) fn chopper_columns_at(&self, cycle: u64, phase: f64, jitter: bool, out: &mut [f64]) -> Result<()> {
        let g = self.chopper_geometry().ok_or(Error::NotChopper)?;
        chopper_columns(g, &self.grid, g.pattern_offset_um(cycle, phase, jitter), out);
        Ok(())
    }

    pub fn edge_position(&self, t: f64) -> Result<Option<f64>> {
        let (cycle, phase) = self.cycle_phase(t)?;
        self.edge_position_at_phase(cycle, phase, false)
    }

    /// Signed distance (um) of the blade edge in view from the FOV centre
    /// along +x, or `None` when no edge crosses the FOV.
    pub fn edge_position_at_phase(&self, cycle: u64, phase: f64, jitter: bool) -> Result<Option<f64>> {
        let g = self.chopper_geometry().ok_or(Error::NotChopper)?;
        let s0 = g.pattern_offset_um(cycle, phase, jitter);
        let period = g.blade_period_um();
        let half = self.grid.fov_um().0 / 2.0;
        let mut best: Option<f64> = None;
        for base in [s0, s0 - g.duty_cycle * period] {
            let k_lo = ((-half - base) / period).ceil() as i64;
            let k_hi = ((half - base) / period).floor() as i64;
            for k in k_lo..=k_hi {
                let u = base + k as f64 * period;
                if best.is_none_or(|b| u.abs() < b.abs()) {
                    best = Some(u);
                }
            }
        }
        Ok(best)
    }

    /// First time in cycle 0 (jitter off) at which an opening edge sits on the
    /// FOV centre.
    pub fn edge_centered_time(&self) -> Result<f64> {
        let g = self.chopper_geometry().ok_or(Error::NotChopper)?;
        let start = g.pattern_offset_um(0, 0.0, false) / g.blade_period_um();
        Ok((-start).rem_euclid(1.0) / self.cycle_frequency_hz)
    }

    /// Opening edge motion direction is always +x for this model.
    pub fn edge_normal(&self) -> (f64, f64) {
        (1.0, 0.0)
    }
}

fn sequence_index(phase: f64, len: usize) -> usize {
    ((phase * len as f64) as usize).min(len - 1)
}

/// Fill `out[j]` with the open area fraction of column `j`, given the
/// reference opening edge at `s0` (um from the FOV centre).
fn chopper_columns(g: &ChopperGeometry, grid: &Grid, s0: f64, out: &mut [f64]) {
    let period = g.blade_period_um();
    let open = g.duty_cycle * period;
    let pitch = grid.pixel_pitch_um;
    let half = grid.width as f64 / 2.0;
    for (j, o) in out.iter_mut().enumerate() {
        let a = (j as f64 - half) * pitch;
        let b = a + pitch;
        // open intervals are (s0 - open + k L, s0 + k L]
        let k_lo = ((a - s0) / period).floor() as i64;
        let k_hi = ((b - s0 + open) / period).ceil() as i64;
        let mut covered = 0.0;
        for k in k_lo..=k_hi {
            let hi = s0 + k as f64 * period;
            let lo = hi - open;
            let overlap = b.min(hi) - a.max(lo);
            if overlap > 0.0 {
                covered += overlap;
            }
        }
        *o = (covered / pitch).clamp(0.0, 1.0);
    }
}

/// Built-in static masks.
pub mod masks {
    use crate::image::{Grid, Image};

    /// Left half open, right half closed; the edge bisects the grid when the
    /// width is even.
    pub fn half_plane(grid: &Grid) -> Image {
        let mut img = Image::zeros(grid.height, grid.width);
        let cut = grid.width as f64 / 2.0;
        for r in 0..grid.height {
            for c in 0..grid.width {
                img.set(r, c, (cut - c as f64).clamp(0.0, 1.0));
            }
        }
        img
    }

    /// Centred disk of the given radius in pixels, binary.
    pub fn disk(grid: &Grid, radius_px: f64) -> Image {
        let mut img = Image::zeros(grid.height, grid.width);
        let (cy, cx) = (grid.height as f64 / 2.0, grid.width as f64 / 2.0);
        for r in 0..grid.height {
            for c in 0..grid.width {
                let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                if dx * dx + dy * dy <= radius_px * radius_px {
                    img.set(r, c, 1.0);
                }
            }
        }
        img
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid {
        Grid::new(n, n, 6.5).unwrap()
    }

    fn chopper(n: usize) -> Scene {
        let mut g = ChopperGeometry::default();
        g.phase_deg = 0.0;
        Scene::chopper(grid(n), g).unwrap()
    }

    #[test]
    fn closed_and_open_sectors() {
        let s = chopper(32);
        // a quarter period after the opening edge passes, the FOV is open;
        // three quarters later it sits in the closed sector
        let open = s.transmission_at_phase(0, 0.25, false);
        assert!(open.data.iter().all(|&v| v == 1.0));
        let closed = s.transmission_at_phase(0, 0.75, false);
        assert!(closed.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bisecting_edge_has_half_transmission() {
        for n in [16usize, 17, 32] {
            let s = chopper(n);
            let t = s.edge_centered_time().unwrap();
            let img = s.transmission_at(t, false).unwrap();
            assert!((img.mean() - 0.5).abs() <= 1.0 / (2.0 * n as f64), "n={n} mean={}", img.mean());
        }
    }

    #[test]
    fn edge_position_examples() {
        let s = chopper(92);
        let t0 = s.edge_centered_time().unwrap();
        assert!(s.edge_position(t0).unwrap().unwrap().abs() < 1e-9);
        let d = s.edge_position(t0 + 10e-6).unwrap().unwrap();
        assert!((d - 6.0).abs() < 0.05, "displacement {d}");
        let period = s.period_s().unwrap();
        assert_eq!(s.edge_position(t0 + 0.25 * period).unwrap(), None);
    }

    #[test]
    fn non_chopper_has_no_edge() {
        let g = grid(8);
        let s = Scene::static_mask(g, masks::half_plane(&g), 200.0).unwrap();
        assert!(matches!(s.edge_position(0.0), Err(Error::NotChopper)));
        assert!(s.period_s().is_none());
    }

    #[test]
    fn negative_time_rejected() {
        assert!(chopper(8).transmission_at(-1e-6, false).is_err());
    }

    #[test]
    fn periodic_without_jitter() {
        let s = chopper(24);
        for &phase in &[0.0, 0.013, 0.5, 0.9991] {
            let a = s.transmission_at_phase(0, phase, false);
            for k in [1u64, 7, 1000] {
                assert_eq!(a, s.transmission_at_phase(k, phase, false));
            }
        }
        let p = s.period_s().unwrap();
        let a = s.transmission_at(0.3 * p, false).unwrap();
        let b = s.transmission_at(0.3 * p + 3.0 * p, false).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn transmission_monotone_while_opening() {
        let mut g = ChopperGeometry::default();
        g.phase_deg = -5.0;
        let s = Scene::chopper(grid(64), g).unwrap();
        let mut last = -1.0;
        for k in 0..500 {
            let m = s.transmission_at_phase(0, k as f64 / 500.0, false).mean();
            if s.edge_position_at_phase(0, k as f64 / 500.0, false).unwrap().is_none() && last >= 0.5 {
                break;
            }
            assert!(m >= last, "sample {k}");
            last = m;
        }
    }

    #[test]
    fn jitter_statistics() {
        let g = ChopperGeometry { jitter_seed: 17, ..ChopperGeometry::default() };
        let m = 20_000u64;
        let draws: Vec<f64> = (0..m).map(|c| g.jitter_deg(c)).collect();
        let mean = draws.iter().sum::<f64>() / m as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (m - 1) as f64).sqrt();
        assert!((sd - 0.2).abs() < 0.05 * 0.2, "sd {sd}");
        assert_eq!(g.jitter_deg(123), g.jitter_deg(123));
    }

    #[test]
    fn edge_speed_matches_blade_speed() {
        let s = chopper(92);
        let g = s.chopper_geometry().unwrap();
        let t0 = s.edge_centered_time().unwrap();
        let dt = 20e-6;
        let a = s.edge_position(t0).unwrap().unwrap();
        let b = s.edge_position(t0 + dt).unwrap().unwrap();
        let rate = (b - a) / dt;
        assert!((rate / g.blade_speed_um_per_s() - 1.0).abs() < 0.01);
        assert!((g.blade_speed_um_per_s() - 0.6e6).abs() < 1.0);
        assert_eq!(g.chopping_frequency_hz(), 200.0);
    }

    #[test]
    fn sequence_frames_by_phase() {
        let frames = PatternStack::new_unchecked(2, 1, 2, 1.0, vec![0.0, 1.0, 1.0, 0.5]).unwrap();
        let s = Scene::sequence(&frames, 100.0).unwrap();
        assert_eq!(s.transmission_at_phase(0, 0.2, false).data, vec![0.0, 1.0]);
        assert_eq!(s.transmission_at_phase(3, 0.7, false).data, vec![1.0, 0.5]);
    }
}
