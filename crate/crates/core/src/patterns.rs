//! Speckle illumination patterns: a synthetic diffuser field, windows cut
//! from it at scan offsets, and the GFPS container used to persist stacks.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, FormatError, Result};
use crate::image::Grid;
use crate::numeric::gaussian_kernel;
use crate::rng::{self, Domain};

pub const GFPS_MAGIC: &[u8; 4] = b"GFPS";
pub const GFPS_VERSION: u16 = 1;
const GFPS_HEADER_LEN: usize = 24;

/// Stack of `count` illumination patterns on a shared `height x width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternStack {
    count: usize,
    height: usize,
    width: usize,
    pixel_pitch_um: f32,
    data: Vec<f32>,
}

impl PatternStack {
    /// Validates non-negativity and that every pattern carries some light.
    pub fn new(
        count: usize,
        height: usize,
        width: usize,
        pixel_pitch_um: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        let stack = Self::new_unchecked(count, height, width, pixel_pitch_um, data)?;
        for r in 0..count {
            let pat = stack.pattern(r);
            if pat.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::invalid(format!("pattern {r} has a negative or non-finite intensity")));
            }
            if !pat.iter().any(|v| *v > 0.0) {
                return Err(Error::invalid(format!("pattern {r} has no illuminated pixel")));
            }
        }
        Ok(stack)
    }

    /// Shape checks only; used for frame stacks that may legitimately be dark.
    pub(crate) fn new_unchecked(
        count: usize,
        height: usize,
        width: usize,
        pixel_pitch_um: f32,
        data: Vec<f32>,
    ) -> Result<Self> {
        if count == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("pattern stack dimensions must be nonzero"));
        }
        if data.len() != count * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} intensities for {count}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self { count, height, width, pixel_pitch_um, data })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel_pitch_um(&self) -> f32 {
        self.pixel_pitch_um
    }

    pub fn grid(&self) -> Grid {
        Grid { height: self.height, width: self.width, pixel_pitch_um: self.pixel_pitch_um as f64 }
    }

    pub fn pattern(&self, r: usize) -> &[f32] {
        let p = self.pixels();
        &self.data[r * p..(r + 1) * p]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn patterns(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.pixels())
    }

    /// The first `n` realizations.
    pub fn truncated(&self, n: usize) -> Result<PatternStack> {
        if n == 0 || n > self.count {
            return Err(Error::invalid(format!("cannot take {n} of {} realizations", self.count)));
        }
        Ok(Self { count: n, data: self.data[..n * self.pixels()].to_vec(), ..self.clone() })
    }

    /// Realizations reordered by `order` (a permutation or selection).
    pub fn select(&self, order: &[usize]) -> Result<PatternStack> {
        let mut data = Vec::with_capacity(order.len() * self.pixels());
        for &r in order {
            if r >= self.count {
                return Err(Error::invalid(format!("realization {r} out of range")));
            }
            data.extend_from_slice(self.pattern(r));
        }
        Self::new_unchecked(order.len(), self.height, self.width, self.pixel_pitch_um, data)
    }

    /// Pixelwise mean over realizations.
    pub fn mean_pattern(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.pixels()];
        for pat in self.patterns() {
            for (m, &v) in mean.iter_mut().zip(pat) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= self.count as f64);
        mean
    }

    pub(crate) fn map_patterns<F>(&self, f: F) -> Vec<f32>
    where
        F: Fn(&[f32]) -> Vec<f32> + Sync + Send,
    {
        let per: Vec<Vec<f32>> = self.data.par_chunks(self.pixels()).map(f).collect();
        per.into_iter().flatten().collect()
    }
}

/// Master speckle field from which pattern windows are cut.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffuserMap {
    pub height: usize,
    pub width: usize,
    pub feature_size_px: f64,
    pub seed: u64,
    pub data: Vec<f32>,
}

impl DiffuserMap {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }
}

/// Gaussian-smoothed white noise with kernel standard deviation
/// `feature_size_px / 2.355`, min-max normalized to [0, 1]. Unit (or smaller)
/// features leave the noise unsmoothed. Boundaries wrap so the field is
/// stationary.
pub fn generate_diffuser(seed: u64, height: usize, width: usize, feature_size_px: f64) -> Result<DiffuserMap> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("diffuser master must have nonzero area"));
    }
    if !(feature_size_px >= 1.0) || !feature_size_px.is_finite() {
        return Err(Error::invalid(format!("feature size {feature_size_px} px must be at least 1")));
    }
    if feature_size_px > height.min(width) as f64 {
        return Err(Error::invalid(format!(
            "feature size {feature_size_px} px exceeds master dims {height}x{width}"
        )));
    }
    let noise: Vec<f64> = (0..height * width)
        .into_par_iter()
        .map(|i| rng::standard_normal(rng::key(seed, Domain::Diffuser, i as u64, 0)))
        .collect();

    let field = if feature_size_px > 1.0 {
        let kernel = gaussian_kernel(feature_size_px / 2.355);
        let rows = convolve_rows_wrap(&noise, width, &kernel);
        convolve_cols_wrap(&rows, height, width, &kernel)
    } else {
        noise
    };

    let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let data = field.iter().map(|v| ((v - lo) / span) as f32).collect();
    Ok(DiffuserMap { height, width, feature_size_px, seed, data })
}

fn convolve_rows_wrap(src: &[f64], width: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        let line = &src[y * width..(y + 1) * width];
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                let xx = (x as isize + k as isize - r).rem_euclid(width as isize) as usize;
                s += w * line[xx];
            }
            *o = s;
        }
    });
    out
}

fn convolve_cols_wrap(src: &[f64], height: usize, width: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut out = vec![0.0; src.len()];
    out.par_chunks_mut(width).enumerate().for_each(|(y, row)| {
        for (k, w) in kernel.iter().enumerate() {
            let yy = (y as isize + k as isize - r).rem_euclid(height as isize) as usize;
            let line = &src[yy * width..(yy + 1) * width];
            for (o, v) in row.iter_mut().zip(line) {
                *o += w * v;
            }
        }
    });
    out
}

/// Cut one `window_h x window_w` pattern per offset `(dx, dy)` (column, row of
/// the window's top-left corner in the master).
pub fn cut_patterns(
    map: &DiffuserMap,
    window_h: usize,
    window_w: usize,
    pixel_pitch_um: f32,
    offsets: &[(usize, usize)],
) -> Result<PatternStack> {
    if offsets.is_empty() {
        return Err(Error::invalid("at least one offset is required"));
    }
    if window_h == 0 || window_w == 0 {
        return Err(Error::invalid("window must have nonzero area"));
    }
    for (index, &(dx, dy)) in offsets.iter().enumerate() {
        if dx + window_w > map.width || dy + window_h > map.height {
            return Err(Error::OffsetOutOfBounds { index, dx, dy });
        }
    }
    let mut data = Vec::with_capacity(offsets.len() * window_h * window_w);
    for &(dx, dy) in offsets {
        for row in dy..dy + window_h {
            let start = row * map.width + dx;
            data.extend_from_slice(&map.data[start..start + window_w]);
        }
    }
    PatternStack::new(offsets.len(), window_h, window_w, pixel_pitch_um, data)
}

/// Master side length that leaves room for `count` jittered positions spaced
/// about two feature sizes apart.
pub fn default_master_side(window: usize, count: usize, feature_size_px: f64) -> usize {
    let spacing = (2.0 * feature_size_px).ceil().max(2.0) as usize;
    window + (count as f64).sqrt().ceil() as usize * spacing
}

/// Quasi-random scan: one offset per cell of a grid covering the admissible
/// offset range, jittered uniformly inside its cell.
pub fn jittered_grid_offsets(
    master: (usize, usize),
    window: (usize, usize),
    count: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let (mh, mw) = master;
    let (wh, ww) = window;
    if wh > mh || ww > mw {
        return Err(Error::invalid("window larger than master"));
    }
    if count == 0 {
        return Err(Error::invalid("scan needs at least one position"));
    }
    let (ry, rx) = (mh - wh + 1, mw - ww + 1);
    let cols = ((count as f64 * rx as f64 / ry as f64).sqrt().ceil() as usize).clamp(1, count);
    let rows = count.div_ceil(cols);
    if cols > rx || rows > ry {
        return Err(Error::invalid(format!(
            "master {mh}x{mw} cannot hold {count} distinct {wh}x{ww} windows"
        )));
    }
    let (cx, cy) = (rx as f64 / cols as f64, ry as f64 / rows as f64);
    Ok((0..count)
        .map(|i| {
            let (gr, gc) = (i / cols, i % cols);
            let ux = rng::uniform01(rng::key(seed, Domain::ScanJitter, i as u64, 0));
            let uy = rng::uniform01(rng::key(seed, Domain::ScanJitter, i as u64, 1));
            (jitter_in_cell(gc, cx, ux, rx), jitter_in_cell(gr, cy, uy, ry))
        })
        .collect())
}

/// Integer position inside cell `i` of width `size`; cells never share a
/// position because `size >= 1`.
fn jitter_in_cell(i: usize, size: f64, u: f64, range: usize) -> usize {
    let start = (i as f64 * size) as usize;
    let end = (((i + 1) as f64 * size) as usize).clamp(start + 1, range);
    start + ((u * (end - start) as f64) as usize).min(end - start - 1)
}

/// Default scan in one call: a master sized by [`default_master_side`],
/// a jittered grid of `count` offsets seeded like the master, and the cut
/// windows.
pub fn speckle_stack(
    seed: u64,
    window: (usize, usize),
    count: usize,
    feature_size_px: f64,
    pixel_pitch_um: f32,
) -> Result<PatternStack> {
    let (h, w) = window;
    let mh = default_master_side(h, count, feature_size_px);
    let mw = default_master_side(w, count, feature_size_px);
    let map = generate_diffuser(seed, mh, mw, feature_size_px)?;
    let offsets = jittered_grid_offsets((mh, mw), window, count, seed)?;
    cut_patterns(&map, h, w, pixel_pitch_um, &offsets)
}

/// Strict raster scan with a fixed step, row by row.
pub fn raster_offsets(
    master: (usize, usize),
    window: (usize, usize),
    count: usize,
    step: usize,
) -> Result<Vec<(usize, usize)>> {
    let (mh, mw) = master;
    let (wh, ww) = window;
    if step == 0 || wh > mh || ww > mw {
        return Err(Error::invalid("invalid raster geometry"));
    }
    let per_row = (mw - ww) / step + 1;
    let rows = (mh - wh) / step + 1;
    if per_row * rows < count {
        return Err(Error::invalid(format!("raster holds {} positions, {count} requested", per_row * rows)));
    }
    Ok((0..count).map(|i| ((i % per_row) * step, (i / per_row) * step)).collect())
}

/// Serialize to GFPS bytes.
pub fn encode_stack(stack: &PatternStack) -> Result<Vec<u8>> {
    let dims = [stack.count as u64, stack.height as u64, stack.width as u64];
    if dims.iter().any(|&d| d > u32::MAX as u64) {
        return Err(FormatError::DimensionOverflow { dims: dims.to_vec() }.into());
    }
    let mut out = Vec::with_capacity(GFPS_HEADER_LEN + stack.data.len() * 4);
    out.extend_from_slice(GFPS_MAGIC);
    out.extend_from_slice(&GFPS_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&stack.pixel_pitch_um.to_le_bytes());
    for v in &stack.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Raw GFPS contents before pattern-level validation.
#[derive(Debug)]
pub(crate) struct GfpsContents {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub pixel_pitch_um: f32,
    pub data: Vec<f32>,
}

pub(crate) fn decode_gfps(bytes: &[u8]) -> Result<GfpsContents, FormatError> {
    if bytes.len() < 4 || &bytes[..4] != GFPS_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(FormatError::BadMagic { expected: "GFPS".into(), found });
    }
    if bytes.len() < GFPS_HEADER_LEN {
        return Err(FormatError::Truncated { expected: GFPS_HEADER_LEN as u64, actual: bytes.len() as u64 });
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u16_at(4);
    if version != GFPS_VERSION {
        return Err(FormatError::UnsupportedVersion { container: "GFPS", version });
    }
    let (n, h, w) = (u32_at(8) as u64, u32_at(12) as u64, u32_at(16) as u64);
    let pixel_pitch_um = f32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let payload = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .filter(|&v| usize::try_from(v).is_ok())
        .ok_or(FormatError::DimensionOverflow { dims: vec![n, h, w] })?;
    let expected = GFPS_HEADER_LEN as u64 + payload;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(FormatError::Truncated { expected, actual });
    }
    if actual > expected {
        return Err(FormatError::Malformed {
            container: "GFPS",
            reason: format!("{} trailing bytes", actual - expected),
        });
    }
    let data = bytes[GFPS_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(GfpsContents { count: n as usize, height: h as usize, width: w as usize, pixel_pitch_um, data })
}

pub fn decode_stack(bytes: &[u8]) -> Result<PatternStack> {
    let c = decode_gfps(bytes)?;
    PatternStack::new(c.count, c.height, c.width, c.pixel_pitch_um, c.data)
}

pub fn save_stack(stack: &PatternStack, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_stack(stack)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_stack(path: impl AsRef<Path>) -> Result<PatternStack> {
    decode_stack(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::pearson;

    fn window(map: &DiffuserMap, dx: usize, dy: usize, n: usize) -> Vec<f64> {
        let s = cut_patterns(map, n, n, 1.0, &[(dx, dy)]).unwrap();
        s.pattern(0).iter().map(|&v| v as f64).collect()
    }

    #[test]
    fn diffuser_is_deterministic() {
        let a = generate_diffuser(42, 64, 64, 3.0).unwrap();
        let b = generate_diffuser(42, 64, 64, 3.0).unwrap();
        assert_eq!(a.data, b.data);
        let c = generate_diffuser(43, 64, 64, 3.0).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn diffuser_is_normalized() {
        let m = generate_diffuser(1, 128, 96, 2.0).unwrap();
        let lo = m.data.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = m.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn unit_feature_is_white() {
        let m = generate_diffuser(42, 256, 256, 1.0).unwrap();
        let a: Vec<f64> = m.data.iter().map(|&v| v as f64).collect();
        let shifted: Vec<f64> = (0..256 * 256).map(|i| a[(i / 256) * 256 + (i % 256 + 1) % 256]).collect();
        assert!(pearson(&a, &shifted).abs() < 0.02);
    }

    #[test]
    fn diffuser_rejects_bad_dims() {
        assert!(generate_diffuser(1, 0, 8, 1.0).is_err());
        assert!(generate_diffuser(1, 8, 8, 9.0).is_err());
        assert!(generate_diffuser(1, 8, 8, 0.5).is_err());
    }

    #[test]
    fn single_offset_is_origin_window() {
        let m = generate_diffuser(5, 32, 32, 2.0).unwrap();
        let s = cut_patterns(&m, 8, 8, 6.5, &[(0, 0)]).unwrap();
        assert_eq!(s.count(), 1);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(s.pattern(0)[r * 8 + c], m.get(r, c));
            }
        }
    }

    #[test]
    fn overlapping_windows_correlate() {
        let m = generate_diffuser(5, 128, 128, 4.0).unwrap();
        let a = window(&m, 0, 0, 64);
        let b = window(&m, 1, 0, 64);
        assert!(pearson(&a, &b) > 0.5);
    }

    #[test]
    fn distant_windows_decorrelate() {
        let m = generate_diffuser(7, 256, 256, 3.0).unwrap();
        let a = window(&m, 0, 0, 64);
        let b = window(&m, 100, 0, 64);
        let c = window(&m, 0, 130, 64);
        assert!(pearson(&a, &b).abs() < 0.1);
        assert!(pearson(&a, &c).abs() < 0.1);
    }

    #[test]
    fn out_of_bounds_offset_names_index() {
        let m = generate_diffuser(5, 16, 16, 1.0).unwrap();
        let err = cut_patterns(&m, 8, 8, 1.0, &[(0, 0), (4, 4), (9, 0)]).unwrap_err();
        assert!(matches!(err, Error::OffsetOutOfBounds { index: 2, dx: 9, dy: 0 }));
    }

    #[test]
    fn full_scale_realization_count() {
        let offsets: Vec<(usize, usize)> = (0..4900).map(|i| ((i % 70) * 4, (i / 70) * 4)).collect();
        let m = generate_diffuser(11, 280, 280, 1.0).unwrap();
        let s = cut_patterns(&m, 4, 4, 6.5, &offsets).unwrap();
        assert_eq!(s.count(), 4900);
    }

    #[test]
    fn jittered_offsets_are_distinct_and_in_range() {
        let offs = jittered_grid_offsets((200, 200), (64, 64), 2500, 3).unwrap();
        let mut sorted = offs.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 2500);
        assert!(offs.iter().all(|&(dx, dy)| dx + 64 <= 200 && dy + 64 <= 200));
        assert!(jittered_grid_offsets((70, 70), (64, 64), 100, 3).is_err());
    }

    #[test]
    fn raster_layout() {
        let offs = raster_offsets((20, 20), (8, 8), 5, 4).unwrap();
        assert_eq!(offs, vec![(0, 0), (4, 0), (8, 0), (12, 0), (0, 4)]);
    }

    #[test]
    fn gfps_round_trip() {
        let m = generate_diffuser(3, 32, 32, 2.0).unwrap();
        let s = cut_patterns(&m, 8, 8, 6.5, &[(0, 0), (5, 3), (20, 20)]).unwrap();
        let bytes = encode_stack(&s).unwrap();
        assert_eq!(bytes.len(), 24 + 3 * 64 * 4);
        let back = decode_stack(&bytes).unwrap();
        assert_eq!(back, s);
        assert_eq!(encode_stack(&back).unwrap(), bytes);
    }

    #[test]
    fn gfps_errors_are_distinct() {
        let m = generate_diffuser(3, 16, 16, 1.0).unwrap();
        let s = cut_patterns(&m, 4, 4, 1.0, &[(0, 0)]).unwrap();
        let mut bytes = encode_stack(&s).unwrap();

        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        match decode_stack(&bad).unwrap_err() {
            Error::Format(FormatError::BadMagic { found, .. }) => assert_eq!(found, "XXXX"),
            e => panic!("unexpected {e}"),
        }

        bytes.truncate(bytes.len() - 5);
        match decode_stack(&bytes).unwrap_err() {
            Error::Format(FormatError::Truncated { expected, actual }) => {
                assert_eq!(expected, 24 + 64);
                assert_eq!(actual, 24 + 64 - 5);
            }
            e => panic!("unexpected {e}"),
        }

        let mut huge = encode_stack(&s).unwrap();
        huge[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_stack(&huge).unwrap_err(),
            Error::Format(FormatError::DimensionOverflow { .. })
        ));
    }

    #[test]
    fn stack_rejects_dark_or_negative_patterns() {
        assert!(PatternStack::new(1, 2, 2, 1.0, vec![0.0; 4]).is_err());
        assert!(PatternStack::new(1, 2, 2, 1.0, vec![1.0, -0.1, 0.0, 0.0]).is_err());
        assert!(PatternStack::new(2, 2, 2, 1.0, vec![1.0; 4]).is_err());
    }
}
