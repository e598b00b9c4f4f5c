//! Reorder phase-locked single-pixel records into one measurement vector per
//! frame. Frame `f` collects, for every realization, the sum over cycles of
//! the sample at in-cycle position `f`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::acquisition::{decode_records_prefix, AcquisitionRecord, GfmsHeader};
use crate::error::{Error, FormatError, Result};

pub const FRAME_TABLE_TAG: &[u8; 4] = b"FRMT";

#[derive(Clone, Debug, PartialEq)]
pub struct FrameMeasurements {
    pub frame_index: usize,
    /// One value per realization, in realization order.
    pub values: Vec<f64>,
}

pub fn demultiplex(records: &[AcquisitionRecord]) -> Result<Vec<FrameMeasurements>> {
    let first = records.first().ok_or_else(|| Error::invalid("no records to demultiplex"))?;
    let (spc, cycles) = (first.samples_per_cycle, first.cycles);
    for (i, r) in records.iter().enumerate() {
        if r.realization_index != i {
            return Err(Error::MissingRealization(i));
        }
        if r.samples_per_cycle != spc || r.cycles != cycles || r.samples.len() != spc * cycles {
            return Err(Error::InconsistentRecords(format!(
                "record {i}: {} samples as {}x{}, expected {}x{}",
                r.samples.len(),
                r.cycles,
                r.samples_per_cycle,
                cycles,
                spc
            )));
        }
    }
    let mut frames: Vec<FrameMeasurements> =
        (0..spc).map(|f| FrameMeasurements { frame_index: f, values: vec![0.0; records.len()] }).collect();
    for (r, rec) in records.iter().enumerate() {
        for c in 0..cycles {
            for (frame, &v) in frames.iter_mut().zip(rec.cycle(c)) {
                frame.values[r] += v;
            }
        }
    }
    Ok(frames)
}

/// Start time of a frame within the cycle.
pub fn frame_time(frame_index: usize, samples_per_cycle: usize, sample_rate_hz: f64) -> Result<f64> {
    if frame_index >= samples_per_cycle {
        return Err(Error::FrameOutOfRange { index: frame_index, frames: samples_per_cycle });
    }
    Ok(frame_index as f64 / sample_rate_hz)
}

/// CSV export of one frame: `realization,counts`.
pub fn frame_csv(frame: &FrameMeasurements, mut w: impl Write) -> Result<()> {
    writeln!(w, "realization,counts")?;
    for (r, v) in frame.values.iter().enumerate() {
        writeln!(w, "{r},{v}")?;
    }
    Ok(())
}

/// GFMS records followed by a frame table: tag `FRMT`, `u32` frame count,
/// one `u64` absolute byte offset per frame, then the frame vectors
/// (`N` little-endian `f64` each) in frame order.
pub fn encode_with_frames(
    records: &[AcquisitionRecord],
    sample_rate_hz: f64,
    frames: &[FrameMeasurements],
) -> Result<Vec<u8>> {
    let mut out = crate::acquisition::encode_records(records, sample_rate_hz)?;
    let n = records.len();
    if frames.iter().any(|f| f.values.len() != n) {
        return Err(Error::DimensionMismatch("frame length differs from realization count".into()));
    }
    let table_start = out.len() + 4 + 4;
    let data_start = table_start + frames.len() * 8;
    out.extend_from_slice(FRAME_TABLE_TAG);
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    for f in 0..frames.len() {
        out.extend_from_slice(&((data_start + f * n * 8) as u64).to_le_bytes());
    }
    for frame in frames {
        for v in &frame.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decode a GFMS container with its frame table. Files without the
/// extension are demultiplexed on the fly.
pub fn decode_frames(bytes: &[u8]) -> Result<(GfmsHeader, Vec<AcquisitionRecord>, Vec<FrameMeasurements>)> {
    let (header, records, used) = decode_records_prefix(bytes)?;
    let rest = &bytes[used..];
    if rest.is_empty() {
        let frames = demultiplex(&records)?;
        return Ok((header, records, frames));
    }
    let malformed = |reason: String| Error::from(FormatError::Malformed { container: "GFMS frame table", reason });
    if rest.len() < 8 || &rest[..4] != FRAME_TABLE_TAG {
        return Err(malformed("unknown trailing chunk".into()));
    }
    let count = u32::from_le_bytes(rest[4..8].try_into().unwrap()) as usize;
    let n = header.realizations;
    let table_end = 8 + count * 8;
    if rest.len() < table_end {
        return Err(FormatError::Truncated { expected: (used + table_end) as u64, actual: bytes.len() as u64 }.into());
    }
    let mut frames = Vec::with_capacity(count);
    for f in 0..count {
        let off = u64::from_le_bytes(rest[8 + f * 8..16 + f * 8].try_into().unwrap()) as usize;
        let end = off.checked_add(n * 8).ok_or_else(|| malformed(format!("frame {f} offset overflows")))?;
        if off < used + table_end || end > bytes.len() {
            return Err(malformed(format!("frame {f} offset {off} outside payload")));
        }
        let values = bytes[off..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        frames.push(FrameMeasurements { frame_index: f, values });
    }
    Ok((header, records, frames))
}

pub fn save_with_frames(
    records: &[AcquisitionRecord],
    sample_rate_hz: f64,
    frames: &[FrameMeasurements],
    path: impl AsRef<Path>,
) -> Result<()> {
    let bytes = encode_with_frames(records, sample_rate_hz, frames)?;
    fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}
