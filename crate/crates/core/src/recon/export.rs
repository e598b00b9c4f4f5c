//! Frame export: 16-bit binary PGM (min-max normalized per frame) and the
//! lossless GFIM container (`GFIM`, `u32` height, `u32` width, `f32` data,
//! little-endian).

use std::io::Write;

use crate::error::{FormatError, Result};
use crate::image::Image;

pub const GFIM_MAGIC: &[u8; 4] = b"GFIM";

pub fn write_pgm(image: &Image, mut w: impl Write) -> Result<()> {
    write!(w, "P5\n{} {}\n65535\n", image.width, image.height)?;
    let norm = image.normalized();
    let mut buf = Vec::with_capacity(norm.data.len() * 2);
    for v in &norm.data {
        let q = (v * 65535.0).round().clamp(0.0, 65535.0) as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn encode_gfim(image: &Image) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + image.data.len() * 4);
    out.extend_from_slice(GFIM_MAGIC);
    out.extend_from_slice(&(image.height as u32).to_le_bytes());
    out.extend_from_slice(&(image.width as u32).to_le_bytes());
    for &v in &image.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_gfim(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 12 {
        return Err(FormatError::Truncated { expected: 12, actual: bytes.len() as u64 }.into());
    }
    if &bytes[..4] != GFIM_MAGIC {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(GFIM_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        }.into());
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = h.checked_mul(w).and_then(|n| n.checked_mul(4)).ok_or(FormatError::DimensionOverflow {
        dims: vec![h as u64, w as u64],
    })?;
    let expected = 12 + n as u64;
    if (bytes.len() as u64) < expected {
        return Err(FormatError::Truncated { expected, actual: bytes.len() as u64 }.into());
    }
    if bytes.len() as u64 > expected {
        return Err(FormatError::Malformed { container: "GFIM", reason: "trailing bytes".into() }.into());
    }
    let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Image::from_vec(h, w, data)
}

/// CSV export: one row per image row.
pub fn write_image_csv(image: &Image, mut w: impl Write) -> Result<()> {
    for row in image.data.chunks_exact(image.width) {
        let line: Vec<String> = row.iter().map(|v| format!("{}", *v as f32)).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let img = Image::from_vec(1, 3, vec![2.0, 4.0, 3.0]).unwrap();
        let mut out = Vec::new();
        write_pgm(&img, &mut out).unwrap();
        let header = b"P5\n3 1\n65535\n";
        assert_eq!(&out[..header.len()], header);
        assert_eq!(&out[header.len()..], &[0, 0, 255, 255, 0x80, 0x00]);
    }

    #[test]
    fn gfim_round_trip() {
        let img = Image::from_vec(2, 2, vec![0.5, -1.25, 3.0, 1e-3]).unwrap();
        let bytes = encode_gfim(&img);
        assert_eq!(bytes.len(), 12 + 16);
        let back = decode_gfim(&bytes).unwrap();
        assert_eq!(back.data, img.data.iter().map(|&v| v as f32 as f64).collect::<Vec<_>>());
        assert!(decode_gfim(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_gfim(&bad).is_err());
    }
}
