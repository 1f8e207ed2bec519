//! Binary PPM (P6) output for cluster maps.

use std::io::Write;

use crate::error::{CliError, Result};

/// 32 fixed colors, spaced by the golden angle in hue.
pub fn palette() -> [[u8; 3]; 32] {
    let mut out = [[0u8; 3]; 32];
    for (i, c) in out.iter_mut().enumerate() {
        let h = (i as f64 * 137.507_764) % 360.0;
        let (s, v) = if i % 2 == 0 { (0.75, 0.95) } else { (0.55, 0.75) };
        *c = hsv(h, s, v);
    }
    out
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|t| ((t + m) * 255.0).round() as u8)
}

/// Paints a `rows × cols` grid of cluster ids, each cell `block` pixels square.
pub fn cluster_map(ids: &[usize], rows: usize, cols: usize, block: usize) -> Result<Vec<u8>> {
    if ids.len() != rows * cols || block == 0 {
        return Err(CliError::Usage(format!(
            "{} ids for a {rows}×{cols} grid",
            ids.len()
        )));
    }
    let pal = palette();
    let (w, h) = (cols * block, rows * block);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            let id = ids[(y / block) * cols + x / block];
            out.extend_from_slice(&pal[id % pal.len()]);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

/// Parses a P6 header and returns `(width, height, pixels)`.
pub fn parse_ppm(bytes: &[u8]) -> Result<(usize, usize, &[u8])> {
    let bad = || CliError::Usage("not a binary PPM".into());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
    }
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let pixels = bytes.get(pos + 1..).ok_or_else(bad)?;
    if pixels.len() != w * h * 3 {
        return Err(bad());
    }
    Ok((w, h, pixels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_distinct() {
        let p = palette();
        for i in 0..32 {
            for j in 0..i {
                assert_ne!(p[i], p[j]);
            }
        }
    }

    #[test]
    fn round_trip() {
        let bytes = cluster_map(&[0, 1, 1, 0], 2, 2, 3).unwrap();
        let (w, h, px) = parse_ppm(&bytes).unwrap();
        assert_eq!((w, h), (6, 6));
        assert_eq!(&px[..3], &palette()[0]);
        assert_eq!(&px[9..12], &palette()[1]);
    }
}
