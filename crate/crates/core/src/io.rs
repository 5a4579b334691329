//! Disparity file formats.
//!
//! - 16-bit binary PGM (`P5`, maxval 65535, big-endian samples) with the
//!   quantisation scale declared in a `# scale=N` comment line.
//! - PFM (`Pf` grayscale / `PF` three-channel), little-endian f32 samples,
//!   rows stored bottom-to-top per convention.
//! - The CityScapes 16-bit disparity convention: `p > 0` encodes
//!   `d = (p - 1) / 256`, `p == 0` marks an invalid pixel.
//! - Dataset manifests: plain newline-separated path lists.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{DisparityImage, NormalMap};

// ── PGM ─────────────────────────────────────────────────────────────

/// Raw 16-bit PGM contents before any scale is applied.
#[derive(Clone, Debug)]
pub struct Pgm16 {
    pub height: usize,
    pub width: usize,
    pub raw: Vec<u16>,
    /// Value of a `# scale=N` header comment, when present.
    pub scale: Option<f64>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::parse(self.pos, message)
    }

    /// Skip whitespace and `#` comments, collecting comment text.
    fn skip_separators(&mut self, comments: &mut Vec<String>) {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.bytes.len() && self.bytes[self.pos] == b'#' {
                let start = self.pos + 1;
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                comments.push(String::from_utf8_lossy(&self.bytes[start..self.pos]).trim().to_string());
            } else {
                return;
            }
        }
    }

    fn token(&mut self, comments: &mut Vec<String>) -> Result<&'a str> {
        self.skip_separators(comments);
        let start = self.pos;
        while self.pos < self.bytes.len()
            && !self.bytes[self.pos].is_ascii_whitespace()
            && self.bytes[self.pos] != b'#'
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start, "unexpected end of header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| Error::parse(start, "non-ascii header token"))
    }

    fn parse_usize(&mut self, what: &str, comments: &mut Vec<String>) -> Result<usize> {
        let at = self.pos;
        let tok = self.token(comments)?;
        tok.parse().map_err(|_| Error::parse(at, format!("invalid {}: {:?}", what, tok)))
    }
}

/// Quantise to `round(value * scale)` and write as 16-bit binary PGM. The
/// scale and any extra comment lines go into the header.
pub fn write_pgm16(
    path: &Path,
    d: &DisparityImage,
    scale: f64,
    comments: &[String],
) -> Result<()> {
    if !scale.is_finite() || scale <= 0.0 {
        return Err(Error::contract("pgm scale must be positive and finite"));
    }
    let mut out = Vec::with_capacity(d.values().len() * 2 + 64);
    out.extend_from_slice(b"P5\n");
    out.extend_from_slice(format!("# scale={}\n", scale).as_bytes());
    for c in comments {
        out.extend_from_slice(format!("# {}\n", c).as_bytes());
    }
    out.extend_from_slice(format!("{} {}\n65535\n", d.width(), d.height()).as_bytes());
    for &v in d.values() {
        let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a binary 16-bit PGM without applying any scale.
pub fn read_pgm16_raw(path: &Path) -> Result<Pgm16> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    let mut comments = Vec::new();

    let magic = cur.token(&mut comments)?;
    if magic != "P5" {
        return Err(cur.err(format!("expected P5 magic, got {:?}", magic)));
    }
    let width = cur.parse_usize("width", &mut comments)?;
    let height = cur.parse_usize("height", &mut comments)?;
    let maxval = cur.parse_usize("maxval", &mut comments)?;
    if maxval != 65535 {
        return Err(cur.err(format!("expected 16-bit maxval 65535, got {}", maxval)));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected single whitespace after maxval"));
    }
    cur.pos += 1;

    let need = width * height * 2;
    if bytes.len() - cur.pos < need {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated pixel data: need {} bytes, have {}", need, bytes.len() - cur.pos),
        ));
    }
    let mut raw = Vec::with_capacity(width * height);
    for k in 0..width * height {
        let b = cur.pos + 2 * k;
        raw.push(u16::from_be_bytes([bytes[b], bytes[b + 1]]));
    }
    let scale = comments.iter().find_map(|c| {
        c.strip_prefix("scale=").and_then(|s| s.trim().parse::<f64>().ok())
    });
    Ok(Pgm16 { height, width, raw, scale })
}

/// Read a PGM and divide by its declared scale (1.0 when absent). Returns
/// the image and the scale actually applied.
pub fn read_pgm16(path: &Path) -> Result<(DisparityImage, f64)> {
    let pgm = read_pgm16_raw(path)?;
    let scale = pgm.scale.unwrap_or(1.0);
    let values = pgm.raw.iter().map(|&p| p as f64 / scale).collect();
    Ok((DisparityImage::from_values(pgm.height, pgm.width, values)?, scale))
}

/// CityScapes precomputed-disparity convention.
pub fn decode_cityscapes_disparity(raw: &[u16], height: usize, width: usize) -> Result<DisparityImage> {
    if raw.len() != height * width {
        return Err(Error::dimension("cityscapes raw buffer does not match dimensions"));
    }
    let mut values = Vec::with_capacity(raw.len());
    let mut valid = Vec::with_capacity(raw.len());
    for &p in raw {
        if p == 0 {
            values.push(0.0);
            valid.push(false);
        } else {
            values.push((p - 1) as f64 / 256.0);
            valid.push(true);
        }
    }
    DisparityImage::new(height, width, values, valid)
}

// ── PFM ─────────────────────────────────────────────────────────────

/// Decoded PFM image, planar channel layout, rows top-to-bottom.
#[derive(Clone, Debug)]
pub struct PfmImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Write planar CHW data as PFM (f32 little-endian, bottom-up rows,
/// interleaved samples for `PF`).
pub fn write_pfm(path: &Path, height: usize, width: usize, channels: usize, data: &[f64]) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::contract("pfm supports 1 or 3 channels"));
    }
    if data.len() != channels * height * width {
        return Err(Error::dimension("pfm buffer does not match dimensions"));
    }
    let magic = if channels == 1 { "Pf" } else { "PF" };
    let mut out = Vec::with_capacity(data.len() * 4 + 32);
    out.extend_from_slice(format!("{}\n{} {}\n-1.0\n", magic, width, height).as_bytes());
    let plane = height * width;
    for i in (0..height).rev() {
        for j in 0..width {
            for c in 0..channels {
                let v = data[c * plane + i * width + j] as f32;
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<PfmImage> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    let mut comments = Vec::new();

    let magic = cur.token(&mut comments)?;
    let channels = match magic {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(cur.err(format!("expected Pf/PF magic, got {:?}", other))),
    };
    let width = cur.parse_usize("width", &mut comments)?;
    let height = cur.parse_usize("height", &mut comments)?;
    let at = cur.pos;
    let scale: f64 = cur
        .token(&mut comments)?
        .parse()
        .map_err(|_| Error::parse(at, "invalid pfm scale"))?;
    if scale == 0.0 {
        return Err(Error::parse(at, "pfm scale must be non-zero"));
    }
    let little_endian = scale < 0.0;
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("expected single whitespace after scale"));
    }
    cur.pos += 1;

    let need = channels * width * height * 4;
    if bytes.len() - cur.pos < need {
        return Err(Error::parse(
            bytes.len(),
            format!("truncated pixel data: need {} bytes, have {}", need, bytes.len() - cur.pos),
        ));
    }
    let plane = height * width;
    let mut data = vec![0.0; channels * plane];
    let mut pos = cur.pos;
    for i in (0..height).rev() {
        for j in 0..width {
            for c in 0..channels {
                let raw = [bytes[pos], bytes[pos + 1], bytes[pos + 2], bytes[pos + 3]];
                let v = if little_endian {
                    f32::from_le_bytes(raw)
                } else {
                    f32::from_be_bytes(raw)
                };
                data[c * plane + i * width + j] = v as f64;
                pos += 4;
            }
        }
    }
    Ok(PfmImage { height, width, channels, data })
}

pub fn write_pfm_disparity(path: &Path, d: &DisparityImage) -> Result<()> {
    write_pfm(path, d.height(), d.width(), 1, d.values())
}

pub fn read_pfm_disparity(path: &Path) -> Result<DisparityImage> {
    let pfm = read_pfm(path)?;
    if pfm.channels != 1 {
        return Err(Error::contract("expected single-channel pfm disparity"));
    }
    DisparityImage::from_values(pfm.height, pfm.width, pfm.data)
}

pub fn write_pfm_normals(path: &Path, n: &NormalMap) -> Result<()> {
    write_pfm(path, n.height(), n.width(), 3, n.components())
}

// ── Manifests ───────────────────────────────────────────────────────

/// Plain list of file paths, one per line; `#` lines are comments.
pub fn write_manifest(path: &Path, entries: &[PathBuf], comments: &[String]) -> Result<()> {
    let mut out = String::new();
    for c in comments {
        out.push_str(&format!("# {}\n", c));
    }
    for e in entries {
        out.push_str(&format!("{}\n", e.display()));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(PathBuf::from)
        .collect())
}

/// Load a disparity image by extension: `.pfm` or `.pgm`.
pub fn read_disparity_auto(path: &Path, cityscapes: bool) -> Result<DisparityImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => read_pfm_disparity(path),
        Some("pgm") => {
            if cityscapes {
                let pgm = read_pgm16_raw(path)?;
                decode_cityscapes_disparity(&pgm.raw, pgm.height, pgm.width)
            } else {
                read_pgm16(path).map(|(d, _)| d)
            }
        }
        _ => Err(Error::contract(format!(
            "unsupported disparity format: {}",
            path.display()
        ))),
    }
}
