//! Image files.
//!
//! The pipeline reads and writes the lossless `.img` form: the magic
//! `APIMAGE1`, a little-endian `u32` rank, that many `u64` dimensions and
//! then the values as little-endian `f64`. Binary PGM (one channel) and PPM
//! (three channels) are written next to them for viewing, mapping
//! `[-1, 1]` linearly onto `0..=255`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use antipure_core::{Error, Tensor};

pub const RAW_MAGIC: &[u8; 8] = b"APIMAGE1";
pub const RAW_EXT: &str = "img";

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

pub fn encode_raw(img: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * img.shape().len() + 8 * img.len());
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(img.shape().len() as u32).to_le_bytes());
    for &d in img.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raw(bytes: &[u8]) -> std::result::Result<Tensor, Error> {
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> std::result::Result<&[u8], Error> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse_err(pos, format!("truncated {what}")))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(8, "magic")? != RAW_MAGIC {
        return Err(parse_err(0, "bad magic"));
    }
    let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
    if rank == 0 || rank > 8 {
        return Err(parse_err(8, format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(8, "dimension")?.try_into().unwrap()) as usize);
    }
    let header = 12 + 8 * rank;
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n > 0)
        .ok_or_else(|| parse_err(12, "degenerate or overflowing shape"))?;
    let mut data = Vec::with_capacity(len.min(bytes.len() / 8));
    for i in 0..len {
        let v = f64::from_le_bytes(take(8, "data")?.try_into().unwrap());
        if !v.is_finite() {
            return Err(parse_err(header + 8 * i, "non-finite value"));
        }
        data.push(v);
    }
    if pos != bytes.len() {
        return Err(parse_err(pos, "trailing bytes"));
    }
    Tensor::new(shape, data).map_err(|e| parse_err(12, e.to_string()))
}

pub fn to_byte(x: f64) -> u8 {
    ((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

pub fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Binary PGM for one channel, PPM for three (channels interleaved).
pub fn encode_pnm(img: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = img.shape() else {
        bail!("expected a [C, H, W] image, got shape {:?}", img.shape());
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => bail!("PNM needs 1 or 3 channels, got {c}"),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out.push(to_byte(d[(ch * h + y) * w + x]));
            }
        }
    }
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Tensor, Error> {
    let mut pos = 0usize;
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(parse_err(0, "expected P5 or P6 magic")),
    };
    pos += 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // Whitespace and `#` comments separate header fields.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(pos, "expected a header number"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| parse_err(start, "header number out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(parse_err(
            pos,
            format!("only maxval 255 is supported, got {maxval}"),
        ));
    }
    if w == 0 || h == 0 {
        return Err(parse_err(pos, "empty image"));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(parse_err(pos, "expected whitespace after header"));
    }
    pos += 1;
    let n = w * h * channels;
    if bytes.len() - pos != n {
        return Err(parse_err(
            pos,
            format!("expected {n} pixel bytes, found {}", bytes.len() - pos),
        ));
    }
    let px = &bytes[pos..];
    let mut data = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..channels {
                data[(ch * h + y) * w + x] = from_byte(px[(y * w + x) * channels + ch]);
            }
        }
    }
    Ok(Tensor::new(vec![channels, h, w], data).expect("shape matches data"))
}

fn with_path<T>(path: &Path, r: std::result::Result<T, Error>) -> Result<T> {
    r.with_context(|| format!("parsing {}", path.display()))
}

/// Reads `.img`, `.pgm` or `.ppm` by extension.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some(RAW_EXT) => with_path(path, decode_raw(&bytes)),
        Some("pgm" | "ppm") => with_path(path, decode_pnm(&bytes)),
        _ => bail!("{}: unknown image extension", path.display()),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Writes `NNNN.img` plus a preview for every image in `dir`.
pub fn write_set(dir: &Path, images: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (i, img) in images.iter().enumerate() {
        write(&dir.join(format!("{i:04}.{RAW_EXT}")), &encode_raw(img))?;
        if let Ok(pnm) = encode_pnm(img) {
            let ext = if img.shape()[0] == 1 { "pgm" } else { "ppm" };
            write(&dir.join(format!("{i:04}.{ext}")), &pnm)?;
        }
    }
    Ok(())
}

/// Reads every `.img` file in `dir` in name order. Directories without
/// lossless images fall back to their PGM/PPM files.
pub fn read_set(dir: &Path) -> Result<Vec<Tensor>> {
    let mut raw: Vec<PathBuf> = Vec::new();
    let mut pnm: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        match p.extension().and_then(|e| e.to_str()) {
            Some(RAW_EXT) => raw.push(p),
            Some("pgm" | "ppm") => pnm.push(p),
            _ => {}
        }
    }
    let mut paths = if raw.is_empty() { pnm } else { raw };
    if paths.is_empty() {
        bail!("{}: no images found", dir.display());
    }
    paths.sort();
    paths.iter().map(|p| read_image(p)).collect()
}
