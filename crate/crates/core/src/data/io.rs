//! Netpbm (P5/P6), raw `f32` tensors, label maps, and the dataset manifest.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::tensor::{Shape, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(offset: usize, msg: impl Into<String>) -> DataError {
    DataError::Parse {
        offset,
        msg: msg.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    /// 8-bit grayscale netpbm.
    P5,
    /// 8-bit RGB netpbm.
    P6,
    /// `MMT0` header then little-endian `f32` payload.
    Raw,
}

impl ImageFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "pgm" => Some(ImageFormat::P5),
            "ppm" => Some(ImageFormat::P6),
            "mmt" => Some(ImageFormat::Raw),
            _ => None,
        }
    }
}

const RAW_MAGIC: &[u8; 4] = b"MMT0";

/// Round-half-up quantization of `[0, 1]` to a byte.
fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn check_single(t: &Tensor<f32>, op: &str) -> Result<(), DataError> {
    if t.shape().n() != 1 {
        return Err(DataError::Invalid(format!("{op}: expected one image, got batch of {}", t.shape().n())));
    }
    Ok(())
}

/// Netpbm bytes for a `(1, 1, h, w)` or `(1, 3, h, w)` image in `[0, 1]`.
pub fn encode_pnm(image: &Tensor<f32>) -> Result<Vec<u8>, DataError> {
    check_single(image, "pnm")?;
    let s = image.shape();
    let magic = match s.c() {
        1 => "P5",
        3 => "P6",
        c => return Err(DataError::Invalid(format!("pnm: {c} channels, expected 1 or 3"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", s.w(), s.h()).into_bytes();
    let plane = s.plane();
    let d = image.data();
    out.reserve(plane * s.c());
    for p in 0..plane {
        for ch in 0..s.c() {
            out.push(to_byte(d[ch * plane + p]));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, DataError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(match self.bytes.get(self.pos) {
                Some(&b) => parse_err(start, format!("expected {what}, found byte 0x{b:02x}")),
                None => parse_err(start, format!("expected {what}, found end of file")),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| parse_err(start, format!("{what} does not fit in usize")))
    }
}

/// Parses P5/P6 bytes into a `(1, c, h, w)` tensor with values `b / 255`.
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor<f32>, DataError> {
    let c = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(parse_err(0, "expected magic P5 or P6")),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    cur.skip_space_and_comments();
    let max_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(parse_err(max_at, format!("maxval {maxval} unsupported, expected 255")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(parse_err(cur.pos, "expected one whitespace byte before pixel data")),
    }
    let need = c * h * w;
    let body = &bytes[cur.pos..];
    if body.len() < need {
        return Err(parse_err(
            bytes.len(),
            format!("pixel data truncated: {} of {need} bytes", body.len()),
        ));
    }
    if body.len() > need {
        return Err(parse_err(cur.pos + need, "trailing bytes after pixel data"));
    }
    let plane = h * w;
    let mut data = vec![0f32; need];
    for p in 0..plane {
        for ch in 0..c {
            data[ch * plane + p] = body[p * c + ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(Shape::new(1, c, h, w), data).expect("sized"))
}

/// `MMT0`, `u32` c, h, w, then the values, all little-endian.
pub fn encode_raw(image: &Tensor<f32>) -> Result<Vec<u8>, DataError> {
    check_single(image, "raw")?;
    let s = image.shape();
    let mut out = Vec::with_capacity(16 + 4 * image.len());
    out.extend_from_slice(RAW_MAGIC);
    for d in [s.c(), s.h(), s.w()] {
        let d = u32::try_from(d).map_err(|_| DataError::Invalid(format!("raw: dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw(bytes: &[u8]) -> Result<Tensor<f32>, DataError> {
    if bytes.get(..4) != Some(RAW_MAGIC.as_slice()) {
        return Err(parse_err(0, "expected magic MMT0"));
    }
    let dim = |i: usize| -> Result<usize, DataError> {
        let at = 4 + 4 * i;
        let b = bytes
            .get(at..at + 4)
            .ok_or_else(|| parse_err(bytes.len(), "header truncated"))?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    };
    let (c, h, w) = (dim(0)?, dim(1)?, dim(2)?);
    let need = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| parse_err(4, "dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(parse_err(
            16 + body.len().min(need),
            format!("payload has {} bytes, expected {need}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok(Tensor::from_vec(Shape::new(1, c, h, w), data).expect("sized"))
}

pub fn write_image(path: &Path, image: &Tensor<f32>, format: ImageFormat) -> Result<(), DataError> {
    let bytes = match format {
        ImageFormat::P5 | ImageFormat::P6 => {
            let want = if format == ImageFormat::P5 { 1 } else { 3 };
            if image.shape().c() != want {
                return Err(DataError::Invalid(format!(
                    "{format:?} needs {want} channels, image has {}",
                    image.shape().c()
                )));
            }
            encode_pnm(image)?
        }
        ImageFormat::Raw => encode_raw(image)?,
    };
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads any supported format, chosen by the file's magic bytes.
pub fn read_image(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.starts_with(RAW_MAGIC) {
        decode_raw(&bytes)
    } else {
        decode_pnm(&bytes)
    }
}

/// P5 bytes whose pixel values are class ids, not intensities.
pub fn encode_label_pgm(labels: &[u8], h: usize, w: usize) -> Result<Vec<u8>, DataError> {
    if labels.len() != h * w {
        return Err(DataError::Invalid(format!("{} labels for a {h}x{w} map", labels.len())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(labels);
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &[u8], h: usize, w: usize) -> Result<(), DataError> {
    fs::write(path, encode_label_pgm(labels, h, w)?).map_err(io_err(path))
}

/// Reads a label P5 back into `(h, w, ids)`.
pub fn read_labels(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let t = decode_pnm(&bytes)?;
    if t.shape().c() != 1 {
        return Err(parse_err(0, "label maps must be P5"));
    }
    let s = t.shape();
    let ids = t.data().iter().map(|&v| (v * 255.0).round() as u8).collect();
    Ok((s.h(), s.w(), ids))
}

/// One manifest line: a scene or sample, its split, and its files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: u64,
    pub split: String,
    /// `(modality, path relative to the manifest)`.
    pub files: Vec<(String, String)>,
}

impl fmt::Display for ManifestEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}", self.id, self.split)?;
        for (m, p) in &self.files {
            write!(f, "\t{m}={p}")?;
        }
        Ok(())
    }
}

const MANIFEST_HEADER: &str = "# mmnets manifest v1: id split modality=path...";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<(), DataError> {
    let mut out = Vec::new();
    writeln!(out, "{MANIFEST_HEADER}").expect("vec write");
    for e in entries {
        writeln!(out, "{e}").expect("vec write");
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut entries = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split('\t');
        let id = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(start, "expected numeric id"))?;
        let split = fields
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(start, "expected split name"))?
            .to_string();
        let files = fields
            .map(|f| {
                f.split_once('=')
                    .map(|(m, p)| (m.to_string(), p.to_string()))
                    .ok_or_else(|| parse_err(start, format!("expected modality=path, got {f:?}")))
            })
            .collect::<Result<_, _>>()?;
        entries.push(ManifestEntry { id, split, files });
    }
    Ok(entries)
}
