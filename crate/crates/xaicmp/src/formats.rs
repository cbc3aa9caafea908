//! On-disk formats: XATT1 attribution maps, XMSK1 binary masks, binary
//! portable graymaps (P5, maxval 255), and agreement-matrix CSV files.
//!
//! The two native formats share a fixed little-endian layout:
//!
//! ```text
//! XATT1: "XATT1\n" | u32-LE height | u32-LE width | h*w f32-LE row-major
//! XMSK1: "XMSK1\n" | u32-LE height | u32-LE width | h*w bytes of 0/1
//! ```
//!
//! A 32x32 map file is therefore exactly 6 + 2*4 + 1024*4 = 4110 bytes.

use std::fs;
use std::path::Path;

use crate::agreement::{AgreementMatrix, Metric};
use crate::attribution::Method;
use crate::error::{Error, Result};
use crate::maskpipe::BinaryMask;
use crate::tensor::Tensor;

pub const XATT_MAGIC: &[u8; 6] = b"XATT1\n";
pub const XMSK_MAGIC: &[u8; 6] = b"XMSK1\n";

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(path.display().to_string(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io(path.display().to_string(), e))
}

fn check_grid(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::Validation("grid dimensions must be positive".into()));
    }
    if height > u32::MAX as usize || width > u32::MAX as usize {
        return Err(Error::Validation(format!(
            "grid dimensions {height}x{width} exceed the u32 header range"
        )));
    }
    if len != height * width {
        return Err(Error::Shape(format!(
            "payload has {len} values for a {height}x{width} grid"
        )));
    }
    Ok(())
}

/// Parse the shared `magic | u32 h | u32 w` header and return
/// `(height, width, payload)`.
fn parse_header<'a>(bytes: &'a [u8], magic: &[u8; 6], what: &str) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 6 || &bytes[..6] != magic {
        let found = &bytes[..bytes.len().min(6)];
        return Err(Error::Format(format!(
            "bad {what} magic: expected \"{}\", found \"{}\"",
            magic.escape_ascii(),
            found.escape_ascii(),
        )));
    }
    if bytes.len() < 14 {
        return Err(Error::Format(format!(
            "truncated {what} file: {} bytes, header needs 14",
            bytes.len()
        )));
    }
    let h = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as u64;
    let w = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as u64;
    let n = h.checked_mul(w).ok_or_else(|| {
        Error::Format(format!("{what} dimensions {h}x{w} overflow"))
    })?;
    if n == 0 {
        return Err(Error::Format(format!("{what} dimensions {h}x{w} are empty")));
    }
    if n > usize::MAX as u64 / 8 {
        return Err(Error::Format(format!("{what} dimensions {h}x{w} overflow")));
    }
    Ok((h as usize, w as usize, &bytes[14..]))
}

/// Write a float grid as an XATT1 file. Values are stored at 32-bit
/// precision; the round trip is bit-exact after a 64→32-bit conversion.
pub fn write_xatt(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    check_grid(height, width, values.len())?;
    let mut buf = Vec::with_capacity(14 + values.len() * 4);
    buf.extend_from_slice(XATT_MAGIC);
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_file(path, &buf)
}

/// Read an XATT1 file back as `(height, width, values)`.
pub fn read_xatt(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = read_file(path)?;
    let (h, w, payload) = parse_header(&bytes, XATT_MAGIC, "attribution map")?;
    let n = h * w;
    if payload.len() != n * 4 {
        return Err(Error::Format(format!(
            "attribution map payload has {} bytes, {h}x{w} needs {}",
            payload.len(),
            n * 4
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok((h, w, values))
}

/// Write a binary mask as an XMSK1 file (one byte per pixel, 0 or 1).
pub fn write_xmsk(path: &Path, mask: &BinaryMask) -> Result<()> {
    let (h, w) = mask.dims();
    check_grid(h, w, mask.data().len())?;
    let mut buf = Vec::with_capacity(14 + h * w);
    buf.extend_from_slice(XMSK_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend(mask.data().iter().map(|&b| b as u8));
    write_file(path, &buf)
}

/// Read an XMSK1 file; the method tag is supplied by the caller (it is
/// carried in the manifest, not the file).
pub fn read_xmsk(path: &Path, method: Method) -> Result<BinaryMask> {
    let bytes = read_file(path)?;
    let (h, w, payload) = parse_header(&bytes, XMSK_MAGIC, "mask")?;
    if payload.len() != h * w {
        return Err(Error::Format(format!(
            "mask payload has {} bytes, {h}x{w} needs {}",
            payload.len(),
            h * w
        )));
    }
    let mut data = Vec::with_capacity(h * w);
    for (i, &b) in payload.iter().enumerate() {
        match b {
            0 => data.push(false),
            1 => data.push(true),
            other => {
                return Err(Error::Format(format!(
                    "mask byte at pixel {i} is {other}, expected 0 or 1"
                )))
            }
        }
    }
    BinaryMask::new(h, w, data, method)
}

/// Write a grayscale image (values in [0, 1]) as a binary portable
/// graymap (P5, maxval 255). Out-of-range values are clamped; quantization
/// rounds half up.
pub fn write_pgm(path: &Path, height: usize, width: usize, values: &[f64]) -> Result<()> {
    check_grid(height, width, values.len())?;
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend(values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    write_file(path, &buf)
}

struct PgmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PgmCursor<'a> {
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn next_number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::Format(format!("graymap header: expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Format(format!("graymap header: {what} out of range")))
    }
}

/// Read a binary portable graymap (P5, maxval 255) as `(height, width,
/// values)` with values `byte / 255` in [0, 1]. Header comments (`#`) are
/// skipped; exactly one whitespace byte separates the maxval from the
/// pixel payload.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = read_file(path)?;
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        let found = &bytes[..bytes.len().min(2)];
        return Err(Error::Format(format!(
            "bad graymap magic: expected \"P5\", found \"{}\"",
            found.escape_ascii()
        )));
    }
    let mut cur = PgmCursor { bytes: &bytes, pos: 2 };
    let width = cur.next_number("width")?;
    let height = cur.next_number("height")?;
    let maxval = cur.next_number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!(
            "graymap maxval {maxval} unsupported, expected 255"
        )));
    }
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(Error::Format(
            "graymap header: missing whitespace before pixel data".into(),
        ));
    }
    cur.pos += 1;
    if height == 0 || width == 0 {
        return Err(Error::Format("graymap dimensions are empty".into()));
    }
    let payload = &bytes[cur.pos..];
    if payload.len() != height * width {
        return Err(Error::Format(format!(
            "graymap payload has {} bytes, {height}x{width} needs {}",
            payload.len(),
            height * width
        )));
    }
    let values = payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok((height, width, values))
}

/// Load an image from either supported input format (dispatch on magic):
/// a P5 graymap or a native XATT1 map.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = read_file(path)?;
    let (h, w, values) = if bytes.starts_with(b"P5") {
        read_pgm(path)?
    } else {
        read_xatt(path)?
    };
    Tensor::new(vec![h, w], values)
}

/// Write an agreement matrix as CSV: header `method,<name1>,...,<nameK>`,
/// one row per method, values with exactly six decimal places, excluded
/// entries as `NA`, LF line endings.
pub fn write_matrix_csv(matrix: &AgreementMatrix, path: &Path) -> Result<()> {
    write_file(path, matrix_csv_string(matrix).as_bytes())
}

/// The exact CSV text [`write_matrix_csv`] emits.
pub fn matrix_csv_string(matrix: &AgreementMatrix) -> String {
    let k = matrix.k();
    let mut out = String::from("method");
    for m in &matrix.methods {
        out.push(',');
        out.push_str(m.id());
    }
    out.push('\n');
    for i in 0..k {
        out.push_str(matrix.methods[i].id());
        for j in 0..k {
            out.push(',');
            match matrix.value(i, j) {
                Some(v) => out.push_str(&format!("{v:.6}")),
                None => out.push_str("NA"),
            }
        }
        out.push('\n');
    }
    out
}

/// Re-parse a matrix CSV produced by [`write_matrix_csv`]. Values come
/// back at printed precision (± 5e-7); the metric tag is supplied by the
/// caller (it is carried in the file name, not the file).
pub fn read_matrix_csv(path: &Path, metric: Metric) -> Result<AgreementMatrix> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes)
        .map_err(|_| Error::Format(format!("{}: matrix CSV is not UTF-8", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("matrix CSV is empty".into()))?;
    let mut fields = header.split(',');
    if fields.next() != Some("method") {
        return Err(Error::Format(format!(
            "matrix CSV header must start with \"method\", got {header:?}"
        )));
    }
    let methods: Vec<Method> = fields.map(Method::from_id).collect::<Result<_>>()?;
    let k = methods.len();
    if k == 0 {
        return Err(Error::Format("matrix CSV header lists no methods".into()));
    }
    let mut entries = Vec::with_capacity(k * k);
    for (i, line) in lines.enumerate() {
        if i >= k {
            return Err(Error::Format(format!("matrix CSV has more than {k} rows")));
        }
        let mut fields = line.split(',');
        let label = fields.next().unwrap_or("");
        if label != methods[i].id() {
            return Err(Error::Format(format!(
                "matrix CSV row {i} labeled {label:?}, expected {:?}",
                methods[i].id()
            )));
        }
        let mut row = 0usize;
        for field in fields {
            row += 1;
            if field == "NA" {
                entries.push(None);
            } else {
                let v: f64 = field.parse().map_err(|_| {
                    Error::Format(format!("matrix CSV row {i}: bad value {field:?}"))
                })?;
                entries.push(Some(v));
            }
        }
        if row != k {
            return Err(Error::Format(format!(
                "matrix CSV row {i} has {row} values, expected {k}"
            )));
        }
    }
    if entries.len() != k * k {
        return Err(Error::Format(format!(
            "matrix CSV has {} rows, expected {k}",
            entries.len() / k
        )));
    }
    AgreementMatrix::from_entries(metric, methods, entries)
}
