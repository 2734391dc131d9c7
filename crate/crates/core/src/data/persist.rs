//! Binary and text persistence: gradient captures, parameter sets, CSV
//! tables and PGM images.
//!
//! Binary layouts are little-endian throughout.
//!
//! Capture (`GLCAP`): magic, version u16, client id u32, round u32, regime
//! tag u8, layer count u16, then per layer rank u8, extents u32 each and the
//! f64 payload; then a metadata trailer of count u8 and (key u8, f64) pairs.
//!
//! Parameters (`GLPAR`): magic, version u16, tensor count u16, then per
//! tensor a u16 name length, UTF-8 name, rank u8, extents u32 each and the
//! f64 payload.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fedsim::{CaptureMetadata, GradientCapture, RegimeKind};
use crate::models::{NamedTensor, ParamSet};
use crate::tensor::Tensor;

const CAPTURE_MAGIC: &[u8; 5] = b"GLCAP";
const PARAMS_MAGIC: &[u8; 5] = b"GLPAR";
const VERSION: u16 = 1;

const META_LEARNING_RATE: u8 = 1;
const META_CLIP_NORM: u8 = 2;
const META_NOISE_MULTIPLIER: u8 = 3;
const META_KAPPA: u8 = 4;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.pos, format!("truncated {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn header(&mut self, magic: &[u8; 5]) -> Result<()> {
        if self.take(5, "magic")? != magic {
            return Err(Error::format(0, format!("bad magic, expected {}", String::from_utf8_lossy(magic))));
        }
        let v = self.u16("version")?;
        if v != VERSION {
            return Err(Error::format(5, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let at = self.pos;
        let rank = self.u8("rank")? as usize;
        if rank == 0 {
            return Err(Error::format(at, "zero rank"));
        }
        let shape = (0..rank).map(|_| self.u32("extent").map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        if shape.contains(&0) {
            return Err(Error::format(at, "zero extent"));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.f64("payload")).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.pos, "trailing bytes"));
        }
        Ok(())
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::contract("tensor rank above 255"))?;
    out.push(rank);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::contract("tensor extent above u32"))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode_capture(c: &GradientCapture) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CAPTURE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&c.client_id().to_le_bytes());
    out.extend_from_slice(&c.round().to_le_bytes());
    out.push(c.regime() as u8);
    let count = u16::try_from(c.layers().len()).map_err(|_| Error::contract("more than 65535 layers"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in c.layers() {
        put_tensor(&mut out, t)?;
    }
    let m = c.metadata();
    let meta: Vec<(u8, f64)> =
        [(META_LEARNING_RATE, Some(m.learning_rate)), (META_CLIP_NORM, m.clip_norm), (META_NOISE_MULTIPLIER, m.noise_multiplier), (META_KAPPA, m.kappa)]
            .into_iter()
            .filter_map(|(k, v)| v.map(|v| (k, v)))
            .collect();
    out.push(meta.len() as u8);
    for (k, v) in meta {
        out.push(k);
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_capture(bytes: &[u8]) -> Result<GradientCapture> {
    let mut c = Cursor { bytes, pos: 0 };
    c.header(CAPTURE_MAGIC)?;
    let client_id = c.u32("client id")?;
    let round = c.u32("round")?;
    let tag_at = c.pos;
    let regime = RegimeKind::from_tag(c.u8("regime tag")?).ok_or_else(|| Error::format(tag_at, "unknown regime tag"))?;
    let count = c.u16("layer count")?;
    let layers = (0..count).map(|_| c.tensor()).collect::<Result<Vec<_>>>()?;
    let mut metadata = CaptureMetadata { learning_rate: f64::NAN, clip_norm: None, noise_multiplier: None, kappa: None };
    let entries = c.u8("metadata count")?;
    for _ in 0..entries {
        let at = c.pos;
        let key = c.u8("metadata key")?;
        let v = c.f64("metadata value")?;
        match key {
            META_LEARNING_RATE => metadata.learning_rate = v,
            META_CLIP_NORM => metadata.clip_norm = Some(v),
            META_NOISE_MULTIPLIER => metadata.noise_multiplier = Some(v),
            META_KAPPA => metadata.kappa = Some(v),
            _ => return Err(Error::format(at, format!("unknown metadata key {key}"))),
        }
    }
    c.finish()?;
    if metadata.learning_rate.is_nan() {
        return Err(Error::format(bytes.len(), "missing learning rate"));
    }
    Ok(GradientCapture::new(round, client_id, regime, layers, metadata))
}

pub fn encode_params(p: &ParamSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u16::try_from(p.len()).map_err(|_| Error::contract("more than 65535 tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for e in p.entries() {
        let name = e.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::contract("parameter name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        put_tensor(&mut out, &e.tensor)?;
    }
    Ok(out)
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamSet> {
    let mut c = Cursor { bytes, pos: 0 };
    c.header(PARAMS_MAGIC)?;
    let count = c.u16("tensor count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = c.u16("name length")? as usize;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(len, "name")?).map_err(|_| Error::format(at, "name is not UTF-8"))?;
        entries.push(NamedTensor { name: name.to_string(), tensor: c.tensor()? });
    }
    c.finish()?;
    Ok(ParamSet::new(entries))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// A header row plus string cells. Floats are written with Rust's shortest
/// round-trip formatting, so parsing a written table recovers the exact bits.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::contract(format!("row has {} cells, header has {}", row.len(), self.header.len())));
        }
        if row.iter().any(|c| c.contains([',', '\n', '"'])) {
            return Err(Error::contract("CSV cells may not contain commas, quotes or newlines"));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    /// Cells of a numeric column; empty cells become `None`.
    pub fn floats(&self, name: &str) -> Result<Vec<Option<f64>>> {
        let c = self.column(name).ok_or_else(|| Error::contract(format!("no column {name}")))?;
        self.rows
            .iter()
            .map(|r| {
                if r[c].is_empty() {
                    Ok(None)
                } else {
                    r[c].parse().map(Some).map_err(|_| Error::format(0, format!("bad number {:?} in column {name}", r[c])))
                }
            })
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<CsvTable> {
        let mut lines = text.split_terminator('\n');
        let header: Vec<String> = lines.next().ok_or_else(|| Error::format(0, "missing header"))?.split(',').map(String::from).collect();
        let mut rows = Vec::new();
        let mut offset = header.join(",").len() + 1;
        for line in lines {
            let row: Vec<String> = line.split(',').map(String::from).collect();
            if row.len() != header.len() {
                return Err(Error::format(offset, format!("expected {} cells, found {}", header.len(), row.len())));
            }
            offset += line.len() + 1;
            rows.push(row);
        }
        Ok(CsvTable { header, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<CsvTable> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        CsvTable::parse(&text)
    }
}

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Binary PGM (P5, maxval 255) of an `[H, W]` image in [0, 1]; values are
/// clamped and rounded to the nearest level.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 2 {
        return Err(Error::Dimension { op: "pgm", shapes: vec![image.shape().to_vec()] });
    }
    let mut header = String::new();
    let _ = write!(header, "P5\n{} {}\n255\n", image.shape()[1], image.shape()[0]);
    let mut out = header.into_bytes();
    out.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    // Header: magic, width, height, maxval, separated by whitespace, then a
    // single whitespace byte before the raster.
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(pos, "truncated PGM header"));
        }
        fields.push((start, std::str::from_utf8(&bytes[start..pos]).unwrap_or("")));
    }
    if fields[0].1 != "P5" {
        return Err(Error::format(0, "not a binary PGM (P5)"));
    }
    let num = |(at, s): (usize, &str)| s.parse::<usize>().map_err(|_| Error::format(at, format!("bad header field {s:?}")));
    let (w, h, max) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if max != 255 {
        return Err(Error::format(fields[3].0, "only maxval 255 is supported"));
    }
    pos += 1;
    let raster = bytes.get(pos..pos + w * h).ok_or_else(|| Error::format(bytes.len(), "truncated PGM raster"))?;
    Tensor::new(vec![h, w], raster.iter().map(|&b| b as f64 / 255.0).collect())
}
