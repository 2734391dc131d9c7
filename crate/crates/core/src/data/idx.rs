use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{Dataset, Split};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes.get(self.pos..self.pos + 4).ok_or_else(|| Error::format(self.pos, "truncated header"))?;
        self.pos += 4;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn payload(&mut self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available < len {
            return Err(Error::format(self.bytes.len(), format!("payload truncated: expected {len} bytes, found {available}")));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }
}

/// Parses IDX image and label buffers (big-endian headers, u8 payloads).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let mut r = Reader { bytes: images, pos: 0 };
    let magic = r.u32()?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(0, format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")));
    }
    let (n, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if h == 0 || w == 0 {
        return Err(Error::format(8, "zero image extent"));
    }
    let pixels: Vec<f64> = r.payload(n * h * w)?.iter().map(|&b| b as f64 / 255.0).collect();

    let mut r = Reader { bytes: labels, pos: 0 };
    let magic = r.u32()?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(0, format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")));
    }
    let count = r.u32()? as usize;
    if count != n {
        return Err(Error::format(4, format!("label count {count} does not match image count {n}")));
    }
    let label_bytes = r.payload(n)?;
    if let Some(i) = label_bytes.iter().position(|&l| l > 9) {
        return Err(Error::format(8 + i, format!("label {} out of range", label_bytes[i])));
    }
    if n == 0 {
        return Err(Error::format(4, "empty dataset"));
    }
    let labels = label_bytes.iter().map(|&l| l as usize).collect();
    Dataset::new(Tensor::new(vec![n, h, w, 1], pixels)?, labels, 10, Split::Full)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels)
}
