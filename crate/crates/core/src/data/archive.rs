//! Materialized dataset archives.
//!
//! Layout, all numbers little-endian:
//!
//! ```text
//! magic    7 bytes  "THINDS1"
//! name     u16 length, UTF-8 bytes
//! seed     u64
//! count    u64
//! H, W     u32, u32
//! records  count × {
//!            H·W × f32 pixels (row-major),
//!            u8 task label,
//!            u8 rotation class, 255 if absent,
//!            u8 scale class, 255 if absent,
//!            f32 rotation in degrees, NaN if absent,
//!            f32 scale, NaN if absent
//!          }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::LabeledImage;

pub const MAGIC: &[u8; 7] = b"THINDS1";
const ABSENT: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub name: String,
    pub seed: u64,
    pub count: u64,
    pub height: u32,
    pub width: u32,
}

impl ArchiveHeader {
    fn record_len(&self) -> usize {
        self.height as usize * self.width as usize * 4 + 3 + 8
    }
}

fn class_byte(c: Option<usize>) -> Result<u8> {
    match c {
        None => Ok(ABSENT),
        Some(c) if c < ABSENT as usize => Ok(c as u8),
        Some(c) => Err(Error::Contract(format!("class {c} does not fit an archive byte"))),
    }
}

pub fn write_header<W: Write>(out: &mut W, h: &ArchiveHeader) -> std::io::Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&(h.name.len() as u16).to_le_bytes())?;
    out.write_all(h.name.as_bytes())?;
    out.write_all(&h.seed.to_le_bytes())?;
    out.write_all(&h.count.to_le_bytes())?;
    out.write_all(&h.height.to_le_bytes())?;
    out.write_all(&h.width.to_le_bytes())
}

/// Serializes one sample.
pub fn encode_record(img: &LabeledImage, h: &ArchiveHeader) -> Result<Vec<u8>> {
    if img.pixels.shape() != [1, h.height as usize, h.width as usize] {
        return Err(Error::dim(format!(
            "image {:?} in a {}×{} archive",
            img.pixels.shape(),
            h.height,
            h.width
        )));
    }
    let mut out = Vec::with_capacity(h.record_len());
    for &p in img.pixels.data() {
        out.extend_from_slice(&(p as f32).to_le_bytes());
    }
    out.push(class_byte(Some(img.task_label))?);
    out.push(class_byte(img.rotation_class)?);
    out.push(class_byte(img.scale_class)?);
    out.extend_from_slice(&(img.rotation_deg.unwrap_or(f64::NAN) as f32).to_le_bytes());
    out.extend_from_slice(&(img.scale.unwrap_or(f64::NAN) as f32).to_le_bytes());
    Ok(out)
}

/// Writes `images` to `path`. The header's count must match.
pub fn write_archive<I>(path: &Path, header: &ArchiveHeader, images: I) -> Result<()>
where
    I: IntoIterator<Item = LabeledImage>,
{
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    write_header(&mut out, header).map_err(io)?;
    let mut n = 0u64;
    for img in images {
        out.write_all(&encode_record(&img, header)?).map_err(io)?;
        n += 1;
    }
    if n != header.count {
        return Err(Error::Contract(format!(
            "archive header announces {} samples, {n} written",
            header.count
        )));
    }
    out.flush().map_err(io)
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format("dataset archive", "truncated"))?;
    Ok(buf)
}

fn le<const N: usize>(b: &[u8]) -> [u8; N] {
    b.try_into().expect("slice length fixed by caller")
}

pub fn read_header<R: Read>(r: &mut R) -> Result<ArchiveHeader> {
    if read_exact(r, 7)? != MAGIC {
        return Err(Error::format("dataset archive", "bad magic"));
    }
    let nl = u16::from_le_bytes(le(&read_exact(r, 2)?)) as usize;
    let name =
        String::from_utf8(read_exact(r, nl)?).map_err(|_| Error::format("dataset archive", "name is not UTF-8"))?;
    let rest = read_exact(r, 24)?;
    Ok(ArchiveHeader {
        name,
        seed: u64::from_le_bytes(le(&rest[0..8])),
        count: u64::from_le_bytes(le(&rest[8..16])),
        height: u32::from_le_bytes(le(&rest[16..20])),
        width: u32::from_le_bytes(le(&rest[20..24])),
    })
}

pub fn decode_record(rec: &[u8], h: &ArchiveHeader) -> Result<LabeledImage> {
    let (hh, ww) = (h.height as usize, h.width as usize);
    let npx = hh * ww;
    let f32_at = |i: usize| f32::from_le_bytes(le(&rec[i..i + 4])) as f64;
    let pixels = (0..npx).map(|i| f32_at(4 * i)).collect();
    let at = 4 * npx;
    let class = |b: u8| (b != ABSENT).then_some(b as usize);
    let value = |v: f64| (!v.is_nan()).then_some(v);
    Ok(LabeledImage {
        pixels: Tensor::new(vec![1, hh, ww], pixels)?,
        task_label: rec[at] as usize,
        rotation_class: class(rec[at + 1]),
        scale_class: class(rec[at + 2]),
        rotation_deg: value(f32_at(at + 3)),
        scale: value(f32_at(at + 7)),
    })
}

pub fn read_archive(path: &Path) -> Result<(ArchiveHeader, Vec<LabeledImage>)> {
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let header = read_header(&mut r)?;
    if header.height == 0 || header.width == 0 {
        return Err(Error::format("dataset archive", "zero image size"));
    }
    let mut images = Vec::with_capacity(header.count.min(1 << 20) as usize);
    for _ in 0..header.count {
        let rec = read_exact(&mut r, header.record_len())?;
        images.push(decode_record(&rec, &header)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format("dataset archive", "trailing bytes"));
    }
    Ok((header, images))
}
