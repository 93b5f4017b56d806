//! On-disk dataset cache.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic    [u8; 8]  b"DVDATA\0\0"
//! version  u32      1
//! tag_len  u32
//! tag      tag_len bytes, UTF-8 description of how the data was made
//! n        u64
//! k        u32      number of classes
//! h, w     u32, u32
//! c_in     u32
//! n × {
//!     index    u64
//!     label    u32
//!     spacing  f64
//!     x_long   c_in·h·w × f32
//!     x_trans  c_in·h·w × f32
//! }
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::bytes::ByteReader;
use crate::data::generate::{Dataset, Image, SamplePair};
use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"DVDATA\0\0";
pub const VERSION: u32 = 1;

/// Writes `dataset` with a free-form provenance `tag` that [`read`] returns.
pub fn write(path: &Path, dataset: &Dataset, tag: &str) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let (c, h, w) = dataset.image_dims();
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tag.len() as u32).to_le_bytes());
    buf.extend_from_slice(tag.as_bytes());
    buf.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for v in [dataset.num_classes, h, w, c] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for s in &dataset.samples {
        buf.extend_from_slice(&(s.index as u64).to_le_bytes());
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        buf.extend_from_slice(&s.spacing.to_le_bytes());
        for v in s.x_long.data.iter().chain(&s.x_trans.data) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf).map_err(io)?;
    out.flush().map_err(io)
}

pub fn read(path: &Path) -> Result<(Dataset, String)> {
    let io = |e| Error::io(path, e);
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io)?)
        .read_to_end(&mut bytes)
        .map_err(io)?;
    let mut r = ByteReader::new(&bytes, path);
    if r.take(8)? != MAGIC {
        return Err(r.malformed("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.malformed(&format!("unsupported version {version}")));
    }
    let tag = r.str()?;
    let n = r.len(bytes.len())?;
    let k = r.u32()? as usize;
    let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let plane = c * h * w;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let index = r.u64()? as usize;
        let label = r.u32()? as usize;
        if label >= k {
            return Err(r.malformed(&format!("label {label} ≥ {k} classes")));
        }
        let spacing = r.f64()?;
        let mut image = || -> Result<Image> {
            let data = r
                .take(plane * 4)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Ok(Image {
                channels: c,
                height: h,
                width: w,
                data,
            })
        };
        let x_long = image()?;
        let x_trans = image()?;
        samples.push(SamplePair {
            index,
            label,
            spacing,
            x_long,
            x_trans,
        });
    }
    if !r.finished() {
        return Err(r.malformed("trailing bytes"));
    }
    Ok((
        Dataset {
            num_classes: k,
            samples,
        },
        tag,
    ))
}
