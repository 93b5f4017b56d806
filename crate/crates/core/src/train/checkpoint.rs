//! Single-file training checkpoints.
//!
//! A header with a section table lets readers jump straight to one section;
//! [`read_centers`] uses that to fetch the class centres without decoding
//! the memory bank. The byte layout is documented in `docs/checkpoint.md`.

use std::fs::File;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::data::{self, SpacingNorm};
use crate::error::{Error, Result};
use crate::model::{ClassCenters, MemoryBank};
use crate::numerics::{AdamW, Moments, ParamStore, Tensor};
use crate::train::config::TrainConfig;
use crate::train::trainer::{TrainState, Trainer};

pub const MAGIC: [u8; 8] = *b"DVCKPT\0\0";
pub const VERSION: u32 = 1;

pub const CONFIG: [u8; 4] = *b"CONF";
pub const PARAMS: [u8; 4] = *b"PARM";
pub const OPTIMIZER: [u8; 4] = *b"OPTM";
pub const MEMORY: [u8; 4] = *b"MBNK";
pub const CENTERS: [u8; 4] = *b"CNTR";
pub const RNG: [u8; 4] = *b"RNGS";
pub const SPACING: [u8; 4] = *b"SNRM";

const SECTION_ORDER: [[u8; 4]; 7] = [CONFIG, PARAMS, OPTIMIZER, MEMORY, CENTERS, RNG, SPACING];
const HEADER_LEN: usize = 8 + 4 + 4;
const ENTRY_LEN: usize = 4 + 8 + 8;
const MAX_SECTIONS: usize = 64;

/// Everything needed to resume training or evaluate.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
    pub centers: ClassCenters,
    pub norm: SpacingNorm,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Result<Self> {
        Ok(Checkpoint {
            config: t.config.clone(),
            state: t.state.clone(),
            centers: t.state.bank.class_centers()?,
            norm: t.norm,
        })
    }

    /// Regenerates the dataset from the stored config and rebuilds the trainer.
    pub fn into_trainer(self) -> Result<Trainer> {
        let dataset = data::generate(self.config.seed, &self.config.data)?;
        self.into_trainer_with(dataset)
    }

    pub fn into_trainer_with(self, dataset: data::Dataset) -> Result<Trainer> {
        let mut t = Trainer::with_state(self.config, dataset, self.state)?;
        if t.norm != self.norm {
            return Err(Error::invalid("restore", "spacing statistics differ from the regenerated data"));
        }
        t.norm = self.norm;
        Ok(t)
    }
}

pub fn save(path: &Path, t: &Trainer) -> Result<()> {
    write(path, &Checkpoint::from_trainer(t)?)
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let sections: Vec<([u8; 4], Vec<u8>)> = SECTION_ORDER
        .iter()
        .map(|&tag| {
            let mut w = ByteWriter::default();
            match &tag {
                b"CONF" => w.bytes(ck.config.to_toml().as_bytes()),
                b"PARM" => encode_params(&mut w, &ck.state.store),
                b"OPTM" => encode_optimizer(&mut w, &ck.state.optimizer),
                b"MBNK" => encode_bank(&mut w, &ck.state.bank),
                b"CNTR" => encode_centers(&mut w, &ck.centers),
                b"RNGS" => {
                    w.u64(ck.config.seed);
                    w.u64(ck.state.epoch as u64);
                }
                b"SNRM" => {
                    w.f64(ck.norm.mean);
                    w.f64(ck.norm.std);
                }
                _ => unreachable!(),
            }
            (tag, w.buf)
        })
        .collect();

    let mut out = ByteWriter::default();
    out.bytes(&MAGIC);
    out.u32(VERSION);
    out.u32(sections.len() as u32);
    let mut offset = (HEADER_LEN + ENTRY_LEN * sections.len()) as u64;
    for (tag, body) in &sections {
        out.bytes(tag);
        out.u64(offset);
        out.u64(body.len() as u64);
        offset += body.len() as u64;
    }
    for (_, body) in &sections {
        out.bytes(body);
    }
    out.buf
}

pub fn write(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = encode(ck);
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))
}

fn encode_params(w: &mut ByteWriter, store: &ParamStore) {
    w.u32(store.len() as u32);
    for (_, p) in store.iter() {
        w.str(&p.name);
        w.u32(p.value.ndim() as u32);
        p.value.shape().iter().for_each(|&d| w.u64(d as u64));
        w.f64s(p.value.data());
    }
}

fn encode_optimizer(w: &mut ByteWriter, opt: &AdamW) {
    for v in [opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay] {
        w.f64(v);
    }
    w.u32(opt.state.len() as u32);
    for m in &opt.state {
        w.u64(m.step);
        w.u64(m.m.len() as u64);
        w.f64s(&m.m);
        w.f64s(&m.v);
    }
}

fn encode_bank(w: &mut ByteWriter, bank: &MemoryBank) {
    w.f64(bank.alpha);
    w.f64(bank.tau);
    w.u32(bank.num_classes as u32);
    w.u64(bank.len() as u64);
    w.u32(bank.dim() as u32);
    bank.indices().iter().for_each(|&i| w.u64(i as u64));
    bank.labels().iter().for_each(|&y| w.u32(y as u32));
    w.f64s(bank.long().data());
    w.f64s(bank.trans().data());
}

fn encode_centers(w: &mut ByteWriter, c: &ClassCenters) {
    w.u32(c.num_classes() as u32);
    w.u32(c.dim() as u32);
    w.f64s(c.mu_long.data());
    w.f64s(c.mu_trans.data());
}

/// Checks magic and version of the fixed header and returns the section count.
fn read_preamble(path: &Path, fixed: &[u8]) -> Result<usize> {
    let mut r = ByteReader::new(fixed, path);
    if r.take(8)? != MAGIC {
        return Err(r.malformed("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.malformed(&format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    if count > MAX_SECTIONS {
        return Err(r.malformed(&format!("implausible section count {count}")));
    }
    Ok(count)
}

/// Parsed header: `(tag, offset, length)` per section.
fn read_header(path: &Path, f: &mut File) -> Result<Vec<([u8; 4], u64, u64)>> {
    let short = || Error::Format {
        path: path.to_path_buf(),
        msg: "file too short for a checkpoint header".into(),
    };
    let mut fixed = [0u8; HEADER_LEN];
    f.read_exact(&mut fixed).map_err(|_| short())?;
    let count = read_preamble(path, &fixed)?;
    let mut table = vec![0u8; count * ENTRY_LEN];
    f.read_exact(&mut table).map_err(|_| short())?;
    let mut r = ByteReader::new(&table, path);
    (0..count)
        .map(|_| {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            Ok((tag, r.u64()?, r.u64()?))
        })
        .collect()
}

fn read_section(path: &Path, f: &mut File, table: &[([u8; 4], u64, u64)], tag: [u8; 4]) -> Result<Vec<u8>> {
    let &(_, offset, len) = table.iter().find(|e| e.0 == tag).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        msg: format!("missing section {}", String::from_utf8_lossy(&tag)),
    })?;
    let size = f.metadata().map_err(|e| Error::io(path, e))?.len();
    if offset.checked_add(len).is_none_or(|end| end > size) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("section {} runs past end of file", String::from_utf8_lossy(&tag)),
        });
    }
    f.seek(SeekFrom::Start(offset)).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; len as usize];
    f.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Reads only the header and the centre section.
pub fn read_centers(path: &Path) -> Result<ClassCenters> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let table = read_header(path, &mut f)?;
    let body = read_section(path, &mut f, &table, CENTERS)?;
    decode(path, &body, decode_centers)
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let table = read_header(path, &mut f)?;
    let mut section = |tag| read_section(path, &mut f, &table, tag);
    let (conf, params, opt, bank, centers, rng, spacing) = (
        section(CONFIG)?,
        section(PARAMS)?,
        section(OPTIMIZER)?,
        section(MEMORY)?,
        section(CENTERS)?,
        section(RNG)?,
        section(SPACING)?,
    );
    let text = String::from_utf8(conf).map_err(|_| Error::Format {
        path: path.to_path_buf(),
        msg: "config section is not UTF-8".into(),
    })?;
    let config = TrainConfig::from_toml(&text)?;

    let store = decode(path, &params, decode_params)?;
    let optimizer = decode(path, &opt, decode_optimizer)?;
    let bank = decode(path, &bank, decode_bank)?;
    let centers = decode(path, &centers, decode_centers)?;
    let (seed, epoch) = decode(path, &rng, |r| Ok((r.u64()?, r.u64()? as usize)))?;
    let norm = decode(path, &spacing, |r| {
        Ok(SpacingNorm {
            mean: r.f64()?,
            std: r.f64()?,
        })
    })?;
    if seed != config.seed {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("rng seed {seed} disagrees with config seed {}", config.seed),
        });
    }
    Ok(Checkpoint {
        config,
        state: TrainState {
            store,
            optimizer,
            bank,
            epoch,
        },
        centers,
        norm,
    })
}

fn decode<T>(path: &Path, bytes: &[u8], f: impl FnOnce(&mut ByteReader) -> Result<T>) -> Result<T> {
    let mut r = ByteReader::new(bytes, path);
    let v = f(&mut r)?;
    expect_end(&r)?;
    Ok(v)
}

fn expect_end(r: &ByteReader) -> Result<()> {
    if r.finished() {
        Ok(())
    } else {
        Err(r.malformed("trailing bytes in section"))
    }
}

fn decode_params(r: &mut ByteReader) -> Result<ParamStore> {
    let limit = usize::MAX >> 4;
    let n = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.len(limit)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.malformed("shape overflow"))?;
        let data = r.f64s(len)?;
        let t = Tensor::new(shape, data).map_err(|e| r.malformed(&e.to_string()))?;
        store.add(name, t).map_err(|e| r.malformed(&e.to_string()))?;
    }
    Ok(store)
}

fn decode_optimizer(r: &mut ByteReader) -> Result<AdamW> {
    let mut opt = AdamW::new(r.f64()?, 0.0);
    opt.beta1 = r.f64()?;
    opt.beta2 = r.f64()?;
    opt.eps = r.f64()?;
    opt.weight_decay = r.f64()?;
    let n = r.u32()? as usize;
    for _ in 0..n {
        let step = r.u64()?;
        let len = r.len(usize::MAX >> 4)?;
        let m = r.f64s(len)?;
        let v = r.f64s(len)?;
        opt.state.push(Moments { step, m, v });
    }
    Ok(opt)
}

fn decode_bank(r: &mut ByteReader) -> Result<MemoryBank> {
    let alpha = r.f64()?;
    let tau = r.f64()?;
    let k = r.u32()? as usize;
    let n = r.len(usize::MAX >> 8)?;
    let d = r.u32()? as usize;
    let indices = (0..n).map(|_| r.len(usize::MAX)).collect::<Result<Vec<_>>>()?;
    let labels = (0..n).map(|_| r.u32().map(|y| y as usize)).collect::<Result<Vec<_>>>()?;
    let long = Tensor::new(vec![n, d], r.f64s(n * d)?).map_err(|e| r.malformed(&e.to_string()))?;
    let trans = Tensor::new(vec![n, d], r.f64s(n * d)?).map_err(|e| r.malformed(&e.to_string()))?;
    MemoryBank::new(indices, labels, long, trans, k, alpha, tau).map_err(|e| r.malformed(&e.to_string()))
}

fn decode_centers(r: &mut ByteReader) -> Result<ClassCenters> {
    let k = r.u32()? as usize;
    let d = r.u32()? as usize;
    let long = Tensor::new(vec![k, d], r.f64s(k * d)?).map_err(|e| r.malformed(&e.to_string()))?;
    let trans = Tensor::new(vec![k, d], r.f64s(k * d)?).map_err(|e| r.malformed(&e.to_string()))?;
    ClassCenters::from_views(long, trans)
}
