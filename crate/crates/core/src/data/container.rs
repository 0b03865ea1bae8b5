//! Binary corpus containers.
//!
//! Pair dataset (`DVQAPAIR`), all integers little-endian:
//!
//! ```text
//! magic[8] version:u32 count:u64 channels:u32 height:u32 width:u32
//! count × { r1 d1 r2 d2 : C·H·W × f32, label:u8,
//!           kind:u8 level1:u8 level2:u8 source1:u32 source2:u32 }
//! ```
//!
//! Evaluation set (`DVQAEVAL`):
//!
//! ```text
//! magic[8] version:u32 count:u64 frames:u32 channels:u32 height:u32 width:u32
//! name_len:u32 name[name_len]
//! count × { kind:u8 level:u8 source:u32 mos:f32, frames × ref, frames × dist }
//! ```

use std::path::Path;

use super::{DistortionKind, EvalDataset, EvalItem, PairMeta, RankedPairInstance};
use crate::error::{Error, Result};
use crate::image::{Geometry, Patch};

const PAIR_MAGIC: &[u8; 8] = b"DVQAPAIR";
const EVAL_MAGIC: &[u8; 8] = b"DVQAEVAL";
pub const DATASET_VERSION: u32 = 1;
pub const EVAL_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::data(format!(
                    "{}: truncated at byte {} (need {n} more)",
                    self.what, self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn patch(&mut self, g: Geometry) -> Result<Patch> {
        let raw = self.take(g.len() * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Patch::new(g, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::data(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }

    fn header(&mut self, magic: &[u8; 8], version: u32) -> Result<u64> {
        if self.take(8)? != magic {
            return Err(Error::data(format!("{}: bad magic", self.what)));
        }
        let v = self.u32()?;
        if v != version {
            return Err(Error::data(format!(
                "{}: format version {v}, expected {version}",
                self.what
            )));
        }
        self.u64()
    }

    fn geometry(&mut self) -> Result<Geometry> {
        let g = Geometry::new(
            self.u32()? as usize,
            self.u32()? as usize,
            self.u32()? as usize,
        );
        if g.is_empty() {
            return Err(Error::data(format!("{}: degenerate geometry {g}", self.what)));
        }
        Ok(g)
    }
}

fn put_patch(out: &mut Vec<u8>, p: &Patch) {
    for v in p.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_geometry(out: &mut Vec<u8>, g: Geometry) {
    for d in [g.channels, g.height, g.width] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub(crate) fn dataset_to_bytes(geometry: Geometry, instances: &[RankedPairInstance]) -> Result<Vec<u8>> {
    let record = 4 * geometry.len() * 4 + 4 + 8;
    let mut out = Vec::with_capacity(32 + instances.len() * record);
    out.extend_from_slice(PAIR_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(instances.len() as u64).to_le_bytes());
    put_geometry(&mut out, geometry);
    for inst in instances {
        for p in [&inst.r1, &inst.d1, &inst.r2, &inst.d2] {
            if p.geometry() != geometry {
                return Err(Error::shape(format!(
                    "instance patch {} in a {geometry} dataset",
                    p.geometry()
                )));
            }
            put_patch(&mut out, p);
        }
        out.push(inst.label);
        out.extend_from_slice(&[inst.meta.kind.code(), inst.meta.level1, inst.meta.level2]);
        out.extend_from_slice(&inst.meta.source1.to_le_bytes());
        out.extend_from_slice(&inst.meta.source2.to_le_bytes());
    }
    Ok(out)
}

pub(crate) fn dataset_from_bytes(buf: &[u8]) -> Result<(Geometry, Vec<RankedPairInstance>)> {
    let mut r = Reader {
        buf,
        pos: 0,
        what: "pair dataset",
    };
    let count = r.header(PAIR_MAGIC, DATASET_VERSION)?;
    let g = r.geometry()?;
    let record = 4 * g.len() * 4 + 12;
    let expected = (count as usize)
        .checked_mul(record)
        .and_then(|n| n.checked_add(r.pos));
    if expected != Some(buf.len()) {
        return Err(Error::data(format!(
            "pair dataset: {} bytes for {count} records of {record} bytes (truncated or padded)",
            buf.len()
        )));
    }
    let mut instances = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let (r1, d1, r2, d2) = (r.patch(g)?, r.patch(g)?, r.patch(g)?, r.patch(g)?);
        let label = r.u8()?;
        if label > 1 {
            return Err(Error::data(format!("pair dataset: label byte {label}")));
        }
        let meta = PairMeta {
            kind: DistortionKind::from_code(r.u8()?)?,
            level1: r.u8()?,
            level2: r.u8()?,
            source1: r.u32()?,
            source2: r.u32()?,
        };
        instances.push(RankedPairInstance {
            r1,
            d1,
            r2,
            d2,
            label,
            meta,
        });
    }
    r.finish()?;
    Ok((g, instances))
}

pub fn write_dataset(
    path: impl AsRef<Path>,
    geometry: Geometry,
    instances: &[RankedPairInstance],
) -> Result<()> {
    let path = path.as_ref();
    let bytes = dataset_to_bytes(geometry, instances)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<(Geometry, Vec<RankedPairInstance>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes)
}

pub(crate) fn eval_to_bytes(set: &EvalDataset) -> Result<Vec<u8>> {
    let first = set.items.first();
    let frames = first.map_or(1, |i| i.reference.len());
    let g = first
        .and_then(|i| i.reference.first())
        .map_or(Geometry::new(1, 1, 1), Patch::geometry);
    let mut out = Vec::new();
    out.extend_from_slice(EVAL_MAGIC);
    out.extend_from_slice(&EVAL_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.items.len() as u64).to_le_bytes());
    out.extend_from_slice(&(frames as u32).to_le_bytes());
    put_geometry(&mut out, g);
    out.extend_from_slice(&(set.name.len() as u32).to_le_bytes());
    out.extend_from_slice(set.name.as_bytes());
    for item in &set.items {
        if item.reference.len() != frames || item.distorted.len() != frames {
            return Err(Error::shape("evaluation items differ in frame count"));
        }
        out.push(item.kind.code());
        out.push(item.level);
        out.extend_from_slice(&item.source.to_le_bytes());
        out.extend_from_slice(&item.mos.to_le_bytes());
        for p in item.reference.iter().chain(&item.distorted) {
            if p.geometry() != g {
                return Err(Error::shape("evaluation frames differ in geometry"));
            }
            put_patch(&mut out, p);
        }
    }
    Ok(out)
}

pub(crate) fn eval_from_bytes(buf: &[u8]) -> Result<EvalDataset> {
    let mut r = Reader {
        buf,
        pos: 0,
        what: "evaluation set",
    };
    let count = r.header(EVAL_MAGIC, EVAL_VERSION)?;
    let frames = r.u32()? as usize;
    let g = r.geometry()?;
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::data("evaluation set: name is not utf-8"))?;
    let record = 10 + 2 * frames * g.len() * 4;
    let expected = (count as usize)
        .checked_mul(record)
        .and_then(|n| n.checked_add(r.pos));
    if expected != Some(buf.len()) {
        return Err(Error::data(format!(
            "evaluation set: {} bytes for {count} records of {record} bytes (truncated or padded)",
            buf.len()
        )));
    }
    let mut items = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let kind = DistortionKind::from_code(r.u8()?)?;
        let level = r.u8()?;
        let source = r.u32()?;
        let mos = r.f32()?;
        let reference = (0..frames).map(|_| r.patch(g)).collect::<Result<Vec<_>>>()?;
        let distorted = (0..frames).map(|_| r.patch(g)).collect::<Result<Vec<_>>>()?;
        items.push(EvalItem {
            reference,
            distorted,
            kind,
            level,
            source,
            mos,
        });
    }
    r.finish()?;
    Ok(EvalDataset { name, items })
}

pub fn write_eval_set(path: impl AsRef<Path>, set: &EvalDataset) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, eval_to_bytes(set)?).map_err(|e| Error::io(path, e))
}

pub fn read_eval_set(path: impl AsRef<Path>) -> Result<EvalDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    eval_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use super::*;

    fn sample(n: usize) -> (Geometry, Vec<RankedPairInstance>) {
        let g = Geometry::new(1, 8, 8);
        let sources = generate_sources(4, g, 1).unwrap();
        let opts = PairOptions {
            pairs_per_source: n.div_ceil(4),
            levels: 6,
            cross_content: false,
        };
        let mut d = make_pair_dataset(&sources, opts, 2).unwrap();
        d.truncate(n);
        (g, d)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (g, d) = sample(100);
        let bytes = dataset_to_bytes(g, &d).unwrap();
        let (g2, d2) = dataset_from_bytes(&bytes).unwrap();
        assert_eq!((g2, &d2), (g, &d));
        assert_eq!(dataset_to_bytes(g2, &d2).unwrap(), bytes);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let g = Geometry::new(1, 4, 4);
        let bytes = dataset_to_bytes(g, &[]).unwrap();
        let (g2, d) = dataset_from_bytes(&bytes).unwrap();
        assert_eq!(g2, g);
        assert!(d.is_empty());
    }

    #[test]
    fn truncated_dataset_is_rejected() {
        let (g, d) = sample(3);
        let bytes = dataset_to_bytes(g, &d).unwrap();
        for cut in [0, 7, 20, 31, bytes.len() / 2, bytes.len() - 1] {
            assert!(dataset_from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (g, d) = sample(2);
        let mut bytes = dataset_to_bytes(g, &d).unwrap();
        bytes[8] = 9;
        let err = dataset_from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn eval_round_trip() {
        let opts = EvalOptions {
            levels: 4,
            frames: 2,
            jitter: 0.2,
        };
        let sets = make_eval_sets(Geometry::new(1, 8, 8), 2, opts, 3).unwrap();
        let bytes = eval_to_bytes(&sets[1]).unwrap();
        assert_eq!(eval_from_bytes(&bytes).unwrap(), sets[1]);
        assert!(eval_from_bytes(&bytes[..bytes.len() - 4]).is_err());
    }
}
