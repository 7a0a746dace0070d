//! Binary region-feature files.
//!
//! A file is a run of records followed by an index:
//!
//! ```text
//! record := "FGRD" u16 version, u32 K, u32 D, u32 rows, u32 cols,
//!           K*D f64, u32 id_len, id bytes
//! index  := "FIDX" u32 count, count * (u32 id_len, id bytes, u64 offset)
//! footer := u64 index_offset, "FEND"
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vision::FeatureGrid;

const RECORD_MAGIC: &[u8; 4] = b"FGRD";
const INDEX_MAGIC: &[u8; 4] = b"FIDX";
const END_MAGIC: &[u8; 4] = b"FEND";
const VERSION: u16 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode_grids(grids: &[FeatureGrid]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut offsets = Vec::with_capacity(grids.len());
    for g in grids {
        offsets.push(out.len() as u64);
        out.extend_from_slice(RECORD_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, g.num_regions())?;
        put_u32(&mut out, g.raw_dim())?;
        put_u32(&mut out, g.grid_hw.0)?;
        put_u32(&mut out, g.grid_hw.1)?;
        for v in g.regions.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_str(&mut out, &g.image_id)?;
    }
    let index_at = out.len() as u64;
    out.extend_from_slice(INDEX_MAGIC);
    put_u32(&mut out, grids.len())?;
    for (g, off) in grids.iter().zip(offsets) {
        put_str(&mut out, &g.image_id)?;
        out.extend_from_slice(&off.to_le_bytes());
    }
    out.extend_from_slice(&index_at.to_le_bytes());
    out.extend_from_slice(END_MAGIC);
    Ok(out)
}

pub fn write_feature_file(path: impl AsRef<Path>, grids: &[FeatureGrid]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_grids(grids)?).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated feature file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("image id is not UTF-8".into()))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic at byte {at}: expected {:?}, found {:?}",
                String::from_utf8_lossy(want),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }
}

fn decode_record(buf: &[u8], offset: usize) -> Result<FeatureGrid> {
    let mut c = Cursor { buf, pos: offset };
    c.magic(RECORD_MAGIC)?;
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported feature record version {version}")));
    }
    let (k, d, rows, cols) = (c.u32()?, c.u32()?, c.u32()?, c.u32()?);
    let n = k
        .checked_mul(d)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("feature record size overflows".into()))?;
    let data = c
        .take(n)?
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let id = c.string()?;
    FeatureGrid::new(id, Tensor::new(vec![k, d], data)?, (rows, cols))
}

/// All grids of one file, addressable by image id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    grids: Vec<FeatureGrid>,
    index: HashMap<String, usize>,
}

impl FeatureStore {
    pub fn from_grids(grids: Vec<FeatureGrid>) -> Result<Self> {
        let mut index = HashMap::with_capacity(grids.len());
        for (i, g) in grids.iter().enumerate() {
            if index.insert(g.image_id.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate image id '{}'", g.image_id)));
            }
        }
        Ok(FeatureStore { grids, index })
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        if buf.len() < 12 {
            return Err(Error::Format("truncated feature file: no footer".into()));
        }
        let tail = buf.len() - 12;
        let mut c = Cursor { buf, pos: tail };
        let index_at = c.u64()?;
        c.magic(END_MAGIC)?;
        let index_at = usize::try_from(index_at)
            .ok()
            .filter(|&i| i <= tail)
            .ok_or_else(|| Error::Format("index offset past end of file".into()))?;
        let mut c = Cursor {
            buf: &buf[..tail],
            pos: index_at,
        };
        c.magic(INDEX_MAGIC)?;
        let count = c.u32()?;
        let mut grids = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let id = c.string()?;
            let off = usize::try_from(c.u64()?).map_err(|_| Error::Format("offset overflows".into()))?;
            if off >= index_at {
                return Err(Error::Format(format!(
                    "record offset {off} for '{id}' lies past the records"
                )));
            }
            let g = decode_record(&buf[..index_at], off)?;
            if g.image_id != id {
                return Err(Error::Format(format!(
                    "index names '{id}' but record holds '{}'",
                    g.image_id
                )));
            }
            grids.push(g);
        }
        FeatureStore::from_grids(grids)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        FeatureStore::decode(&buf).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn get(&self, image_id: &str) -> Result<&FeatureGrid> {
        self.index
            .get(image_id)
            .map(|&i| &self.grids[i])
            .ok_or_else(|| Error::MissingFeature(image_id.to_string()))
    }

    pub fn grids(&self) -> &[FeatureGrid] {
        &self.grids
    }

    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }
}
