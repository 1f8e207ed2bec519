//! `SECV` tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SECV" | version u32 | count u32
//! per entry: name_len u32 | name utf8 | dtype u8 | rank u32 | dims u64 × rank | payload
//! ```

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::sec::ClusterPlan;
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SECV";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl Payload {
    pub fn tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::U32(_) => 2,
            Payload::U64(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U32(v) => v.len(),
            Payload::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Payload,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let data = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Payload::F64(t.to_f64_vec()),
        };
        Entry {
            name: name.into(),
            shape: t.shape().to_vec(),
            data,
        }
    }

    /// Float entries as a tensor of `T`; integer entries are rejected.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let vals: Vec<T> = match &self.data {
            Payload::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            _ => {
                return Err(Error::Format(format!(
                    "`{}` holds integers, not floats",
                    self.name
                )))
            }
        };
        Tensor::new(&self.shape, vals)
    }
}

fn check_names(entries: &[Entry]) -> Result<()> {
    let mut seen = HashSet::new();
    for e in entries {
        if e.name.is_empty() {
            return Err(Error::Format("empty entry name".into()));
        }
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Format(format!("duplicate entry `{}`", e.name)));
        }
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(Error::Format(format!(
                "`{}`: shape {:?} vs {} values",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, entries: &[Entry]) -> Result<()> {
    check_names(entries)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        w.write_all(&(e.name.len() as u32).to_le_bytes())?;
        w.write_all(e.name.as_bytes())?;
        w.write_all(&[e.data.tag()])?;
        w.write_all(&(e.shape.len() as u32).to_le_bytes())?;
        for &d in &e.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::new();
        match &e.data {
            Payload::F32(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
            Payload::F64(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
            Payload::U32(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
            Payload::U64(v) => v.iter().for_each(|x| buf.extend(x.to_le_bytes())),
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).map_err(|_| Error::Format("not a checkpoint".into()))? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {VERSION}"
        )));
    }
    let count = c.u32()? as usize;
    let mut entries = Vec::new();
    for _ in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Format("entry name is not utf-8".into()))?
            .to_string();
        let tag = c.take(1)?[0];
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(c.u64()?)
                .map_err(|_| Error::Format(format!("`{name}`: dim too large")))?;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("`{name}`: dims overflow")))?;
            shape.push(d);
        }
        let width = match tag {
            0 | 2 => 4,
            1 | 3 => 8,
            t => return Err(Error::Format(format!("`{name}`: unknown dtype tag {t}"))),
        };
        let raw = c.take(
            n.checked_mul(width)
                .ok_or_else(|| Error::Format(format!("`{name}`: payload overflow")))?,
        )?;
        let data = match tag {
            0 => Payload::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
            1 => Payload::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
            2 => Payload::U32(raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect()),
            _ => Payload::U64(raw.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect()),
        };
        entries.push(Entry { name, shape, data });
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    check_names(&entries)?;
    Ok(entries)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<Entry>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn save_checkpoint(path: &Path, entries: &[Entry]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(file), entries)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<Entry>> {
    parse_checkpoint(&std::fs::read(path)?)
}

pub fn params_to_entries<T: Scalar>(params: &ParamSet<T>) -> Vec<Entry> {
    params.iter().map(|(n, t)| Entry::from_tensor(n, t)).collect()
}

/// Overwrites every parameter of `params` from `entries`, matching by name.
pub fn load_params<T: Scalar>(params: &mut ParamSet<T>, entries: &[Entry]) -> Result<()> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let e = entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{name}`")))?;
        params.set(&name, e.to_tensor()?)?;
    }
    Ok(())
}

/// Plan arrays `sim` (f64), `idx` (u32) and scalars `M`, `N`, `padded` under `prefix`.
pub fn plan_to_entries(prefix: &str, plan: &ClusterPlan) -> Vec<Entry> {
    let scalar = |name: &str, v: usize| Entry {
        name: format!("{prefix}.{name}"),
        shape: Vec::new(),
        data: Payload::U64(vec![v as u64]),
    };
    vec![
        Entry {
            name: format!("{prefix}.sim"),
            shape: vec![plan.sim.len()],
            data: Payload::F64(plan.sim.clone()),
        },
        Entry {
            name: format!("{prefix}.idx"),
            shape: vec![plan.idx.len()],
            data: Payload::U32(plan.idx.iter().map(|&i| i as u32).collect()),
        },
        scalar("M", plan.num_clusters),
        scalar("N", plan.cluster_size),
        scalar("padded", plan.padded),
    ]
}

pub fn plan_from_entries(prefix: &str, entries: &[Entry]) -> Result<ClusterPlan> {
    let get = |name: &str| {
        let full = format!("{prefix}.{name}");
        entries
            .iter()
            .find(|e| e.name == full)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks `{full}`")))
    };
    let scalar = |name: &str| match &get(name)?.data {
        Payload::U64(v) if v.len() == 1 => Ok(v[0] as usize),
        _ => Err(Error::Format(format!("`{prefix}.{name}` is not a u64 scalar"))),
    };
    let sim = match &get("sim")?.data {
        Payload::F64(v) => v.clone(),
        _ => return Err(Error::Format(format!("`{prefix}.sim` is not f64"))),
    };
    let idx: Vec<usize> = match &get("idx")?.data {
        Payload::U32(v) => v.iter().map(|&i| i as usize).collect(),
        _ => return Err(Error::Format(format!("`{prefix}.idx` is not u32"))),
    };
    let plan = ClusterPlan {
        inv_idx: crate::sec::invert_permutation(&idx),
        sim,
        idx,
        num_clusters: scalar("M")?,
        cluster_size: scalar("N")?,
        padded: scalar("padded")?,
        iterations: 1,
    };
    plan.validate()?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<Entry> {
        vec![
            Entry {
                name: "a".into(),
                shape: vec![2, 2],
                data: Payload::F32(vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5]),
            },
            Entry {
                name: "b".into(),
                shape: vec![0, 3],
                data: Payload::F64(vec![]),
            },
            Entry {
                name: "c".into(),
                shape: vec![3],
                data: Payload::U32(vec![0, 7, u32::MAX]),
            },
            Entry {
                name: "d".into(),
                shape: vec![],
                data: Payload::U64(vec![42]),
            },
        ]
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()).unwrap();
        let back = parse_checkpoint(&bytes).unwrap();
        assert_eq!(back, sample());
        let mut again = Vec::new();
        write_checkpoint(&mut again, &back).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(parse_checkpoint(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(parse_checkpoint(&bad).unwrap_err().to_string().contains("version"));
        assert!(parse_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut dup = sample();
        dup[1].name = "a".into();
        assert!(write_checkpoint(Vec::new(), &dup).is_err());
    }

    #[test]
    fn unknown_dtype_tag() {
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &sample()[3..]).unwrap();
        // header 12 bytes, name len 4, name 1, then the tag
        bytes[17] = 7;
        assert!(parse_checkpoint(&bytes).unwrap_err().to_string().contains("dtype"));
    }
}
