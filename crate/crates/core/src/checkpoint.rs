//! `PGSSL1` binary checkpoints.
//!
//! Layout: magic `PGSSL1`, `u32` version, `u32` tensor count, then per
//! tensor a `u16` name length, the UTF-8 name, a `u8` rank, `rank` dims as
//! `u32` and the payload as little-endian `f32`. All integers are
//! little-endian.

use std::io::Write;
use std::path::Path;

use crate::backbone::DualNetworkState;
use crate::error::{bail, Error, Result};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 6] = b"PGSSL1";
pub const VERSION: u32 = 1;
pub const STUDENT_PREFIX: &str = "student.";
pub const TEACHER_PREFIX: &str = "teacher.";

/// Running statistics are stored alongside weights but never trained.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32::try_from(tensors.len()).map_err(|_| Error::Param("too many tensors".into()))?.to_le_bytes());
    for (name, t) in tensors {
        let Ok(len) = u16::try_from(name.len()) else {
            bail!(Param, "tensor name '{name}' is too long");
        };
        let Ok(rank) = u8::try_from(t.rank()) else {
            bail!(Param, "tensor '{name}' has rank {}", t.rank());
        };
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let Ok(d) = u32::try_from(d) else {
                bail!(Param, "tensor '{name}' dimension {d} does not fit in u32");
            };
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                msg: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected PGSSL1".into(),
        });
    }
    let at = r.pos;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: at,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::with_capacity(count.min(4096) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes"));
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len as usize, "name")?).map_err(|_| Error::Format {
            offset: at,
            msg: "tensor name is not UTF-8".into(),
        })?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let at = r.pos;
        let payload = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format { offset: at, msg: "payload size overflows".into() })?, "payload")?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format {
            offset: at,
            msg: format!("tensor '{name}': {e}"),
        })?;
        out.push((name.to_string(), t.with_requires_grad(!is_buffer(name))));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format {
            offset: r.pos,
            msg: "trailing bytes after last tensor".into(),
        });
    }
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(())
}

impl DualNetworkState {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let s: Vec<(String, &Tensor<f32>)> = self
            .student
            .iter()
            .map(|(n, t)| (format!("{STUDENT_PREFIX}{n}"), t))
            .chain(self.teacher.iter().map(|(n, t)| (format!("{TEACHER_PREFIX}{n}"), t)))
            .collect();
        encode(s.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut student = ParamSet::new();
        let mut teacher = ParamSet::new();
        for (name, t) in decode(bytes)? {
            if let Some(n) = name.strip_prefix(STUDENT_PREFIX) {
                student.insert(n, t);
            } else if let Some(n) = name.strip_prefix(TEACHER_PREFIX) {
                teacher.insert(n, t);
            } else {
                bail!(Param, "checkpoint tensor '{name}' has neither student. nor teacher. prefix");
            }
        }
        let state = Self { student, teacher };
        state.validate()?;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Writes a single parameter set (e.g. a fine-tuned model) without prefixes.
pub fn save_params(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    write_file(path, &encode(params.iter())?)
}

pub fn load_params(path: &Path) -> Result<ParamSet<f32>> {
    let mut ps = ParamSet::new();
    for (name, t) in decode(&std::fs::read(path)?)? {
        ps.insert(name, t);
    }
    Ok(ps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{Backbone, BackboneConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state() -> DualNetworkState {
        let bb = Backbone::new(BackboneConfig {
            base_width: 2,
            projector_dim: 4,
            projector_hidden: 4,
            pixel_dim: 2,
            ..BackboneConfig::default()
        })
        .unwrap();
        DualNetworkState::init(&bb, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn header_layout() {
        let mut t = Tensor::from_fn(&[2, 1], |i| i as f32 + 0.5);
        t.set_requires_grad(true);
        let bytes = encode([("ab", &t)]).unwrap();
        let mut want = b"PGSSL1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u16.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.push(2);
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&0.5f32.to_le_bytes());
        want.extend_from_slice(&1.5f32.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn dual_state_round_trips_bitwise() {
        let mut s = state();
        s.teacher.get_mut("enc.stem.conv.weight").unwrap().data_mut()[0] = -0.0;
        let bytes = s.to_bytes().unwrap();
        let back = DualNetworkState::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        for ((n, a), (_, b)) in s.student.iter().zip(back.student.iter()) {
            assert_eq!(a.requires_grad(), b.requires_grad(), "{n}");
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn truncation_names_offset() {
        let bytes = state().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match DualNetworkState::from_bytes(cut) {
            Err(Error::Format { offset, .. }) => assert!(offset > 14 && offset < cut.len()),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(b"PGSSL2"), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(decode(b"PGS"), Err(Error::Format { offset: 0, .. })));
    }
}
