//! Versioned binary checkpoint container.
//!
//! Runs resume bit-identically from these files. Layout (little-endian):
//!
//! | field            | type                                   |
//! |------------------|----------------------------------------|
//! | magic            | 8 bytes, `RMIXCKPT`                    |
//! | version          | u32 (currently 1)                      |
//! | epoch            | u64 — completed epochs                 |
//! | sched_step       | u64 — optimizer steps taken            |
//! | rng count        | u32                                    |
//! | rng state × n    | seed u64, word_pos lo u64, hi u64      |
//! | group count      | u32                                    |
//! | group × m        | name (u8 len + utf8), tensor count u32 |
//! | tensor           | rank u32, dims u64 × rank, f64 × len   |
//!
//! Tensor groups are named (`params`, `velocity`, `policy`, …) so different
//! run kinds can share the format.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::rng::RngState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"RMIXCKPT";
const VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(std::io::Error),
    Format(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io: {e}"),
            CheckpointError::Format(msg) => write!(f, "checkpoint format: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<std::io::Error> for CheckpointError {
    fn from(e: std::io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

pub type CkptResult<T> = Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub sched_step: u64,
    pub rng_states: Vec<RngState>,
    pub groups: Vec<(String, Vec<Tensor>)>,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Option<&[Tensor]> {
        self.groups
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, ts)| ts.as_slice())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.sched_step.to_le_bytes());
        out.extend_from_slice(&(self.rng_states.len() as u32).to_le_bytes());
        for st in &self.rng_states {
            out.extend_from_slice(&st.seed.to_le_bytes());
            out.extend_from_slice(&st.word_pos_lo.to_le_bytes());
            out.extend_from_slice(&st.word_pos_hi.to_le_bytes());
        }
        out.extend_from_slice(&(self.groups.len() as u32).to_le_bytes());
        for (name, tensors) in &self.groups {
            let bytes = name.as_bytes();
            assert!(bytes.len() <= u8::MAX as usize, "group name too long");
            out.push(bytes.len() as u8);
            out.extend_from_slice(bytes);
            out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
            for t in tensors {
                out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
                for &d in t.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for &v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CkptResult<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(CheckpointError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Format(format!(
                "unsupported version {version}"
            )));
        }
        let epoch = r.u64()?;
        let sched_step = r.u64()?;
        let rng_count = r.u32()? as usize;
        let mut rng_states = Vec::with_capacity(rng_count);
        for _ in 0..rng_count {
            rng_states.push(RngState {
                seed: r.u64()?,
                word_pos_lo: r.u64()?,
                word_pos_hi: r.u64()?,
            });
        }
        let group_count = r.u32()? as usize;
        let mut groups = Vec::with_capacity(group_count);
        for _ in 0..group_count {
            let name_len = r.take(1)?[0] as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Format("group name not utf8".into()))?;
            let tensor_count = r.u32()? as usize;
            let mut tensors = Vec::with_capacity(tensor_count);
            for _ in 0..tensor_count {
                let rank = r.u32()? as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    shape.push(r.u64()? as usize);
                }
                let len: usize = shape.iter().product();
                let mut data = Vec::with_capacity(len);
                for _ in 0..len {
                    data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
                }
                tensors.push(
                    Tensor::new(shape, data)
                        .map_err(|e| CheckpointError::Format(e.to_string()))?,
                );
            }
            groups.push((name, tensors));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Format(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            epoch,
            sched_step,
            rng_states,
            groups,
        })
    }

    /// Write atomically: to a sibling temp file first, then rename.
    pub fn save(&self, path: &Path) -> CkptResult<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> CkptResult<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> CkptResult<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Format(format!(
                "truncated at byte {}: need {n} more",
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> CkptResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CkptResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sample() -> Checkpoint {
        let mut rng = Rng::from_seed(3);
        for _ in 0..10 {
            rng.uniform();
        }
        Checkpoint {
            epoch: 7,
            sched_step: 350,
            rng_states: vec![rng.state(), Rng::from_seed(9).state()],
            groups: vec![
                (
                    "params".into(),
                    vec![
                        Tensor::rand_uniform(vec![2, 3], -1.0, 1.0, &mut rng),
                        Tensor::rand_uniform(vec![4], -1.0, 1.0, &mut rng),
                    ],
                ),
                ("velocity".into(), vec![Tensor::zeros(vec![2, 3])]),
            ],
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        // and the rng resumes identically
        let mut original = Rng::from_seed(3);
        for _ in 0..10 {
            original.uniform();
        }
        let mut restored = Rng::restore(back.rng_states[0]);
        assert_eq!(original.next_u64(), restored.next_u64());
    }

    #[test]
    fn save_load_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn rejects_corrupt_input() {
        let ckpt = sample();
        let mut bytes = ckpt.to_bytes();
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let mut truncated = ckpt.to_bytes();
        truncated.truncate(truncated.len() - 3);
        assert!(Checkpoint::from_bytes(&truncated).is_err());
    }
}
