//! Binary checkpoints.
//!
//! Layout (little endian): magic `VSTB`, `u32` format version, `u32`
//! config length and the config text, RNG state (32-byte seed, `u64`
//! stream, `u128` word position), `u32` record count, then per record a
//! `u32`-prefixed name, `u32` rank, `u64` dims and the `f32` values.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use vstb::{Error, ParamStore, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"VSTB";
/// Bump whenever the set, names or shapes of stored parameters change.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
    /// Config text of the run that produced the checkpoint.
    pub config: String,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn new(config: String, rng: RngState) -> Self {
        Self {
            records: Vec::new(),
            config,
            rng,
        }
    }

    /// Appends every parameter of `store` as `prefix.name`.
    pub fn add_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (_, name, t) in store.iter() {
            self.records.push(Record {
                name: format!("{prefix}.{name}"),
                dims: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
    }

    pub fn records_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Record)> + 'a {
        self.records
            .iter()
            .filter_map(move |r| r.name.strip_prefix(prefix)?.strip_prefix('.').map(|n| (n, r)))
    }

    /// Loads the `prefix.*` records into `store`, which must hold exactly
    /// the same names and shapes.
    pub fn restore_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let mut seen = 0;
        for (name, r) in self.records_with_prefix(prefix) {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("checkpoint record {prefix}.{name} has no matching parameter")))?;
            if store.get(id).shape() != r.dims.as_slice() {
                return Err(Error::Format(format!(
                    "checkpoint record {prefix}.{name} has shape {:?}, model expects {:?}",
                    r.dims,
                    store.get(id).shape()
                )));
            }
            store.assign(name, Tensor::new(&r.dims, r.data.clone())?)?;
            seen += 1;
        }
        if seen != store.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {seen} {prefix} records, model has {} parameters",
                store.len()
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_bytes(&mut out, self.config.as_bytes());
        out.extend_from_slice(&self.rng.seed);
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            put_bytes(&mut out, r.name.as_bytes());
            out.extend_from_slice(&(r.dims.len() as u32).to_le_bytes());
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                expected: format!("checkpoint v{CHECKPOINT_VERSION}"),
                found: format!("checkpoint v{version}"),
            });
        }
        let config = String::from_utf8(r.prefixed()?.to_vec())
            .map_err(|_| Error::Format("checkpoint config is not UTF-8".into()))?;
        let mut seed = [0u8; 32];
        seed.copy_from_slice(r.take(32)?);
        let stream = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.u32()? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = String::from_utf8(r.prefixed()?.to_vec())
                .map_err(|_| Error::Format("checkpoint record name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format(format!("record {name}: dims overflow")))?;
            let data = r
                .take(len)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            records.push(Record { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
        }
        Ok(Self {
            records,
            config,
            rng: RngState { seed, stream, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("checkpoint {}: {e}", path.display())))
        })?;
        Self::from_bytes(&bytes)
    }
}

/// FNV-1a hash of the record names and shapes (values excluded).
pub fn layout_fingerprint(records: &[Record]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for r in records {
        eat(r.name.as_bytes());
        for &d in &r.dims {
            eat(&(d as u64).to_le_bytes());
        }
        eat(b";");
    }
    h
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("checkpoint is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn prefixed(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use vstb::agent::Agent;
    use vstb::vae::Vae;

    use super::*;
    use crate::config::ExperimentConfig;

    fn default_checkpoint() -> Checkpoint {
        let cfg = ExperimentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut enc = ParamStore::new();
        Vae::new(&mut enc, cfg.vae, &mut rng);
        let mut agent = ParamStore::new();
        Agent::new(&mut agent, cfg.agent.clone(), &mut rng);
        let mut c = Checkpoint::new(cfg.to_text(), RngState::capture(&rng));
        c.add_store("encoder", &enc);
        c.add_store("agent", &agent);
        c
    }

    /// Changing the parameter layout must come with a version bump: update
    /// both constants together.
    #[test]
    fn layout_is_pinned_to_the_format_version() {
        let c = default_checkpoint();
        assert_eq!(
            (CHECKPOINT_VERSION, c.records.len(), layout_fingerprint(&c.records)),
            (1, 50, 0xccb4_e1be_1b32_0f43)
        );
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = default_checkpoint();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rng_state_resumes_the_stream() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: u64 = rng.random();
        let saved = RngState::capture(&rng);
        let a: [u64; 4] = rng.random();
        let b: [u64; 4] = saved.restore().random();
        assert_eq!(a, b);
    }

    #[test]
    fn other_versions_and_corruption_are_rejected() {
        let mut bytes = default_checkpoint().to_bytes();
        bytes[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::SchemaVersion { .. })));
        let good = default_checkpoint().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(&good[..good.len() - 3]), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::from_bytes(b"NOPE"), Err(Error::Format(_))));
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let c = default_checkpoint();
        let cfg = ExperimentConfig::default();
        let mut enc = ParamStore::new();
        Vae::new(&mut enc, cfg.vae, &mut ChaCha8Rng::seed_from_u64(0));
        c.restore_store("encoder", &mut enc).unwrap();
        let mut other = ParamStore::new();
        Vae::new(
            &mut other,
            vstb::vae::VaeConfig {
                hidden: 64,
                ..cfg.vae
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert!(matches!(c.restore_store("encoder", &mut other), Err(Error::Format(_))));
    }
}
