//! Binary checkpoint archives: every network's parameters, optimizer state,
//! step counters and the resolved config with its hash.
//!
//! Layout (little endian): magic, version `u32`, config text, config hash
//! (32 bytes), step / critic / generator counters (`u64`), entry count, then
//! per entry a name, rank, dims and `f64` data; a SHA-256 of all preceding
//! bytes closes the file.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::networks::{Models, NETWORK_NAMES};
use crate::tensor::Tensor;
use crate::training::{TrainConfig, TrainState};

const MAGIC: &[u8; 8] = b"GEOADPT\x01";
const VERSION: u32 = 1;

/// SHA-256 of a config text, hex encoded.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub config_hash: String,
    pub step: u64,
    pub critic_updates: u64,
    pub gen_updates: u64,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config_text: &str) -> Self {
        let mut entries = Vec::new();
        for (i, ps) in state.models.param_sets().iter().enumerate() {
            let net = NETWORK_NAMES[i];
            for (name, v) in ps.names().iter().zip(ps.values()) {
                entries.push((format!("{net}/{name}"), v.clone()));
            }
            let opt = &state.opts[i];
            for (name, m) in ps.names().iter().zip(&opt.m) {
                entries.push((format!("adam/{net}/m/{name}"), m.clone()));
            }
            for (name, v) in ps.names().iter().zip(&opt.v) {
                entries.push((format!("adam/{net}/v/{name}"), v.clone()));
            }
            entries.push((format!("adam/{net}/t"), Tensor::scalar(opt.t as f64)));
        }
        Self {
            config_text: config_text.to_string(),
            config_hash: config_hash(config_text),
            step: state.step,
            critic_updates: state.critic_updates,
            gen_updates: state.gen_updates,
            entries,
        }
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
    }

    /// Restores the full training state; `cfg` must build the same networks.
    pub fn to_state(&self, cfg: &TrainConfig) -> Result<TrainState> {
        let mut state = TrainState::new(cfg)?;
        state.step = self.step;
        state.critic_updates = self.critic_updates;
        state.gen_updates = self.gen_updates;
        self.load_models(&mut state.models)?;
        for (i, ps) in state.models.param_sets().iter().enumerate() {
            let net = NETWORK_NAMES[i];
            let opt = &mut state.opts[i];
            for (k, name) in ps.names().iter().enumerate() {
                opt.m[k] = self.checked(&format!("adam/{net}/m/{name}"), ps.values()[k].shape())?;
                opt.v[k] = self.checked(&format!("adam/{net}/v/{name}"), ps.values()[k].shape())?;
            }
            opt.t = self.get(&format!("adam/{net}/t"))?.item() as u64;
        }
        Ok(state)
    }

    fn checked(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "entry {name} has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t.clone())
    }

    /// Copies network parameters into `models`.
    pub fn load_models(&self, models: &mut Models) -> Result<()> {
        for (i, ps) in models.param_sets_mut().into_iter().enumerate() {
            let net = NETWORK_NAMES[i];
            let names = ps.names().to_vec();
            let values = names
                .iter()
                .zip(ps.values())
                .map(|(n, v)| self.checked(&format!("{net}/{n}"), v.shape()))
                .collect::<Result<Vec<_>>>()?;
            ps.load(&names, values)?;
        }
        Ok(())
    }

    /// The run config stored in the checkpoint and networks restored from it.
    pub fn restore_models(&self) -> Result<(RunConfig, Models)> {
        let cfg = RunConfig::parse(&self.config_text)
            .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
        let mut models = Models::new(&cfg.train.net, cfg.train.seed)?;
        self.load_models(&mut models)?;
        Ok((cfg, models))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut b, &self.config_text);
        b.extend_from_slice(&hex::decode(&self.config_hash).unwrap_or_else(|_| vec![0; 32]));
        for v in [self.step, self.critic_updates, self.gen_updates] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut b, name);
            b.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&b);
        b.extend_from_slice(&digest);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("checksum mismatch (corrupt file)".into()));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_text = r.string()?;
        let config_hash = hex::encode(r.take(32)?);
        if config_hash != self::config_hash(&config_text) {
            return Err(Error::Checkpoint(
                "config hash does not match config text".into(),
            ));
        }
        let step = r.u64()?;
        let critic_updates = r.u64()?;
        let gen_updates = r.u64()?;
        let n = r.u64()? as usize;
        let mut entries = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(
                len.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("bad shape".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            entries.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self {
            config_text,
            config_hash,
            step,
            critic_updates,
            gen_updates,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(b: &mut Vec<u8>, s: &str) {
    b.extend_from_slice(&(s.len() as u64).to_le_bytes());
    b.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::NetConfig;

    fn small() -> TrainConfig {
        TrainConfig {
            net: NetConfig {
                size: (8, 8),
                ..NetConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip() {
        let cfg = small();
        let mut state = TrainState::new(&cfg).unwrap();
        state.step = 7;
        state.opts[2].t = 3;
        state.opts[2].m[0] = state.opts[2].m[0].map(|_| 0.25);
        let ck = Checkpoint::from_state(&state, "seed = 0\n");
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_state(&cfg).unwrap(), state);
    }

    #[test]
    fn detects_corruption() {
        let state = TrainState::new(&small()).unwrap();
        let mut bytes = Checkpoint::from_state(&state, "x = 1\n").to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
        bytes.truncate(100);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
