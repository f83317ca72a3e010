//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "NFCKPT01"
//! meta_len   u64
//! meta       meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! count      u64      number of tensor entries
//! entry*     key_len u32, key bytes, rank u32, dims u64*rank, values f64*prod(dims)
//! digest     32 bytes SHA-256 over everything above
//! ```
//!
//! Keys: `param/<layer path>` for weights, `stat/<site>/<bn|clean|adv>/<mean|var>`
//! for running statistics, `opt/<layer path>` for optimizer velocity.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::mbn::Branch;
use super::network::{Network, SiteStats};
use crate::autograd::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NFCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub method: String,
    pub norm: String,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub model: ModelConfig,
    /// Free-form extras (training config, best-metric tags).
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: BTreeMap<String, Tensor>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn vec_tensor(v: &[f64]) -> Tensor {
    ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).expect("1-d")
}

impl Checkpoint {
    /// Captures parameters and running statistics of `net`.
    pub fn from_network(net: &Network, meta: CheckpointMeta) -> Self {
        let mut tensors = BTreeMap::new();
        for p in net.params().iter() {
            tensors.insert(format!("param/{}", p.name), (*p.value).clone());
        }
        for (k, s) in net.site_stats().iter().enumerate() {
            match s {
                SiteStats::None => {}
                SiteStats::Bn(rs) => {
                    tensors.insert(format!("stat/{k}/bn/mean"), vec_tensor(&rs.mean));
                    tensors.insert(format!("stat/{k}/bn/var"), vec_tensor(&rs.var));
                }
                SiteStats::Mbn(st) => {
                    for b in [Branch::Clean, Branch::Adv] {
                        let rs = st.bank(b);
                        tensors.insert(format!("stat/{k}/{}/mean", b.name()), vec_tensor(&rs.mean));
                        tensors.insert(format!("stat/{k}/{}/var", b.name()), vec_tensor(&rs.var));
                    }
                }
            }
        }
        Self { meta, tensors }
    }

    /// Rebuilds the network described by the metadata and loads its state.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::new(self.meta.model.clone(), 0)?;
        self.load_into(&mut net)?;
        Ok(net)
    }

    pub fn load_into(&self, net: &mut Network) -> Result<()> {
        let mut params = net.params().clone();
        for i in 0..params.len() {
            let name = params.get(i).name.clone();
            let key = format!("param/{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| fmt_err(format!("missing tensor {key}")))?;
            if t.shape() != params.get(i).value.shape() {
                return Err(fmt_err(format!(
                    "{key}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    params.get(i).value.shape()
                )));
            }
            params.set(i, t.clone());
        }
        let mut stats = net.site_stats().to_vec();
        let load = |key: String, into: &mut Vec<f64>| -> Result<()> {
            let t = self.tensors.get(&key).ok_or_else(|| fmt_err(format!("missing tensor {key}")))?;
            if t.len() != into.len() {
                return Err(fmt_err(format!("{key}: length {} != {}", t.len(), into.len())));
            }
            into.clear();
            into.extend(t.iter().copied());
            Ok(())
        };
        for (k, s) in stats.iter_mut().enumerate() {
            match s {
                SiteStats::None => {}
                SiteStats::Bn(rs) => {
                    load(format!("stat/{k}/bn/mean"), &mut rs.mean)?;
                    load(format!("stat/{k}/bn/var"), &mut rs.var)?;
                }
                SiteStats::Mbn(st) => {
                    for b in [Branch::Clean, Branch::Adv] {
                        let rs = st.bank_mut(b);
                        load(format!("stat/{k}/{}/mean", b.name()), &mut rs.mean)?;
                        load(format!("stat/{k}/{}/var", b.name()), &mut rs.var)?;
                    }
                }
            }
        }
        net.replace_state(params, stats);
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta).map_err(|e| fmt_err(format!("metadata: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (key, t) in &self.tensors {
            out.extend_from_slice(&(key.len() as u32).to_le_bytes());
            out.extend_from_slice(key.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..8] != MAGIC {
            return Err(fmt_err("not a checkpoint (bad magic)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(fmt_err("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| fmt_err(format!("metadata: {e}")))?;
        let count = r.u64()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let klen = r.u32()? as usize;
            let key = String::from_utf8(r.take(klen)?.to_vec()).map_err(|_| fmt_err("key is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| fmt_err("tensor too large"))?)?;
            let vals = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&dims), vals).map_err(|e| fmt_err(format!("{key}: {e}")))?;
            tensors.insert(key, t);
        }
        if r.pos != body.len() {
            return Err(fmt_err("trailing bytes after last entry"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| fmt_err("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nfcore::{Mode, NormStrategy, Routing};

    fn meta(model: ModelConfig) -> CheckpointMeta {
        CheckpointMeta {
            method: "sat".into(),
            norm: model.norm.to_string(),
            config_hash: "abc".into(),
            seed: 3,
            epoch: 2,
            model,
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig {
            width: 4,
            num_classes: 3,
            input_shape: [1, 6, 6],
            norm: NormStrategy::Mbn,
            ..ModelConfig::default()
        };
        let mut net = Network::new(cfg.clone(), 9).unwrap();
        let x = ArrayD::from_shape_fn(IxDyn(&[4, 1, 6, 6]), |d| (d[0] + d[2] * d[3]) as f64 / 30.0);
        net.forward(&x, &Routing::ADV, Mode::Train).unwrap();
        let ck = Checkpoint::from_network(&net, meta(cfg));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let restored = back.to_network().unwrap();
        assert_eq!(restored.site_stats(), net.site_stats());
        assert_eq!(
            restored.predict(&x, &Routing::ADV).unwrap(),
            net.predict(&x, &Routing::ADV).unwrap()
        );
    }

    #[test]
    fn corruption_is_detected() {
        let cfg = ModelConfig {
            width: 2,
            input_shape: [1, 4, 4],
            ..ModelConfig::default()
        };
        let net = Network::new(cfg.clone(), 1).unwrap();
        let mut bytes = Checkpoint::from_network(&net, meta(cfg)).to_bytes().unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(b"garbage").is_err());
    }
}
