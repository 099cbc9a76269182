//! Checkpoint container.
//!
//! Layout: the 8 magic bytes `SQCLRCK1`, a little-endian `u64` header
//! length, the JSON header, then every tensor as little-endian `f64` in
//! header order. Parameters, batch-norm buffers and the optimizer's running
//! averages are all stored, each header entry tagged with its role.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optimizer::{OptimizerSpec, OptimizerState};
use crate::data::Charset;
use crate::decoders::{self, DecoderConfig, HEAD_PREFIX};
use crate::encoder::{self, EncoderConfig, ENCODER_PREFIX, PROJECTION_PREFIX};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SQCLRCK1";
const FORMAT: u32 = 1;

/// All randomness is derived from the seed and the iteration counter, so
/// this pair is the full random state of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub position: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    Buffer,
    SqGrad,
    SqDelta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    role: Role,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: u32,
    encoder: EncoderConfig,
    optimizer: OptimizerSpec,
    iteration: usize,
    total_iterations: usize,
    rng: RngState,
    charset: Option<Charset>,
    decoder: Option<DecoderConfig>,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub optimizer: OptimizerSpec,
    /// Completed iterations.
    pub iteration: usize,
    pub total_iterations: usize,
    pub rng: RngState,
    /// Present once a decoder is attached.
    pub charset: Option<Charset>,
    pub decoder: Option<DecoderConfig>,
    pub params: ParamStore,
    pub opt_state: OptimizerState,
}

impl Checkpoint {
    /// Freshly initialized encoder, no training.
    pub fn untrained(encoder: &EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: encoder::init_encoder(encoder, seed)?,
            encoder: encoder.clone(),
            optimizer: OptimizerSpec::default(),
            iteration: 0,
            total_iterations: 0,
            rng: RngState { seed, position: 0 },
            charset: None,
            decoder: None,
            opt_state: OptimizerState::default(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payload: Vec<(&str, Role, &Tensor)> = self
            .params
            .params()
            .map(|(n, t)| (n, Role::Param, t))
            .chain(self.params.buffers().map(|(n, t)| (n, Role::Buffer, t)))
            .chain(self.opt_state.sq_grad.iter().map(|(n, t)| (n.as_str(), Role::SqGrad, t)))
            .chain(self.opt_state.sq_delta.iter().map(|(n, t)| (n.as_str(), Role::SqDelta, t)))
            .collect();
        let tensors = payload
            .iter()
            .map(|(n, role, t)| Entry {
                name: n.to_string(),
                role: *role,
                shape: t.shape().to_vec(),
            })
            .collect();
        let header = Header {
            format: FORMAT,
            encoder: self.encoder.clone(),
            optimizer: self.optimizer.clone(),
            iteration: self.iteration,
            total_iterations: self.total_iterations,
            rng: self.rng,
            charset: self.charset.clone(),
            decoder: self.decoder,
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let numel: usize = payload.iter().map(|p| p.2.numel()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * numel);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Incompatible(format!("not a checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Incompatible(format!("checkpoint header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Incompatible(format!("unsupported checkpoint format {}", header.format)));
        }
        let mut data = &bytes[16 + len..];
        let mut params = ParamStore::new();
        let mut opt_state = OptimizerState::default();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            if data.len() < 8 * n {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            data = &data[8 * n..];
            let t = Tensor::new(e.shape, values);
            match e.role {
                Role::Param => params.insert(e.name, t),
                Role::Buffer => params.insert_buffer(e.name, t),
                Role::SqGrad => {
                    opt_state.sq_grad.insert(e.name, t);
                }
                Role::SqDelta => {
                    opt_state.sq_delta.insert(e.name, t);
                }
            }
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let ck = Self {
            encoder: header.encoder,
            optimizer: header.optimizer,
            iteration: header.iteration,
            total_iterations: header.total_iterations,
            rng: header.rng,
            charset: header.charset,
            decoder: header.decoder,
            params,
            opt_state,
        };
        ck.check_architecture()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("partial");
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_bytes(&bytes)
    }

    /// Checks that the stored tensors are exactly what the header's
    /// configuration builds.
    pub fn check_architecture(&self) -> Result<()> {
        self.encoder
            .validate()
            .map_err(|e| Error::Incompatible(format!("stored encoder config: {e}")))?;
        let mut expected = encoder::init_encoder(&self.encoder, 0)?;
        if self.params.names().any(|n| n.starts_with(PROJECTION_PREFIX)) {
            encoder::init_projection(&mut expected, &self.encoder, 0);
        }
        match (&self.decoder, &self.charset) {
            (Some(d), Some(c)) => decoders::init_decoder(&mut expected, d, self.encoder.output_dim(), c.len(), 0),
            (None, _) => {}
            (Some(_), None) => return Err(Error::Incompatible("decoder stored without a charset".into())),
        }
        let shapes = |s: &ParamStore| -> BTreeMap<String, Vec<usize>> {
            s.params()
                .chain(s.buffers())
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect()
        };
        let (have, want) = (shapes(&self.params), shapes(&expected));
        if have != want {
            let missing: Vec<&String> = want.keys().filter(|k| !have.contains_key(*k)).collect();
            let extra: Vec<&String> = have.keys().filter(|k| !want.contains_key(*k)).collect();
            let reshaped: Vec<&String> = want
                .iter()
                .filter(|(k, s)| have.get(*k).is_some_and(|h| h != *s))
                .map(|(k, _)| k)
                .collect();
            return Err(Error::Incompatible(format!(
                "tensors do not match the stored configuration (missing {missing:?}, unexpected {extra:?}, wrong shape {reshaped:?})"
            )));
        }
        Ok(())
    }

    /// Fails unless this checkpoint was built with `cfg`.
    pub fn require_encoder(&self, cfg: &EncoderConfig) -> Result<()> {
        if &self.encoder != cfg {
            return Err(Error::Incompatible(format!(
                "checkpoint encoder {} does not match configured encoder {}",
                serde_json::to_string(&self.encoder)?,
                serde_json::to_string(cfg)?
            )));
        }
        Ok(())
    }

    pub fn encoder_digest(&self) -> String {
        self.params.digest(ENCODER_PREFIX)
    }

    /// The encoder alone: projection head, decoder and optimizer state dropped.
    pub fn encoder_only(&self) -> Checkpoint {
        let mut c = self.clone();
        c.params.remove_prefix(PROJECTION_PREFIX);
        c.params.remove_prefix(HEAD_PREFIX);
        c.decoder = None;
        c.charset = None;
        c.opt_state = OptimizerState::default();
        c
    }
}
