//! Self-describing parameter container.
//!
//! Layout (little-endian): `b"IACK"`, version `u32`, header length `u32`,
//! header JSON, tensor count `u32`, then per tensor: name length `u32`,
//! UTF-8 name, rank `u32`, dims `u32 x rank`, `f32` payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{Model, Variant};
use crate::nn::Module;
use crate::pose_codec::read_u32;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IACK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Generator state at the end of training, enough to resume the stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = |what: &str| Error::Checkpoint(format!("invalid rng {what}"));
        if self.seed.len() != 64 {
            return Err(bad("seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad("seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    variant: Variant,
    stage: String,
    metadata: BTreeMap<String, serde_json::Value>,
    rng: RngState,
    config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub variant: Variant,
    /// Training stage that produced the parameters, e.g. `stream:pose`.
    pub stage: String,
    pub metadata: BTreeMap<String, serde_json::Value>,
    pub rng: RngState,
    /// Snapshot of the configuration the model was built from.
    pub config: serde_json::Value,
    /// Every parameter and normalization buffer, in module order.
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, cfg: &Config, stage: &str, rng: &ChaCha8Rng) -> Result<Self> {
        let mut tensors = Vec::new();
        model.visit("", &mut |name, p| {
            tensors.push(Tensor {
                name: name.to_string(),
                shape: p.shape().to_vec(),
                data: p.value.iter().map(|&v| v as f32).collect(),
            })
        });
        let mut cfg = cfg.clone();
        cfg.model = model.cfg.clone();
        Ok(Self {
            variant: model.variant(),
            stage: stage.to_string(),
            metadata: BTreeMap::new(),
            rng: RngState::capture(rng),
            config: serde_json::to_value(&cfg)?,
            tensors,
        })
    }

    pub fn with_meta(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.metadata.insert(key.to_string(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn config(&self) -> Result<Config> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Rebuilds the model this checkpoint was taken from.
    pub fn build_model(&self) -> Result<Model> {
        let cfg = self.config()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = Model::new(
            cfg.model.clone(),
            &cfg.stream(crate::backbone::StreamKind::Appearance),
            &cfg.stream(crate::backbone::StreamKind::Pose),
            &cfg.integrator,
            &mut rng,
        )?;
        self.load_into(&mut model, |_| true)?;
        Ok(model)
    }

    /// Copies every model tensor accepted by `filter` from this checkpoint.
    /// Missing names and shape mismatches are errors.
    pub fn load_into(&self, model: &mut Model, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let by_name: BTreeMap<&str, &Tensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut err = None;
        let mut loaded = 0;
        model.visit_mut("", &mut |name, p| {
            if err.is_some() || !filter(name) {
                return;
            }
            match by_name.get(name) {
                None => err = Some(Error::Checkpoint(format!("tensor {name} missing from {} checkpoint", self.stage))),
                Some(t) if t.shape != p.shape() => {
                    err = Some(Error::Checkpoint(format!(
                        "tensor {name}: checkpoint shape {:?}, model shape {:?}",
                        t.shape,
                        p.shape()
                    )))
                }
                Some(t) => {
                    p.value = ArrayD::from_shape_vec(IxDyn(&t.shape), t.data.iter().map(|&v| v as f64).collect())
                        .expect("shape checked");
                    loaded += 1;
                }
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(loaded),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            variant: self.variant,
            stage: self.stage.clone(),
            metadata: self.metadata.clone(),
            rng: self.rng.clone(),
            config: self.config.clone(),
        };
        let header = serde_json::to_vec(&header)?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut header = vec![0u8; read_u32(&mut r)? as usize];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let mut name = vec![0u8; read_u32(&mut r)? as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            tensors.push(Tensor { name, shape, data });
        }
        Ok(Self {
            variant: header.variant,
            stage: header.stage,
            metadata: header.metadata,
            rng: header.rng,
            config: header.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut v = Vec::new();
        self.write_to(&mut v)?;
        Ok(v)
    }
}
