//! Binary checkpoint format.
//!
//! ```text
//! "NCRF"                      4 bytes magic
//! version                     u32
//! entry count                 u32
//! per entry:
//!   name length, name         u32, UTF-8 bytes
//!   rank, dims                u32, rank × u64
//!   payload                   Π dims × f64
//! metadata length, metadata   u64, UTF-8 `key=value` lines
//! ```
//!
//! All integers and floats are little-endian. Entries are written in name
//! order and metadata lines in key order, so equal checkpoints serialize to
//! equal bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::cnn::{CnnConfig, ConvLayerSpec};
use crate::dataset::EpochTiming;
use crate::error::{Error, Result};
use crate::gru::{Candidate, GruConfig};
use crate::model::{model_init, ModelConfig, ModelKind};
use crate::numeric::{Params, Tensor};

pub const MAGIC: &[u8; 4] = b"NCRF";
pub const FORMAT_VERSION: u32 = 1;

/// A trained (or freshly initialized) model with free-form training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Params,
    /// Extra metadata such as seed, best epoch and validation κ.
    pub info: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Fails with a kind-mismatch error unless the checkpoint holds `expected`.
    pub fn expect_kind(&self, expected: ModelKind) -> Result<()> {
        if self.kind() != expected {
            return Err(Error::KindMismatch {
                expected: expected.name().into(),
                found: self.kind().name().into(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let meta = self.metadata_text()?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    fn metadata_text(&self) -> Result<String> {
        let mut meta = config_to_map(&self.config);
        for (k, v) in &self.info {
            if meta.contains_key(k) || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Format {
                    field: k.clone(),
                    message: "metadata key clashes with model configuration or is malformed".into(),
                });
            }
            meta.insert(k.clone(), v.clone());
        }
        Ok(meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(fmt_err("magic", "not an NCRF checkpoint"));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(fmt_err("version", format!("unsupported version {version}")));
        }
        let count = r.u32("entry_count")?;
        let mut params = Params::new();
        for i in 0..count {
            let len = r.u32("name_length")? as usize;
            let name = String::from_utf8(r.take(len, "name")?.to_vec())
                .map_err(|_| fmt_err("name", format!("entry {i} is not UTF-8")))?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(fmt_err("rank", format!("`{name}` has rank {rank}")));
            }
            let dims = (0..rank)
                .map(|_| r.u64("dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| fmt_err("payload", format!("`{name}` payload exceeds file")))?;
            let data = r
                .take(n * 8, "payload")?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if params.contains(&name) {
                return Err(fmt_err("name", format!("duplicate entry `{name}`")));
            }
            params.insert(name, Tensor::new(dims, data)?);
        }
        let meta_len = r.u64("metadata_length")? as usize;
        let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .map_err(|_| fmt_err("metadata", "not UTF-8"))?;
        if r.remaining() != 0 {
            return Err(fmt_err("metadata", "trailing bytes after metadata"));
        }
        let mut map = BTreeMap::new();
        for line in meta.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| fmt_err("metadata", format!("line `{line}` is not key=value")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let config = config_from_map(&mut map)?;
        check_shapes(&config, &params)?;
        Ok(Self {
            config,
            params,
            info: map,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn fmt_err(field: &str, message: impl Into<String>) -> Error {
    Error::Format {
        field: field.into(),
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(fmt_err(field, "file is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

fn config_to_map(c: &ModelConfig) -> BTreeMap<String, String> {
    let layers: Vec<String> = c
        .cnn
        .layers
        .iter()
        .map(|l| format!("{}:{}:{}:{}:{}", l.kernel_width, l.stride, l.out_channels, l.pool_window, l.dropout_rate))
        .collect();
    let residuals: Vec<String> = c.cnn.residuals.iter().map(|(s, t)| format!("{s}>{t}")).collect();
    [
        ("model.kind", c.kind.name().to_string()),
        ("model.sample_rate_hz", c.timing.sample_rate_hz.to_string()),
        ("model.epoch_seconds", c.timing.epoch_seconds.to_string()),
        ("model.cnn.input_channels", c.cnn.input_channels.to_string()),
        ("model.cnn.layers", layers.join(",")),
        ("model.cnn.residuals", residuals.join(",")),
        ("model.gru.hidden_dim", c.gru.hidden_dim.to_string()),
        ("model.gru.candidate", c.gru.candidate.name().to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn config_from_map(map: &mut BTreeMap<String, String>) -> Result<ModelConfig> {
    let mut take = |key: &str| map.remove(key).ok_or_else(|| fmt_err(key, "missing"));
    fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
        v.parse().map_err(|_| fmt_err(key, format!("invalid value `{v}`")))
    }
    let kind: ModelKind = take("model.kind")?
        .parse()
        .map_err(|_| fmt_err("model.kind", "unknown model kind"))?;
    let timing = EpochTiming {
        sample_rate_hz: num("model.sample_rate_hz", &take("model.sample_rate_hz")?)?,
        epoch_seconds: num("model.epoch_seconds", &take("model.epoch_seconds")?)?,
    };
    let input_channels = num("model.cnn.input_channels", &take("model.cnn.input_channels")?)?;
    let layers = take("model.cnn.layers")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|spec| {
            let f: Vec<&str> = spec.split(':').collect();
            let [w, s, c, p, d] = f[..] else {
                return Err(fmt_err("model.cnn.layers", format!("bad layer `{spec}`")));
            };
            let key = "model.cnn.layers";
            Ok(ConvLayerSpec {
                kernel_width: num(key, w)?,
                stride: num(key, s)?,
                out_channels: num(key, c)?,
                pool_window: num(key, p)?,
                dropout_rate: num(key, d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let residuals = take("model.cnn.residuals")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|pair| {
            let (s, t) = pair
                .split_once('>')
                .ok_or_else(|| fmt_err("model.cnn.residuals", format!("bad pair `{pair}`")))?;
            Ok((num("model.cnn.residuals", s)?, num("model.cnn.residuals", t)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let hidden_dim = num("model.gru.hidden_dim", &take("model.gru.hidden_dim")?)?;
    let candidate = Candidate::from_name(&take("model.gru.candidate")?)
        .ok_or_else(|| fmt_err("model.gru.candidate", "unknown activation"))?;
    let cnn = CnnConfig {
        layers,
        residuals,
        input_channels,
    };
    let config = ModelConfig {
        kind,
        timing,
        gru: GruConfig {
            input_dim: cnn.output_channels(),
            hidden_dim,
            candidate,
        },
        cnn,
    };
    config
        .validate()
        .map_err(|e| fmt_err("model", format!("invalid configuration: {e}")))?;
    Ok(config)
}

fn check_shapes(config: &ModelConfig, params: &Params) -> Result<()> {
    let expected = model_init(config, 0)?;
    if expected.len() != params.len() {
        return Err(fmt_err(
            "shape_table",
            format!("expected {} arrays, found {}", expected.len(), params.len()),
        ));
    }
    for (name, t) in expected.iter() {
        let got = params
            .get(name)
            .map_err(|_| fmt_err("shape_table", format!("missing array `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(fmt_err(
                "shape_table",
                format!("`{name}` has shape {:?}, expected {:?}", got.shape(), t.shape()),
            ));
        }
    }
    if !params.all_finite() {
        return Err(fmt_err("payload", "non-finite parameter values"));
    }
    Ok(())
}
