//! Checkpoint files: a text manifest followed by a little-endian `f64`
//! payload.
//!
//! ```text
//! MOA-CKPT 1 <manifest bytes>\n
//! <TOML manifest>
//! <payload>
//! ```
//!
//! The frozen backbone is not stored. It is rebuilt from its config and
//! seed, and the encoder checksum in the manifest guards against drift. The
//! classifier head, every adaptation tensor and (optionally) optimizer
//! moments and the routing RNG position are stored in the payload.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::Factor;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mixture::{AdaptedModel, MixtureSite};
use crate::tensor::{Parameterized, Tensor};
use crate::training::{Moments, OptimizerState};
use crate::transformer::{build_backbone, freeze_backbone, BackboneConfig, InsertionPoint, Sharing, Variant};

pub const MAGIC: &str = "MOA-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneRecord {
    pub config: BackboneConfig,
    pub seed: u64,
    pub train_head: bool,
    pub encoder_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerRecord {
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngRecord {
    pub seed: String,
    pub stream: String,
    pub word_pos: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub epochs: usize,
    pub steps: u64,
    /// Module count before merging, for merged files.
    #[serde(default)]
    pub merged_from: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteRecord {
    pub layer: usize,
    pub point: String,
    pub variant: Variant,
    pub sharing: Sharing,
    pub modules: usize,
    pub ups: usize,
    pub rank: usize,
    pub lora_alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    /// Number of `f64` values.
    pub len: usize,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub payload_sha256: String,
    pub state: TrainState,
    pub backbone: BackboneRecord,
    #[serde(default)]
    pub optimizer: Option<OptimizerRecord>,
    #[serde(default)]
    pub routing_rng: Option<RngRecord>,
    pub config: RunConfig,
    pub sites: Vec<SiteRecord>,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub backbone_seed: u64,
    pub train_head: bool,
    pub model: AdaptedModel,
    pub state: TrainState,
    pub optimizer: Option<OptimizerState>,
    pub routing_rng: Option<ChaCha8Rng>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn stored_params(model: &AdaptedModel) -> Vec<(String, &Tensor)> {
    model
        .named_params()
        .into_iter()
        .filter(|(n, _)| !n.starts_with("backbone.") || n.starts_with("backbone.head."))
        .collect()
}

impl Checkpoint {
    pub fn manifest_and_payload(&self) -> (Manifest, Vec<u8>) {
        let mut payload = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, shape: &[usize], data: &[f64]| {
            let bytes: Vec<u8> = data.iter().flat_map(|x| x.to_le_bytes()).collect();
            tensors.push(TensorRecord {
                name,
                shape: shape.to_vec(),
                offset: payload.len(),
                len: data.len(),
                sha256: sha256_hex(&bytes),
            });
            payload.extend_from_slice(&bytes);
        };
        for (name, t) in stored_params(&self.model) {
            push(name, &t.shape, &t.data);
        }
        let shapes: HashMap<String, Vec<usize>> = stored_params(&self.model)
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        if let Some(opt) = &self.optimizer {
            for (name, mom) in &opt.moments {
                let shape = shapes.get(name).cloned().unwrap_or_else(|| vec![mom.m.len()]);
                push(format!("optim.m.{name}"), &shape, &mom.m);
                push(format!("optim.v.{name}"), &shape, &mom.v);
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            payload_sha256: sha256_hex(&payload),
            state: self.state.clone(),
            backbone: BackboneRecord {
                config: self.model.backbone.config.clone(),
                seed: self.backbone_seed,
                train_head: self.train_head,
                encoder_sha256: self.model.backbone.encoder_checksum(),
            },
            optimizer: self.optimizer.as_ref().map(|o| OptimizerRecord {
                step: o.step,
                lr: o.lr,
                weight_decay: o.weight_decay,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
            }),
            routing_rng: self.routing_rng.as_ref().map(|r| RngRecord {
                seed: hex::encode(r.get_seed()),
                stream: r.get_stream().to_string(),
                word_pos: r.get_word_pos().to_string(),
            }),
            config: self.config.clone(),
            sites: self
                .model
                .sites
                .iter()
                .map(|s| SiteRecord {
                    layer: s.layer,
                    point: s.point.as_str().to_string(),
                    variant: s.variant,
                    sharing: s.sharing,
                    modules: s.num_modules(),
                    ups: s.ups.len(),
                    rank: s.rank,
                    lora_alpha: s.lora_alpha,
                })
                .collect(),
            tensors,
        };
        (manifest, payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (manifest, payload) = self.manifest_and_payload();
        let text = toml::to_string(&manifest).expect("manifest serializes");
        let mut out = format!("{MAGIC} {FORMAT_VERSION} {}\n", text.len()).into_bytes();
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&payload);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Parses and validates the manifest without rebuilding the model.
    pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Data("checkpoint: missing header line".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Data("checkpoint: header is not text".into()))?;
        let parts: Vec<&str> = header.split(' ').collect();
        let (version, len) = match parts.as_slice() {
            [magic, v, n] if *magic == MAGIC => (
                v.parse::<u32>().map_err(|_| Error::Data("checkpoint: bad version".into()))?,
                n.parse::<usize>()
                    .map_err(|_| Error::Data("checkpoint: bad manifest length".into()))?,
            ),
            _ => return Err(Error::Data(format!("checkpoint: not a {MAGIC} file"))),
        };
        if version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint: unsupported format version {version}"
            )));
        }
        let body = &bytes[nl + 1..];
        if body.len() < len {
            return Err(Error::Data("checkpoint: truncated manifest".into()));
        }
        let text = std::str::from_utf8(&body[..len])
            .map_err(|_| Error::Data("checkpoint: manifest is not UTF-8".into()))?;
        let manifest: Manifest = toml::from_str(text)
            .map_err(|e| Error::Data(format!("checkpoint manifest: {}", e.message())))?;
        let payload = &body[len..];
        let found = sha256_hex(payload);
        if found != manifest.payload_sha256 {
            return Err(Error::Checksum {
                what: "checkpoint payload".into(),
                expected: manifest.payload_sha256.clone(),
                found,
            });
        }
        Ok((manifest, payload))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = Self::read_manifest(bytes)?;
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for rec in &manifest.tensors {
            let end = rec
                .len
                .checked_mul(8)
                .and_then(|n| n.checked_add(rec.offset))
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Data(format!("checkpoint: tensor {} out of bounds", rec.name)))?;
            let raw = &payload[rec.offset..end];
            let found = sha256_hex(raw);
            if found != rec.sha256 {
                return Err(Error::Checksum {
                    what: format!("tensor {}", rec.name),
                    expected: rec.sha256.clone(),
                    found,
                });
            }
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(rec.shape.clone(), data)
                .map_err(|_| Error::Data(format!("checkpoint: tensor {} has wrong shape", rec.name)))?;
            if tensors.insert(rec.name.clone(), t).is_some() {
                return Err(Error::Data(format!("checkpoint: duplicate tensor {}", rec.name)));
            }
        }
        let mut take = |name: &str, trainable: bool| -> Result<Tensor> {
            tensors
                .remove(name)
                .map(|t| t.with_grad(trainable))
                .ok_or_else(|| Error::Data(format!("checkpoint: missing tensor {name}")))
        };

        let bb = &manifest.backbone;
        let mut backbone = build_backbone(&bb.config, bb.seed)?;
        freeze_backbone(&mut backbone, bb.train_head);
        let found = backbone.encoder_checksum();
        if found != bb.encoder_sha256 {
            return Err(Error::Checksum {
                what: "rebuilt backbone encoder".into(),
                expected: bb.encoder_sha256.clone(),
                found,
            });
        }
        backbone.classifier.weight = take("backbone.head.weight", bb.train_head)?;
        backbone.classifier.bias = take("backbone.head.bias", bb.train_head)?;

        let mut sites = Vec::with_capacity(manifest.sites.len());
        for rec in &manifest.sites {
            let point = InsertionPoint::parse(&rec.point)
                .ok_or_else(|| Error::Data(format!("checkpoint: unknown site point {:?}", rec.point)))?;
            let name = format!("layer{}.{}", rec.layer, rec.point);
            let mut factor = |side: &str, i: usize| -> Result<Factor> {
                let prefix = format!("site.{name}.{side}.{i}");
                let weight = take(&format!("{prefix}.weight"), true)?;
                let bias = match rec.variant {
                    Variant::Adapter => Some(take(&format!("{prefix}.bias"), true)?),
                    Variant::Lora => None,
                };
                Ok(Factor { weight, bias })
            };
            let downs = (0..rec.modules).map(|k| factor("down", k)).collect::<Result<_>>()?;
            let ups = (0..rec.ups).map(|j| factor("up", j)).collect::<Result<_>>()?;
            sites.push(MixtureSite {
                layer: rec.layer,
                point,
                variant: rec.variant,
                sharing: rec.sharing,
                rank: rec.rank,
                lora_alpha: rec.lora_alpha,
                downs,
                ups,
            });
        }
        let model = AdaptedModel::new(backbone, sites);

        let optimizer = match &manifest.optimizer {
            None => None,
            Some(o) => {
                let mut moments = std::collections::BTreeMap::new();
                for (name, t) in model.named_params() {
                    if !t.requires_grad {
                        continue;
                    }
                    let m = take(&format!("optim.m.{name}"), false)?.data;
                    let v = take(&format!("optim.v.{name}"), false)?.data;
                    moments.insert(name, Moments { m, v });
                }
                Some(OptimizerState {
                    step: o.step,
                    lr: o.lr,
                    weight_decay: o.weight_decay,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    moments,
                })
            }
        };
        if let Some(extra) = tensors.keys().min() {
            return Err(Error::Data(format!("checkpoint: unexpected tensor {extra}")));
        }
        let routing_rng = manifest.routing_rng.as_ref().map(restore_rng).transpose()?;
        Ok(Checkpoint {
            config: manifest.config,
            backbone_seed: bb.seed,
            train_head: bb.train_head,
            model,
            state: manifest.state,
            optimizer,
            routing_rng,
        })
    }

    /// The M=1 checkpoint holding the merged modules. Training-only state
    /// (optimizer moments, RNG position) is dropped.
    pub fn merged(&self) -> Checkpoint {
        let mut config = self.config.clone();
        config.adaptation.modules = 1;
        config.adaptation.sharing = false;
        Checkpoint {
            config,
            model: self.model.merged(),
            state: TrainState {
                merged_from: Some(self.state.merged_from.unwrap_or(self.model.max_modules())),
                ..self.state.clone()
            },
            optimizer: None,
            routing_rng: None,
            ..self.clone()
        }
    }
}

fn restore_rng(r: &RngRecord) -> Result<ChaCha8Rng> {
    let bad = || Error::Data("checkpoint: malformed routing RNG state".into());
    let seed: [u8; 32] = hex::decode(&r.seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(bad)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.stream.parse().map_err(|_| bad())?);
    rng.set_word_pos(r.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}
