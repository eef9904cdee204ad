//! Run configuration files.
//!
//! TOML, so both `[train]` tables and flat dotted keys (`train.lr = 3e-3`)
//! are accepted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;
use crate::error::{Error, Result};
use crate::mixture::SiteLayout;
use crate::training::TrainConfig;
use crate::transformer::{BackboneConfig, InsertionPoint, Sharing, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// `majority`, `parity`, `keyphrase` or `tsv`.
    pub kind: String,
    pub classes: usize,
    pub seq_len: usize,
    /// Synthetic tasks only.
    #[serde(default)]
    pub examples: Option<usize>,
    #[serde(default)]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// TSV tasks only.
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub variant: Variant,
    #[serde(rename = "M")]
    pub modules: usize,
    pub r: usize,
    #[serde(default)]
    pub sharing: bool,
    /// Defaults to the FFN output for adapters and the query and value
    /// projections for LoRA.
    #[serde(default)]
    pub insertion: Option<Vec<String>>,
    #[serde(default = "default_alpha")]
    pub lora_alpha: f64,
}

fn default_alpha() -> f64 {
    crate::adaptation::DEFAULT_LORA_ALPHA
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    #[default]
    Merge,
    RandomRoute,
    FixedRoute,
    Ensemble,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceMode {
    Merge,
    RandomRoute,
    FixedRoute,
    Ensemble(usize),
}

impl InferenceMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Merge => "merge",
            Self::RandomRoute => "random_route",
            Self::FixedRoute => "fixed_route",
            Self::Ensemble(_) => "ensemble",
        }
    }

    /// Parses `merge`, `random_route`, `fixed_route`, `ensemble` (with `t`
    /// passes) or `ensemble(T)`.
    pub fn parse(s: &str, t: Option<usize>) -> Result<Self> {
        let s = s.trim();
        let mode = match s {
            "merge" => Self::Merge,
            "random_route" => Self::RandomRoute,
            "fixed_route" => Self::FixedRoute,
            "ensemble" => Self::Ensemble(t.unwrap_or(4)),
            _ => match s.strip_prefix("ensemble(").and_then(|r| r.strip_suffix(')')) {
                Some(n) => Self::Ensemble(n.trim().parse().map_err(|_| {
                    Error::Config(format!("inference.mode: bad pass count in {s:?}"))
                })?),
                None => {
                    return Err(Error::Config(format!(
                        "inference.mode: unknown mode {s:?} (expected merge, random_route, fixed_route or ensemble)"
                    )))
                }
            },
        };
        if mode == Self::Ensemble(0) {
            return Err(Error::Config("inference.T must be >= 1".into()));
        }
        Ok(mode)
    }
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Ensemble(t) => write!(f, "ensemble({t})"),
            m => f.write_str(m.name()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: ModeName,
    #[serde(rename = "T", default)]
    pub passes: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl InferenceConfig {
    pub fn mode(&self) -> Result<InferenceMode> {
        match self.mode {
            ModeName::Merge => Ok(InferenceMode::Merge),
            ModeName::RandomRoute => Ok(InferenceMode::RandomRoute),
            ModeName::FixedRoute => Ok(InferenceMode::FixedRoute),
            ModeName::Ensemble => InferenceMode::parse("ensemble", self.passes),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub backbone: BackboneSection,
    pub train: TrainConfig,
    pub adaptation: AdaptationConfig,
    /// Defaults to merge mode.
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub output: Option<OutputConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()
            + &e.span().map(|s| format!(" (at byte {})", s.start)).unwrap_or_default()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn task_kind(&self) -> Result<Option<TaskKind>> {
        match self.task.kind.as_str() {
            "tsv" => Ok(None),
            k => TaskKind::parse(k).map(Some).ok_or_else(|| {
                Error::Config(format!(
                    "task.kind: unknown kind {k:?} (expected majority, parity, keyphrase or tsv)"
                ))
            }),
        }
    }

    /// Backbone shape; `vocab_size` is supplied by the task.
    pub fn backbone_config(&self, vocab_size: usize) -> BackboneConfig {
        BackboneConfig {
            num_layers: self.backbone.num_layers,
            model_dim: self.backbone.model_dim,
            num_heads: self.backbone.num_heads,
            ffn_dim: self.backbone.ffn_dim,
            vocab_size,
            max_seq_len: self.task.seq_len,
            num_classes: self.task.classes,
        }
    }

    pub fn sharing(&self) -> Sharing {
        if self.adaptation.sharing {
            Sharing::ProjectUp
        } else {
            Sharing::None
        }
    }

    pub fn insertion_points(&self) -> Result<Vec<InsertionPoint>> {
        match &self.adaptation.insertion {
            None => Ok(match self.adaptation.variant {
                Variant::Adapter => vec![InsertionPoint::AfterFfn],
                Variant::Lora => vec![InsertionPoint::Query, InsertionPoint::Value],
            }),
            Some(list) => {
                if list.is_empty() {
                    return Err(Error::Config("adaptation.insertion must not be empty".into()));
                }
                let mut out: Vec<InsertionPoint> = Vec::new();
                for p in list {
                    let point = InsertionPoint::parse(p).ok_or_else(|| {
                        Error::Config(format!(
                            "adaptation.insertion: unknown point {p:?} (expected attn, ffn, query or value)"
                        ))
                    })?;
                    if out.contains(&point) {
                        return Err(Error::Config(format!("adaptation.insertion: duplicate {p:?}")));
                    }
                    out.push(point);
                }
                Ok(out)
            }
        }
    }

    pub fn layout(&self) -> Result<SiteLayout> {
        Ok(SiteLayout {
            variant: self.adaptation.variant,
            points: self.insertion_points()?,
            modules: self.adaptation.modules,
            rank: self.adaptation.r,
            sharing: self.sharing(),
            lora_alpha: self.adaptation.lora_alpha,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let kind = self.task_kind()?;
        if self.task.classes < 2 {
            return fail("task.classes must be >= 2".into());
        }
        if self.task.seq_len < 2 {
            return fail("task.seq_len must be >= 2".into());
        }
        match kind {
            Some(_) => {
                if self.task.examples.is_none() {
                    return fail("task.examples is required for synthetic tasks".into());
                }
                if self.task.vocab_size.is_none() {
                    return fail("task.vocab_size is required for synthetic tasks".into());
                }
            }
            None => {
                if self.task.train.is_none() || self.task.test.is_none() {
                    return fail("task.train and task.test are required for tsv tasks".into());
                }
            }
        }
        self.backbone_config(self.task.vocab_size.unwrap_or(4)).validate()?;
        self.train.validate()?;
        if self.adaptation.modules == 0 {
            return fail("adaptation.M must be >= 1".into());
        }
        if self.adaptation.r == 0 || self.adaptation.r >= self.backbone.model_dim {
            return fail(format!(
                "adaptation.r must satisfy 1 <= r < model_dim ({}), got {}",
                self.backbone.model_dim, self.adaptation.r
            ));
        }
        if !(self.adaptation.lora_alpha.is_finite() && self.adaptation.lora_alpha > 0.0) {
            return fail("adaptation.lora_alpha must be positive".into());
        }
        let points = self.insertion_points()?;
        for p in points {
            let ok = match self.adaptation.variant {
                Variant::Adapter => matches!(p, InsertionPoint::AfterAttention | InsertionPoint::AfterFfn),
                Variant::Lora => matches!(p, InsertionPoint::Query | InsertionPoint::Value),
            };
            if !ok {
                return fail(format!(
                    "adaptation.insertion: {} is not valid for {:?}",
                    p.as_str(),
                    self.adaptation.variant
                ));
            }
        }
        self.inference.mode()?;
        Ok(())
    }
}
