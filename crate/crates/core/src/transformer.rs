//! Frozen toy transformer encoder with classifier head and insertion points
//! for adaptation modules.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Parameterized, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone.{name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "backbone.num_heads ({}) must divide backbone.model_dim ({})",
                self.num_heads, self.model_dim
            )));
        }
        Ok(())
    }

    /// Number of scalar parameters in the encoder stack, excluding the
    /// classifier head.
    pub fn encoder_param_count(&self) -> usize {
        let d = self.model_dim;
        let f = self.ffn_dim;
        let embed = self.vocab_size * d + self.max_seq_len * d + 2 * d;
        let attn = 4 * (d * d + d);
        let ffn = d * f + f + f * d + d;
        let norms = 4 * d;
        embed + self.num_layers * (attn + ffn + norms)
    }

    pub fn head_param_count(&self) -> usize {
        self.num_classes * self.model_dim + self.num_classes
    }
}

/// A `y = x·Wᵀ + b` projection, weights stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[d_out, d_in], 1.0 / (d_in as f64).sqrt(), rng),
            bias: Tensor::zeros(&[d_out]),
        }
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul_t(x, w)?;
        tape.add_bias(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::filled(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }

    pub fn forward<'p>(&'p self, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
        let g = tape.param(&self.gain);
        let b = tape.param(&self.bias);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

/// Where a sub-layer adapter sits inside an encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsertionPoint {
    /// On the attention output projection, before the residual add and norm.
    AfterAttention,
    /// On the FFN output, before the residual add and norm.
    AfterFfn,
    /// Low-rank delta on the query projection.
    Query,
    /// Low-rank delta on the value projection.
    Value,
}

impl InsertionPoint {
    pub fn as_str(self) -> &'static str {
        match self {
            InsertionPoint::AfterAttention => "attn",
            InsertionPoint::AfterFfn => "ffn",
            InsertionPoint::Query => "query",
            InsertionPoint::Value => "value",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "attn" => InsertionPoint::AfterAttention,
            "ffn" => InsertionPoint::AfterFfn,
            "query" => InsertionPoint::Query,
            "value" => InsertionPoint::Value,
            _ => return None,
        })
    }
}

/// Callbacks through which adaptation modules modify the encoder.
///
/// `adapt_sublayer` sees a sub-layer output at `AfterAttention` /
/// `AfterFfn`; `adapt_projection` sees the input `x` and the frozen
/// projection result `base` at `Query` / `Value`.
pub trait AdaptationHooks<'p> {
    fn adapt_sublayer(
        &self,
        _tape: &mut Tape<'p>,
        _layer: usize,
        _point: InsertionPoint,
        h: Var,
    ) -> Result<Var> {
        Ok(h)
    }

    fn adapt_projection(
        &self,
        _tape: &mut Tape<'p>,
        _layer: usize,
        _point: InsertionPoint,
        _x: Var,
        base: Var,
    ) -> Result<Var> {
        Ok(base)
    }
}

/// The frozen encoder, unchanged.
pub struct NoHooks;

impl AdaptationHooks<'_> for NoHooks {}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneModel {
    pub config: BackboneConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub embed_norm: LayerNorm,
    pub layers: Vec<EncoderLayer>,
    pub classifier: Linear,
}

/// Deterministic initialization: Gaussian weights scaled by fan-in, zero
/// biases, unit norm gains. Everything starts trainable; see
/// [`freeze_backbone`].
pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<BackboneModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.model_dim;
    let token_embedding = Tensor::randn(&[config.vocab_size, d], 1.0, &mut rng);
    let position_embedding = Tensor::randn(&[config.max_seq_len, d], 1.0, &mut rng);
    let layers = (0..config.num_layers)
        .map(|_| EncoderLayer {
            query: Linear::init(d, d, &mut rng),
            key: Linear::init(d, d, &mut rng),
            value: Linear::init(d, d, &mut rng),
            output: Linear::init(d, d, &mut rng),
            attn_norm: LayerNorm::new(d),
            ffn_in: Linear::init(d, config.ffn_dim, &mut rng),
            ffn_out: Linear::init(config.ffn_dim, d, &mut rng),
            ffn_norm: LayerNorm::new(d),
        })
        .collect();
    let classifier = Linear::init(d, config.num_classes, &mut rng);
    let mut model = BackboneModel {
        config: config.clone(),
        token_embedding,
        position_embedding,
        embed_norm: LayerNorm::new(d),
        layers,
        classifier,
    };
    for (_, t) in model.named_params_mut() {
        t.requires_grad = true;
    }
    Ok(model)
}

/// Marks every encoder parameter non-trainable. The classifier head keeps
/// trainability `train_head`.
pub fn freeze_backbone(model: &mut BackboneModel, train_head: bool) {
    for (_, t) in model.params_mut(false) {
        t.set_requires_grad(false);
    }
    model.classifier.weight.set_requires_grad(train_head);
    model.classifier.bias.set_requires_grad(train_head);
}

impl BackboneModel {
    fn params_mut(&mut self, with_head: bool) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed.token".into(), &mut self.token_embedding),
            ("embed.position".into(), &mut self.position_embedding),
            ("embed.norm.gain".into(), &mut self.embed_norm.gain),
            ("embed.norm.bias".into(), &mut self.embed_norm.bias),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = |s: &str| format!("layer{i}.{s}");
            out.push((p("query.weight"), &mut l.query.weight));
            out.push((p("query.bias"), &mut l.query.bias));
            out.push((p("key.weight"), &mut l.key.weight));
            out.push((p("key.bias"), &mut l.key.bias));
            out.push((p("value.weight"), &mut l.value.weight));
            out.push((p("value.bias"), &mut l.value.bias));
            out.push((p("output.weight"), &mut l.output.weight));
            out.push((p("output.bias"), &mut l.output.bias));
            out.push((p("attn_norm.gain"), &mut l.attn_norm.gain));
            out.push((p("attn_norm.bias"), &mut l.attn_norm.bias));
            out.push((p("ffn_in.weight"), &mut l.ffn_in.weight));
            out.push((p("ffn_in.bias"), &mut l.ffn_in.bias));
            out.push((p("ffn_out.weight"), &mut l.ffn_out.weight));
            out.push((p("ffn_out.bias"), &mut l.ffn_out.bias));
            out.push((p("ffn_norm.gain"), &mut l.ffn_norm.gain));
            out.push((p("ffn_norm.bias"), &mut l.ffn_norm.bias));
        }
        if with_head {
            out.push(("head.weight".into(), &mut self.classifier.weight));
            out.push(("head.bias".into(), &mut self.classifier.bias));
        }
        out
    }

    /// Encoder parameters only (no classifier head), in canonical order.
    pub fn encoder_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.token".into(), &self.token_embedding),
            ("embed.position".into(), &self.position_embedding),
            ("embed.norm.gain".into(), &self.embed_norm.gain),
            ("embed.norm.bias".into(), &self.embed_norm.bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layer{i}.{s}");
            out.push((p("query.weight"), &l.query.weight));
            out.push((p("query.bias"), &l.query.bias));
            out.push((p("key.weight"), &l.key.weight));
            out.push((p("key.bias"), &l.key.bias));
            out.push((p("value.weight"), &l.value.weight));
            out.push((p("value.bias"), &l.value.bias));
            out.push((p("output.weight"), &l.output.weight));
            out.push((p("output.bias"), &l.output.bias));
            out.push((p("attn_norm.gain"), &l.attn_norm.gain));
            out.push((p("attn_norm.bias"), &l.attn_norm.bias));
            out.push((p("ffn_in.weight"), &l.ffn_in.weight));
            out.push((p("ffn_in.bias"), &l.ffn_in.bias));
            out.push((p("ffn_out.weight"), &l.ffn_out.weight));
            out.push((p("ffn_out.bias"), &l.ffn_out.bias));
            out.push((p("ffn_norm.gain"), &l.ffn_norm.gain));
            out.push((p("ffn_norm.bias"), &l.ffn_norm.bias));
        }
        out
    }

    /// Checksum of the encoder weights; identifies the frozen backbone.
    pub fn encoder_checksum(&self) -> String {
        crate::tensor::checksum_all(self.encoder_params())
    }

    pub fn checksum(&self) -> String {
        crate::tensor::checksum_all(self.named_params())
    }
}

impl Parameterized for BackboneModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder_params();
        out.push(("head.weight".into(), &self.classifier.weight));
        out.push(("head.bias".into(), &self.classifier.bias));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.params_mut(true)
    }
}

/// Validates a batch of token ids against the config.
fn check_tokens(config: &BackboneConfig, ids: &[Vec<usize>]) -> Result<(usize, usize)> {
    let batch = ids.len();
    if batch == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let seq = ids[0].len();
    if seq == 0 || seq > config.max_seq_len {
        return Err(Error::Data(format!(
            "sequence length {seq} outside [1, {}]",
            config.max_seq_len
        )));
    }
    for (b, row) in ids.iter().enumerate() {
        if row.len() != seq {
            return Err(Error::Data(format!(
                "ragged batch: row {b} has length {}, expected {seq}",
                row.len()
            )));
        }
        if let Some(&bad) = row.iter().find(|&&t| t >= config.vocab_size) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for vocab size {}",
                config.vocab_size
            )));
        }
    }
    Ok((batch, seq))
}

/// Token id reserved for padding; padded keys are masked out of attention.
pub use crate::data::PAD_ID;

/// Runs the encoder on a `batch × seq` id matrix and returns `batch × C`
/// logits from the first position.
pub fn encoder_forward<'p>(
    model: &'p BackboneModel,
    tape: &mut Tape<'p>,
    ids: &[Vec<usize>],
    hooks: &dyn AdaptationHooks<'p>,
) -> Result<Var> {
    let cfg = &model.config;
    let (batch, seq) = check_tokens(cfg, ids)?;
    let d = cfg.model_dim;
    let heads = cfg.num_heads;
    let dh = d / heads;

    let flat: Vec<usize> = ids.iter().flatten().copied().collect();
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tok = tape.param(&model.token_embedding);
    let pos = tape.param(&model.position_embedding);
    let te = tape.gather(tok, &flat)?;
    let pe = tape.gather(pos, &positions)?;
    let x0 = tape.add(te, pe)?;
    let mut x = model.embed_norm.forward(tape, x0)?;

    let mask = attention_mask(ids, heads);
    let mask = if mask.data.iter().any(|&m| m != 0.0) {
        Some(tape.constant(mask))
    } else {
        None
    };

    for (li, layer) in model.layers.iter().enumerate() {
        let q = layer.query.forward(tape, x)?;
        let q = hooks.adapt_projection(tape, li, InsertionPoint::Query, x, q)?;
        let k = layer.key.forward(tape, x)?;
        let v = layer.value.forward(tape, x)?;
        let v = hooks.adapt_projection(tape, li, InsertionPoint::Value, x, v)?;

        let qh = tape.split_heads(q, batch, seq, heads)?;
        let kh = tape.split_heads(k, batch, seq, heads)?;
        let vh = tape.split_heads(v, batch, seq, heads)?;
        let scores = tape.batch_matmul(qh, kh, true)?;
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let probs = tape.softmax(scores);
        let ctx = tape.batch_matmul(probs, vh, false)?;
        let ctx = tape.merge_heads(ctx, batch, seq, heads)?;
        let attn = layer.output.forward(tape, ctx)?;
        let attn = hooks.adapt_sublayer(tape, li, InsertionPoint::AfterAttention, attn)?;
        let res = tape.add(x, attn)?;
        let h = layer.attn_norm.forward(tape, res)?;

        let f = layer.ffn_in.forward(tape, h)?;
        let f = tape.gelu(f);
        let f = layer.ffn_out.forward(tape, f)?;
        let f = hooks.adapt_sublayer(tape, li, InsertionPoint::AfterFfn, f)?;
        let res = tape.add(h, f)?;
        x = layer.ffn_norm.forward(tape, res)?;
    }

    let first: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let pooled = tape.select_rows(x, &first)?;
    model.classifier.forward(tape, pooled)
}

/// Additive `-1e9` mask over padded key positions, `[batch·heads, seq, seq]`.
fn attention_mask(ids: &[Vec<usize>], heads: usize) -> Tensor {
    let batch = ids.len();
    let seq = ids[0].len();
    let mut data = vec![0.0; batch * heads * seq * seq];
    for (b, row) in ids.iter().enumerate() {
        for h in 0..heads {
            let base = (b * heads + h) * seq * seq;
            for q in 0..seq {
                for (k, &tok) in row.iter().enumerate() {
                    if tok == PAD_ID {
                        data[base + q * seq + k] = -1e9;
                    }
                }
            }
        }
    }
    Tensor {
        shape: vec![batch * heads, seq, seq],
        data,
        requires_grad: false,
        grad: None,
    }
}

/// Which adaptation family a count refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Adapter,
    Lora,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    #[default]
    None,
    /// One up-projection shared by all modules of a site.
    ProjectUp,
}

/// Whether a count describes the training-time mixture or the merged
/// single module used at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountPhase {
    Training,
    Inference,
}

/// Tunable adaptation parameter count.
///
/// Adapter: per insertion point the down-projection holds `d·r + r` and the
/// up-projection `r·d + d` values. LoRA: each adapted `d×d` matrix holds
/// `r·d` in each factor, no biases. After merging there is a single module
/// per point; during training unshared factors are replicated `M` times.
#[allow(clippy::too_many_arguments)]
pub fn count_adaptation_params(
    d: usize,
    layers: usize,
    r: usize,
    variant: Variant,
    points_per_layer: usize,
    sharing: Sharing,
    modules: usize,
    phase: CountPhase,
) -> usize {
    let (down, up) = match variant {
        Variant::Adapter => (d * r + r, r * d + d),
        Variant::Lora => (r * d, d * r),
    };
    let per_point = match phase {
        CountPhase::Inference => down + up,
        CountPhase::Training => match sharing {
            Sharing::None => modules * (down + up),
            Sharing::ProjectUp => modules * down + up,
        },
    };
    layers * points_per_layer * per_point
}
