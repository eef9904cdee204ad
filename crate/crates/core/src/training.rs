//! Optimization of the adaptation parameters against a frozen backbone:
//! AdamW, the warmup/decay schedule, the two-pass consistency objective and
//! the epoch loop.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, sequential_batches, Batch, LabeledExample};
use crate::error::{Error, Result};
use crate::mixture::{select_routing, AdaptedModel, RoutingPolicy, RoutingSelection};
use crate::tape::{Tape, Var};
use crate::tensor::Parameterized;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_true")]
    pub consistency: bool,
    /// Detach pass B inside the KL term.
    #[serde(default)]
    pub stop_gradient: bool,
    #[serde(default)]
    pub routing: RoutingPolicy,
    /// Whether the classifier head trains alongside the adaptation modules.
    #[serde(default = "default_true")]
    pub train_head: bool,
    pub seed: u64,
}

fn default_warmup() -> f64 {
    0.06
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return fail("train.epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return fail("train.lr must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return fail("train.warmup_fraction must lie in [0, 1]");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("train.weight_decay must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Keyed by parameter name; trainable parameters only.
    pub moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new<M: Parameterized + ?Sized>(model: &M, lr: f64, weight_decay: f64) -> Self {
        let moments = model
            .named_params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad)
            .map(|(n, t)| {
                (
                    n,
                    Moments {
                        m: vec![0.0; t.len()],
                        v: vec![0.0; t.len()],
                    },
                )
            })
            .collect();
        OptimizerState {
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments,
        }
    }
}

/// One AdamW update with bias-corrected moments and decoupled decay:
/// `w ← w − lr·(m̂ / (√v̂ + ε) + λ·w)`. A trainable parameter without a
/// gradient is treated as having a zero gradient; frozen ones are skipped.
pub fn adamw_step<M: Parameterized + ?Sized>(opt: &mut OptimizerState, model: &mut M) {
    opt.step += 1;
    let t = opt.step as i32;
    let (b1, b2) = (opt.beta1, opt.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    for (name, p) in model.named_params_mut() {
        if !p.requires_grad {
            continue;
        }
        let n = p.len();
        let mom = opt.moments.entry(name).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        });
        for i in 0..n {
            let g = p.grad.as_ref().map_or(0.0, |g| g[i]);
            mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
            mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
            let update = (mom.m[i] / c1) / ((mom.v[i] / c2).sqrt() + opt.eps);
            p.data[i] -= opt.lr * (update + opt.weight_decay * p.data[i]);
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup_fraction · total` steps,
/// then linear decay to 0 at `total`.
pub fn lr_at(step: usize, total: usize, warmup_fraction: f64, peak: f64) -> f64 {
    let (s, total) = (step as f64, total as f64);
    let warm = warmup_fraction * total;
    if s < warm {
        peak * s / warm
    } else if total > warm {
        (peak * (total - s) / (total - warm)).max(0.0)
    } else {
        peak
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConsistencyLoss {
    pub ce: Var,
    /// `½·(KL(A‖B) + KL(B‖A))`.
    pub kl: Var,
    pub total: Var,
}

/// `CE(A, y) + ½·(KL(A‖B) + KL(B‖A))` over logits of two routed passes.
/// With `stop_gradient` the KL term treats pass B as a constant.
pub fn consistency_loss(
    tape: &mut Tape<'_>,
    logits_a: Var,
    logits_b: Var,
    labels: &[usize],
    stop_gradient: bool,
) -> Result<ConsistencyLoss> {
    if tape.shape(logits_a) != tape.shape(logits_b) {
        return Err(Error::dim(
            "consistency_loss",
            tape.shape(logits_a),
            tape.shape(logits_b),
        ));
    }
    let ce = tape.cross_entropy(logits_a, labels)?;
    let b = if stop_gradient {
        tape.detach(logits_b)
    } else {
        logits_b
    };
    let ab = tape.kl_divergence(logits_a, b)?;
    let ba = tape.kl_divergence(b, logits_a)?;
    let sum = tape.add(ab, ba)?;
    let kl = tape.scale(sum, 0.5);
    let total = tape.add(ce, kl)?;
    Ok(ConsistencyLoss { ce, kl, total })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub consistency: bool,
    pub stop_gradient: bool,
    pub routing: RoutingPolicy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    /// Pass-A predictions matching the label.
    pub correct: usize,
    pub selection_a: RoutingSelection,
    pub selection_b: Option<RoutingSelection>,
}

impl StepMetrics {
    /// Both passes drew the same modules at every site.
    pub fn collided(&self) -> bool {
        self.selection_b.as_ref() == Some(&self.selection_a)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Two routed passes (one without consistency), one backward, one AdamW
/// update of the trainable parameters.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut AdaptedModel,
    batch: &Batch,
    opt: &mut OptimizerState,
    rng: &mut R,
    options: StepOptions,
) -> Result<StepMetrics> {
    let selection_a = select_routing(&model.sites, rng, options.routing);
    // With one module per site both passes are identical and the KL term
    // and its gradient vanish, so the second pass is skipped.
    let selection_b = (options.consistency && model.max_modules() > 1)
        .then(|| select_routing(&model.sites, rng, options.routing));

    let (grads, ce, kl, total, correct) = {
        let m: &AdaptedModel = model;
        let mut tape = Tape::new();
        let la = m.forward(&mut tape, &batch.ids, &selection_a)?;
        let (ce_var, kl_var, total_var) = match &selection_b {
            Some(sel_b) => {
                let lb = m.forward(&mut tape, &batch.ids, sel_b)?;
                let l = consistency_loss(&mut tape, la, lb, &batch.labels, options.stop_gradient)?;
                (l.ce, Some(l.kl), l.total)
            }
            None => {
                let ce = tape.cross_entropy(la, &batch.labels)?;
                (ce, None, ce)
            }
        };
        let classes = tape.shape(la)[1];
        let correct = tape
            .value(la)
            .chunks(classes)
            .zip(&batch.labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        let ce = tape.value(ce_var)[0];
        let kl = kl_var.map_or(0.0, |k| tape.value(k)[0]);
        let total = tape.value(total_var)[0];
        if !total.is_finite() {
            return Err(Error::Training {
                message: format!("non-finite loss at optimizer step {}", opt.step + 1),
                dump: diagnostic_dump(m, ce, kl, &selection_a, selection_b.as_ref()),
            });
        }
        (tape.backward(total_var)?, ce, kl, total, correct)
    };
    model.zero_grads();
    for (_, t) in model.named_params_mut() {
        grads.apply_to(t);
    }
    adamw_step(opt, model);
    Ok(StepMetrics {
        ce,
        kl,
        total,
        correct,
        selection_a,
        selection_b,
    })
}

fn diagnostic_dump(
    model: &AdaptedModel,
    ce: f64,
    kl: f64,
    a: &RoutingSelection,
    b: Option<&RoutingSelection>,
) -> String {
    let mut out = format!("ce={ce} kl={kl}\nselection_a={:?}\nselection_b={:?}\n", a.pairs, b.map(|s| &s.pairs));
    for (name, t) in model.named_params() {
        if t.requires_grad {
            let norm = t.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            let bad = t.data.iter().filter(|x| !x.is_finite()).count();
            let _ = writeln!(out, "{name}: norm={norm:.6e} non_finite={bad}");
        }
    }
    out
}

/// Accuracy of `model` routed through `selection` on every example.
pub fn accuracy(
    model: &AdaptedModel,
    examples: &[LabeledExample],
    selection: &RoutingSelection,
) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for batch in sequential_batches(examples, EVAL_BATCH) {
        let logits = model.logits(&batch.ids, selection)?;
        let c = logits.shape[1];
        correct += logits
            .data
            .chunks(c)
            .zip(&batch.labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    Ok(correct as f64 / examples.len() as f64)
}

pub const EVAL_BATCH: usize = 128;

/// Accuracy of the merged single-module model.
pub fn merged_accuracy(model: &AdaptedModel, examples: &[LabeledExample]) -> Result<f64> {
    let merged = model.merged();
    accuracy(&merged, examples, &RoutingSelection::fixed(&merged.sites))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub ce_loss: f64,
    pub kl_loss: f64,
    pub total_loss: f64,
    /// Accuracy of the routed pass A over the epoch's batches.
    pub train_accuracy: f64,
    /// Merged-model accuracy on the evaluation split.
    pub eval_accuracy: f64,
    /// Steps whose two passes drew identical selections.
    pub collisions: usize,
}

pub const HISTORY_HEADER: &str =
    "epoch,step,lr,ce_loss,kl_loss,total_loss,train_accuracy,eval_accuracy,collisions";

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:e},{:e},{},{},{}",
            r.epoch,
            r.step,
            r.lr,
            r.ce_loss,
            r.kl_loss,
            r.total_loss,
            r.train_accuracy,
            r.eval_accuracy,
            r.collisions
        );
    }
    out
}

/// Independent RNG streams derived from the run seed. Data order and
/// routing draw from separate streams, so toggling consistency (which
/// changes how many routing draws a step makes) leaves the batch order
/// untouched.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const DATA_STREAM: u64 = 1;
pub const ROUTING_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub optimizer: OptimizerState,
    /// Routing stream position after the last step.
    pub routing_rng: ChaCha8Rng,
}

/// Full seeded training run. The model's trainable flags decide what
/// updates; the backbone is expected to be frozen.
pub fn train_loop(
    config: &TrainConfig,
    model: &mut AdaptedModel,
    train: &[LabeledExample],
    eval: &[LabeledExample],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut data_rng = stream_rng(config.seed, DATA_STREAM);
    let mut routing_rng = stream_rng(config.seed, ROUTING_STREAM);
    let mut opt = OptimizerState::new(model, config.lr, config.weight_decay);
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let total = steps_per_epoch * config.epochs;
    let options = StepOptions {
        consistency: config.consistency,
        stop_gradient: config.stop_gradient,
        routing: config.routing,
    };
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let (mut ce, mut kl, mut tot, mut correct, mut collisions) = (0.0, 0.0, 0.0, 0, 0);
        let mut lr = 0.0;
        let batches = batch_iter(train, config.batch_size, &mut data_rng);
        for batch in &batches {
            lr = lr_at(step, total, config.warmup_fraction, config.lr);
            opt.lr = lr;
            let m = train_step(model, batch, &mut opt, &mut routing_rng, options)?;
            let w = batch.len() as f64;
            ce += m.ce * w;
            kl += m.kl * w;
            tot += m.total * w;
            correct += m.correct;
            collisions += usize::from(m.collided());
            step += 1;
        }
        let n = train.len() as f64;
        let record = EpochRecord {
            epoch,
            step,
            lr,
            ce_loss: ce / n,
            kl_loss: kl / n,
            total_loss: tot / n,
            train_accuracy: correct as f64 / n,
            eval_accuracy: if eval.is_empty() { 0.0 } else { merged_accuracy(model, eval)? },
            collisions,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (ce {:.4}, kl {:.4}) train acc {:.3} eval acc {:.3}",
            record.total_loss,
            record.ce_loss,
            record.kl_loss,
            record.train_accuracy,
            record.eval_accuracy
        );
        history.push(record);
    }
    Ok(TrainOutcome {
        history,
        optimizer: opt,
        routing_rng,
    })
}
