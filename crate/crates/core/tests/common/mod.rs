//! Checks shared by the integration tests and the acceptance harness. Each
//! returns an [`Outcome`] instead of panicking so the harness can report
//! every criterion.

#![allow(dead_code)]

use std::path::PathBuf;
use std::time::{Duration, Instant};

use moa_core::config::InferenceMode;
use moa_core::experiment::{
    ablation_csv, cell_config, evaluate, grid_cells, prepare_task, random_route_accuracies,
    run_grid, run_training, GridAxes, GridConfig, ABLATION_HEADER,
};
use moa_core::gradcheck::{check_model, finite_diff_check, GradCheckReport};
use moa_core::mixture::{ensemble_predict, select_routing};
use moa_core::tape::{Tape, Var};
use moa_core::training::{consistency_loss, history_csv};
use moa_core::transformer::{
    build_backbone, count_adaptation_params, freeze_backbone, CountPhase,
};
use moa_core::{
    plot, AdaptedModel, BackboneConfig, Checkpoint, InsertionPoint, MixtureSite, Parameterized,
    Result, RoutingPolicy, RoutingSelection, RunConfig, Sharing, Tensor, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_H: f64 = 1e-5;
pub const MERGE_TOL: f64 = 1e-12;
pub const ENSEMBLE_TOL: f64 = 1e-12;
pub const CHI_SQUARE_P: f64 = 0.01;

#[derive(Debug)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }

    pub fn from_result(r: Result<Outcome>) -> Outcome {
        r.unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")))
    }

    #[track_caller]
    pub fn assert(self) {
        assert!(self.passed, "{}", self.detail);
    }
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn keyphrase_config() -> RunConfig {
    RunConfig::load(&repo_root().join("configs/keyphrase.toml")).expect("sample config loads")
}

/// A config small enough to train in well under a second.
pub fn tiny_config() -> RunConfig {
    RunConfig::from_toml(
        r#"
task.kind = "majority"
task.classes = 2
task.seq_len = 8
task.examples = 160
task.vocab_size = 24
task.seed = 13

backbone.num_layers = 1
backbone.model_dim = 16
backbone.num_heads = 2
backbone.ffn_dim = 32
backbone.seed = 1

train.epochs = 2
train.batch_size = 16
train.lr = 3e-3
train.seed = 5

adaptation.variant = "adapter"
adaptation.M = 2
adaptation.r = 4
"#,
    )
    .expect("tiny config parses")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng).with_grad(true)
}

fn constant(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Reduces `out` to a scalar through a fixed random weighting, so that every
/// output coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<'_>, out: Var, w: &Tensor) -> Result<Var> {
    let w = tape.constant(w.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

type OpCase = fn(u64) -> Result<GradCheckReport>;

macro_rules! op_case {
    ($name:literal, |$rng:ident| $inputs:expr, |$tape:ident, $v:ident, $w:ident| $body:expr, $out_shape:expr) => {
        (
            $name,
            (|seed: u64| {
                let mut $rng = rng(seed);
                let inputs: Vec<Tensor> = $inputs;
                let $w = constant(&$out_shape, &mut $rng);
                finite_diff_check(
                    |$tape, $v| {
                        let out = $body?;
                        weighted_sum($tape, out, &$w)
                    },
                    &inputs,
                    GRAD_H,
                    GRAD_TOL,
                )
            }) as OpCase,
        )
    };
}

/// Every differentiable op of the tape, each wrapped as a scalar function of
/// random inputs drawn from the seed.
pub fn op_cases() -> Vec<(&'static str, OpCase)> {
    vec![
        op_case!("matmul", |r| vec![randn(&[3, 4], &mut r), randn(&[4, 5], &mut r)],
            |t, v, w| t.matmul(v[0], v[1]), [3, 5]),
        op_case!("matmul_t", |r| vec![randn(&[3, 4], &mut r), randn(&[5, 4], &mut r)],
            |t, v, w| t.matmul_t(v[0], v[1]), [3, 5]),
        op_case!("batch_matmul", |r| vec![randn(&[2, 3, 4], &mut r), randn(&[2, 4, 3], &mut r)],
            |t, v, w| t.batch_matmul(v[0], v[1], false), [2, 3, 3]),
        op_case!("batch_matmul_t", |r| vec![randn(&[2, 3, 4], &mut r), randn(&[2, 5, 4], &mut r)],
            |t, v, w| t.batch_matmul(v[0], v[1], true), [2, 3, 5]),
        op_case!("add", |r| vec![randn(&[3, 4], &mut r), randn(&[3, 4], &mut r)],
            |t, v, w| t.add(v[0], v[1]), [3, 4]),
        op_case!("sub", |r| vec![randn(&[3, 4], &mut r), randn(&[3, 4], &mut r)],
            |t, v, w| t.sub(v[0], v[1]), [3, 4]),
        op_case!("mul", |r| vec![randn(&[3, 4], &mut r), randn(&[3, 4], &mut r)],
            |t, v, w| t.mul(v[0], v[1]), [3, 4]),
        op_case!("add_bias", |r| vec![randn(&[3, 4], &mut r), randn(&[4], &mut r)],
            |t, v, w| t.add_bias(v[0], v[1]), [3, 4]),
        op_case!("scale", |r| vec![randn(&[3, 4], &mut r)],
            |t, v, w| Ok::<_, moa_core::Error>(t.scale(v[0], -1.7)), [3, 4]),
        op_case!("gelu", |r| vec![randn(&[4, 5], &mut r)],
            |t, v, w| Ok::<_, moa_core::Error>(t.gelu(v[0])), [4, 5]),
        op_case!("softmax", |r| vec![randn(&[3, 5], &mut r)],
            |t, v, w| Ok::<_, moa_core::Error>(t.softmax(v[0])), [3, 5]),
        op_case!("layer_norm", |r| vec![randn(&[3, 6], &mut r), randn(&[6], &mut r), randn(&[6], &mut r)],
            |t, v, w| t.layer_norm(v[0], v[1], v[2], 1e-5), [3, 6]),
        op_case!("reshape", |r| vec![randn(&[3, 4], &mut r)],
            |t, v, w| t.reshape(v[0], &[2, 6]), [2, 6]),
        op_case!("transpose", |r| vec![randn(&[3, 4], &mut r)],
            |t, v, w| t.transpose(v[0]), [4, 3]),
        op_case!("split_heads", |r| vec![randn(&[6, 4], &mut r)],
            |t, v, w| t.split_heads(v[0], 2, 3, 2), [4, 3, 2]),
        op_case!("merge_heads", |r| vec![randn(&[4, 3, 2], &mut r)],
            |t, v, w| t.merge_heads(v[0], 2, 3, 2), [6, 4]),
        op_case!("gather", |r| vec![randn(&[5, 3], &mut r)],
            |t, v, w| t.gather(v[0], &[4, 0, 4, 2]), [4, 3]),
        op_case!("select_rows", |r| vec![randn(&[5, 3], &mut r)],
            |t, v, w| t.select_rows(v[0], &[1, 3]), [2, 3]),
        op_case!("sum", |r| vec![randn(&[3, 4], &mut r)],
            |t, v, w| Ok::<_, moa_core::Error>(t.sum(v[0])), [1]),
        op_case!("mean", |r| vec![randn(&[3, 4], &mut r)],
            |t, v, w| Ok::<_, moa_core::Error>(t.mean(v[0])), [1]),
        op_case!("cross_entropy", |r| vec![randn(&[4, 3], &mut r)],
            |t, v, w| t.cross_entropy(v[0], &[0, 2, 1, 2]), [1]),
        op_case!("kl_divergence", |r| vec![randn(&[4, 3], &mut r), randn(&[4, 3], &mut r)],
            |t, v, w| t.kl_divergence(v[0], v[1]), [1]),
        op_case!("consistency_loss", |r| vec![randn(&[4, 3], &mut r), randn(&[4, 3], &mut r)],
            |t, v, w| consistency_loss(t, v[0], v[1], &[1, 0, 2, 2], false).map(|l| l.total), [1]),
    ]
}

fn small_backbone_config() -> BackboneConfig {
    BackboneConfig {
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        vocab_size: 12,
        max_seq_len: 5,
        num_classes: 3,
    }
}

/// A small model whose site tensors are all randomized, so that no gradient
/// is structurally zero.
pub fn randomized_model(variant: Variant, sharing: Sharing, modules: usize, seed: u64) -> AdaptedModel {
    let cfg = small_backbone_config();
    let mut backbone = build_backbone(&cfg, seed).expect("valid backbone");
    freeze_backbone(&mut backbone, true);
    let points = match variant {
        Variant::Adapter => vec![InsertionPoint::AfterAttention, InsertionPoint::AfterFfn],
        Variant::Lora => vec![InsertionPoint::Query, InsertionPoint::Value],
    };
    let mut sites = Vec::new();
    for layer in 0..cfg.num_layers {
        for &point in &points {
            let site = match variant {
                Variant::Adapter => MixtureSite::new_adapter(layer, point, cfg.model_dim, 3, modules, sharing, seed),
                Variant::Lora => MixtureSite::new_lora(layer, point, cfg.model_dim, 3, modules, sharing, 8.0, seed),
            };
            sites.push(site.expect("valid site"));
        }
    }
    let mut model = AdaptedModel::new(backbone, sites);
    let mut r = rng(seed ^ 0x5eed);
    for s in &mut model.sites {
        for (_, t) in s.named_params_mut() {
            t.data.iter_mut().for_each(|x| *x = r.random_range(-0.3..0.3));
        }
    }
    model
}

pub fn random_ids(batch: usize, seq: usize, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|_| (0..seq).map(|_| rng.random_range(0..vocab)).collect())
        .collect()
}

/// Gradient check of the full two-pass consistency objective of a small
/// adapted model, with every site parameter and the head probed.
pub fn model_gradcheck(variant: Variant, sharing: Sharing, seed: u64) -> Result<GradCheckReport> {
    let mut model = randomized_model(variant, sharing, 3, seed);
    let mut r = rng(seed);
    let ids = random_ids(3, 5, 12, &mut r);
    let labels: Vec<usize> = (0..3).map(|_| r.random_range(0..3)).collect();
    let sel_a = select_routing(&model.sites, &mut r, RoutingPolicy::Independent);
    let sel_b = select_routing(&model.sites, &mut r, RoutingPolicy::Independent);
    check_model(
        &mut model,
        |m: &AdaptedModel, tape| {
            let a = m.forward(tape, &ids, &sel_a)?;
            let b = m.forward(tape, &ids, &sel_b)?;
            Ok(consistency_loss(tape, a, b, &labels, false)?.total)
        },
        GRAD_H,
        GRAD_TOL,
        Some(6),
    )
}

/// Criterion 1: every op and both full models agree with central
/// differences over `seeds` seeds.
pub fn gradient_suite(seeds: u64) -> Result<Outcome> {
    let start = Instant::now();
    let cases = op_cases();
    let mut worst = (0.0f64, String::new());
    let mut failures = Vec::new();
    let mut checks = 0;
    for seed in 0..seeds {
        let mut reports: Vec<(String, GradCheckReport)> = Vec::new();
        for (name, case) in &cases {
            reports.push((name.to_string(), case(seed)?));
        }
        reports.push(("adapter model".into(), model_gradcheck(Variant::Adapter, Sharing::None, seed)?));
        reports.push(("shared adapter model".into(), model_gradcheck(Variant::Adapter, Sharing::ProjectUp, seed)?));
        reports.push(("lora model".into(), model_gradcheck(Variant::Lora, Sharing::None, seed)?));
        for (name, rep) in reports {
            checks += 1;
            if rep.max_rel_err > worst.0 {
                worst = (rep.max_rel_err, format!("{name} seed {seed}"));
            }
            if !rep.passed {
                failures.push(format!("{name} seed {seed}: {:.2e}", rep.max_rel_err));
            }
        }
    }
    let elapsed = start.elapsed();
    let in_time = elapsed < Duration::from_secs(60);
    Ok(Outcome::new(
        failures.is_empty() && in_time,
        format!(
            "{checks} checks ({} ops + 3 models × {seeds} seeds), worst rel err {:.2e} ({}), tol {GRAD_TOL:e}, {:.1?}{}",
            cases.len(),
            worst.0,
            worst.1,
            elapsed,
            if failures.is_empty() { String::new() } else { format!("; failures: {}", failures.join(", ")) }
        ),
    ))
}

/// Counts parameters of instantiated FFN-point adapter sites.
fn instantiated_count(d: usize, layers: usize, r: usize, modules: usize, sharing: Sharing) -> Result<(usize, usize)> {
    let mut training = 0;
    let mut merged = 0;
    for layer in 0..layers {
        let site = MixtureSite::new_adapter(layer, InsertionPoint::AfterFfn, d, r, modules, sharing, 0)?;
        training += site.param_count();
        merged += site.merged().param_count();
    }
    Ok((training, merged))
}

/// Criterion 2: adapter parameter counts at the two reference
/// configurations, and post-merge counts independent of `M`.
pub fn parameter_counts() -> Result<Outcome> {
    let mut ok = true;
    let mut notes = Vec::new();
    for (d, layers, r, expected, nominal) in [(1024, 24, 16, 811_392, 0.8e6), (768, 12, 48, 894_528, 0.9e6)] {
        let formula = count_adaptation_params(d, layers, r, Variant::Adapter, 1, Sharing::None, 1, CountPhase::Inference);
        let (single, _) = instantiated_count(d, layers, r, 1, Sharing::None)?;
        let within = ((formula as f64 - nominal) / nominal).abs() <= 0.05;
        ok &= formula == expected && single == expected && within;
        notes.push(format!("d={d} L={layers} r={r}: formula {formula}, instantiated {single}"));
        for (m, sharing) in [(4, Sharing::None), (4, Sharing::ProjectUp), (8, Sharing::None)] {
            let (train, merged) = instantiated_count(d, layers, r, m, sharing)?;
            let train_formula = count_adaptation_params(d, layers, r, Variant::Adapter, 1, sharing, m, CountPhase::Training);
            ok &= merged == expected && train == train_formula;
        }
    }
    notes.push("merged count equals the M=1 count for M∈{4,8}, shared or not".into());
    Ok(Outcome::new(ok, notes.join("; ")))
}

/// Elementwise mean of the `i`-th tensor across factor lists, computed
/// without the library's merge code.
fn oracle_mean(tensors: &[&Tensor]) -> Vec<f64> {
    let n = tensors.len() as f64;
    (0..tensors[0].len())
        .map(|c| tensors.iter().map(|t| t.data[c]).sum::<f64>() / n)
        .collect()
}

/// Criterion 3: merged weights equal the elementwise module mean, and a
/// merged model's forward equals the forward with those oracle weights.
pub fn merge_oracle() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for m in [2, 4, 8] {
        for (variant, sharing) in [
            (Variant::Adapter, Sharing::None),
            (Variant::Adapter, Sharing::ProjectUp),
            (Variant::Lora, Sharing::None),
        ] {
            let model = randomized_model(variant, sharing, m, 40 + m as u64);
            let merged = model.merged();
            let mut oracle = model.clone();
            for site in &mut oracle.sites {
                let downs = site.downs.clone();
                let ups = site.ups.clone();
                site.downs.truncate(1);
                site.ups.truncate(1);
                site.downs[0].weight.data = oracle_mean(&downs.iter().map(|f| &f.weight).collect::<Vec<_>>());
                site.ups[0].weight.data = oracle_mean(&ups.iter().map(|f| &f.weight).collect::<Vec<_>>());
                if let Some(b) = &mut site.downs[0].bias {
                    b.data = oracle_mean(&downs.iter().map(|f| f.bias.as_ref().unwrap()).collect::<Vec<_>>());
                }
                if let Some(b) = &mut site.ups[0].bias {
                    b.data = oracle_mean(&ups.iter().map(|f| f.bias.as_ref().unwrap()).collect::<Vec<_>>());
                }
            }
            for (a, b) in merged.sites.iter().zip(&oracle.sites) {
                for ((_, x), (_, y)) in a.named_params().iter().zip(b.named_params()) {
                    worst = worst.max(x.max_abs_diff(y));
                }
            }
            let ids = random_ids(4, 5, 12, &mut rng(m as u64));
            let fixed = RoutingSelection::fixed(&merged.sites);
            let lm = merged.logits(&ids, &fixed)?;
            let lo = oracle.logits(&ids, &fixed)?;
            worst = worst.max(lm.max_abs_diff(&lo));
            cases += 1;

            let mut same = model.clone();
            for site in &mut same.sites {
                let (d, u) = (site.downs[0].clone(), site.ups[0].clone());
                site.downs.iter_mut().for_each(|f| *f = d.clone());
                site.ups.iter_mut().for_each(|f| *f = u.clone());
            }
            let single = same.logits(&ids, &RoutingSelection::fixed(&same.sites))?;
            let same_merged = same.merged();
            let lsm = same_merged.logits(&ids, &RoutingSelection::fixed(&same_merged.sites))?;
            worst = worst.max(single.max_abs_diff(&lsm));
        }
    }
    Ok(Outcome::new(
        worst <= MERGE_TOL,
        format!(
            "{cases} cases (M∈{{2,4,8}}, adapter/shared/LoRA), merged vs oracle weights and logits, \
             identical modules merged vs single: max abs diff {worst:.2e}, tol {MERGE_TOL:e}"
        ),
    ))
}

/// Criterion 4: the ensemble equals averaging the softmax of `T` passes
/// routed by an identically seeded generator.
pub fn ensemble_oracle() -> Result<Outcome> {
    let passes = 4;
    let mut worst = 0.0f64;
    let mut row_err = 0.0f64;
    for (seed, sharing) in [(1, Sharing::None), (2, Sharing::ProjectUp), (3, Sharing::None)] {
        let model = randomized_model(Variant::Adapter, sharing, 4, seed);
        let ids = random_ids(5, 5, 12, &mut rng(seed + 100));
        let got = ensemble_predict(&model, &ids, passes, &mut rng(seed), RoutingPolicy::Independent)?;
        let mut replay = rng(seed);
        let mut sum = vec![0.0; got.len()];
        for _ in 0..passes {
            let sel = select_routing(&model.sites, &mut replay, RoutingPolicy::Independent);
            let logits = model.logits(&ids, &sel)?;
            let c = logits.shape[1];
            for (row, acc) in logits.data.chunks(c).zip(sum.chunks_mut(c)) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += (v - max).exp() / z;
                }
            }
        }
        for (g, s) in got.data.iter().zip(&sum) {
            worst = worst.max((g - s / passes as f64).abs());
        }
        for row in got.data.chunks(got.shape[1]) {
            row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok(Outcome::new(
        worst <= ENSEMBLE_TOL && row_err <= ENSEMBLE_TOL,
        format!("T={passes}, 3 models, max abs diff {worst:.2e}, max |row sum − 1| {row_err:.2e}, tol {ENSEMBLE_TOL:e}"),
    ))
}

/// Criterion 5: adapter matmuls and total matmuls per forward pass do not
/// depend on `M`.
pub fn flops_constant() -> Result<Outcome> {
    let mut seen = Vec::new();
    for variant in [Variant::Adapter, Variant::Lora] {
        for sharing in [Sharing::None, Sharing::ProjectUp] {
            let mut per_m = Vec::new();
            for m in [1, 2, 4, 8] {
                let model = randomized_model(variant, sharing, m, 9);
                let ids = random_ids(2, 5, 12, &mut rng(0));
                let sel = select_routing(&model.sites, &mut rng(m as u64), RoutingPolicy::Independent);
                let mut tape = Tape::new();
                let out = model.forward_routed(&mut tape, &ids, &sel)?;
                per_m.push((out.adapter_matmuls, tape.matmul_count()));
            }
            seen.push((variant, sharing, per_m));
        }
    }
    let ok = seen
        .iter()
        .all(|(_, _, v)| v.iter().all(|x| *x == v[0]) && v[0].0 == 2 * 4);
    let detail = seen
        .iter()
        .map(|(v, s, c)| format!("{v:?}/{s:?}: adapter {} total {}", c[0].0, c[0].1))
        .collect::<Vec<_>>()
        .join("; ");
    Ok(Outcome::new(ok, format!("M∈{{1,2,4,8}} identical counts — {detail}")))
}

/// Pearson chi-square p-value of `counts` against a uniform distribution.
pub fn chi_square_uniform_p(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((counts.len() - 1) as f64).expect("positive dof");
    1.0 - dist.cdf(stat)
}

/// Criterion 6: routing draws are uniform over up, down and pair indices
/// and reproducible from the seed.
pub fn routing_uniform_and_deterministic() -> Result<Outcome> {
    let m = 4;
    let site = MixtureSite::new_adapter(0, InsertionPoint::AfterFfn, 8, 2, m, Sharing::None, 0)?;
    let sites = vec![site];
    let draws = 10_000;
    let mut r = rng(2024);
    let mut up = vec![0u64; m];
    let mut down = vec![0u64; m];
    let mut pair = vec![0u64; m * m];
    let mut seq = Vec::with_capacity(draws);
    for _ in 0..draws {
        let (j, k) = select_routing(&sites, &mut r, RoutingPolicy::Independent).pairs[0];
        up[j] += 1;
        down[k] += 1;
        pair[j * m + k] += 1;
        seq.push((j, k));
    }
    let p = [chi_square_uniform_p(&up), chi_square_uniform_p(&down), chi_square_uniform_p(&pair)];
    let mut r2 = rng(2024);
    let replay: Vec<(usize, usize)> = (0..draws)
        .map(|_| select_routing(&sites, &mut r2, RoutingPolicy::Independent).pairs[0])
        .collect();
    let deterministic = replay == seq;
    let ok = p.iter().all(|&x| x > CHI_SQUARE_P) && deterministic;
    Ok(Outcome::new(
        ok,
        format!(
            "{draws} draws, M={m}: p(up)={:.3} p(down)={:.3} p(pair)={:.3} (> {CHI_SQUARE_P}), reproducible: {deterministic}",
            p[0], p[1], p[2]
        ),
    ))
}

/// Criterion 7: training leaves every encoder parameter bit-identical.
pub fn backbone_frozen() -> Result<Outcome> {
    let cfg = tiny_config();
    let data = prepare_task(&cfg)?;
    let before = moa_core::experiment::build_model(&cfg, data.vocab_size)?;
    let encoder_before = before.backbone.encoder_checksum();
    let run = run_training(&cfg)?;
    let after = &run.checkpoint.model;
    let encoder_after = after.backbone.encoder_checksum();
    let frozen_flags = after.backbone.encoder_params().iter().all(|(_, t)| !t.requires_grad);
    let sites_moved = before.sites != after.sites;
    Ok(Outcome::new(
        encoder_before == encoder_after && frozen_flags && sites_moved,
        format!(
            "encoder sha256 {}… before and {}… after {} epochs; adaptation weights changed: {sites_moved}",
            &encoder_before[..12],
            &encoder_after[..12],
            cfg.train.epochs
        ),
    ))
}

pub struct KeyphraseReport {
    pub merged: f64,
    pub random_mean: f64,
    pub random_min: f64,
    pub random_max: f64,
    pub fixed: f64,
    pub ensemble: f64,
    pub single_epoch_over_90: Option<usize>,
    pub single_final_train: f64,
    pub elapsed: Duration,
}

pub const RANDOM_ROUTE_RUNS: u64 = 20;
pub const SINGLE_MODULE_EPOCHS: usize = 30;

/// Criterion 8: the keyphrase experiment.
pub fn keyphrase_experiment() -> Result<(Outcome, KeyphraseReport)> {
    let start = Instant::now();
    let cfg = keyphrase_config();
    let run = run_training(&cfg)?;
    let model = &run.checkpoint.model;
    let test = &run.data.test;
    let merged = evaluate(&model.merged(), test, InferenceMode::Merge, 0)?;
    let random = random_route_accuracies(model, test, RANDOM_ROUTE_RUNS)?;
    let random_mean = random.iter().sum::<f64>() / random.len() as f64;
    let fixed = evaluate(model, test, InferenceMode::FixedRoute, 0)?;
    let ensemble = evaluate(model, test, InferenceMode::Ensemble(4), 0)?;

    let mut single = cfg.clone();
    single.adaptation.modules = 1;
    single.train.epochs = SINGLE_MODULE_EPOCHS;
    let single_run = run_training_until(&single, 0.9)?;
    let report = KeyphraseReport {
        merged,
        random_mean,
        random_min: random.iter().cloned().fold(f64::INFINITY, f64::min),
        random_max: random.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        fixed,
        ensemble,
        single_epoch_over_90: single_run.0,
        single_final_train: single_run.1,
        elapsed: start.elapsed(),
    };
    let ok = merged >= random_mean
        && report.single_epoch_over_90.is_some()
        && report.elapsed < Duration::from_secs(600);
    let detail = format!(
        "M={} merged {:.4} vs random-route mean {:.4} over {RANDOM_ROUTE_RUNS} evals (range {:.4}–{:.4}); \
         fixed {:.4}, ensemble(4) {:.4}; merged − random {:+.4}, ensemble − random {:+.4}; \
         M=1 train accuracy > 0.9 at epoch {} (limit {SINGLE_MODULE_EPOCHS}); {:.0?}",
        cfg.adaptation.modules,
        merged,
        random_mean,
        report.random_min,
        report.random_max,
        fixed,
        ensemble,
        merged - random_mean,
        ensemble - random_mean,
        report.single_epoch_over_90.map_or("never".to_string(), |e| e.to_string()),
        report.elapsed
    );
    Ok((Outcome::new(ok, detail), report))
}

/// First epoch (1-based) whose train accuracy exceeds `target`, and the
/// final train accuracy.
fn run_training_until(cfg: &RunConfig, target: f64) -> Result<(Option<usize>, f64)> {
    let run = run_training(cfg)?;
    let hit = run
        .history
        .iter()
        .find(|r| r.train_accuracy > target)
        .map(|r| r.epoch);
    Ok((hit, run.history.last().map_or(0.0, |r| r.train_accuracy)))
}

/// Criterion 9: an inference mode × consistency × sharing × M × r grid over paired seeds completes,
/// writes one row per cell and mode, and the CSV renders as a chart.
pub fn ablation_grid() -> Result<Outcome> {
    let base = tiny_config();
    let grid = GridConfig {
        base: PathBuf::from("unused.toml"),
        seeds: vec![1, 2, 3],
        output: PathBuf::from("unused.csv"),
        modes: ["merge", "random_route", "fixed_route", "ensemble(4)"].map(String::from).to_vec(),
        eval_seed: 0,
        threads: 1,
        axes: GridAxes {
            modules: vec![1, 2],
            r: vec![2, 4],
            consistency: vec![true, false],
            sharing: vec![true, false],
        },
    };
    let cells = grid_cells(&grid, &base);
    // Paired seeds: every cell sees the same data for a given seed.
    let paired = grid.seeds.iter().all(|&s| {
        let splits: Vec<_> = cells
            .iter()
            .map(|c| prepare_task(&cell_config(&base, c, s)).map(|d| (d.train, d.test)))
            .collect::<Result<_>>()
            .expect("task builds");
        splits.windows(2).all(|w| w[0] == w[1])
    });
    let rows = run_grid(&grid, &base)?;
    let csv = ablation_csv(&rows);
    let all_ok = rows.iter().all(|r| r.status == "ok" && r.runs == 3 && r.accuracy_mean.is_finite());
    let complete = rows.len() == cells.len() * grid.modes.len();
    let header_ok = csv.lines().next() == Some(ABLATION_HEADER);
    let svg = plot::ablation_svg(&csv)?;
    let renders = svg.starts_with("<svg") && svg.contains("</svg>");
    Ok(Outcome::new(
        paired && all_ok && complete && header_ok && renders,
        format!(
            "{} cells × {} modes = {} rows, all ok: {all_ok}, paired data: {paired}, chart renders: {renders}",
            cells.len(),
            grid.modes.len(),
            rows.len()
        ),
    ))
}

/// Criterion 10: identical configs give bit-identical metrics and
/// checkpoints, and checkpoints survive save → load → save unchanged.
pub fn reproducibility() -> Result<Outcome> {
    let cfg = tiny_config();
    let a = run_training(&cfg)?;
    let b = run_training(&cfg)?;
    let csv_same = history_csv(&a.history) == history_csv(&b.history);
    let bytes_a = a.checkpoint.to_bytes();
    let bytes_b = b.checkpoint.to_bytes();
    let ckpt_same = bytes_a == bytes_b;
    let reloaded = Checkpoint::from_bytes(&bytes_a)?;
    let same_params = |x: &AdaptedModel, y: &AdaptedModel| {
        let (px, py) = (x.named_params(), y.named_params());
        px.len() == py.len()
            && px.iter().zip(&py).all(|((nx, tx), (ny, ty))| {
                nx == ny && tx.shape == ty.shape && tx.data == ty.data && tx.requires_grad == ty.requires_grad
            })
    };
    let round_trip = reloaded.to_bytes() == bytes_a && same_params(&reloaded.model, &a.checkpoint.model);
    let merged = a.checkpoint.merged();
    let merged_bytes = merged.to_bytes();
    let merged_round_trip = Checkpoint::from_bytes(&merged_bytes)?.to_bytes() == merged_bytes;
    Ok(Outcome::new(
        csv_same && ckpt_same && round_trip && merged_round_trip,
        format!(
            "metrics CSV identical: {csv_same}; checkpoints identical: {ckpt_same} ({} bytes); \
             round trip byte-identical: {round_trip}; merged round trip: {merged_round_trip}",
            bytes_a.len()
        ),
    ))
}
