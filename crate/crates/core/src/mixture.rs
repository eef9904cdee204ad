//! Mixtures of adaptation modules: stochastic pair routing, up-projection
//! sharing, weight merging and Monte-Carlo ensembling.
//!
//! A [`MixtureSite`] holds `M` down-projections and either `M` or one
//! up-projection at one insertion point of one encoder layer. Each forward
//! pass picks one `(up j, down k)` pair per site for the whole batch, so the
//! per-site cost is that of a single module regardless of `M`.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adaptation::{
    adapter_apply, init_adapter, init_lora, lora_delta, AdaptationModule, AdapterModule, Factor,
    LoraModule,
};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Parameterized, Tensor};
use crate::transformer::{
    encoder_forward, AdaptationHooks, BackboneModel, InsertionPoint, Sharing, Variant,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingPolicy {
    /// Up and down indices drawn independently.
    #[default]
    Independent,
    /// One index drawn and used for both projections.
    SameIndex,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSite {
    pub layer: usize,
    pub point: InsertionPoint,
    pub variant: Variant,
    pub sharing: Sharing,
    pub rank: usize,
    /// LoRA scaling numerator; unused by adapters.
    pub lora_alpha: f64,
    /// Adapter `W_down`/`b_down` or LoRA `A`, one per module.
    pub downs: Vec<Factor>,
    /// Adapter `W_up`/`b_up` or LoRA `B`; a single entry under sharing.
    pub ups: Vec<Factor>,
}

/// Per-site `(up j, down k)` indices, zero-based, in site order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingSelection {
    pub pairs: Vec<(usize, usize)>,
}

impl RoutingSelection {
    pub fn fixed(sites: &[MixtureSite]) -> Self {
        RoutingSelection {
            pairs: vec![(0, 0); sites.len()],
        }
    }
}

fn module_seed(seed: u64, layer: usize, point: InsertionPoint, k: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((layer as u64) << 32) | ((point as u64) << 16) | k as u64);
    rng.random()
}

impl MixtureSite {
    pub fn new_adapter(
        layer: usize,
        point: InsertionPoint,
        d: usize,
        r: usize,
        modules: usize,
        sharing: Sharing,
        seed: u64,
    ) -> Result<Self> {
        if modules == 0 {
            return Err(Error::Config("number of modules M must be >= 1".into()));
        }
        let mut downs = Vec::with_capacity(modules);
        let mut ups = Vec::with_capacity(modules);
        for k in 0..modules {
            let AdapterModule { down, up, .. } =
                init_adapter(d, r, module_seed(seed, layer, point, k))?;
            downs.push(down);
            if sharing == Sharing::None || k == 0 {
                ups.push(up);
            }
        }
        Ok(MixtureSite {
            layer,
            point,
            variant: Variant::Adapter,
            sharing,
            rank: r,
            lora_alpha: 0.0,
            downs,
            ups,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new_lora(
        layer: usize,
        point: InsertionPoint,
        d: usize,
        r: usize,
        modules: usize,
        sharing: Sharing,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if modules == 0 {
            return Err(Error::Config("number of modules M must be >= 1".into()));
        }
        let mut downs = Vec::with_capacity(modules);
        let mut ups = Vec::with_capacity(modules);
        for k in 0..modules {
            let LoraModule { a, b, .. } =
                init_lora(d, d, r, alpha, module_seed(seed, layer, point, k))?;
            downs.push(Factor {
                weight: a,
                bias: None,
            });
            if sharing == Sharing::None || k == 0 {
                ups.push(Factor {
                    weight: b,
                    bias: None,
                });
            }
        }
        Ok(MixtureSite {
            layer,
            point,
            variant: Variant::Lora,
            sharing,
            rank: r,
            lora_alpha: alpha,
            downs,
            ups,
        })
    }

    pub fn num_modules(&self) -> usize {
        self.downs.len()
    }

    pub fn name(&self) -> String {
        format!("layer{}.{}", self.layer, self.point.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.downs
            .iter()
            .chain(&self.ups)
            .map(Factor::param_count)
            .sum()
    }

    /// Module `j` (up) and `k` (down) as an owned single module.
    pub fn module(&self, j: usize, k: usize) -> Result<AdaptationModule> {
        self.check_pair((j, k))?;
        let (down, up) = (self.downs[k].clone(), self.ups[j].clone());
        Ok(match self.variant {
            Variant::Adapter => AdaptationModule::Adapter(AdapterModule {
                down,
                up,
                bottleneck: self.rank,
            }),
            Variant::Lora => AdaptationModule::Lora(LoraModule {
                a: down.weight,
                b: up.weight,
                rank: self.rank,
                alpha: self.lora_alpha,
            }),
        })
    }

    fn check_pair(&self, (j, k): (usize, usize)) -> Result<()> {
        if j >= self.ups.len() || k >= self.downs.len() {
            return Err(Error::Routing(format!(
                "selection (up {j}, down {k}) invalid for site {} with {} up / {} down projections",
                self.name(),
                self.ups.len(),
                self.downs.len()
            )));
        }
        Ok(())
    }

    /// Every weight scaled by `c` (used for linearity checks).
    pub fn scaled(&self, c: f64) -> MixtureSite {
        MixtureSite {
            downs: self.downs.iter().map(|f| f.scaled(c)).collect(),
            ups: self.ups.iter().map(|f| f.scaled(c)).collect(),
            ..self.clone()
        }
    }

    /// Collapses the site to a single module by uniform weight averaging.
    /// The result keeps the trainability flags of the source.
    pub fn merged(&self) -> MixtureSite {
        MixtureSite {
            sharing: Sharing::None,
            downs: vec![mean_factor(&self.downs)],
            ups: vec![mean_factor(&self.ups)],
            ..self.clone()
        }
    }
}

fn mean_tensor(ts: &[&Tensor]) -> Tensor {
    let mut out = Tensor::zeros(&ts[0].shape);
    for t in ts {
        out.data.iter_mut().zip(&t.data).for_each(|(o, v)| *o += v);
    }
    let m = ts.len() as f64;
    out.data.iter_mut().for_each(|v| *v /= m);
    out.requires_grad = ts[0].requires_grad;
    out
}

fn mean_factor(fs: &[Factor]) -> Factor {
    let weights: Vec<&Tensor> = fs.iter().map(|f| &f.weight).collect();
    let bias = fs[0].bias.as_ref().map(|_| {
        let bs: Vec<&Tensor> = fs.iter().filter_map(|f| f.bias.as_ref()).collect();
        mean_tensor(&bs)
    });
    Factor {
        weight: mean_tensor(&weights),
        bias,
    }
}

/// Merges a site into one module: the elementwise mean of all up- and all
/// down-projections. A shared up-projection is returned as is.
pub fn merge_site(site: &MixtureSite) -> AdaptationModule {
    site.merged()
        .module(0, 0)
        .expect("merged site has one module")
}

/// Draws one `(j, k)` pair per site. Under shared up-projections `j` is
/// pinned to the shared module and only `k` is drawn.
pub fn select_routing<R: Rng + ?Sized>(
    sites: &[MixtureSite],
    rng: &mut R,
    policy: RoutingPolicy,
) -> RoutingSelection {
    let pairs = sites
        .iter()
        .map(|s| {
            let m = s.num_modules();
            let shared = s.ups.len() == 1;
            match policy {
                RoutingPolicy::Independent => {
                    let j = if shared { 0 } else { rng.random_range(0..m) };
                    let k = rng.random_range(0..m);
                    (j, k)
                }
                RoutingPolicy::SameIndex => {
                    let k = rng.random_range(0..m);
                    (if shared { 0 } else { k }, k)
                }
            }
        })
        .collect();
    RoutingSelection { pairs }
}

/// Input to a site: a sub-layer output for adapters, or the projection input
/// together with the frozen projection result for LoRA.
#[derive(Clone, Copy, Debug)]
pub enum SiteInput {
    Sublayer(Var),
    Projection { x: Var, base: Var },
}

/// Applies the selected `(up j, down k)` pair of a site.
pub fn mixture_forward<'p>(
    site: &'p MixtureSite,
    tape: &mut Tape<'p>,
    input: SiteInput,
    pair: (usize, usize),
) -> Result<Var> {
    site.check_pair(pair)?;
    let (j, k) = pair;
    match (site.variant, input) {
        (Variant::Adapter, SiteInput::Sublayer(h)) => {
            adapter_apply(tape, &site.downs[k], &site.ups[j], h)
        }
        (Variant::Lora, SiteInput::Projection { x, base }) => {
            let scale = site.lora_alpha / site.rank as f64;
            let delta = lora_delta(tape, &site.downs[k].weight, &site.ups[j].weight, scale, x)?;
            tape.add(base, delta)
        }
        (v, i) => Err(Error::Contract(format!(
            "site {} of variant {v:?} cannot take input {i:?}",
            site.name()
        ))),
    }
}

/// Dense gated mixture `x + Σ_i g_i · E_i(x)` over the site's experts
/// `E_i(x) = gelu(x·W_down_i + b_down_i)·W_up_i + b_up_i`. With a one-hot
/// gate this is the stochastic policy's forward.
pub fn gated_mixture_forward<'p>(
    site: &'p MixtureSite,
    tape: &mut Tape<'p>,
    x: Var,
    gate: &[f64],
) -> Result<Var> {
    if site.variant != Variant::Adapter || gate.len() != site.num_modules() {
        return Err(Error::dim(
            "gated_mixture_forward",
            &[gate.len()],
            &[site.num_modules()],
        ));
    }
    let mut acc: Option<Var> = None;
    for (i, &g) in gate.iter().enumerate() {
        let j = if site.ups.len() == 1 { 0 } else { i };
        let with_residual = adapter_apply(tape, &site.downs[i], &site.ups[j], x)?;
        let expert = tape.sub(with_residual, x)?;
        let weighted = tape.scale(expert, g);
        acc = Some(match acc {
            None => weighted,
            Some(a) => tape.add(a, weighted)?,
        });
    }
    tape.add(x, acc.expect("at least one expert"))
}

/// Frozen backbone plus mixture sites.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedModel {
    pub backbone: BackboneModel,
    pub sites: Vec<MixtureSite>,
}

/// How sites are laid out over the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteLayout {
    pub variant: Variant,
    pub points: Vec<InsertionPoint>,
    pub modules: usize,
    pub rank: usize,
    pub sharing: Sharing,
    pub lora_alpha: f64,
}

impl SiteLayout {
    pub fn points_per_layer(&self) -> usize {
        self.points.len()
    }
}

/// Builds one site per (layer, insertion point).
pub fn attach_sites(
    backbone: &BackboneModel,
    layout: &SiteLayout,
    seed: u64,
) -> Result<Vec<MixtureSite>> {
    let d = backbone.config.model_dim;
    let mut sites = Vec::new();
    for layer in 0..backbone.config.num_layers {
        for &point in &layout.points {
            let site = match (layout.variant, point) {
                (Variant::Adapter, InsertionPoint::AfterAttention | InsertionPoint::AfterFfn) => {
                    MixtureSite::new_adapter(
                        layer,
                        point,
                        d,
                        layout.rank,
                        layout.modules,
                        layout.sharing,
                        seed,
                    )?
                }
                (Variant::Lora, InsertionPoint::Query | InsertionPoint::Value) => {
                    MixtureSite::new_lora(
                        layer,
                        point,
                        d,
                        layout.rank,
                        layout.modules,
                        layout.sharing,
                        layout.lora_alpha,
                        seed,
                    )?
                }
                (v, p) => {
                    return Err(Error::Config(format!(
                        "insertion point {} is not valid for variant {v:?}",
                        p.as_str()
                    )))
                }
            };
            sites.push(site);
        }
    }
    Ok(sites)
}

struct MixtureHooks<'p, 's> {
    sites: &'p [MixtureSite],
    selection: &'s RoutingSelection,
    adapter_matmuls: Cell<usize>,
}

impl<'p> MixtureHooks<'p, '_> {
    fn site(&self, layer: usize, point: InsertionPoint) -> Option<(usize, &'p MixtureSite)> {
        self.sites
            .iter()
            .enumerate()
            .find(|(_, s)| s.layer == layer && s.point == point)
    }

    fn run(&self, tape: &mut Tape<'p>, idx: usize, site: &'p MixtureSite, input: SiteInput) -> Result<Var> {
        let before = tape.matmul_count();
        let out = mixture_forward(site, tape, input, self.selection.pairs[idx])?;
        self.adapter_matmuls
            .set(self.adapter_matmuls.get() + tape.matmul_count() - before);
        Ok(out)
    }
}

impl<'p> AdaptationHooks<'p> for MixtureHooks<'p, '_> {
    fn adapt_sublayer(
        &self,
        tape: &mut Tape<'p>,
        layer: usize,
        point: InsertionPoint,
        h: Var,
    ) -> Result<Var> {
        match self.site(layer, point) {
            Some((i, s)) => self.run(tape, i, s, SiteInput::Sublayer(h)),
            None => Ok(h),
        }
    }

    fn adapt_projection(
        &self,
        tape: &mut Tape<'p>,
        layer: usize,
        point: InsertionPoint,
        x: Var,
        base: Var,
    ) -> Result<Var> {
        match self.site(layer, point) {
            Some((i, s)) => self.run(tape, i, s, SiteInput::Projection { x, base }),
            None => Ok(base),
        }
    }
}

/// Output of one routed forward pass.
#[derive(Clone, Copy, Debug)]
pub struct RoutedOutput {
    pub logits: Var,
    /// Matrix multiplications performed inside adaptation sites.
    pub adapter_matmuls: usize,
}

impl AdaptedModel {
    pub fn new(backbone: BackboneModel, sites: Vec<MixtureSite>) -> Self {
        AdaptedModel { backbone, sites }
    }

    pub fn forward_routed<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        ids: &[Vec<usize>],
        selection: &RoutingSelection,
    ) -> Result<RoutedOutput> {
        if selection.pairs.len() != self.sites.len() {
            return Err(Error::Routing(format!(
                "selection has {} pairs for {} sites",
                selection.pairs.len(),
                self.sites.len()
            )));
        }
        let hooks = MixtureHooks {
            sites: &self.sites,
            selection,
            adapter_matmuls: Cell::new(0),
        };
        let logits = encoder_forward(&self.backbone, tape, ids, &hooks)?;
        Ok(RoutedOutput {
            logits,
            adapter_matmuls: hooks.adapter_matmuls.get(),
        })
    }

    pub fn forward<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        ids: &[Vec<usize>],
        selection: &RoutingSelection,
    ) -> Result<Var> {
        Ok(self.forward_routed(tape, ids, selection)?.logits)
    }

    /// Logits as a plain tensor, no gradient bookkeeping kept.
    pub fn logits(&self, ids: &[Vec<usize>], selection: &RoutingSelection) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, ids, selection)?;
        Ok(tape.to_tensor(out))
    }

    /// The inference-time model with every site merged to one module.
    pub fn merged(&self) -> AdaptedModel {
        AdaptedModel {
            backbone: self.backbone.clone(),
            sites: self.sites.iter().map(MixtureSite::merged).collect(),
        }
    }

    pub fn max_modules(&self) -> usize {
        self.sites.iter().map(MixtureSite::num_modules).max().unwrap_or(1)
    }

    pub fn adaptation_param_count(&self) -> usize {
        self.sites.iter().map(MixtureSite::param_count).sum()
    }
}

/// Deterministic forward through the first module of every site.
pub fn fixed_route_forward(model: &AdaptedModel, ids: &[Vec<usize>]) -> Result<Tensor> {
    model.logits(ids, &RoutingSelection::fixed(&model.sites))
}

/// Row-wise softmax of a `[B, C]` logit tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let c = *logits.shape.last().expect("2-d logits");
    let mut p = logits.clone();
    p.data
        .chunks_mut(c)
        .for_each(crate::tape::softmax_in_place);
    p
}

/// Monte-Carlo ensemble: mean of softmax outputs over `T` independently
/// routed passes.
pub fn ensemble_predict<R: Rng + ?Sized>(
    model: &AdaptedModel,
    ids: &[Vec<usize>],
    passes: usize,
    rng: &mut R,
    policy: RoutingPolicy,
) -> Result<Tensor> {
    if passes == 0 {
        return Err(Error::Config("ensemble requires T >= 1".into()));
    }
    let mut acc: Option<Tensor> = None;
    for _ in 0..passes {
        let sel = select_routing(&model.sites, rng, policy);
        let probs = softmax_rows(&model.logits(ids, &sel)?);
        match &mut acc {
            None => acc = Some(probs),
            Some(a) => a.data.iter_mut().zip(&probs.data).for_each(|(x, y)| *x += y),
        }
    }
    let mut out = acc.expect("T >= 1");
    out.data.iter_mut().for_each(|v| *v /= passes as f64);
    Ok(out)
}

impl Parameterized for MixtureSite {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let name = self.name();
        let mut out = Vec::new();
        for (k, f) in self.downs.iter().enumerate() {
            for (n, t) in f.tensors() {
                out.push((format!("site.{name}.down.{k}.{n}"), t));
            }
        }
        for (j, f) in self.ups.iter().enumerate() {
            for (n, t) in f.tensors() {
                out.push((format!("site.{name}.up.{j}.{n}"), t));
            }
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let name = self.name();
        let mut out = Vec::new();
        for (k, f) in self.downs.iter_mut().enumerate() {
            for (n, t) in f.tensors_mut() {
                out.push((format!("site.{name}.down.{k}.{n}"), t));
            }
        }
        for (j, f) in self.ups.iter_mut().enumerate() {
            for (n, t) in f.tensors_mut() {
                out.push((format!("site.{name}.up.{j}.{n}"), t));
            }
        }
        out
    }
}

impl Parameterized for AdaptedModel {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .backbone
            .named_params()
            .into_iter()
            .map(|(n, t)| (format!("backbone.{n}"), t))
            .collect();
        for s in &self.sites {
            out.extend(s.named_params());
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = self
            .backbone
            .named_params_mut()
            .into_iter()
            .map(|(n, t)| (format!("backbone.{n}"), t))
            .collect();
        for s in &mut self.sites {
            out.extend(s.named_params_mut());
        }
        out
    }
}
