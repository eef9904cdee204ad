//! Single adaptation modules: bottleneck adapters and low-rank deltas.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Parameterized, Tensor};

pub const ADAPTER_INIT_STD: f64 = 0.01;
pub const LORA_INIT_STD: f64 = 0.02;
pub const DEFAULT_LORA_ALPHA: f64 = 8.0;

/// One projection matrix with an optional bias.
///
/// Adapters use `[d_in, d_out]` weights applied as `x·W + b`. Low-rank
/// factors store `A: [r, d_in]` and `B: [d_out, r]` and carry no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Factor {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Factor {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&'static str, &Tensor)> {
        std::iter::once(("weight", &self.weight)).chain(self.bias.iter().map(|b| ("bias", b)))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&'static str, &mut Tensor)> {
        std::iter::once(("weight", &mut self.weight))
            .chain(self.bias.iter_mut().map(|b| ("bias", b)))
    }

    pub fn scaled(&self, c: f64) -> Factor {
        Factor {
            weight: self.weight.scale(c),
            bias: self.bias.as_ref().map(|b| b.scale(c)),
        }
    }
}

/// Bottleneck adapter: `x + gelu(x·W_down + b_down)·W_up + b_up`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModule {
    pub down: Factor,
    pub up: Factor,
    pub bottleneck: usize,
}

/// Low-rank delta on a frozen `[d_out, d_in]` projection.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraModule {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraModule {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdaptationModule {
    Adapter(AdapterModule),
    Lora(LoraModule),
}

/// Flattens `x` to `[n, d]` for the projection, checking the last dim.
fn as_rows(tape: &mut Tape<'_>, x: Var, d: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.last() != Some(&d) {
        return Err(Error::dim("adapter input", &shape, &[d]));
    }
    if shape.len() == 2 {
        return Ok(x);
    }
    let n = shape.iter().product::<usize>() / d;
    tape.reshape(x, &[n, d])
}

/// Adapter transform with residual, using an arbitrary (down, up) pair.
///
/// Exactly two matrix multiplications are recorded.
pub fn adapter_apply<'p>(
    tape: &mut Tape<'p>,
    down: &'p Factor,
    up: &'p Factor,
    x: Var,
) -> Result<Var> {
    let d = down.weight.shape[0];
    let shape = tape.shape(x).to_vec();
    let rows = as_rows(tape, x, d)?;
    let wd = tape.param(&down.weight);
    let mut h = tape.matmul(rows, wd)?;
    if let Some(b) = &down.bias {
        let b = tape.param(b);
        h = tape.add_bias(h, b)?;
    }
    let h = tape.gelu(h);
    let wu = tape.param(&up.weight);
    let mut delta = tape.matmul(h, wu)?;
    if let Some(b) = &up.bias {
        let b = tape.param(b);
        delta = tape.add_bias(delta, b)?;
    }
    let out = tape.add(rows, delta)?;
    if shape.len() == 2 {
        Ok(out)
    } else {
        tape.reshape(out, &shape)
    }
}

pub fn adapter_forward<'p>(m: &'p AdapterModule, tape: &mut Tape<'p>, x: Var) -> Result<Var> {
    adapter_apply(tape, &m.down, &m.up, x)
}

/// `scale · (x·Aᵀ)·Bᵀ`, two matrix multiplications.
pub fn lora_delta<'p>(
    tape: &mut Tape<'p>,
    a: &'p Tensor,
    b: &'p Tensor,
    scale: f64,
    x: Var,
) -> Result<Var> {
    if a.shape.len() != 2 || b.shape.len() != 2 || b.shape[1] != a.shape[0] {
        return Err(Error::dim("lora factors", &a.shape, &b.shape));
    }
    let d_in = a.shape[1];
    let rows = as_rows(tape, x, d_in)?;
    let av = tape.param(a);
    let bv = tape.param(b);
    let h = tape.matmul_t(rows, av)?;
    let delta = tape.matmul_t(h, bv)?;
    Ok(tape.scale(delta, scale))
}

/// Frozen projection `x·Wᵀ` plus the low-rank delta.
pub fn lora_forward<'p>(
    m: &'p LoraModule,
    tape: &mut Tape<'p>,
    x: Var,
    frozen_w: &'p Tensor,
) -> Result<Var> {
    let (r, d_in) = (m.a.shape[0], m.a.shape[1]);
    let d_out = m.b.shape[0];
    if frozen_w.shape != [d_out, d_in] || m.b.shape[1] != r {
        return Err(Error::dim("lora_forward", &frozen_w.shape, &[d_out, d_in]));
    }
    let rows = as_rows(tape, x, d_in)?;
    let w = tape.param(frozen_w);
    let base = tape.matmul_t(rows, w)?;
    let delta = lora_delta(tape, &m.a, &m.b, m.scaling(), rows)?;
    tape.add(base, delta)
}

/// Near-identity adapter: `W_down ~ N(0, 0.01²)`, everything else zero.
pub fn init_adapter(d: usize, r: usize, seed: u64) -> Result<AdapterModule> {
    if r == 0 || r >= d {
        return Err(Error::Config(format!(
            "adapter bottleneck r={r} must satisfy 0 < r < d={d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(AdapterModule {
        down: Factor {
            weight: Tensor::randn(&[d, r], ADAPTER_INIT_STD, &mut rng).with_grad(true),
            bias: Some(Tensor::zeros(&[r]).with_grad(true)),
        },
        up: Factor {
            weight: Tensor::zeros(&[r, d]).with_grad(true),
            bias: Some(Tensor::zeros(&[d]).with_grad(true)),
        },
        bottleneck: r,
    })
}

/// Low-rank module with `A ~ N(0, 0.02²)` and `B = 0`.
pub fn init_lora(d_in: usize, d_out: usize, r: usize, alpha: f64, seed: u64) -> Result<LoraModule> {
    if r == 0 || r > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "lora rank r={r} must satisfy 0 < r <= min({d_in}, {d_out})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LoraModule {
        a: Tensor::randn(&[r, d_in], LORA_INIT_STD, &mut rng).with_grad(true),
        b: Tensor::zeros(&[d_out, r]).with_grad(true),
        rank: r,
        alpha,
    })
}

impl Parameterized for AdapterModule {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let down = self.down.tensors().map(|(n, t)| (format!("down.{n}"), t));
        let up = self.up.tensors().map(|(n, t)| (format!("up.{n}"), t));
        down.chain(up).collect()
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let down = self.down.tensors_mut().map(|(n, t)| (format!("down.{n}"), t));
        let up = self.up.tensors_mut().map(|(n, t)| (format!("up.{n}"), t));
        down.chain(up).collect()
    }
}

impl Parameterized for LoraModule {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        vec![("a".into(), &self.a), ("b".into(), &self.b)]
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("a".into(), &mut self.a), ("b".into(), &mut self.b)]
    }
}
