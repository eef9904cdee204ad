//! Central finite-difference gradient checks against the tape.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Parameterized, Tensor};

/// Denominator floor for relative errors, so that near-zero gradients are
/// compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// One entry per trainable parameter; frozen parameters are excluded.
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn get(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Checks every trainable parameter of `model` against central differences
/// of the scalar `loss`.
///
/// `max_coords` bounds how many coordinates per parameter are probed; they
/// are spread evenly across the tensor.
pub fn check_model<M, F>(
    model: &mut M,
    loss: F,
    h: f64,
    tol: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: for<'p> Fn(&'p M, &mut Tape<'p>) -> Result<Var>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic: Vec<Option<Vec<f64>>> = {
        let m: &M = model;
        let mut tape = Tape::new();
        let out = loss(m, &mut tape)?;
        let grads = tape.backward(out)?;
        m.named_params()
            .iter()
            .map(|(_, t)| {
                t.requires_grad.then(|| {
                    grads
                        .for_param(t)
                        .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
                })
            })
            .collect()
    };

    let eval = |m: &M| -> Result<f64> {
        let mut tape = Tape::new();
        let out = loss(m, &mut tape)?;
        Ok(tape.value(out)[0])
    };

    let mut params = Vec::new();
    for (pi, ga) in analytic.iter().enumerate() {
        let Some(ga) = ga else { continue };
        let len = ga.len();
        let coords: Vec<usize> = match max_coords {
            Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
            _ => (0..len).collect(),
        };
        let name = model.named_params()[pi].0.clone();
        let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
        for &c in &coords {
            let orig = model.named_params()[pi].1.data[c];
            set_coord(model, pi, c, orig + h);
            let up = eval(model)?;
            set_coord(model, pi, c, orig - h);
            let down = eval(model)?;
            set_coord(model, pi, c, orig);
            let numeric = (up - down) / (2.0 * h);
            max_abs = max_abs.max((ga[c] - numeric).abs());
            max_rel = max_rel.max(rel_err(ga[c], numeric));
        }
        params.push(ParamCheck {
            name,
            coords_checked: coords.len(),
            max_abs_err: max_abs,
            max_rel_err: max_rel,
        });
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        params,
        max_rel_err,
        tol,
        passed: max_rel_err < tol,
    })
}

fn set_coord<M: Parameterized>(model: &mut M, param: usize, coord: usize, value: f64) {
    let mut ps = model.named_params_mut();
    ps[param].1.data[coord] = value;
}

/// Gradient check of a tensor function `f(inputs)`. Inputs with
/// `requires_grad == false` are treated as constants and left out of the
/// report.
pub fn finite_diff_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p>, &[Var]) -> Result<Var>,
{
    let mut owned: Vec<Tensor> = inputs.to_vec();
    check_model(
        &mut owned,
        |ts: &Vec<Tensor>, tape: &mut Tape<'_>| {
            let vars: Vec<Var> = ts.iter().map(|t| tape.param(t)).collect();
            f(tape, &vars)
        },
        h,
        tol,
        None,
    )
}
