// SPDX-License-Identifier: MIT OR Apache-2.0

//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominators below this are treated as this value, so coordinates with
/// vanishing gradients are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

/// Result of comparing autodiff against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel: f64,
    pub max_abs: f64,
    /// (input index, flat coordinate) of the worst relative error.
    pub worst: (usize, usize),
    pub coords: usize,
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, xs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let y = f(&mut g, &vars)?;
    g.value(y).item()
}

/// Check every coordinate of every input of `f`.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor<f64>], h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let y = f(&mut g, &vars)?;
    let grads = g.backward(y)?;
    let mut out = GradCheck { max_rel: 0.0, max_abs: 0.0, worst: (0, 0), coords: 0 };
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for (k, (&v, x)) in vars.iter().zip(xs).enumerate() {
        let analytic = grads.get_or_zeros(v, x.shape());
        for i in 0..x.numel() {
            let x0 = x.data()[i];
            probe[k].data_mut()[i] = x0 + h;
            let fp = eval(&f, &probe)?;
            probe[k].data_mut()[i] = x0 - h;
            let fm = eval(&f, &probe)?;
            probe[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("input {k} coordinate {i}: analytic {a}, numeric {numeric}")));
            }
            let r = rel_err(a, numeric);
            out.max_abs = out.max_abs.max((a - numeric).abs());
            if r > out.max_rel {
                out.max_rel = r;
                out.worst = (k, i);
            }
            out.coords += 1;
        }
    }
    Ok(out)
}

/// Maximum relative error between autodiff and central differences
/// `(f(x+h e) - f(x-h e)) / 2h` over all coordinates of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    Ok(finite_diff_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), h)?.max_rel)
}
