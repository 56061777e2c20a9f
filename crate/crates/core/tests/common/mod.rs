//! Independent loop oracles and a central-difference gradient checker shared
//! by the integration tests and the acceptance runner.
#![allow(dead_code)]

pub mod gradsuite;

use maskunet::rng::{self, Rng};
use maskunet::{Result, Tape, Tensor, Var};
use rand::Rng as _;

/// Step of the plain two-point central difference.
pub const FD_STEP: f64 = 1e-6;
/// Step of the fourth-order central stencil.
pub const FD4_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-5;
pub const REL_FLOOR: f64 = 1e-8;

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform values kept at least `gap` away from zero.
pub fn away_from_zero(shape: &[usize], gap: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..1.5);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h` with `h = FD_STEP`.
    TwoPoint,
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` with `h = FD4_STEP`.
    FourthOrder,
}

/// Central-difference derivative of `eval` along one coordinate, where
/// `eval(d)` evaluates the function with that coordinate shifted by `d`.
pub fn central_difference(stencil: Stencil, mut eval: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    Ok(match stencil {
        Stencil::TwoPoint => (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP),
        Stencil::FourthOrder => {
            let h = FD4_STEP;
            let near = eval(h)? - eval(-h)?;
            let far = eval(2.0 * h)? - eval(-2.0 * h)?;
            (8.0 * near - far) / (12.0 * h)
        }
    })
}

/// Worst relative error between tape gradients and central differences of
/// the scalar `f` over every input coordinate.
pub fn check_gradients<F>(inputs: &[Tensor], stencil: Stencil, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    tape.backward(loss)?;
    let grads: Vec<Tensor> = vars.iter().map(|v| tape.grad(*v).expect("leaf grad")).collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars)?.value().item()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        for i in 0..input.numel() {
            let numeric = central_difference(stencil, |d| {
                let mut shifted = inputs.to_vec();
                shifted[k].data_mut()[i] += d;
                eval(&shifted)
            })?;
            worst = worst.max(rel_err(grads[k].data()[i], numeric));
        }
    }
    Ok(worst)
}

/// `Σ out ⊙ r` for a fixed random `r`, turning any output into a scalar with
/// order-one gradients.
pub fn project<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = rng::seeded(seed);
    let r = away_from_zero(&out.shape(), 0.5, &mut rng);
    out.mul(out.tape().constant(r))?.sum()
}

pub fn matmul_loop(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.data()[i * k + p] * b.data()[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

fn batch_item(t: &Tensor, b: usize) -> Tensor {
    let rows = t.shape()[1];
    let cols = t.shape()[2];
    let d = &t.data()[b * rows * cols..(b + 1) * rows * cols];
    Tensor::new(&[rows, cols], d.to_vec()).unwrap()
}

/// Per-sample `h[b] · ŵ[b]ᵀ` over 2-D loops.
pub fn bmm_loop(h: &Tensor, w: &Tensor) -> Tensor {
    let (bs, n, co) = (h.shape()[0], h.shape()[1], w.shape()[1]);
    let mut out = Vec::with_capacity(bs * n * co);
    for b in 0..bs {
        let prod = matmul_loop(&batch_item(h, b), &batch_item(w, b).transpose().unwrap());
        out.extend_from_slice(prod.data());
    }
    Tensor::new(&[bs, n, co], out).unwrap()
}

/// `m[b,o,i] · w[o,i]` entry by entry.
pub fn apply_mask_loop(w: &Tensor, m: &Tensor) -> Tensor {
    let (bs, co, ci) = (m.shape()[0], m.shape()[1], m.shape()[2]);
    let mut out = vec![0.0; bs * co * ci];
    for b in 0..bs {
        for o in 0..co {
            for i in 0..ci {
                out[(b * co + o) * ci + i] = m.data()[(b * co + o) * ci + i] * w.data()[o * ci + i];
            }
        }
    }
    Tensor::new(&[bs, co, ci], out).unwrap()
}

/// Per-sample linear layer with the masked-out weights zeroed in a copy.
pub fn masked_linear_loop(h: &Tensor, w: &Tensor, m: &Tensor, bias: &Tensor) -> Tensor {
    let (bs, n, ci) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let co = w.shape()[0];
    let mut out = Vec::with_capacity(bs * n * co);
    for b in 0..bs {
        let mut wz = w.clone();
        for (k, v) in wz.data_mut().iter_mut().enumerate() {
            if m.data()[b * co * ci + k] == 0.0 {
                *v = 0.0;
            } else {
                *v *= m.data()[b * co * ci + k];
            }
        }
        for r in 0..n {
            for o in 0..co {
                let mut s = bias.data()[o];
                for i in 0..ci {
                    s += h.data()[(b * n + r) * ci + i] * wz.data()[o * ci + i];
                }
                out.push(s);
            }
        }
    }
    Tensor::new(&[bs, n, co], out).unwrap()
}

/// Random binary tensor with roughly `p` ones.
pub fn binary(shape: &[usize], p: f64, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

pub fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    a.max_abs_diff(b)
}
