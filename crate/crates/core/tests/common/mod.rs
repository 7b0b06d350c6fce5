#![allow(dead_code)]

use pgseg::autodiff::{Tape, Var};
use pgseg::geometry::Point;
use pgseg::nn::ParamStore;
use pgseg::{Result, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Values in `[-1, -0.1] U [0.1, 1]`, clear of the ReLU kink.
pub fn kink_free_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn random_points(n: usize, rng: &mut impl Rng) -> Vec<Point> {
    (0..n)
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect()
}

/// Scalarizes `out` as `sum(out * w)` with a fixed random `w`, so every
/// output element contributes a distinct weight.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let w = random_tensor(tape.shape(out), &mut rng(seed));
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    tape.sum(prod)
}

/// Compares analytic against central-difference gradients for every input
/// element and every parameter scalar of `store`. Returns the largest
/// relative error.
///
/// `f` must be deterministic: it is re-run for every perturbation.
pub fn grad_check<F>(inputs: &[Tensor], store: &ParamStore, h: f64, f: F) -> f64
where
    F: Fn(&mut Tape, &ParamStore, &[Var]) -> Result<Var>,
{
    let scalar_out = |tape: &mut Tape, out: Var| {
        if tape.value(out).len() == 1 {
            out
        } else {
            project(tape, out, 0xFD)
        }
    };
    let eval = |inputs: &[Tensor], store: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
        let out = f(&mut tape, store, &vars).unwrap();
        let loss = scalar_out(&mut tape, out);
        tape.value(loss).data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let out = f(&mut tape, store, &vars).unwrap();
    let loss = scalar_out(&mut tape, out);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let g = grads.wrt(*var).expect("input gradient").clone();
        for j in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus, store) - eval(&minus, store)) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[j], numeric));
        }
    }
    let param_grads = grads.for_store(store);
    for id in store.ids() {
        for j in 0..store.value(id).len() {
            let mut s = store.clone();
            s.value_mut(id).data_mut()[j] += h;
            let up = eval(inputs, &s);
            s.value_mut(id).data_mut()[j] -= 2.0 * h;
            let down = eval(inputs, &s);
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(param_grads[id.index()].data()[j], numeric));
        }
    }
    worst
}

/// Moves every parameter off its initial value. Zero biases put ReLU inputs
/// exactly on the kink when a whole previous layer is inactive, where a
/// central difference sees only half the one-sided slope.
pub fn jitter_params(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
}
