//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use adapt_asr::tensor::{ParamStore, Session, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `|a − b| ≤ rel·max(|a|, |b|) + abs_floor`.
pub fn close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) + abs_floor
}

/// Largest violation of [`close`] between analytic and central-difference
/// gradients of `f` with respect to every input, as `(worst relative error,
/// description)`. `f` must build a scalar from the given leaves.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    gradcheck_with(inputs, 1e-5, 1e-5, 1e-8, f)
}

pub fn gradcheck_with<F>(inputs: &[Tensor], h: f64, rel: f64, abs_floor: f64, f: F) -> Result<(), String>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true).unwrap()).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).map_err(|e| e.to_string())?;
    let eval = |inputs: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone(), true).unwrap()).collect();
        let o = f(&mut t, &vs);
        t.value(o).item().unwrap()
    };
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            if !close(analytic[j], numeric, rel, abs_floor) {
                return Err(format!(
                    "input {i} element {j}: analytic {} vs numeric {numeric}",
                    analytic[j]
                ));
            }
        }
    }
    Ok(())
}

/// `Σ out ⊙ w` for fixed weights, so every output element contributes a
/// distinct direction to the scalar.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = random_tensor(&mut rng(seed), &shape, 1.0);
    let w = tape.constant(w).unwrap();
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

/// `−log P(y|x)` by summing probabilities of every monotonic alignment
/// path explicitly, in probability space.
pub fn brute_force_rnnt(logits: &Tensor, targets: &[usize]) -> f64 {
    let s = logits.shape();
    let (t_len, u_len, v) = (s[0], s[1], s[2]);
    let blank = v - 1;
    let prob = |t: usize, u: usize, k: usize| {
        let row = logits.row(t * u_len + u);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        row[k].exp() / z
    };
    fn walk(t: usize, u: usize, t_len: usize, u_len: usize, p: &dyn Fn(usize, usize) -> (f64, f64)) -> f64 {
        let (label, blank) = p(t, u);
        let mut total = 0.0;
        if u + 1 < u_len {
            total += label * walk(t, u + 1, t_len, u_len, p);
        }
        if t + 1 < t_len {
            total += blank * walk(t + 1, u, t_len, u_len, p);
        } else if u + 1 == u_len {
            total += blank;
        }
        total
    }
    let arcs = |t: usize, u: usize| {
        let label = if u < targets.len() { prob(t, u, targets[u]) } else { 0.0 };
        (label, prob(t, u, blank))
    };
    -walk(0, 0, t_len, u_len, &arcs).ln()
}

/// Central-difference check of every parameter bound while `f` builds a
/// scalar loss from `store`.
pub fn param_gradcheck<F>(store: &ParamStore, h: f64, rel: f64, abs_floor: f64, f: F) -> Result<(), String>
where
    F: Fn(&mut Session) -> Var,
{
    let mut s = Session::train(store);
    let out = f(&mut s);
    s.backward(out).map_err(|e| e.to_string())?;
    let grads = s.grads();
    if grads.is_empty() {
        return Err("no parameter received a gradient".into());
    }
    let eval = |p: &ParamStore| {
        let mut s = Session::inference(p);
        let o = f(&mut s);
        s.value(o).item().unwrap()
    };
    for (name, g) in &grads {
        for j in 0..g.len() {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            if !close(g.data()[j], numeric, rel, abs_floor) {
                return Err(format!("{name}[{j}]: analytic {} vs numeric {numeric}", g.data()[j]));
            }
        }
    }
    Ok(())
}
