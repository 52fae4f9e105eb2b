//! Central finite-difference gradient checks shared by the gradient and
//! acceptance suites. Each `worst_*` returns the largest norm-wise relative
//! error over its trials.

use prism::model::{backward, forward, init_params, Batch, ModelConfig, NoHooks, Numerics, ParamSet};
use prism::tensorops::{
    cross_entropy_bwd, cross_entropy_fwd, embedding_bwd, embedding_fwd, gelu_bwd, gelu_fwd,
    layernorm_bwd, layernorm_fwd, matmul_bwd, matmul_fwd, softmax_bwd, softmax_fwd, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

const H: f64 = 1e-4;
const TRIALS: u64 = 10;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

/// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Numeric gradient of `f` with respect to every element of `x`.
fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.data[i];
            probe.data[i] = orig + H;
            let up = f(&probe);
            probe.data[i] = orig - H;
            let down = f(&probe);
            probe.data[i] = orig;
            (up - down) / (2.0 * H)
        })
        .collect()
}

fn worst(seed: u64, mut trial: impl FnMut(&mut ChaCha8Rng) -> f64) -> f64 {
    (0..TRIALS)
        .map(|t| trial(&mut ChaCha8Rng::seed_from_u64(seed + t)))
        .fold(0.0, f64::max)
}

pub fn worst_matmul() -> f64 {
    worst(0, |rng| {
        let a = random(rng, &[4, 5]);
        let b = random(rng, &[5, 3]);
        let w = random(rng, &[4, 3]);
        let (da, db) = matmul_bwd(&w, &a, &b).unwrap();
        let na = numeric_grad(&a, |a| dot(&matmul_fwd(a, &b).unwrap(), &w));
        let nb = numeric_grad(&b, |b| dot(&matmul_fwd(&a, b).unwrap(), &w));
        rel_error(&da.data, &na).max(rel_error(&db.data, &nb))
    })
}

pub fn worst_layernorm() -> f64 {
    worst(100, |rng| {
        let x = random(rng, &[3, 6]);
        let g = random(rng, &[6]);
        let b = random(rng, &[6]);
        let w = random(rng, &[3, 6]);
        let (_, stats) = layernorm_fwd(&x, &g, &b).unwrap();
        let (dx, dg, db) = layernorm_bwd(&w, &x, &stats, &g).unwrap();
        let f = |x: &Tensor, g: &Tensor, b: &Tensor| dot(&layernorm_fwd(x, g, b).unwrap().0, &w);
        rel_error(&dx.data, &numeric_grad(&x, |x| f(x, &g, &b)))
            .max(rel_error(&dg.data, &numeric_grad(&g, |g| f(&x, g, &b))))
            .max(rel_error(&db.data, &numeric_grad(&b, |b| f(&x, &g, b))))
    })
}

pub fn worst_gelu() -> f64 {
    worst(200, |rng| {
        let x = random(rng, &[4, 4]);
        let w = random(rng, &[4, 4]);
        let dx = gelu_bwd(&w, &x).unwrap();
        rel_error(&dx.data, &numeric_grad(&x, |x| dot(&gelu_fwd(x), &w)))
    })
}

pub fn worst_softmax() -> f64 {
    worst(300, |rng| {
        let x = random(rng, &[3, 5]);
        let w = random(rng, &[3, 5]);
        let y = softmax_fwd(&x);
        let dx = softmax_bwd(&w, &y).unwrap();
        rel_error(&dx.data, &numeric_grad(&x, |x| dot(&softmax_fwd(x), &w)))
    })
}

pub fn worst_embedding() -> f64 {
    worst(400, |rng| {
        let table = random(rng, &[7, 3]);
        let ids: Vec<u32> = (0..5).map(|_| rng.random_range(0..7)).collect();
        let w = random(rng, &[5, 3]);
        let dt = embedding_bwd(&w, &ids, 7).unwrap();
        rel_error(&dt.data, &numeric_grad(&table, |t| dot(&embedding_fwd(t, &ids).unwrap(), &w)))
    })
}

pub fn worst_cross_entropy() -> f64 {
    worst(500, |rng| {
        let logits = random(rng, &[4, 6]);
        let targets: Vec<u32> = (0..4).map(|_| rng.random_range(0..6)).collect();
        let d = cross_entropy_bwd(&logits, &targets, 1.0).unwrap();
        rel_error(&d.data, &numeric_grad(&logits, |l| cross_entropy_fwd(l, &targets).unwrap()))
    })
}

pub fn tiny_model(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_ff: 16,
        vocab_size: 11,
        seq_len: 5,
        init_seed: seed,
    }
}

fn loss_of(p: &ParamSet, cfg: &ModelConfig, batch: &Batch) -> f64 {
    forward(p, cfg, batch, Numerics::WIDE, &mut NoHooks).unwrap().0
}

/// End-to-end check of a 1-layer model: returns the worst error over the
/// whole gradient and the worst per-tensor error, so no small tensor hides
/// behind a large one.
pub fn worst_end_to_end() -> (f64, f64) {
    let mut overall = 0.0f64;
    let mut per_tensor = 0.0f64;
    for trial in 0..TRIALS {
        let cfg = tiny_model(trial);
        let mut rng = ChaCha8Rng::seed_from_u64(600 + trial);
        // Larger-than-default weights so attention is far from uniform.
        let mut params = init_params(&cfg).unwrap();
        for t in params.tensors_mut() {
            if t.shape.len() == 2 {
                t.data.iter_mut().for_each(|v| *v *= 20.0);
            } else {
                t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let tokens: Vec<u32> = (0..11).map(|_| rng.random_range(0..11)).collect();
        let batch = Batch::new(
            [&tokens[0..5], &tokens[5..10]].concat(),
            [&tokens[1..6], &tokens[6..11]].concat(),
            5,
        )
        .unwrap();

        let (_, cache) = forward(&params, &cfg, &batch, Numerics::WIDE, &mut NoHooks).unwrap();
        let grads = backward(&params, &cfg, &cache, 1.0, Numerics::WIDE, &mut NoHooks).unwrap();

        let flat = params.flatten();
        let numeric: Vec<f64> = (0..flat.len())
            .map(|i| {
                let mut up = flat.clone();
                up[i] += H;
                let mut down = flat.clone();
                down[i] -= H;
                let lu = loss_of(&params.with_values(&up).unwrap(), &cfg, &batch);
                let ld = loss_of(&params.with_values(&down).unwrap(), &cfg, &batch);
                (lu - ld) / (2.0 * H)
            })
            .collect();
        overall = overall.max(rel_error(&grads.flatten(), &numeric));
        let mut offset = 0;
        for g in grads.tensors() {
            let n = &numeric[offset..offset + g.len()];
            offset += g.len();
            per_tensor = per_tensor.max(rel_error(&g.data, n));
        }
    }
    (overall, per_tensor)
}
