//! Hand-wired forward and backward passes.

use super::{Accumulate, HookPoint, Interceptor, LayerParams, ModelConfig, NormSlot, Numerics, ParamSet, Phase, Submodule};
use crate::error::{Error, Result};
use crate::softfp::Format;
use crate::tensorops::kernels::{
    cross_entropy_rows, cross_entropy_rows_bwd, gelu_grad_with, gelu_tanh, gemm, layernorm_rows,
    layernorm_rows_bwd, softmax_row, softmax_row_bwd, MatRef,
};
use crate::tensorops::{LnStats, Tensor};

/// A micro-batch of `inputs.len() / seq_len` sequences. `targets[i]` is the
/// token that follows `inputs[i]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<u32>,
    pub targets: Vec<u32>,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(inputs: Vec<u32>, targets: Vec<u32>, seq_len: usize) -> Result<Self> {
        if seq_len == 0
            || inputs.is_empty()
            || inputs.len() != targets.len()
            || inputs.len() % seq_len != 0
        {
            return Err(Error::contract(format!(
                "batch of {} inputs / {} targets does not tile sequence length {seq_len}",
                inputs.len(),
                targets.len()
            )));
        }
        Ok(Batch {
            inputs,
            targets,
            seq_len,
        })
    }

    pub fn n_sequences(&self) -> usize {
        self.inputs.len() / self.seq_len
    }

    pub fn n_tokens(&self) -> usize {
        self.inputs.len()
    }
}

struct LayerCache {
    slot: NormSlot,
    x_in: Vec<f64>,
    ln1: LnStats,
    h1: Tensor,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    att: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: LnStats,
    h2: Tensor,
    fc_pre: Vec<f64>,
    fc_tanh: Vec<f64>,
    fc_act: Vec<f64>,
}

/// Activations kept from [`forward`] for [`backward`].
pub struct Cache {
    batch: Batch,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    lnf: LnStats,
    xf: Vec<f64>,
    logits: Vec<f64>,
    pub loss: f64,
}

impl Cache {
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

fn boundary(t: &mut Tensor, format: Option<Format>) {
    if let Some(f) = format {
        t.quantize_jit(f);
    }
}

fn hook(hooks: &mut dyn Interceptor, layer: usize, submodule: Submodule, phase: Phase, ts: &mut [&mut Tensor]) {
    hooks.intercept(
        HookPoint {
            layer,
            submodule,
            phase,
        },
        ts,
    );
}

/// `x·W + b` for `n` rows.
fn linear(acc: Accumulate, x: &[f64], n: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (k, m) = (w.shape[0], w.shape[1]);
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(&b.data);
    }
    gemm(
        acc,
        n,
        k,
        m,
        1.0,
        MatRef::row_major(x, k),
        MatRef::row_major(&w.data, m),
        1.0,
        &mut out,
        m,
    );
    out
}

/// Returns `(dx, dW, db)`.
fn linear_bwd(acc: Accumulate, dy: &[f64], x: &[f64], n: usize, w: &Tensor) -> (Vec<f64>, Tensor, Tensor) {
    let (k, m) = (w.shape[0], w.shape[1]);
    let mut dw = Tensor::zeros(&[k, m]);
    gemm(
        acc,
        k,
        n,
        m,
        1.0,
        MatRef::transposed(x, k),
        MatRef::row_major(dy, m),
        0.0,
        &mut dw.data,
        m,
    );
    let mut db = Tensor::zeros(&[m]);
    for row in dy.chunks_exact(m) {
        for (s, g) in db.data.iter_mut().zip(row) {
            *s += g;
        }
    }
    let mut dx = vec![0.0; n * k];
    gemm(
        acc,
        n,
        m,
        k,
        1.0,
        MatRef::row_major(dy, m),
        MatRef::transposed(&w.data, m),
        0.0,
        &mut dx,
        k,
    );
    (dx, dw, db)
}

struct Dims {
    acc: Accumulate,
    bsz: usize,
    t: usize,
    d: usize,
    nh: usize,
}

impl Dims {
    fn dh(&self) -> usize {
        self.d / self.nh
    }
}

/// Causal multi-head attention over a packed `[n, 3d]` q|k|v buffer.
/// Returns `(probs, out)` with probs laid out `[bsz, nh, t, t]`.
fn attention_fwd(qkv: &[f64], dims: &Dims) -> (Vec<f64>, Vec<f64>) {
    let Dims { acc, bsz, t, d, nh } = *dims;
    let dh = dims.dh();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; bsz * nh * t * t];
    let mut out = vec![0.0; bsz * t * d];
    for b in 0..bsz {
        let base = b * t * 3 * d;
        for h in 0..nh {
            let p = &mut probs[(b * nh + h) * t * t..][..t * t];
            let q = MatRef { data: &qkv[base + h * dh..], rs: 3 * d, cs: 1 };
            let kt = MatRef { data: &qkv[base + d + h * dh..], rs: 1, cs: 3 * d };
            gemm(acc, t, dh, t, scale, q, kt, 0.0, p, t);
            for (i, row) in p.chunks_exact_mut(t).enumerate() {
                softmax_row(row, i + 1);
            }
            let v = MatRef { data: &qkv[base + 2 * d + h * dh..], rs: 3 * d, cs: 1 };
            gemm(acc, t, t, dh, 1.0, MatRef::row_major(p, t), v, 0.0, &mut out[b * t * d + h * dh..], d);
        }
    }
    (probs, out)
}

fn attention_bwd(dout: &[f64], qkv: &[f64], probs: &[f64], dims: &Dims) -> Vec<f64> {
    let Dims { acc, bsz, t, d, nh } = *dims;
    let dh = dims.dh();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dqkv = vec![0.0; bsz * t * 3 * d];
    let mut dp = vec![0.0; t * t];
    let mut ds = vec![0.0; t * t];
    for b in 0..bsz {
        let base = b * t * 3 * d;
        for h in 0..nh {
            let p = &probs[(b * nh + h) * t * t..][..t * t];
            let d_o = MatRef { data: &dout[b * t * d + h * dh..], rs: d, cs: 1 };
            gemm(acc, t, t, dh, 1.0, MatRef::transposed(p, t), d_o, 0.0, &mut dqkv[base + 2 * d + h * dh..], 3 * d);
            let vt = MatRef { data: &qkv[base + 2 * d + h * dh..], rs: 1, cs: 3 * d };
            gemm(acc, t, dh, t, 1.0, d_o, vt, 0.0, &mut dp, t);
            for i in 0..t {
                let r = i * t..(i + 1) * t;
                softmax_row_bwd(&dp[r.clone()], &p[r.clone()], &mut ds[r], i + 1);
            }
            let k = MatRef { data: &qkv[base + d + h * dh..], rs: 3 * d, cs: 1 };
            gemm(acc, t, t, dh, scale, MatRef::row_major(&ds, t), k, 0.0, &mut dqkv[base + h * dh..], 3 * d);
            let q = MatRef { data: &qkv[base + h * dh..], rs: 3 * d, cs: 1 };
            gemm(acc, t, t, dh, scale, MatRef::transposed(&ds, t), q, 0.0, &mut dqkv[base + d + h * dh..], 3 * d);
        }
    }
    dqkv
}

fn layernorm(x: &[f64], d: usize, g: &Tensor, b: &Tensor) -> (Vec<f64>, LnStats) {
    let mut y = vec![0.0; x.len()];
    let stats = layernorm_rows(x, d, &g.data, &b.data, &mut y);
    (y, stats)
}

fn check_inputs(params: &ParamSet, cfg: &ModelConfig, batch: &Batch) -> Result<()> {
    cfg.validate()?;
    if params.layers.len() != cfg.n_layers
        || params.wte.shape != [cfg.vocab_size, cfg.d_model]
        || params.wpe.shape != [cfg.seq_len, cfg.d_model]
    {
        return Err(Error::contract("parameter shapes do not match the model config"));
    }
    if batch.seq_len > cfg.seq_len {
        return Err(Error::contract(format!(
            "sequence length {} exceeds model context {}",
            batch.seq_len, cfg.seq_len
        )));
    }
    let vocab = cfg.vocab_size as u32;
    if batch.inputs.iter().chain(&batch.targets).any(|&t| t >= vocab) {
        return Err(Error::contract("token outside vocabulary"));
    }
    Ok(())
}

/// Runs the model on `batch`, returning the mean token loss in nats and the
/// activation cache. A nonfinite loss is returned, not raised.
pub fn forward(
    params: &ParamSet,
    cfg: &ModelConfig,
    batch: &Batch,
    numerics: Numerics,
    hooks: &mut dyn Interceptor,
) -> Result<(f64, Cache)> {
    check_inputs(params, cfg, batch)?;
    let d = cfg.d_model;
    let n = batch.n_tokens();
    let acc = numerics.accumulate;
    let dims = Dims {
        acc,
        bsz: batch.n_sequences(),
        t: batch.seq_len,
        d,
        nh: cfg.n_heads,
    };
    let act = numerics.activations;

    let mut x = vec![0.0; n * d];
    for (r, (row, &id)) in x.chunks_exact_mut(d).zip(&batch.inputs).enumerate() {
        let pos = r % batch.seq_len;
        let tok = &params.wte.data[id as usize * d..][..d];
        let pe = &params.wpe.data[pos * d..][..d];
        for j in 0..d {
            row[j] = tok[j] + pe[j];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (l, p) in params.layers.iter().enumerate() {
        let slot = hooks.norm_slot(l);

        let (h1, ln1) = layernorm(&x, d, &p.ln1_g, &p.ln1_b);
        let mut h1 = Tensor::new(vec![n, d], h1)?;
        boundary(&mut h1, act);
        if slot == NormSlot::PreAttention {
            hook(hooks, l, Submodule::LayerNorm, Phase::FwdOutputs, &mut [&mut h1]);
        }

        let qkv = linear(acc, &h1.data, n, &p.qkv_w, &p.qkv_b);
        let (probs, att) = attention_fwd(&qkv, &dims);
        let mut a = Tensor::new(vec![n, d], linear(acc, &att, n, &p.proj_w, &p.proj_b))?;
        boundary(&mut a, act);
        hook(hooks, l, Submodule::Mha, Phase::FwdOutputs, &mut [&mut a]);

        let x_mid: Vec<f64> = x.iter().zip(&a.data).map(|(u, v)| u + v).collect();

        let (h2, ln2) = layernorm(&x_mid, d, &p.ln2_g, &p.ln2_b);
        let mut h2 = Tensor::new(vec![n, d], h2)?;
        boundary(&mut h2, act);
        if slot == NormSlot::PreMlp {
            hook(hooks, l, Submodule::LayerNorm, Phase::FwdOutputs, &mut [&mut h2]);
        }

        let fc_pre = linear(acc, &h2.data, n, &p.fc_w, &p.fc_b);
        let fc_tanh: Vec<f64> = fc_pre.iter().map(|&v| gelu_tanh(v)).collect();
        let fc_act: Vec<f64> = fc_pre.iter().zip(&fc_tanh).map(|(&v, &t)| 0.5 * v * (1.0 + t)).collect();
        let mut m = Tensor::new(vec![n, d], linear(acc, &fc_act, n, &p.out_w, &p.out_b))?;
        boundary(&mut m, act);
        hook(hooks, l, Submodule::Mlp, Phase::FwdOutputs, &mut [&mut m]);

        let x_out: Vec<f64> = x_mid.iter().zip(&m.data).map(|(u, v)| u + v).collect();
        layers.push(LayerCache {
            slot,
            x_in: std::mem::replace(&mut x, x_out),
            ln1,
            h1,
            qkv,
            probs,
            att,
            x_mid,
            ln2,
            h2,
            fc_pre,
            fc_tanh,
            fc_act,
        });
    }

    let (xf, lnf) = layernorm(&x, d, &params.lnf_g, &params.lnf_b);
    let v = cfg.vocab_size;
    let mut logits = vec![0.0; n * v];
    gemm(
        acc,
        n,
        d,
        v,
        1.0,
        MatRef::row_major(&xf, d),
        MatRef::row_major(&params.head.data, v),
        0.0,
        &mut logits,
        v,
    );
    let loss = cross_entropy_rows(&logits, v, &batch.targets);
    Ok((
        loss,
        Cache {
            batch: batch.clone(),
            layers,
            x_final: x,
            lnf,
            xf,
            logits,
            loss,
        },
    ))
}

fn take_grads(
    dw: Tensor,
    db: Tensor,
    dw2: Tensor,
    db2: Tensor,
    grad: Option<Format>,
) -> [Tensor; 4] {
    let mut out = [dw, db, dw2, db2];
    for t in &mut out {
        boundary(t, grad);
    }
    out
}

/// Gradients of `loss_scale · loss` with respect to every parameter.
pub fn backward(
    params: &ParamSet,
    cfg: &ModelConfig,
    cache: &Cache,
    loss_scale: f64,
    numerics: Numerics,
    hooks: &mut dyn Interceptor,
) -> Result<ParamSet> {
    let batch = &cache.batch;
    check_inputs(params, cfg, batch)?;
    if cache.layers.len() != params.layers.len() {
        return Err(Error::contract("cache does not match parameters"));
    }
    let d = cfg.d_model;
    let v = cfg.vocab_size;
    let n = batch.n_tokens();
    let acc = numerics.accumulate;
    let dims = Dims {
        acc,
        bsz: batch.n_sequences(),
        t: batch.seq_len,
        d,
        nh: cfg.n_heads,
    };
    let gfmt = numerics.gradients;

    let mut dlogits = vec![0.0; n * v];
    cross_entropy_rows_bwd(&cache.logits, v, &batch.targets, loss_scale, &mut dlogits);

    let mut dhead = Tensor::zeros(&[d, v]);
    gemm(
        acc,
        d,
        n,
        v,
        1.0,
        MatRef::transposed(&cache.xf, d),
        MatRef::row_major(&dlogits, v),
        0.0,
        &mut dhead.data,
        v,
    );
    let mut dxf = vec![0.0; n * d];
    gemm(
        acc,
        n,
        v,
        d,
        1.0,
        MatRef::row_major(&dlogits, v),
        MatRef::transposed(&params.head.data, v),
        0.0,
        &mut dxf,
        d,
    );
    let mut dx = vec![0.0; n * d];
    let mut dlnf_g = Tensor::zeros(&[d]);
    let mut dlnf_b = Tensor::zeros(&[d]);
    layernorm_rows_bwd(
        &dxf,
        &cache.x_final,
        d,
        &cache.lnf,
        &params.lnf_g.data,
        &mut dx,
        &mut dlnf_g.data,
        &mut dlnf_b.data,
    );

    let mut layer_grads: Vec<Option<LayerParams>> = vec![None; cfg.n_layers];
    for l in (0..cfg.n_layers).rev() {
        let p = &params.layers[l];
        let c = &cache.layers[l];

        // MLP block: m = gelu(h2·fc_w + fc_b)·out_w + out_b
        let (d_act, dout_w, dout_b) = linear_bwd(acc, &dx, &c.fc_act, n, &p.out_w);
        let d_pre: Vec<f64> = d_act
            .iter()
            .zip(c.fc_pre.iter().zip(&c.fc_tanh))
            .map(|(g, (&x, &t))| g * gelu_grad_with(x, t))
            .collect();
        let (dh2, dfc_w, dfc_b) = linear_bwd(acc, &d_pre, &c.h2.data, n, &p.fc_w);
        let mut dh2 = Tensor::new(vec![n, d], dh2)?;
        boundary(&mut dh2, gfmt);
        hook(hooks, l, Submodule::Mlp, Phase::BwdGradInputs, &mut [&mut dh2]);
        let [mut dfc_w, mut dfc_b, mut dout_w, mut dout_b] =
            take_grads(dfc_w, dfc_b, dout_w, dout_b, gfmt);
        hook(
            hooks,
            l,
            Submodule::Mlp,
            Phase::BwdGradWeights,
            &mut [&mut dfc_w, &mut dfc_b, &mut dout_w, &mut dout_b],
        );

        let mut dln2 = Tensor::zeros(&[n, d]);
        let mut dln2_g = Tensor::zeros(&[d]);
        let mut dln2_b = Tensor::zeros(&[d]);
        layernorm_rows_bwd(
            &dh2.data,
            &c.x_mid,
            d,
            &c.ln2,
            &p.ln2_g.data,
            &mut dln2.data,
            &mut dln2_g.data,
            &mut dln2_b.data,
        );
        boundary(&mut dln2, gfmt);
        boundary(&mut dln2_g, gfmt);
        boundary(&mut dln2_b, gfmt);
        if c.slot == NormSlot::PreMlp {
            hook(hooks, l, Submodule::LayerNorm, Phase::BwdGradInputs, &mut [&mut dln2]);
            hook(
                hooks,
                l,
                Submodule::LayerNorm,
                Phase::BwdGradWeights,
                &mut [&mut dln2_g, &mut dln2_b],
            );
        }
        for (acc, g) in dx.iter_mut().zip(&dln2.data) {
            *acc += g;
        }

        // Attention block: a = attn(h1·qkv_w + qkv_b)·proj_w + proj_b
        let (datt, dproj_w, dproj_b) = linear_bwd(acc, &dx, &c.att, n, &p.proj_w);
        let dqkv = attention_bwd(&datt, &c.qkv, &c.probs, &dims);
        let (dh1, dqkv_w, dqkv_b) = linear_bwd(acc, &dqkv, &c.h1.data, n, &p.qkv_w);
        let mut dh1 = Tensor::new(vec![n, d], dh1)?;
        boundary(&mut dh1, gfmt);
        hook(hooks, l, Submodule::Mha, Phase::BwdGradInputs, &mut [&mut dh1]);
        let [mut dqkv_w, mut dqkv_b, mut dproj_w, mut dproj_b] =
            take_grads(dqkv_w, dqkv_b, dproj_w, dproj_b, gfmt);
        hook(
            hooks,
            l,
            Submodule::Mha,
            Phase::BwdGradWeights,
            &mut [&mut dqkv_w, &mut dqkv_b, &mut dproj_w, &mut dproj_b],
        );

        let mut dln1 = Tensor::zeros(&[n, d]);
        let mut dln1_g = Tensor::zeros(&[d]);
        let mut dln1_b = Tensor::zeros(&[d]);
        layernorm_rows_bwd(
            &dh1.data,
            &c.x_in,
            d,
            &c.ln1,
            &p.ln1_g.data,
            &mut dln1.data,
            &mut dln1_g.data,
            &mut dln1_b.data,
        );
        boundary(&mut dln1, gfmt);
        boundary(&mut dln1_g, gfmt);
        boundary(&mut dln1_b, gfmt);
        if c.slot == NormSlot::PreAttention {
            hook(hooks, l, Submodule::LayerNorm, Phase::BwdGradInputs, &mut [&mut dln1]);
            hook(
                hooks,
                l,
                Submodule::LayerNorm,
                Phase::BwdGradWeights,
                &mut [&mut dln1_g, &mut dln1_b],
            );
        }
        for (acc, g) in dx.iter_mut().zip(&dln1.data) {
            *acc += g;
        }

        layer_grads[l] = Some(LayerParams {
            ln1_g: dln1_g,
            ln1_b: dln1_b,
            qkv_w: dqkv_w,
            qkv_b: dqkv_b,
            proj_w: dproj_w,
            proj_b: dproj_b,
            ln2_g: dln2_g,
            ln2_b: dln2_b,
            fc_w: dfc_w,
            fc_b: dfc_b,
            out_w: dout_w,
            out_b: dout_b,
        });
    }

    let mut dwte = Tensor::zeros(&[v, d]);
    let mut dwpe = Tensor::zeros(&[cfg.seq_len, d]);
    for (r, (row, &id)) in dx.chunks_exact(d).zip(&batch.inputs).enumerate() {
        let pos = r % batch.seq_len;
        let te = &mut dwte.data[id as usize * d..][..d];
        for (acc, g) in te.iter_mut().zip(row) {
            *acc += g;
        }
        let pe = &mut dwpe.data[pos * d..][..d];
        for (acc, g) in pe.iter_mut().zip(row) {
            *acc += g;
        }
    }

    Ok(ParamSet {
        wte: dwte,
        wpe: dwpe,
        layers: layer_grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        lnf_g: dlnf_g,
        lnf_b: dlnf_b,
        head: dhead,
    })
}
