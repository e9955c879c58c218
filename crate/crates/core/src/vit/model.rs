//! Forward and backward passes.
//!
//! Pre-LN encoder: per layer `z += MSA(LN(z))`, `z += MLP(LN(z))` with a
//! tanh-approximated GELU, then a final LN over all tokens. The classifier
//! reads row 0 only. No dropout anywhere, so a forward pass is a pure
//! function of its inputs.
//!
//! Batch gradients are computed per sample (optionally on the rayon pool)
//! and summed in batch order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::config::ViTConfig;
use super::params::{LayerParams, ViTParams};
use super::tensor::{dot, Matrix, Real};
use crate::blockcodec::ImageTensor;
use crate::error::{Error, Result};

/// `(N+1) x D` token matrix; row 0 is the class token.
pub type TokenSequence<T> = Matrix<T>;

const LN_EPS: f64 = 1e-6;

/// Patch matrix `N x L`: row `i` is the `i`-th `p x p` patch in raster
/// order, flattened pixel-major / channel-minor (same order as the block
/// codec).
pub fn extract_patches<T: Real>(x: &ImageTensor, cfg: &ViTConfig) -> Result<Matrix<T>> {
    let (h, w, c) = x.shape();
    if (h, w, c) != (cfg.image_h, cfg.image_w, cfg.channels) {
        return Err(Error::Shape(format!(
            "image is {h}x{w}x{c}, model expects {}x{}x{}",
            cfg.image_h, cfg.image_w, cfg.channels
        )));
    }
    let p = cfg.patch_size;
    let grid_w = w / p;
    let mut out = Matrix::zeros(cfg.n_patches(), cfg.patch_len());
    let data = x.data();
    for i in 0..cfg.n_patches() {
        let (by, bx) = (i / grid_w, i % grid_w);
        let row = out.row_mut(i);
        for r in 0..p {
            let start = ((by * p + r) * w + bx * p) * c;
            for (dst, &v) in row[r * p * c..(r + 1) * p * c]
                .iter_mut()
                .zip(&data[start..start + p * c])
            {
                *dst = T::from(v).expect("finite pixel");
            }
        }
    }
    Ok(out)
}

/// `z_0 = [x_class; x_p^1 E; ...; x_p^N E] + E_pos`
pub fn embed_patches<T: Real>(
    patches: &Matrix<T>,
    params: &ViTParams<T>,
) -> Result<TokenSequence<T>> {
    let (n, d) = (patches.rows, params.patch_embed.cols);
    if patches.cols != params.patch_embed.rows || params.pos_embed.rows != n + 1 {
        return Err(Error::Shape(format!(
            "patches {}x{} incompatible with E {}x{} / E_pos {} rows",
            patches.rows, patches.cols, params.patch_embed.rows, d, params.pos_embed.rows
        )));
    }
    let projected = patches.matmul(&params.patch_embed);
    let mut z = Matrix::zeros(n + 1, d);
    z.row_mut(0).copy_from_slice(&params.class_token);
    z.data[d..].copy_from_slice(&projected.data);
    z.add_assign(&params.pos_embed);
    Ok(z)
}

pub fn embed<T: Real>(
    x: &ImageTensor,
    params: &ViTParams<T>,
    cfg: &ViTConfig,
) -> Result<TokenSequence<T>> {
    embed_patches(&extract_patches(x, cfg)?, params)
}

struct LnCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

fn layer_norm<T: Real>(x: &Matrix<T>, gain: &[T], bias: &[T]) -> (Matrix<T>, LnCache<T>) {
    let d = x.cols;
    let n = T::of(d as f64);
    let mut xhat = Matrix::zeros(x.rows, d);
    let mut y = Matrix::zeros(x.rows, d);
    let mut inv_std = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + T::of(LN_EPS)).sqrt();
        inv_std.push(is);
        for j in 0..d {
            let xh = (row[j] - mean) * is;
            xhat.data[i * d + j] = xh;
            y.data[i * d + j] = xh * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward<T: Real>(
    dy: &Matrix<T>,
    cache: &LnCache<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
) -> Matrix<T> {
    let d = dy.cols;
    let n = T::of(d as f64);
    let mut dx = Matrix::zeros(dy.rows, d);
    let mut dxhat = vec![T::zero(); d];
    for i in 0..dy.rows {
        let (dyr, xh) = (dy.row(i), cache.xhat.row(i));
        for j in 0..d {
            dgain[j] += dyr[j] * xh[j];
            dbias[j] += dyr[j];
            dxhat[j] = dyr[j] * gain[j];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() / n;
        let mean_dxhat_xhat = dot(&dxhat, xh) / n;
        let is = cache.inv_std[i];
        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
            *out = is * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    dx
}

fn gelu<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::of(0.044715) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn linear<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &[T]) -> Matrix<T> {
    let mut y = x.matmul(w);
    y.add_row_vector(b);
    y
}

fn add_to<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a1: Matrix<T>,
    q: Matrix<T>,
    k: Matrix<T>,
    v: Matrix<T>,
    /// Attention probabilities, one `S x S` matrix per head.
    probs: Vec<Matrix<T>>,
    ctx: Matrix<T>,
    ln2: LnCache<T>,
    a2: Matrix<T>,
    h1: Matrix<T>,
    g: Matrix<T>,
}

fn layer_forward<T: Real>(
    z: &Matrix<T>,
    lp: &LayerParams<T>,
    heads: usize,
) -> (Matrix<T>, LayerCache<T>) {
    let (s, d) = (z.rows, z.cols);
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();

    let (a1, ln1) = layer_norm(z, &lp.ln1_gain, &lp.ln1_bias);
    let q = linear(&a1, &lp.wq, &lp.bq);
    let k = linear(&a1, &lp.wk, &lp.bk);
    let v = linear(&a1, &lp.wv, &lp.bv);

    let mut ctx = Matrix::zeros(s, d);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let mut p = Matrix::zeros(s, s);
        for i in 0..s {
            let qi = &q.row(i)[cols.clone()];
            let row = p.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r = dot(qi, &k.row(j)[cols.clone()]) * scale;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for r in row.iter_mut() {
                *r = (*r - max).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r = *r / sum;
            }
        }
        for i in 0..s {
            for j in 0..s {
                let pij = p.get(i, j);
                let vj = &v.row(j)[cols.clone()];
                for (o, &vv) in ctx.row_mut(i)[cols.clone()].iter_mut().zip(vj) {
                    *o += pij * vv;
                }
            }
        }
        probs.push(p);
    }
    let mut x_mid = linear(&ctx, &lp.wo, &lp.bo);
    x_mid.add_assign(z);

    let (a2, ln2) = layer_norm(&x_mid, &lp.ln2_gain, &lp.ln2_bias);
    let h1 = linear(&a2, &lp.w1, &lp.b1);
    let g = Matrix {
        rows: h1.rows,
        cols: h1.cols,
        data: h1.data.iter().map(|&x| gelu(x)).collect(),
    };
    let mut out = linear(&g, &lp.w2, &lp.b2);
    out.add_assign(&x_mid);

    let cache = LayerCache {
        ln1,
        a1,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        a2,
        h1,
        g,
    };
    (out, cache)
}

fn layer_backward<T: Real>(
    dout: &Matrix<T>,
    lp: &LayerParams<T>,
    lc: &LayerCache<T>,
    lg: &mut LayerParams<T>,
    heads: usize,
) -> Matrix<T> {
    let (s, d) = (dout.rows, dout.cols);
    let dh = d / heads;
    let scale = T::one() / T::of(dh as f64).sqrt();

    // MLP branch
    lg.w2.add_assign(&lc.g.t_matmul(dout));
    add_to(&mut lg.b2, &dout.column_sums());
    let mut dh1 = dout.matmul_t(&lp.w2);
    for (g, &x) in dh1.data.iter_mut().zip(&lc.h1.data) {
        *g *= gelu_grad(x);
    }
    lg.w1.add_assign(&lc.a2.t_matmul(&dh1));
    add_to(&mut lg.b1, &dh1.column_sums());
    let da2 = dh1.matmul_t(&lp.w1);
    let mut dx_mid = layer_norm_backward(
        &da2,
        &lc.ln2,
        &lp.ln2_gain,
        &mut lg.ln2_gain,
        &mut lg.ln2_bias,
    );
    dx_mid.add_assign(dout);

    // attention branch
    lg.wo.add_assign(&lc.ctx.t_matmul(&dx_mid));
    add_to(&mut lg.bo, &dx_mid.column_sums());
    let dctx = dx_mid.matmul_t(&lp.wo);
    let mut dq = Matrix::zeros(s, d);
    let mut dk = Matrix::zeros(s, d);
    let mut dv = Matrix::zeros(s, d);
    let mut dp = vec![T::zero(); s];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let p = &lc.probs[h];
        for i in 0..s {
            let dci = &dctx.row(i)[cols.clone()];
            for (j, dpj) in dp.iter_mut().enumerate() {
                *dpj = dot(dci, &lc.v.row(j)[cols.clone()]);
            }
            let pi = p.row(i);
            let weighted = dot(pi, &dp);
            for j in 0..s {
                let pij = pi[j];
                let ds = pij * (dp[j] - weighted) * scale;
                let (qi, kj) = (&lc.q.row(i)[cols.clone()], &lc.k.row(j)[cols.clone()]);
                for (o, &kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(kj) {
                    *o += ds * kv;
                }
                for (o, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(qi) {
                    *o += ds * qv;
                }
                for (o, &dc) in dv.row_mut(j)[cols.clone()].iter_mut().zip(dci) {
                    *o += pij * dc;
                }
            }
        }
    }
    lg.wq.add_assign(&lc.a1.t_matmul(&dq));
    add_to(&mut lg.bq, &dq.column_sums());
    lg.wk.add_assign(&lc.a1.t_matmul(&dk));
    add_to(&mut lg.bk, &dk.column_sums());
    lg.wv.add_assign(&lc.a1.t_matmul(&dv));
    add_to(&mut lg.bv, &dv.column_sums());
    let mut da1 = dq.matmul_t(&lp.wq);
    da1.add_assign(&dk.matmul_t(&lp.wk));
    da1.add_assign(&dv.matmul_t(&lp.wv));
    let mut dz = layer_norm_backward(
        &da1,
        &lc.ln1,
        &lp.ln1_gain,
        &mut lg.ln1_gain,
        &mut lg.ln1_bias,
    );
    dz.add_assign(&dx_mid);
    dz
}

struct EncoderCache<T> {
    layers: Vec<LayerCache<T>>,
    final_ln: LnCache<T>,
}

fn run_layers<T: Real>(
    z: &TokenSequence<T>,
    params: &ViTParams<T>,
    cfg: &ViTConfig,
) -> Result<(TokenSequence<T>, Vec<LayerCache<T>>)> {
    if z.rows != cfg.seq_len() || z.cols != cfg.embed_dim {
        return Err(Error::Shape(format!(
            "token sequence is {}x{}, model expects {}x{}",
            z.rows,
            z.cols,
            cfg.seq_len(),
            cfg.embed_dim
        )));
    }
    let mut x = z.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for (i, lp) in params.layers.iter().enumerate() {
        let (out, cache) = layer_forward(&x, lp, cfg.heads);
        if !out.is_finite() {
            return Err(Error::Numeric {
                stage: "encoder",
                layer: i,
            });
        }
        x = out;
        layers.push(cache);
    }
    Ok((x, layers))
}

fn encoder_forward_cached<T: Real>(
    z: &TokenSequence<T>,
    params: &ViTParams<T>,
    cfg: &ViTConfig,
) -> Result<(TokenSequence<T>, EncoderCache<T>)> {
    let (x, layers) = run_layers(z, params, cfg)?;
    let (out, final_ln) = layer_norm(&x, &params.final_ln_gain, &params.final_ln_bias);
    Ok((out, EncoderCache { layers, final_ln }))
}

/// The residual layer stack alone, without the final layer norm.
pub fn encoder_layers<T: Real>(
    z: &TokenSequence<T>,
    params: &ViTParams<T>,
    cfg: &ViTConfig,
) -> Result<TokenSequence<T>> {
    run_layers(z, params, cfg).map(|(x, _)| x)
}

/// Runs every encoder layer and the final layer norm over all tokens.
pub fn encoder_forward<T: Real>(
    z: &TokenSequence<T>,
    params: &ViTParams<T>,
    cfg: &ViTConfig,
) -> Result<TokenSequence<T>> {
    encoder_forward_cached(z, params, cfg).map(|(out, _)| out)
}

/// `logits = z_out[0] * head + bias`
pub fn classify<T: Real>(z_out: &TokenSequence<T>, params: &ViTParams<T>) -> Vec<T> {
    let cls = z_out.row(0);
    let mut logits = params.head_bias.clone();
    for (i, &c) in cls.iter().enumerate() {
        for (l, &w) in logits.iter_mut().zip(params.head.row(i)) {
            *l += c * w;
        }
    }
    logits
}

pub fn forward<T: Real>(x: &ImageTensor, params: &ViTParams<T>, cfg: &ViTConfig) -> Result<Vec<T>> {
    let z = embed(x, params, cfg)?;
    let out = encoder_forward(&z, params, cfg)?;
    Ok(classify(&out, params))
}

/// Numerically stable `(softmax, -log softmax[label])`.
pub fn softmax_cross_entropy<T: Real>(logits: &[T], label: usize) -> (Vec<T>, T) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum = exps.iter().copied().sum::<T>();
    let probs = exps.into_iter().map(|e| e / sum).collect();
    let loss = sum.ln() + max - logits[label];
    (probs, loss)
}

pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Loss and gradients for a single sample, unscaled.
struct SampleGrad<T> {
    loss: T,
    correct: bool,
    grads: ViTParams<T>,
}

fn sample_grads<T: Real>(
    x: &ImageTensor,
    label: usize,
    params: &ViTParams<T>,
    cfg: &ViTConfig,
) -> Result<SampleGrad<T>> {
    if label >= cfg.classes {
        return Err(Error::Label {
            label,
            classes: cfg.classes,
        });
    }
    let patches = extract_patches(x, cfg)?;
    let z0 = embed_patches(&patches, params)?;
    let (out, cache) = encoder_forward_cached(&z0, params, cfg)?;
    let logits = classify(&out, params);
    let (probs, loss) = softmax_cross_entropy(&logits, label);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let mut dlogits = probs;
    dlogits[label] -= T::one();

    let mut g = params.zeros_like();
    let d = cfg.embed_dim;
    // head
    let cls = out.row(0);
    for (i, &c) in cls.iter().enumerate() {
        for (gw, &dl) in g.head.row_mut(i).iter_mut().zip(&dlogits) {
            *gw += c * dl;
        }
    }
    add_to(&mut g.head_bias, &dlogits);
    let mut dout = Matrix::zeros(out.rows, d);
    for (i, o) in dout.row_mut(0).iter_mut().enumerate() {
        *o = dot(params.head.row(i), &dlogits);
    }
    let mut dz = layer_norm_backward(
        &dout,
        &cache.final_ln,
        &params.final_ln_gain,
        &mut g.final_ln_gain,
        &mut g.final_ln_bias,
    );
    for ((lp, lc), lg) in params
        .layers
        .iter()
        .zip(&cache.layers)
        .zip(g.layers.iter_mut())
        .rev()
    {
        dz = layer_backward(&dz, lp, lc, lg, cfg.heads);
    }
    // embeddings
    g.pos_embed.add_assign(&dz);
    add_to(&mut g.class_token, dz.row(0));
    let dpatch = Matrix::from_vec(dz.rows - 1, d, dz.data[d..].to_vec());
    g.patch_embed.add_assign(&patches.t_matmul(&dpatch));

    Ok(SampleGrad {
        loss,
        correct: argmax(&logits) == label,
        grads: g,
    })
}

/// Mean cross-entropy over a batch with exact gradients of that mean.
#[derive(Debug, Clone)]
pub struct LossAndGrads<T> {
    pub loss: T,
    /// Number of batch items whose argmax matched the label.
    pub correct: usize,
    pub grads: ViTParams<T>,
}

pub fn loss_and_grads<T: Real>(
    batch: &[(&ImageTensor, usize)],
    params: &ViTParams<T>,
    cfg: &ViTConfig,
) -> Result<LossAndGrads<T>> {
    if batch.is_empty() {
        return Err(Error::InvalidSize("empty batch".into()));
    }
    let per_sample: Vec<SampleGrad<T>> = batch
        .par_iter()
        .map(|&(x, y)| sample_grads(x, y, params, cfg))
        .collect::<Result<_>>()?;
    let inv = T::one() / T::of(batch.len() as f64);
    let mut grads = params.zeros_like();
    let mut loss = T::zero();
    let mut correct = 0;
    for s in &per_sample {
        grads.axpy(inv, &s.grads);
        loss += s.loss;
        correct += usize::from(s.correct);
    }
    Ok(LossAndGrads {
        loss: loss * inv,
        correct,
        grads,
    })
}
