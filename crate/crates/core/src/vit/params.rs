use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ViTConfig;
use super::tensor::{cast_slice, Matrix, Real};
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub wq: Matrix<T>,
    pub bq: Vec<T>,
    pub wk: Matrix<T>,
    pub bk: Vec<T>,
    pub wv: Matrix<T>,
    pub bv: Vec<T>,
    pub wo: Matrix<T>,
    pub bo: Vec<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    /// D x mlp_dim
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    /// mlp_dim x D
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
}

/// All trainable weights. Matrices act on row vectors (`x * W`).
///
/// The same struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTParams<T = f32> {
    /// Patch embedding `E`, `L x D`.
    pub patch_embed: Matrix<T>,
    /// Position embedding `E_pos`, `(N+1) x D`; row 0 belongs to the class token.
    pub pos_embed: Matrix<T>,
    pub class_token: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_ln_gain: Vec<T>,
    pub final_ln_bias: Vec<T>,
    /// `D x classes`
    pub head: Matrix<T>,
    pub head_bias: Vec<T>,
}

/// Borrowed view of one named tensor.
#[derive(Debug)]
pub struct TensorRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

impl<T: Real> LayerParams<T> {
    fn zeros(d: usize, m: usize) -> Self {
        Self {
            ln1_gain: vec![T::zero(); d],
            ln1_bias: vec![T::zero(); d],
            wq: Matrix::zeros(d, d),
            bq: vec![T::zero(); d],
            wk: Matrix::zeros(d, d),
            bk: vec![T::zero(); d],
            wv: Matrix::zeros(d, d),
            bv: vec![T::zero(); d],
            wo: Matrix::zeros(d, d),
            bo: vec![T::zero(); d],
            ln2_gain: vec![T::zero(); d],
            ln2_bias: vec![T::zero(); d],
            w1: Matrix::zeros(d, m),
            b1: vec![T::zero(); m],
            w2: Matrix::zeros(m, d),
            b2: vec![T::zero(); d],
        }
    }
}

macro_rules! layer_tensors {
    ($layer:expr, $vec:ident, $mat:ident) => {
        [
            $vec!("ln1.gain", $layer.ln1_gain),
            $vec!("ln1.bias", $layer.ln1_bias),
            $mat!("attn.wq", $layer.wq),
            $vec!("attn.bq", $layer.bq),
            $mat!("attn.wk", $layer.wk),
            $vec!("attn.bk", $layer.bk),
            $mat!("attn.wv", $layer.wv),
            $vec!("attn.bv", $layer.bv),
            $mat!("attn.wo", $layer.wo),
            $vec!("attn.bo", $layer.bo),
            $vec!("ln2.gain", $layer.ln2_gain),
            $vec!("ln2.bias", $layer.ln2_bias),
            $mat!("mlp.w1", $layer.w1),
            $vec!("mlp.b1", $layer.b1),
            $mat!("mlp.w2", $layer.w2),
            $vec!("mlp.b2", $layer.b2),
        ]
    };
}

impl<T: Real> ViTParams<T> {
    pub fn zeros(cfg: &ViTConfig) -> Self {
        let d = cfg.embed_dim;
        Self {
            patch_embed: Matrix::zeros(cfg.patch_len(), d),
            pos_embed: Matrix::zeros(cfg.seq_len(), d),
            class_token: vec![T::zero(); d],
            layers: (0..cfg.layers)
                .map(|_| LayerParams::zeros(d, cfg.mlp_dim))
                .collect(),
            final_ln_gain: vec![T::zero(); d],
            final_ln_bias: vec![T::zero(); d],
            head: Matrix::zeros(d, cfg.classes),
            head_bias: vec![T::zero(); cfg.classes],
        }
    }

    /// Every tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        fn v<'a, T>(name: String, x: &'a [T]) -> TensorRef<'a, T> {
            TensorRef {
                name,
                shape: vec![x.len()],
                data: x,
            }
        }
        fn m<T>(name: String, x: &Matrix<T>) -> TensorRef<'_, T> {
            TensorRef {
                name,
                shape: vec![x.rows, x.cols],
                data: &x.data,
            }
        }
        let mut out = vec![
            m("patch_embed".into(), &self.patch_embed),
            m("pos_embed".into(), &self.pos_embed),
            v("class_token".into(), &self.class_token),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            macro_rules! vv {
                ($n:expr, $f:expr) => {
                    v(format!("layers.{i}.{}", $n), &$f)
                };
            }
            macro_rules! mm {
                ($n:expr, $f:expr) => {
                    m(format!("layers.{i}.{}", $n), &$f)
                };
            }
            out.extend(layer_tensors!(layer, vv, mm));
        }
        out.push(v("final_ln.gain".into(), &self.final_ln_gain));
        out.push(v("final_ln.bias".into(), &self.final_ln_bias));
        out.push(m("head.weight".into(), &self.head));
        out.push(v("head.bias".into(), &self.head_bias));
        out
    }

    /// Mutable flat views, same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![
            &mut self.patch_embed.data,
            &mut self.pos_embed.data,
            &mut self.class_token,
        ];
        for layer in &mut self.layers {
            macro_rules! vv {
                ($n:expr, $f:expr) => {
                    &mut $f[..]
                };
            }
            macro_rules! mm {
                ($n:expr, $f:expr) => {
                    &mut $f.data[..]
                };
            }
            out.extend(layer_tensors!(layer, vv, mm));
        }
        out.push(&mut self.final_ln_gain);
        out.push(&mut self.final_ln_bias);
        out.push(&mut self.head.data);
        out.push(&mut self.head_bias);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        let src = other.tensors();
        for (dst, s) in self.tensors_mut().into_iter().zip(src) {
            for (d, &x) in dst.iter_mut().zip(s.data) {
                *d += alpha * x;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ViTParams<U> {
        ViTParams {
            patch_embed: self.patch_embed.cast(),
            pos_embed: self.pos_embed.cast(),
            class_token: cast_slice(&self.class_token),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: cast_slice(&l.ln1_gain),
                    ln1_bias: cast_slice(&l.ln1_bias),
                    wq: l.wq.cast(),
                    bq: cast_slice(&l.bq),
                    wk: l.wk.cast(),
                    bk: cast_slice(&l.bk),
                    wv: l.wv.cast(),
                    bv: cast_slice(&l.bv),
                    wo: l.wo.cast(),
                    bo: cast_slice(&l.bo),
                    ln2_gain: cast_slice(&l.ln2_gain),
                    ln2_bias: cast_slice(&l.ln2_bias),
                    w1: l.w1.cast(),
                    b1: cast_slice(&l.b1),
                    w2: l.w2.cast(),
                    b2: cast_slice(&l.b2),
                })
                .collect(),
            final_ln_gain: cast_slice(&self.final_ln_gain),
            final_ln_bias: cast_slice(&self.final_ln_bias),
            head: self.head.cast(),
            head_bias: cast_slice(&self.head_bias),
        }
    }

    /// Checks every tensor shape against `cfg`.
    pub fn check(&self, cfg: &ViTConfig) -> Result<()> {
        let want = ViTParams::<T>::zeros(cfg);
        let (have, want) = (self.tensors(), want.tensors());
        if have.len() != want.len() {
            return Err(Error::Shape(format!(
                "{} tensors, config implies {}",
                have.len(),
                want.len()
            )));
        }
        for (h, w) in have.iter().zip(&want) {
            if h.shape != w.shape || h.data.len() != w.data.len() {
                return Err(Error::Shape(format!(
                    "tensor {} has shape {:?}, config implies {:?}",
                    w.name, h.shape, w.shape
                )));
            }
        }
        Ok(())
    }
}

/// Seeded initialization: N(0, 0.02) for weight matrices and both
/// embeddings, zeros for biases and the class token, ones for layer-norm
/// gains.
pub fn init_params(cfg: &ViTConfig, seed: u64) -> Result<ViTParams<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");
    let mut gauss = |m: &mut Matrix<f32>| {
        for v in &mut m.data {
            *v = normal.sample(&mut rng) as f32;
        }
    };
    let mut p = ViTParams::<f32>::zeros(cfg);
    gauss(&mut p.patch_embed);
    gauss(&mut p.pos_embed);
    for layer in &mut p.layers {
        layer.ln1_gain.fill(1.0);
        layer.ln2_gain.fill(1.0);
        gauss(&mut layer.wq);
        gauss(&mut layer.wk);
        gauss(&mut layer.wv);
        gauss(&mut layer.wo);
        gauss(&mut layer.w1);
        gauss(&mut layer.w2);
    }
    p.final_ln_gain.fill(1.0);
    gauss(&mut p.head);
    Ok(p)
}
