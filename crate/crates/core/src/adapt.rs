//! Embedding adaptation for encrypted inputs.
//!
//! Block scrambling permutes the patch tokens and pixel shuffling permutes
//! the entries of every patch vector. Both are undone inside the model by
//! permuting the embedding weights with the same keys:
//!
//! * `E_pos_hat = E_bs' * E_pos`, where `E_bs'` is the block permutation
//!   bordered so that row 0 (class token) stays put;
//! * `E_hat = E_ps * E`.
//!
//! Because `E_ps` is orthogonal, `(E_ps b^T)^T E_ps E = b E`, so the adapted
//! embedding of an encrypted image is exactly the row-permuted embedding of
//! the plain image. The encoder is equivariant to token order and the
//! classifier reads only the class token, so the logits agree.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;

use crate::blockcodec::{Cipher, EncryptionKeys, ImageTensor};
use crate::error::{Error, Result};
use crate::keyperm::Permutation;
use crate::vit::{forward, Matrix, Real, ViTConfig, ViTParams};

/// Adapted parameters together with the keys that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub params: ViTParams<f32>,
    pub keys: EncryptionKeys,
}

fn permute_rows<T: Real>(m: &Matrix<T>, perm: &Permutation) -> Result<Matrix<T>> {
    Ok(Matrix::from_vec(
        m.rows,
        m.cols,
        perm.apply_flat_rows(&m.data, m.cols)?,
    ))
}

/// `E_bs' * E_pos` for an explicit block permutation over `N` slots.
pub fn adapt_pos_embedding_with<T: Real>(
    pos: &Matrix<T>,
    block_perm: &Permutation,
) -> Result<Matrix<T>> {
    permute_rows(pos, &block_perm.extend_for_class_token())
}

pub fn adapt_pos_embedding<T: Real>(pos: &Matrix<T>, k1: Option<u64>) -> Result<Matrix<T>> {
    if pos.rows < 2 {
        return Err(Error::Shape(format!(
            "position embedding needs at least 2 rows, has {}",
            pos.rows
        )));
    }
    adapt_pos_embedding_with(pos, &Permutation::from_key(k1, pos.rows - 1)?)
}

/// `E_ps * E` for an explicit pixel permutation over `L` slots.
pub fn adapt_patch_embedding_with<T: Real>(
    e: &Matrix<T>,
    pixel_perm: &Permutation,
) -> Result<Matrix<T>> {
    permute_rows(e, pixel_perm)
}

pub fn adapt_patch_embedding<T: Real>(e: &Matrix<T>, k2: Option<u64>) -> Result<Matrix<T>> {
    adapt_patch_embedding_with(e, &Permutation::from_key(k2, e.rows)?)
}

fn check_block_size(keys: &EncryptionKeys, cfg: &ViTConfig) -> Result<()> {
    if keys.block_size != cfg.patch_size {
        return Err(Error::Config(format!(
            "block size {} does not match patch size {}",
            keys.block_size, cfg.patch_size
        )));
    }
    Ok(())
}

/// Copies `params` with both embeddings permuted; every other tensor is
/// untouched. Generic so that training checks can run in any precision.
pub fn adapt_params<T: Real>(
    params: &ViTParams<T>,
    keys: &EncryptionKeys,
    cfg: &ViTConfig,
) -> Result<ViTParams<T>> {
    check_block_size(keys, cfg)?;
    params.check(cfg)?;
    let block_perm = keys.block_permutation(cfg.n_patches())?;
    let pixel_perm = keys.pixel_permutation(cfg.patch_len())?;
    Ok(ViTParams {
        pos_embed: adapt_pos_embedding_with(&params.pos_embed, &block_perm)?,
        patch_embed: adapt_patch_embedding_with(&params.patch_embed, &pixel_perm)?,
        ..params.clone()
    })
}

pub fn adapt_model(
    params: &ViTParams<f32>,
    keys: &EncryptionKeys,
    cfg: &ViTConfig,
) -> Result<AdaptedModel> {
    Ok(AdaptedModel {
        params: adapt_params(params, keys, cfg)?,
        keys: *keys,
    })
}

/// Inverse of [`adapt_params`]: maps adapted weights back to the plain domain.
pub fn unadapt_params<T: Real>(
    params: &ViTParams<T>,
    keys: &EncryptionKeys,
    cfg: &ViTConfig,
) -> Result<ViTParams<T>> {
    check_block_size(keys, cfg)?;
    params.check(cfg)?;
    let block_perm = keys.block_permutation(cfg.n_patches())?.inverse();
    let pixel_perm = keys.pixel_permutation(cfg.patch_len())?.inverse();
    Ok(ViTParams {
        pos_embed: adapt_pos_embedding_with(&params.pos_embed, &block_perm)?,
        patch_embed: adapt_patch_embedding_with(&params.patch_embed, &pixel_perm)?,
        ..params.clone()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDiff {
    pub id: String,
    pub max_abs_diff: f32,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub images: Vec<ImageDiff>,
    pub tolerance: f32,
    pub max_abs_diff: f32,
}

impl EquivalenceReport {
    pub fn all_pass(&self) -> bool {
        self.images.iter().all(|d| d.pass)
    }

    pub fn failures(&self) -> usize {
        self.images.iter().filter(|d| !d.pass).count()
    }

    /// `image_id,max_abs_diff,pass` with one row per image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,max_abs_diff,pass\n");
        for d in &self.images {
            writeln!(out, "{},{:e},{}", d.id, d.max_abs_diff, d.pass).unwrap();
        }
        out
    }
}

/// Compares `forward(x, source)` against `forward(encrypt(x, keys), adapted)`
/// for every image.
pub fn verify_equivalence(
    source: &ViTParams<f32>,
    adapted: &AdaptedModel,
    images: &[(String, ImageTensor)],
    keys: &EncryptionKeys,
    cfg: &ViTConfig,
    tol: f32,
) -> Result<EquivalenceReport> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Error::Config(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    source.check(cfg)?;
    adapted.params.check(cfg)?;
    let cipher = Cipher::new(*keys, cfg.image_h, cfg.image_w, cfg.channels)?;
    let diffs: Vec<ImageDiff> = images
        .par_iter()
        .map(|(id, x)| {
            let plain = forward(x, source, cfg)?;
            let enc = forward(&cipher.encrypt(x)?, &adapted.params, cfg)?;
            let max_abs_diff = plain
                .iter()
                .zip(&enc)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            Ok(ImageDiff {
                id: id.clone(),
                max_abs_diff,
                pass: max_abs_diff <= tol,
            })
        })
        .collect::<Result<_>>()?;
    let max_abs_diff = diffs.iter().map(|d| d.max_abs_diff).fold(0.0, f32::max);
    Ok(EquivalenceReport {
        images: diffs,
        tolerance: tol,
        max_abs_diff,
    })
}

/// Sidecar record stored next to adapted weights.
///
/// ```text
/// k1=<decimal|none>
/// k2=<decimal|none>
/// p=<decimal>
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance(pub EncryptionKeys);

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let key = |k: Option<u64>| k.map_or_else(|| "none".to_owned(), |v| v.to_string());
        writeln!(f, "k1={}", key(self.0.k1))?;
        writeln!(f, "k2={}", key(self.0.k2))?;
        writeln!(f, "p={}", self.0.block_size)
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut k1 = None;
        let mut k2 = None;
        let mut p = None;
        let mut offset = 0;
        for line in s.lines() {
            let bad = |msg: &str| Error::Format {
                offset,
                msg: msg.to_owned(),
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad("expected key=value"))?;
            let key = |v: &str| -> Result<Option<u64>> {
                match v {
                    "none" => Ok(None),
                    _ => v.parse().map(Some).map_err(|_| bad("bad key value")),
                }
            };
            match k {
                "k1" => k1 = Some(key(v)?),
                "k2" => k2 = Some(key(v)?),
                "p" => p = Some(v.parse().map_err(|_| bad("bad block size"))?),
                _ => return Err(bad("unknown field")),
            }
            offset += line.len() + 1;
        }
        match (k1, k2, p) {
            (Some(k1), Some(k2), Some(block_size)) => {
                Ok(Self(EncryptionKeys { k1, k2, block_size }))
            }
            _ => Err(Error::Format {
                offset: s.len(),
                msg: "missing k1, k2 or p".into(),
            }),
        }
    }
}
