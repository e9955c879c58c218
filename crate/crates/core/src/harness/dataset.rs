//! Offline synthetic classification tasks.
//!
//! Every task draws from one shared bank of block motifs: sign patterns over
//! a `p x p x c` block with exactly as many `+1` as `-1` entries. A class
//! template picks one motif per block position; an image is
//! `0.5 + amplitude * template + noise`, clamped to `[0, 1]`. Any
//! permutation-invariant statistic of a block carries no class information
//! (up to noise), so the label is only recoverable from pixel arrangement.
//! Different task seeds reuse the same motif bank with different
//! class-to-motif assignments, which gives pretraining something
//! transferable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blockcodec::{Cipher, EncryptionKeys, ImageTensor};
use crate::error::{Error, Result};
use crate::keyperm::{gen_permutation, KeyStream};
use crate::vit::ViTConfig;

use super::derive_seed;

const MOTIF_BANK_SEED: u64 = 0x6D6F_7469_6662_616E;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<(ImageTensor, usize)>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(items: Vec<(ImageTensor, usize)>, classes: usize, split: Split) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidSize("empty dataset".into()));
        }
        if let Some(&(_, label)) = items.iter().find(|(_, y)| *y >= classes) {
            return Err(Error::Label { label, classes });
        }
        Ok(Self {
            items,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for (_, y) in &self.items {
            h[*y] += 1;
        }
        h
    }
}

/// Generation knobs for [`SyntheticTask`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticParams {
    pub motifs: usize,
    pub amplitude: f32,
    pub noise: f32,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            motifs: 16,
            amplitude: 0.25,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    shape: (usize, usize, usize),
    classes: usize,
    params: SyntheticParams,
    /// Signed class templates in image layout.
    templates: Vec<Vec<f32>>,
}

fn motif_bank(block_len: usize, motifs: usize) -> Result<Vec<Vec<f32>>> {
    (0..motifs as u64)
        .map(|m| {
            let perm = gen_permutation(derive_seed(MOTIF_BANK_SEED, m), block_len)?;
            Ok(perm
                .map()
                .iter()
                .map(|&i| match (2 * i + 1).cmp(&block_len) {
                    std::cmp::Ordering::Less => 1.0,
                    std::cmp::Ordering::Equal => 0.0,
                    std::cmp::Ordering::Greater => -1.0,
                })
                .collect())
        })
        .collect()
}

impl SyntheticTask {
    pub fn new(
        task_seed: u64,
        classes: usize,
        cfg: &ViTConfig,
        params: SyntheticParams,
    ) -> Result<Self> {
        cfg.validate()?;
        if classes == 0 || params.motifs == 0 {
            return Err(Error::InvalidSize(
                "need at least one class and one motif".into(),
            ));
        }
        let (h, w, c, p) = (cfg.image_h, cfg.image_w, cfg.channels, cfg.patch_size);
        let bank = motif_bank(cfg.patch_len(), params.motifs)?;
        let grid_w = w / p;
        let mut picks = KeyStream::new(derive_seed(task_seed, 0x7461_736B));
        let templates = (0..classes)
            .map(|_| {
                let mut t = vec![0.0; h * w * c];
                for block in 0..cfg.n_patches() {
                    let motif = &bank[(picks.next().unwrap() % params.motifs as u64) as usize];
                    let (by, bx) = (block / grid_w, block % grid_w);
                    for r in 0..p {
                        let start = ((by * p + r) * w + bx * p) * c;
                        t[start..start + p * c].copy_from_slice(&motif[r * p * c..(r + 1) * p * c]);
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            shape: (h, w, c),
            classes,
            params,
            templates,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `n_per_class` noisy images per class, labels interleaved
    /// `0, 1, ..., classes-1, 0, 1, ...`.
    pub fn sample(&self, seed: u64, n_per_class: usize, split: Split) -> Result<Dataset> {
        if n_per_class == 0 {
            return Err(Error::InvalidSize("n_per_class must be at least 1".into()));
        }
        let tag = match split {
            Split::Train => 1,
            Split::Test => 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, tag));
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let (h, w, c) = self.shape;
        let amp = self.params.amplitude;
        let noise = self.params.noise;
        let mut items = Vec::with_capacity(n_per_class * self.classes);
        for _ in 0..n_per_class {
            for (label, t) in self.templates.iter().enumerate() {
                let data = t
                    .iter()
                    .map(|&s| (0.5 + amp * s + noise * normal.sample(&mut rng)).clamp(0.0, 1.0))
                    .collect();
                items.push((ImageTensor::new(h, w, c, data)?, label));
            }
        }
        Dataset::new(items, self.classes, split)
    }
}

/// Train split of the task identified by `seed`, with default generation
/// parameters.
pub fn gen_synthetic_dataset(
    seed: u64,
    n_per_class: usize,
    classes: usize,
    cfg: &ViTConfig,
) -> Result<Dataset> {
    SyntheticTask::new(seed, classes, cfg, SyntheticParams::default())?.sample(
        seed,
        n_per_class,
        Split::Train,
    )
}

pub fn encrypt_dataset(d: &Dataset, keys: &EncryptionKeys) -> Result<Dataset> {
    transform(d, keys, Cipher::encrypt)
}

pub fn decrypt_dataset(d: &Dataset, keys: &EncryptionKeys) -> Result<Dataset> {
    transform(d, keys, Cipher::decrypt)
}

fn transform(
    d: &Dataset,
    keys: &EncryptionKeys,
    op: fn(&Cipher, &ImageTensor) -> Result<ImageTensor>,
) -> Result<Dataset> {
    let (h, w, c) = d.items[0].0.shape();
    let cipher = Cipher::new(*keys, h, w, c)?;
    let items = d
        .items
        .iter()
        .map(|(x, y)| Ok((op(&cipher, x)?, *y)))
        .collect::<Result<_>>()?;
    Ok(Dataset {
        items,
        classes: d.classes,
        split: d.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ViTConfig {
        ViTConfig::default()
    }

    #[test]
    fn deterministic() {
        let a = gen_synthetic_dataset(3, 2, 10, &cfg()).unwrap();
        let b = gen_synthetic_dataset(3, 2, 10, &cfg()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_synthetic_dataset(4, 2, 10, &cfg()).unwrap());
    }

    #[test]
    fn balanced_labels() {
        let d = gen_synthetic_dataset(3, 7, 10, &cfg()).unwrap();
        assert_eq!(d.len(), 70);
        assert_eq!(d.label_histogram(), vec![7; 10]);
        assert!(gen_synthetic_dataset(3, 0, 10, &cfg()).is_err());
    }

    #[test]
    fn motifs_are_balanced() {
        for m in motif_bank(192, 16).unwrap() {
            assert_eq!(m.iter().sum::<f32>(), 0.0);
        }
        let odd = motif_bank(3, 2).unwrap();
        assert!(odd.iter().all(|m| m.iter().sum::<f32>() == 0.0));
    }

    #[test]
    fn splits_share_templates() {
        let task = SyntheticTask::new(
            9,
            4,
            &cfg(),
            SyntheticParams {
                noise: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let tr = task.sample(1, 1, Split::Train).unwrap();
        let te = task.sample(2, 1, Split::Test).unwrap();
        assert_eq!(tr.items, te.items);
        assert_eq!(te.split, Split::Test);
    }

    #[test]
    fn encryption_preserves_labels_and_round_trips() {
        let d = gen_synthetic_dataset(5, 2, 10, &cfg()).unwrap();
        let keys = EncryptionKeys::new(1, 2, 8);
        let e = encrypt_dataset(&d, &keys).unwrap();
        assert_eq!(e.len(), d.len());
        assert_eq!(e.label_histogram(), d.label_histogram());
        assert_ne!(e, d);
        assert_eq!(decrypt_dataset(&e, &keys).unwrap(), d);
        assert_eq!(
            encrypt_dataset(&d, &EncryptionKeys::identity(8)).unwrap(),
            d
        );
    }

    #[test]
    fn dataset_validation() {
        let x = ImageTensor::zeros(2, 2, 1);
        assert!(Dataset::new(vec![], 2, Split::Train).is_err());
        assert!(matches!(
            Dataset::new(vec![(x, 2)], 2, Split::Train),
            Err(Error::Label {
                label: 2,
                classes: 2
            })
        ));
    }
}
