//! Keyed permutations.
//!
//! A secret 64-bit key is expanded with SplitMix64 and fed to a descending
//! Fisher-Yates shuffle. The resulting index map `map` plays the role of the
//! permutation vector `l_e` (0-based), and its dense form has a single 1 per
//! row at column `map[i]`. Hot paths only ever touch the index vector.

use crate::error::{Error, Result};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 generator state. Advanced by value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyedRngState {
    pub state: u64,
}

impl KeyedRngState {
    pub fn new(key: u64) -> Self {
        Self { state: key }
    }

    /// One SplitMix64 step: returns the output word and the successor state.
    #[must_use]
    pub fn next(self) -> (u64, Self) {
        let state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        (z ^ (z >> 31), Self { state })
    }
}

/// Free-function form of [`KeyedRngState::next`].
pub fn rng_next(state: KeyedRngState) -> (u64, KeyedRngState) {
    state.next()
}

/// Convenience iterator over a key's word stream.
#[derive(Debug, Clone)]
pub struct KeyStream(KeyedRngState);

impl KeyStream {
    pub fn new(key: u64) -> Self {
        Self(KeyedRngState::new(key))
    }
}

impl Iterator for KeyStream {
    type Item = u64;

    fn next(&mut self) -> Option<u64> {
        let (word, next) = self.0.next();
        self.0 = next;
        Some(word)
    }
}

/// Bijective index map over `n` slots.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).collect(),
        }
    }

    /// Builds a permutation from an explicit 0-based index map, rejecting
    /// anything that is not a bijection.
    pub fn from_map(map: Vec<usize>) -> Result<Self> {
        let n = map.len();
        if n == 0 {
            return Err(Error::InvalidSize("permutation over zero slots".into()));
        }
        let mut seen = vec![false; n];
        for &v in &map {
            if v >= n || seen[v] {
                return Err(Error::InvalidSize(format!(
                    "index map is not a bijection on [0, {n})"
                )));
            }
            seen[v] = true;
        }
        Ok(Self { map })
    }

    /// `None` stands for the identity permutation (unkeyed stage).
    pub fn from_key(key: Option<u64>, n: usize) -> Result<Self> {
        match key {
            Some(k) => gen_permutation(k, n),
            None if n == 0 => Err(Error::InvalidSize("permutation over zero slots".into())),
            None => Ok(Self::identity(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &v)| i == v)
    }

    #[must_use]
    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (i, &v) in self.map.iter().enumerate() {
            inv[v] = i;
        }
        Self { map: inv }
    }

    /// `self.compose(q)` acts as "apply `q`, then `self`", so that
    /// `as_matrix(p.compose(q)) == as_matrix(p) * as_matrix(q)`.
    pub fn compose(&self, q: &Permutation) -> Result<Self> {
        if self.len() != q.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                actual: q.len(),
            });
        }
        Ok(Self {
            map: self.map.iter().map(|&i| q.map[i]).collect(),
        })
    }

    /// Dense 0/1 matrix, row-major, with `m[i][map[i]] == 1`.
    pub fn as_matrix(&self) -> Vec<Vec<u8>> {
        let n = self.len();
        self.map
            .iter()
            .map(|&col| {
                let mut row = vec![0u8; n];
                row[col] = 1;
                row
            })
            .collect()
    }

    /// Bordered extension fixing slot 0 for the class token; slots `1..=n`
    /// follow `self` shifted by one.
    #[must_use]
    pub fn extend_for_class_token(&self) -> Self {
        let mut map = Vec::with_capacity(self.len() + 1);
        map.push(0);
        map.extend(self.map.iter().map(|&v| v + 1));
        Self { map }
    }

    /// Left-multiplication by the dense matrix: output row `i` is input row
    /// `map[i]`.
    pub fn apply_rows<T: Clone>(&self, rows: &[T]) -> Result<Vec<T>> {
        if rows.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                actual: rows.len(),
            });
        }
        Ok(self.map.iter().map(|&i| rows[i].clone()).collect())
    }

    /// Same as [`apply_rows`](Self::apply_rows) on a flat row-major buffer
    /// with `width` entries per row.
    pub fn apply_flat_rows<T: Copy>(&self, data: &[T], width: usize) -> Result<Vec<T>> {
        if data.len() != self.len() * width {
            return Err(Error::Dimension {
                expected: self.len() * width,
                actual: data.len(),
            });
        }
        let mut out = Vec::with_capacity(data.len());
        for &src in &self.map {
            out.extend_from_slice(&data[src * width..(src + 1) * width]);
        }
        Ok(out)
    }
}

/// Fisher-Yates over `[0, n)` driven by SplitMix64 seeded with `key`.
///
/// For `i` from `n-1` down to 1: `j = word mod (i+1)`, swap slots `i` and `j`.
/// The modulo bias is kept as part of the frozen key schedule.
pub fn gen_permutation(key: u64, n: usize) -> Result<Permutation> {
    if n == 0 {
        return Err(Error::InvalidSize("permutation over zero slots".into()));
    }
    let mut map: Vec<usize> = (0..n).collect();
    let mut rng = KeyStream::new(key);
    for i in (1..n).rev() {
        let word = rng.next().expect("infinite stream");
        let j = (word % (i as u64 + 1)) as usize;
        map.swap(i, j);
    }
    Ok(Permutation { map })
}
