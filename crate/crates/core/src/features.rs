//! Signed feature hashing for raw text and token windows.

use serde::{Deserialize, Serialize};

/// Sparse vector with strictly increasing indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    pub dim: usize,
    pub entries: Vec<(u32, f64)>,
}

impl SparseVector {
    /// Builds a vector from unsorted, possibly repeated entries; repeats are
    /// summed and exact zeros dropped.
    pub fn from_unsorted(dim: usize, mut raw: Vec<(u32, f64)>) -> Self {
        raw.sort_unstable_by_key(|e| e.0);
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(raw.len());
        for (i, v) in raw {
            debug_assert!((i as usize) < dim);
            match entries.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => entries.push((i, v)),
            }
        }
        entries.retain(|e| e.1 != 0.0);
        SparseVector { dim, entries }
    }

    pub fn from_dense(values: &[f64]) -> Self {
        SparseVector {
            dim: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, v)| **v != 0.0)
                .map(|(i, v)| (i as u32, *v))
                .collect(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|e| e.1 * e.1).sum()
    }

    pub fn normalize(&mut self) {
        let n = self.norm_sq().sqrt();
        if n > 0.0 {
            for e in &mut self.entries {
                e.1 /= n;
            }
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.entries {
            out[i as usize] = v;
        }
        out
    }
}

/// FNV-1a with a seed folded into the offset basis and a final avalanche.
#[derive(Clone, Copy)]
struct FeatureHasher(u64);

impl FeatureHasher {
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    fn new(seed: u64) -> Self {
        FeatureHasher(0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
    }

    fn finish(self) -> u64 {
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
}

/// Maps strings to signed buckets of a fixed-size feature space.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Featurizer {
    pub dim: usize,
    pub hash_seed: u64,
}

const WINDOW: isize = 2;

impl Featurizer {
    pub fn new(dim: usize, hash_seed: u64) -> Self {
        assert!(dim > 0 && dim <= u32::MAX as usize, "feature dim out of range");
        Featurizer { dim, hash_seed }
    }

    fn bucket(&self, parts: &[&[u8]]) -> (u32, f64) {
        let mut h = FeatureHasher::new(self.hash_seed);
        for p in parts {
            h.write(p);
            h.write(&[0x1f]);
        }
        let z = h.finish();
        let sign = if z >> 63 == 0 { 1.0 } else { -1.0 };
        ((z % self.dim as u64) as u32, sign)
    }

    /// Word unigram and bigram counts of lower-cased whitespace tokens,
    /// L2-normalized.
    pub fn text(&self, text: &str) -> SparseVector {
        let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
        let mut raw = Vec::with_capacity(words.len() * 2);
        for (i, w) in words.iter().enumerate() {
            raw.push(self.bucket(&[b"u", w.as_bytes()]));
            if let Some(next) = words.get(i + 1) {
                raw.push(self.bucket(&[b"b", w.as_bytes(), next.as_bytes()]));
            }
        }
        let mut v = SparseVector::from_unsorted(self.dim, raw);
        v.normalize();
        v
    }

    /// Features of token `pos` from a +-2 window of lower-cased tokens, plus
    /// shape and affix features of the token itself, L2-normalized.
    pub fn token(&self, tokens: &[String], pos: usize) -> SparseVector {
        let mut raw = Vec::with_capacity(10);
        for off in -WINDOW..=WINDOW {
            let j = pos as isize + off;
            let word = if j < 0 {
                "<s>".to_owned()
            } else if j as usize >= tokens.len() {
                "</s>".to_owned()
            } else {
                tokens[j as usize].to_lowercase()
            };
            raw.push(self.bucket(&[b"w", &off.to_le_bytes(), word.as_bytes()]));
        }
        let tok = &tokens[pos];
        raw.push(self.bucket(&[b"shape", word_shape(tok).as_bytes()]));
        let lower = tok.to_lowercase();
        let chars: Vec<char> = lower.chars().collect();
        let take = chars.len().min(3);
        let prefix: String = chars[..take].iter().collect();
        let suffix: String = chars[chars.len() - take..].iter().collect();
        raw.push(self.bucket(&[b"p3", prefix.as_bytes()]));
        raw.push(self.bucket(&[b"s3", suffix.as_bytes()]));
        let mut v = SparseVector::from_unsorted(self.dim, raw);
        v.normalize();
        v
    }
}

/// Collapsed character classes, e.g. "McCain" -> "XxXx", "1999" -> "d".
fn word_shape(token: &str) -> String {
    let mut out = String::new();
    for c in token.chars() {
        let class = if c.is_uppercase() {
            'X'
        } else if c.is_lowercase() {
            'x'
        } else if c.is_ascii_digit() {
            'd'
        } else {
            c
        };
        if !out.ends_with(class) {
            out.push(class);
        }
    }
    out
}
