//! Two-dimensional rotary position tables.
//!
//! Each head's channels are split in half: the first half rotates by angles
//! derived from the token's row `i`, the second from its column `j`. Within a
//! half, pair `k` uses frequency `base^(-2k / (head_dim / 2))`.

use crate::numerics::{Real, Tensor};

/// Per-token cos/sin tables of shape `[tokens, head_dim / 2]`.
#[derive(Clone, Debug)]
pub struct RopeRotation<T> {
    pub cos: Tensor<T>,
    pub sin: Tensor<T>,
}

pub fn rope_frequencies(head_dim: usize, base: f64) -> Vec<f64> {
    let half = head_dim / 2;
    (0..half / 2)
        .map(|k| base.powf(-2.0 * k as f64 / half as f64))
        .collect()
}

/// Rotation angles for every channel pair of one token.
pub fn rope_angles(pos: (usize, usize), head_dim: usize, base: f64) -> Vec<f64> {
    let freqs = rope_frequencies(head_dim, base);
    let row = freqs.iter().map(|f| pos.0 as f64 * f);
    let col = freqs.iter().map(|f| pos.1 as f64 * f);
    row.chain(col).collect()
}

impl<T: Real> RopeRotation<T> {
    pub fn new(positions: &[(usize, usize)], head_dim: usize, base: f64) -> Self {
        assert!(
            head_dim.is_multiple_of(4),
            "head_dim must be divisible by 4"
        );
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for a in rope_angles(p, head_dim, base) {
                cos.push(T::from_f64(a.cos()));
                sin.push(T::from_f64(a.sin()));
            }
        }
        let shape = vec![positions.len(), half];
        Self {
            cos: Tensor::new(shape.clone(), cos).expect("rope table shape"),
            sin: Tensor::new(shape, sin).expect("rope table shape"),
        }
    }
}
