//! Serpentine (boustrophedon) placement of sequence frames in a grid image,
//! so that temporally adjacent frames are also spatially adjacent.

use serde::{Deserialize, Serialize};

use crate::dit::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerpentineOrder {
    pub rows: usize,
    pub cols: usize,
    /// `cells[k]` is the (row, col) of frame `k`.
    pub cells: Vec<(usize, usize)>,
}

/// Row 0 runs left to right, row 1 right to left, and so on.
pub fn serpentine_order(rows: usize, cols: usize) -> Result<SerpentineOrder> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "serpentine grid must be non-empty, got {rows}x{cols}"
        )));
    }
    let cells = (0..rows)
        .flat_map(|r| {
            (0..cols).map(move |c| {
                if r % 2 == 0 {
                    (r, c)
                } else {
                    (r, cols - 1 - c)
                }
            })
        })
        .collect();
    Ok(SerpentineOrder { rows, cols, cells })
}

impl SerpentineOrder {
    pub fn for_config(config: &ModelConfig) -> Result<Self> {
        serpentine_order(config.grid_rows, config.grid_cols)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn last(&self) -> (usize, usize) {
        *self.cells.last().expect("non-empty order")
    }

    /// Frame index placed at `cell`.
    pub fn frame_at(&self, cell: (usize, usize)) -> Option<usize> {
        self.cells.iter().position(|&c| c == cell)
    }
}

/// Places `frames` (each `[f, f]`) into a `[rows*f, cols*f]` grid image.
pub fn compose<T: Real>(frames: &[Tensor<T>], order: &SerpentineOrder) -> Result<Tensor<T>> {
    if frames.len() != order.len() {
        return Err(Error::InvalidArgument(format!(
            "{} frames for a {}x{} grid",
            frames.len(),
            order.rows,
            order.cols
        )));
    }
    let f = frames[0].shape().first().copied().unwrap_or(0);
    for fr in frames {
        if fr.shape() != [f, f] {
            return Err(Error::shape("compose", &[f, f], fr.shape()));
        }
    }
    let width = order.cols * f;
    let mut data = vec![T::zero(); order.rows * f * width];
    for (frame, &(r, c)) in frames.iter().zip(&order.cells) {
        for y in 0..f {
            let dst = (r * f + y) * width + c * f;
            data[dst..dst + f].copy_from_slice(&frame.data()[y * f..(y + 1) * f]);
        }
    }
    Tensor::new(vec![order.rows * f, width], data)
}

/// Exact inverse of [`compose`].
pub fn decompose<T: Real>(grid: &Tensor<T>, order: &SerpentineOrder) -> Result<Vec<Tensor<T>>> {
    let shape = grid.shape();
    if shape.len() != 2
        || !shape[0].is_multiple_of(order.rows)
        || !shape[1].is_multiple_of(order.cols)
    {
        return Err(Error::shape("decompose", shape, &[order.rows, order.cols]));
    }
    let f = shape[0] / order.rows;
    if shape[1] / order.cols != f {
        return Err(Error::shape(
            "decompose",
            shape,
            &[order.rows * f, order.cols * f],
        ));
    }
    let width = shape[1];
    order
        .cells
        .iter()
        .map(|&(r, c)| {
            let mut data = Vec::with_capacity(f * f);
            for y in 0..f {
                let src = (r * f + y) * width + c * f;
                data.extend_from_slice(&grid.data()[src..src + f]);
            }
            Tensor::new(vec![f, f], data)
        })
        .collect()
}

/// Token coordinates `(i, j)` covered by `cell` in the full grid image.
pub fn cell_token_positions(cell: (usize, usize), config: &ModelConfig) -> Vec<(usize, usize)> {
    let n = config.cell_tokens();
    (0..n)
        .flat_map(|di| (0..n).map(move |dj| (cell.0 * n + di, cell.1 * n + dj)))
        .collect()
}

/// Pixel intensity in `[0, 1]` to model space `[-1, 1]`.
pub fn to_model_space<T: Real>(pixels: &Tensor<T>) -> Tensor<T> {
    let two = T::from_f64(2.0);
    pixels.map(|v| two * v - T::one())
}

/// Model space back to 8-bit pixel levels `k / 255`, clamped to `[0, 1]`.
pub fn to_pixel_space<T: Real>(model: &Tensor<T>) -> Tensor<T> {
    model.map(|v| quantize((v.as_f64() + 1.0) / 2.0))
}

/// Nearest of the 256 levels `k / 255`.
pub fn quantize<T: Real>(v: f64) -> T {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    T::from_f64((v * 255.0).round() / 255.0)
}

/// Stacks single-channel `[H, W]` grid images into `[B, 1, H, W]`.
pub fn stack_grids<T: Real>(grids: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty grid batch".into()))?;
    let views: Vec<&Tensor<T>> = grids.iter().collect();
    let cat = Tensor::concat(&views, 0)?;
    let (h, w) = (first.shape()[0], first.shape()[1]);
    cat.reshape(vec![grids.len(), 1, h, w])
}

/// Inverse of [`stack_grids`].
pub fn unstack_grids<T: Real>(batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let s = batch.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("unstack_grids", s, &[s[0], 1]));
    }
    (0..s[0])
        .map(|b| batch.slice(0, b, 1)?.reshape(vec![s[2], s[3]]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_orders() {
        assert_eq!(
            serpentine_order(2, 2).unwrap().cells,
            vec![(0, 0), (0, 1), (1, 1), (1, 0)]
        );
        assert_eq!(
            serpentine_order(3, 3).unwrap().cells,
            vec![
                (0, 0),
                (0, 1),
                (0, 2),
                (1, 2),
                (1, 1),
                (1, 0),
                (2, 0),
                (2, 1),
                (2, 2)
            ]
        );
        assert_eq!(
            serpentine_order(1, 4).unwrap().cells,
            vec![(0, 0), (0, 1), (0, 2), (0, 3)]
        );
        assert!(serpentine_order(0, 3).is_err());
    }

    fn labeled_frames(k: usize, f: usize) -> Vec<Tensor<f32>> {
        (0..k)
            .map(|i| {
                let data = (0..f * f).map(|p| (i * 1000 + p) as f32).collect();
                Tensor::new(vec![f, f], data).unwrap()
            })
            .collect()
    }

    #[test]
    fn single_cell_is_identity() {
        let order = serpentine_order(1, 1).unwrap();
        let frames = labeled_frames(1, 3);
        assert_eq!(compose(&frames, &order).unwrap(), frames[0]);
    }

    #[test]
    fn frame_two_lands_at_lower_right_of_2x2() {
        let order = serpentine_order(2, 2).unwrap();
        let grid = compose(&labeled_frames(4, 4), &order).unwrap();
        // top-left pixel of cell (1, 1) is at row 4, col 4
        assert_eq!(grid.at(&[4, 4]), 2000.0);
        assert_eq!(grid.at(&[7, 7]), 2015.0);
        assert_eq!(grid.at(&[4, 0]), 3000.0);
    }

    #[test]
    fn count_and_size_errors() {
        let order = serpentine_order(2, 2).unwrap();
        assert!(compose(&labeled_frames(3, 4), &order).is_err());
        let grid = Tensor::<f32>::zeros(vec![8, 9]);
        assert!(decompose(&grid, &order).is_err());
    }

    #[test]
    fn cell_tokens_of_origin() {
        let config = ModelConfig::default();
        let pos = cell_token_positions((0, 0), &config);
        assert_eq!(pos.len(), 16);
        assert!(pos.iter().all(|&(i, j)| i < 4 && j < 4));
    }

    #[test]
    fn model_space_round_trip_on_levels() {
        let levels: Vec<f32> = (0..256).map(|k| k as f32 / 255.0).collect();
        let px = Tensor::new(vec![256], levels).unwrap();
        assert_eq!(to_pixel_space(&to_model_space(&px)), px);
        let ext = Tensor::new(vec![3], vec![-3.0f32, 5.0, f32::NAN]).unwrap();
        assert_eq!(to_pixel_space(&ext).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn stack_unstack() {
        let grids = labeled_frames(3, 4);
        let b = stack_grids(&grids).unwrap();
        assert_eq!(b.shape(), &[3, 1, 4, 4]);
        assert_eq!(unstack_grids(&b).unwrap(), grids);
    }
}
