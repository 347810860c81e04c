use rand::Rng;
use rand_distr::StandardNormal;

use super::Real;
use crate::error::{Error, Result};

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Splits `shape` around `axis` into (outer, axis extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    /// Constructor for internal callers that have already established the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = numel(&shape);
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::from_f64(x)).collect())
    }

    /// Gaussian samples with standard deviation `std`. Draws are made in `f64`
    /// so the same rng stream yields the same values for every element type.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape))
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let strides = row_major_strides(&self.shape);
        let off = index
            .iter()
            .zip(&self.shape)
            .zip(&strides)
            .map(|((&i, &d), &s)| {
                assert!(i < d, "index {i} out of bounds for extent {d}");
                i * s
            })
            .sum::<usize>();
        self.data[off]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::from_f64(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.numel() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Tensor::new(shape, self.data.clone())
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (a, b) = (&self.shape, &other.shape);
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.data,
            false,
            &other.data,
            false,
            &mut out,
            T::zero(),
        );
        Ok(Self::from_parts(vec![m, n], out))
    }

    pub fn transpose2(&self) -> Result<Self> {
        self.permute(&[1, 0])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        check_perm(perm, &self.shape)?;
        let (shape, data) = permute_data(&self.data, &self.shape, perm);
        Ok(Self::from_parts(shape, data))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} of shape {:?}",
                start + len,
                self.shape
            )));
        }
        let (outer, extent, inner) = split_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_parts(shape, data))
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        if axis >= first.rank() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} for rank {}",
                first.rank()
            )));
        }
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first.shape, &p.shape));
            }
        }
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let (outer, _, inner) = split_axis(&first.shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self::from_parts(shape, data))
    }
}

pub(crate) fn check_perm(perm: &[usize], shape: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(Error::shape("permute", shape, perm));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::shape("permute", shape, perm));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Output axis `i` is input axis `perm[i]`.
pub(crate) fn permute_data<T: Copy>(
    data: &[T],
    shape: &[usize],
    perm: &[usize],
) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    if rank == 0 {
        return (out_shape, data.to_vec());
    }
    let in_strides = row_major_strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let last = rank - 1;
    let (last_extent, last_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        for j in 0..last_extent {
            out.push(data[base + j * last_stride]);
        }
        // advance the odometer over all axes but the last
        let mut axis = last;
        loop {
            if axis == 0 {
                break;
            }
            axis -= 1;
            idx[axis] += 1;
            base += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= src_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    (out_shape, out)
}

/// Broadcasts `data` of shape `from` (same rank, extents equal or 1) to `to`.
pub(crate) fn expand_data<T: Copy>(data: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let strides = broadcast_strides(from);
    let mut out = Vec::with_capacity(numel(to));
    for_each_offset(to, &strides, |src| out.push(data[src]));
    out
}

/// Sums `grad` of shape `to` back down to the broadcast source shape `from`.
pub(crate) fn reduce_to<T: Real>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    let strides = broadcast_strides(from);
    let mut out = vec![T::zero(); numel(from)];
    let mut i = 0;
    for_each_offset(to, &strides, |src| {
        out[src] = out[src] + grad[i];
        i += 1;
    });
    out
}

fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    row_major_strides(shape)
        .into_iter()
        .zip(shape)
        .map(|(s, &d)| if d == 1 { 0 } else { s })
        .collect()
}

/// Visits every index of `shape` in row-major order, passing the offset
/// computed with `strides`.
fn for_each_offset(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize)) {
    let n = numel(shape);
    let rank = shape.len();
    if rank == 0 {
        f(0);
        return;
    }
    let last = rank - 1;
    let (extent, stride) = (shape[last], strides[last]);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut visited = 0;
    while visited < n {
        for j in 0..extent {
            f(off + j * stride);
        }
        visited += extent;
        let mut axis = last;
        while axis > 0 {
            axis -= 1;
            idx[axis] += 1;
            off += strides[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            off -= strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let eye = t(&[2, 2], &[1., 0., 0., 1.]);
        let m = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(eye.matmul(&m).unwrap(), m);
    }

    #[test]
    fn selector_row_matmul() {
        let sel = t(&[2, 2], &[1., 0., 0., 0.]);
        let m = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(sel.matmul(&m).unwrap().data(), &[5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::<f64>::randn(vec![3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![4, 2], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.at(&[i, k]) * b.at(&[k, j]);
                }
                assert!((c.at(&[i, j]) - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(vec![2, 3]);
        let b = Tensor::<f32>::zeros(vec![2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn permute_moves_axes() {
        let x = t(&[2, 3], &[0., 1., 2., 3., 4., 5.]);
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0., 3., 1., 4., 2., 5.]);
        let z = Tensor::<f64>::from_f64(vec![2, 2, 2], &[0., 1., 2., 3., 4., 5., 6., 7.]).unwrap();
        let p = z.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.at(&[1, 0, 1]), z.at(&[0, 1, 1]));
        assert_eq!(p.permute(&inverse_perm(&[2, 0, 1])).unwrap(), z);
    }

    #[test]
    fn slice_and_concat_round_trip() {
        let x = t(&[2, 5], &[0., 1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let a = x.slice(1, 0, 2).unwrap();
        let b = x.slice(1, 2, 3).unwrap();
        assert_eq!(a.data(), &[0., 1., 5., 6.]);
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), x);
        assert!(x.slice(1, 4, 2).is_err());
    }

    #[test]
    fn expand_and_reduce_are_adjoint_shapes() {
        let x = t(&[2, 1, 3], &[1., 2., 3., 4., 5., 6.]);
        let e = expand_data(x.data(), &[2, 1, 3], &[2, 4, 3]);
        assert_eq!(e.len(), 24);
        assert_eq!(&e[3..6], &[1., 2., 3.]);
        let r = reduce_to(&e, &[2, 1, 3], &[2, 4, 3]);
        assert_eq!(r, vec![4., 8., 12., 16., 20., 24.]);
    }
}
