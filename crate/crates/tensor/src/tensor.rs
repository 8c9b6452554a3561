use crate::Float;

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Result shape of numpy-style broadcasting, or `None` when incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides that read a tensor of `shape` as if it had `target` shape
/// (zero stride along broadcast axes).
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = target.len() - shape.len();
    (0..target.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every element of `shape` in row-major order, yielding the linear
/// offsets into each operand described by `strides`. The innermost axis is
/// handed to `inner` as a run so the hot loop stays simple.
fn for_each_run<const N: usize>(
    shape: &[usize],
    strides: [&[usize]; N],
    mut inner: impl FnMut([usize; N], [usize; N], usize),
) {
    if shape.is_empty() {
        inner([0; N], [0; N], 1);
        return;
    }
    if shape.iter().any(|&d| d == 0) {
        return;
    }
    let rank = shape.len();
    let last = rank - 1;
    let len = shape[last];
    let step: [usize; N] = std::array::from_fn(|k| strides[k][last]);
    let mut idx = vec![0usize; rank];
    let mut base = [0usize; N];
    loop {
        inner(base, step, len);
        // advance the odometer over all axes but the last
        let mut axis = last;
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            for (k, b) in base.iter_mut().enumerate() {
                *b += strides[k][axis];
            }
            if idx[axis] < shape[axis] {
                break;
            }
            for (k, b) in base.iter_mut().enumerate() {
                *b -= strides[k][axis] * shape[axis];
            }
            idx[axis] = 0;
        }
    }
}

impl<F: Float> Tensor<F> {
    /// Panics if `data.len()` does not match the shape.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let data = vec![value; numel(&shape)];
        Self { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::one())
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> F) -> Self {
        let shape = shape.into();
        let data = (0..numel(&shape)).map(&mut f).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel(&shape),
            self.data.len(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        self.shape = shape;
        self
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| G::of(x.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn map_inplace(&mut self, f: impl Fn(F) -> F) {
        for x in &mut self.data {
            *x = f(*x);
        }
    }

    /// Element-wise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// `self += alpha * other` for tensors of identical shape.
    pub fn axpy(&mut self, alpha: F, other: &Self) {
        assert_eq!(self.shape, other.shape, "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn sum_sq(&self) -> F {
        self.data.iter().map(|&x| x * x).sum()
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Numpy-style broadcasting binary operation.
    pub fn broadcast_zip(&self, other: &Self, f: impl Fn(F, F) -> F) -> Self {
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let shape = broadcast_shape(&self.shape, &other.shape).unwrap_or_else(|| {
            panic!("shapes {:?} and {:?} do not broadcast", self.shape, other.shape)
        });
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let mut out = Vec::with_capacity(numel(&shape));
        let (a, b) = (&self.data, &other.data);
        for_each_run(&shape, [&sa, &sb], |[oa, ob], [da, db], len| {
            for i in 0..len {
                out.push(f(a[oa + i * da], b[ob + i * db]));
            }
        });
        Self { shape, data: out }
    }

    /// Sums this tensor down to `target`, the inverse of broadcasting
    /// `target` up to `self.shape()`.
    pub fn sum_to(&self, target: &[usize]) -> Self {
        if self.shape == target {
            return self.clone();
        }
        assert!(
            broadcast_shape(target, &self.shape).as_deref() == Some(&self.shape[..]),
            "cannot reduce {:?} to {:?}",
            self.shape,
            target
        );
        let st = broadcast_strides(target, &self.shape);
        let ss = contiguous_strides(&self.shape);
        let mut out = vec![F::zero(); numel(target)];
        let src = &self.data;
        for_each_run(&self.shape, [&ss, &st], |[os, ot], [ds, dt], len| {
            if dt == 0 {
                let mut acc = F::zero();
                for i in 0..len {
                    acc += src[os + i * ds];
                }
                out[ot] += acc;
            } else {
                for i in 0..len {
                    out[ot + i * dt] += src[os + i * ds];
                }
            }
        });
        Self { shape: target.to_vec(), data: out }
    }

    /// Materialised axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let rank = self.shape.len();
        assert_eq!(perm.len(), rank, "permutation rank mismatch");
        let mut seen = vec![false; rank];
        for &p in perm {
            assert!(p < rank && !seen[p], "invalid permutation {perm:?}");
            seen[p] = true;
        }
        let own = contiguous_strides(&self.shape);
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| own[p]).collect();
        let dst_strides = contiguous_strides(&shape);
        let mut out = vec![F::zero(); self.data.len()];
        let src = &self.data;
        for_each_run(&shape, [&src_strides, &dst_strides], |[os, od], [ds, dd], len| {
            for i in 0..len {
                out[od + i * dd] = src[os + i * ds];
            }
        });
        Self { shape, data: out }
    }

    /// Nearest-neighbour upsampling of the last two axes.
    pub fn upsample_nearest2d(&self, fh: usize, fw: usize) -> Self {
        let r = self.rank();
        assert!(r >= 2, "upsample needs rank >= 2");
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let outer = numel(&self.shape[..r - 2]);
        let (oh, ow) = (h * fh, w * fw);
        let mut out = Vec::with_capacity(outer * oh * ow);
        for plane in self.data.chunks(h * w) {
            for y in 0..oh {
                let row = &plane[(y / fh) * w..(y / fh + 1) * w];
                for x in 0..ow {
                    out.push(row[x / fw]);
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        Self { shape, data: out }
    }

    /// Adjoint of [`Tensor::upsample_nearest2d`]: sums each `fh x fw` block.
    pub fn downsample_sum2d(&self, fh: usize, fw: usize) -> Self {
        let r = self.rank();
        let (oh, ow) = (self.shape[r - 2], self.shape[r - 1]);
        assert!(oh % fh == 0 && ow % fw == 0, "block size does not divide shape");
        let (h, w) = (oh / fh, ow / fw);
        let outer = numel(&self.shape[..r - 2]);
        let mut out = vec![F::zero(); outer * h * w];
        for (p, plane) in self.data.chunks(oh * ow).enumerate() {
            let dst = &mut out[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for x in 0..ow {
                    dst[(y / fh) * w + x / fw] += plane[y * ow + x];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = h;
        shape[r - 1] = w;
        Self { shape, data: out }
    }
}
