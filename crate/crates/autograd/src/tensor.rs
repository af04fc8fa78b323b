//! Dense row-major `f64` tensors and the raw kernels the tape is built on.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ShapeError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    // shared so reshapes and clones do not copy; writes go through make_mut
    data: Arc<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Strides into a tensor of shape `from` for each axis of the broadcast shape
/// `to`, zero along broadcast axes.
fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let pad = to.len() - from.len();
    let st = strides(from);
    let mut eff = vec![0; to.len()];
    for i in 0..from.len() {
        if from[i] != 1 {
            eff[i + pad] = st[i];
        }
    }
    eff
}

/// Drops unit axes and merges neighbours whose strides line up, so the
/// innermost run is as long as possible.
fn coalesce(shape: &[usize], eff: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let (mut s, mut e): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
    for (&n, &st) in shape.iter().zip(eff) {
        if n == 1 {
            continue;
        }
        if let (Some(ln), Some(le)) = (s.last_mut(), e.last_mut()) {
            if *le == st * n {
                *ln *= n;
                *le = st;
                continue;
            }
        }
        s.push(n);
        e.push(st);
    }
    if s.is_empty() {
        s.push(1);
        e.push(0);
    }
    (s, e)
}

/// Calls `f` with the strided offset of the start of every innermost run.
fn for_each_run(shape: &[usize], eff: &[usize], mut f: impl FnMut(usize)) {
    let r = shape.len() - 1;
    let outer: usize = shape[..r].iter().product();
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..outer {
        f(off);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= eff[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Result shape of numpy-style broadcasting, or `None` if incompatible.
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

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, ShapeError> {
        if numel(&shape) != data.len() {
            return Err(ShapeError::new(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self { shape, data: data.into() })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::new(shape.to_vec(), data).expect("element count matches shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; numel(shape)].into() }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)].into() }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v].into() }
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

    pub fn data(&self) -> &[f64] {
        &self.data[..]
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|d| (*d).clone())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        let st = strides(&self.shape);
        let off: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, ShapeError> {
        if numel(shape) != self.data.len() {
            return Err(ShapeError::new(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        Ok(Self { shape: shape.to_vec(), data: Arc::clone(&self.data) })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&x| f(x)).collect()) }
    }

    /// Same-shape elementwise combination.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip requires equal shapes");
        Self {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect()),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(other.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self, ShapeError> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(&self.shape, shape) {
            Some(ref s) if s == shape => {}
            _ => {
                return Err(ShapeError::new(format!(
                    "cannot broadcast {:?} to {:?}",
                    self.shape, shape
                )))
            }
        }
        let eff = broadcast_strides(&self.shape, shape);
        Ok(Self { shape: shape.to_vec(), data: self.gather(shape, &eff).into() })
    }

    /// Reads `self.data` in the index order of `shape`, with `eff` giving the
    /// source stride of each output axis.
    fn gather(&self, shape: &[usize], eff: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(numel(shape));
        let (cs, ce) = coalesce(shape, eff);
        let (n, st) = (*cs.last().unwrap(), *ce.last().unwrap());
        for_each_run(&cs, &ce, |off| match st {
            1 => out.extend_from_slice(&self.data[off..off + n]),
            0 => out.extend(std::iter::repeat(self.data[off]).take(n)),
            s => out.extend((0..n).map(|j| self.data[off + j * s])),
        });
        out
    }

    /// Sums broadcast axes away so the result has `shape`; the adjoint of `broadcast_to`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self, ShapeError> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(shape, &self.shape) {
            Some(ref s) if s == &self.shape => {}
            _ => {
                return Err(ShapeError::new(format!(
                    "cannot sum {:?} down to {:?}",
                    self.shape, shape
                )))
            }
        }
        let mut out = vec![0.0; numel(shape)];
        if self.data.is_empty() {
            return Ok(Self { shape: shape.to_vec(), data: out.into() });
        }
        let eff = broadcast_strides(shape, &self.shape);
        let (cs, ce) = coalesce(&self.shape, &eff);
        let (n, st) = (*cs.last().unwrap(), *ce.last().unwrap());
        let mut src = self.data.chunks(n);
        for_each_run(&cs, &ce, |off| {
            let run = src.next().expect("run count matches element count");
            match st {
                1 => out[off..off + n].iter_mut().zip(run).for_each(|(o, v)| *o += v),
                0 => out[off] += run.iter().sum::<f64>(),
                s => run.iter().enumerate().for_each(|(j, v)| out[off + j * s] += v),
            }
        });
        Ok(Self { shape: shape.to_vec(), data: out.into() })
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(&self, axis: usize) -> Self {
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        self.sum_to(&shape).expect("axis reduction is always a valid sum_to")
    }

    /// Elementwise combination under numpy broadcasting.
    pub fn zip_broadcast(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self, ShapeError> {
        if self.shape == other.shape {
            return Ok(self.zip(other, f));
        }
        let s = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            ShapeError::new(format!("cannot broadcast {:?} with {:?}", self.shape, other.shape))
        })?;
        let a = if self.shape == s { None } else { Some(self.broadcast_to(&s)?) };
        let b = if other.shape == s { None } else { Some(other.broadcast_to(&s)?) };
        Ok(a.as_ref().unwrap_or(self).zip(b.as_ref().unwrap_or(other), f))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Self, ShapeError> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(ShapeError::new(format!("invalid permutation {:?} for rank {}", axes, rank)));
        }
        let src = strides(&self.shape);
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let eff: Vec<usize> = axes.iter().map(|&a| src[a]).collect();
        let data = self.gather(&shape, &eff);
        Ok(Self { shape, data: data.into() })
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self, ShapeError> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(ShapeError::new(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data: out.into() })
    }

    /// Zero-pads along `axis`; the adjoint of `narrow`.
    pub fn pad(&self, axis: usize, before: usize, after: usize) -> Self {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let full = before + len + after;
        let mut out = vec![0.0; outer * full * inner];
        for o in 0..outer {
            let dst = o * full * inner + before * inner;
            let src = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = full;
        Self { shape, data: out.into() }
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self, ShapeError> {
        let first = parts.first().ok_or_else(|| ShapeError::new("concat of zero tensors"))?;
        let rank = first.rank();
        for p in parts {
            if p.rank() != rank
                || (0..rank).any(|a| a != axis && p.shape[a] != first.shape[a])
            {
                return Err(ShapeError::new(format!(
                    "concat along {axis}: incompatible {:?} and {:?}",
                    first.shape, p.shape
                )));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data: out.into() })
    }

    /// `op(a) · op(b)` over the last two axes. Both operands are rank 2, or both rank 3
    /// with equal leading (batch) size.
    pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Self, ShapeError> {
        let err = || {
            ShapeError::new(format!(
                "matmul shapes {:?}{} x {:?}{}",
                a.shape,
                if ta { "^T" } else { "" },
                b.shape,
                if tb { "^T" } else { "" }
            ))
        };
        let (batch, ar, ac, br, bc) = match (a.rank(), b.rank()) {
            (2, 2) => (1, a.shape[0], a.shape[1], b.shape[0], b.shape[1]),
            (3, 3) if a.shape[0] == b.shape[0] => {
                (a.shape[0], a.shape[1], a.shape[2], b.shape[1], b.shape[2])
            }
            _ => return Err(err()),
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(err());
        }
        let mut out = vec![0.0; batch * m * n];
        let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
        let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
        for bi in 0..batch {
            let ap = &a.data[bi * ar * ac..(bi + 1) * ar * ac];
            let bp = &b.data[bi * br * bc..(bi + 1) * br * bc];
            let cp = &mut out[bi * m * n..(bi + 1) * m * n];
            if m == 0 || n == 0 || k == 0 {
                continue;
            }
            // SAFETY: slices are exactly sized for the given dims and strides.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    ap.as_ptr(),
                    rsa as isize,
                    csa as isize,
                    bp.as_ptr(),
                    rsb as isize,
                    csb as isize,
                    0.0,
                    cp.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
        Ok(Self { shape, data: out.into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_then_sum_to_roundtrip_counts() {
        let t = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]);
        let b = t.broadcast_to(&[3, 2, 4]).unwrap();
        assert_eq!(b.shape(), &[3, 2, 4]);
        assert_eq!(b.at(&[2, 1, 3]), 2.0);
        let s = b.sum_to(&[2, 1]).unwrap();
        assert_eq!(s.data(), &[12.0, 24.0]);
    }

    #[test]
    fn permute_transposes() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect());
        let p = t.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn matmul_transposed_operands() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let at = a.permute(&[1, 0]).unwrap();
        let plain = Tensor::matmul(&a, &at, false, false).unwrap();
        let via_flag = Tensor::matmul(&a, &a, false, true).unwrap();
        assert_eq!(plain, via_flag);
        assert_eq!(plain.data(), &[14.0, 32.0, 32.0, 77.0]);
        let gram = Tensor::matmul(&a, &a, true, false).unwrap();
        assert_eq!(gram.shape(), &[3, 3]);
        assert_eq!(gram.at(&[0, 0]), 17.0);
    }

    #[test]
    fn narrow_pad_concat() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(f64::from).collect());
        let n = t.narrow(1, 1, 2).unwrap();
        assert_eq!(n.data(), &[1.0, 2.0, 4.0, 5.0]);
        let p = n.pad(1, 1, 0);
        assert_eq!(p.data(), &[0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
        let left = t.narrow(1, 0, 1).unwrap();
        let c = Tensor::concat(&[&left, &n], 1).unwrap();
        assert_eq!(c, t);
    }

    #[test]
    fn incompatible_shapes_error() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(Tensor::matmul(&a, &a, false, false).is_err());
        assert!(a.broadcast_to(&[3, 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0]).is_err());
    }
}
