// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense row-major tensors.
//!
//! Feature maps are channel-first: `(C, H, W)` for 2-D maps, `(C, L)` for
//! 1-D signals and `(F,)` for dense vectors. Every rank is viewed internally
//! as `(C, H, W)` through [`chw`], which lets per-channel operations treat the
//! three layouts uniformly.
//!
//! Activations and weights are stored as `f32`; relevance is carried as
//! `f64` so that conservation and oracle checks stay tight. Reductions always
//! accumulate in `f64`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CrpError, Result};

/// Scalar element stored in a [`Tensor`].
pub trait Element: Copy + Default + PartialOrd + fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Element for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Element for i32 {
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as i32
    }
}

/// Spatial reduction used by [`Tensor::reduce_spatial`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Max,
}

/// Dense n-dimensional array in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    name: Option<String>,
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = f.debug_struct("Tensor");
        s.field("shape", &self.shape);
        if let Some(name) = &self.name {
            s.field("name", name);
        }
        if self.data.len() <= 16 {
            s.field("data", &self.data);
        }
        s.finish()
    }
}

/// Collapses a channel-first shape into `(channels, height, width)`.
///
/// `(F,)` becomes `(F, 1, 1)` and `(C, L)` becomes `(C, 1, L)`.
pub fn chw(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [f] => Ok((f, 1, 1)),
        [c, l] => Ok((c, 1, l)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(CrpError::Shape(format!("expected rank 1, 2 or 3, got shape {shape:?}"))),
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(CrpError::Shape(format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CrpError::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            name: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, T::default())
    }

    pub fn filled(shape: &[usize], value: T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n])
    }

    /// Builds a tensor from a function of the flat index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(f).collect())
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Channel-first `(C, H, W)` view of the shape.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        chw(&self.shape)
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> Result<T> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(CrpError::Shape(format!(
                "index {index:?} has wrong rank for shape {:?}",
                self.shape
            )));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(CrpError::Shape(format!(
                    "index {index:?} out of bounds for shape {:?}",
                    self.shape
                )));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(CrpError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            name: self.name.clone(),
        }
    }

    pub fn zip_with<U: Element, V: Element>(&self, other: &Tensor<U>, f: impl Fn(T, U) -> V) -> Result<Tensor<V>> {
        if self.shape != other.shape {
            return Err(CrpError::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            name: None,
        })
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(Element::to_f64)
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|v| v.to_f64() as f32)
    }

    /// Sum of all elements, accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64()).sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().abs()).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().abs()).fold(0.0, f64::max)
    }

    /// Per-channel sum or maximum over the spatial axes of a rank-3 tensor.
    pub fn reduce_spatial(&self, mode: Reduction) -> Result<Tensor<T>> {
        if self.rank() != 3 {
            return Err(CrpError::Shape(format!(
                "reduce_spatial needs rank 3, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.reduce_channels(mode))
    }

    /// Like [`reduce_spatial`](Self::reduce_spatial) but accepts any rank
    /// through the [`chw`] view. Dense vectors reduce to themselves.
    pub fn reduce_channels(&self, mode: Reduction) -> Tensor<T> {
        let (c, h, w) = chw(&self.shape).expect("tensor rank checked at construction");
        let plane = h * w;
        let data = (0..c)
            .map(|ch| {
                let slice = &self.data[ch * plane..(ch + 1) * plane];
                match mode {
                    Reduction::Sum => T::from_f64(slice.iter().map(|v| v.to_f64()).sum()),
                    Reduction::Max => slice.iter().copied().fold(slice[0], |m, v| if v > m { v } else { m }),
                }
            })
            .collect();
        Tensor {
            shape: vec![c],
            data,
            name: None,
        }
    }

    /// Channel-wise sums returned as `f64` regardless of element type.
    pub fn channel_sums(&self) -> Vec<f64> {
        let (c, h, w) = chw(&self.shape).expect("tensor rank checked at construction");
        let plane = h * w;
        (0..c)
            .map(|ch| self.data[ch * plane..(ch + 1) * plane].iter().map(|v| v.to_f64()).sum())
            .collect()
    }

    /// Sum over the channel axis, producing an `(H, W)` map in `f64`.
    pub fn sum_over_channels(&self) -> Result<Tensor<f64>> {
        let (c, h, w) = self.chw()?;
        let plane = h * w;
        let mut out = vec![0.0; plane];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&self.data[ch * plane..(ch + 1) * plane]) {
                *o += v.to_f64();
            }
        }
        Tensor::new(vec![h, w], out)
    }

    /// Sum over positions where `mask` is true.
    ///
    /// The mask either has the tensor's own shape or the spatial shape
    /// `(H, W)` of a channel-first tensor, in which case it applies to every
    /// channel.
    pub fn masked_sum(&self, mask: &BooleanMask) -> Result<f64> {
        if mask.shape() == self.shape() {
            return Ok(self
                .data
                .iter()
                .zip(mask.bits())
                .filter(|(_, &m)| m)
                .map(|(v, _)| v.to_f64())
                .sum());
        }
        let (c, h, w) = self.chw()?;
        if mask.len() != h * w || !mask.matches_spatial(h, w) {
            return Err(CrpError::Shape(format!(
                "mask shape {:?} incompatible with tensor shape {:?}",
                mask.shape(),
                self.shape
            )));
        }
        let plane = h * w;
        let mut total = 0.0;
        for ch in 0..c {
            for (v, &m) in self.data[ch * plane..(ch + 1) * plane].iter().zip(mask.bits()) {
                if m {
                    total += v.to_f64();
                }
            }
        }
        Ok(total)
    }

    /// Fails if any element is NaN or infinite.
    pub fn validate_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.to_f64().is_finite()) {
            None => Ok(()),
            Some(i) => Err(CrpError::Numeric(format!(
                "non-finite value at flat index {i} in tensor {}",
                self.name.as_deref().unwrap_or("<unnamed>")
            ))),
        }
    }
}

/// Boolean selection over a tensor or over the spatial plane of a
/// channel-first tensor.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BooleanMask {
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl BooleanMask {
    pub fn new(shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != bits.len() || shape.is_empty() {
            return Err(CrpError::Shape(format!(
                "mask shape {shape:?} needs {n} bits, got {}",
                bits.len()
            )));
        }
        Ok(Self { shape, bits })
    }

    pub fn full(shape: &[usize], value: bool) -> Result<Self> {
        Self::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> bool) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), (0..n).map(f).collect())
    }

    /// Rectangle `[top, top+height) x [left, left+width)` over an `(H, W)` plane.
    pub fn rect(height: usize, width: usize, top: usize, left: usize, rect_h: usize, rect_w: usize) -> Result<Self> {
        if top + rect_h > height || left + rect_w > width {
            return Err(CrpError::Shape(format!(
                "rectangle ({top},{left},{rect_h},{rect_w}) exceeds plane {height}x{width}"
            )));
        }
        Self::from_fn(&[height, width], |i| {
            let (r, c) = (i / width, i % width);
            r >= top && r < top + rect_h && c >= left && c < left + rect_w
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn not(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// True when the mask covers an `(h, w)` plane. `(1, w)` planes also
    /// accept a `(w,)` mask and `(1, 1)` planes a `(1,)` mask.
    pub fn matches_spatial(&self, h: usize, w: usize) -> bool {
        match *self.shape.as_slice() {
            [mh, mw] => mh == h && mw == w,
            [n] => h == 1 && n == w,
            _ => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn reduce_spatial_sum_and_max() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(x.reduce_spatial(Reduction::Sum).unwrap().data(), &[10.0]);
        assert_eq!(x.reduce_spatial(Reduction::Max).unwrap().data(), &[4.0]);
    }

    #[test]
    fn reduce_spatial_zero_tensor() {
        let x = Tensor::<f32>::zeros(&[3, 4, 4]).unwrap();
        assert_eq!(x.reduce_spatial(Reduction::Sum).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn reduce_spatial_rejects_wrong_rank() {
        let x = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        assert!(matches!(x.reduce_spatial(Reduction::Sum), Err(CrpError::Shape(_))));
    }

    #[test]
    fn masked_sum_examples() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let m = BooleanMask::new(vec![3], vec![true, false, true]).unwrap();
        assert_eq!(x.masked_sum(&m).unwrap(), 4.0);
        let full = BooleanMask::full(&[3], true).unwrap();
        assert_eq!(x.masked_sum(&full).unwrap(), x.sum());
    }

    #[test]
    fn masked_sum_left_half_matches_loop() {
        let x = Tensor::<f32>::from_fn(&[6, 6], |i| ((i * 37 % 11) as f32) - 4.5).unwrap();
        let m = BooleanMask::from_fn(&[6, 6], |i| i % 6 < 3).unwrap();
        let mut expected = 0.0f64;
        for r in 0..6 {
            for c in 0..3 {
                expected += x.at(&[r, c]).unwrap() as f64;
            }
        }
        assert_eq!(x.masked_sum(&m).unwrap(), expected);
    }

    #[test]
    fn masked_sum_broadcasts_over_channels() {
        let x = t(&[2, 1, 2], &[1.0, 2.0, 10.0, 20.0]);
        let m = BooleanMask::new(vec![1, 2], vec![false, true]).unwrap();
        assert_eq!(x.masked_sum(&m).unwrap(), 22.0);
        let bad = BooleanMask::full(&[2, 2], true).unwrap();
        assert!(x.masked_sum(&bad).is_err());
    }

    #[test]
    fn construction_checks_invariants() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        let bad = t(&[2], &[1.0, f32::NAN]);
        assert!(bad.validate_finite().is_err());
    }

    proptest! {
        #[test]
        fn channel_sums_add_up(c in 1usize..4, h in 1usize..5, w in 1usize..5, seed in 0u64..1000) {
            let x = Tensor::<f32>::from_fn(&[c, h, w], |i| (((i as u64 * 2654435761 + seed) % 1000) as f32) / 100.0 - 5.0).unwrap();
            let per_channel: f64 = x.reduce_spatial(Reduction::Sum).unwrap().data().iter().map(|&v| v as f64).sum();
            let total = x.sum();
            prop_assert!((per_channel - total).abs() <= 1e-6 * total.abs().max(1.0));
        }

        #[test]
        fn mask_and_complement_partition_sum(n in 1usize..40, seed in 0u64..1000) {
            let x = Tensor::<f32>::from_fn(&[n], |i| (((i as u64 * 40503 + seed) % 97) as f32) / 7.0 - 6.0).unwrap();
            let m = BooleanMask::from_fn(&[n], |i| (i as u64 + seed).is_multiple_of(3)).unwrap();
            let lhs = x.masked_sum(&m).unwrap() + x.masked_sum(&m.not()).unwrap();
            prop_assert!((lhs - x.sum()).abs() <= 1e-6 * x.abs_sum().max(1.0));
        }
    }
}
