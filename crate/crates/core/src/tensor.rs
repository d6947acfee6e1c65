//! Dense NCHW `f32` tensors and named parameters.

use crate::error::{Error, Result};

/// A dense 4-D tensor in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            shape: [n, c, h, w],
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::Shape(format!(
                "tensor of shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Number of values in one `(n, c)` plane.
    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Number of values in one sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[f32] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &self.data[start..start + len]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f32] {
        let len = self.plane_len();
        let start = (n * self.shape[1] + c) * len;
        &mut self.data[start..start + len]
    }

    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f32 {
        let [_, cs, hs, ws] = self.shape;
        self.data[((n * cs + c) * hs + y) * ws + x]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "tensor add shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates tensors along the channel axis.
    pub fn cat_channels(parts: &[Tensor]) -> Tensor {
        let [n, _, h, w] = parts[0].shape;
        let c: usize = parts.iter().map(|p| p.c()).sum();
        let mut out = Tensor::zeros(n, c, h, w);
        let plane = h * w;
        for b in 0..n {
            let mut offset = 0;
            for p in parts {
                let src = p.sample(b);
                let dst = &mut out.sample_mut(b)[offset * plane..(offset + p.c()) * plane];
                dst.copy_from_slice(src);
                offset += p.c();
            }
        }
        out
    }

    /// Copies channels `start..start+count` into a new tensor.
    pub fn slice_channels(&self, start: usize, count: usize) -> Tensor {
        let [n, _, h, w] = self.shape;
        let plane = h * w;
        let mut out = Tensor::zeros(n, count, h, w);
        for b in 0..n {
            let src = &self.sample(b)[start * plane..(start + count) * plane];
            out.sample_mut(b).copy_from_slice(src);
        }
        out
    }
}

/// A named array of weights (or running statistics) with a lazily allocated gradient.
#[derive(Clone, Debug)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    /// Running statistics are stored alongside weights but are not trained.
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            shape,
            value,
            grad: Vec::new(),
            trainable: true,
        }
    }

    pub fn filled(shape: Vec<usize>, fill: f32) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![fill; len])
    }

    pub fn buffer(shape: Vec<usize>, fill: f32) -> Self {
        let mut p = Self::filled(shape, fill);
        p.trainable = false;
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    /// Gradient buffer, allocated on first use.
    pub fn grad_mut(&mut self) -> &mut [f32] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![0.0; self.value.len()];
        }
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters, visited in a stable, named order.
pub trait Parameterized {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn num_trainable(&self) -> u64 {
        let mut total = 0u64;
        self.visit("", &mut |_, p| {
            if p.trainable {
                total += p.len() as u64;
            }
        });
        total
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.zero_grad());
    }
}

pub(crate) fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameterized for Param {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(prefix, self)
    }
}

impl<T: Parameterized> Parameterized for Option<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        if let Some(inner) = self {
            inner.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some(inner) = self {
            inner.visit_mut(prefix, f);
        }
    }
}

impl<T: Parameterized> Parameterized for Vec<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join_name(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join_name(prefix, &i.to_string()), f);
        }
    }
}

/// Implements [`Parameterized`] by visiting the listed fields in order.
macro_rules! parameterized {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::tensor::Parameterized for $ty {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::tensor::Param)) {
                $( self.$field.visit(&$crate::tensor::join_name(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::tensor::Param),
            ) {
                $( self.$field.visit_mut(&$crate::tensor::join_name(prefix, stringify!($field)), f); )*
            }
        }
    };
}
pub(crate) use parameterized;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cat_then_slice_recovers_parts() {
        let a = Tensor::from_vec([2, 1, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let b = Tensor::from_vec([2, 2, 2, 2], (0..16).map(|v| -(v as f32)).collect()).unwrap();
        let cat = Tensor::cat_channels(&[a.clone(), b.clone()]);
        assert_eq!(cat.shape(), [2, 3, 2, 2]);
        assert_eq!(cat.slice_channels(0, 1), a);
        assert_eq!(cat.slice_channels(1, 2), b);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec([1, 1, 2, 2], vec![0.0; 3]).is_err());
    }
}
