//! Dense `[batch, channel, height, width]` rasters used by every numeric module.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub const fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    /// Panics if `data.len()` does not match the shape.
    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(shape.numel(), data.len(), "tensor data length does not match shape {shape}");
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full(Shape::scalar(), value)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(n, c, y, x)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor::from_vec(self.shape, self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of batch item `i` as a batch of one.
    pub fn item(&self, i: usize) -> Tensor {
        let per = self.shape.c * self.shape.plane();
        Tensor::from_vec(
            Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            self.data[i * per..(i + 1) * per].to_vec(),
        )
    }

    /// Stacks equally shaped tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let s = items[0].shape;
        let mut data = Vec::with_capacity(s.numel() * items.len());
        let mut n = 0;
        for t in items {
            assert_eq!((t.shape.c, t.shape.h, t.shape.w), (s.c, s.h, s.w), "stack shape mismatch");
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(n, s.c, s.h, s.w), data)
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        let (sa, sb) = (a.shape, b.shape);
        assert_eq!((sa.n, sa.h, sa.w), (sb.n, sb.h, sb.w), "concat shape mismatch");
        let plane = sa.plane();
        let mut data = Vec::with_capacity(a.len() + b.len());
        for n in 0..sa.n {
            data.extend_from_slice(&a.data[n * sa.c * plane..(n + 1) * sa.c * plane]);
            data.extend_from_slice(&b.data[n * sb.c * plane..(n + 1) * sb.c * plane]);
        }
        Tensor::from_vec(Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w), data)
    }

    pub fn reshape(self, shape: Shape) -> Tensor {
        Tensor::from_vec(shape, self.data)
    }
}
