//! Dense row-major tensors over a configurable float precision.
//!
//! Two precisions are supported: `f32` ("standard", the training default) and
//! `f64` ("extended", required by the finite-difference gradient checks).
//! Everything downstream is generic over [`Real`] so the same model code runs
//! in either precision.

use rand::Rng;

/// Float precision the numeric stack is generic over.
pub trait Real:
    num_traits::Float
    + num_traits::NumAssign
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// True for the extended (f64) precision used by gradient-check suites.
    const EXTENDED: bool;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    const EXTENDED: bool = false;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const EXTENDED: bool = true;

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// A dense tensor: row-major data plus shape, with an optional gradient
/// buffer filled in by [`crate::graph::Graph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor shape {:?} needs {} elements, got {}",
            shape,
            n,
            data.len()
        );
        assert!(shape.iter().all(|&d| d > 0), "zero dimension in {shape:?}");
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![F::zero(); n])
    }

    pub fn scalar(x: F) -> Self {
        Tensor::new(vec![1], vec![x])
    }

    pub fn vector(data: Vec<F>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    /// Uniform init in [-scale, scale], the classic recipe for small
    /// recurrent nets.
    pub fn uniform(shape: Vec<usize>, scale: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| F::from_f64(rng.gen_range(-scale..=scale)))
            .collect();
        Tensor::new(shape, data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Scalar value of a shape-[1] tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Resets the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = F::zero()),
            None => self.grad = Some(vec![F::zero(); self.data.len()]),
        }
    }

    /// Accumulates `delta` into the gradient buffer.
    pub fn add_grad(&mut self, delta: &[F]) {
        assert_eq!(delta.len(), self.data.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![F::zero(); self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    /// Converts between precisions.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|x| G::from_f64(x.to_f64())).collect(),
        )
    }
}

/// Row-major matrix product supporting the three layouts the model uses:
/// `[m,k]x[k,n] -> [m,n]`, `[m,k]x[k] -> [m]`, and `[k]x[k,n] -> [n]`.
pub(crate) fn matmul_data<F: Real>(
    a: &[F],
    a_shape: &[usize],
    b: &[F],
    b_shape: &[usize],
) -> (Vec<F>, Vec<usize>) {
    match (a_shape.len(), b_shape.len()) {
        (2, 2) => {
            let (m, k) = (a_shape[0], a_shape[1]);
            let n = b_shape[1];
            debug_assert_eq!(k, b_shape[0]);
            let mut out = vec![F::zero(); m * n];
            for i in 0..m {
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == F::zero() {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
            (out, vec![m, n])
        }
        (2, 1) => {
            let (m, k) = (a_shape[0], a_shape[1]);
            debug_assert_eq!(k, b_shape[0]);
            let mut out = vec![F::zero(); m];
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let mut s = F::zero();
                for p in 0..k {
                    s += arow[p] * b[p];
                }
                out[i] = s;
            }
            (out, vec![m])
        }
        (1, 2) => {
            let k = a_shape[0];
            let n = b_shape[1];
            debug_assert_eq!(k, b_shape[0]);
            let mut out = vec![F::zero(); n];
            for p in 0..k {
                let av = a[p];
                if av == F::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    out[j] += av * brow[j];
                }
            }
            (out, vec![n])
        }
        _ => unreachable!("matmul on shapes {a_shape:?} x {b_shape:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_layouts() {
        // [2,3] x [3,2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let (c, shape) = matmul_data::<f64>(&a, &[2, 3], &b, &[3, 2]);
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(c, vec![4.0, 5.0, 10.0, 11.0]);

        // [2,3] x [3]
        let v = [1.0, 1.0, 1.0];
        let (mv, shape) = matmul_data::<f64>(&a, &[2, 3], &v, &[3]);
        assert_eq!(shape, vec![2]);
        assert_eq!(mv, vec![6.0, 15.0]);

        // [2] x [2,3]
        let u = [1.0, 2.0];
        let (vm, shape) = matmul_data::<f64>(&u, &[2], &a, &[2, 3]);
        assert_eq!(shape, vec![3]);
        assert_eq!(vm, vec![9.0, 12.0, 15.0]);
    }

    #[test]
    fn grad_accumulation() {
        let mut t = Tensor::<f64>::vector(vec![1.0, 2.0]);
        t.add_grad(&[0.5, 0.5]);
        t.add_grad(&[0.5, 0.5]);
        assert_eq!(t.grad.as_deref(), Some(&[1.0, 1.0][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 0.0][..]));
    }
}
