use crate::scalar::Scalar;

/// Dense row-major tensor. Rank 1 and 2 are what the model uses; shape is
/// kept as a vector so reshapes are cheap and error messages stay honest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(
            len,
            data.len(),
            "tensor shape {:?} needs {} elements, got {}",
            shape,
            len,
            data.len()
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn filled(shape: &[usize], v: F) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a rank-2 tensor; panics on other ranks.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(
            self.shape.len(),
            2,
            "expected rank-2 tensor, got shape {:?}",
            self.shape
        );
        (self.shape[0], self.shape[1])
    }

    pub fn at2(&self, i: usize, j: usize) -> F {
        let (_, c) = self.dims2();
        self.data[i * c + j]
    }

    pub fn row(&self, i: usize) -> &[F] {
        let (_, c) = self.dims2();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn reshaped(&self, shape: &[usize]) -> Tensor<F> {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn first(&self) -> F {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(
            self.shape, other.shape,
            "max_abs_diff shapes {:?} vs {:?}",
            self.shape, other.shape
        );
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Converts element type (f32 <-> f64).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

/// `a [m,k] . b [k,p] -> [m,p]`. The k-middle loop keeps the inner loop a
/// contiguous axpy over the output row, which autovectorizes.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, ka) = a.dims2();
    let (kb, p) = b.dims2();
    assert_eq!(
        ka, kb,
        "matmul inner-dimension mismatch: {:?} x {:?}",
        a.shape, b.shape
    );
    let mut out = vec![F::zero(); m * p];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        let crow = &mut out[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b.data[k * p..(k + 1) * p];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aik * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, p],
        data: out,
    }
}

/// `a [m,k] . b^T` with `b [p,k]` -> `[m,p]` (row-by-row dot products).
pub fn matmul_nt<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (m, ka) = a.dims2();
    let (p, kb) = b.dims2();
    assert_eq!(
        ka, kb,
        "matmul_nt inner-dimension mismatch: {:?} x {:?}^T",
        a.shape, b.shape
    );
    let mut out = vec![F::zero(); m * p];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        for j in 0..p {
            let brow = &b.data[j * kb..(j + 1) * kb];
            let mut s = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * p + j] = s;
        }
    }
    Tensor {
        shape: vec![m, p],
        data: out,
    }
}

/// `a^T . b` with `a [k,m]`, `b [k,p]` -> `[m,p]` (rank-1 update per k row).
pub fn matmul_tn<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
    let (ka, m) = a.dims2();
    let (kb, p) = b.dims2();
    assert_eq!(
        ka, kb,
        "matmul_tn inner-dimension mismatch: {:?}^T x {:?}",
        a.shape, b.shape
    );
    let mut out = vec![F::zero(); m * p];
    for k in 0..ka {
        let arow = &a.data[k * m..(k + 1) * m];
        let brow = &b.data[k * p..(k + 1) * p];
        for (i, &aki) in arow.iter().enumerate() {
            let crow = &mut out[i * p..(i + 1) * p];
            for (c, &bv) in crow.iter_mut().zip(brow) {
                *c += aki * bv;
            }
        }
    }
    Tensor {
        shape: vec![m, p],
        data: out,
    }
}
