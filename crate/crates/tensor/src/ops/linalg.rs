use crate::error::{Result, TensorError};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Scalar> Var<'t, T> {
    /// `[m x k] * [k x n] -> [m x n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        if a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::mismatch("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![T::zero(); m * n];
        gemm(MatRef::new(a.data(), m, k), MatRef::new(b.data(), k, n), T::zero(), &mut c);
        let y = Tensor::new(vec![m, n], c)?;
        Ok(self.tape().record(y, &[self, other], move |g, mask| {
            // dA = dC * B^T, dB = A^T * dC
            let ga = mask[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                gemm(MatRef::new(g.data(), m, n), MatRef::transposed(b.data(), n, k), T::zero(), &mut d);
                Tensor::new(vec![m, k], d).expect("matmul grad")
            });
            let gb = mask[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                gemm(MatRef::transposed(a.data(), k, m), MatRef::new(g.data(), m, n), T::zero(), &mut d);
                Tensor::new(vec![k, n], d).expect("matmul grad")
            });
            vec![ga, gb]
        }))
    }
}
