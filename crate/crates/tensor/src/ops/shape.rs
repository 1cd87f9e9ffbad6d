use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = x.reshape(shape)?;
        let original = x.shape().to_vec();
        Ok(self.tape().record(y, &[self], move |g, _| {
            vec![Some(g.reshape(original).expect("reshape grad"))]
        }))
    }

    /// Removes `margin_h` rows and `margin_w` columns from each side of the
    /// two trailing axes of a `[B, C, H, W]` tensor.
    pub fn crop2d(self, margin_h: usize, margin_w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let &[b, c, h, w] = x.shape() else {
            return Err(TensorError::invalid("crop2d", format!("expected a 4-D tensor, got {:?}", x.shape())));
        };
        if 2 * margin_h >= h || 2 * margin_w >= w {
            return Err(TensorError::invalid(
                "crop2d",
                format!("margins ({margin_h}, {margin_w}) leave nothing of {h}x{w}"),
            ));
        }
        let (oh, ow) = (h - 2 * margin_h, w - 2 * margin_w);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in x.data().chunks_exact(h * w) {
            for i in 0..oh {
                let row = (i + margin_h) * w + margin_w;
                out.extend_from_slice(&plane[row..row + ow]);
            }
        }
        let y = Tensor::new(vec![b, c, oh, ow], out)?;
        Ok(self.tape().record(y, &[self], move |g, _| {
            let mut dx = vec![T::zero(); b * c * h * w];
            for (plane, gplane) in dx.chunks_exact_mut(h * w).zip(g.data().chunks_exact(oh * ow)) {
                for i in 0..oh {
                    let row = (i + margin_h) * w + margin_w;
                    plane[row..row + ow].copy_from_slice(&gplane[i * ow..(i + 1) * ow]);
                }
            }
            vec![Some(Tensor::new(vec![b, c, h, w], dx).expect("crop grad"))]
        }))
    }
}
