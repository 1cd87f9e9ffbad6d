//! Per-channel batch normalization over `[B, C, H, W]`.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Batch statistics observed by a train-mode call, for updating running
/// estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments<T> {
    pub mean: Vec<T>,
    /// Population variance, used for normalization.
    pub var: Vec<T>,
    /// Bessel-corrected variance, used for running estimates.
    pub var_unbiased: Vec<T>,
    pub count: usize,
}

fn check_affine<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let &[b, c, h, w] = x.shape() else {
        return Err(TensorError::invalid("batch_norm2d", format!("expected a 4-D tensor, got {:?}", x.shape())));
    };
    for p in [gamma, beta] {
        if p.shape() != [c] {
            return Err(TensorError::mismatch("batch_norm2d", x.shape(), p.shape()));
        }
    }
    Ok((b, c, h * w))
}

/// Applies `y = gamma * xhat + beta` given per-channel `xhat = (x - mean) * inv_std`.
fn affine<T: Scalar>(x: &Tensor<T>, gamma: &[T], beta: &[T], mean: &[T], inv_std: &[T], channels: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let mut xhat = Vec::with_capacity(x.numel());
    let mut y = Vec::with_capacity(x.numel());
    for (idx, chunk) in x.data().chunks_exact(plane).enumerate() {
        let c = idx % channels;
        for &v in chunk {
            let n = (v - mean[c]) * inv_std[c];
            xhat.push(n);
            y.push(gamma[c] * n + beta[c]);
        }
    }
    (xhat, y)
}

fn affine_grads<T: Scalar>(g: &Tensor<T>, xhat: &[T], channels: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    for (idx, (gc, xc)) in g.data().chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
        let c = idx % channels;
        for (&gv, &xv) in gc.iter().zip(xc) {
            dgamma[c] = dgamma[c] + gv * xv;
            dbeta[c] = dbeta[c] + gv;
        }
    }
    (dgamma, dbeta)
}

/// Normalizes with the statistics of the batch itself.
pub fn batch_norm2d_train<'t, T: Scalar>(x: Var<'t, T>, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<(Var<'t, T>, BatchMoments<T>)> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let (batch, channels, plane) = check_affine(&xv, &gv, &bv)?;
    let count = batch * plane;
    if count < 2 {
        return Err(TensorError::invalid(
            "batch_norm2d",
            format!("train mode needs at least 2 values per channel, got {count} for shape {:?}", xv.shape()),
        ));
    }
    let n = T::of(count as f64);
    let mut mean = vec![T::zero(); channels];
    for (idx, chunk) in xv.data().chunks_exact(plane).enumerate() {
        mean[idx % channels] = mean[idx % channels] + chunk.iter().copied().sum();
    }
    mean.iter_mut().for_each(|m| *m = *m / n);
    let mut var = vec![T::zero(); channels];
    for (idx, chunk) in xv.data().chunks_exact(plane).enumerate() {
        let c = idx % channels;
        var[c] = var[c] + chunk.iter().map(|&v| (v - mean[c]) * (v - mean[c])).sum();
    }
    var.iter_mut().for_each(|v| *v = *v / n);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (xhat, y) = affine(&xv, gv.data(), bv.data(), &mean, &inv_std, channels, plane);
    let y = Tensor::new(xv.shape().to_vec(), y)?;
    let moments = BatchMoments {
        var_unbiased: var.iter().map(|&v| v * n / (n - T::one())).collect(),
        mean,
        var,
        count,
    };

    let shape = xv.shape().to_vec();
    let out = x.tape().record(y, &[x, gamma, beta], move |g, mask| {
        let (dgamma, dbeta) = affine_grads(g, &xhat, channels, plane);
        let dx = mask[0].then(|| {
            // dx = gamma * inv_std / N * (N*dy - sum(dy) - xhat * sum(dy*xhat))
            let mut dx = Vec::with_capacity(xhat.len());
            for (idx, (gc, xc)) in g.data().chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
                let c = idx % channels;
                let k = gv.data()[c] * inv_std[c] / n;
                for (&gval, &xval) in gc.iter().zip(xc) {
                    dx.push(k * (n * gval - dbeta[c] - xval * dgamma[c]));
                }
            }
            Tensor::new(shape, dx).expect("bn dx")
        });
        vec![
            dx,
            mask[1].then(|| Tensor::new(vec![channels], dgamma.clone()).expect("bn dgamma")),
            mask[2].then(|| Tensor::new(vec![channels], dbeta.clone()).expect("bn dbeta")),
        ]
    });
    Ok((out, moments))
}

/// Normalizes with fixed (running) statistics.
pub fn batch_norm2d_eval<'t, T: Scalar>(x: Var<'t, T>, gamma: Var<'t, T>, beta: Var<'t, T>, mean: &[T], var: &[T], eps: T) -> Result<Var<'t, T>> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let (_, channels, plane) = check_affine(&xv, &gv, &bv)?;
    if mean.len() != channels || var.len() != channels {
        return Err(TensorError::mismatch("batch_norm2d", &[mean.len(), var.len()], &[channels, channels]));
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (xhat, y) = affine(&xv, gv.data(), bv.data(), mean, &inv_std, channels, plane);
    let y = Tensor::new(xv.shape().to_vec(), y)?;
    let shape = xv.shape().to_vec();
    Ok(x.tape().record(y, &[x, gamma, beta], move |g, mask| {
        let dx = mask[0].then(|| {
            let mut dx = Vec::with_capacity(xhat.len());
            for (idx, gc) in g.data().chunks_exact(plane).enumerate() {
                let c = idx % channels;
                let k = gv.data()[c] * inv_std[c];
                dx.extend(gc.iter().map(|&v| k * v));
            }
            Tensor::new(shape, dx).expect("bn dx")
        });
        let (dgamma, dbeta) = if mask[1] || mask[2] {
            affine_grads(g, &xhat, channels, plane)
        } else {
            (Vec::new(), Vec::new())
        };
        vec![
            dx,
            mask[1].then(|| Tensor::new(vec![channels], dgamma).expect("bn dgamma")),
            mask[2].then(|| Tensor::new(vec![channels], dbeta).expect("bn dbeta")),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    fn affine_params(tape: &Tape<f64>, c: usize, g: f64, b: f64) -> (Var<'_, f64>, Var<'_, f64>) {
        (
            tape.constant(Tensor::full(vec![c], g).unwrap()),
            tape.constant(Tensor::full(vec![c], b).unwrap()),
        )
    }

    #[test]
    fn two_point_symmetry() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![2, 1, 1, 1], &[1.0, 3.0]).unwrap());
        let (g, b) = affine_params(&tape, 1, 1.0, 0.0);
        let (y, m) = batch_norm2d_train(x, g, b, 0.0).unwrap();
        assert_eq!(y.value().data(), &[-1.0, 1.0]);
        assert_eq!(m.mean, vec![2.0]);
        assert_eq!(m.var, vec![1.0]);
        assert_eq!(m.var_unbiased, vec![2.0]);
    }

    #[test]
    fn affine_on_standardized_data() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![1, 1, 2, 2], &[-1.0, 1.0, -1.0, 1.0]).unwrap());
        let (g, b) = affine_params(&tape, 1, 2.0, 5.0);
        let (y, _) = batch_norm2d_train(x, g, b, 0.0).unwrap();
        assert_eq!(y.value().data(), &[3.0, 7.0, 3.0, 7.0]);
    }

    #[test]
    fn eval_uses_given_statistics() {
        let tape = Tape::<f64>::new();
        let data = [0.5, -2.0, 4.0, 1.0];
        let x = tape.constant(Tensor::from_f64(vec![1, 2, 1, 2], &data).unwrap());
        let gamma = tape.constant(Tensor::from_f64(vec![2], &[1.5, -0.5]).unwrap());
        let beta = tape.constant(Tensor::from_f64(vec![2], &[0.1, 0.2]).unwrap());
        let (mean, var, eps) = ([0.3, -1.0], [2.0, 0.25], 1e-5);
        let y = batch_norm2d_eval(x, gamma, beta, &mean, &var, eps).unwrap().value();
        let gam = [1.5, -0.5];
        let bet = [0.1, 0.2];
        for (i, &v) in data.iter().enumerate() {
            let c = i / 2;
            let want = gam[c] * ((v - mean[c]) * (1.0 / (var[c] + eps).sqrt())) + bet[c];
            assert_eq!(y.data()[i], want);
        }
    }

    #[test]
    fn single_value_statistics_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![1, 1, 1, 1], &[1.0]).unwrap());
        let (g, b) = affine_params(&tape, 1, 1.0, 0.0);
        assert!(batch_norm2d_train(x, g, b, 1e-5).is_err());
    }
}
