use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LhsScalar,
    RhsScalar,
}

fn broadcast(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if a.is_scalar() {
        Ok(Broadcast::LhsScalar)
    } else if b.is_scalar() {
        Ok(Broadcast::RhsScalar)
    } else {
        Err(TensorError::mismatch(op, a.shape(), b.shape()))
    }
}

fn apply<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, mode: Broadcast, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data: Vec<T> = match mode {
        Broadcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::LhsScalar => {
            let x = a.data()[0];
            b.data().iter().map(|&y| f(x, y)).collect()
        }
        Broadcast::RhsScalar => {
            let y = b.data()[0];
            a.data().iter().map(|&x| f(x, y)).collect()
        }
    };
    let shape = if mode == Broadcast::LhsScalar { b.shape() } else { a.shape() };
    Tensor::new(shape.to_vec(), data).expect("broadcast result shape")
}

/// Reduces an output-shaped gradient onto an operand that may have been broadcast.
fn reduce_to<T: Scalar>(grad: Tensor<T>, scalar_operand: bool) -> Tensor<T> {
    if scalar_operand {
        Tensor::scalar(grad.sum())
    } else {
        grad
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    fn unary(self, forward: impl Fn(T) -> T, derivative: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(forward);
        let y_saved = y.clone();
        self.tape().record(y, &[self], move |g, _| {
            let data = x
                .data()
                .iter()
                .zip(y_saved.data())
                .zip(g.data())
                .map(|((&xv, &yv), &gv)| gv * derivative(xv, yv))
                .collect();
            vec![Some(Tensor::new(x.shape().to_vec(), data).expect("unary grad"))]
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let mode = broadcast("add", &a, &b)?;
        let y = apply(&a, &b, mode, |x, y| x + y);
        Ok(self.tape().record(y, &[self, other], move |g, _| {
            vec![
                Some(reduce_to(g.clone(), mode == Broadcast::LhsScalar)),
                Some(reduce_to(g.clone(), mode == Broadcast::RhsScalar)),
            ]
        }))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let mode = broadcast("sub", &a, &b)?;
        let y = apply(&a, &b, mode, |x, y| x - y);
        Ok(self.tape().record(y, &[self, other], move |g, _| {
            vec![
                Some(reduce_to(g.clone(), mode == Broadcast::LhsScalar)),
                Some(reduce_to(g.map(|v| -v), mode == Broadcast::RhsScalar)),
            ]
        }))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        let mode = broadcast("mul", &a, &b)?;
        let y = apply(&a, &b, mode, |x, y| x * y);
        Ok(self.tape().record(y, &[self, other], move |g, mask| {
            let ga = mask[0].then(|| {
                let full = match mode {
                    Broadcast::LhsScalar => g.zip_map(&b, "mul", |gv, bv| gv * bv).expect("shape"),
                    _ => apply(g, &b, mode, |gv, bv| gv * bv),
                };
                reduce_to(full, mode == Broadcast::LhsScalar)
            });
            let gb = mask[1].then(|| {
                let full = match mode {
                    Broadcast::RhsScalar => g.zip_map(&a, "mul", |gv, av| gv * av).expect("shape"),
                    Broadcast::LhsScalar => apply(&a, g, Broadcast::LhsScalar, |av, gv| gv * av),
                    Broadcast::Same => apply(g, &a, mode, |gv, av| gv * av),
                };
                reduce_to(full, mode == Broadcast::RhsScalar)
            });
            vec![ga, gb]
        }))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(move |x| x + c, |_, _| T::one())
    }

    /// `|x|`, with the subgradient at exactly zero taken as 0.
    pub fn abs(self) -> Var<'t, T> {
        self.unary(|x| x.abs(), |x, _| sign(x))
    }

    /// Piecewise constant, so its gradient is zero everywhere.
    pub fn sign(self) -> Var<'t, T> {
        self.unary(sign, |_, _| T::zero())
    }

    pub fn log1p(self) -> Var<'t, T> {
        self.unary(|x| x.ln_1p(), |x, _| T::one() / (T::one() + x))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        self.unary(
            move |x| if x >= T::zero() { x } else { slope * x },
            move |x, _| if x >= T::zero() { T::one() } else { slope },
        )
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().record(Tensor::scalar(x.sum()), &[self], move |g, _| {
            let gv = g.data()[0];
            vec![Some(Tensor::full(shape, gv).expect("sum grad"))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let x = self.value();
        let n = T::of(x.numel() as f64);
        let shape = x.shape().to_vec();
        self.tape().record(Tensor::scalar(x.sum() / n), &[self], move |g, _| {
            let gv = g.data()[0] / n;
            vec![Some(Tensor::full(shape, gv).expect("mean grad"))]
        })
    }
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
