//! Lion: a sign-of-interpolated-momentum optimizer with one buffer per tensor.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LionParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub momentum: Vec<Tensor<T>>,
    pub step: usize,
}

impl<T: Scalar> OptimizerState<T> {
    /// Zero momentum shaped like `params`.
    pub fn new(params: &[&Tensor<T>]) -> Self {
        Self {
            momentum: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
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

/// One update over matching lists of parameters, gradients and momenta.
///
/// `u = sign(β1·m + (1−β1)·g)`, `θ ← θ − lr·(u + λ·θ)`, `m ← β2·m + (1−β2)·g`.
pub fn lion_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut OptimizerState<T>,
    hp: LionParams,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.momentum.len() {
        return Err(Error::Dimension {
            op: "lion_step",
            left: alloc::vec![params.len()],
            right: alloc::vec![grads.len(), state.momentum.len()],
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.momentum) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Dimension {
                op: "lion_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
    }
    let (lr, b1, b2, wd) = (
        T::from_f64(hp.lr),
        T::from_f64(hp.beta1),
        T::from_f64(hp.beta2),
        T::from_f64(hp.weight_decay),
    );
    for ((p, g), m) in params.iter_mut().zip(grads).zip(&mut state.momentum) {
        for ((w, &gi), mi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
            let u = sign(b1 * *mi + (T::one() - b1) * gi);
            *w = *w - lr * (u + wd * *w);
            *mi = b2 * *mi + (T::one() - b2) * gi;
        }
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HP: LionParams = LionParams {
        lr: 0.125,
        beta1: 0.9,
        beta2: 0.99,
        weight_decay: 0.0,
    };

    #[test]
    fn positive_gradient_moves_every_parameter_by_lr() {
        let mut p = Tensor::<f64>::vector(alloc::vec![1.0, -2.0, 0.0]).unwrap();
        let g = Tensor::vector(alloc::vec![0.3, 5.0, 1e-9]).unwrap();
        let mut st = OptimizerState::new(&[&p]);
        lion_step(&mut [&mut p], &[&g], &mut st, HP).unwrap();
        assert_eq!(p.data(), &[0.875, -2.125, -0.125]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_and_momentum_is_a_fixed_point() {
        let mut p = Tensor::<f64>::vector(alloc::vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut st = OptimizerState::new(&[&p]);
        lion_step(&mut [&mut p], &[&g], &mut st, HP).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(st.momentum[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let g = Tensor::zeros(&[3]);
        let mut st = OptimizerState::new(&[&p]);
        assert!(lion_step(&mut [&mut p], &[&g], &mut st, HP).is_err());
    }

    proptest! {
        #[test]
        fn negating_gradient_and_momentum_negates_the_update(
            g in proptest::collection::vec(-1.0f64..1.0, 8),
            m in proptest::collection::vec(-1.0f64..1.0, 8),
        ) {
            let run = |sign: f64| {
                let mut p = Tensor::<f64>::zeros(&[8]);
                let gt = Tensor::vector(g.iter().map(|v| sign * v).collect()).unwrap();
                let mut st = OptimizerState::new(&[&p]);
                st.momentum[0] = Tensor::vector(m.iter().map(|v| sign * v).collect()).unwrap();
                lion_step(&mut [&mut p], &[&gt], &mut st, HP).unwrap();
                (p, st.momentum.remove(0))
            };
            let (p1, m1) = run(1.0);
            let (p2, m2) = run(-1.0);
            for (a, b) in p1.data().iter().zip(p2.data()) {
                prop_assert_eq!(*a, -*b);
            }
            for (a, b) in m1.data().iter().zip(m2.data()) {
                prop_assert_eq!(*a, -*b);
            }
        }
    }
}
