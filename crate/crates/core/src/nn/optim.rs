use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const DEFAULT_DECAY: f64 = 0.9;
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// RMSProp with the epsilon inside the square root:
///
/// ```text
/// ms    <- decay * ms + (1 - decay) * g^2
/// param <- param - lr * g / sqrt(ms + eps)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    mean_square: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(learning_rate: f64, decay: f64, epsilon: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("rmsprop decay must lie in (0, 1), got {decay}")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("rmsprop epsilon must be positive, got {epsilon}")));
        }
        Ok(Self {
            learning_rate,
            decay,
            epsilon,
            mean_square: Vec::new(),
        })
    }

    pub fn with_state(learning_rate: f64, decay: f64, epsilon: f64, mean_square: Vec<Vec<f64>>) -> Result<Self> {
        if mean_square.iter().flatten().any(|&v| !(v >= 0.0)) {
            return Err(Error::Contract("rmsprop mean-square entries must be non-negative".into()));
        }
        let mut opt = Self::new(learning_rate, decay, epsilon)?;
        opt.mean_square = mean_square;
        Ok(opt)
    }

    pub fn mean_square(&self) -> &[Vec<f64>] {
        &self.mean_square
    }

    /// Applies one update to every tensor using its accumulated gradient.
    /// Nothing is modified if any tensor lacks a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let mut params: Vec<&mut Tensor> = params.into_iter().collect();
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::Contract(format!("parameter tensor {i} has no gradient")));
        }
        if self.mean_square.is_empty() {
            self.mean_square = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        if self.mean_square.len() != params.len()
            || self.mean_square.iter().zip(&params).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::Contract("optimizer state does not match the parameter layout".into()));
        }
        let (lr, decay, eps) = (self.learning_rate, self.decay, self.epsilon);
        for (p, ms) in params.iter_mut().zip(self.mean_square.iter_mut()) {
            let grad = p.grad().expect("checked above").to_vec();
            for ((w, m), g) in p.data_mut().iter_mut().zip(ms.iter_mut()).zip(&grad) {
                *m = decay * *m + (1.0 - decay) * g * g;
                *w -= lr * g / (*m + eps).sqrt();
            }
        }
        Ok(())
    }
}

/// Clamps every entry into `[-bound, bound]`.
pub fn clip_params<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, bound: f64) -> Result<()> {
    if !(bound > 0.0) {
        return Err(Error::Config(format!("clip bound must be positive, got {bound}")));
    }
    for p in params {
        p.data_mut().iter_mut().for_each(|v| *v = v.clamp(-bound, bound));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn with_grad(values: Vec<f64>, grad: Vec<f64>) -> Tensor {
        let mut t = Tensor::new(&[values.len()], values).unwrap();
        t.accumulate_grad(&grad);
        t
    }

    #[test]
    fn zero_grad_is_null_update() {
        let mut opt = RmsProp::with_state(1e-4, 0.9, 1e-8, vec![vec![0.5, 0.2]]).unwrap();
        let mut p = with_grad(vec![1.0, -1.0], vec![0.0, 0.0]);
        opt.step([&mut p]).unwrap();
        assert_eq!(p.data(), &[1.0, -1.0]);
        assert_eq!(opt.mean_square()[0], vec![0.9 * 0.5, 0.9 * 0.2]);
    }

    #[test]
    fn single_scalar_update() {
        let mut opt = RmsProp::new(1e-4, 0.9, 1e-8).unwrap();
        let mut p = with_grad(vec![1.0], vec![1.0]);
        opt.step([&mut p]).unwrap();
        let ms = opt.mean_square()[0][0];
        assert!((ms - 0.1).abs() < 1e-15);
        let expected = 1.0 - 0.0001 * 1.0 / (0.1f64 + 1e-8).sqrt();
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert!((p.data()[0] - 0.999_683_772_249_794_5).abs() < 1e-12);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut opt = RmsProp::new(1e-3, 0.9, 1e-8).unwrap();
        let mut a = with_grad(vec![0.3], vec![0.7]);
        let mut b = with_grad(vec![0.3], vec![0.7]);
        opt.step([&mut a, &mut b]).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn missing_grad_is_rejected_without_side_effects() {
        let mut opt = RmsProp::new(1e-3, 0.9, 1e-8).unwrap();
        let mut a = with_grad(vec![0.3], vec![0.7]);
        let mut b = Tensor::new(&[1], vec![0.3]).unwrap();
        assert!(matches!(opt.step([&mut a, &mut b]), Err(Error::Contract(_))));
        assert_eq!(a.data(), &[0.3]);
        assert!(opt.mean_square().is_empty());
    }

    #[test]
    fn clip_examples() {
        let mut t = Tensor::new(&[3], vec![-2.0, 0.0, 2.0]).unwrap();
        clip_params([&mut t], 0.01).unwrap();
        assert_eq!(t.data(), &[-0.01, 0.0, 0.01]);
        let mut inside = Tensor::new(&[2], vec![0.005, -0.002]).unwrap();
        clip_params([&mut inside], 0.01).unwrap();
        assert_eq!(inside.data(), &[0.005, -0.002]);
        assert!(clip_params([&mut inside], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn clip_is_idempotent(values in prop::collection::vec(-10.0f64..10.0, 1..64), bound in 1e-3f64..5.0) {
            let mut once = Tensor::new(&[values.len()], values.clone()).unwrap();
            clip_params([&mut once], bound).unwrap();
            let mut twice = once.clone();
            clip_params([&mut twice], bound).unwrap();
            prop_assert_eq!(once.data(), twice.data());
            prop_assert!(once.data().iter().all(|v| v.abs() <= bound));
        }

        #[test]
        fn clip_is_order_independent(a in prop::collection::vec(-3.0f64..3.0, 1..16), b in prop::collection::vec(-3.0f64..3.0, 1..16)) {
            let mut a1 = Tensor::new(&[a.len()], a.clone()).unwrap();
            let mut b1 = Tensor::new(&[b.len()], b.clone()).unwrap();
            let mut a2 = a1.clone();
            let mut b2 = b1.clone();
            clip_params([&mut a1, &mut b1], 0.5).unwrap();
            clip_params([&mut b2, &mut a2], 0.5).unwrap();
            prop_assert_eq!(a1, a2);
            prop_assert_eq!(b1, b2);
        }

        #[test]
        fn mean_square_stays_non_negative(grads in prop::collection::vec(-100.0f64..100.0, 1..8)) {
            let mut opt = RmsProp::new(1e-4, 0.9, 1e-8).unwrap();
            let mut p = Tensor::zeros(&[grads.len()]);
            for _ in 0..3 {
                p.zero_grad();
                p.accumulate_grad(&grads);
                opt.step([&mut p]).unwrap();
            }
            prop_assert!(opt.mean_square()[0].iter().all(|&m| m >= 0.0));
        }
    }
}
