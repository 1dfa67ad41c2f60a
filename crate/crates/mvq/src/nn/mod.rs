//! Minimal differentiable network substrate: conv/dense/relu/maxpool stacks,
//! merge helpers, momentum SGD, and a finite-difference gradient checker.

mod layers;
mod tensor;

pub use layers::{layer_backward, layer_forward, Layer, LayerCache, SeqCache, Sequential};
pub use tensor::Tensor;

use crate::{Error, Result};

/// Anything holding an ordered set of parameter tensors. Gradients use the
/// same concrete type as the parameters they refer to.
pub trait ParamSet: Clone {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// self += other * scale, tensor by tensor.
    fn axpy(&mut self, scale: f64, other: &Self) {
        let others = other.tensors();
        for (t, o) in self.tensors_mut().into_iter().zip(others) {
            t.axpy(scale, o);
        }
    }

    fn scale_all(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.scale(s);
        }
    }
}

impl ParamSet for Sequential {
    fn tensors(&self) -> Vec<&Tensor> {
        Sequential::tensors(self)
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        Sequential::tensors_mut(self)
    }
}

/// Mean of k same-shaped tensors. The gradient to each input is dy / k.
pub fn mean_merge(parts: &[&Tensor]) -> Tensor {
    debug_assert!(!parts.is_empty());
    let mut out = parts[0].zeros_like();
    for p in parts {
        out.axpy(1.0, p);
    }
    out.scale(1.0 / parts.len() as f64);
    out
}

/// Split a gradient over a concatenation back into per-part gradients.
pub fn split_concat_grad(dy: &Tensor, part_sizes: &[usize]) -> Vec<Tensor> {
    debug_assert_eq!(part_sizes.iter().sum::<usize>(), dy.numel());
    let mut out = Vec::with_capacity(part_sizes.len());
    let mut off = 0;
    for &n in part_sizes {
        out.push(Tensor::from_vec(&[n], dy.data()[off..off + n].to_vec()).unwrap());
        off += n;
    }
    out
}

/// Momentum SGD. Velocity is lazily allocated to match the first gradient.
#[derive(Debug, Clone)]
pub struct SgdMomentum {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Option<Vec<Tensor>>,
}

impl SgdMomentum {
    pub fn new(learning_rate: f64, momentum: f64) -> SgdMomentum {
        SgdMomentum {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    /// v = momentum * v + g; w = w - lr * v. Consumes and returns the
    /// parameter set so stale copies held elsewhere are never mutated.
    pub fn step<P: ParamSet>(&mut self, mut params: P, grads: &P) -> Result<P> {
        if !grads.is_finite() {
            return Err(Error::Divergence("non-finite gradient".into()));
        }
        let gts = grads.tensors();
        let velocity = self
            .velocity
            .get_or_insert_with(|| gts.iter().map(|t| t.zeros_like()).collect());
        if velocity.len() != gts.len() {
            return Err(Error::Contract(
                "optimizer state does not match parameter set".into(),
            ));
        }
        for ((w, v), g) in params.tensors_mut().into_iter().zip(velocity).zip(gts) {
            v.scale(self.momentum);
            v.axpy(1.0, g);
            w.axpy(-self.learning_rate, v);
        }
        Ok(params)
    }
}

/// Central finite-difference check of a stack's parameter gradients against
/// backprop, on loss = sum(output). Returns the worst relative error.
pub fn finite_difference_check(seq: &Sequential, input: &Tensor, h: f64) -> Result<f64> {
    let (out, cache) = seq.forward(input)?;
    let mut ones = out.zeros_like();
    for v in ones.data_mut() {
        *v = 1.0;
    }
    let (_, grads) = seq.backward(&cache, &ones)?;

    let mut worst = 0.0f64;
    let mut probe = seq.clone();
    let n_tensors = seq.tensors().len();
    for ti in 0..n_tensors {
        for ei in 0..seq.tensors()[ti].numel() {
            let orig = probe.tensors()[ti].data()[ei];
            probe.tensors_mut()[ti].data_mut()[ei] = orig + h;
            let lp: f64 = probe.infer(input)?.data().iter().sum();
            probe.tensors_mut()[ti].data_mut()[ei] = orig - h;
            let lm: f64 = probe.infer(input)?.data().iter().sum();
            probe.tensors_mut()[ti].data_mut()[ei] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.tensors()[ti].data()[ei];
            let denom = an.abs().max(fd.abs()).max(1e-4);
            worst = worst.max((an - fd).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn dense_identity_weights_pass_input_through() {
        let mut w = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            w.data_mut()[i * 3 + i] = 1.0;
        }
        let layer = Layer::Dense {
            weight: w,
            bias: Tensor::zeros(&[3]),
        };
        let x = Tensor::from_vec(&[3], vec![0.5, -2.0, 3.0]).unwrap();
        let (y, _) = layer_forward(&layer, &x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_kernel_conv_annihilates() {
        let layer = Layer::Conv2d {
            weight: Tensor::zeros(&[2, 1, 3, 3]),
            bias: Tensor::zeros(&[2]),
            stride: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_input(&[1, 5, 5], &mut rng);
        let (y, _) = layer_forward(&layer, &x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_conv_doubles() {
        let layer = Layer::Conv2d {
            weight: Tensor::from_vec(&[1, 1, 1, 1], vec![2.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
            stride: 1,
        };
        let x = Tensor::from_vec(&[1, 2, 2], vec![1.0, -0.5, 3.0, 0.25]).unwrap();
        let (y, _) = layer_forward(&layer, &x).unwrap();
        // Hand-computed: a 1x1 kernel of value 2 is elementwise doubling.
        assert_eq!(y.data(), &[2.0, -1.0, 6.0, 0.5]);
    }

    #[test]
    fn scalar_linear_gradient() {
        let layer = Layer::Dense {
            weight: Tensor::from_vec(&[1, 1], vec![4.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
        };
        let x = Tensor::from_vec(&[1], vec![3.0]).unwrap();
        let (_, cache) = layer_forward(&layer, &x).unwrap();
        let (dx, grad) = layer_backward(&layer, &cache, &Tensor::scalar(1.0)).unwrap();
        match grad {
            Layer::Dense { weight, .. } => assert_eq!(weight.data(), &[3.0]),
            _ => unreachable!(),
        }
        assert_eq!(dx.data(), &[4.0]);
    }

    #[test]
    fn zero_output_gradient_gives_zero_param_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = Sequential::new(vec![
            Layer::dense(4, 3, &mut rng),
            Layer::Relu,
            Layer::dense(3, 2, &mut rng),
        ]);
        let x = random_input(&[4], &mut rng);
        let (y, cache) = seq.forward(&x).unwrap();
        let (_, grads) = seq.backward(&cache, &y.zeros_like()).unwrap();
        for t in grads.tensors() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn finite_difference_all_layer_kinds() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = Sequential::new(vec![
                Layer::conv2d(2, 3, 3, 2, &mut rng),
                Layer::Relu,
                Layer::MaxPool { size: 2, stride: 2 },
                Layer::Flatten,
                Layer::dense(12, 5, &mut rng),
                Layer::Relu,
                Layer::dense(5, 1, &mut rng),
            ]);
            let x = random_input(&[2, 9, 9], &mut rng);
            let err = finite_difference_check(&seq, &x, 1e-5).unwrap();
            assert!(err < 1e-4, "seed {seed}: relative error {err:.2e}");
        }
    }

    #[test]
    fn mean_merge_of_identical_tensors_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_input(&[8], &mut rng);
        let merged = mean_merge(&[&t, &t, &t]);
        for (a, b) in merged.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_zero_learning_rate_keeps_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = Sequential::new(vec![Layer::dense(3, 3, &mut rng)]);
        let grads = {
            let mut g = seq.zeros_like();
            for t in g.tensors_mut() {
                for v in t.data_mut() {
                    *v = 1.0;
                }
            }
            g
        };
        let mut opt = SgdMomentum::new(0.0, 0.9);
        let updated = opt.step(seq.clone(), &grads).unwrap();
        assert_eq!(updated, seq);
    }

    #[test]
    fn sgd_single_weight_arithmetic() {
        let seq = Sequential::new(vec![Layer::Dense {
            weight: Tensor::from_vec(&[1, 1], vec![1.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
        }]);
        let grads = Sequential::new(vec![Layer::Dense {
            weight: Tensor::from_vec(&[1, 1], vec![2.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
        }]);
        let mut opt = SgdMomentum::new(0.1, 0.0);
        let updated = opt.step(seq, &grads).unwrap();
        assert!((updated.tensors()[0].data()[0] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn sgd_non_finite_gradient_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = Sequential::new(vec![Layer::dense(2, 2, &mut rng)]);
        let mut grads = seq.zeros_like();
        grads.tensors_mut()[0].data_mut()[0] = f64::NAN;
        let mut opt = SgdMomentum::new(0.1, 0.9);
        assert!(matches!(
            opt.step(seq, &grads),
            Err(crate::Error::Divergence(_))
        ));
    }

    #[test]
    fn sgd_descends_a_convex_quadratic() {
        // Loss 0.5 * (w x - t)^2 on fixed (x, t): momentum SGD drives it down.
        let seq = Sequential::new(vec![Layer::Dense {
            weight: Tensor::from_vec(&[1, 1], vec![5.0]).unwrap(),
            bias: Tensor::zeros(&[1]),
        }]);
        let x = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        let target = 2.0;
        let mut opt = SgdMomentum::new(0.05, 0.9);
        let mut params = seq;
        let mut losses = Vec::new();
        for _ in 0..200 {
            let (y, cache) = params.forward(&x).unwrap();
            let resid = y.item() - target;
            losses.push(0.5 * resid * resid);
            let (_, grads) = params
                .backward(&cache, &Tensor::scalar(resid))
                .unwrap();
            params = opt.step(params, &grads).unwrap();
        }
        // Heavy-ball convergence is oscillatory (complex eigenvalues at this
        // lr/momentum), so check the envelope, not per-step monotonicity.
        assert!(losses[199] < 1e-6, "final loss {}", losses[199]);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        assert!(mean(&losses[150..]) < 1e-3 * mean(&losses[..50]));
    }

    #[test]
    fn forward_shape_mismatch_names_the_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let seq = Sequential::new(vec![Layer::dense(4, 2, &mut rng)]);
        let x = random_input(&[5], &mut rng);
        match seq.forward(&x) {
            Err(crate::Error::Shape { layer, .. }) => assert_eq!(layer, "dense"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }
}
