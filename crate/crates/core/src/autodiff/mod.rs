//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Provides exactly the layers a small VGG-style classifier and its training
//! losses need: convolution, ReLU, 2×2 max pooling, dense layers,
//! log-softmax, and a handful of elementwise and reduction ops.
//!
//! [`Tensor`]: crate::tensor::Tensor

mod graph;
pub mod kernels;

pub use graph::{Graph, NodeId};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomStream;
    use crate::tensor::Tensor;

    fn rand_tensor(shape: &[usize], rng: &mut RandomStream) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform_range(-1.0, 1.0))
    }

    /// Max relative error between the tape gradient and central differences
    /// for a scalar function of one input tensor.
    fn fd_check(x: &Tensor, f: impl Fn(&mut Graph, NodeId) -> NodeId) -> f64 {
        let mut g = Graph::new();
        let xi = g.param(x.clone());
        let root = f(&mut g, xi);
        g.backward(root).unwrap();
        let analytic = g.grad(xi).unwrap().clone();
        let eval = |t: Tensor| {
            let mut g = Graph::new();
            let xi = g.constant(t);
            let r = f(&mut g, xi);
            g.value(r).item()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let num = (eval(p) - eval(m)) / (2.0 * h);
            let a = analytic.data()[i];
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
        }
        worst
    }

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_with_padding() {
        let mut rng = RandomStream::new(3);
        let input = rand_tensor(&[2, 1, 5, 4], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.data_mut()[4] = 1.0;
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let w = g.constant(k);
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert_eq!(g.value(y), &input);
    }

    #[test]
    fn conv_shape_errors_name_the_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        let err = g.conv2d(x, w, b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channel axis"), "{err}");
        let w = g.constant(Tensor::zeros(&[1, 2, 5, 5]));
        let err = g.conv2d(x, w, b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("height axis"), "{err}");
        let w = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(g.conv2d(x, w, b, 0, 0).is_err());
    }

    #[test]
    fn conv_output_size_formula() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 7, 6]));
        let w = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        // floor((7+2-3)/2)+1 = 4, floor((6+2-3)/2)+1 = 3
        assert_eq!(g.shape(y), &[1, 2, 4, 3]);
    }

    #[test]
    fn relu_values_and_mask() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2, 2], -0.5));
        let y = g.relu(x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        let x = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let err = fd_check(&x, |g, x| {
            let y = g.relu(x).unwrap();
            let sq = g.square(y).unwrap();
            g.sum(sq).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn maxpool_basics() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0, 1.0]);

        let c = g.constant(Tensor::full(&[1, 2, 4, 6], 0.3));
        let p = g.maxpool2(c).unwrap();
        assert_eq!(g.value(p), &Tensor::full(&[1, 2, 2, 3], 0.3));
    }

    #[test]
    fn maxpool_ties_route_to_first_cell() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.maxpool2(x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_sizes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 4]));
        assert!(g.maxpool2(x).unwrap_err().to_string().contains("height"));
        let x = g.constant(Tensor::zeros(&[1, 1, 4, 5]));
        assert!(g.maxpool2(x).unwrap_err().to_string().contains("width"));
    }

    #[test]
    fn dense_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 0.0]);

        let x = g.constant(Tensor::full(&[3, 2], 0.7));
        let w = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::new(vec![2], vec![0.5, -1.5]).unwrap());
        let y = g.dense(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5, 0.5, -1.5]);

        let w = g.constant(Tensor::zeros(&[3, 2]));
        assert!(g.dense(x, w, b).is_err());
    }

    #[test]
    fn dense_weight_gradient_matches_finite_differences() {
        let mut rng = RandomStream::new(11);
        let x = rand_tensor(&[3, 4], &mut rng);
        let b = rand_tensor(&[2], &mut rng);
        let w = rand_tensor(&[4, 2], &mut rng);
        let err = fd_check(&w, |g, w| {
            let xi = g.constant(x.clone());
            let bi = g.constant(b.clone());
            let y = g.dense(xi, w, bi).unwrap();
            g.sum(y).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn log_softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = g.log_softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
        let x = g.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let y = g.log_softmax(x).unwrap();
        assert!(g.value(y).data()[0].abs() < 1e-12);
        assert!(g.value(y).is_finite());

        let one = g.constant(Tensor::zeros(&[2, 1]));
        assert!(g.log_softmax(one).is_err());
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let mut rng = RandomStream::new(5);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[6, 7], |_| rng.uniform_range(-20.0, 20.0)));
        let y = g.log_softmax(x).unwrap();
        for row in g.value(y).data().chunks(7) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut rng = RandomStream::new(2);
        let mut g = Graph::new();
        let x = g.param(rand_tensor(&[2, 3], &mut rng));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &Tensor::full(&[2, 3], 1.0));
    }

    #[test]
    fn backward_of_product() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.param(Tensor::scalar(4.0));
        let z = g.mul(x, y).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 4.0);
        assert_eq!(g.grad(y).unwrap().item(), 3.0);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.square(x).unwrap();
        let z = g.scale(y, 3.0).unwrap();
        g.backward(z).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 24.0);
        g.zero_grad();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut g = Graph::new();
        let x = g.param(Tensor::full(&[2], 1.5));
        // diamond: x feeds both branches, which rejoin.
        let a = g.square(x).unwrap();
        let b = g.exp(x).unwrap();
        let c = g.add(a, b).unwrap();
        let d = g.mul(c, a).unwrap();
        let s = g.sum(d).unwrap();
        let mut visits = vec![0usize; g.len()];
        g.backward_with_hook(s, |id| visits[id.index()] += 1)
            .unwrap();
        assert!(visits.iter().all(|&v| v == 1), "{visits:?}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = RandomStream::new(17);
        let x = Tensor::from_fn(&[2, 3], |_| rng.uniform_range(0.2, 1.0));
        let y = Tensor::from_fn(&[2, 3], |_| rng.uniform_range(-1.0, 1.0));
        let err = fd_check(&x, |g, x| {
            let yc = g.constant(y.clone());
            let m = g.sample_mean(x).unwrap();
            let m = g.clamp_min(m, 1e-8).unwrap();
            let d = g.sub(x, yc).unwrap();
            let r = g.div_sample(d, m).unwrap();
            let e = g.exp(r).unwrap();
            let p = g.mul(e, x).unwrap();
            let q = g.square(p).unwrap();
            let s = g.sum(q).unwrap();
            g.scale(s, 0.3).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn conv_and_pool_gradients_match_finite_differences() {
        let mut rng = RandomStream::new(23);
        let input = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let w = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let b = rand_tensor(&[3], &mut rng);
        let build = |g: &mut Graph, x: NodeId, w: NodeId, b: NodeId| {
            let c = g.conv2d(x, w, b, 1, 1).unwrap();
            let p = g.maxpool2(c).unwrap();
            let f = g.flatten(p).unwrap();
            let l = g.log_softmax(f).unwrap();
            let idx = g.gather(l, &[1, 5]).unwrap();
            g.sum(idx).unwrap()
        };
        let err_in = fd_check(&input, |g, x| {
            let (wi, bi) = (g.constant(w.clone()), g.constant(b.clone()));
            build(g, x, wi, bi)
        });
        let err_w = fd_check(&w, |g, wi| {
            let (x, bi) = (g.constant(input.clone()), g.constant(b.clone()));
            build(g, x, wi, bi)
        });
        let err_b = fd_check(&b, |g, bi| {
            let (x, wi) = (g.constant(input.clone()), g.constant(w.clone()));
            build(g, x, wi, bi)
        });
        assert!(
            err_in < 1e-4 && err_w < 1e-4 && err_b < 1e-4,
            "{err_in} {err_w} {err_b}"
        );
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1], 1000.0));
        assert!(matches!(g.exp(x), Err(crate::Error::NonFinite("exp"))));
    }
}
