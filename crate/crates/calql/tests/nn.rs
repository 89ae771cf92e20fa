use calql::nn::{logsumexp, softmax, Activation, Graph, Mlp, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mse(net: &Mlp, x: &Tensor, y: &Tensor) -> f64 {
    let out = net.forward(x).unwrap();
    out.data.iter().zip(&y.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.data.len() as f64
}

#[test]
fn two_hidden_layer_gradients_match_finite_differences() {
    for (seed, act) in [(0, Activation::Tanh), (1, Activation::Tanh), (2, Activation::Relu)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Mlp::new(&[3, 5, 4, 2], act, &mut rng);
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect());
        let y = Tensor::matrix(4, 2, (0..8).map(|i| (i as f64 * 0.91).cos()).collect());

        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let (out, leaves) = net.forward_on(&mut g, xv).unwrap();
        let yv = g.leaf(y.clone());
        let d = g.sub(out, yv);
        let sq = g.square(d);
        let loss = g.mean(sq);
        let grads = g.backward(loss, None).unwrap();
        let analytic: Vec<Tensor> = leaves.iter().zip(net.params()).map(|(v, p)| grads.get_or_zeros(*v, p)).collect();

        let h = 1e-5;
        for (pi, an) in analytic.iter().enumerate() {
            for j in 0..an.data.len() {
                let orig = net.params()[pi].data[j];
                net.params_mut()[pi].data[j] = orig + h;
                let up = mse(&net, &x, &y);
                net.params_mut()[pi].data[j] = orig - h;
                let down = mse(&net, &x, &y);
                net.params_mut()[pi].data[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (an.data[j] - fd).abs() / an.data[j].abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "param {pi}[{j}]: {} vs {fd}", an.data[j]);
            }
        }
    }
}

proptest! {
    #[test]
    fn logsumexp_matches_naive(v in prop::collection::vec(-30.0f64..30.0, 5)) {
        let naive = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        prop_assert!((logsumexp(&v) - naive).abs() <= 1e-12 * naive.abs().max(1.0));
    }

    #[test]
    fn logsumexp_is_shift_equivariant_and_finite(v in prop::collection::vec(-1e3f64..1e3, 1..8), c in -1e3f64..1e3) {
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        prop_assert!(logsumexp(&v).is_finite());
        prop_assert!((logsumexp(&shifted) - logsumexp(&v) - c).abs() < 1e-9);
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
