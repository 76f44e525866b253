use lt_autodiff::gradcheck::{numeric_gradient, relative_error, FD_STEP};
use lt_autodiff::{Graph, ParamSet, Tensor, Var};
use proptest::prelude::*;

fn build(p: &ParamSet, g: &mut Graph) -> (Var, Var) {
    let b = g.bind(p);
    let w = b[lt_autodiff::ParamId(0)];
    let x = b[lt_autodiff::ParamId(1)];
    let h = g.matmul(w, x).unwrap();
    let s = g.sigmoid(h);
    let t = g.tanh(h);
    let st = g.mul(s, t).unwrap();
    let f = g.sum(st);
    let sq = g.square(x);
    let sp = g.softplus(sq);
    let gsum = g.mean(sp).unwrap();
    (f, gsum)
}

fn params(w: Vec<f64>, x: Vec<f64>) -> ParamSet {
    let mut p = ParamSet::new();
    p.add("w", Tensor::new(vec![3, 4], w).unwrap());
    p.add("x", Tensor::vector(x));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn backward_is_linear(
        w in prop::collection::vec(-1.0f64..1.0, 12),
        x in prop::collection::vec(-1.0f64..1.0, 4),
        a in -3.0f64..3.0,
        c in -3.0f64..3.0,
    ) {
        let mut p = params(w, x);
        let grad_of = |p: &mut ParamSet, coeffs: (f64, f64)| {
            p.zero_grad();
            let mut g = Graph::new();
            let (f, h) = build(p, &mut g);
            let fa = g.scale(f, coeffs.0);
            let hc = g.scale(h, coeffs.1);
            let l = g.add(fa, hc).unwrap();
            g.backward_into(l, p).unwrap();
            p.flat_grads()
        };
        let combined = grad_of(&mut p, (a, c));
        let gf = grad_of(&mut p, (1.0, 0.0));
        let gh = grad_of(&mut p, (0.0, 1.0));
        for i in 0..combined.len() {
            let expect = a * gf[i] + c * gh[i];
            prop_assert!((combined[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn gradients_are_bit_deterministic(
        w in prop::collection::vec(-2.0f64..2.0, 12),
        x in prop::collection::vec(-2.0f64..2.0, 4),
    ) {
        let run = |p: &mut ParamSet| {
            p.zero_grad();
            let mut g = Graph::new();
            let (f, h) = build(p, &mut g);
            let l = g.add(f, h).unwrap();
            g.backward_into(l, p).unwrap();
            p.flat_grads()
        };
        let mut p = params(w, x);
        let a = run(&mut p);
        let b = run(&mut p);
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                        b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn composite_matches_finite_differences(
        w in prop::collection::vec(-1.0f64..1.0, 12),
        x in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let mut p = params(w, x);
        p.zero_grad();
        let mut g = Graph::new();
        let (f, h) = build(&p, &mut g);
        let l = g.add(f, h).unwrap();
        g.backward_into(l, &mut p).unwrap();
        let analytic = p.flat_grads();
        let numeric = numeric_gradient(&mut p, FD_STEP, |p| {
            let mut g = Graph::new();
            let (f, h) = build(p, &mut g);
            g.scalar(f) + g.scalar(h)
        });
        prop_assert!(relative_error(&analytic, &numeric) < 1e-5);
    }
}

#[test]
fn topological_order_and_single_visit() {
    // A diamond: y feeds two branches that rejoin. Each path contributes once.
    let mut g = Graph::new();
    let x = g.leaf(&Tensor::scalar(0.7).with_grad());
    let y = g.exp(x);
    let a = g.scale(y, 2.0);
    let b = g.scale(y, 3.0);
    let s = g.add(a, b).unwrap();
    let grads = g.backward(s).unwrap();
    let expect = 5.0 * 0.7f64.exp();
    assert!((grads.get(x).unwrap()[0] - expect).abs() < 1e-14);
}
