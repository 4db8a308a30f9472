use flowcritic::gradcheck::grad_check;
use flowcritic::graph::{Graph, NodeId, ParamStore};
use flowcritic::Tensor;
use proptest::prelude::*;

const TOL: f64 = 1e-4;
const EPS: f64 = 1e-6;

/// Checks d/dx of `sum(w ⊙ op(x))` for a fixed weight pattern `w`, so that
/// every output element contributes a distinct coefficient.
fn check_unary(rows: usize, cols: usize, data: Vec<f64>, op: impl Fn(&mut Graph<f64>, NodeId) -> NodeId) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.input("x");
    let y = op(&mut g, x);
    let w = g.input_no_grad("w");
    let wy = g.mul(y, w);
    let loss = g.sum(wy);
    let params = ParamStore::new();
    let point = Tensor::from_rows(rows, cols, data).unwrap();
    let f = |p: &Tensor<f64>| {
        let out_shape = {
            let acts = g.evaluate(&params, &[("x", p), ("w", &Tensor::scalar(1.0))]).unwrap();
            acts.value(y).shape().to_vec()
        };
        let n: usize = out_shape.iter().product();
        let wt = Tensor::new(out_shape, (0..n).map(|i| 0.5 + 0.37 * ((i * 7) % 5) as f64).collect()).unwrap();
        let acts = g.evaluate(&params, &[("x", p), ("w", &wt)])?;
        let grads = g.backward(&acts, loss)?;
        Ok((acts.value(loss).item(), grads.input("x").unwrap().clone()))
    };
    grad_check(f, &point, EPS).unwrap()
}

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, rows * cols)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_ops(data in matrix(3, 4, -2.0, 2.0)) {
        type Build = fn(&mut Graph<f64>, NodeId) -> NodeId;
        let ops: [(&str, Build); 8] = [
            ("tanh", |g, x| g.tanh(x)),
            ("sigmoid", |g, x| g.sigmoid(x)),
            ("exp", |g, x| g.exp(x)),
            ("softplus", |g, x| g.softplus(x)),
            ("neg", |g, x| g.neg(x)),
            ("scale", |g, x| g.scale(x, -1.7)),
            ("add_scalar", |g, x| g.add_scalar(x, 0.3)),
            ("square", |g, x| g.mul(x, x)),
        ];
        for (name, op) in ops {
            let err = check_unary(3, 4, data.clone(), op);
            prop_assert!(err < TOL, "{name}: {err}");
        }
    }

    #[test]
    fn leaky_relu_away_from_kink(data in matrix(3, 4, 0.05, 2.0), neg in any::<[bool; 12]>()) {
        let data: Vec<f64> = data.iter().zip(neg).map(|(&v, n)| if n { -v } else { v }).collect();
        let err = check_unary(3, 4, data, |g, x| g.leaky_relu(x, 0.2));
        prop_assert!(err < TOL);
    }

    #[test]
    fn log_on_positive(data in matrix(2, 3, 0.2, 3.0)) {
        prop_assert!(check_unary(2, 3, data, |g, x| g.log(x)) < TOL);
    }

    #[test]
    fn reductions_and_slices(data in matrix(4, 5, -2.0, 2.0)) {
        type Build = fn(&mut Graph<f64>, NodeId) -> NodeId;
        let ops: [(&str, Build); 6] = [
            ("sum_cols", |g, x| g.sum_cols(x)),
            ("mean_rows", |g, x| g.mean_rows(x)),
            ("mean", |g, x| g.mean(x)),
            ("slice", |g, x| g.slice_cols(x, 1, 4)),
            ("concat", |g, x| { let a = g.slice_cols(x, 3, 5); let b = g.tanh(x); g.concat_cols(&[a, b]) }),
            ("sub_row_broadcast", |g, x| { let m = g.mean_rows(x); g.sub(x, m) }),
        ];
        for (name, op) in ops {
            let err = check_unary(4, 5, data.clone(), op);
            prop_assert!(err < TOL, "{name}: {err}");
        }
    }

    #[test]
    fn matmul_and_affine(a in matrix(3, 4, -1.5, 1.5), w in matrix(4, 2, -1.5, 1.5), b in matrix(1, 2, -1.0, 1.0)) {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let wn = g.param("w");
        let bn = g.param("b");
        let y = g.affine(x, wn, bn);
        let t = g.tanh(y);
        let z = g.matmul(x, wn);
        let both = g.concat_cols(&[t, z]);
        let loss = g.sum(both);
        let mut params = ParamStore::new();
        params.insert("w".to_string(), Tensor::from_rows(4, 2, w).unwrap());
        params.insert("b".to_string(), Tensor::from_rows(1, 2, b).unwrap());
        let xt = Tensor::from_rows(3, 4, a).unwrap();

        let fx = |p: &Tensor<f64>| {
            let acts = g.evaluate(&params, &[("x", p)])?;
            let grads = g.backward(&acts, loss)?;
            Ok((acts.value(loss).item(), grads.input("x").unwrap().clone()))
        };
        prop_assert!(grad_check(fx, &xt, EPS).unwrap() < TOL);

        let fw = |p: &Tensor<f64>| {
            let mut ps = params.clone();
            ps.insert("w".to_string(), p.clone());
            let acts = g.evaluate(&ps, &[("x", &xt)])?;
            let grads = g.backward(&acts, loss)?;
            Ok((acts.value(loss).item(), grads.param("w").unwrap().clone()))
        };
        prop_assert!(grad_check(fw, &params["w"], EPS).unwrap() < TOL);
    }

    #[test]
    fn conv3x3_gradients(img in matrix(2, 12, -1.0, 1.0), k in matrix(2, 9, -1.0, 1.0)) {
        let mut g = Graph::<f64>::new();
        let x = g.input("x");
        let kn = g.param("k");
        let bn = g.param("b");
        let y = g.conv3x3(x, kn, bn, 3, 4);
        let t = g.tanh(y);
        let loss = g.sum(t);
        let mut params = ParamStore::new();
        params.insert("k".to_string(), Tensor::from_rows(2, 9, k).unwrap());
        params.insert("b".to_string(), Tensor::from_rows(1, 2, vec![0.1, -0.2]).unwrap());
        let xt = Tensor::from_rows(2, 12, img).unwrap();
        let fx = |p: &Tensor<f64>| {
            let acts = g.evaluate(&params, &[("x", p)])?;
            let grads = g.backward(&acts, loss)?;
            Ok((acts.value(loss).item(), grads.input("x").unwrap().clone()))
        };
        prop_assert!(grad_check(fx, &xt, EPS).unwrap() < TOL);
        let fk = |p: &Tensor<f64>| {
            let mut ps = params.clone();
            ps.insert("k".to_string(), p.clone());
            let acts = g.evaluate(&ps, &[("x", &xt)])?;
            let grads = g.backward(&acts, loss)?;
            Ok((acts.value(loss).item(), grads.param("k").unwrap().clone()))
        };
        prop_assert!(grad_check(fk, &params["k"], EPS).unwrap() < TOL);
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let (n, k, m) = (5, 7, 3);
    let a: Vec<f64> = (0..n * k).map(|i| ((i * 37) % 11) as f64 / 3.0 - 1.5).collect();
    let b: Vec<f64> = (0..k * m).map(|i| ((i * 13) % 7) as f64 / 2.0 - 1.0).collect();
    let mut g = Graph::<f64>::new();
    let an = g.input("a");
    let bn = g.input("b");
    let c = g.matmul(an, bn);
    let at = Tensor::from_rows(n, k, a.clone()).unwrap();
    let bt = Tensor::from_rows(k, m, b.clone()).unwrap();
    let acts = g.evaluate(&ParamStore::new(), &[("a", &at), ("b", &bt)]).unwrap();
    let got = acts.value(c);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i * k + l] * b[l * m + j];
            }
            assert!((got.get2(i, j) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn conv3x3_matches_direct_loops() {
    let (h, w) = (4, 5);
    let img: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.7).sin()).collect();
    let ker: Vec<f64> = (0..9).map(|i| (i as f64 - 4.0) / 4.0).collect();
    let mut g = Graph::<f64>::new();
    let x = g.input("x");
    let k = g.input("k");
    let b = g.input("b");
    let y = g.conv3x3(x, k, b, h, w);
    let acts = g
        .evaluate(
            &ParamStore::new(),
            &[
                ("x", &Tensor::from_rows(1, h * w, img.clone()).unwrap()),
                ("k", &Tensor::from_rows(1, 9, ker.clone()).unwrap()),
                ("b", &Tensor::from_rows(1, 1, vec![0.25]).unwrap()),
            ],
        )
        .unwrap();
    let out = acts.value(y);
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut s = 0.25;
            for dr in -1..=1isize {
                for dc in -1..=1isize {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && rr < h as isize && cc < w as isize {
                        s += ker[((dr + 1) * 3 + dc + 1) as usize] * img[(rr * w as isize + cc) as usize];
                    }
                }
            }
            assert!((out.get2(0, (r * w as isize + c) as usize) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn reused_node_accumulates_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.input("x");
    let a = g.mul(x, x);
    let b = g.mul(a, x);
    let loss = g.sum(b);
    let acts = g.evaluate(&ParamStore::new(), &[("x", &Tensor::row(vec![2.0, -3.0]))]).unwrap();
    let grads = g.backward(&acts, loss).unwrap();
    assert_eq!(grads.input("x").unwrap().data(), &[12.0, 27.0]);
}
