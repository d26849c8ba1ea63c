use super::*;
use crate::binarize::BinarizerParams;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn add_sends_ones_to_both() {
    let mut tape = Tape::<f64>::default();
    let x = tape.input(Tensor::scalar(2.0)).unwrap();
    let y = tape.input(Tensor::scalar(3.0)).unwrap();
    let z = tape.add(x, y).unwrap();
    let g = tape.backward(z).unwrap();
    assert_eq!(g.get(x).unwrap().item(), 1.0);
    assert_eq!(g.get(y).unwrap().item(), 1.0);
}

#[test]
fn rsign_uses_surrogate() {
    let mut tape = Tape::<f64>::default();
    let x = tape.input(t(&[3], &[0.3, -0.5, 2.0])).unwrap();
    let a = tape.constant(Tensor::scalar(1.0)).unwrap();
    let b = tape.constant(Tensor::scalar(0.0)).unwrap();
    let y = tape.rsign(x, a, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, -1.0, 1.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.4, 1.0, 0.0]);
    assert!(g.get(a).is_none());
}

#[test]
fn rsign_param_grads_reach_params() {
    let mut store = ParamStore::<f64>::new();
    let pa = store.add("a", Tensor::scalar(1.0), ParamKind::Scale);
    let pb = store.add("b", Tensor::scalar(0.0), ParamKind::Free);
    let mut tape = Tape::<f64>::default();
    let xs = [0.3, -0.5, 2.0];
    let x = tape.constant(t(&[3], &xs)).unwrap();
    let a = tape.param(&store, pa).unwrap();
    let b = tape.param(&store, pb).unwrap();
    let y = tape.rsign(x, a, b).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    tape.accumulate_into(&mut store, &g).unwrap();
    let (ga, gb) =
        crate::binarize::rsign_param_grads(&[1.0; 3], &xs, BinarizerParams { a: 1.0, b: 0.0 });
    assert_eq!(store.get(pa).grad.item(), ga);
    assert_eq!(store.get(pb).grad.item(), gb);
}

#[test]
fn diamond_graph_matches_finite_differences() {
    // f(x) = sum((x ⊙ x) + 3x) · w, with x feeding both branches
    let x0 = [0.5, -1.25, 2.0, 0.75];
    let w = [1.0, -2.0, 0.5, 3.0];
    let f = |x: &[f64]| -> f64 {
        x.iter()
            .zip(&w)
            .map(|(&v, &wi)| (v * v + 3.0 * v) * wi)
            .sum()
    };
    let mut tape = Tape::<f64>::default();
    let x = tape.input(t(&[4], &x0)).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let lin = tape.scale(x, 3.0).unwrap();
    let s = tape.add(sq, lin).unwrap();
    let loss = tape.dot_const(s, &w).unwrap();
    assert!((tape.value(loss).item() - f(&x0)).abs() < 1e-12);
    let g = tape.backward(loss).unwrap();
    let gx = g.get(x).unwrap();
    let h = 1e-6;
    for i in 0..4 {
        let mut p = x0;
        let mut m = x0;
        p[i] += h;
        m[i] -= h;
        let fd = (f(&p) - f(&m)) / (2.0 * h);
        assert!(
            (gx.data()[i] - fd).abs() < 1e-6,
            "{i}: {} vs {fd}",
            gx.data()[i]
        );
    }
}

#[test]
fn linear_squared_error_closed_form() {
    // L = Σ (x Wᵀ - y)²  →  ∂L/∂W = 2 (xWᵀ - y)ᵀ x
    let xs = [1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
    let ws = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
    let ys = [1.0, 0.0, -1.0, 2.0];
    let mut tape = Tape::<f64>::default();
    let x = tape.constant(t(&[2, 3], &xs)).unwrap();
    let w = tape.input(t(&[2, 3], &ws)).unwrap();
    let y = tape.constant(t(&[2, 2], &ys)).unwrap();
    let p = tape.linear(x, w).unwrap();
    let r = tape.sub(p, y).unwrap();
    let sq = tape.mul(r, r).unwrap();
    let loss = tape.sum(sq).unwrap();
    let res = tape.value(r).clone();
    let g = tape.backward(loss).unwrap();
    let gw = g.get(w).unwrap();
    for o in 0..2 {
        for i in 0..3 {
            let want: f64 = (0..2)
                .map(|n| 2.0 * res.data()[n * 2 + o] * xs[n * 3 + i])
                .sum();
            assert!((gw.data()[o * 3 + i] - want).abs() < 1e-12);
        }
    }
    assert!(g.get(x).is_none());
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::default();
    let x = tape.input(t(&[2], &[1.0, 2.0])).unwrap();
    let y = tape.scale(x, 2.0).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(s)) if s == vec![2]));
}

#[test]
fn sealed_tape_rejects_new_nodes() {
    let mut tape = Tape::<f64>::default();
    let x = tape.input(Tensor::scalar(1.0)).unwrap();
    let y = tape.scale(x, 2.0).unwrap();
    tape.backward(y).unwrap();
    assert!(matches!(tape.scale(x, 2.0), Err(Error::TapeSealed)));
    assert!(matches!(tape.backward(y), Err(Error::TapeSealed)));
}

#[test]
fn frozen_kernel_receives_nothing() {
    let mut store = ParamStore::<f64>::new();
    let k = store.add_frozen("psi", Tensor::full(&[9], 1.0));
    let before = store.fingerprint(k);
    let mut tape = Tape::<f64>::default();
    let x = tape
        .input(Tensor::from_fn(&[4, 2], |i| i as f64 - 3.5))
        .unwrap();
    let kv = tape.param(&store, k).unwrap();
    let y = tape.stencil(x, kv, 2, 2).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert!(g.get(kv).is_none());
    // each token of a 2×2 grid sees all four tokens
    assert!(g.get(x).unwrap().data().iter().all(|&v| v == 4.0));
    tape.accumulate_into(&mut store, &g).unwrap();
    assert!(store.get(k).grad.data().iter().all(|&v| v == 0.0));
    assert_eq!(store.fingerprint(k), before);
}

#[test]
fn hard_binary_linear_rejects_non_signs() {
    let mut tape = Tape::<f64>::default();
    let x = tape.input(t(&[1, 2], &[1.0, 0.5])).unwrap();
    let w = tape.input(t(&[1, 2], &[0.2, -0.4])).unwrap();
    assert!(matches!(
        tape.binary_linear(x, w),
        Err(Error::NotSign { index: 1, .. })
    ));
}

#[test]
fn hard_binary_linear_matches_dense() {
    let mut tape = Tape::<f64>::default();
    let xs = [1.0, -1.0, -1.0, 1.0, 1.0, 1.0];
    let ws = [0.5, -0.25, 1.5, -0.1, 0.2, 0.3];
    let x = tape.input(t(&[2, 3], &xs)).unwrap();
    let w = tape.input(t(&[2, 3], &ws)).unwrap();
    let y = tape.binary_linear(x, w).unwrap();
    let g0 = (0.5 + 0.25 + 1.5) / 3.0;
    let g1 = (0.1 + 0.2 + 0.3) / 3.0;
    // rows: x0·sign(w0) = 1+1-1 = 1, x0·sign(w1) = -1-1-1 = -3
    //       x1·sign(w0) = 1-1+1 = 1, x1·sign(w1) = -1+1+1 = 1
    let want = [g0, -3.0 * g1, g0, g1];
    for (a, b) in tape.value(y).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    // |w| = 1.5 is outside the pass-through window
    let gw = g.get(w).unwrap().data();
    assert_eq!(gw[2], 0.0);
    assert!((gw[0] - g0 * 2.0).abs() < 1e-12);
}

#[test]
fn similarity_and_attention_apply_agree_with_loops() {
    let (heads, tokens, c) = (2, 3, 4);
    let d = c / heads;
    let q: Vec<f64> = (0..tokens * c)
        .map(|i| if (i * 7) % 3 == 0 { 1.0 } else { -1.0 })
        .collect();
    let k: Vec<f64> = (0..tokens * c)
        .map(|i| if (i * 5) % 4 < 2 { 1.0 } else { -1.0 })
        .collect();
    let mut tape = Tape::<f64>::default();
    let qv = tape.input(t(&[tokens, c], &q)).unwrap();
    let kv = tape.input(t(&[tokens, c], &k)).unwrap();
    let sb = tape.similarity_binary(qv, kv, heads, tokens).unwrap();
    let sf = tape.similarity_float(qv, kv, heads, tokens).unwrap();
    assert_eq!(tape.value(sb).data(), tape.value(sf).data());
    for h in 0..heads {
        for i in 0..tokens {
            for j in 0..tokens {
                let want: f64 = (0..d)
                    .map(|e| q[i * c + h * d + e] * k[j * c + h * d + e])
                    .sum();
                assert_eq!(tape.value(sb).data()[(h * tokens + i) * tokens + j], want);
            }
        }
    }
    let o = tape.attn_apply(sb, kv, heads, tokens).unwrap();
    for h in 0..heads {
        for i in 0..tokens {
            for e in 0..d {
                let want: f64 = (0..tokens)
                    .map(|j| {
                        tape.value(sb).data()[(h * tokens + i) * tokens + j] * k[j * c + h * d + e]
                    })
                    .sum();
                assert_eq!(tape.value(o).data()[i * c + h * d + e], want);
            }
        }
    }
}

#[test]
fn relaxed_graph_matches_finite_differences() {
    // softmax → attention binarizer → apply, all smooth in relaxed mode
    let (heads, tokens, c) = (1, 3, 2);
    let q0: Vec<f64> = vec![0.3, -0.2, 0.8, 0.1, -0.5, 0.4];
    let v0: Vec<f64> = vec![0.5, -0.3, 0.2, 0.9, -0.7, 0.1];
    let wts: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
    let run = |q: &[f64]| -> (f64, Vec<f64>) {
        let mut tape = Tape::<f64>::new(BinarizeMode::Relaxed);
        let qv = tape.input(t(&[tokens, c], q)).unwrap();
        let vv = tape.constant(t(&[tokens, c], &v0)).unwrap();
        let a = tape.constant(Tensor::scalar(1.0)).unwrap();
        let b = tape.constant(Tensor::scalar(0.0)).unwrap();
        let s = tape.similarity_float(qv, qv, heads, tokens).unwrap();
        let p = tape.softmax(s, 0.7).unwrap();
        let ab = tape.att_binarize(p, a, b).unwrap();
        let o = tape.attn_apply(ab, vv, heads, tokens).unwrap();
        let loss = tape.dot_const(o, &wts).unwrap();
        let val = tape.value(loss).item();
        let g = tape.backward(loss).unwrap();
        (val, g.get(qv).unwrap().data().to_vec())
    };
    let (_, grad) = run(&q0);
    let h = 1e-6;
    for i in 0..q0.len() {
        let mut p = q0.clone();
        let mut m = q0.clone();
        p[i] += h;
        m[i] -= h;
        let fd = (run(&p).0 - run(&m).0) / (2.0 * h);
        assert!((grad[i] - fd).abs() < 1e-7, "{i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn layer_norm_and_losses_match_finite_differences() {
    let x0: Vec<f64> = vec![0.2, -1.0, 0.7, 1.5, 0.1, -0.3];
    let target = t(&[2, 3], &[0.2, 0.5, 0.3, 0.6, 0.3, 0.1]);
    let run = |x: &[f64]| -> (f64, Vec<f64>) {
        let mut tape = Tape::<f64>::default();
        let xv = tape.input(t(&[2, 3], x)).unwrap();
        let gamma = tape.constant(t(&[3], &[1.0, 0.5, 2.0])).unwrap();
        let beta = tape.constant(t(&[3], &[0.0, 0.1, -0.2])).unwrap();
        let y = tape.layer_norm(xv, gamma, beta, 1e-5).unwrap();
        let ce = tape.cross_entropy(y, &[2, 0]).unwrap();
        let kl = tape.soft_target_kl(y, &target).unwrap();
        let loss = tape.add(ce, kl).unwrap();
        let val = tape.value(loss).item();
        let g = tape.backward(loss).unwrap();
        (val, g.get(xv).unwrap().data().to_vec())
    };
    let (_, grad) = run(&x0);
    let h = 1e-6;
    for i in 0..x0.len() {
        let mut p = x0.clone();
        let mut m = x0.clone();
        p[i] += h;
        m[i] -= h;
        let fd = (run(&p).0 - run(&m).0) / (2.0 * h);
        assert!((grad[i] - fd).abs() < 1e-6, "{i}: {} vs {fd}", grad[i]);
    }
}

#[test]
fn cross_entropy_validates_labels() {
    let mut tape = Tape::<f64>::default();
    let x = tape.input(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
    assert!(matches!(
        tape.cross_entropy(x, &[3]),
        Err(Error::Label {
            label: 3,
            classes: 3
        })
    ));
    assert!(tape.cross_entropy(x, &[0, 1]).is_err());
    let l = tape.cross_entropy(x, &[1]).unwrap();
    assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
}
