#![allow(clippy::needless_range_loop)]

use proptest::prelude::*;

use affectfuse::gradcheck::relative_error;
use affectfuse::nn::{AttentionMask, MultiHeadAttention};
use affectfuse::tape::{concat_cols, concat_rows};
use affectfuse::{seed, ParamStore, Tape, Tensor, Var};

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;

/// Max relative error between tape gradients and central differences of
/// `sum(w * f(inputs))` for fixed random weights `w`.
fn op_gradcheck(inputs: &[Tensor], f: &dyn for<'t> Fn(&[Var<'t>]) -> Var<'t>) -> f64 {
    let weigh = |vars: &[Var<'_>]| -> f64 {
        let out = f(vars);
        let w: Vec<f64> = (0..out.numel()).map(|i| 0.3 + 0.17 * i as f64).collect();
        out.mul_const(w).unwrap().sum().item()
    };
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.input(t)).collect();
    let out = f(&vars);
    let w: Vec<f64> = (0..out.numel()).map(|i| 0.3 + 0.17 * i as f64).collect();
    let loss = out.mul_const(w).unwrap().sum();
    let grads = tape.gradients(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let eval_at = |delta: f64| {
                let mut shifted: Vec<Tensor> = inputs.to_vec();
                shifted[k].data_mut()[i] += delta;
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = shifted.iter().map(|t| tape.input(t)).collect();
                weigh(&vars)
            };
            let numeric = (eval_at(H) - eval_at(-H)) / (2.0 * H);
            worst = worst.max(relative_error(analytic[i], numeric, FLOOR));
        }
    }
    worst
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
}

fn positive(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(0.2f64..3.0, rows * cols).prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
}

/// Values at least 0.05 away from the ReLU kink.
fn off_kink(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop_oneof![-2.0f64..-0.05, 0.05f64..2.0], rows * cols)
        .prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn binary_ops(dims in (1usize..5, 1usize..5, 1usize..5)) {
        let (m, k, n) = dims;
        let mut rng = seed::stream((m * 100 + k * 10 + n) as u64, "ops");
        let a = affectfuse::params::uniform(&mut rng, [m, k], 2.0);
        let b = affectfuse::params::uniform(&mut rng, [k, n], 2.0);
        let c = affectfuse::params::uniform(&mut rng, [m, k], 2.0);
        let r = affectfuse::params::uniform(&mut rng, [k], 2.0);
        let s = affectfuse::params::uniform(&mut rng, [1], 2.0);
        prop_assert!(op_gradcheck(&[a.clone(), b], &|v| v[0].matmul(&v[1]).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(&[a.clone(), c.clone()], &|v| v[0].add(&v[1]).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(&[a.clone(), c.clone()], &|v| v[0].sub(&v[1]).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(&[a.clone(), c.clone()], &|v| v[0].mul(&v[1]).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(&[a.clone(), r], &|v| v[0].add_row(&v[1]).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(&[a.clone(), s], &|v| v[0].scale_by(&v[1]).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(&[a.clone(), c.clone()], &|v| concat_cols(&[v[0], v[1]]).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(&[a, c], &|v| concat_rows(&[v[0], v[1]]).unwrap()) < 1e-4);
    }

    #[test]
    fn unary_ops(x in matrix(3, 4), p in positive(3, 4), kinkless in off_kink(3, 4)) {
        prop_assert!(op_gradcheck(&[kinkless], &|v| v[0].relu()) < 1e-4);
        prop_assert!(op_gradcheck(std::slice::from_ref(&x), &|v| v[0].gelu()) < 1e-4);
        prop_assert!(op_gradcheck(&[p], &|v| v[0].ln()) < 1e-4);
        prop_assert!(op_gradcheck(std::slice::from_ref(&x), &|v| v[0].softmax().unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(std::slice::from_ref(&x), &|v| v[0].log_softmax().unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(std::slice::from_ref(&x), &|v| v[0].scale(-1.7)) < 1e-4);
        prop_assert!(op_gradcheck(std::slice::from_ref(&x), &|v| v[0].add_const(&[0.5; 12]).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(std::slice::from_ref(&x), &|v| v[0].transpose().unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(std::slice::from_ref(&x), &|v| v[0].reshape([2, 6]).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(std::slice::from_ref(&x), &|v| v[0].slice_cols(1, 2).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(std::slice::from_ref(&x), &|v| v[0].rows(&[2, 0, 2]).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(std::slice::from_ref(&x), &|v| v[0].weighted_row_sum(vec![0.2, -1.0, 0.7]).unwrap()) < 1e-4);
        prop_assert!(op_gradcheck(&[x], &|v| v[0].sum()) < 1e-4);
    }

    #[test]
    fn layer_norm_gradient(x in matrix(3, 5), g in matrix(1, 5), b in matrix(1, 5)) {
        let err = op_gradcheck(&[x, g, b], &|v| {
            let gain = v[1].reshape([5]).unwrap();
            let bias = v[2].reshape([5]).unwrap();
            v[0].layer_norm(&gain, &bias, 1e-12).unwrap()
        });
        prop_assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(x in matrix(4, 6), c in -50.0f64..50.0) {
        let tape = Tape::new();
        let v = tape.input(&x);
        let p = v.softmax().unwrap().value();
        let shifted = v.add_const(&[c; 24]).unwrap().softmax().unwrap().value();
        for r in 0..4 {
            let row = &p[r * 6..(r + 1) * 6];
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&q| q > 0.0 && q < 1.0));
        }
        for (a, b) in p.iter().zip(shifted.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn masked_attention_rows(seed_val in 0u64..1000, lq in 1usize..5, lk in 1usize..6, drop in prop::collection::vec(any::<bool>(), 6)) {
        let mut keep: Vec<bool> = drop[..lk].to_vec();
        keep[0] = true;
        let mut rng = seed::stream(seed_val, "attn");
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2, &mut rng).unwrap();
        let tape = Tape::new();
        let q = tape.input(&affectfuse::params::uniform(&mut rng, [lq, 4], 1.0));
        let kv = tape.input(&affectfuse::params::uniform(&mut rng, [lk, 4], 1.0));
        let mask = AttentionMask::from_key_padding(lq, &keep).unwrap();
        let (out, weights) = mha.forward_with_weights(&tape, &store, q, kv, Some(&mask)).unwrap();
        prop_assert_eq!(out.shape(), vec![lq, 4]);
        for w in weights {
            let w = w.value();
            for r in 0..lq {
                let row = &w[r * lk..(r + 1) * lk];
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                for (j, &k) in keep.iter().enumerate() {
                    if !k {
                        prop_assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn finite_inputs_give_finite_gradients(x in prop::collection::vec(-1e3f64..1e3, 12)) {
        let tape = Tape::new();
        let v = tape.input(&Tensor::new([3, 4], x).unwrap());
        let g = tape.input(&Tensor::new([4], vec![1.0; 4]).unwrap());
        let b = tape.input(&Tensor::new([4], vec![0.0; 4]).unwrap());
        let y = v.layer_norm(&g, &b, 1e-12).unwrap().gelu().log_softmax().unwrap().sum();
        prop_assert!(y.item().is_finite());
        let grads = tape.gradients(y).unwrap();
        prop_assert!(grads.wrt(v).unwrap().iter().all(|d| d.is_finite()));
    }
}
