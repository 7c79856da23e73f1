mod common;

use common::Mat;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tssan_core::san::{AttentionTrace, SanBlock, SanConfig};
use tssan_core::Error;
use tssan_tensor::gradcheck::{central_difference, max_relative_error};
use tssan_tensor::{ParamStore, Tape, Tensor};

fn block(layers: usize, heads: usize, width: usize, max_frames: usize, seed: u64) -> (SanBlock, ParamStore) {
    let mut store = ParamStore::new();
    let b = SanBlock::new(
        &mut store,
        "san",
        SanConfig::new(layers, heads, width, max_frames),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap();
    (b, store)
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn set(store: &mut ParamStore, name: &str, value: Tensor) {
    let id = store.find(name).unwrap();
    store.set_value(id, value).unwrap();
}

fn zero(store: &mut ParamStore, name: &str) {
    let id = store.find(name).unwrap();
    let shape = store.value(id).shape().to_vec();
    store.set_value(id, Tensor::zeros(shape)).unwrap();
}

/// Eval-mode block output and per-layer probabilities.
fn run_block(b: &SanBlock, store: &ParamStore, x: &Tensor, frames: usize) -> (Tensor, Vec<Tensor>) {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = b
        .forward(&mut tape, store, v, frames, false, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    let probs = out.probs.iter().map(|&p| tape.value(p).clone()).collect();
    (tape.value(out.output).clone(), probs)
}

fn run_layer(b: &SanBlock, store: &ParamStore, y: &Tensor, frames: usize) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let v = tape.constant(y.clone());
    let (o, p) = b
        .layer_forward(&b.layers[0], &mut tape, store, v, frames, false, &mut ChaCha8Rng::seed_from_u64(0))
        .unwrap();
    (tape.value(o).clone(), tape.value(p).clone())
}

fn run_mha(b: &SanBlock, store: &ParamStore, y: &Tensor, frames: usize) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let v = tape.constant(y.clone());
    let (o, p) = b.multi_head_attention(&b.layers[0], &mut tape, store, v, frames).unwrap();
    (tape.value(o).clone(), tape.value(p).clone())
}

fn permute_rows(x: &Tensor, order: &[usize]) -> Tensor {
    let w = x.shape()[1];
    let data = order.iter().flat_map(|&r| x.data()[r * w..(r + 1) * w].to_vec()).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

fn to_mat(x: &Tensor) -> Mat {
    Mat::new(x.shape()[0], x.shape()[1], x.data().to_vec())
}

#[test]
fn position_embedding_adds_table_rows_per_sequence() {
    let (b, store) = block(1, 2, 4, 6, 1);
    let p = store.value(b.position).clone();
    let x = random(&[2 * 3, 4], 2);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = b.position_embed(&mut tape, &store, v, 3).unwrap();
    let y = tape.value(y);
    for g in 0..2 {
        for t in 0..3 {
            for c in 0..4 {
                let r = g * 3 + t;
                assert_eq!(y.data()[r * 4 + c], x.data()[r * 4 + c] + p.data()[t * 4 + c]);
            }
        }
    }
}

#[test]
fn position_embedding_with_zero_table_is_identity() {
    let (b, mut store) = block(1, 2, 4, 6, 1);
    zero(&mut store, "san.position");
    let x = random(&[5, 4], 3);
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = b.position_embed(&mut tape, &store, v, 5).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn sequences_longer_than_the_table_are_rejected() {
    let (b, store) = block(1, 2, 4, 4, 1);
    let mut tape = Tape::new();
    let v = tape.constant(random(&[5, 4], 1));
    let err = b.position_embed(&mut tape, &store, v, 5).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let err = b.forward(&mut tape, &store, v, 5, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn single_frame_attends_only_to_itself() {
    let (b, store) = block(1, 2, 4, 4, 3);
    let y = random(&[3, 4], 4);
    let (out, probs) = run_mha(&b, &store, &y, 1);
    assert_eq!(probs.shape(), &[3, 2, 1, 1]);
    assert!(probs.data().iter().all(|&p| p == 1.0));
    // With one key, each head returns its value row; the output is the projected value.
    let m = to_mat(&y);
    let v = common::linear(&m, &store, "san.layer0.value");
    let want = common::linear(&v, &store, "san.layer0.output");
    assert!(common::max_abs_diff(out.data(), &want.data) <= 1e-12);
}

#[test]
fn identical_frames_give_uniform_attention() {
    let (b, store) = block(1, 2, 4, 8, 5);
    let row = random(&[1, 4], 6);
    let y = Tensor::new([5, 4], row.data().repeat(5)).unwrap();
    let (out, probs) = run_mha(&b, &store, &y, 5);
    for &p in probs.data() {
        assert!((p - 0.2).abs() <= 1e-12);
    }
    for t in 1..5 {
        assert!(common::max_abs_diff(&out.data()[t * 4..t * 4 + 4], &out.data()[..4]) <= 1e-12);
    }
}

#[test]
fn multi_head_attention_matches_brute_force() {
    let (b, store) = block(1, 2, 4, 3, 7);
    let y = random(&[2 * 3, 4], 8);
    let (out, probs) = run_mha(&b, &store, &y, 3);
    for g in 0..2 {
        let seq = Mat::new(3, 4, y.data()[g * 12..(g + 1) * 12].to_vec());
        let (want, want_p) = common::attention_layer(&seq, &store, "san.layer0", 2);
        assert!(common::max_abs_diff(&out.data()[g * 12..(g + 1) * 12], &want.data) <= 1e-10);
        for (h, p) in want_p.iter().enumerate() {
            let off = (g * 2 + h) * 9;
            assert!(common::max_abs_diff(&probs.data()[off..off + 9], &p.data) <= 1e-12);
        }
    }
}

#[test]
fn layer_with_zero_weights_is_double_normalization() {
    let (b, mut store) = block(1, 2, 4, 4, 9);
    for part in ["query", "key", "value", "output", "ffn_in", "ffn_out"] {
        zero(&mut store, &format!("san.layer0.{part}.weight"));
        zero(&mut store, &format!("san.layer0.{part}.bias"));
    }
    let y = random(&[4, 4], 10);
    let (out, _) = run_layer(&b, &store, &y, 4);
    let (ones, zeros) = (vec![1.0; 4], vec![0.0; 4]);
    let once = common::layer_norm_rows(&to_mat(&y), &ones, &zeros);
    let twice = common::layer_norm_rows(&once, &ones, &zeros);
    assert!(common::max_abs_diff(out.data(), &twice.data) <= 1e-12);
}

#[test]
fn layer_matches_loop_oracle() {
    let (b, store) = block(1, 2, 6, 5, 11);
    let y = random(&[5, 6], 12);
    let (out, _) = run_layer(&b, &store, &y, 5);
    let (want, _) = common::san_layer(&to_mat(&y), &store, "san.layer0", 2);
    assert!(common::max_abs_diff(out.data(), &want.data) <= 1e-10);
}

#[test]
fn layer_input_gradient_matches_finite_differences() {
    let (b, store) = block(1, 2, 4, 3, 13);
    let y = random(&[2 * 3, 4], 14);
    let loss = |yv: &Tensor, tape: &mut Tape| {
        let v = tape.leaf(yv.clone(), true);
        let (o, _) = b
            .layer_forward(&b.layers[0], tape, &store, v, 3, false, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        (v, common::contract(tape, o, 99))
    };
    let mut tape = Tape::new();
    let (v, l) = loss(&y, &mut tape);
    tape.backward(l).unwrap();
    let analytic = tape.grad(v).unwrap().into_data();
    let numeric = central_difference(
        |p| {
            let mut t = Tape::new();
            let (_, l) = loss(&Tensor::new([6, 4], p.to_vec()).unwrap(), &mut t);
            t.value(l).item()
        },
        y.data(),
        1e-5,
    );
    assert!(max_relative_error(&analytic, &numeric, 1e-6) <= 1e-5);
}

#[test]
fn single_frame_block_has_one_output_row() {
    let (b, store) = block(1, 2, 4, 4, 15);
    let (out, probs) = run_block(&b, &store, &random(&[1, 4], 16), 1);
    assert_eq!(out.shape(), &[1, 4]);
    assert_eq!(probs.len(), 1);
    assert_eq!(probs[0].shape(), &[1, 2, 1, 1]);
    assert!(out.data().iter().all(|v| v.is_finite() && *v >= 0.0));
}

#[test]
fn block_matches_composed_oracle() {
    let (b, store) = block(2, 2, 8, 6, 17);
    let x = random(&[2 * 4, 8], 18);
    let (out, probs) = run_block(&b, &store, &x, 4);
    assert_eq!(out.shape(), &[2, 8]);
    for g in 0..2 {
        let seq = Mat::new(4, 8, x.data()[g * 32..(g + 1) * 32].to_vec());
        let (want, traces) = common::san_block(&seq, &store, "san", 2, 2);
        assert!(common::max_abs_diff(&out.data()[g * 8..(g + 1) * 8], &want) <= 1e-9);
        let refs: Vec<&Tensor> = probs.iter().collect();
        let trace = AttentionTrace::from_stacked(&refs, g).unwrap();
        for (l, layer) in traces.iter().enumerate() {
            for (h, p) in layer.iter().enumerate() {
                assert!(common::max_abs_diff(trace.matrix(l, h), &p.data) <= 1e-10);
            }
        }
    }
}

#[test]
fn attention_rows_are_distributions() {
    let (b, store) = block(3, 4, 8, 8, 19);
    let (_, probs) = run_block(&b, &store, &random(&[3 * 7, 8], 20), 7);
    let refs: Vec<&Tensor> = probs.iter().collect();
    for g in 0..3 {
        let trace = AttentionTrace::from_stacked(&refs, g).unwrap();
        assert_eq!(trace.num_layers(), 3);
        for l in 0..3 {
            for h in 0..4 {
                for row in trace.matrix(l, h).chunks(7) {
                    assert!(row.iter().all(|&p| p >= 0.0));
                    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }
    assert!(AttentionTrace::from_stacked(&refs, 3).is_err());
}

#[test]
fn output_is_invariant_to_frame_order_when_positions_move_along() {
    let (b, mut store) = block(2, 2, 4, 5, 21);
    let x = random(&[5, 4], 22);
    let (base, _) = run_block(&b, &store, &x, 5);
    let order = [3, 0, 4, 2, 1];
    let p = store.value(b.position).clone();
    set(&mut store, "san.position", permute_rows(&p, &order));
    let (moved, _) = run_block(&b, &store, &permute_rows(&x, &order), 5);
    assert!(common::max_abs_diff(base.data(), moved.data()) <= 1e-10);
}

#[test]
fn identical_frames_stay_identical_through_every_layer() {
    let (b, mut store) = block(3, 2, 4, 6, 23);
    zero(&mut store, "san.position");
    let row = random(&[1, 4], 24);
    let x = Tensor::new([6, 4], row.data().repeat(6)).unwrap();
    let mut tape = Tape::new();
    let mut z = tape.constant(x);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for layer in &b.layers {
        let (next, p) = b.layer_forward(layer, &mut tape, &store, z, 6, false, &mut rng).unwrap();
        let out = tape.value(next);
        for t in 1..6 {
            assert!(common::max_abs_diff(&out.data()[t * 4..t * 4 + 4], &out.data()[..4]) <= 1e-12);
        }
        assert!(tape.value(p).data().iter().all(|&v| (v - 1.0 / 6.0).abs() <= 1e-12));
        z = next;
    }
}

#[test]
fn two_layer_block_gradients_match_finite_differences() {
    let (b, store) = block(2, 2, 4, 3, 25);
    let x = random(&[2 * 3, 4], 26);
    let (err, worst) = common::param_grad_error(&store, 1e-4, |s, tape| {
        let v = tape.constant(x.clone());
        let out = b.forward(tape, s, v, 3, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        common::contract(tape, out.output, 7)
    });
    assert!(err <= 1e-5, "relative error {err} at {worst}");
}

#[test]
fn training_mode_dropout_changes_output_but_eval_does_not() {
    let (b, store) = block(2, 2, 4, 4, 27);
    let x = random(&[4, 4], 28);
    let eval = |seed| {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let o = b.forward(&mut tape, &store, v, 4, false, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        tape.value(o.output).clone()
    };
    assert_eq!(eval(1), eval(2));
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let o = b.forward(&mut tape, &store, v, 4, true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_ne!(tape.value(o.output), &eval(1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn layer_is_permutation_equivariant(seed in 0u64..10_000) {
        let (b, store) = block(1, 2, 4, 5, 30);
        let y = random(&[5, 4], seed);
        let mut order: Vec<usize> = (0..5).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xabc));
        let (out, probs) = run_layer(&b, &store, &y, 5);
        let (pout, pprobs) = run_layer(&b, &store, &permute_rows(&y, &order), 5);
        prop_assert!(common::max_abs_diff(pout.data(), permute_rows(&out, &order).data()) <= 1e-10);
        for h in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    let a = pprobs.data()[(h * 5 + i) * 5 + j];
                    let e = probs.data()[(h * 5 + order[i]) * 5 + order[j]];
                    prop_assert!((a - e).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn stacked_sequences_do_not_interact(seed in 0u64..10_000, g in 1usize..4) {
        let (b, store) = block(2, 2, 4, 4, 31);
        let x = random(&[g * 3, 4], seed);
        let (out, _) = run_block(&b, &store, &x, 3);
        for i in 0..g {
            let xi = Tensor::new([3, 4], x.data()[i * 12..(i + 1) * 12].to_vec()).unwrap();
            let (oi, _) = run_block(&b, &store, &xi, 3);
            prop_assert!(common::max_abs_diff(&out.data()[i * 4..(i + 1) * 4], oi.data()) <= 1e-12);
        }
    }
}
