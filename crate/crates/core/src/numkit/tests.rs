use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::testutil::{fd_check, triple_loop_matmul, FD_REL_TOL};

fn t2(rows: &[&[f32]]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::new();
    let i = tape.constant(t2(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let b = tape.constant(t2(&[&[3.0, 4.0], &[5.0, 6.0]]));
    let c = tape.matmul(i, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);

    let a = tape.constant(t2(&[&[1.0, 2.0]]));
    let b = tape.constant(t2(&[&[3.0], &[4.0]]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[1, 1]);
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(m, k, n) in &[(5, 7, 3), (1, 1, 1), (16, 9, 33), (4, 64, 2)] {
        let a = Tensor::uniform(&mut rng, &[m, k], -1.0, 1.0);
        let b = Tensor::uniform(&mut rng, &[k, n], -1.0, 1.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        let oracle = triple_loop_matmul(&a, &b);
        // every result entry is bounded by k <= 64 in magnitude; f32
        // accumulation error grows with k
        let tol = if k <= 10 { 1e-6 } else { 1e-5 };
        let err = tape.value(c).max_abs_diff(&oracle);
        assert!(err <= tol, "{m}x{k}x{n}: {err}");
    }
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(TensorError::Dimension { .. })));
}

#[test]
fn elementwise_division_and_broadcast() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![2.0, 4.0]).unwrap());
    let b = tape.constant(Tensor::from_vec(vec![2.0, 2.0]).unwrap());
    let c = tape.elementwise(BinOp::Div, a, Rhs::Tensor(b)).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0]);

    let x = tape.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
    let alpha = tape.constant(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
    let y = tape.elementwise(BinOp::Div, x, Rhs::Along(alpha, 1)).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 1.0, 3.0, 2.0, 5.0, 3.0]);

    let zero = tape.constant(Tensor::from_vec(vec![1.0, 0.0]).unwrap());
    assert!(matches!(
        tape.elementwise(BinOp::Div, x, Rhs::Along(zero, 1)),
        Err(TensorError::DivideByZero { .. })
    ));
    assert!(matches!(
        tape.elementwise(BinOp::Div, x, Rhs::Scalar(0.0)),
        Err(TensorError::DivideByZero { .. })
    ));
}

#[test]
fn elementwise_mul_matches_scalar_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = Tensor::randn(&mut rng, &[4, 4], 1.0);
    let b = Tensor::randn(&mut rng, &[4, 4], 1.0);
    let mut tape = Tape::new();
    let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.mul(va, vb).unwrap();
    for i in 0..16 {
        assert!((tape.value(c).data()[i] - a.data()[i] * b.data()[i]).abs() <= 1e-7);
    }
}

#[test]
fn sum_of_squares_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn constant_loss_gives_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]).unwrap());
    let c = tape.constant(Tensor::from_vec(vec![5.0, 6.0]).unwrap());
    let zero_x = tape.scalar(BinOp::Mul, x, 0.0).unwrap();
    let y = tape.add(zero_x, c).unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::zeros(&[2]));
    assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
}

#[test]
fn nonfinite_construction_rejected() {
    assert!(Tensor::new(&[2], vec![1.0, f32::INFINITY]).is_err());
    assert!(Tensor::new(&[3], vec![1.0, 2.0]).is_err());
}

#[test]
fn softmax_and_silu_fixed_points() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
    let s = tape.softmax(x).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    let z = tape.constant(Tensor::from_vec(vec![0.0]).unwrap());
    let y = tape.silu(z).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0]);

    // max-subtraction keeps large logits finite
    let big = tape.constant(Tensor::new(&[1, 2], vec![1000.0, 1000.0]).unwrap());
    let s = tape.softmax(big).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
}

// ── finite-difference suite: >= 20 random instances per op ────────────

const INSTANCES: u64 = 20;

fn check_op(name: &str, shapes: &[&[usize]], build: impl Fn(&mut Tape, &[Var]) -> Var) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::uniform(&mut rng, s, -1.5, 1.5)).collect();
        let worst = fd_check(&inputs, &build, seed);
        assert!(worst <= FD_REL_TOL, "{name} seed {seed}: relative error {worst}");
    }
}

#[test]
fn grad_matmul_chain() {
    check_op("matmul+add", &[&[3, 4], &[4, 5], &[3, 5]], |t, v| {
        let p = t.matmul(v[0], v[1]).unwrap();
        t.add(p, v[2]).unwrap()
    });
}

#[test]
fn grad_binary_ops() {
    for op in [BinOp::Add, BinOp::Sub, BinOp::Mul] {
        check_op("binary", &[&[3, 4], &[3, 4]], move |t, v| t.binary(op, v[0], v[1]).unwrap());
    }
    check_op("div", &[&[3, 4], &[3, 4]], |t, v| {
        let d = t.exp(v[1]).unwrap();
        t.div(v[0], d).unwrap()
    });
}

#[test]
fn grad_broadcast_ops() {
    for axis in [0usize, 1] {
        let len = if axis == 0 { 3 } else { 4 };
        check_op("mul_along", &[&[3, 4], &[len]], move |t, v| t.along(BinOp::Mul, v[0], v[1], axis).unwrap());
        check_op("div_along", &[&[3, 4], &[len]], move |t, v| {
            let s = t.exp(v[1]).unwrap();
            t.along(BinOp::Div, v[0], s, axis).unwrap()
        });
    }
}

#[test]
fn grad_unary_ops() {
    check_op("exp", &[&[2, 5]], |t, v| t.exp(v[0]).unwrap());
    check_op("silu", &[&[2, 5]], |t, v| t.silu(v[0]).unwrap());
    check_op("softmax", &[&[3, 6]], |t, v| t.softmax(v[0]).unwrap());
    check_op("scalar", &[&[2, 3]], |t, v| {
        let a = t.scalar(BinOp::Mul, v[0], 1.7).unwrap();
        t.scalar(BinOp::Div, a, 0.3).unwrap()
    });
}

#[test]
fn grad_rmsnorm() {
    check_op("rmsnorm", &[&[4, 6], &[6]], |t, v| t.rmsnorm(v[0], v[1], 1e-5).unwrap());
}

#[test]
fn grad_slice_concat() {
    check_op("slice+concat", &[&[3, 5], &[3, 2]], |t, v| {
        let s = t.slice_cols(v[0], 1, 4).unwrap();
        t.concat_cols(s, v[1]).unwrap()
    });
}

#[test]
fn grad_rope() {
    let table = Rc::new(RopeTable::new(3, 4, 10000.0));
    check_op("rope", &[&[6, 8]], move |t, v| t.rope(v[0], &table, 2).unwrap());
}

#[test]
fn grad_attention() {
    let layout = AttnLayout {
        n_seqs: 2,
        seq_len: 3,
        n_heads: 2,
    };
    check_op("attention", &[&[6, 4], &[6, 4], &[6, 4]], move |t, v| {
        t.causal_attention(v[0], v[1], v[2], layout).unwrap()
    });
}

#[test]
fn grad_cross_entropy_and_embedding() {
    check_op("embedding+ce", &[&[5, 3], &[3, 5]], |t, v| {
        let e = t.embedding(v[0], &[4, 0, 2, 2]).unwrap();
        let logits = t.matmul(e, v[1]).unwrap();
        t.cross_entropy(logits, &[1, 3, 0, 4]).unwrap()
    });
}

#[test]
fn attention_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layout = AttnLayout {
        n_seqs: 1,
        seq_len: 4,
        n_heads: 1,
    };
    let q = Tensor::randn(&mut rng, &[4, 2], 1.0);
    let k = Tensor::randn(&mut rng, &[4, 2], 1.0);
    let v = Tensor::randn(&mut rng, &[4, 2], 1.0);
    let run = |v: Tensor| {
        let mut tape = Tape::new();
        let (a, b, c) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v));
        let o = tape.causal_attention(a, b, c, layout).unwrap();
        tape.value(o).clone()
    };
    let base = run(v.clone());
    let mut changed = v.clone();
    changed.data_mut()[6] += 3.0; // last position only
    let after = run(changed);
    assert_eq!(&base.data()[..6], &after.data()[..6]);
    assert_ne!(&base.data()[6..], &after.data()[6..]);
    // first position attends only to itself
    assert_eq!(&base.data()[..2], &v.data()[..2]);
}

#[test]
fn straight_through_masks_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::from_vec(vec![1.0, 2.0, 3.0]).unwrap());
    let y = tape
        .straight_through(x, Tensor::from_vec(vec![0.0, 0.0, 0.0]).unwrap(), vec![true, false, true])
        .unwrap();
    let loss = tape.sum(y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 0.0, 1.0]);
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&mut rng, &[33, 17], 1.0);
        let b = Tensor::randn(&mut rng, &[17, 29], 1.0);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(a), tape.param(b));
        let c = tape.matmul(va, vb).unwrap();
        let s = tape.softmax(c).unwrap();
        let loss = tape.sum(s).unwrap();
        let sq = tape.mul(c, c).unwrap();
        let l2 = tape.sum(sq).unwrap();
        let total = tape.add(loss, l2).unwrap();
        tape.backward(total).unwrap();
        (tape.value(c).clone(), tape.grad(va).unwrap().clone())
    };
    let (c1, g1) = run();
    let (c2, g2) = run();
    assert_eq!(c1.data(), c2.data());
    assert_eq!(g1.data(), g2.data());
}
