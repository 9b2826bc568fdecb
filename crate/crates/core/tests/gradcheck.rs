//! Central-difference verification of every tape primitive and of the
//! full BPTT graph, against the f64 finite-difference oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rtify_core::backbone::{LogitPool, RnnParams};
use rtify_core::diffcore::{Array, Tape, Var};
use rtify_core::reference::finite_diff_check;

const EPS: f64 = 1e-3;
const TOL: f64 = 1e-3;

/// Random values in [lo, hi], reproducible.
fn randoms(n: usize, lo: f32, hi: f32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| lo + (hi - lo) * rng.random::<f32>()).collect()
}

/// Checks d(loss)/d(input) for a graph built by `build`, where the loss is
/// a fixed random weighting of the graph output (so every output element
/// contributes with its own sign).
fn check_graph(
    name: &str,
    input: &[f32],
    input_shape: Vec<usize>,
    build: impl Fn(&mut Tape, Var) -> Var,
) {
    let weights = randoms(
        {
            // probe output size once
            let mut t = Tape::new();
            let x = t.leaf(Array::new(input_shape.clone(), input.to_vec()).unwrap(), true);
            let out = build(&mut t, x);
            t.value(out).numel()
        },
        -1.0,
        1.0,
        0xC0FFEE,
    );
    let forward = |x: &[f32]| -> (f64, Option<Vec<f32>>, bool) {
        let mut t = Tape::new();
        let leaf = t.leaf(Array::new(input_shape.clone(), x.to_vec()).unwrap(), true);
        let out = build(&mut t, leaf);
        let shape = t.value(out).shape().to_vec();
        let w = t.constant(Array::new(shape, weights.clone()).unwrap());
        let prod = t.mul(out, w).unwrap();
        let loss = t.sum(prod).unwrap();
        (t.value(loss).item() as f64, None, false)
    };

    // analytic gradients at the base point
    let analytic = {
        let mut t = Tape::new();
        let leaf = t.leaf(Array::new(input_shape.clone(), input.to_vec()).unwrap(), true);
        let out = build(&mut t, leaf);
        let shape = t.value(out).shape().to_vec();
        let w = t.constant(Array::new(shape, weights.clone()).unwrap());
        let prod = t.mul(out, w).unwrap();
        let loss = t.sum(prod).unwrap();
        let grads = t.backward(loss).unwrap();
        grads.expect(leaf).data().to_vec()
    };

    let mut f = |x: &[f32]| forward(x).0;
    let report = finite_diff_check(&mut f, input, &analytic, EPS).unwrap();
    assert!(
        report.max_rel_err <= TOL,
        "{name}: rel err {} at coord {} (analytic {}, numeric {})",
        report.max_rel_err,
        report.worst_index,
        report.worst_analytic,
        report.worst_numeric
    );
}

#[test]
fn elementwise_binary_ops() {
    let a = randoms(6, -2.0, 2.0, 1);
    let b = randoms(6, 0.5, 2.0, 2); // denominator kept away from zero
    for (name, op) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("div", 3),
    ] {
        let bc = b.clone();
        check_graph(name, &a, vec![6], move |t, x| {
            let bv = t.constant(Array::from_vec(bc.clone()));
            match op {
                0 => t.add(x, bv).unwrap(),
                1 => t.sub(x, bv).unwrap(),
                2 => t.mul(x, bv).unwrap(),
                _ => t.div(x, bv).unwrap(),
            }
        });
        // and the other operand
        let ac = a.clone();
        check_graph(&format!("{name}-rhs"), &b, vec![6], move |t, x| {
            let av = t.constant(Array::from_vec(ac.clone()));
            match op {
                0 => t.add(av, x).unwrap(),
                1 => t.sub(av, x).unwrap(),
                2 => t.mul(av, x).unwrap(),
                _ => t.div(av, x).unwrap(),
            }
        });
    }
}

#[test]
fn elementwise_unary_ops() {
    let x = randoms(8, -2.0, 2.0, 3);
    check_graph("neg", &x, vec![8], |t, v| t.neg(v).unwrap());
    check_graph("scale", &x, vec![8], |t, v| t.scale(v, -1.7).unwrap());
    check_graph("offset", &x, vec![8], |t, v| t.offset(v, 0.9).unwrap());
    check_graph("tanh", &x, vec![8], |t, v| t.tanh(v).unwrap());
    check_graph("exp", &x, vec![8], |t, v| t.exp(v).unwrap());

    let pos = randoms(8, 0.2, 2.0, 4);
    check_graph("log", &pos, vec![8], |t, v| t.log(v).unwrap());
    check_graph("sqrt", &pos, vec![8], |t, v| t.sqrt(v).unwrap());

    // keep relu inputs away from the kink
    let mut off_kink = randoms(8, 0.1, 2.0, 5);
    for (i, v) in off_kink.iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    check_graph("relu", &off_kink, vec![8], |t, v| t.relu(v).unwrap());
}

#[test]
fn softmax_and_reductions() {
    let x = randoms(12, -2.0, 2.0, 6);
    check_graph("softmax", &x, vec![3, 4], |t, v| t.softmax(v).unwrap());
    check_graph("log_softmax", &x, vec![3, 4], |t, v| {
        t.log_softmax(v).unwrap()
    });
    check_graph("sum", &x, vec![12], |t, v| t.sum(v).unwrap());
    check_graph("mean", &x, vec![12], |t, v| t.mean(v).unwrap());

    // max away from ties
    let x = vec![0.3f32, -1.0, 1.9, 0.2, -0.4];
    check_graph("max", &x, vec![5], |t, v| t.max(v).unwrap());

    // clamp with every element strictly inside or strictly outside
    let x = vec![-3.0f32, -0.4, 0.2, 0.8, 2.5];
    check_graph("clamp", &x, vec![5], |t, v| t.clamp(v, -1.0, 1.0).unwrap());
}

#[test]
fn structural_ops() {
    let x = randoms(10, -2.0, 2.0, 7);
    check_graph("slice", &x, vec![10], |t, v| {
        t.slice(v, 3, 4, vec![4]).unwrap()
    });
    check_graph("concat", &x, vec![10], |t, v| {
        let head = t.slice(v, 0, 5, vec![5]).unwrap();
        let tail = t.slice(v, 5, 5, vec![5]).unwrap();
        t.concat(&[tail, head]).unwrap()
    });
    let s = randoms(1, -2.0, 2.0, 8);
    check_graph("broadcast", &s, vec![1], |t, v| t.broadcast(v, 7).unwrap());
    let row = randoms(4, -2.0, 2.0, 9);
    check_graph("tile", &row, vec![4], |t, v| t.tile(v, 3).unwrap());
}

#[test]
fn matmul_both_operands() {
    let a = randoms(6, -2.0, 2.0, 10);
    let b = randoms(8, -2.0, 2.0, 11);
    let b2 = b.clone();
    check_graph("matmul-lhs", &a, vec![3, 2], move |t, x| {
        let bv = t.constant(Array::new(vec![2, 4], b2.clone()).unwrap());
        t.matmul(x, bv).unwrap()
    });
    let a2 = a.clone();
    check_graph("matmul-rhs", &b, vec![2, 4], move |t, x| {
        let av = t.constant(Array::new(vec![3, 2], a2.clone()).unwrap());
        t.matmul(av, x).unwrap()
    });
}

#[test]
fn three_layer_composite() {
    // x -> tanh(x·W1 + b1) -> ·W2 -> log_softmax -> mean, checked w.r.t.
    // all parameters packed into one vector
    let d_in = 4;
    let hidden = 5;
    let classes = 3;
    let x = randoms(2 * d_in, -2.0, 2.0, 12);
    let n_params = d_in * hidden + hidden + hidden * classes;
    let p0 = randoms(n_params, -1.0, 1.0, 13);

    let build = |t: &mut Tape, p: Var| {
        let w1 = t.slice(p, 0, d_in * hidden, vec![d_in, hidden]).unwrap();
        let b1 = t.slice(p, d_in * hidden, hidden, vec![hidden]).unwrap();
        let w2 = t
            .slice(p, d_in * hidden + hidden, hidden * classes, vec![hidden, classes])
            .unwrap();
        let xv = t.constant(Array::new(vec![2, d_in], x.clone()).unwrap());
        let pre = t.matmul(xv, w1).unwrap();
        let b_tile = t.tile(b1, 2).unwrap();
        let pre = t.add(pre, b_tile).unwrap();
        let act = t.tanh(pre).unwrap();
        let logits = t.matmul(act, w2).unwrap();
        t.log_softmax(logits).unwrap()
    };
    check_graph("three-layer", &p0, vec![n_params], build);
}

#[test]
fn bptt_toy_sequence() {
    // 3-step toy: the full recurrent graph against finite differences
    bptt_check(3, 3, 4, 2, 2, LogitPool::Mean, 101);
    bptt_check(3, 3, 4, 2, 2, LogitPool::Final, 102);
}

#[test]
fn bptt_full_graph() {
    // a longer unroll with a larger batch, both pooling modes
    bptt_check(12, 5, 8, 3, 4, LogitPool::Mean, 103);
}

fn bptt_check(
    n_steps: usize,
    d_in: usize,
    k: usize,
    classes: usize,
    batch: usize,
    pool: LogitPool,
    seed: u64,
) {
    let rnn = RnnParams::init(d_in, k, classes, seed);
    let xs = randoms(n_steps * batch * d_in, -1.5, 1.5, seed + 1);
    let labels: Vec<usize> = (0..batch).map(|i| i % classes).collect();

    let sizes = [d_in * k, k * k, k, k * classes, classes];
    let total: usize = sizes.iter().sum();
    let mut flat = Vec::with_capacity(total);
    flat.extend_from_slice(rnn.w_in.data());
    flat.extend_from_slice(rnn.w_rec.data());
    flat.extend_from_slice(rnn.b.data());
    flat.extend_from_slice(rnn.w_out.data());
    flat.extend_from_slice(rnn.b_out.data());

    let eval = |p: &[f32], want_grads: bool| -> (f64, Vec<f32>) {
        let mut off = 0;
        let mut next = |len: usize, shape: Vec<usize>| {
            let arr = Array::new(shape, p[off..off + len].to_vec()).unwrap();
            off += len;
            arr
        };
        let params = RnnParams {
            w_in: next(sizes[0], vec![d_in, k]),
            w_rec: next(sizes[1], vec![k, k]),
            b: next(sizes[2], vec![k]),
            w_out: next(sizes[3], vec![k, classes]),
            b_out: next(sizes[4], vec![classes]),
        };
        let mut tape = Tape::new();
        let leaves = rtify_core::backbone::insert_leaves(&mut tape, &params, true);
        let x = tape.constant(Array::new(vec![n_steps * batch, d_in], xs.clone()).unwrap());
        let logits = rtify_core::backbone::pooled_logits_on_tape(
            &mut tape, &leaves, x, n_steps, batch, d_in, pool,
        )
        .unwrap();
        let loss = rtify_core::backbone::cross_entropy_on_tape(
            &mut tape, logits, &labels,
        )
        .unwrap();
        let loss_val = tape.value(loss).item() as f64;
        if !want_grads {
            return (loss_val, Vec::new());
        }
        let grads = tape.backward(loss).unwrap();
        let mut g = Vec::with_capacity(total);
        for leaf in [leaves.w_in, leaves.w_rec, leaves.b, leaves.w_out, leaves.b_out] {
            g.extend_from_slice(grads.expect(leaf).data());
        }
        (loss_val, g)
    };

    let (_, analytic) = eval(&flat, true);
    let mut f = |p: &[f32]| eval(p, false).0;
    let report = finite_diff_check(&mut f, &flat, &analytic, EPS).unwrap();
    assert!(
        report.max_rel_err <= TOL,
        "bptt {n_steps}x{batch} {pool:?}: rel err {} at coord {}",
        report.max_rel_err,
        report.worst_index
    );
}
