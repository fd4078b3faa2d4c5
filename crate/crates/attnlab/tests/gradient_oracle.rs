//! Every differentiable primitive against the central finite-difference
//! oracle: 20 random instances per op, relative error at most 1e-4.

use attnlab::rng;
use attnlab::tape::{finite_difference_gradient, NodeId, Tape};
use attnlab::tensor::Tensor;
use attnlab::Result;

const SEEDS: u64 = 20;
const STEP: f64 = 1e-5;

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4) <= 1e-4
}

/// Random values in [lo, hi].
fn draw(shape: &[usize], lo: f64, hi: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let numel = shape.iter().product();
    let values = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), values).unwrap()
}

/// Check one op: loss = Σ (op(inputs) ⊙ probe) with a fixed random probe,
/// so every output entry contributes its own cotangent.
fn check_op(
    name: &str,
    input_shapes: &[(&[usize], f64, f64)],
    build: impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) {
    for seed in 0..SEEDS {
        let mut rng = rng::stream(seed, name, 0);
        let inputs: Vec<Tensor> = input_shapes
            .iter()
            .map(|(shape, lo, hi)| draw(shape, *lo, *hi, &mut rng))
            .collect();
        let probe_template = {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &ids).unwrap();
            draw(tape.value(out).shape(), -1.0, 1.0, &mut rng)
        };

        let run = |inputs: &[Tensor]| -> (Tape, Vec<NodeId>, NodeId) {
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let out = build(&mut tape, &ids).unwrap();
            let probe = tape.constant(probe_template.clone());
            let prod = tape.mul(out, probe).unwrap();
            let loss = tape.sum(prod);
            (tape, ids, loss)
        };

        let (tape, ids, loss) = run(&inputs);
        let grads = tape.backward(loss).unwrap();
        for (which, id) in ids.iter().enumerate() {
            let analytic = grads.wrt(&tape, *id);
            let fd = finite_difference_gradient(
                |x| {
                    let mut probe_inputs = inputs.clone();
                    probe_inputs[which] = x.clone();
                    let (t, _, l) = run(&probe_inputs);
                    t.value(l).item()
                },
                &inputs[which],
                STEP,
            )
            .unwrap();
            for (i, (a, f)) in analytic.values().iter().zip(fd.values()).enumerate() {
                assert!(
                    rel_close(*a, *f),
                    "{name}: seed {seed}, input {which}, element {i}: analytic {a} vs fd {f}"
                );
            }
        }
    }
}

#[test]
fn add_sub_mul() {
    check_op("add", &[(&[3, 4], -2.0, 2.0), (&[3, 4], -2.0, 2.0)], |t, ids| t.add(ids[0], ids[1]));
    check_op("sub", &[(&[3, 4], -2.0, 2.0), (&[3, 4], -2.0, 2.0)], |t, ids| t.sub(ids[0], ids[1]));
    check_op("mul", &[(&[3, 4], -2.0, 2.0), (&[3, 4], -2.0, 2.0)], |t, ids| t.mul(ids[0], ids[1]));
}

#[test]
fn scale_and_shift() {
    check_op("scale", &[(&[2, 5], -2.0, 2.0)], |t, ids| Ok(t.scale(ids[0], -1.7)));
    check_op("add_scalar", &[(&[2, 5], -2.0, 2.0)], |t, ids| Ok(t.add_scalar(ids[0], 0.9)));
}

#[test]
fn add_row_broadcast() {
    check_op("add_row", &[(&[4, 3], -2.0, 2.0), (&[3], -2.0, 2.0)], |t, ids| t.add_row(ids[0], ids[1]));
}

#[test]
fn matmul_both_operands() {
    check_op("matmul", &[(&[3, 4], -2.0, 2.0), (&[4, 2], -2.0, 2.0)], |t, ids| {
        t.matmul(ids[0], ids[1])
    });
}

#[test]
fn transpose_reshape_concat_slice() {
    check_op("transpose", &[(&[3, 5], -2.0, 2.0)], |t, ids| t.transpose(ids[0]));
    check_op("reshape", &[(&[3, 4], -2.0, 2.0)], |t, ids| t.reshape(ids[0], vec![2, 6]));
    check_op("concat_rows", &[(&[2, 3], -2.0, 2.0), (&[4, 3], -2.0, 2.0)], |t, ids| {
        t.concat(&[ids[0], ids[1]], 0)
    });
    check_op("concat_cols", &[(&[2, 3], -2.0, 2.0), (&[2, 2], -2.0, 2.0)], |t, ids| {
        t.concat(&[ids[0], ids[1]], 1)
    });
    check_op("slice", &[(&[2, 4, 4], -2.0, 2.0)], |t, ids| t.slice(ids[0], &[1, 1, 0], &[1, 2, 3]));
}

#[test]
fn write_box_both_operands() {
    check_op("write_box", &[(&[2, 4, 4], -2.0, 2.0), (&[2, 2, 2], -2.0, 2.0)], |t, ids| {
        t.write_box(ids[0], ids[1], &[0, 1, 2])
    });
}

#[test]
fn reductions() {
    check_op("sum", &[(&[3, 4], -2.0, 2.0)], |t, ids| Ok(t.sum(ids[0])));
    check_op("mean", &[(&[3, 4], -2.0, 2.0)], |t, ids| Ok(t.mean(ids[0])));
    check_op("sum_last_dim", &[(&[3, 4], -2.0, 2.0)], |t, ids| Ok(t.sum_last_dim(ids[0])));
}

#[test]
fn pointwise_nonlinear() {
    check_op("log", &[(&[3, 4], 0.3, 2.0)], |t, ids| Ok(t.log(ids[0])));
    check_op("exp", &[(&[3, 4], -2.0, 2.0)], |t, ids| Ok(t.exp(ids[0])));
    check_op("sqrt", &[(&[3, 4], 0.3, 2.0)], |t, ids| Ok(t.sqrt(ids[0])));
    check_op("gelu", &[(&[3, 4], -2.0, 2.0)], |t, ids| Ok(t.gelu(ids[0])));
}

#[test]
fn div_by_scalar_node() {
    check_op("div_scalar", &[(&[3, 4], -2.0, 2.0), (&[1], 0.5, 2.0)], |t, ids| {
        t.div_scalar(ids[0], ids[1])
    });
}

#[test]
fn softmax_and_layernorm() {
    check_op("softmax_lastdim", &[(&[3, 5], -2.0, 2.0)], |t, ids| Ok(t.softmax_lastdim(ids[0])));
    check_op(
        "layernorm",
        &[(&[3, 6], -2.0, 2.0), (&[6], 0.5, 1.5), (&[6], -0.5, 0.5)],
        |t, ids| t.layernorm(ids[0], ids[1], ids[2], 1e-5),
    );
}

#[test]
fn detach_stops_gradient_and_passes_value() {
    // value path: identity; gradient path: zero
    for seed in 0..SEEDS {
        let mut rng = rng::stream(seed, "detach", 0);
        let x = draw(&[3, 3], -2.0, 2.0, &mut rng);
        let y = draw(&[3, 3], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let xid = tape.leaf(x);
        let yid = tape.leaf(y.clone());
        let xd = tape.detach(xid);
        let prod = tape.mul(xd, yid).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(&tape, xid).values().iter().all(|&g| g == 0.0));
        assert_eq!(grads.wrt(&tape, yid).values(), tape.value(xd).values());
    }
}
