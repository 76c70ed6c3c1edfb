//! Every tape op against central differences on random inputs in [-2, 2].

use std::sync::Arc;

use proptest::prelude::*;
use scenediff::autodiff::{gradient_pairs, Tape, Var};
use scenediff::tensor::{Precision, SparseMatrix, Tensor};
use scenediff::Result;

const TOL: f64 = 1e-6;
const STEP: f64 = 1e-6;

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, n)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Reduces an op's output to a scalar through fixed, uneven weights so every
/// output coordinate contributes differently.
fn probe(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = tape.constant(Tensor::new(shape, (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Largest per-input error `max|a - n| / max(max|a|, max|n|)`. Entries with a
/// near-zero gradient sit at the finite-difference noise floor, so they are
/// judged against the scale of the whole gradient.
fn worst<F>(f: F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradient_pairs(f, inputs, STEP)
        .unwrap()
        .iter()
        .map(|(a, n)| {
            let scale = a.max_abs().max(n.max_abs()).max(1e-12);
            a.max_abs_diff(n).unwrap() / scale
        })
        .fold(0.0, f64::max)
}

fn small(err: f64) {
    assert!(err < TOL, "relative gradient error {err:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn binary_elementwise(a in values(6), b in values(6)) {
        let inputs = [t(&[2, 3], &a), t(&[2, 3], &b)];
        small(worst(|tp, v| { let y = tp.add(v[0], v[1])?; probe(tp, y) }, &inputs));
        small(worst(|tp, v| { let y = tp.sub(v[0], v[1])?; probe(tp, y) }, &inputs));
        small(worst(|tp, v| { let y = tp.mul(v[0], v[1])?; probe(tp, y) }, &inputs));
    }

    #[test]
    fn matmul_and_linear(a in values(6), b in values(12), c in values(4)) {
        let inputs = [t(&[2, 3], &a), t(&[3, 4], &b), t(&[4], &c)];
        small(worst(|tp, v| { let y = tp.matmul(v[0], v[1])?; probe(tp, y) }, &inputs[..2]));
        small(worst(|tp, v| { let y = tp.linear(v[0], v[1], Some(v[2]))?; probe(tp, y) }, &inputs));
        small(worst(|tp, v| { let y = tp.add_row_vector(v[0], v[1])?; probe(tp, y) }, &[inputs[1].clone(), inputs[2].clone()]));
    }

    #[test]
    fn unary_smooth(a in values(8)) {
        let inputs = [t(&[2, 4], &a)];
        small(worst(|tp, v| { let y = tp.tanh(v[0]); probe(tp, y) }, &inputs));
        small(worst(|tp, v| { let y = tp.square(v[0]); probe(tp, y) }, &inputs));
        small(worst(|tp, v| { let y = tp.scale(v[0], -1.7); probe(tp, y) }, &inputs));
        small(worst(|tp, v| { let y = tp.softmax(v[0]); probe(tp, y) }, &inputs));
        small(worst(|tp, v| Ok(tp.sum(v[0])), &inputs));
        small(worst(|tp, v| Ok(tp.mean(v[0])), &inputs));
        small(worst(|tp, v| { let y = tp.mean_axis(v[0], 0)?; probe(tp, y) }, &inputs));
        small(worst(|tp, v| { let y = tp.mean_axis(v[0], 1)?; probe(tp, y) }, &inputs));
    }

    #[test]
    fn positive_domain(a in prop::collection::vec(0.1..2.0f64, 6)) {
        let inputs = [t(&[6], &a)];
        small(worst(|tp, v| { let y = tp.sqrt(v[0]); probe(tp, y) }, &inputs));
        small(worst(|tp, v| { let y = tp.log(v[0]); probe(tp, y) }, &inputs));
        small(worst(|tp, v| { let y = tp.log_clamped(v[0], 0.01); probe(tp, y) }, &inputs));
    }

    #[test]
    fn relu_away_from_kink(a in prop::collection::vec(prop_oneof![-2.0..-0.01f64, 0.01..2.0f64], 6)) {
        let inputs = [t(&[6], &a)];
        small(worst(|tp, v| { let y = tp.relu(v[0]); probe(tp, y) }, &inputs));
    }

    #[test]
    fn structural(a in values(6), b in values(4)) {
        let inputs = [t(&[2, 3], &a), t(&[2, 2], &b)];
        small(worst(|tp, v| { let y = tp.concat(&[v[0], v[1]], 1)?; probe(tp, y) }, &inputs));
        small(worst(|tp, v| { let y = tp.transpose(v[0])?; probe(tp, y) }, &inputs[..1]));
        small(worst(|tp, v| { let y = tp.reshape(v[0], &[3, 2])?; probe(tp, y) }, &inputs[..1]));
        small(worst(|tp, v| { let y = tp.gather_rows(v[0], &[1, 0, 1])?; probe(tp, y) }, &inputs[..1]));
        let mut m = SparseMatrix::new(3, 2);
        m.push(0, 1, 0.5);
        m.push(2, 0, -1.5);
        m.push(2, 1, 0.25);
        let m = Arc::new(m);
        small(worst(|tp, v| { let y = tp.spmm(m.clone(), v[0])?; probe(tp, y) }, &inputs[..1]));
    }

    #[test]
    fn tape_evaluation_is_deterministic(a in values(12), b in values(12)) {
        let run = |precision| {
            let mut tape = Tape::new(precision);
            let x = tape.leaf(t(&[3, 4], &a));
            let w = tape.leaf(t(&[4, 3], &b));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.tanh(h);
            let s = tape.softmax(h);
            let loss = tape.mean(s);
            tape.backward(loss).unwrap();
            (tape.value(loss).clone(), tape.grad(x).cloned(), tape.grad(w).cloned())
        };
        for p in [Precision::F32, Precision::F64] {
            prop_assert_eq!(run(p), run(p));
        }
    }
}
