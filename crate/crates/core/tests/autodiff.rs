use rand::Rng;
use retline_core::rng::{normal, substream};
use retline_core::tensor::{grad_check, grad_check_many, Tape, Tensor, Var};
use retline_core::Result;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = substream(seed, "autodiff");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal(&mut rng)).collect()).unwrap()
}

#[test]
fn sum_gives_ones() {
    let x = Tensor::zeros(&[2, 3]).with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let s = tape.sum(v);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(v).unwrap(), &[1.0; 6]);
}

#[test]
fn sum_of_product_grad_is_b_transpose_pattern() {
    let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap().with_requires_grad(true);
    let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap().with_requires_grad(true);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let p = tape.matmul(va, vb).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    // d/dA_ij sum(AB) = sum_k B_jk
    assert_eq!(g.get(va).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
    assert_eq!(g.get(vb).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
}

#[test]
fn detached_inputs_get_nothing() {
    let a = Tensor::full(&[2, 2], 1.0);
    let b = Tensor::full(&[2, 2], 2.0).with_requires_grad(true);
    let mut tape = Tape::new();
    let (va, vb) = (tape.leaf(&a), tape.leaf(&b));
    let p = tape.mul(va, vb).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap();
    assert!(g.get(va).is_none());
    assert!(g.get(vb).is_some());
}

#[test]
fn non_scalar_loss_rejected() {
    let a = Tensor::full(&[2, 2], 1.0).with_requires_grad(true);
    let mut tape = Tape::new();
    let va = tape.leaf(&a);
    assert!(tape.backward(va).is_err());
}

#[test]
fn repeated_backward_accumulates_into_tensor() {
    let mut x = Tensor::full(&[3], 2.0).with_requires_grad(true);
    for _ in 0..2 {
        let mut tape = Tape::new();
        let v = tape.leaf(&x);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        g.accumulate_into(v, &mut x);
    }
    assert_eq!(x.grad().unwrap(), &[8.0, 8.0, 8.0]);
}

#[test]
fn backward_leaves_forward_values_alone() {
    let x = random(&[3, 4], 1).with_requires_grad(true);
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let s = tape.softmax_rows(v).unwrap();
    let before = tape.value(s).to_vec();
    let l = tape.sum(s);
    tape.backward(l).unwrap();
    assert_eq!(tape.value(s), &before[..]);
}

#[test]
fn square_sum_check() {
    let x = random(&[4, 3], 2);
    let r = grad_check(
        |t, v| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error <= 1e-7, "{r:?}");
}

#[test]
fn constant_function_check() {
    let x = random(&[3], 3);
    let r = grad_check(
        |t, _v| {
            let c = t.constant(&[1], vec![4.0])?;
            Ok(t.sum(c))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert_eq!(r.max_rel_error, 0.0);
    assert_eq!((r.analytic, r.numeric), (0.0, 0.0));
}

#[test]
fn non_finite_function_rejected() {
    let x = random(&[2], 4);
    let r = grad_check(
        |t, v| {
            let s = t.sum(v);
            Ok(t.scale(s, f64::INFINITY))
        },
        &x,
        1e-5,
    );
    assert!(r.is_err());
}

/// Weighted sum so gradients of outputs are not all equal.
fn project(t: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let n = t.value(v).len();
    let mut rng = substream(seed, "weights");
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let p = t.mul_const(v, w)?;
    Ok(t.sum(p))
}

fn check_op(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape, &[Var]) -> Result<Var> + Copy) {
    for point in 0..10 {
        let inputs: Vec<Tensor> = shapes.iter().enumerate().map(|(i, s)| random(s, 100 * point + i as u64)).collect();
        let r = grad_check_many(
            |t, vs| {
                let out = f(t, vs)?;
                project(t, out, 7)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-4, "{name} at point {point}: {r:?}");
    }
}

#[test]
fn every_differentiable_op_passes_grad_check() {
    check_op("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
    check_op("transpose", &[&[3, 4]], |t, v| t.transpose(v[0]));
    check_op("reshape", &[&[3, 4]], |t, v| t.reshape(v[0], &[2, 6]));
    check_op("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
    check_op("add_row", &[&[3, 4], &[4]], |t, v| t.add_row(v[0], v[1]));
    check_op("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
    check_op("add_const", &[&[2, 2]], |t, v| t.add_const(v[0], &[1.0, 2.0, 3.0, 4.0]));
    check_op("scale", &[&[2, 3]], |t, v| Ok(t.scale(v[0], -1.5)));
    check_op("gelu", &[&[3, 4]], |t, v| Ok(t.gelu(v[0])));
    check_op("softmax_rows", &[&[3, 5]], |t, v| t.softmax_rows(v[0]));
    check_op("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| t.layer_norm(v[0], v[1], v[2]));
    check_op("slice_cols", &[&[3, 5]], |t, v| t.slice_cols(v[0], 1, 4));
    check_op("slice_rows", &[&[4, 2]], |t, v| t.slice_rows(v[0], 1, 3));
    check_op("select_rows", &[&[4, 3]], |t, v| t.select_rows(v[0], &[3, 0, 3]));
    check_op("concat_cols", &[&[3, 2], &[3, 1]], |t, v| t.concat_cols(&[v[0], v[1]]));
    check_op("concat_rows", &[&[1, 3], &[2, 3]], |t, v| t.concat_rows(&[v[0], v[1]]));
    check_op("conv2d", &[&[2, 6, 5], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], (2, 1), 1));
    check_op("gated_decay", &[&[5]], |t, v| t.gated_decay(v[0], 4.0));
    check_op("rotate_pairs", &[&[2, 5]], |t, v| t.rotate_pairs(v[0], &[0.3, -1.2, 2.0, 0.7]));
    check_op("cross_entropy", &[&[4, 6]], |t, v| {
        t.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)], 0.4)
    });
}
