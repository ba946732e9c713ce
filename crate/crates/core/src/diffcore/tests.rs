use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4]).unwrap());
    let y = x.softmax(0).unwrap();
    assert_eq!(y.value().data(), &[0.25; 4]);
}

#[test]
fn relu_clamps_negatives() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![-1.0, 2.0]).unwrap());
    assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.0, 1.0]).unwrap());
    let g = tape.backward(x.relu().sum()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn identity_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let a = random_tensor(&mut rng, &[3, 3]);
    let i = tape.constant(Tensor::eye(3).unwrap());
    let out = i.matmul(tape.constant(a.clone())).unwrap();
    assert_eq!(*out.value(), a);
}

#[test]
fn gradient_of_sum_of_squares() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let g = tape.backward(x.square().sum()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn gradient_of_softmax_sum_vanishes() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.0, 0.5]).unwrap());
    let g = tape.backward(x.softmax(0).unwrap().sum()).unwrap();
    assert!(g.wrt(x).unwrap().max_abs() < 1e-15);
}

#[test]
fn layer_norm_mean_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_tensor(&mut rng, &[3, 5]);
    let c = Tensor::new(&[3, 5], (0..15).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let err = grad_check(
        |t, x| Ok(x.layer_norm().mul(t.constant(c.clone()))?.mean()),
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_rejects_non_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
    assert!(tape.backward(x.relu()).is_err());
}

#[test]
fn shape_mismatch_is_reported() {
    let tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]).unwrap());
    let b = tape.leaf(Tensor::zeros(&[3, 2]).unwrap());
    let err = a.add(b).unwrap_err().to_string();
    assert!(err.contains("add"), "{err}");
    assert!(a.matmul(a).is_err());
    assert!(a.softmax(2).is_err());
}

#[test]
fn grad_check_quadratic() {
    let x = Tensor::scalar(3.0);
    let err = grad_check(|_, x| Ok(x.mul(x)?.sum()), &x, 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_rejects_non_finite_objective() {
    let x = Tensor::scalar(-1.0);
    assert!(grad_check(|_, x| Ok(x.ln().sum()), &x, 1e-5).is_err());
    assert!(grad_check(|_, x| Ok(x.sum()), &x, 0.0).is_err());
}

#[test]
fn shared_subexpressions_accumulate() {
    // f = sum(y * y + y) with y = 2x  ->  df/dx = 2 * (2y + 1)
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -1.0]).unwrap());
    let y = x.scale(2.0);
    let f = y.mul(y).unwrap().add(y).unwrap().sum();
    let g = tape.backward(f).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[6.0, -6.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let c = tape.constant(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let x = tape.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap());
    let g = tape.backward(c.mul(x).unwrap().sum()).unwrap();
    assert!(g.wrt(c).is_none());
    assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn min_axis_routes_to_first_minimizer() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::matrix(2, 3, vec![3.0, 1.0, 2.0, 2.0, 2.0, 5.0]).unwrap());
    let m = x.min_axis(1).unwrap();
    assert_eq!(m.value().data(), &[1.0, 2.0]);
    let g = tape.backward(m.sum()).unwrap();
    assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn concat_and_gather_layouts() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
    let b = tape.constant(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
    let c = concat(&[a, b], 1).unwrap();
    assert_eq!(c.shape(), vec![2, 3]);
    assert_eq!(c.value().data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let g = c.gather_rows(&[1, 1, 0]).unwrap();
    assert_eq!(g.value().data(), &[2.0, 5.0, 6.0, 2.0, 5.0, 6.0, 1.0, 3.0, 4.0]);
    assert!(c.gather_rows(&[2]).is_err());
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let x = random_tensor(&mut rng, &[3, 4, 5]).map(|v| v * 40.0);
        let tape = Tape::new();
        let y = tape.constant(x).softmax(1).unwrap().value();
        for o in 0..3 {
            for i in 0..5 {
                let s: f64 = (0..4).map(|k| y.data()[(o * 4 + k) * 5 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
}

type Primitive = for<'t> fn(&'t Tape, Var<'t>) -> Result<Var<'t>>;

/// Each primitive, reduced to a scalar through a fixed non-uniform weighting
/// so that the gradient is not trivially constant.
fn primitives() -> Vec<(&'static str, Vec<usize>, Primitive)> {
    fn weigh<'t>(t: &'t Tape, y: Var<'t>) -> Result<Var<'t>> {
        let shape = y.shape();
        let n: usize = shape.iter().product();
        let w = Tensor::new(&shape, (0..n).map(|i| 0.3 + (i as f64 * 0.71).sin()).collect())?;
        Ok(y.mul(t.constant(w))?.sum())
    }
    vec![
        ("add", vec![3, 4], |t, x| weigh(t, x.add(x.scale(0.5))?)),
        ("sub", vec![3, 4], |t, x| weigh(t, x.sub(x.square())?)),
        ("mul", vec![3, 4], |t, x| weigh(t, x.mul(x.exp())?)),
        ("div", vec![3, 4], |t, x| weigh(t, x.div(x.square().add_scalar(1.0))?)),
        ("scale", vec![5], |t, x| weigh(t, x.scale(-1.7).add_scalar(0.2))),
        ("add_row", vec![3, 4], |t, x| {
            let r = x.gather_rows(&[0])?.reshape(&[4])?;
            weigh(t, x.add_row(r)?)
        }),
        ("mul_row", vec![3, 4], |t, x| {
            let r = x.gather_rows(&[2])?.reshape(&[4])?;
            weigh(t, x.mul_row(r)?)
        }),
        ("matmul", vec![4, 4], |t, x| weigh(t, x.matmul(x.scale(0.5).exp())?)),
        ("softmax", vec![3, 5], |t, x| weigh(t, x.softmax(1)?)),
        ("softmax_axis0", vec![3, 5], |t, x| weigh(t, x.softmax(0)?)),
        ("ln", vec![6], |t, x| weigh(t, x.square().add_scalar(0.5).ln())),
        ("exp", vec![6], |t, x| weigh(t, x.exp())),
        ("relu", vec![8], |t, x| weigh(t, x.relu())),
        ("sigmoid", vec![8], |t, x| weigh(t, x.sigmoid())),
        ("layer_norm", vec![3, 6], |t, x| weigh(t, x.layer_norm())),
        ("sum_axis", vec![2, 3, 4], |t, x| weigh(t, x.sum_axis(1)?.square())),
        ("mean_axis", vec![2, 3, 4], |t, x| weigh(t, x.mean_axis(2)?.square())),
        ("mean_all", vec![2, 3], |_, x| Ok(x.square().mean())),
        ("min_axis", vec![3, 4], |t, x| weigh(t, x.min_axis(1)?)),
        ("concat", vec![2, 3], |t, x| weigh(t, concat(&[x, x.square()], 1)?)),
        ("gather", vec![4, 2], |t, x| weigh(t, x.gather_rows(&[3, 0, 3, 1])?)),
        ("reshape", vec![2, 6], |t, x| weigh(t, x.reshape(&[3, 4])?.softmax(1)?)),
    ]
}

#[test]
fn every_primitive_passes_grad_check_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for (name, shape, f) in primitives() {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let x = random_tensor(&mut rng, &shape);
            worst = worst.max(grad_check(f, &x, 1e-5).unwrap());
        }
        assert!(worst < 1e-4, "{name}: max relative error {worst:e}");
    }
}
