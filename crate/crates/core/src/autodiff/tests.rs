use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{max_relative_error, numeric_gradient};
use super::*;

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_FLOOR: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Evaluates `op` on fresh leaves and reduces with a fixed random weighting so
/// that no gradient vanishes by symmetry.
fn weighted_root<'t, F>(tape: &'t Tape, inputs: &[Tensor], weights: &Tensor, op: &F) -> Var<'t>
where
    F: for<'a> Fn(&[Var<'a>]) -> Var<'a>,
{
    let vars: Vec<Var<'t>> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = op(&vars);
    let w = tape.constant(weights);
    out.mul(&w).unwrap().sum()
}

/// Compares tape gradients with central differences for every input.
fn gradcheck<F>(inputs: &[Tensor], op: F) -> f64
where
    F: for<'a> Fn(&[Var<'a>]) -> Var<'a>,
{
    let probe = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| probe.param(x)).collect();
    let out_shape = op(&vars).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let weights = random(&mut rng, &out_shape);

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.param(x)).collect();
    let out = op(&vars);
    let root = out.mul(&tape.constant(&weights)).unwrap().sum();
    let grads = tape.backward(root).unwrap();

    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).unwrap().to_vec();
        let numeric = numeric_gradient(inputs, i, FD_H, |xs| {
            let tp = Tape::new();
            let r = weighted_root(&tp, xs, &weights, &op);
            r.value().data()[0]
        });
        worst = worst.max(max_relative_error(&analytic, &numeric, FD_FLOOR));
    }
    worst
}

#[test]
fn matmul_identity_and_annihilator() {
    let tape = Tape::new();
    let eye = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let z = tape.constant(&Tensor::zeros(&[2, 2]));
    assert_eq!(eye.matmul(&m).unwrap().value().data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m.matmul(&z).unwrap().value().data(), &[0.0; 4]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let tape = Tape::new();
    let c = tape.constant(&a).matmul(&tape.constant(&b)).unwrap().value();
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.at(&[i, k]) * b.at(&[k, j]);
            }
            assert!((c.at(&[i, j]) - s).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_batched_layouts() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&mut rng, &[2, 3, 4]);
    let b = random(&mut rng, &[2, 4, 5]);
    let tape = Tape::new();
    let c = tape.constant(&a).matmul(&tape.constant(&b)).unwrap().value();
    assert_eq!(c.shape(), &[2, 3, 5]);
    for bi in 0..2 {
        for i in 0..3 {
            for j in 0..5 {
                let s: f64 = (0..4).map(|k| a.at(&[bi, i, k]) * b.at(&[bi, k, j])).sum();
                assert!((c.at(&[bi, i, j]) - s).abs() < 1e-12);
            }
        }
    }
    // left operand broadcast over the batch
    let a2 = random(&mut rng, &[3, 4]);
    let c2 = tape.constant(&a2).matmul(&tape.constant(&b)).unwrap().value();
    assert_eq!(c2.shape(), &[2, 3, 5]);
    let s: f64 = (0..4).map(|k| a2.at(&[1, k]) * b.at(&[1, k, 2])).sum();
    assert!((c2.at(&[1, 1, 2]) - s).abs() < 1e-12);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[4, 2]));
    let err = a.matmul(&b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![4, 2]
        }
    );
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let s = tape.constant(&Tensor::zeros(&[3])).softmax_lastdim().value();
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    assert_eq!(tape.constant(&Tensor::scalar(0.0)).silu().value().data()[0], 0.0);

    let ln = tape.constant(&t(&[1, 3], &[1.0, 2.0, 3.0])).layernorm_lastdim().value();
    let mean: f64 = ln.data().iter().sum::<f64>() / 3.0;
    let var: f64 = ln.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-12);
    // eps = 1e-5 on a population variance of 2/3
    let expected_var = (2.0 / 3.0) / (2.0 / 3.0 + 1e-5);
    assert!((var - expected_var).abs() < 1e-12);
    let direct = (1.0 - 2.0) / (2.0f64 / 3.0 + 1e-5).sqrt();
    assert!((ln.data()[0] - direct).abs() < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::from_fn(&[7, 11], |_| rng.random_range(-30.0..30.0));
    let tape = Tape::new();
    let y = tape.constant(&x).softmax_lastdim().value();
    for row in y.data().chunks(11) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn add_rejects_incompatible_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2]));
    assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { op: "add", .. })));
    assert!(a.mul(&b).is_err());
}

#[test]
fn backward_linear_and_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w0 = random(&mut rng, &[3, 2, 2]);
    let tape = Tape::new();
    let w = tape.param(&w0);
    let g = tape.backward(w.sum()).unwrap();
    assert!(g.get(w).unwrap().iter().all(|&x| x == 1.0));

    let tape = Tape::new();
    let w = tape.param(&w0);
    let root = w.mul(&w).unwrap().sum().scale(0.5);
    let g = tape.backward(root).unwrap();
    assert_eq!(g.get(w).unwrap(), w0.data());
}

#[test]
fn backward_rejects_non_scalar_root() {
    let tape = Tape::new();
    let w = tape.param(&Tensor::zeros(&[2, 2]));
    assert_eq!(
        tape.backward(w).unwrap_err(),
        TensorError::NonScalarRoot(vec![2, 2])
    );
}

#[test]
fn two_layer_network_matches_finite_differences() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let inputs = vec![
            random(&mut rng, &[5, 4]),
            random(&mut rng, &[4, 6]),
            random(&mut rng, &[6]),
            random(&mut rng, &[6, 3]),
        ];
        let err = gradcheck(&inputs, |v| {
            let h = v[0].matmul(&v[1]).unwrap().add(&v[2]).unwrap().tanh();
            h.matmul(&v[3]).unwrap()
        });
        assert!(err < FD_TOL, "seed {seed}: rel err {err}");
    }
}

#[test]
fn every_op_matches_finite_differences() {
    type OpFn = for<'a> fn(&[Var<'a>]) -> Var<'a>;
    let cases: Vec<(&str, Vec<Vec<usize>>, OpFn)> = vec![
        ("matmul_batched", vec![vec![2, 3, 4], vec![2, 4, 2]], |v| v[0].matmul(&v[1]).unwrap()),
        ("matmul_left_bcast", vec![vec![3, 4], vec![2, 4, 2]], |v| v[0].matmul(&v[1]).unwrap()),
        ("add_bcast", vec![vec![2, 3, 4], vec![3, 4]], |v| v[0].add(&v[1]).unwrap()),
        ("sub", vec![vec![2, 3], vec![2, 3]], |v| v[0].sub(&v[1]).unwrap()),
        ("mul_bcast", vec![vec![2, 3, 4], vec![4]], |v| v[0].mul(&v[1]).unwrap()),
        ("silu", vec![vec![3, 5]], |v| v[0].scale(3.0).silu()),
        ("tanh", vec![vec![3, 5]], |v| v[0].tanh()),
        ("sigmoid", vec![vec![3, 5]], |v| v[0].add_scalar(0.3).sigmoid()),
        ("softmax", vec![vec![3, 5]], |v| v[0].scale(2.0).softmax_lastdim()),
        ("layernorm", vec![vec![4, 6]], |v| v[0].layernorm_lastdim()),
        ("permute", vec![vec![2, 3, 4]], |v| v[0].permute(&[2, 0, 1]).unwrap().tanh()),
        ("reshape", vec![vec![2, 3, 4]], |v| v[0].reshape(&[6, 4]).unwrap().silu()),
        ("narrow", vec![vec![2, 5, 3]], |v| v[0].narrow(1, 1, 3).unwrap().tanh()),
        ("concat", vec![vec![2, 2, 3], vec![2, 1, 3]], |v| {
            concat(&[v[0], v[1], v[0]], 1).unwrap().tanh()
        }),
        ("repeat", vec![vec![3, 2]], |v| v[0].repeat_leading(3).tanh()),
        ("mean", vec![vec![3, 4]], |v| v[0].tanh().mean().repeat_leading(2)),
        ("expand", vec![vec![4]], |v| {
            v[0].expand_with(2, |x, out, d| {
                out[0] = x.sin();
                d[0] = x.cos();
                out[1] = x * x;
                d[1] = 2.0 * x;
            })
        }),
    ];
    for (name, shapes, op) in cases {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + name.len() as u64);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
            let err = gradcheck(&inputs, op);
            assert!(err < FD_TOL, "{name} seed {seed}: rel err {err}");
        }
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&mut rng, &[4, 8]);
        let b = random(&mut rng, &[8, 8]);
        let tape = Tape::new();
        let x = tape.constant(&a).matmul(&tape.constant(&b)).unwrap();
        x.layernorm_lastdim().softmax_lastdim().value()
    };
    let (x, y) = (run(), run());
    assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn backward_visits_each_node_once() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tape = Tape::new();
    let w = tape.param(&random(&mut rng, &[3, 3]));
    let x = tape.constant(&random(&mut rng, &[2, 3]));
    // diamond-shaped reuse of `h`
    let h = x.matmul(&w).unwrap().tanh();
    let y = h.mul(&h).unwrap().add(&h).unwrap().matmul(&w).unwrap();
    let g = tape.backward(y.sum()).unwrap();
    let counts = g.visit_counts();
    assert!(counts.iter().all(|&c| c <= 1));
    // every differentiable node participates exactly once
    let differentiable = (0..tape.len()).filter(|&i| counts[i] == 1).count();
    assert_eq!(differentiable, tape.len() - 1); // `x` is a constant
}

#[test]
fn forward_of_finite_inputs_stays_finite() {
    let tape = Tape::new();
    let x = tape.constant(&t(&[1, 3], &[1e3, -1e3, 0.0]));
    assert!(x.softmax_lastdim().value().is_finite());
    let flat = tape.constant(&Tensor::full(&[2, 4], 7.0));
    assert!(flat.layernorm_lastdim().value().is_finite());
    assert!(tape.constant(&Tensor::scalar(-800.0)).silu().value().is_finite());
}
