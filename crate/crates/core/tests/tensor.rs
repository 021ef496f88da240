use contraspeech::tensor::{grad_check, ReduceOp, UnaryOp};
use contraspeech::{Error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f32, b: f32, tol: f32) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let zero = tape.scalar(0.0);
    assert_eq!(zero.sigmoid().item(), 0.5);
    assert_eq!(tape.scalar(7.0).relu_clipped(5.0).item(), 5.0);
    assert!(close(tape.scalar(1.7).exp().log().item(), 1.7, 1e-6));
    assert!(tape.scalar(-1.0).log().item().is_nan());
    assert_eq!(tape.scalar(0.0).log().item(), f32::NEG_INFINITY);
}

#[test]
fn elementwise_shape_mismatch_is_dimension_error() {
    let tape = Tape::new();
    let a = tape.constant(vec![0.0; 6], &[2, 3]).unwrap();
    let b = tape.constant(vec![0.0; 2], &[2]).unwrap();
    assert!(matches!(a.add(&b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let eye = tape.constant(vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], &[3, 3]).unwrap();
    let m = tape.constant((0..6).map(|v| v as f32).collect(), &[3, 2]).unwrap();
    assert_eq!(eye.matmul(&m).unwrap().to_vec(), m.to_vec());

    let a = tape.constant(vec![1., 2., 3., 4.], &[2, 2]).unwrap();
    let b = tape.constant(vec![1., 1.], &[2, 1]).unwrap();
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), vec![2, 1]);
    assert_eq!(c.to_vec(), vec![3., 7.]);

    assert!(matches!(b.matmul(&b), Err(Error::Dimension(_))));
}

#[test]
fn matmul_gradient_is_ones_times_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a: Vec<f32> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b: Vec<f32> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();

    // Frozen from the closed form ones(4×2)·bᵀ: row i of dA is the row sums of b.
    let expected: Vec<f32> = (0..4)
        .flat_map(|_| (0..5).map(|p| b[p * 2] + b[p * 2 + 1]).collect::<Vec<_>>())
        .collect();

    let tape = Tape::new();
    let ta = tape.leaf(a.clone(), &[4, 5], true).unwrap();
    let tb = tape.constant(b.clone(), &[5, 2]).unwrap();
    let loss = ta.matmul(&tb).unwrap().sum_all().unwrap();
    tape.backward(&loss).unwrap();
    for (g, e) in ta.grad().unwrap().iter().zip(&expected) {
        assert!(close(*g, *e, 1e-5));
    }

    let report = grad_check(
        |_, p| p[0].matmul(&p[1])?.sum_all(),
        &[(a, vec![4, 5]), (b, vec![5, 2])],
        1e-3,
        1e-3,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn reduce_examples() {
    let tape = Tape::new();
    let z = tape.constant(vec![0.0; 3], &[3]).unwrap();
    assert!(close(z.logsumexp(0).unwrap().item(), 3f32.ln(), 1e-6));

    let empty = tape.constant(vec![], &[2, 0]).unwrap();
    assert_eq!(empty.sum(1).unwrap().to_vec(), vec![0.0, 0.0]);

    let big = tape.constant(vec![1000.0, 1000.0], &[2]).unwrap();
    let lse = big.logsumexp(0).unwrap().item();
    assert!(lse.is_finite());
    assert!(close(lse, 1000.0 + 2f32.ln(), 1e-3));

    assert!(matches!(big.sum(1), Err(Error::Dimension(_))));
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let w = tape.leaf(vec![0.5, -1.0, 2.0], &[3], true).unwrap();
    let x = tape.constant(vec![3.0, 4.0, -5.0], &[3]).unwrap();
    let loss = w.mul(&x).unwrap().sum_all().unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(w.grad().unwrap(), x.to_vec());
    assert!(x.grad().is_none());

    let tape = Tape::new();
    let w = tape.leaf(vec![0.0], &[], true).unwrap();
    let loss = w.sigmoid();
    tape.backward(&loss).unwrap();
    assert_eq!(w.grad().unwrap(), vec![0.25]);

    let tape = Tape::new();
    let v = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
    assert!(matches!(tape.backward(&v), Err(Error::Contract(_))));
}

#[test]
fn unreached_leaves_get_zero_gradients() {
    let tape = Tape::new();
    let used = tape.leaf(vec![1.0], &[1], true).unwrap();
    let unused = tape.leaf(vec![1.0, 2.0], &[2], true).unwrap();
    let loss = used.square().sum_all().unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(unused.grad().unwrap(), vec![0.0, 0.0]);
}

#[test]
fn reverse_traversal_visits_each_op_once_in_reverse_order() {
    let tape = Tape::new();
    let x = tape.leaf(vec![0.3, -0.2], &[2], true).unwrap();
    let y = x.tanh().mul(&x).unwrap().exp();
    let loss = y.sum_all().unwrap();
    let visited = tape.backward_traced(&loss).unwrap();
    let mut sorted = visited.clone();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.dedup();
    assert_eq!(visited, sorted);
    assert_eq!(visited.len(), tape.len());

    tape.clear();
    assert!(tape.is_empty());
}

#[test]
#[should_panic(expected = "non-finite")]
fn finite_check_flag_traps_nan() {
    let tape = Tape::new();
    tape.set_check_finite(true);
    tape.scalar(-1.0).log();
}

#[test]
fn grad_check_examples() {
    let report = grad_check(|_, p| Ok(p[0].square()), &[(vec![3.0], vec![])], 1e-3, 1e-3).unwrap();
    assert!(report.passed());
    assert!(report.params[0].max_abs_error < 1e-3);

    // Negative control: derivative rule deliberately off by a factor of two.
    let wrong = UnaryOp::Custom { f: |x| x * x, df: |x| x };
    let report = grad_check(|_, p| Ok(p[0].unary(wrong)), &[(vec![3.0], vec![])], 1e-3, 1e-3).unwrap();
    assert!(!report.passed());
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect()
}

/// Inputs in [−2, 2] kept clear of the kinks `kinks`.
fn away_from(rng: &mut ChaCha8Rng, n: usize, kinks: &[f32]) -> Vec<f32> {
    (0..n)
        .map(|_| loop {
            let v = rng.random_range(-2.0f32..2.0);
            if kinks.iter().all(|k| (v - k).abs() > 1e-2) {
                break v;
            }
        })
        .collect()
}

type Builder = Box<dyn Fn(&Tape, &[Tensor]) -> contraspeech::Result<Tensor>>;

/// Projects an arbitrary output onto a fixed pseudo-random direction so the
/// checked scalar depends on every output element.
fn project(t: &Tensor) -> contraspeech::Result<Tensor> {
    let n = t.numel();
    let w: Vec<f32> = (0..n).map(|i| ((i as f32 + 1.0) * 0.7).sin()).collect();
    let shape = t.shape();
    let w = t.tape().constant(w, &shape)?;
    t.mul(&w)?.sum_all()
}

fn check_primitive(name: &str, trials: usize, mut gen: impl FnMut(&mut ChaCha8Rng) -> Vec<(Vec<f32>, Vec<usize>)>, f: Builder) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.bytes().map(u64::from).sum());
    for trial in 0..trials {
        let params = gen(&mut rng);
        let report = grad_check(|t, p| f(t, p), &params, 1e-3, 1e-3).unwrap();
        assert!(report.passed(), "{name} trial {trial}: {report:?}");
    }
}

#[test]
fn every_primitive_passes_gradient_check() {
    const TRIALS: usize = 64;
    let unaries: Vec<(&str, UnaryOp, Vec<f32>)> = vec![
        ("neg", UnaryOp::Neg, vec![]),
        ("exp", UnaryOp::Exp, vec![]),
        ("sigmoid", UnaryOp::Sigmoid, vec![]),
        ("log_sigmoid", UnaryOp::LogSigmoid, vec![]),
        ("tanh", UnaryOp::Tanh, vec![]),
        ("relu", UnaryOp::Relu, vec![0.0]),
        ("relu_clipped", UnaryOp::ReluClipped(1.0), vec![0.0, 1.0]),
        ("scale", UnaryOp::Scale(-1.5), vec![]),
        ("add_scalar", UnaryOp::AddScalar(0.7), vec![]),
        ("square", UnaryOp::Square, vec![]),
    ];
    for (name, op, kinks) in unaries {
        check_primitive(
            name,
            TRIALS,
            |r| vec![(away_from(r, 6, &kinks), vec![2, 3])],
            Box::new(move |_, p| project(&p[0].unary(op))),
        );
    }
    // Positive domain for log and sqrt: shift [−2, 2] to [0.5, 4.5].
    check_primitive("log", TRIALS, |r| vec![(uniform(r, 5), vec![5])], Box::new(|_, p| project(&p[0].add_scalar(2.5).log())));
    check_primitive("sqrt", TRIALS, |r| vec![(uniform(r, 5), vec![5])], Box::new(|_, p| project(&p[0].add_scalar(2.5).sqrt())));

    check_primitive("add_broadcast", TRIALS, |r| vec![(uniform(r, 6), vec![2, 3]), (uniform(r, 3), vec![3])], Box::new(|_, p| project(&p[0].add(&p[1])?)));
    check_primitive("sub_broadcast", TRIALS, |r| vec![(uniform(r, 6), vec![2, 3]), (uniform(r, 2), vec![2, 1])], Box::new(|_, p| project(&p[0].sub(&p[1])?)));
    check_primitive("mul_broadcast", TRIALS, |r| vec![(uniform(r, 6), vec![2, 3]), (uniform(r, 1), vec![])], Box::new(|_, p| project(&p[0].mul(&p[1])?)));
    check_primitive(
        "div",
        TRIALS,
        |r| {
            let den: Vec<f32> = (0..6).map(|_| r.random_range(0.5f32..2.0) * if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
            vec![(uniform(r, 6), vec![2, 3]), (den, vec![2, 3])]
        },
        Box::new(|_, p| project(&p[0].div(&p[1])?)),
    );
    check_primitive("matmul", TRIALS, |r| vec![(uniform(r, 6), vec![2, 3]), (uniform(r, 12), vec![3, 4])], Box::new(|_, p| project(&p[0].matmul(&p[1])?)));
    check_primitive("transpose", TRIALS, |r| vec![(uniform(r, 6), vec![2, 3])], Box::new(|_, p| project(&p[0].transpose()?)));
    check_primitive("reshape", TRIALS, |r| vec![(uniform(r, 6), vec![2, 3])], Box::new(|_, p| project(&p[0].reshape(&[3, 2])?)));
    for (name, op) in [("sum", ReduceOp::Sum), ("mean", ReduceOp::Mean), ("max", ReduceOp::Max), ("logsumexp", ReduceOp::LogSumExp)] {
        for axis in 0..2 {
            check_primitive(name, TRIALS / 2, |r| vec![(uniform(r, 12), vec![3, 4])], Box::new(move |_, p| project(&p[0].reduce(op, axis)?)));
        }
    }
    check_primitive("narrow", TRIALS, |r| vec![(uniform(r, 12), vec![3, 4])], Box::new(|_, p| project(&p[0].narrow(1, 1, 2)?)));
    check_primitive("concat", TRIALS, |r| vec![(uniform(r, 6), vec![2, 3]), (uniform(r, 4), vec![2, 2])], Box::new(|t, p| project(&t.concat(&[&p[0], &p[1]], 1)?)));
    check_primitive("index_select", TRIALS, |r| vec![(uniform(r, 8), vec![4, 2])], Box::new(|_, p| project(&p[0].index_select(&[3, 0, 3, 1])?)));
    check_primitive("log_softmax", TRIALS, |r| vec![(uniform(r, 8), vec![2, 4])], Box::new(|_, p| project(&p[0].log_softmax(1)?)));
    check_primitive("cosine_rows", TRIALS, |r| vec![(uniform(r, 9), vec![3, 3]), (uniform(r, 9), vec![3, 3])], Box::new(|_, p| project(&p[0].cosine_rows(&p[1])?)));
    check_primitive(
        "conv1d",
        TRIALS,
        |r| vec![(uniform(r, 2 * 9), vec![2, 9]), (uniform(r, 3 * 2 * 3), vec![3, 2, 3]), (uniform(r, 3), vec![3])],
        Box::new(|t, p| project(&t.conv1d(&p[0], &p[1], &p[2], 2, 1)?)),
    );
    check_primitive(
        "group_norm",
        TRIALS,
        |r| vec![(uniform(r, 4 * 5), vec![4, 5]), (uniform(r, 4), vec![4]), (uniform(r, 4), vec![4])],
        Box::new(|t, p| project(&t.group_norm(&p[0], &p[1], &p[2], 2, 1e-5)?)),
    );
}

#[test]
fn two_backward_passes_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = tape.leaf(uniform(&mut rng, 24), &[4, 6], true).unwrap();
        let w = tape.leaf(uniform(&mut rng, 18), &[6, 3], true).unwrap();
        let y = x.matmul(&w).unwrap().tanh().log_softmax(1).unwrap();
        let loss = y.sum_all().unwrap();
        tape.backward(&loss).unwrap();
        (x.grad().unwrap(), w.grad().unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.1.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn broadcast_equals_explicit_tiling(
        rows in 1usize..5,
        cols in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = uniform(&mut rng, rows * cols);
        let b = uniform(&mut rng, cols);
        let tiled: Vec<f32> = (0..rows).flat_map(|_| b.clone()).collect();
        let tape = Tape::new();
        let ta = tape.constant(a, &[rows, cols]).unwrap();
        let tb = tape.constant(b, &[cols]).unwrap();
        let tt = tape.constant(tiled, &[rows, cols]).unwrap();
        for op in [contraspeech::tensor::BinaryOp::Add, contraspeech::tensor::BinaryOp::Mul, contraspeech::tensor::BinaryOp::Div] {
            prop_assert_eq!(ta.binary(op, &tb).unwrap().to_vec(), ta.binary(op, &tt).unwrap().to_vec());
        }
    }

    #[test]
    fn logsumexp_matches_naive_form(xs in prop::collection::vec(-10.0f32..10.0, 1..16)) {
        let naive = (xs.iter().map(|&x| (x as f64).exp()).sum::<f64>()).ln();
        let tape = Tape::new();
        let n = xs.len();
        let t = tape.constant(xs, &[n]).unwrap();
        let lse = t.logsumexp(0).unwrap().item() as f64;
        prop_assert!((lse - naive).abs() <= 1e-6 * naive.abs().max(1.0));
    }

    #[test]
    fn logsumexp_finite_for_large_inputs(xs in prop::collection::vec(-1e4f32..1e4, 1..16)) {
        let tape = Tape::new();
        let n = xs.len();
        let t = tape.constant(xs, &[n]).unwrap();
        prop_assert!(t.logsumexp(0).unwrap().item().is_finite());
    }
}
