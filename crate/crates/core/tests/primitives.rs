//! Every tape primitive against central finite differences, on random shapes.

use std::rc::Rc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqrank::numerics::gradcheck::relative_error;
use seqrank::numerics::GradCheckConfig;
use seqrank::numerics::{RetrievalTerm, Tape, Tensor, Var};

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn eval(build: &Build, inputs: &[Tensor], weights: &Rc<[f64]>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let s = tape.weighted_sum(out, weights.clone()).unwrap();
    tape.value(s).data()[0]
}

/// Max relative error of the tape adjoints of every input.
fn check(build: &Build, inputs: Vec<Tensor>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let n = tape.value(out).len();
    let weights: Rc<[f64]> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s = tape.weighted_sum(out, weights.clone()).unwrap();
    let grads = tape.backward(s).unwrap();

    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).cloned().unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for c in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[c] += eps;
            let mut minus = inputs.clone();
            minus[k].data_mut()[c] -= eps;
            let numeric = (eval(build, &plus, &weights) - eval(build, &minus, &weights)) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[c], numeric, GradCheckConfig::default().denom_floor));
        }
    }
    worst
}

const TOL: f64 = 1e-4;

#[test]
fn matmul_backward_random_3x4_by_4x2() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&mut rng, &[3, 4]);
    let b = random_tensor(&mut rng, &[4, 2]);
    let err = check(&|t, v| t.matmul(v[0], v[1]).unwrap(), vec![a, b], 1);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn layer_norm_backward_random_2x5() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random_tensor(&mut rng, &[2, 5]);
    let g = random_tensor(&mut rng, &[5]);
    let b = random_tensor(&mut rng, &[5]);
    let err = check(&|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(), vec![x, g, b], 2);
    assert!(err < 1e-6, "{err}");
}

#[test]
fn l2_normalize_backward_random_4_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random_tensor(&mut rng, &[1, 4]);
    let err = check(&|t, v| t.l2_normalize(v[0]), vec![x], 3);
    assert!(err < 1e-6, "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_family(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, n]);
        let bt = random_tensor(&mut rng, &[n, k]);
        prop_assert!(check(&|t, v| t.matmul(v[0], v[1]).unwrap(), vec![a.clone(), b], seed) < TOL);
        prop_assert!(check(&|t, v| t.matmul_nt(v[0], v[1]).unwrap(), vec![a, bt], seed) < TOL);
    }

    #[test]
    fn elementwise_and_structural(m in 1usize..5, n in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[m, n]);
        let y = random_tensor(&mut rng, &[m, n]);
        let bias = random_tensor(&mut rng, &[n]);
        let factors: Rc<[f64]> = (0..m).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let picks: Rc<[usize]> = (0..m + 2).map(|i| (i * 7) % m).collect();

        prop_assert!(check(&|t, v| t.add(v[0], v[1]).unwrap(), vec![x.clone(), y.clone()], seed) < TOL);
        prop_assert!(check(&|t, v| t.add_row(v[0], v[1]).unwrap(), vec![x.clone(), bias.clone()], seed) < TOL);
        prop_assert!(check(&|t, v| t.scale(v[0], -0.7), vec![x.clone()], seed) < TOL);
        let f = factors.clone();
        prop_assert!(check(&move |t, v| t.row_scale(v[0], f.clone()).unwrap(), vec![x.clone()], seed) < TOL);
        prop_assert!(check(&|t, v| t.gelu(v[0]), vec![x.clone()], seed) < TOL);
        prop_assert!(check(&|t, v| t.l2_normalize(v[0]), vec![x.clone()], seed) < TOL);
        prop_assert!(check(&|t, v| t.slice_cols(v[0], 1, 1).unwrap(), vec![x.clone()], seed) < TOL);
        prop_assert!(check(&|t, v| t.concat_cols(&[v[0], v[1], v[0]]).unwrap(), vec![x.clone(), y.clone()], seed) < TOL);
        prop_assert!(check(&|t, v| t.concat_rows(&[v[1], v[0]]).unwrap(), vec![x.clone(), y.clone()], seed) < TOL);
        let p = picks.clone();
        prop_assert!(check(&move |t, v| t.gather_rows(v[0], p.clone()).unwrap(), vec![x.clone()], seed) < TOL);
        let g = random_tensor(&mut rng, &[n]);
        prop_assert!(check(&|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(), vec![x, g, bias], seed) < TOL);
    }

    #[test]
    fn masked_softmax_matches_fd(m in 1usize..5, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[m, n]);
        let allowed: Vec<bool> = (0..m * n).map(|_| rng.random_bool(0.7)).collect();
        prop_assert!(check(&move |t, v| t.masked_softmax(v[0], &allowed).unwrap(), vec![x], seed) < TOL);
    }

    #[test]
    fn retrieval_and_bce_match_fd(rows in 1usize..4, cols in 2usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_tensor(&mut rng, &[rows, cols]);
        let terms: Rc<[RetrievalTerm]> = (0..rows * 2)
            .map(|i| {
                let positive = rng.random_range(0..cols);
                let negatives: Rc<[usize]> = (0..cols).filter(|&c| c != positive && rng.random_bool(0.6)).collect();
                RetrievalTerm { row: i % rows, positive, negatives }
            })
            .collect();
        prop_assert!(check(&move |t, v| t.retrieval_nll(v[0], terms.clone(), 0.3).unwrap(), vec![s.clone()], seed) < TOL);
        let labels: Rc<[f64]> = (0..rows * cols).map(|i| (i % 2) as f64).collect();
        prop_assert!(check(&move |t, v| t.bce_with_logits(v[0], labels.clone()).unwrap(), vec![s], seed) < TOL);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant(m in 1usize..5, n in 1usize..8, shift in -50.0f64..50.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[m, n]);
        let y = seqrank::numerics::tensor::softmax_rows(&x).unwrap();
        for r in 0..m {
            let total: f64 = y.row(r).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(y.row(r).iter().all(|&v| v >= 0.0));
        }
        let mut shifted = x.clone();
        for r in 0..m {
            for v in shifted.row_mut(r) {
                *v += shift * (r as f64 + 1.0);
            }
        }
        let z = seqrank::numerics::tensor::softmax_rows(&shifted).unwrap();
        for (a, b) in y.data().iter().zip(z.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_is_idempotent(n in 2usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[3, n]);
        let (y, _, _) = seqrank::numerics::tensor::l2_normalize(&x);
        let (z, _, _) = seqrank::numerics::tensor::l2_normalize(&y);
        for (a, b) in y.data().iter().zip(z.data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn kernels_are_deterministic(m in 1usize..6, k in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[m, k]);
        let b = random_tensor(&mut rng, &[k, m]);
        let first = a.matmul(&b).unwrap();
        let second = a.matmul(&b).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&first), bits(&second));
    }
}

#[test]
fn gradient_accumulates_across_reuse() {
    // y = x·x (same leaf twice); dy/dx = 2x for a 1×1 matrix.
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
    let y = tape.matmul(x, x).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
}

