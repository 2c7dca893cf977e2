use polyglot_tensor::{grad_check, AttentionLayout, Graph, NormStats, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    c
}

fn eval1(f: impl Fn(&mut Graph<f64>, polyglot_tensor::Var) -> polyglot_tensor::Var, x: Tensor<f64>) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.constant(x);
    let out = f(&mut g, v);
    g.value(out).data().to_vec()
}

#[test]
fn matmul_identity_and_annihilator() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::identity(2));
    let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let z = g.constant(Tensor::zeros(&[2, 2]));
    let p = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let q = g.matmul(i2, z).unwrap();
    assert!(g.value(q).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 2]);
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb).unwrap();
    for (x, y) in g.value(c).data().iter().zip(triple_loop(&a, &b)) {
        assert!((x - y).abs() <= 1e-12);
    }
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(TensorError::ShapeMismatch { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

fn ln(x: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mut g = Graph::new();
    let a = g.constant(t(&[1, d], x));
    let gain = g.constant(Tensor::full(&[d], 1.0));
    let bias = g.constant(Tensor::zeros(&[d]));
    let y = g.layer_norm(a, gain, bias).unwrap();
    g.value(y).data().to_vec()
}

#[test]
fn layer_norm_examples() {
    assert!(ln(&[1.0, 1.0, 1.0, 1.0]).iter().all(|&v| v == 0.0));
    let pair = ln(&[1.0, 3.0]);
    assert!((pair[0] + 1.0).abs() < 1e-5 && (pair[1] - 1.0).abs() < 1e-5);
    // (a - 3) / sqrt(5): values computed by hand.
    let four = ln(&[0.0, 2.0, 4.0, 6.0]);
    for (got, want) in four.iter().zip([-1.3416, -0.4472, 0.4472, 1.3416]) {
        assert!((got - want).abs() < 1e-3, "{got} vs {want}");
    }
    let stats = NormStats::of(&[0.0f64, 2.0, 4.0, 6.0], 1e-6);
    assert_eq!(stats.mean, 3.0);
    assert!((stats.std - 5f64.sqrt()).abs() < 1e-12);
}

#[test]
fn softmax_examples() {
    let sm = |x: &[f64]| eval1(|g, v| g.softmax(v), t(&[1, x.len()], x));
    assert_eq!(sm(&[0.0, 0.0]), vec![0.5, 0.5]);
    for (got, want) in sm(&[1.0, 2.0, 3.0]).iter().zip([0.0900, 0.2447, 0.6652]) {
        assert!((got - want).abs() < 1e-4);
    }
    let a = sm(&[0.3, 1.7]);
    let b = sm(&[100.3, 101.7]);
    assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
}

fn xent(logits: &Tensor<f64>, gold: &[Option<usize>], eps: f64) -> f64 {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.smoothed_cross_entropy(l, gold, eps).unwrap();
    g.value(loss).item()
}

/// Explicit per-element summation: -sum_v q(v) log p(v), averaged over rows.
fn xent_oracle(logits: &Tensor<f64>, gold: &[Option<usize>], eps: f64) -> f64 {
    let v = logits.cols();
    let mut total = 0.0;
    let mut count = 0.0;
    for (r, g) in gold.iter().enumerate() {
        let Some(g) = *g else { continue };
        let row = logits.row(r);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        for (j, x) in row.iter().enumerate() {
            let q = if j == g { 1.0 - eps } else { eps / (v as f64 - 1.0) };
            total -= q * (x.exp() / z).ln();
        }
        count += 1.0;
    }
    total / count
}

#[test]
fn cross_entropy_examples() {
    let uniform = Tensor::zeros(&[1, 4]);
    assert!((xent(&uniform, &[Some(2)], 0.0) - 4f64.ln()).abs() < 1e-12);

    // V=2, eps=0.1: gradient of the loss w.r.t. logits is p - q, so with
    // equal logits the target distribution is 0.5 - grad.
    let mut g = Graph::new();
    let l = g.param(Tensor::<f64>::zeros(&[1, 2]));
    let loss = g.smoothed_cross_entropy(l, &[Some(0)], 0.1).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(l).unwrap();
    assert!((0.5 - grad[0] - 0.9).abs() < 1e-12);
    assert!((0.5 - grad[1] - 0.1).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let logits = random(&mut rng, &[2, 5]);
    let gold = [Some(1), Some(4)];
    assert!((xent(&logits, &gold, 0.1) - xent_oracle(&logits, &gold, 0.1)).abs() < 1e-10);
}

#[test]
fn cross_entropy_excludes_padding_and_checks_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let logits = random(&mut rng, &[3, 4]);
    let with_pad = xent(&logits, &[Some(1), None, Some(3)], 0.1);
    let oracle = xent_oracle(&logits, &[Some(1), None, Some(3)], 0.1);
    assert!((with_pad - oracle).abs() < 1e-12);

    let mut g = Graph::new();
    let l = g.constant(logits);
    assert!(matches!(
        g.smoothed_cross_entropy(l, &[Some(4), None, None], 0.1),
        Err(TensorError::IndexOutOfRange { .. })
    ));
}

#[test]
fn grad_check_negative_control_locates_element() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[2, 3]);
    let b = random(&mut rng, &[3, 2]);
    // Matmul with a hand-written backward rule that halves the gradient of
    // the first element of the left operand.
    let report = grad_check(
        &[a, b],
        |g, v| {
            let (av, bv) = (g.value(v[0]).clone(), g.value(v[1]).clone());
            let out = {
                let mut tmp = Graph::new();
                let (x, y) = (tmp.constant(av), tmp.constant(bv));
                let o = tmp.matmul(x, y)?;
                tmp.value(o).clone()
            };
            Ok(g.custom(
                v,
                out,
                Box::new(|ins, _out, gout| {
                    let (a, b) = (ins[0], ins[1]);
                    let mut ga = vec![0.0; a.numel()];
                    for i in 0..2 {
                        for p in 0..3 {
                            for j in 0..2 {
                                ga[i * 3 + p] += gout[i * 2 + j] * b.data()[p * 2 + j];
                            }
                        }
                    }
                    ga[0] *= 0.5;
                    let mut gb = vec![0.0; b.numel()];
                    for p in 0..3 {
                        for j in 0..2 {
                            for i in 0..2 {
                                gb[p * 2 + j] += a.data()[i * 3 + p] * gout[i * 2 + j];
                            }
                        }
                    }
                    vec![ga, gb]
                }),
            ))
        },
        1e-4,
    )
    .unwrap();
    assert!(!report.passed, "{report}");
    let worst = report.worst.unwrap();
    assert_eq!((worst.input, worst.index), (0, 0));
}

#[test]
fn matmul_associativity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (m, k, l, n) = (
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
            rng.gen_range(1..6),
        );
        let mut g = Graph::new();
        let a = g.constant(random(&mut rng, &[m, k]));
        let b = g.constant(random(&mut rng, &[k, l]));
        let c = g.constant(random(&mut rng, &[l, n]));
        let ab = g.matmul(a, b).unwrap();
        let left = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let right = g.matmul(a, bc).unwrap();
        assert!(g.value(left).max_abs_diff(g.value(right)).unwrap() <= 1e-10);
    }
}

#[test]
fn attention_skips_masked_keys_exactly() {
    // Batch of two where the second element is padded: its output must equal
    // the unpadded single-element computation bitwise.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 4;
    let q = random(&mut rng, &[2 * 3, d]);
    let k = random(&mut rng, &[2 * 3, d]);
    let mut g = Graph::new();
    let (vq, vk) = (g.constant(q.clone()), g.constant(k.clone()));
    let layout = AttentionLayout {
        batch: 2,
        q_len: 3,
        k_len: 3,
        heads: 2,
        q_valid: vec![3, 2],
        k_valid: vec![3, 2],
        causal: false,
    };
    let out = g.attention(vq, vk, vk, layout, None).unwrap();
    let batched = g.value(out).data()[3 * d..5 * d].to_vec();

    let mut g2 = Graph::new();
    let q2 = Tensor::new(&[2, d], q.data()[3 * d..5 * d].to_vec()).unwrap();
    let k2 = Tensor::new(&[2, d], k.data()[3 * d..5 * d].to_vec()).unwrap();
    let (vq2, vk2) = (g2.constant(q2), g2.constant(k2));
    let layout2 = AttentionLayout {
        batch: 1,
        q_len: 2,
        k_len: 2,
        heads: 2,
        q_valid: vec![2],
        k_valid: vec![2],
        causal: false,
    };
    let out2 = g2.attention(vq2, vk2, vk2, layout2, None).unwrap();
    assert_eq!(batched, g2.value(out2).data());
    // Padded query row is zero.
    assert!(g.value(out).data()[5 * d..6 * d].iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, cols]);
        let x = Tensor::new(&[rows, cols], x.data().iter().map(|v| v * 30.0).collect()).unwrap();
        let p = eval1(|g, v| g.softmax(v), x);
        for row in p.chunks(cols) {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_standardizes(rows in 1usize..4, d in 2usize..16, seed in any::<u64>(), spread in 0.5f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[rows, d]);
        let x = Tensor::new(&[rows, d], x.data().iter().map(|v| v * spread + 3.0).collect()).unwrap();
        // Skip near-constant rows where epsilon dominates.
        prop_assume!((0..rows).all(|r| NormStats::of(x.row(r), 1e-6).std > 1e-2));
        let mut g = Graph::new();
        let a = g.constant(x);
        let gain = g.constant(Tensor::full(&[d], 1.0));
        let bias = g.constant(Tensor::zeros(&[d]));
        let y = g.layer_norm(a, gain, bias).unwrap();
        for r in 0..rows {
            let s = NormStats::of(g.value(y).row(r), 1e-6);
            prop_assert!(s.mean.abs() <= 1e-6);
            prop_assert!((s.std - 1.0).abs() <= 1e-4);
        }
    }
}
