use super::*;
use crate::rng::substream;
use rand::Rng;

fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a} vs {b} (tol {tol})"
    );
}

fn assert_vec_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        assert_close(x, y, tol, &format!("{what}[{i}]"));
    }
}

// ---- embedding lookup ------------------------------------------------------

#[test]
fn embedding_gathers_rows() {
    let tape: Tape<f64> = Tape::new();
    let table = tape.param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = tape.embedding_lookup(&table, &[1, 0, 1]).unwrap();
    assert_eq!(out.shape(), &[3, 2]);
    assert_eq!(tape.value(&out), vec![3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn embedding_empty_ids_gives_empty_tensor() {
    let tape: Tape<f64> = Tape::new();
    let table = tape.param(&[2, 3], vec![0.0; 6]).unwrap();
    let out = tape.embedding_lookup(&table, &[]).unwrap();
    assert_eq!(out.shape(), &[0, 3]);
    assert!(tape.value(&out).is_empty());
}

#[test]
fn embedding_backward_accumulates_repeated_ids() {
    let tape: Tape<f64> = Tape::new();
    let table = tape.param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let out = tape.embedding_lookup(&table, &[0, 0]).unwrap();
    let loss = tape.sum(&out);
    tape.backward(&loss).unwrap();
    let g = tape.grad(&table).unwrap();
    assert_eq!(g, vec![2.0, 2.0, 0.0, 0.0]);
}

#[test]
fn embedding_rejects_out_of_range_id() {
    let tape: Tape<f64> = Tape::new();
    let table = tape.param(&[2, 2], vec![0.0; 4]).unwrap();
    assert!(matches!(
        tape.embedding_lookup(&table, &[2]),
        Err(Error::InvalidInput(_))
    ));
}

// ---- conv1d ----------------------------------------------------------------

#[test]
fn conv_hand_example() {
    let tape: Tape<f64> = Tape::new();
    let input = tape.leaf(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
    let kernels = tape.param(&[1, 2, 1], vec![1.0, 1.0]).unwrap();
    let bias = tape.param(&[1], vec![0.0]).unwrap();
    let out = tape.conv1d(&input, &kernels, &bias).unwrap();
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(tape.value(&out), vec![3.0, 5.0]);
}

#[test]
fn conv_zero_kernels_returns_bias() {
    let tape: Tape<f64> = Tape::new();
    let input = tape.leaf(&[4, 2], vec![1.0; 8]).unwrap();
    let kernels = tape.param(&[3, 2, 2], vec![0.0; 12]).unwrap();
    let bias = tape.param(&[3], vec![0.5, -1.0, 2.0]).unwrap();
    let out = tape.conv1d(&input, &kernels, &bias).unwrap();
    for row in tape.value(&out).chunks(3) {
        assert_eq!(row, &[0.5, -1.0, 2.0]);
    }
}

#[test]
fn conv_rejects_input_shorter_than_kernel() {
    let tape: Tape<f64> = Tape::new();
    let input = tape.leaf(&[2, 1], vec![1.0, 2.0]).unwrap();
    let kernels = tape.param(&[1, 3, 1], vec![0.0; 3]).unwrap();
    let bias = tape.param(&[1], vec![0.0]).unwrap();
    assert!(matches!(
        tape.conv1d(&input, &kernels, &bias),
        Err(Error::Shape(_))
    ));
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut rng = substream(11, "conv-gradcheck");
    let t = 6;
    let e = 3;
    let f = 2;
    let k = 2;
    let params = vec![
        GradCheckParam::new("input", &[t, e], random_vec(&mut rng, t * e)),
        GradCheckParam::new("kernels", &[f, k, e], random_vec(&mut rng, f * k * e)),
        GradCheckParam::new("bias", &[f], random_vec(&mut rng, f)),
    ];
    let report = grad_check(
        |tape, ps| {
            let out = tape.conv1d(&ps[0], &ps[1], &ps[2])?;
            Ok(tape.sum(&out))
        },
        &params,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.all_passed(), "{report}");
}

// ---- selu -------------------------------------------------------------------

#[test]
fn selu_fixed_points() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(&[3], vec![0.0, 1.0, -1000.0]).unwrap();
    let y = tape.value(&tape.selu(&x));
    assert_eq!(y[0], 0.0);
    assert_close(y[1], 1.050_700_987_355_480_5, 1e-15, "selu(1)");
    // Asymptote: -lambda * alpha.
    assert_close(y[2], -1.758_099_340_847_376_6, 1e-12, "selu(-inf)");
}

// ---- global max pool ---------------------------------------------------------

#[test]
fn max_pool_hand_example() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(&[2, 2], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
    let out = tape.global_max_pool(&x).unwrap();
    assert_eq!(tape.value(&out), vec![3.0, 5.0]);
}

#[test]
fn max_pool_single_row_is_identity() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(&[1, 3], vec![4.0, -2.0, 0.5]).unwrap();
    let out = tape.global_max_pool(&x).unwrap();
    assert_eq!(tape.value(&out), vec![4.0, -2.0, 0.5]);
}

#[test]
fn max_pool_tie_routes_gradient_to_first_row() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.param(&[2, 2], vec![2.0, 0.0, 2.0, 0.0]).unwrap();
    let out = tape.global_max_pool(&x).unwrap();
    let loss = tape.sum(&out);
    tape.backward(&loss).unwrap();
    let g = tape.grad(&x).unwrap();
    assert_eq!(g, vec![1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn max_pool_rejects_empty_time_axis() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(&[0, 2], vec![]).unwrap();
    assert!(tape.global_max_pool(&x).is_err());
}

// ---- dense -------------------------------------------------------------------

#[test]
fn dense_identity_and_hand_example() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(&[2], vec![2.0, 3.0]).unwrap();
    let eye = tape.param(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let zero = tape.param(&[2], vec![0.0, 0.0]).unwrap();
    let same = tape.dense(&x, &eye, &zero).unwrap();
    assert_eq!(tape.value(&same), vec![2.0, 3.0]);

    let w = tape.param(&[1, 2], vec![1.0, 1.0]).unwrap();
    let b = tape.param(&[1], vec![1.0]).unwrap();
    let y = tape.dense(&x, &w, &b).unwrap();
    assert_eq!(tape.value(&y), vec![6.0]);
}

#[test]
fn dense_gradient_matches_finite_differences() {
    let mut rng = substream(12, "dense-gradcheck");
    let params = vec![
        GradCheckParam::new("x", &[4], random_vec(&mut rng, 4)),
        GradCheckParam::new("w", &[3, 4], random_vec(&mut rng, 12)),
        GradCheckParam::new("b", &[3], random_vec(&mut rng, 3)),
    ];
    let report = grad_check(
        |tape, ps| {
            let out = tape.dense(&ps[0], &ps[1], &ps[2])?;
            // Square so the weight gradient is input-dependent.
            let sq = tape.mul(&out, &out)?;
            Ok(tape.sum(&sq))
        },
        &params,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.all_passed(), "{report}");
}

// ---- l2 normalize --------------------------------------------------------------

#[test]
fn l2_normalize_hand_example() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(&[2], vec![3.0, 4.0]).unwrap();
    let y = tape.l2_normalize(&x).unwrap();
    assert_vec_close(&tape.value(&y), &[0.6, 0.8], 1e-15, "l2([3,4])");
}

#[test]
fn l2_normalize_unit_vector_unchanged() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(&[2], vec![1.0, 0.0]).unwrap();
    let y = tape.l2_normalize(&x).unwrap();
    assert_eq!(tape.value(&y), vec![1.0, 0.0]);
}

#[test]
fn l2_normalize_flags_degenerate_input() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(&[2], vec![0.0, 1e-13]).unwrap();
    let y = tape.l2_normalize(&x).unwrap();
    assert_eq!(tape.value(&y), vec![0.0, 1e-13]);
    assert_eq!(tape.degenerate_normalizations(), 1);
}

#[test]
fn l2_normalize_output_norm_is_one() {
    for seed in 0..10u64 {
        let mut rng = substream(seed, "l2-norm-prop");
        let n = rng.random_range(1..20);
        let data = random_vec(&mut rng, n);
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&[n], data).unwrap();
        let y = tape.l2_normalize(&x).unwrap();
        let norm: f64 = tape.value(&y).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_close(norm, 1.0, 1e-6, "norm");
    }
}

#[test]
fn l2_normalize_gradient_matches_finite_differences() {
    let mut rng = substream(13, "l2-gradcheck");
    let params = vec![GradCheckParam::new("x", &[5], random_vec(&mut rng, 5))];
    let report = grad_check(
        |tape, ps| {
            let y = tape.l2_normalize(&ps[0])?;
            let probe = tape.leaf(&[5], vec![0.3, -0.7, 1.1, 0.2, -0.4])?;
            tape.dot(&y, &probe)
        },
        &params,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.all_passed(), "{report}");
}

// ---- shared mask dropout ---------------------------------------------------------

#[test]
fn dropout_rate_zero_is_identity() {
    let tape: Tape<f64> = Tape::new();
    let a = tape.leaf(&[2, 3], vec![1.0; 6]).unwrap();
    let mut rng = substream(1, "dropout");
    let out = tape.shared_mask_dropout(&[a.clone()], 0.0, &mut rng).unwrap();
    assert_eq!(out[0].id(), a.id());
}

#[test]
fn dropout_mask_is_shared_across_tensors() {
    let tape: Tape<f64> = Tape::new();
    let a = tape.leaf(&[4, 16], vec![1.0; 64]).unwrap();
    let b = tape.leaf(&[2, 16], vec![1.0; 32]).unwrap();
    let mut rng = substream(42, "dropout");
    let out = tape
        .shared_mask_dropout(&[a, b], 0.5, &mut rng)
        .unwrap();
    let zero_cols = |t: &DiffTensor| -> Vec<usize> {
        let v = tape.value(t);
        let e = t.shape()[1];
        (0..e)
            .filter(|&c| (0..t.shape()[0]).all(|r| v[r * e + c] == 0.0))
            .collect()
    };
    let za = zero_cols(&out[0]);
    let zb = zero_cols(&out[1]);
    assert_eq!(za, zb);
    assert!(!za.is_empty(), "rate 0.5 over 16 columns should drop some");
    // Survivors are scaled by 1/(1-rate).
    let va = tape.value(&out[0]);
    assert!(va.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn dropout_preserves_expected_value() {
    // Monte-Carlo oracle: over many independent masks the mean output equals
    // the input within 2%.
    let e = 8;
    let rate = 0.5;
    let rounds = 20_000u64;
    let mut acc = vec![0.0f64; e];
    for seed in 0..rounds {
        let mut rng = substream(seed, "dropout-mc");
        let mask: FeatureMask<f64> = FeatureMask::sample(e, rate, &mut rng).unwrap();
        for (a, &s) in acc.iter_mut().zip(mask.scale()) {
            *a += s;
        }
    }
    for a in &acc {
        assert_close(a / rounds as f64, 1.0, 0.02, "dropout mean");
    }
}

#[test]
fn dropout_rejects_rate_one() {
    let mut rng = substream(1, "dropout");
    assert!(matches!(
        FeatureMask::<f64>::sample(4, 1.0, &mut rng),
        Err(Error::Config(_))
    ));
}

// ---- backward ---------------------------------------------------------------------

#[test]
fn backward_sum_gives_ones() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.param(&[3], vec![5.0, -1.0, 2.0]).unwrap();
    let loss = tape.sum(&x);
    tape.backward(&loss).unwrap();
    assert_eq!(tape.grad(&x).unwrap(), vec![1.0, 1.0, 1.0]);
}

#[test]
fn backward_sum_of_squares() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.param(&[2], vec![1.0, 2.0]).unwrap();
    let sq = tape.mul(&x, &x).unwrap();
    let loss = tape.sum(&sq);
    tape.backward(&loss).unwrap();
    assert_eq!(tape.grad(&x).unwrap(), vec![2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.param(&[2], vec![1.0, 2.0]).unwrap();
    assert!(matches!(tape.backward(&x), Err(Error::Shape(_))));
}

#[test]
fn backward_runs_once_per_tape() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.param(&[2], vec![1.0, 2.0]).unwrap();
    let loss = tape.sum(&x);
    tape.backward(&loss).unwrap();
    assert!(tape.backward(&loss).is_err());
}

#[test]
fn unreachable_params_get_zero_grads() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.param(&[2], vec![1.0, 2.0]).unwrap();
    let unused = tape.param(&[3], vec![1.0; 3]).unwrap();
    let loss = tape.sum(&x);
    tape.backward(&loss).unwrap();
    assert_eq!(tape.grad(&unused).unwrap(), vec![0.0; 3]);
}

#[test]
fn backward_is_deterministic() {
    let run = || -> Vec<f64> {
        let tape: Tape<f64> = Tape::new();
        let mut rng = substream(99, "det");
        let x = tape.param(&[4, 3], random_vec(&mut rng, 12)).unwrap();
        let k = tape.param(&[2, 2, 3], random_vec(&mut rng, 12)).unwrap();
        let b = tape.param(&[2], random_vec(&mut rng, 2)).unwrap();
        let c = tape.conv1d(&x, &k, &b).unwrap();
        let s = tape.selu(&c);
        let p = tape.global_max_pool(&s).unwrap();
        let loss = tape.sum(&p);
        tape.backward(&loss).unwrap();
        let mut out = tape.grad(&x).unwrap();
        out.extend(tape.grad(&k).unwrap());
        out.extend(tape.grad(&b).unwrap());
        out
    };
    let a = run();
    let b = run();
    // Bitwise identical.
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

// ---- grad_check harness --------------------------------------------------------------

#[test]
fn grad_check_quadratic_is_tight() {
    let params = vec![GradCheckParam::new("x", &[3], vec![0.5, -1.5, 2.0])];
    let report = grad_check(
        |tape, ps| {
            let sq = tape.mul(&ps[0], &ps[0])?;
            Ok(tape.sum(&sq))
        },
        &params,
        1e-5,
        1e-8,
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-8, "{report}");
}

#[test]
fn grad_check_constant_function_is_zero() {
    let params = vec![GradCheckParam::new("x", &[3], vec![0.5, -1.5, 2.0])];
    let report = grad_check(
        |tape, _ps| {
            let c = tape.leaf(&[1], vec![7.0])?;
            Ok(tape.sum(&c))
        },
        &params,
        1e-5,
        1e-8,
    )
    .unwrap();
    assert_eq!(report.max_rel_err(), 0.0, "{report}");
}

// ---- whole-chain property -------------------------------------------------------------

/// Every differentiable op composed into one function, checked against
/// finite differences on several random shapes and seeds.
#[test]
fn composite_gradient_check_over_random_shapes() {
    for seed in 0..10u64 {
        let mut rng = substream(seed, "composite-gradcheck");
        let vocab = rng.random_range(4..8);
        let e = rng.random_range(2..5);
        let k = rng.random_range(1..3);
        let t = rng.random_range(k + 1..k + 5);
        let f = rng.random_range(1..4);
        let ids: Vec<usize> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
        let mask = {
            let mut mask_rng = substream(seed, "composite-mask");
            FeatureMask::<f64>::sample(e, 0.25, &mut mask_rng).unwrap()
        };
        let params = vec![
            GradCheckParam::new("table", &[vocab, e], random_vec(&mut rng, vocab * e)),
            GradCheckParam::new("kernels", &[f, k, e], random_vec(&mut rng, f * k * e)),
            GradCheckParam::new("bias", &[f], random_vec(&mut rng, f)),
            GradCheckParam::new("w", &[3, f], random_vec(&mut rng, 3 * f)),
            GradCheckParam::new("b", &[3], random_vec(&mut rng, 3)),
        ];
        let probe = random_vec(&mut substream(seed, "composite-probe"), 3);
        let report = grad_check(
            |tape, ps| {
                let emb = tape.embedding_lookup(&ps[0], &ids)?;
                let dropped = tape.apply_feature_mask(&emb, &mask)?;
                let conv = tape.conv1d(&dropped, &ps[1], &ps[2])?;
                let act = tape.selu(&conv);
                let pooled = tape.global_max_pool(&act)?;
                let feats = tape.dense(&pooled, &ps[3], &ps[4])?;
                let unit = tape.l2_normalize(&feats)?;
                let pr = tape.leaf(&[3], probe.clone())?;
                let d = tape.dot(&unit, &pr)?;
                let lse = tape.log_sum_exp(&feats)?;
                let lse_scaled = tape.mul_scalar(&lse, 0.1);
                let both = tape.add(&d, &lse_scaled)?;
                let hinge = tape.relu(&both);
                Ok(tape.mean(&hinge)?)
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.all_passed(), "seed {seed}: {report}");
    }
}

fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}
