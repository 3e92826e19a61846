//! Gradient verification for every kernel primitive against central
//! finite differences, plus determinism and range properties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umami_numerics::{grad_check, Padding, Tape, Tensor, ValueId};

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let numel: usize = shape.iter().product();
    // bounded away from 0 so LeakyReLU/GMP kinks are not straddled
    let data: Vec<f64> = (0..numel)
        .map(|_| {
            let mut v: f64 = rng.gen_range(-2.0..2.0);
            if v.abs() < 0.15 {
                v = 0.15 * v.signum().max(0.5);
            }
            v
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// Margin that keeps perturbed evaluations on one side of a kink.
const KINK_MARGIN: f64 = 1e-3;

/// True when every LeakyReLU input is bounded away from 0 and every pooled
/// column has a clear argmax, so ±eps stays on one side of each kink.
fn margins_ok(tape: &Tape, leaky_inputs: &[ValueId], pooled_inputs: &[ValueId]) -> bool {
    for &id in leaky_inputs {
        if tape.value(id).data().iter().any(|v| v.abs() < KINK_MARGIN) {
            return false;
        }
    }
    for &id in pooled_inputs {
        let t = tape.value(id);
        for c in 0..t.cols() {
            let mut col: Vec<f64> = (0..t.rows()).map(|r| t.at(r, c)).collect();
            col.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if col.len() > 1 && col[0] - col[1] < KINK_MARGIN {
                return false;
            }
        }
    }
    true
}

#[test]
fn every_primitive_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    while trials < 100 {
        let n = rng.gen_range(1..=6);
        let a = rng.gen_range(1..=5);
        let b = rng.gen_range(1..=5);
        let x = random_tensor(&mut rng, vec![n, a]);
        let w = random_tensor(&mut rng, vec![a, b]);
        let bias = random_tensor(&mut rng, vec![b]);

        // reject draws whose intermediates sit on a kink
        {
            let mut tape = Tape::new();
            let ids = [
                tape.constant(x.clone()),
                tape.constant(w.clone()),
                tape.constant(bias.clone()),
            ];
            let h = tape.matmul_affine(ids[0], ids[1], ids[2]).unwrap();
            let r = tape.leaky_relu(h, 0.01).unwrap();
            let s = tape.sigmoid(r).unwrap();
            let sm = tape.softmax_rows(s).unwrap();
            if !margins_ok(&tape, &[h], &[sm]) {
                continue;
            }
        }

        let err = grad_check(
            |tape, ids| {
                let h = tape.matmul_affine(ids[0], ids[1], ids[2])?;
                let r = tape.leaky_relu(h, 0.01)?;
                let s = tape.sigmoid(r)?;
                let sm = tape.softmax_rows(s)?;
                let p = tape.global_max_pool(sm)?;
                // weight the pooled row so the scalar target is never
                // constant (sum of a softmax row would be)
                let m = tape.value(p).cols();
                let weights = tape.constant(
                    Tensor::new(vec![1, m], (0..m).map(|j| 0.3 + 0.7 * j as f64).collect())
                        .unwrap(),
                );
                let wp = tape.mul(p, weights)?;
                tape.sum(wp)
            },
            &[x.clone(), w.clone(), bias.clone()],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "affine trial {trials}: {err}");
        worst = worst.max(err);

        // conv stack: same-padding then strided valid conv
        let nk = rng.gen_range(3..=8);
        let cin = rng.gen_range(1..=3);
        let cout = rng.gen_range(1..=3);
        let cx = random_tensor(&mut rng, vec![nk, cin]);
        let k1 = random_tensor(&mut rng, vec![3, cin, cout]);
        let k2 = random_tensor(&mut rng, vec![3, cout, cout]);
        {
            let mut tape = Tape::new();
            let ids = [
                tape.constant(cx.clone()),
                tape.constant(k1.clone()),
                tape.constant(k2.clone()),
            ];
            let c1 = tape.conv1d(ids[0], ids[1], 1, Padding::Same).unwrap();
            let r1 = tape.leaky_relu(c1, 0.01).unwrap();
            let c2 = tape.conv1d(r1, ids[2], 2, Padding::None).unwrap();
            if !margins_ok(&tape, &[c1, c2], &[]) {
                continue;
            }
        }
        let err = grad_check(
            |tape, ids| {
                let c1 = tape.conv1d(ids[0], ids[1], 1, Padding::Same)?;
                let r1 = tape.leaky_relu(c1, 0.01)?;
                let c2 = tape.conv1d(r1, ids[2], 2, Padding::None)?;
                let r2 = tape.leaky_relu(c2, 0.01)?;
                tape.sum(r2)
            },
            &[cx, k1, k2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv trial {trials}: {err}");
        worst = worst.max(err);

        // fused ssm scan (smooth everywhere)
        let t_len = rng.gen_range(1..=6);
        let d_in = rng.gen_range(1..=3);
        let d_state = rng.gen_range(1..=4);
        let d_out = rng.gen_range(1..=3);
        let sx = random_tensor(&mut rng, vec![t_len, d_in]);
        let sa = {
            let mut t = random_tensor(&mut rng, vec![d_state]);
            for v in t.data_mut() {
                *v = -v.abs() - 0.1;
            }
            t
        };
        let sb = random_tensor(&mut rng, vec![d_state, d_in]);
        let sc = random_tensor(&mut rng, vec![d_out, d_state]);
        let sd = random_tensor(&mut rng, vec![d_out, d_in]);
        let raw_delta = random_tensor(&mut rng, vec![d_state]);
        let err = grad_check(
            |tape, ids| {
                let delta = tape.softplus(ids[5])?;
                let y = tape.ssm_scan(ids[0], ids[1], ids[2], ids[3], ids[4], delta)?;
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &[sx, sa, sb, sc, sd, raw_delta],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "ssm trial {trials}: {err}");
        worst = worst.max(err);

        assert!(worst < 1e-4, "trial {trials}: max rel err {worst}");
        trials += 1;
    }
    eprintln!("max relative error over primitives: {worst:.3e}");
}

#[test]
fn scalar_loss_chain_matches_central_differences() {
    // log/clamp/select/concat/gather path used by the losses
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = random_tensor(&mut rng, vec![2, 4]);
        let err = grad_check(
            |tape, ids| {
                let s = tape.sigmoid(ids[0])?;
                let c = tape.clamp(s, 1e-7, 1.0 - 1e-7)?;
                let l = tape.log(c)?;
                let g = tape.gather_rows(l, vec![1, 0, 1])?;
                let cat = tape.concat_rows(&[g, l])?;
                let picked = tape.select(cat, 2, 3)?;
                let total = tape.sum(cat)?;
                let scaled = tape.scale(picked, -0.5)?;
                let both = tape.add(total, scaled)?;
                tape.add_const(both, 1.25)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn softmax_rows_sum_to_one_and_sigmoid_stays_open() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for _ in 0..100 {
        let shape = vec![rng.gen_range(1..=5), rng.gen_range(1..=6)];
        let x = random_tensor(&mut rng, shape);
        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let sm = tape.softmax_rows(xi).unwrap();
        let v = tape.value(sm);
        for r in 0..v.rows() {
            let s: f64 = (0..v.cols()).map(|c| v.at(r, c)).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        let sg = tape.sigmoid(xi).unwrap();
        for &p in tape.value(sg).data() {
            assert!(p > 0.0 && p < 1.0);
        }
    }
}

#[test]
fn ssm_scan_tape_op_matches_direct_recurrence_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..50 {
        let t_len = rng.gen_range(1..=16);
        let d_in = rng.gen_range(1..=3);
        let d_state = rng.gen_range(1..=4);
        let d_out = rng.gen_range(1..=3);
        let x = random_tensor(&mut rng, vec![t_len, d_in]);
        let mut a = random_tensor(&mut rng, vec![d_state]);
        for v in a.data_mut() {
            *v = -v.abs();
        }
        let b = random_tensor(&mut rng, vec![d_state, d_in]);
        let c = random_tensor(&mut rng, vec![d_out, d_state]);
        let d = random_tensor(&mut rng, vec![d_out, d_in]);
        let delta = Tensor::new(vec![d_state], vec![0.37; d_state]).unwrap();

        let mut tape = Tape::new();
        let ids: Vec<ValueId> = [&x, &a, &b, &c, &d, &delta]
            .iter()
            .map(|t| tape.constant((*t).clone()))
            .collect();
        let y = tape
            .ssm_scan(ids[0], ids[1], ids[2], ids[3], ids[4], ids[5])
            .unwrap();

        // independent oracle: discretize per entry with scalar formulas and
        // run the recurrence with plain loops
        let mut a_hat = vec![0.0; d_state];
        let mut b_hat = vec![0.0; d_state * d_in];
        for i in 0..d_state {
            let u = 0.37 * a.data()[i];
            a_hat[i] = u.exp();
            let p = if u.abs() < 1e-8 { 1.0 } else { (u.exp() - 1.0) / u };
            for j in 0..d_in {
                b_hat[i * d_in + j] = p * 0.37 * b.data()[i * d_in + j];
            }
        }
        let mut h = vec![0.0; d_state];
        for t in 0..t_len {
            let mut next = vec![0.0; d_state];
            for i in 0..d_state {
                next[i] = a_hat[i] * h[i];
                for j in 0..d_in {
                    next[i] += b_hat[i * d_in + j] * x.at(t, j);
                }
            }
            h = next;
            for o in 0..d_out {
                let mut want = 0.0;
                for i in 0..d_state {
                    want += c.at(o, i) * h[i];
                }
                for j in 0..d_in {
                    want += d.at(o, j) * x.at(t, j);
                }
                let got = tape.value(y).at(t, o);
                assert!((got - want).abs() < 1e-12, "t={t} o={o}: {got} vs {want}");
            }
        }
    }
}
