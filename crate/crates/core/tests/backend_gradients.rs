//! Finite-difference checks for every differentiable tape operation.

use icsid::backend::{grad_check, ParamSet, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Random projection of `y` to a scalar, so no output direction is degenerate.
fn project(tape: &mut Tape<f64>, y: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = tape.shape(y).to_vec();
    let r = rand_tensor(rng, &shape, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r).unwrap();
    tape.sum(p)
}

fn check(params: &ParamSet<f64>, seed: u64, f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let report = grad_check(params, STEP, |tape, vars| {
        let y = f(tape, vars);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(project(tape, y, &mut rng))
    })
    .unwrap();
    report.max_rel_err
}

const SHAPES: [(usize, usize, usize); 3] = [(3, 4, 2), (1, 5, 3), (6, 2, 7)];

#[test]
fn linear_and_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (n, din, dout) in SHAPES {
        let mut p = ParamSet::new();
        p.insert("x", rand_tensor(&mut rng, &[n, din], 1.0)).unwrap();
        p.insert("w", rand_tensor(&mut rng, &[din, dout], 1.0)).unwrap();
        p.insert("b", rand_tensor(&mut rng, &[dout], 1.0)).unwrap();
        let e = check(&p, 7, |t, v| t.linear(v[0], v[1], Some(v[2])).unwrap());
        assert!(e < 1e-6, "linear {n}x{din}x{dout}: {e}");
        let e = check(&p, 8, |t, v| t.matmul(v[0], v[1]).unwrap());
        assert!(e < 1e-6, "matmul {n}x{din}x{dout}: {e}");
    }
}

#[test]
fn linear_weight_gradient_of_sum_is_input_column_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 4], 1.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let w = tape.leaf(rand_tensor(&mut rng, &[4, 2], 1.0));
    let b = tape.leaf(Tensor::zeros(vec![2]));
    let y = tape.linear(xv, w, Some(b)).unwrap();
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap().get(w).unwrap();
    for i in 0..4 {
        let col: f64 = (0..3).map(|r| x.data()[r * 4 + i]).sum();
        for j in 0..2 {
            assert!((g.data()[i * 2 + j] - col).abs() < 1e-12);
        }
    }
    // Same check against finite differences, per the operation contract.
    let mut p = ParamSet::new();
    p.insert("w", tape.value(w).clone()).unwrap();
    let r = grad_check(&p, STEP, |t, v| {
        let xv = t.constant(x.clone());
        let y = t.linear(xv, v[0], None)?;
        Ok(t.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (n, d, _) in SHAPES {
        let mut p = ParamSet::new();
        p.insert("a", rand_tensor(&mut rng, &[n, d], 2.0)).unwrap();
        p.insert("b", rand_tensor(&mut rng, &[n, d], 2.0)).unwrap();
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>)> = vec![
            ("add", Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
            ("mul", Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
            ("scale", Box::new(|t, v| t.scale(v[0], -1.7))),
            ("add_scalar", Box::new(|t, v| t.add_scalar(v[0], 0.3))),
            ("tanh", Box::new(|t, v| t.tanh(v[0]))),
            ("gelu", Box::new(|t, v| t.gelu(v[0]))),
            ("softplus", Box::new(|t, v| t.softplus(v[0]))),
            ("slice", Box::new(|t, v| {
                let w = t.shape(v[0])[1];
                t.slice_cols(v[0], w / 2, w - w / 2).unwrap()
            })),
            ("gather", Box::new(|t, v| {
                let n = t.shape(v[0])[0];
                t.gather_rows(v[0], vec![n - 1, 0, n - 1]).unwrap()
            })),
            ("concat", Box::new(|t, v| t.concat_rows(&[v[1], v[0]]).unwrap())),
            ("mean", Box::new(|t, v| {
                let m = t.mul(v[0], v[1]).unwrap();
                t.mean(m)
            })),
        ];
        for (name, f) in cases {
            let e = check(&p, 11, f);
            assert!(e < 1e-5, "{name} on {n}x{d}: {e}");
        }
    }
}

#[test]
fn layer_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (n, d) in [(2, 5), (1, 3), (4, 8)] {
        let mut p = ParamSet::new();
        p.insert("x", rand_tensor(&mut rng, &[n, d], 1.5)).unwrap();
        p.insert("g", rand_tensor(&mut rng, &[d], 1.5)).unwrap();
        p.insert("s", rand_tensor(&mut rng, &[d], 1.5)).unwrap();
        let e = check(&p, 12, |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap());
        assert!(e < 1e-6, "layer_norm {n}x{d}: {e}");
    }
}

#[test]
fn layer_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut tape = Tape::new();
    let x = tape.constant(rand_tensor(&mut rng, &[7, 9], 3.0));
    let g = tape.constant(Tensor::full(vec![9], 1.0));
    let s = tape.constant(Tensor::zeros(vec![9]));
    let y = tape.layer_norm(x, g, s, 1e-14).unwrap();
    for row in tape.value(y).data().chunks(9) {
        let mean = row.iter().sum::<f64>() / 9.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-8);
    }
}

#[test]
fn attention_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // (batch, tq, tk, d, heads, causal)
    let cases = [
        (1, 3, 3, 4, 2, true),
        (2, 4, 3, 6, 3, false),
        (3, 2, 2, 2, 1, true),
        (2, 5, 1, 4, 4, false),
    ];
    for (b, tq, tk, d, h, causal) in cases {
        let mut p = ParamSet::new();
        p.insert("q", rand_tensor(&mut rng, &[b * tq, d], 1.0)).unwrap();
        p.insert("k", rand_tensor(&mut rng, &[b * tk, d], 1.0)).unwrap();
        p.insert("v", rand_tensor(&mut rng, &[b * tk, d], 1.0)).unwrap();
        let e = check(&p, 13, |t, v| {
            t.attention(v[0], v[1], v[2], b, h, causal).unwrap()
        });
        assert!(e < 1e-5, "attention {b} {tq} {tk} {d} {h} {causal}: {e}");
    }
}

#[test]
fn causal_attention_ignores_future_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (t_len, d) = (6, 4);
    let q = rand_tensor(&mut rng, &[t_len, d], 1.0);
    let k = rand_tensor(&mut rng, &[t_len, d], 1.0);
    let v = rand_tensor(&mut rng, &[t_len, d], 1.0);
    let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
        let mut tape = Tape::new();
        let (qa, ka, va) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let y = tape.attention(qa, ka, va, 1, 2, true).unwrap();
        tape.value(y).clone()
    };
    let base = run(&k, &v);
    for t in 0..t_len {
        let (mut k2, mut v2) = (k.clone(), v.clone());
        for j in 0..d {
            k2.data_mut()[t * d + j] += 3.0;
            v2.data_mut()[t * d + j] -= 2.0;
        }
        let out = run(&k2, &v2);
        for r in 0..t {
            for j in 0..d {
                let diff = (out.data()[r * d + j] - base.data()[r * d + j]).abs();
                assert!(diff <= 1e-12, "row {r} moved after perturbing {t}");
            }
        }
    }
}

#[test]
fn rnn_scan_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // (sequences, steps, d_in, hidden)
    for (s, steps, din, h) in [(1, 5, 2, 3), (3, 4, 1, 2), (2, 1, 3, 4), (4, 3, 2, 5)] {
        let mut p = ParamSet::new();
        p.insert("x", rand_tensor(&mut rng, &[s * steps, din], 1.0)).unwrap();
        p.insert("w_in", rand_tensor(&mut rng, &[din, h], 0.8)).unwrap();
        p.insert("w_rec", rand_tensor(&mut rng, &[h, h], 0.8)).unwrap();
        p.insert("bias", rand_tensor(&mut rng, &[h], 0.5)).unwrap();
        p.insert("h0", rand_tensor(&mut rng, &[h], 0.5)).unwrap();
        let e = check(&p, 14, |t, v| {
            t.rnn_scan(v[0], v[1], v[2], v[3], v[4], steps).unwrap()
        });
        assert!(e < 1e-5, "rnn {s}x{steps} {din}->{h}: {e}");
    }
}

#[test]
fn gaussian_nll_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (n, c) in [(4, 1), (3, 2), (7, 1)] {
        let mut p = ParamSet::new();
        p.insert("mu", rand_tensor(&mut rng, &[n, c], 1.0)).unwrap();
        p.insert("raw", rand_tensor(&mut rng, &[n, c], 1.0)).unwrap();
        let y = rand_tensor(&mut rng, &[n, c], 1.0);
        let r = grad_check(&p, STEP, |t, v| {
            let s = t.softplus(v[1]);
            let s = t.add_scalar(s, 1e-4);
            t.gaussian_nll(v[0], s, &y)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }
}

#[test]
fn identical_inputs_are_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[8, 4], 1.0);
    let run = || {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(x.clone());
        let y = tape.attention(a, a, a, 2, 2, true).unwrap();
        let y = tape.gelu(y);
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}
