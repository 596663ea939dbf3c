use p4o_core::numerics::{grad_check, GradCheckOptions};
use p4o_core::{Error, Graph, ParamStore, Rng, Tensor, Var};
use proptest::prelude::*;

fn random(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

#[test]
fn linear_with_zero_weights_is_zero() {
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[0.0; 4]));
    let b = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0]);
}

#[test]
fn linear_with_identity_copies_input() {
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(&[1, 2], &[1.0, 0.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t(&[2], &[0.0, 0.0]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 0.0]);
    assert_eq!(g.shape(y), &[1, 2]);
}

#[test]
fn linear_shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::detached();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 5]));
    match g.linear(x, w, None) {
        Err(Error::Dimension { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![4, 5]);
        }
        other => panic!("{:?}", other.map(|_| ())),
    }
}

#[test]
fn linear_3x4_matches_finite_differences() {
    let mut rng = Rng::new(10);
    let mut ps = ParamStore::new();
    let x = ps.add("x", &[3, 4], random(&mut rng, 12)).unwrap();
    let w = ps.add("w", &[5, 4], random(&mut rng, 20)).unwrap();
    let b = ps.add("b", &[5], random(&mut rng, 5)).unwrap();
    let r = grad_check(&mut ps, &GradCheckOptions::default(), |g| {
        let (xv, wv, bv) = (g.param(x), g.param(w), g.param(b));
        let y = g.linear(xv, wv, Some(bv))?;
        let y = g.tanh(y);
        let y = g.square(y);
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

/// Direct six-loop cross-correlation with zero padding.
fn conv_oracle(x: &[f64], k: &[f64], b: usize, c: usize, h: usize, w: usize, o: usize) -> Vec<f64> {
    let mut out = vec![0.0; b * o * h * w];
    for bi in 0..b {
        for oi in 0..o {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                s += k[((oi * c + ci) * 3 + ky) * 3 + kx]
                                    * x[((bi * c + ci) * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                    out[((bi * o + oi) * h + y) * w + xx] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv_zero_kernel_gives_zero() {
    let mut rng = Rng::new(1);
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(&[1, 2, 4, 4], &random(&mut rng, 32)));
    let k = g.constant(Tensor::zeros(&[3, 2, 3, 3]));
    let y = g.conv3(x, k, None).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.shape(y), &[1, 3, 4, 4]);
}

#[test]
fn conv_center_delta_is_identity() {
    let mut rng = Rng::new(2);
    let input = random(&mut rng, 9);
    let mut kernel = vec![0.0; 9];
    kernel[4] = 1.0;
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(&[1, 1, 3, 3], &input));
    let k = g.constant(t(&[1, 1, 3, 3], &kernel));
    let y = g.conv3(x, k, None).unwrap();
    assert_eq!(g.value(y).data(), &input[..]);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    let mut rng = Rng::new(3);
    let (b, c, h, w, o) = (1, 2, 5, 5, 3);
    let input = random(&mut rng, b * c * h * w);
    let kernel = random(&mut rng, o * c * 9);
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(&[b, c, h, w], &input));
    let k = g.constant(t(&[o, c, 3, 3], &kernel));
    let y = g.conv3(x, k, None).unwrap();
    let oracle = conv_oracle(&input, &kernel, b, c, h, w, o);
    for (a, e) in g.value(y).data().iter().zip(&oracle) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn conv_channel_mismatch_is_a_dimension_error() {
    let mut g = Graph::<f64>::detached();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(g.conv3(x, k, None), Err(Error::Dimension { .. })));
}

#[test]
fn maxpool_single_window() {
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.maxpool2(x).unwrap();
    assert_eq!(g.value(y).data(), &[4.0]);
}

#[test]
fn maxpool_ties_route_to_first_scanned() {
    let mut ps = ParamStore::new();
    let x = ps.add("x", &[1, 1, 4, 4], vec![0.5; 16]).unwrap();
    let mut g = Graph::new(&ps);
    let xv = g.param(x);
    let y = g.maxpool2(xv).unwrap();
    assert_eq!(g.value(y).data(), &[0.5; 4]);
    let s = g.sum(y);
    let grads = g.backward(s).unwrap();
    let gx = grads.param(x).unwrap();
    let mut expect = vec![0.0; 16];
    for i in [0, 2, 8, 10] {
        expect[i] = 1.0;
    }
    assert_eq!(gx, &expect[..]);
}

#[test]
fn maxpool_matches_window_scan() {
    let mut rng = Rng::new(4);
    let input = random(&mut rng, 16);
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(&[1, 1, 4, 4], &input));
    let y = g.maxpool2(x).unwrap();
    let mut expect = vec![];
    for oy in 0..2 {
        for ox in 0..2 {
            let mut m = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    m = m.max(input[(2 * oy + dy) * 4 + 2 * ox + dx]);
                }
            }
            expect.push(m);
        }
    }
    assert_eq!(g.value(y).data(), &expect[..]);
}

#[test]
fn softmax_sums_to_one_and_uniform_entropy_is_ln_a() {
    for a in 1..10 {
        let mut g = Graph::<f64>::detached();
        let x = g.constant(Tensor::zeros(&[1, a]));
        let p = g.softmax(x).unwrap();
        let s: f64 = g.value(p).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        let h = p4o_core::numerics::entropy(g.value(p).data());
        assert!((h - (a as f64).ln()).abs() < 1e-10);
    }
    let mut rng = Rng::new(8);
    let mut g = Graph::<f64>::detached();
    let x = g.constant(t(&[3, 5], &random(&mut rng, 15).iter().map(|v| v * 50.0).collect::<Vec<_>>()));
    let p = g.softmax(x).unwrap();
    for r in 0..3 {
        let s: f64 = g.value(p).row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

/// Builds a scalar from one op under test with random inputs and checks
/// gradients. `op` selects the operation.
fn check_op(op: usize, rows: usize, cols: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut ps = ParamStore::new();
    let a = ps.add("a", &[rows, cols], random(&mut rng, rows * cols)).unwrap();
    let b = ps.add("b", &[rows, cols], random(&mut rng, rows * cols)).unwrap();
    let w = ps.add("w", &[cols, cols], random(&mut rng, cols * cols)).unwrap();
    let k = ps.add("k", &[2, 1, 3, 3], random(&mut rng, 18)).unwrap();
    let kb = ps.add("kb", &[2], random(&mut rng, 2)).unwrap();
    let idx: Vec<usize> = (0..rows).map(|_| rng.below(cols as u64) as usize).collect();
    let factors: Vec<f64> = random(&mut rng, rows);
    let weights = random(&mut rng, rows * cols);
    let build = |g: &mut Graph<'_, f64>| -> p4o_core::Result<Var> {
        let (av, bv) = (g.param(a), g.param(b));
        let y = match op {
            0 => g.mul(av, bv)?,
            1 => g.sub(av, bv)?,
            2 => g.sigmoid(av),
            3 => g.exp(av),
            4 => g.log_softmax(av)?,
            5 => g.softmax(av)?,
            6 => {
                let wv = g.param(w);
                g.linear(av, wv, None)?
            }
            7 => {
                let s = g.concat_cols(&[av, bv])?;
                g.slice_cols(s, 1, cols)?
            }
            8 => {
                let s = g.concat_rows(&[av, bv])?;
                g.slice_rows(s, 1, rows)?
            }
            9 => g.scale_rows(av, &factors)?,
            10 => {
                let x = g.reshape(av, &[rows, 1, 1, cols])?;
                let x = g.reshape(x, &[1, 1, rows, cols])?;
                let (kv, kbv) = (g.param(k), g.param(kb));
                let c = g.conv3(x, kv, Some(kbv))?;
                let c = g.relu(c);
                let p = g.maxpool2(c)?;
                let n = g.value(p).len();
                g.reshape(p, &[1, n])?
            }
            11 => {
                let gv = g.gather(av, &idx)?;
                let n = g.value(gv).len();
                g.reshape(gv, &[1, n])?
            }
            12 => g.minimum(av, bv)?,
            13 => g.maximum(av, bv)?,
            14 => g.clamp(av, -0.3, 0.4),
            15 => g.abs(av),
            16 => {
                let s = g.sum_cols(av)?;
                g.reshape(s, &[1, rows])?
            }
            _ => {
                let m = g.mean(av);
                let s = g.shift(av, 0.5);
                let s = g.scale(s, 1.5);
                let ms = g.sum(s);
                let y = g.add(m, ms)?;
                g.reshape(y, &[1, 1])?
            }
        };
        let n = g.value(y).len();
        let wt = g.constant(Tensor::from_f64(&[n], &weights.iter().cycle().take(n).copied().collect::<Vec<_>>())?);
        let y = g.reshape(y, &[n])?;
        let y = g.mul(y, wt)?;
        Ok(g.sum(y))
    };
    grad_check(&mut ps, &GradCheckOptions::default(), build).unwrap().max_rel_err
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn every_op_matches_finite_differences(op in 0usize..18, rows in 1usize..5, cols in 2usize..6, seed in 0u64..1000) {
        let err = check_op(op, rows, cols, seed);
        prop_assert!(err < 1e-4, "op {op}: {err}");
    }
}
