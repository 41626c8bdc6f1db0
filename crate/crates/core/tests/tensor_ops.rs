use std::sync::Arc;

use meshspace::tensor::{grad_check, CsrMatrix, GradCheckOptions, ParamId, ParamStore, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn store_of(shapes: &[&[usize]], seed: u64) -> (ParamStore, Vec<ParamId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), rand_tensor(&mut rng, s)))
        .collect();
    (store, ids)
}

/// Weighted sum with fixed pseudo-random weights so every output entry matters.
fn probe(t: &mut Tape, y: Var) -> Var {
    let n = t.value(y).len();
    let shape = t.shape(y).to_vec();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.7311).sin() + 0.1).collect()).unwrap();
    let w = t.constant(w);
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

fn check(shapes: &[&[usize]], seed: u64, f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let (store, ids) = store_of(shapes, seed);
    let r = grad_check(
        &store,
        |t| {
            let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
            let y = f(t, &vars);
            Ok(probe(t, y))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    r.max_rel_err
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    c
}

fn naive_conv(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (f, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros([b, f, oh, ow]);
    for bi in 0..b {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride + ky) as isize - pad as isize;
                                let xx = (ox * stride + kx) as isize - pad as isize;
                                if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                    acc += x.at(&[bi, ci, y as usize, xx as usize]) * w.at(&[fi, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    let idx = ((bi * f + fi) * oh + oy) * ow + ox;
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_small_case() {
    let mut t = Tape::new();
    let eye = t.constant(Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap());
    let xv = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    let x = t.constant(xv.clone());
    let y = t.matmul(eye, x).unwrap();
    assert_eq!(t.value(y), &xv);

    let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let b = t.constant(Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[3.0, 7.0]);
    assert_eq!(naive_matmul(t.value(a), t.value(b)), vec![3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::zeros([2, 3]));
    let b = t.constant(Tensor::zeros([2, 3]));
    let msg = t.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
}

#[test]
fn matmul_gradient_of_sum_matches_differences() {
    let (store, ids) = store_of(&[&[3, 4], &[4, 2]], 1);
    let r = grad_check(
        &store,
        |t| {
            let a = t.param(ids[0]);
            let b = t.param(ids[1]);
            let c = t.matmul(a, b)?;
            Ok(t.sum(c))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn matmul_matches_naive_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[7, 5]);
    let b = rand_tensor(&mut rng, &[5, 9]);
    let mut t = Tape::new();
    let (va, vb) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.matmul(va, vb).unwrap();
    for (x, y) in t.value(c).data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-13);
    }
}

#[test]
fn conv2d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xv = rand_tensor(&mut rng, &[2, 1, 5, 4]);
    let mut t = Tape::new();
    let x = t.constant(xv.clone());
    let w = t.constant(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap());
    let y = t.conv2d(x, w, 1, 0).unwrap();
    assert_eq!(t.value(y), &xv);
}

#[test]
fn conv2d_window_sums_with_stride() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = rand_tensor(&mut rng, &[1, 1, 4, 4]);
    let mut t = Tape::new();
    let x = t.constant(xv.clone());
    let w = t.constant(Tensor::full([1, 1, 2, 2], 1.0));
    let y = t.conv2d(x, w, 2, 0).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 2, 2]);
    for oy in 0..2 {
        for ox in 0..2 {
            let want: f64 = (0..2)
                .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                .map(|(dy, dx)| xv.at(&[0, 0, 2 * oy + dy, 2 * ox + dx]))
                .sum();
            assert!((t.value(y).at(&[0, 0, oy, ox]) - want).abs() < 1e-14);
        }
    }
}

#[test]
fn conv2d_matches_naive_loop_with_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xv = rand_tensor(&mut rng, &[2, 3, 6, 5]);
    let wv = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let mut t = Tape::new();
    let x = t.constant(xv.clone());
    let w = t.constant(wv.clone());
    let y = t.conv2d(x, w, 1, 1).unwrap();
    assert!(t.value(y).max_abs_diff(&naive_conv(&xv, &wv, 1, 1)) < 1e-13);
}

#[test]
fn conv2d_rejects_untiled_stride() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::zeros([1, 1, 5, 5]));
    let w = t.constant(Tensor::zeros([1, 1, 2, 2]));
    assert!(t.conv2d(x, w, 2, 0).is_err());
}

#[test]
fn conv2d_gradient_check() {
    let err = check(&[&[2, 2, 5, 5], &[3, 2, 3, 3]], 7, |t, v| t.conv2d(v[0], v[1], 2, 1).unwrap());
    assert!(err < 1e-5, "{err}");
}

#[test]
fn bilinear_identity_constant_and_corner_average() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xv = rand_tensor(&mut rng, &[1, 2, 3, 5]);
    let mut t = Tape::new();
    let x = t.constant(xv.clone());
    let same = t.bilinear_resize(x, 3, 5).unwrap();
    assert_eq!(t.value(same), &xv);

    let c = t.constant(Tensor::full([1, 1, 4, 6], 2.5));
    for (h, w) in [(1, 1), (2, 3), (7, 9)] {
        let r = t.bilinear_resize(c, h, w).unwrap();
        assert!(t.value(r).data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }

    let g = t.constant(Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let one = t.bilinear_resize(g, 1, 1).unwrap();
    assert_eq!(t.value(one).data(), &[1.5]);
}

#[test]
fn softmax_values() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full([5], 0.3));
    let y = t.softmax(x, 0).unwrap();
    assert!(t.value(y).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    let z = t.constant(Tensor::new([2], vec![0.0, 3f64.ln()]).unwrap());
    let p = t.softmax(z, 0).unwrap();
    assert!((t.value(p).data()[0] - 0.25).abs() < 1e-15);
    assert!((t.value(p).data()[1] - 0.75).abs() < 1e-15);
}

proptest! {
    #[test]
    fn softmax_is_a_probability_vector(v in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut t = Tape::new();
        let n = v.len();
        let x = t.constant(Tensor::new([n], v).unwrap());
        let y = t.softmax(x, 0).unwrap();
        let s: f64 = t.value(y).data().iter().sum();
        prop_assert!((s - 1.0).abs() < 1e-12);
        prop_assert!(t.value(y).data().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn reshape_permute_roundtrip(a in 1usize..4, b in 1usize..4, c in 1usize..4, seed in 0u64..100) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xv = rand_tensor(&mut rng, &[a, b, c]);
        let mut t = Tape::new();
        let x = t.constant(xv.clone());
        let p = t.permute(x, &[2, 0, 1]).unwrap();
        let q = t.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(t.value(q), &xv);
    }
}

#[test]
fn every_primitive_passes_gradient_check() {
    type Case = (&'static str, Vec<Vec<usize>>, Box<dyn Fn(&mut Tape, &[Var]) -> Var>);
    let lap = Arc::new(
        CsrMatrix::from_triplets(4, 4, &[(0, 0, 0.5), (0, 1, -0.3), (1, 0, -0.3), (2, 3, 0.7), (3, 2, 0.7), (1, 1, -0.2)]).unwrap(),
    );
    let idx = Arc::new(vec![2usize, 0, 2, 1]);
    let cases: Vec<Case> = vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("div", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| {
            let d = t.add_scalar(v[1], 3.0);
            t.div(v[0], d).unwrap()
        })),
        ("neg_scale", vec![vec![5]], Box::new(|t, v| {
            let n = t.neg(v[0]);
            t.scale(n, 2.5)
        })),
        ("relu", vec![vec![6]], Box::new(|t, v| t.relu(v[0]))),
        ("sigmoid", vec![vec![6]], Box::new(|t, v| t.sigmoid(v[0]))),
        ("exp", vec![vec![6]], Box::new(|t, v| t.exp(v[0]))),
        ("ln", vec![vec![6]], Box::new(|t, v| {
            let p = t.add_scalar(v[0], 2.0);
            t.ln(p)
        })),
        ("sqrt", vec![vec![6]], Box::new(|t, v| {
            let p = t.add_scalar(v[0], 1.5);
            t.sqrt(p)
        })),
        ("abs", vec![vec![6]], Box::new(|t, v| t.abs(v[0]))),
        ("square", vec![vec![6]], Box::new(|t, v| t.square(v[0]))),
        ("sum_axis", vec![vec![2, 3, 4]], Box::new(|t, v| t.sum_axis(v[0], 1).unwrap())),
        ("mean_axis", vec![vec![2, 3, 4]], Box::new(|t, v| t.mean_axis(v[0], 2).unwrap())),
        ("min_axis", vec![vec![3, 5]], Box::new(|t, v| t.min_axis(v[0], 1).unwrap())),
        ("softmax", vec![vec![2, 5, 3]], Box::new(|t, v| t.softmax(v[0], 1).unwrap())),
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 5]], Box::new(|t, v| t.bmm(v[0], v[1]).unwrap())),
        ("spmm", vec![vec![2, 4, 3]], Box::new(move |t, v| t.spmm(&lap, v[0]).unwrap())),
        ("permute", vec![vec![2, 3, 4]], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]).unwrap())),
        ("broadcast", vec![vec![3, 1]], Box::new(|t, v| t.broadcast_to(v[0], &[2, 3, 4]).unwrap())),
        ("concat", vec![vec![2, 3], vec![2, 1]], Box::new(|t, v| t.concat(&[v[0], v[1]], 1).unwrap())),
        ("index_select", vec![vec![2, 3, 2]], Box::new(move |t, v| t.index_select(v[0], 1, &idx).unwrap())),
        ("conv2d", vec![vec![1, 2, 4, 4], vec![2, 2, 3, 3]], Box::new(|t, v| t.conv2d(v[0], v[1], 1, 1).unwrap())),
        ("conv2d_asym_pad", vec![vec![1, 2, 1, 5], vec![3, 2, 1, 3]], Box::new(|t, v| t.conv2d_padded(v[0], v[1], 1, 0, 1).unwrap())),
        ("max_pool2d", vec![vec![1, 2, 4, 6]], Box::new(|t, v| t.max_pool2d(v[0], 2).unwrap())),
        ("upsample", vec![vec![1, 2, 2, 3]], Box::new(|t, v| t.upsample_nearest(v[0], 2).unwrap())),
        ("bilinear_down", vec![vec![1, 2, 6, 4]], Box::new(|t, v| t.bilinear_resize(v[0], 3, 2).unwrap())),
        ("bilinear_up", vec![vec![1, 1, 3, 3]], Box::new(|t, v| t.bilinear_resize(v[0], 5, 7).unwrap())),
    ];
    for (i, (name, shapes, f)) in cases.iter().enumerate() {
        let shapes: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let err = check(&shapes, 100 + i as u64, f);
        println!("{name:>16}: max rel err {err:.2e}");
        assert!(err < 1e-5, "{name}: {err}");
    }
}

#[test]
fn identical_inputs_give_bit_identical_outputs() {
    let run = || {
        let (store, ids) = store_of(&[&[2, 3, 8, 8], &[4, 3, 3, 3]], 11);
        let mut t = Tape::with_params(&store);
        let x = t.param(ids[0]);
        let w = t.param(ids[1]);
        let y = t.conv2d(x, w, 1, 1).unwrap();
        let y = t.relu(y);
        let y = t.max_pool2d(y, 2).unwrap();
        t.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_populates_every_reachable_param() {
    let (store, ids) = store_of(&[&[3, 3], &[3], &[2]], 12);
    let mut t = Tape::with_params(&store);
    let a = t.param(ids[0]);
    let b = t.param(ids[1]);
    let y = t.matmul(a, a).unwrap();
    let y = t.add_bcast(y, b).unwrap();
    let s = t.sum(y);
    let grads = t.backward(s).unwrap().into_param_grads(&store);
    assert!(grads.get(ids[0]).is_some());
    assert!(grads.get(ids[1]).is_some());
    assert!(grads.get(ids[2]).is_none());
}
