//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use meshspace::depthhead::{compute_bin_centers, compute_bin_widths, depth_from_bins};
use meshspace::gcn::ChebConvLayer;
use meshspace::harness::metrics::compute_metrics;
use meshspace::harness::synth::gen_samples;
use meshspace::harness::train::{evaluate_samples, predict_samples, CHECKPOINT_FILE, LOSS_CSV_FILE};
use meshspace::harness::{
    evaluate, export_metrics, export_obj, gen_synthetic_dataset, load_dataset, load_run, resolve_topology, train,
    Batch, HandMeshModel, HandTemplate, PckSpace, Prediction, RunConfig, Sample,
};
use meshspace::losses::{
    loss_chamfer_bins, loss_edge, loss_mesh_and_pose3d, loss_normal, loss_p2d, loss_si_depth, FaceEdges,
};
use meshspace::meshgraph::{build_scaled_laplacian, coarsen_hierarchy, load_topology, GraphHierarchy, MeshGraph};
use meshspace::tensor::{grad_check, GradCheckOptions, ParamStore, Tape, Tensor, Var};
use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MANO_ENV: &str = "MESHSPACE_MANO_TOPOLOGY";

enum Outcome {
    Pass(String),
    Fail(String),
}

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn weighted_sum(t: &mut Tape, y: Var) -> Var {
    let shape = t.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i as f64) * 0.917).cos() + 0.2).collect()).unwrap();
    let w = t.constant(w);
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

fn primitive_grad_errors() -> Vec<(&'static str, f64)> {
    type Op = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
    let lap = Arc::new(
        meshspace::tensor::CsrMatrix::from_triplets(3, 3, &[(0, 0, 0.4), (0, 1, -0.6), (1, 0, -0.6), (2, 2, -1.0)]).unwrap(),
    );
    let idx = Arc::new(vec![1usize, 1, 0]);
    let cases: Vec<(&'static str, Vec<Vec<usize>>, Op)> = vec![
        ("add", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("sub", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
        ("mul", vec![vec![2, 3], vec![2, 3]], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        ("div", vec![vec![4], vec![4]], Box::new(|t, v| {
            let d = t.add_scalar(v[1], 2.5);
            t.div(v[0], d).unwrap()
        })),
        ("scale", vec![vec![4]], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("relu", vec![vec![5]], Box::new(|t, v| t.relu(v[0]))),
        ("sigmoid", vec![vec![5]], Box::new(|t, v| t.sigmoid(v[0]))),
        ("exp", vec![vec![5]], Box::new(|t, v| t.exp(v[0]))),
        ("ln", vec![vec![5]], Box::new(|t, v| {
            let p = t.add_scalar(v[0], 1.5);
            t.ln(p)
        })),
        ("sqrt", vec![vec![5]], Box::new(|t, v| {
            let p = t.add_scalar(v[0], 1.5);
            t.sqrt(p)
        })),
        ("abs", vec![vec![5]], Box::new(|t, v| t.abs(v[0]))),
        ("square", vec![vec![5]], Box::new(|t, v| t.square(v[0]))),
        ("sum_axis", vec![vec![2, 3, 2]], Box::new(|t, v| t.sum_axis(v[0], 1).unwrap())),
        ("mean_axis", vec![vec![2, 3, 2]], Box::new(|t, v| t.mean_axis(v[0], 0).unwrap())),
        ("min_axis", vec![vec![2, 4]], Box::new(|t, v| t.min_axis(v[0], 1).unwrap())),
        ("softmax", vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0], 1).unwrap())),
        ("matmul", vec![vec![2, 3], vec![3, 4]], Box::new(|t, v| t.matmul(v[0], v[1]).unwrap())),
        ("bmm", vec![vec![2, 2, 3], vec![2, 3, 2]], Box::new(|t, v| t.bmm(v[0], v[1]).unwrap())),
        ("spmm", vec![vec![2, 3, 2]], Box::new(move |t, v| t.spmm(&lap, v[0]).unwrap())),
        ("permute", vec![vec![2, 3, 2]], Box::new(|t, v| t.permute(v[0], &[1, 2, 0]).unwrap())),
        ("broadcast", vec![vec![1, 3]], Box::new(|t, v| t.broadcast_to(v[0], &[2, 2, 3]).unwrap())),
        ("concat", vec![vec![2, 2], vec![2, 3]], Box::new(|t, v| t.concat(&[v[0], v[1]], 1).unwrap())),
        ("index_select", vec![vec![3, 2]], Box::new(move |t, v| t.index_select(v[0], 0, &idx).unwrap())),
        ("narrow", vec![vec![2, 5]], Box::new(|t, v| t.narrow(v[0], 1, 1, 3).unwrap())),
        ("conv2d", vec![vec![1, 2, 5, 5], vec![3, 2, 3, 3]], Box::new(|t, v| t.conv2d(v[0], v[1], 2, 1).unwrap())),
        ("max_pool2d", vec![vec![1, 1, 4, 4]], Box::new(|t, v| t.max_pool2d(v[0], 2).unwrap())),
        ("upsample", vec![vec![1, 1, 2, 2]], Box::new(|t, v| t.upsample_nearest(v[0], 2).unwrap())),
        ("bilinear", vec![vec![1, 2, 3, 4]], Box::new(|t, v| t.bilinear_resize(v[0], 5, 3).unwrap())),
    ];
    let mut out = Vec::new();
    for (i, (name, shapes, f)) in cases.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + i as u64);
        let mut store = ParamStore::new();
        let ids: Vec<_> = shapes
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let n = s.iter().product();
                let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                store.add(format!("x{k}"), Tensor::new(s.clone(), data).unwrap())
            })
            .collect();
        let r = grad_check(
            &store,
            |t| {
                let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect();
                let y = f(t, &vars);
                Ok(weighted_sum(t, y))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        out.push((*name, r.max_rel_err));
    }
    out
}

fn criterion_gradients() -> Check {
    let t0 = Instant::now();
    let prims = primitive_grad_errors();
    let (worst_name, worst_prim) = prims.iter().fold(("", 0.0f64), |a, &(n, e)| if e > a.1 { (n, e) } else { a });

    let cfg = RunConfig::tiny();
    let topo = resolve_topology(&cfg.topology).map_err(e2s)?;
    let template = HandTemplate::by_name(&cfg.data.synth.template).map_err(e2s)?;
    let samples = gen_samples(&template, &cfg.data.synth, 2, 11).map_err(e2s)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs).map_err(e2s)?;
    let mut store = ParamStore::new();
    let model = HandMeshModel::build(&cfg, &topo, &mut store).map_err(e2s)?;
    // zero biases on a zero background put every ReLU exactly on its kink; move off it
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.name(id).ends_with(".bias") {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
    }
    let objective = |t: &mut Tape| -> meshspace::Result<Var> {
        let x = t.constant(batch.images.clone());
        let out = model.forward(t, x)?;
        Ok(model.losses(t, &out, &batch)?.0)
    };
    let f0 = {
        let mut t = Tape::with_params(&store);
        let v = objective(&mut t).map_err(e2s)?;
        t.value(v).item()
    };
    // derivatives below the resolution of a central difference on |f| are compared against it
    let h = 1e-6;
    let opts = GradCheckOptions {
        h,
        floor: 1e5 * f64::EPSILON * f0.abs() / h,
        max_coords_per_param: Some(3),
        seed: 5,
    };
    let report = grad_check(&store, objective, &opts).map_err(e2s)?;
    let secs = t0.elapsed().as_secs_f64();
    let detail = format!(
        "{} primitives, worst {worst_name} {worst_prim:.2e}; full pipeline (loss {f0:.1}, step {h:e}, floor {:.1e}) {} coords, max rel err {:.2e} at {:?}; {secs:.1}s",
        prims.len(),
        opts.floor,
        report.checked,
        report.max_rel_err,
        report.worst
    );
    ensure(worst_prim < 1e-4 && report.max_rel_err < 1e-4 && secs < 120.0, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> MeshGraph {
    let mut edges = Vec::new();
    // a random forest plus extra chords; some vertices may stay isolated
    for i in 1..n {
        if rng.random_bool(0.9) {
            edges.push((rng.random_range(0..i), i, 1.0));
        }
    }
    for _ in 0..rng.random_range(0..=n) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.push((a, b, rng.random_range(0.5..2.0)));
        }
    }
    MeshGraph::from_weighted_edges(n, &edges).unwrap()
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Power-series coefficients of the Chebyshev polynomial of the first kind.
fn chebyshev_coeffs(k: usize) -> Vec<f64> {
    let mut c = vec![0.0; k + 1];
    if k == 0 {
        c[0] = 1.0;
        return c;
    }
    for m in 0..=k / 2 {
        let p = k - 2 * m;
        let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
        c[p] += (k as f64 / 2.0) * sign * factorial(k - m - 1) / (factorial(m) * factorial(p)) * 2f64.powi(p as i32);
    }
    c
}

fn dense_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..m {
                c[i * m + j] += av * b[p * m + j];
            }
        }
    }
    c
}

fn criterion_chebyshev() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for g in 0..100 {
        let n = rng.random_range(1..=32);
        let graph = random_graph(&mut rng, n);
        let lap = Arc::new(build_scaled_laplacian(&graph).map_err(e2s)?.matrix);
        let l = lap.to_dense();
        // powers of the rescaled Laplacian
        let mut powers = vec![{
            let mut id = vec![0.0; n * n];
            for i in 0..n {
                id[i * n + i] = 1.0;
            }
            id
        }];
        for p in 1..5 {
            let next = dense_matmul(&powers[p - 1], &l, n, n, n);
            powers.push(next);
        }
        for order in 1..=5 {
            let (cin, cout) = (rng.random_range(1..4), rng.random_range(1..4));
            let mut store = ParamStore::new();
            let layer = ChebConvLayer::new(&mut store, &format!("g{g}"), lap.clone(), order, cin, cout, 1.0, &mut rng)
                .map_err(e2s)?;
            let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
            store.set(layer.bias, Tensor::new([cout], bias.clone()).unwrap()).map_err(e2s)?;
            let x: Vec<f64> = (0..n * cin).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut tape = Tape::with_params(&store);
            let xv = tape.constant(Tensor::new([1, n, cin], x.clone()).unwrap());
            let y = layer.forward(&mut tape, xv).map_err(e2s)?;
            let got = tape.value(y).data().to_vec();

            let w = store.get(layer.weight).data();
            let mut want = vec![0.0; n * cout];
            for i in 0..n {
                want[i * cout..(i + 1) * cout].copy_from_slice(&bias);
            }
            for k in 0..order {
                let coeffs = chebyshev_coeffs(k);
                let mut tk = vec![0.0; n * n];
                for (p, &c) in coeffs.iter().enumerate() {
                    for (t, &v) in tk.iter_mut().zip(&powers[p]) {
                        *t += c * v;
                    }
                }
                let tx = dense_matmul(&tk, &x, n, n, cin);
                let wk = &w[k * cin * cout..(k + 1) * cin * cout];
                let term = dense_matmul(&tx, wk, n, cin, cout);
                for (a, b) in want.iter_mut().zip(term) {
                    *a += b;
                }
            }
            let diff = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(diff);
            cases += 1;
        }
    }
    let detail = format!("{cases} graph/order cases, max abs diff {worst:.2e}");
    ensure(worst < 1e-10, || detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 3

fn criterion_bins() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let eps = 1e-3;
    let mut worst_sum = 0.0f64;
    for trial in 0..10_000 {
        let n = rng.random_range(1..=64);
        let scale = [1.0, 1e3, 1e6][trial % 3];
        let y: Vec<f64> = (0..n)
            .map(|_| match rng.random_range(0..5) {
                0 => 1e6,
                1 => -1e6,
                _ => rng.random_range(-1.0..1.0) * scale,
            })
            .collect();
        let lo = rng.random_range(-5.0..5.0);
        let hi = lo + rng.random_range(0.01..10.0);
        let b = compute_bin_widths(&y, eps);
        let s: f64 = b.iter().sum();
        worst_sum = worst_sum.max((s - 1.0).abs());
        ensure((s - 1.0).abs() <= 1e-9, || format!("trial {trial}: widths sum to {s}"))?;
        let c = compute_bin_centers(&b, lo, hi).map_err(e2s)?;
        ensure(c.iter().all(|&v| lo < v && v < hi), || format!("trial {trial}: center outside ({lo}, {hi})"))?;
        ensure(c.windows(2).all(|w| w[0] < w[1]), || format!("trial {trial}: centers not increasing"))?;
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let p: Vec<f64> = e.iter().map(|v| v / z).collect();
        let d = depth_from_bins(&c, &p);
        ensure(lo < d && d < hi, || format!("trial {trial}: depth {d} outside ({lo}, {hi})"))?;
    }
    let uniform = compute_bin_centers(&compute_bin_widths(&[0.3; 4], eps), 0.0, 1.0).map_err(e2s)?;
    ensure(uniform == vec![0.125, 0.375, 0.625, 0.875], || format!("uniform centers {uniform:?}"))?;
    Ok(format!("10000 partitions, max |sum - 1| {worst_sum:.1e}; uniform centers exact"))
}

// ---------------------------------------------------------------- 4

fn scalar(t: &Tape, v: Var) -> f64 {
    t.value(v).item()
}

fn criterion_losses() -> Check {
    let cfg = RunConfig::tiny();
    let template = HandTemplate::by_name(&cfg.data.synth.template).map_err(e2s)?;
    let samples = gen_samples(&template, &cfg.data.synth, 2, 4).map_err(e2s)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let batch = Batch::from_samples(&refs).map_err(e2s)?;
    let mesh = template.mesh();
    let edges = FaceEdges::new(mesh);
    let mut t = Tape::new();
    let j2d = t.constant(batch.j2d.clone());
    let p2d = loss_p2d(&mut t, j2d, j2d).map_err(e2s)?;
    let d = t.constant(Tensor::new([2, 1], batch.depth.data().to_vec()).unwrap());
    let si = loss_si_depth(&mut t, d, d, 0.85).map_err(e2s)?;
    let targets = t.constant(batch.depth.clone());
    let centers = t.constant(Tensor::new([1, 2], batch.depth.data().to_vec()).unwrap());
    let bins = loss_chamfer_bins(&mut t, centers, targets).map_err(e2s)?;
    let v = t.constant(batch.verts.clone());
    let j = t.constant(batch.joints.clone());
    let (lv, lp) = loss_mesh_and_pose3d(&mut t, v, v, j, j).map_err(e2s)?;
    let normal = loss_normal(&mut t, v, &batch.verts, mesh, &edges).map_err(e2s)?.value;
    let edge = loss_edge(&mut t, v, &batch.verts, &edges).map_err(e2s)?;
    let at_gt = [
        ("p2d", scalar(&t, p2d)),
        ("depth", scalar(&t, si)),
        ("bins", scalar(&t, bins)),
        ("vertex", scalar(&t, lv)),
        ("pose3d", scalar(&t, lp)),
        ("edge", scalar(&t, edge)),
    ];
    for (name, val) in at_gt {
        ensure(val == 0.0, || format!("{name} loss at ground truth is {val}"))?;
    }
    let n = scalar(&t, normal);
    ensure(n.abs() <= 1e-9, || format!("normal loss at ground truth is {n}"))?;

    let mut t = Tape::new();
    let c = t.constant(Tensor::new([1, 1], vec![1.0]).unwrap());
    let x = t.constant(Tensor::new([2], vec![0.0, 2.0]).unwrap());
    let ch = loss_chamfer_bins(&mut t, c, x).map_err(e2s)?;
    let ch = scalar(&t, ch);
    ensure((ch - 3.0).abs() <= 1e-12, || format!("chamfer {{0,2}} vs {{1}} = {ch}"))?;

    let (pred, gt) = (2.7f64, 1.9f64);
    let p = t.constant(Tensor::new([1, 1], vec![pred]).unwrap());
    let g = t.constant(Tensor::new([1, 1], vec![gt]).unwrap());
    let si = loss_si_depth(&mut t, p, g, 0.85).map_err(e2s)?;
    let si = scalar(&t, si);
    let want = (pred.ln() - gt.ln()).abs() * 0.15f64.sqrt();
    ensure((si - want).abs() <= 1e-12, || format!("single-point SI {si} vs {want}"))?;

    let tri = MeshGraph::from_faces(3, vec![[0, 1, 2]]).unwrap();
    let tri_edges = FaceEdges::new(&tri);
    let h = 3f64.sqrt() / 2.0;
    let unit = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.5, h, 0.0];
    let gt_t = Tensor::new([1, 3, 3], unit.to_vec()).unwrap();
    let pv = t.constant(Tensor::new([1, 3, 3], unit.iter().map(|v| v * 2.0).collect()).unwrap());
    let e = loss_edge(&mut t, pv, &gt_t, &tri_edges).map_err(e2s)?;
    let e = scalar(&t, e);
    ensure((e - 3.0).abs() <= 1e-12, || format!("edge 1 -> 2 gives {e}"))?;
    Ok(format!("7 terms zero at ground truth (normal {n:.1e}); chamfer 3, SI {si:.6}, edge 3"))
}

// ---------------------------------------------------------------- 5

fn grid_graph(w: usize, h: usize) -> MeshGraph {
    let mut faces = Vec::new();
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let i = r * w + c;
            faces.push([i, i + 1, i + w]);
            faces.push([i + 1, i + w + 1, i + w]);
        }
    }
    MeshGraph::from_faces(w * h, faces).unwrap()
}

fn criterion_locality() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let graphs = [
        ("toy template", HandTemplate::toy().mesh().clone()),
        ("6x7 grid", grid_graph(6, 7)),
        ("random 30", random_graph(&mut rng, 30)),
    ];
    let mut checks = 0;
    for (name, g) in &graphs {
        let n = g.num_vertices;
        let lap = Arc::new(build_scaled_laplacian(g).map_err(e2s)?.matrix);
        for order in 1..=5 {
            let mut store = ParamStore::new();
            let layer = ChebConvLayer::new(&mut store, "c", lap.clone(), order, 2, 3, 1.0, &mut rng).map_err(e2s)?;
            let run = |x: &[f64]| -> Vec<f64> {
                let mut t = Tape::with_params(&store);
                let xv = t.constant(Tensor::new([1, n, 2], x.to_vec()).unwrap());
                let y = layer.forward(&mut t, xv).unwrap();
                t.value(y).data().to_vec()
            };
            for _ in 0..4 {
                let target = rng.random_range(0..n);
                let dist = g.bfs_distances(target);
                let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut far = x.clone();
                let mut perturbed = 0;
                for v in 0..n {
                    if dist[v] > order - 1 {
                        far[2 * v] += rng.random_range(1.0..5.0);
                        far[2 * v + 1] -= rng.random_range(1.0..5.0);
                        perturbed += 1;
                    }
                }
                let (a, b) = (run(&x), run(&far));
                ensure(a[target * 3..target * 3 + 3] == b[target * 3..target * 3 + 3], || {
                    format!("{name}, K={order}: output at {target} moved after perturbing {perturbed} far vertices")
                })?;
                checks += 1;
            }
        }
    }
    Ok(format!("{checks} perturbation checks on 3 graphs, K = 1..5, all exact"))
}

// ---------------------------------------------------------------- 6

fn hierarchy_structure(h: &GraphHierarchy, levels: usize) -> std::result::Result<Vec<usize>, String> {
    ensure(h.levels.len() == levels + 1, || format!("{} levels", h.levels.len()))?;
    for l in 0..levels {
        let mut children = vec![0usize; h.levels[l + 1].num_vertices];
        for &p in &h.parent_maps[l] {
            ensure(p < children.len(), || format!("level {l}: parent {p} out of range"))?;
            children[p] += 1;
        }
        ensure(children.iter().all(|&c| c <= 2), || format!("level {l}: a coarse node has more than 2 children"))?;
    }
    for (l, (g, mask)) in h.levels.iter().zip(&h.fake_mask).enumerate() {
        let deg = g.degrees();
        ensure(mask.iter().zip(&deg).all(|(&fake, &d)| !fake || d == 0), || format!("level {l}: fake node with edges"))?;
    }
    Ok(h.level_sizes())
}

fn rebuild_identical(g: &MeshGraph, levels: usize) -> std::result::Result<GraphHierarchy, String> {
    let a = coarsen_hierarchy(g, levels).map_err(e2s)?;
    let b = coarsen_hierarchy(g, levels).map_err(e2s)?;
    let (ja, jb) = (serde_json::to_vec(&a).map_err(e2s)?, serde_json::to_vec(&b).map_err(e2s)?);
    ensure(ja == jb, || "rebuilds differ".into())?;
    Ok(a)
}

fn criterion_coarsening() -> Outcome {
    let mut notes = Vec::new();
    for t in [HandTemplate::toy(), HandTemplate::dense()] {
        let res = rebuild_identical(t.mesh(), 3).and_then(|h| hierarchy_structure(&h, 3));
        match res {
            Ok(sizes) => notes.push(format!("{} ({} verts, {} edges) {sizes:?}", t.name, t.num_vertices(), t.mesh().num_edges())),
            Err(e) => return Outcome::Fail(format!("{}: {e}", t.name)),
        }
    }
    match std::env::var_os(MANO_ENV) {
        None => Outcome::Pass(format!("{}; 778-vertex check skipped, set {MANO_ENV} to a topology file", notes.join("; "))),
        Some(path) => {
            let res = load_topology(Path::new(&path)).map_err(e2s).and_then(|topo| {
                let g = &topo.mesh;
                ensure(g.num_vertices == 778 && g.num_edges() == 3187, || {
                    format!("{} vertices / {} edges, expected 778 / 3187", g.num_vertices, g.num_edges())
                })?;
                rebuild_identical(g, 3).and_then(|h| hierarchy_structure(&h, 3))
            });
            match res {
                Ok(sizes) => {
                    notes.push(format!("778-vertex topology {sizes:?}"));
                    Outcome::Pass(notes.join("; "))
                }
                Err(e) => Outcome::Fail(format!("778-vertex topology: {e}")),
            }
        }
    }
}

// ---------------------------------------------------------------- 7

fn criterion_overfit() -> Check {
    let cfg = RunConfig::overfit();
    let dir = tempfile::tempdir().map_err(e2s)?;
    let t0 = Instant::now();
    let report = train(&cfg, dir.path(), None).map_err(e2s)?;
    let secs = t0.elapsed().as_secs_f64();
    let totals: Vec<f64> = report.records.iter().map(|r| r.total).collect();
    ensure(totals.len() >= 20, || format!("only {} steps", totals.len()))?;
    let first = totals[..10].iter().sum::<f64>() / 10.0;
    let last = totals[totals.len() - 10..].iter().sum::<f64>() / 10.0;
    let drop = 1.0 - last / first;
    let eval = evaluate_samples(&report.model, &report.store, &report.train_samples, cfg.batch_size, PckSpace::Camera3d)
        .map_err(e2s)?;
    let range = cfg.depth.d_max - cfg.depth.d_min;
    let depth_frac = eval.depth_error / range;
    let terms = report.records.last().map(|r| r.terms).unwrap_or_default();
    let detail = format!(
        "{} steps in {secs:.0}s; loss {first:.3} -> {last:.3} (drop {:.1}%, need 90%); PJ {:.2} mm (need < 5); \
         depth error {:.2}% of range (need < 5%); final terms p2d {:.4} d {:.4} b {:.4} v {:.4} p3d {:.4} n {:.4} e {:.4}",
        totals.len(),
        drop * 100.0,
        eval.metrics.pj,
        depth_frac * 100.0,
        terms[0],
        terms[1],
        terms[2],
        terms[3],
        terms[4],
        terms[5],
        terms[6],
    );
    ensure(
        totals.len() == 500 && drop >= 0.9 && eval.metrics.pj < 5.0 && depth_frac < 0.05 && secs < 900.0,
        || detail.clone(),
    )?;
    Ok(detail)
}

// ---------------------------------------------------------------- 8

fn similarity(rng: &mut ChaCha8Rng) -> (Rotation3<f64>, f64, Vector3<f64>) {
    let axis = Unit::new_normalize(Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0) + 1e-3,
    ));
    let rot = Rotation3::from_axis_angle(&axis, rng.random_range(-3.1..3.1));
    let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    (rot, rng.random_range(0.3..3.0), t)
}

fn apply(p: &[[f64; 3]], f: impl Fn([f64; 3]) -> [f64; 3]) -> Vec<[f64; 3]> {
    p.iter().map(|&v| f(v)).collect()
}

fn perfect(s: &Sample) -> Prediction {
    Prediction {
        j2d: s.j2d.clone(),
        verts_rel: s.v3d_rel.clone(),
        joints_rel: s.j3d_rel.clone(),
        depth_norm: s.depth_norm(),
        root: s.root(),
        verts_cam: s.verts_cam(),
        joints_cam: s.joints_cam(),
    }
}

fn criterion_metrics() -> Check {
    let cfg = RunConfig::tiny();
    let template = HandTemplate::by_name(&cfg.data.synth.template).map_err(e2s)?;
    let samples = gen_samples(&template, &cfg.data.synth, 4, 8).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(88);

    let exact: Vec<Prediction> = samples.iter().map(perfect).collect();
    let m = compute_metrics(&exact, &samples, PckSpace::Camera3d).map_err(e2s)?.metrics;
    ensure(m.pj < 1e-9 && m.pv < 1e-9 && m.cj == 0.0 && m.cv == 0.0 && m.auc == 1.0, || format!("perfect predictions gave {m:?}"))?;

    let noisy: Vec<Prediction> = exact
        .iter()
        .map(|p| {
            let mut q = p.clone();
            let jitter = |v: [f64; 3], r: &mut ChaCha8Rng| [v[0] + r.random_range(-0.01..0.01), v[1] + r.random_range(-0.01..0.01), v[2] + r.random_range(-0.01..0.01)];
            q.joints_cam = q.joints_cam.iter().map(|&v| jitter(v, &mut rng)).collect();
            q.verts_cam = q.verts_cam.iter().map(|&v| jitter(v, &mut rng)).collect();
            q
        })
        .collect();
    let base = compute_metrics(&noisy, &samples, PckSpace::Camera3d).map_err(e2s)?.metrics;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let moved: Vec<Prediction> = noisy
            .iter()
            .map(|p| {
                let (r, s, t) = similarity(&mut rng);
                let f = |v: [f64; 3]| {
                    let w = r * Vector3::from(v) * s + t;
                    [w.x, w.y, w.z]
                };
                let mut q = p.clone();
                q.joints_cam = apply(&p.joints_cam, f);
                q.verts_cam = apply(&p.verts_cam, f);
                q
            })
            .collect();
        let m = compute_metrics(&moved, &samples, PckSpace::Camera3d).map_err(e2s)?.metrics;
        worst = worst.max((m.pj - base.pj).abs()).max((m.pv - base.pv).abs());
    }
    ensure(worst < 1e-9, || format!("PA error moved by {worst:.2e} mm under similarity transforms"))?;

    let shifted: Vec<Prediction> = exact
        .iter()
        .map(|p| {
            let mut q = p.clone();
            let up = |v: [f64; 3]| [v[0], v[1], v[2] + 0.010];
            q.joints_cam = apply(&p.joints_cam, up);
            q.verts_cam = apply(&p.verts_cam, up);
            q
        })
        .collect();
    let m = compute_metrics(&shifted, &samples, PckSpace::Camera3d).map_err(e2s)?.metrics;
    ensure((m.cj - 10.0).abs() < 1e-9 && m.pj < 1e-9, || format!("+10 mm offset gave CJ {} PJ {}", m.cj, m.pj))?;
    Ok(format!(
        "PA change under 20 similarities {worst:.1e} mm; +10 mm offset -> CJ {:.12} mm, PJ {:.1e}; perfect AUC 1",
        m.cj, m.pj
    ))
}

// ---------------------------------------------------------------- 9

fn files_in(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn criterion_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(e2s)?;
    let root = tmp.path();
    let mut cfg = RunConfig::tiny();
    let (da, db) = (root.join("data_a"), root.join("data_b"));
    gen_synthetic_dataset(6, &cfg.data.synth, 21, &da).map_err(e2s)?;
    gen_synthetic_dataset(6, &cfg.data.synth, 21, &db).map_err(e2s)?;
    let fa = files_in(&da);
    ensure(fa == files_in(&db), || "generated datasets differ".into())?;

    cfg.data.train_dir = Some(da.clone());
    let mut outputs = Vec::new();
    for run in ["run_a", "run_b"] {
        let out = root.join(run);
        train(&cfg, &out, None).map_err(e2s)?;
        let ckpt = out.join(CHECKPOINT_FILE);
        let loaded = load_run(&ckpt).map_err(e2s)?;
        let data = load_dataset(&da).map_err(e2s)?;
        let (summary, _) = evaluate(&loaded, &data.samples, 3, PckSpace::Camera3d).map_err(e2s)?;
        export_metrics(&summary, &out.join("metrics.json"), &out.join("metrics.csv")).map_err(e2s)?;
        let pred = predict_samples(&loaded.model, &loaded.store, &data.samples[..1], 1).map_err(e2s)?;
        export_obj(&pred[0].verts_cam, &loaded.model.mesh.faces, &out.join("mesh.obj")).map_err(e2s)?;
        outputs.push(out);
    }
    for name in [CHECKPOINT_FILE, LOSS_CSV_FILE, "metrics.json", "metrics.csv", "mesh.obj"] {
        let (a, b) = (fs::read(outputs[0].join(name)).map_err(e2s)?, fs::read(outputs[1].join(name)).map_err(e2s)?);
        ensure(a == b, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} dataset files, checkpoint, loss CSV, metrics and OBJ byte-identical", fa.len()))
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("1 gradient integrity", Box::new(|| criterion_gradients().into())),
        ("2 Chebyshev oracle equivalence", Box::new(|| criterion_chebyshev().into())),
        ("3 bin algebra", Box::new(|| criterion_bins().into())),
        ("4 loss calibration", Box::new(|| criterion_losses().into())),
        ("5 K-locality", Box::new(|| criterion_locality().into())),
        ("6 coarsening structure", Box::new(criterion_coarsening)),
        ("7 overfit demonstration", Box::new(|| criterion_overfit().into())),
        ("8 metric correctness", Box::new(|| criterion_metrics().into())),
        ("9 determinism", Box::new(|| criterion_determinism().into())),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|p| Outcome::Fail(format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Outcome::Pass(d) => println!("PASS  {name} [{secs:.1}s]: {d}"),
            Outcome::Fail(d) => {
                failed += 1;
                println!("FAIL  {name} [{secs:.1}s]: {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

impl From<Check> for Outcome {
    fn from(c: Check) -> Self {
        match c {
            Ok(d) => Outcome::Pass(d),
            Err(d) => Outcome::Fail(d),
        }
    }
}
