//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any of them failed. Criteria run one after another so timings
//! are not disturbed by each other.

#[path = "../../core/tests/common/mod.rs"]
mod oracle;

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::path::Path;
use std::process::Command as Process;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use haptex_core::corpus::{generate_synthetic_corpus, ArGrid};
use haptex_core::eval::anchor_projection;
use haptex_core::lpc::{ar_to_lsf, lsf_to_ar, ArCoeffs, LsfVector, AR_ORDER};
use haptex_core::nn::{self, BatchNorm, Ctx, Dropout, Linear, Param, Relu, ResBlock};
use haptex_core::render::{
    estimate_friction, run_trajectory, DeviceSample, FrictionAnchorSet, RenderConfig, RenderModel, ServoSim, Segment, TrajectoryScript,
};
use haptex_core::synth::{Interpolator, Provenance, Synthesizer};
use haptex_core::vae::{project_rows, project_rows_backward, Batch, StepOptions, TrainConfig, Vae, VaeDims};
use haptex_service::cli::{self, Command};
use haptex_service::server::{router, AppState, ServeConfig};
use http_body_util::BodyExt;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use tower::ServiceExt;

// allocation counter, active only on the thread that sets COUNTING
struct Counting;

thread_local! {
    static COUNTING: Cell<bool> = const { Cell::new(false) };
    static ALLOCS: Cell<usize> = const { Cell::new(0) };
}

fn note_alloc() {
    let _ = COUNTING.try_with(|c| {
        if c.get() {
            let _ = ALLOCS.try_with(|a| a.set(a.get() + 1));
        }
    });
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        note_alloc();
        System.alloc(layout)
    }
    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        note_alloc();
        System.alloc_zeroed(layout)
    }
    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, size: usize) -> *mut u8 {
        note_alloc();
        System.realloc(ptr, layout, size)
    }
    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

fn counted<R>(f: impl FnOnce() -> R) -> (R, usize) {
    ALLOCS.with(|a| a.set(0));
    COUNTING.with(|c| c.set(true));
    let r = f();
    COUNTING.with(|c| c.set(false));
    (r, ALLOCS.with(|a| a.get()))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

// ---------------------------------------------------------------- lpc

fn stability_closure() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let tensors: Vec<Array2<f64>> = (0..10_000)
        .map(|_| {
            // logit scales from tiny to saturating
            let scale = 10f64.powf(rng.random_range(-1.0..1.5));
            randn(18, AR_ORDER, &mut rng) * scale
        })
        .collect();
    let start = Instant::now();
    let mut polys = Vec::with_capacity(tensors.len() * 18);
    let mut errors = 0;
    for t in &tensors {
        match project_rows(t, AR_ORDER) {
            Ok(lsf) => {
                for row in lsf.rows() {
                    let v: [f64; AR_ORDER] = row.to_vec().try_into().unwrap();
                    match LsfVector::new(v).and_then(|l| lsf_to_ar(&l, 1.0)) {
                        Ok(ar) => polys.push(ar.a),
                        Err(_) => errors += 1,
                    }
                }
            }
            Err(_) => errors += 18,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = polys.len().div_ceil(threads);
    let unstable: usize = std::thread::scope(|s| {
        let handles: Vec<_> = polys
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().filter(|a| !oracle::poles_inside(&a[..], 1e-9)).count()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).sum()
    });
    outcome(
        errors == 0 && unstable == 0 && secs < 30.0,
        format!("{} polynomials, {errors} errors, {unstable} with a pole at or beyond 1 - 1e-9, {secs:.2} s", polys.len()),
    )
}

fn lsf_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    let mut errors = 0;
    for _ in 0..1000 {
        let a: [f64; AR_ORDER] = oracle::random_stable_ar(&mut rng, AR_ORDER, 0.95).try_into().unwrap();
        match ar_to_lsf(&ArCoeffs { a, variance: 1.0 }).and_then(|l| lsf_to_ar(&l, 1.0)) {
            Ok(back) => a.iter().zip(back.a.iter()).for_each(|(x, y)| worst = worst.max((x - y).abs())),
            Err(_) => errors += 1,
        }
    }
    outcome(errors == 0 && worst < 1e-6, format!("1000 order-21 polynomials, worst coefficient error {worst:.3e}, {errors} errors"))
}

// ---------------------------------------------------------------- synth

fn ar1_variance() -> Outcome {
    let mut a = [0.0; AR_ORDER];
    a[0] = 0.5;
    let closed = 1.0 / (1.0 - 0.25);
    let y = Synthesizer::<f64>::new(103).synthesize(&ArCoeffs { a, variance: 1.0 }, 1_000_000).unwrap();
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let var = y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64;
    let rel = (var / closed - 1.0).abs();
    outcome(rel < 0.02, format!("sample variance {var:.5} vs {closed:.5}, relative error {:.3}%", rel * 100.0))
}

fn grid(seed: u64) -> ArGrid {
    generate_synthetic_corpus(seed, 1).materials[0].ar_grid.clone()
}

fn grid_interpolation() -> Outcome {
    let mut node_err = 0.0f64;
    let mut node_hits = 0;
    for seed in 0..5 {
        let g = grid(seed);
        let interp = Interpolator::<f64>::new(&g).unwrap();
        for (i, e) in g.entries.iter().enumerate() {
            let p = interp.interpolate(e.force, e.speed);
            node_hits += (p.provenance == Provenance::Node(i)) as usize;
            node_err = node_err.max((p.ar.variance - e.variance).abs());
            let node = e.ar_coeffs();
            for (x, y) in p.ar.a.iter().zip(node.a.iter()).chain(p.lsf.0.iter().zip(e.lsf.iter())) {
                node_err = node_err.max((x - y).abs());
            }
        }
    }
    let g = grid(104);
    let interp = Interpolator::<f64>::new(&g).unwrap();
    let tris = interp.triangles();
    let mut shared = Vec::new();
    for (i, a) in tris.iter().enumerate() {
        for (j, b) in tris.iter().enumerate().skip(i + 1) {
            let c: Vec<usize> = a.iter().copied().filter(|v| b.contains(v)).collect();
            if c.len() == 2 {
                shared.push((i, j, c[0], c[1]));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut edge_err = 0.0f64;
    for k in 0..1000 {
        let (t1, t2, u, v) = shared[k % shared.len()];
        let s: f64 = rng.random();
        let (pu, pv) = (interp.node_point(u), interp.node_point(v));
        let (x, y) = (pu.0 + s * (pv.0 - pu.0), pu.1 + s * (pv.1 - pu.1));
        let a = interp.interpolate_in(t1, x, y).unwrap();
        let b = interp.interpolate_in(t2, x, y).unwrap();
        edge_err = edge_err.max((a.ar.variance - b.ar.variance).abs());
        for (p, q) in a.ar.a.iter().zip(b.ar.a.iter()) {
            edge_err = edge_err.max((p - q).abs());
        }
    }
    outcome(
        node_hits == 90 && node_err < 1e-12 && edge_err < 1e-9,
        format!("90 nodes ({node_hits} exact hits), worst node error {node_err:.1e}; 1000 shared-edge points, worst mismatch {edge_err:.1e}"),
    )
}

// ---------------------------------------------------------------- gradients

const H: f64 = 1e-4;

/// Worst relative error of `analytic` against central differences of `f`.
fn fd_worst(mut f: impl FnMut(&Array2<f64>) -> f64, x: &Array2<f64>, analytic: &Array2<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for idx in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp.as_slice_mut().unwrap()[idx] += H;
        xm.as_slice_mut().unwrap()[idx] -= H;
        let num = (f(&xp) - f(&xm)) / (2.0 * H);
        let a = analytic.as_slice().unwrap()[idx];
        worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-6));
    }
    worst
}

fn weighted(y: &Array2<f64>, c: &Array2<f64>) -> f64 {
    (y * c).sum()
}

fn tiny_dims() -> VaeDims {
    VaeDims {
        grid_rows: 2,
        lsf_order: 3,
        tap_dim: 4,
        text_dim: 5,
        latent: 3,
        ar_enc: vec![4, 3],
        tap_enc: vec![3],
        ar_dec: vec![4],
        ar_res: 1,
        tap_dec: vec![4],
        tap_res: 1,
        latent_proj_hidden: 4,
        text_proj_hidden: 4,
        dropout: 0.2,
    }
}

fn layer_gradients() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let mut out = Vec::new();

    let mut lin = Linear::<f64>::new("l", 4, 3, 1.0, &mut rng);
    lin.b.value = randn(1, 3, &mut rng);
    let x = randn(5, 4, &mut rng);
    let c = randn(5, 3, &mut rng);
    let base = lin.clone();
    lin.forward(&x);
    let gx = lin.backward(&c);
    let mut w = fd_worst(|x| weighted(&base.clone().forward(x), &c), &x, &gx);
    w = w.max(fd_worst(
        |v| {
            let mut l = base.clone();
            l.w.value = v.clone();
            weighted(&l.forward(&x), &c)
        },
        &base.w.value,
        &lin.w.grad,
    ));
    w = w.max(fd_worst(
        |v| {
            let mut l = base.clone();
            l.b.value = v.clone();
            weighted(&l.forward(&x), &c)
        },
        &base.b.value,
        &lin.b.grad,
    ));
    out.push(("linear", w));

    let x = randn(4, 6, &mut rng).mapv(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    let c = randn(4, 6, &mut rng);
    let mut relu = Relu::<f64>::default();
    relu.forward(&x);
    let g = relu.backward(&c);
    out.push(("relu", fd_worst(|x| weighted(&Relu::default().forward(x), &c), &x, &g)));

    for train in [false, true] {
        let run = |x: &Array2<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut d = Dropout::<f64>::new(0.5);
            let y = d.forward(x, &mut Ctx { train, rng: &mut r });
            (y, d)
        };
        let (_, mut d) = run(&x);
        let g = d.backward(&c);
        out.push((if train { "dropout (train mask)" } else { "dropout (eval)" }, fd_worst(|x| weighted(&run(x).0, &c), &x, &g)));
    }

    let mut block = ResBlock::<f64>::new("r", 4, 0.3, &mut rng);
    block.l1.b.value = randn(1, 4, &mut rng) * 0.1;
    let x = randn(3, 4, &mut rng);
    let c = randn(3, 4, &mut rng);
    let run = |b: &mut ResBlock<f64>, x: &Array2<f64>| {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        b.forward(x, &mut Ctx { train: true, rng: &mut r })
    };
    let base = block.clone();
    run(&mut block, &x);
    let gx = block.backward(&c);
    let mut w = fd_worst(|x| weighted(&run(&mut base.clone(), x), &c), &x, &gx);
    w = w.max(fd_worst(
        |v| {
            let mut b = base.clone();
            b.l1.w.value = v.clone();
            weighted(&run(&mut b, &x), &c)
        },
        &base.l1.w.value,
        &block.l1.w.grad,
    ));
    w = w.max(fd_worst(
        |v| {
            let mut b = base.clone();
            b.l2.w.value = v.clone();
            weighted(&run(&mut b, &x), &c)
        },
        &base.l2.w.value,
        &block.l2.w.grad,
    ));
    out.push(("residual block", w));

    for train in [true, false] {
        let mut bn = BatchNorm::<f64>::new("bn", 3);
        bn.gamma.value = randn(1, 3, &mut rng);
        bn.beta.value = randn(1, 3, &mut rng);
        bn.running_mean.value = randn(1, 3, &mut rng);
        bn.running_var.value = randn(1, 3, &mut rng).mapv(|v| v * v + 0.5);
        let x = randn(6, 3, &mut rng);
        let c = randn(6, 3, &mut rng);
        let run = |b: &mut BatchNorm<f64>, x: &Array2<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            b.forward(x, &mut Ctx { train, rng: &mut r })
        };
        let base = bn.clone();
        run(&mut bn, &x);
        let gx = bn.backward(&c);
        let mut w = fd_worst(|x| weighted(&run(&mut base.clone(), x), &c), &x, &gx);
        w = w.max(fd_worst(
            |v| {
                let mut b = base.clone();
                b.gamma.value = v.clone();
                weighted(&run(&mut b, &x), &c)
            },
            &base.gamma.value,
            &bn.gamma.grad,
        ));
        w = w.max(fd_worst(
            |v| {
                let mut b = base.clone();
                b.beta.value = v.clone();
                weighted(&run(&mut b, &x), &c)
            },
            &base.beta.value,
            &bn.beta.grad,
        ));
        out.push((if train { "batch norm (train)" } else { "batch norm (eval)" }, w));
    }

    let logits = randn(3, 10, &mut rng);
    let c = randn(3, 10, &mut rng);
    let g = project_rows_backward(&logits, &c, 5);
    out.push(("lsf head", fd_worst(|l| weighted(&project_rows(l, 5).unwrap(), &c), &logits, &g)));

    let x = randn(2, 5, &mut rng) * 3.0;
    let c = randn(2, 5, &mut rng);
    let g = &x.mapv(nn::sigmoid) * &c;
    out.push(("softplus", fd_worst(|x| weighted(&x.mapv(nn::softplus), &c), &x, &g)));

    let x = randn(3, 4, &mut rng);
    let c = randn(3, 4, &mut rng);
    let (y, norms) = nn::l2_normalize(&x);
    let g = nn::l2_normalize_backward(&y, &norms, &c);
    out.push(("l2 normalize", fd_worst(|x| weighted(&nn::l2_normalize(x).0, &c), &x, &g)));

    let target = randn(3, 4, &mut rng);
    let mut pred = &target + &(randn(3, 4, &mut rng) * 1.5);
    pred.zip_mut_with(&target, |p, t| {
        if ((*p - t).abs() - 1.0).abs() < 0.05 {
            *p += 0.2
        }
    });
    let (_, g) = nn::smooth_l1(&pred, &target);
    out.push(("smooth l1", fd_worst(|p| nn::smooth_l1(p, &target).0, &pred, &g)));
    out
}

fn full_loss_gradient() -> (usize, f64) {
    let dims = tiny_dims();
    let mut model = Vae::<f64>::new(dims.clone(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for v in model.out_norm.std.iter_mut() {
        *v = rng.random_range(0.5..2.0);
    }
    for v in model.out_norm.mean.iter_mut() {
        *v = rng.random_range(-0.5..0.5);
    }
    for v in model.out_norm.var_scale.iter_mut() {
        *v = rng.random_range(0.5..2.0);
    }
    model.visit(&mut |p| {
        if p.name.ends_with(".b") {
            p.value = randn(1, p.value.ncols(), &mut ChaCha8Rng::seed_from_u64(p.name.len() as u64)) * 0.1;
        }
    });
    let n = 6;
    let batch = Batch {
        ar: randn(n, dims.ar_dim(), &mut rng),
        tap: randn(n, dims.tap_dim, &mut rng),
        text: nn::l2_normalize(&randn(n, dims.text_dim, &mut rng)).0,
        labels: (0..n).map(|i| i % 3).collect(),
    };
    let cfg = TrainConfig { lambda_text: 0.5, lambda_align: 0.3, ..TrainConfig::default() };
    let opt = StepOptions { epoch: 70, train: true, seed: 5, zero_noise: false };
    model.zero_grad();
    model.loss_and_grad(&batch, &cfg, opt).unwrap();
    let mut params = Vec::new();
    model.visit(&mut |p: &mut Param<f64>| {
        if p.trainable {
            params.push((p.name.clone(), p.value.clone(), p.grad.clone()))
        }
    });
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, value, grad) in &params {
        let mut probe = model.clone();
        worst = worst.max(fd_worst(
            |v| {
                probe.visit(&mut |p| {
                    if &p.name == name {
                        p.value = v.clone()
                    }
                });
                probe.loss(&batch, &cfg, opt).unwrap().total
            },
            value,
            grad,
        ));
        checked += value.len();
    }
    (checked, worst)
}

fn gradient_check() -> Outcome {
    let layers = layer_gradients();
    let (count, full) = full_loss_gradient();
    let worst_layer = layers.iter().map(|l| l.1).fold(0.0, f64::max);
    let list: Vec<String> = layers.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        worst_layer < 1e-4 && full < 1e-4 && count <= 1000,
        format!("{}; full loss over {count} parameters {full:.1e}", list.join(", ")),
    )
}

// ---------------------------------------------------------------- render

fn friction_cases() -> Outcome {
    let set = |list: &[(&[f64], f64)]| FrictionAnchorSet { anchors: list.iter().map(|(z, mu)| (z.to_vec(), *mu)).collect() };
    let three = set(&[(&[1.0, 0.0], 0.31), (&[0.0, 1.0], 0.77), (&[-1.0, 0.2], 0.12)]);
    let k1 = estimate_friction(&[0.9, 0.1], &three, 1, 0.1).unwrap() == 0.31
        && estimate_friction(&[0.1, 0.9], &three, 1, 0.1).unwrap() == 0.77;
    let equal = estimate_friction(&[1.0, 0.0], &set(&[(&[1.0, 1.0], 0.2), (&[1.0, -1.0], 0.6)]), 2, 0.1).unwrap();
    let two = estimate_friction(&[2.0, 0.0], &set(&[(&[1.0, 0.0], 0.3), (&[0.0, 1.0], 0.8)]), 2, 0.1).unwrap();
    let w1 = 10f64.exp() / (10f64.exp() + 1.0);
    let two_oracle = 0.3 * w1 + 0.8 * (1.0 - w1);

    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut scale_err = 0.0f64;
    for _ in 0..1000 {
        let anchors = FrictionAnchorSet {
            anchors: (0..10).map(|_| ((0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(0.1..0.9))).collect(),
        };
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (k, tau) = (rng.random_range(1..8), rng.random_range(0.01..2.0));
        let base = estimate_friction(&z, &anchors, k, tau).unwrap();
        for c in [1e-3, 0.5, 2.0, 10.0, 1e3] {
            let s: Vec<f64> = z.iter().map(|v| v * c).collect();
            scale_err = scale_err.max((estimate_friction(&s, &anchors, k, tau).unwrap() - base).abs());
        }
    }
    outcome(
        k1 && (equal - 0.4).abs() < 1e-12 && (two - 0.3000227).abs() < 1e-6 && (two - two_oracle).abs() < 1e-12 && scale_err < 1e-12,
        format!("k=1 exact {k1}; equal similarity {equal}; two-anchor {two:.9}; worst scale drift {scale_err:.1e}"),
    )
}

fn servo_script() -> TrajectoryScript {
    // 100 segments of 0.1 s sweeping force and speed, a tap every fourth
    let segments = (0..100)
        .map(|i| {
            let t = i as f64 / 99.0;
            Segment {
                duration_s: 0.1,
                depth_m: None,
                force_n: Some(0.2 + 3.5 * (0.5 + 0.5 * (7.0 * t).sin())),
                speed_mm_s: 20.0 + 380.0 * t,
                tap: (i % 4 == 0).then_some(50.0 + 3.0 * i as f64),
            }
        })
        .collect();
    TrajectoryScript { segments }
}

fn servo_performance() -> Outcome {
    let m = &generate_synthetic_corpus(108, 1).materials[0];
    let model = RenderModel::<f64>::new(&m.ar_grid, m.tap_bank.clone(), m.friction_coefficient).unwrap();
    let cfg = RenderConfig::<f64>::default();
    let script = servo_script();
    let mut sim = ServoSim::new(model.clone(), cfg, 1).unwrap();
    let log = run_trajectory(&script, &mut sim).unwrap();
    let (mean, p99) = (log.mean_compute_us(), log.percentile_compute_us(99.0));

    // the same samples again, counting allocations around each tick only
    let mut sim = ServoSim::new(model, cfg, 1).unwrap();
    let mut allocs = 0;
    let mut ticks = 0;
    for seg in &script.segments {
        let depth = seg.force_n.unwrap() / cfg.k_n;
        for j in 0..(seg.duration_s * cfg.servo_rate as f64).round() as usize {
            let mut s = DeviceSample::planar(depth, seg.speed_mm_s / 1000.0);
            if j == 0 {
                s.impact_speed = seg.tap.map(|v| v / 1000.0);
            }
            let (_, n) = counted(|| sim.tick(&s));
            allocs += n;
            ticks += 1;
        }
    }
    outcome(
        log.rows.len() == 10_000 && log.vibration.len() == 100_000 && mean < 1000.0 && p99 < 2000.0 && allocs == 0,
        format!("{} ticks, {} samples, mean {mean:.1} us, p99 {p99:.1} us, {allocs} allocations in {ticks} ticks", log.rows.len(), log.vibration.len()),
    )
}

// ---------------------------------------------------------------- eval

fn anchor_projection_cases() -> Outcome {
    let ex: [(f64, f64, f64, f64); 4] = [(20.0, 20.0, 80.0, 0.0), (50.0, 20.0, 80.0, 0.5), (90.0, 20.0, 80.0, 7.0 / 6.0), (80.0, 20.0, 80.0, 1.0)];
    let ex_err = ex.iter().map(|&(x, a, b, t)| (anchor_projection(x, a, b).unwrap() - t).abs()).fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let mut worst = 0.0f64;
    let mut n = 0;
    while n < 10_000 {
        let (a, b, x): (f64, f64, f64) = (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), rng.random_range(0.0..100.0));
        if (a - b).abs() < 1.0 {
            continue;
        }
        let (scale, shift) = (rng.random_range(0.1..10.0), rng.random_range(-100.0..100.0));
        let f = |v: f64| scale * v + shift;
        let t = anchor_projection(x, a, b).unwrap();
        worst = worst.max((t - anchor_projection(f(x), f(a), f(b)).unwrap()).abs());
        n += 1;
    }
    outcome(ex_err < 1e-12 && worst < 1e-12, format!("worked examples error {ex_err:.1e}; 10000 affine triples, worst drift {worst:.1e}"))
}

// ---------------------------------------------------------------- pipeline

fn haptex(args: &[&str], cwd: &Path) -> bool {
    Process::new(env!("CARGO_BIN_EXE_haptex")).args(args).current_dir(cwd).output().map(|o| o.status.success()).unwrap_or(false)
}

fn tree(path: &Path, root: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        entries.iter().for_each(|e| tree(e, root, out));
    } else {
        out.push((path.strip_prefix(root).unwrap().display().to_string(), std::fs::read(path).unwrap()));
    }
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    tree(dir, dir, &mut out);
    out
}

/// metrics.csv without its wall-clock column
fn metrics_without_time(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap_or_default();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let wall = header.iter().position(|h| *h == "wall_s");
    text.lines()
        .map(|l| l.split(',').enumerate().filter(|(i, _)| Some(*i) != wall).map(|(_, v)| v).collect::<Vec<_>>().join(","))
        .collect()
}

fn determinism() -> Outcome {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"dims": {"ar_enc": [32, 16], "tap_enc": [16], "ar_dec": [32], "ar_res": 1, "tap_dec": [32], "tap_res": 1,
                     "latent_proj_hidden": 16, "text_proj_hidden": 16},
            "train": {"batch": 16}}"#,
    )
    .unwrap();
    let mut ran = true;
    for run in ["a", "b"] {
        std::fs::create_dir(d.join(run)).unwrap();
        let r = d.join(run);
        ran &= haptex(&["gen-corpus", "--seed", "21", "--materials", "12", "--out", "src"], &r);
        ran &= haptex(&["train", "--corpus", "src", "--config", "../cfg.json", "--epochs", "4", "--seed", "8", "--augments", "2", "--out", "run"], &r);
        ran &= haptex(&["synth", "--material", "M3", "--corpus", "src", "--fv", "1,100", "--fv", "2.5,300", "--seconds", "0.5", "--tap", "120", "--seed", "4", "--out", "m.wav"], &r);
        std::fs::write(r.join("z.json"), serde_json::to_string(&vec![0.25f64; 64]).unwrap()).unwrap();
        ran &= haptex(&["synth", "--latent", "z.json", "--checkpoint", "run/model.ckpt", "--fv", "1,150", "--seconds", "0.5", "--seed", "4", "--out", "z.wav"], &r);
    }
    let (a, b) = (d.join("a"), d.join("b"));
    let corpus = snapshot(&a.join("src")) == snapshot(&b.join("src"));
    let ckpt = std::fs::read(a.join("run/model.ckpt")).ok() == std::fs::read(b.join("run/model.ckpt")).ok();
    let metrics = metrics_without_time(&a.join("run/metrics.csv")) == metrics_without_time(&b.join("run/metrics.csv"));
    let wav = ["m.wav", "z.wav"].iter().all(|w| std::fs::read(a.join(w)).ok() == std::fs::read(b.join(w)).ok());
    outcome(
        ran && corpus && ckpt && metrics && wav,
        format!("commands ok {ran}; corpus {corpus}, checkpoint {ckpt}, metrics (minus wall time) {metrics}, wavs {wav}"),
    )
}

struct Desk {
    dir: tempfile::TempDir,
    outcome: Outcome,
}

fn desk_training() -> Desk {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    cli::execute(Command::GenCorpus { seed: 7, materials: 20, out: p.join("src") }).unwrap();
    cli::execute(Command::Augment { corpus: p.join("src"), augments: 20, seed: 7, out: p.join("aug") }).unwrap();
    let start = Instant::now();
    cli::execute(Command::Train {
        corpus: p.join("aug"),
        embeddings: None,
        config: None,
        epochs: Some(300),
        seed: Some(7),
        augments: 0,
        out: p.join("run"),
    })
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    cli::execute(Command::Eval {
        checkpoint: p.join("run/model.ckpt"),
        corpus: p.join("aug"),
        source_corpus: Some(p.join("src")),
        embeddings: Some(p.join("src/embeddings.json")),
        ratings: None,
        out: p.join("eval"),
    })
    .unwrap();
    let metrics = std::fs::read_to_string(p.join("run/metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    let rec_col = lines.next().unwrap().split(',').position(|h| h == "rec").unwrap();
    let rec: Vec<f64> = lines.map(|l| l.split(',').nth(rec_col).unwrap().parse().unwrap()).collect();
    let ratio = rec.last().unwrap() / rec[0];
    let report: Value = serde_json::from_str(&std::fs::read_to_string(p.join("eval/report.json")).unwrap()).unwrap();
    let sil = report["clustering"]["silhouette"].as_f64().unwrap();
    let ari = report["clustering"]["adjusted_rand"].as_f64().unwrap();
    let retrieval = report["retrieval_rate"].as_f64().unwrap();
    let outcome = outcome(
        rec.len() <= 300 && secs < 600.0 && ratio <= 0.2 && sil >= 0.6 && retrieval >= 0.95 && ari >= 0.8,
        format!(
            "{} epochs in {secs:.0} s; reconstruction {:.4} -> {:.4} ({:.1}% of epoch 1); silhouette {sil:.3}; retrieval {:.1}%; ARI {ari:.3}",
            rec.len(),
            rec[0],
            rec.last().unwrap(),
            ratio * 100.0,
            retrieval * 100.0
        ),
    );
    Desk { dir, outcome }
}

fn is_renderable(grid: &ArGrid) -> bool {
    grid.entries.len() == 18
        && grid.entries.iter().all(|e| {
            e.variance.is_finite()
                && e.variance >= 0.0
                && LsfVector::new(e.lsf).and_then(|l| lsf_to_ar(&l, e.variance)).is_ok_and(|ar| oracle::poles_inside(&ar.a, 0.0))
        })
}

fn decode_fuzz(trained: &Path) -> Outcome {
    let cfg = ServeConfig {
        addr: "127.0.0.1:0".into(),
        checkpoint: trained.join("run/model.ckpt"),
        corpus: trained.join("src"),
        embeddings: trained.join("src/embeddings.json"),
        render_config: None,
    };
    let state = Arc::new(AppState::load(&cfg).unwrap());
    let rt = tokio::runtime::Runtime::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let (mut ok, mut failures) = (0, Vec::new());
    rt.block_on(async {
        for i in 0..1000 {
            let z: Vec<f64> = (0..64).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let req = Request::post("/decode").header("content-type", "application/json").body(Body::from(json!({ "z": z }).to_string())).unwrap();
            let resp = router(state.clone()).oneshot(req).await.unwrap();
            let status = resp.status();
            let body: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap_or(Value::Null);
            let good = status == StatusCode::OK
                && serde_json::from_value::<ArGrid>(body["ar_grid"].clone()).is_ok_and(|g| is_renderable(&g))
                && body["mu"].as_f64().is_some_and(|m| m.is_finite() && m >= 0.0);
            if good {
                ok += 1;
            } else if failures.len() < 3 {
                failures.push(format!("#{i}: {status} {body}"));
            }
        }
    });
    outcome(ok == 1000, format!("{ok}/1000 latents decoded to renderable textures {failures:?}"))
}

#[test]
fn acceptance() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };
    report("stability closure", stability_closure());
    report("lsf round trip", lsf_round_trip());
    report("ar(1) stationary variance", ar1_variance());
    report("grid interpolation", grid_interpolation());
    report("gradient check", gradient_check());
    let desk = desk_training();
    let trained = desk.dir.path().to_path_buf();
    report("desk-scale training", desk.outcome);
    report("friction estimator", friction_cases());
    report("servo performance", servo_performance());
    report("anchor projection", anchor_projection_cases());
    report("determinism", determinism());
    report("decode totality", decode_fuzz(&trained));
    let failed: Vec<&str> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed: {failed:?}");
}
