//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.
//!
//! ```text
//! cargo test --release -p iqdet-cli --test acceptance
//! ```

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iqdet::assign::{assign_image, select_topk, AssignConfig, AssignmentResult, Candidate, Instance, SampleSet};
use iqdet::geometry::{iou, BBox, Ltrb, NormalizedOffset, Point, PyramidSpec};
use iqdet::gridops::{bilinear, bilinear_grad, roialign, roialign_grad, stencil_at, FeatureGrid, GridShape, RoiAlignPlan};
use iqdet::io;
use iqdet::losses::{bce, bce_prob, focal_soft, iou_loss, total_loss, LevelPredictions, LossConfig, FOCAL_ALPHA, FOCAL_GAMMA};
use iqdet::params::ParamSet;
use iqdet::qde::{encode_backward, encode_grad, encode_traced, init_weights, EncoderConfig, EncoderWeights};
use iqdet::qdist::{GmmParamGrad, QualityGmm};
use iqdet::toytrain::eval::nms;
use iqdet::toytrain::train::{heldout_scene_seeds, init_model};
use iqdet::toytrain::{evaluate, train_with, AssignMode, TrainConfig};

// 1: gradients
const FD_STEP: f64 = 1e-5;
const OP_TOL: f64 = 1e-6;
const E2E_TOL: f64 = 1e-4;
/// Gradient norms below this are compared absolutely.
const GRAD_FLOOR: f64 = 1e-6;
const GRAD_INSTANCES: usize = 100;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
// 2: oracles
const IOU_TOL: f64 = 1e-6;
const ROI_TOL: f64 = 1e-10;
const ORACLE_INSTANCES: usize = 300;
const ORACLE_BUDGET: Duration = Duration::from_secs(30);
// 3: sampler
const SAMPLER_DRAWS: usize = 100_000;
const SAMPLER_BINS: usize = 20;
const TV_TOL: f64 = 0.02;
const MEAN_TOL: f64 = 0.02;
const SAMPLER_SEED: u64 = 2024;
const SAMPLER_BUDGET: Duration = Duration::from_secs(10);
// 4: spot values
const SPOT_TOL: f64 = 1e-12;
// 5: toy training
const TRAIN_STEPS: usize = 2000;
const FINAL_WINDOW: usize = 100;
const HELDOUT_SCENES: usize = 200;
const AP_MARGIN: f64 = 0.02;
const TRAIN_BUDGET: Duration = Duration::from_secs(600);
// 6: learnability flags
const ABLATION_STEPS: usize = 100;
// 7: determinism
const DETERMINISM_STEPS: &str = "40";

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("gradient suite", gradients),
        ("oracle suite", oracles),
        ("sampler statistics", sampler),
        ("density spot values", spot_values),
        ("toy training behavior", toy_training),
        ("learnability flags", learnability),
        ("train-toy determinism", determinism),
        ("golden CLI files", golden),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {} {} {name}: {} [{:.1}s]",
            n + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- helpers

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)` over whole gradient vectors.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(GRAD_FLOOR)
}

/// Central differences of `f` at `x`, one coordinate at a time.
fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let plus = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn flat_params<P: ParamSet<f64>>(p: &P) -> Vec<f64> {
    p.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
}

fn set_params<P: ParamSet<f64>>(p: &mut P, v: &[f64]) {
    let mut it = v.iter();
    for t in p.tensors_mut() {
        for x in t.iter_mut() {
            *x = *it.next().expect("enough values");
        }
    }
}

fn gmm_flat(g: &QualityGmm<f64>) -> Vec<f64> {
    g.mu.iter().flatten().chain(g.sigma.iter().flatten()).chain(&g.pi).copied().collect()
}

fn gmm_from_flat(v: &[f64], k: usize) -> QualityGmm<f64> {
    QualityGmm {
        mu: (0..k).map(|c| [v[2 * c], v[2 * c + 1]]).collect(),
        sigma: (0..k).map(|c| [v[2 * k + 2 * c], v[2 * k + 2 * c + 1]]).collect(),
        pi: v[4 * k..5 * k].to_vec(),
    }
}

fn grad_flat(g: &GmmParamGrad<f64>) -> Vec<f64> {
    g.mu.iter().flatten().chain(g.sigma.iter().flatten()).chain(&g.pi).copied().collect()
}

fn random_gmm(rng: &mut ChaCha8Rng, k: usize, mu: f64, sigma: (f64, f64), pi: (f64, f64)) -> QualityGmm<f64> {
    QualityGmm::new(
        (0..k).map(|_| [rng.random_range(-mu..mu), rng.random_range(-mu..mu)]).collect(),
        (0..k).map(|_| [rng.random_range(sigma.0..sigma.1), rng.random_range(sigma.0..sigma.1)]).collect(),
        (0..k).map(|_| rng.random_range(pi.0..pi.1)).collect(),
    )
    .unwrap()
}

fn toy_pyramid() -> (PyramidSpec, Vec<GridShape<f64>>) {
    let pyr = PyramidSpec::from_pairs([("P3", 8), ("P4", 16)]).unwrap();
    let shapes = vec![GridShape::new(8, 8, 8.0).unwrap(), GridShape::new(4, 4, 16.0).unwrap()];
    (pyr, shapes)
}

fn random_instances(rng: &mut ChaCha8Rng, n: usize) -> Vec<Instance<f64>> {
    (0..n)
        .map(|_| {
            let (w, h) = (rng.random_range(10.0..40.0), rng.random_range(10.0..40.0));
            let (x, y) = (rng.random_range(0.0..64.0 - w), rng.random_range(0.0..64.0 - h));
            Instance { bbox: BBox::new(x, y, x + w, y + h).unwrap(), class: rng.random_range(0..2) }
        })
        .collect()
}

fn random_predictions(rng: &mut ChaCha8Rng, shapes: &[GridShape<f64>]) -> Vec<LevelPredictions<f64>> {
    shapes
        .iter()
        .map(|s| {
            let mut mk = |c: usize, lo: f64, hi: f64| {
                FeatureGrid::new(c, s.height, s.width, s.stride, uniform(rng, c * s.cells(), lo, hi)).unwrap()
            };
            LevelPredictions { cls: mk(2, -4.0, 1.0), reg: mk(4, -0.5, 1.5), aux: mk(1, -2.0, 2.0) }
        })
        .collect()
}

// ------------------------------------------------------- 1: gradient suite

fn check_bilinear(rng: &mut ChaCha8Rng) -> f64 {
    let (c, h, w) = (3, rng.random_range(2..7), rng.random_range(2..7));
    let stride = [1.0, 4.0, 8.0][rng.random_range(0..3)];
    let data = uniform(rng, c * h * w, -1.0, 1.0);
    let r = uniform(rng, c, -1.0, 1.0);
    let margin = 1e-3;
    let p0 = [rng.random_range(margin..w as f64 * stride - margin), rng.random_range(margin..h as f64 * stride - margin)];
    let f = |x: &[f64]| {
        let grid = FeatureGrid::new(c, h, w, stride, x[..c * h * w].to_vec()).unwrap();
        let (v, _) = bilinear(&grid, Point::new(x[c * h * w], x[c * h * w + 1])).unwrap();
        v.iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let grid = FeatureGrid::new(c, h, w, stride, data.clone()).unwrap();
    let g = bilinear_grad(&grid, Point::new(p0[0], p0[1])).unwrap();
    let mut analytic = vec![0.0; c * h * w + 2];
    for ch in 0..c {
        for &(idx, wt) in &g.stencil.cells {
            analytic[ch * h * w + idx] += r[ch] * wt;
        }
        analytic[c * h * w] += r[ch] * g.d_point[ch][0];
        analytic[c * h * w + 1] += r[ch] * g.d_point[ch][1];
    }
    let x: Vec<f64> = data.iter().copied().chain(p0).collect();
    rel_err(&analytic, &numeric_grad(&x, f))
}

fn random_roi(rng: &mut ChaCha8Rng, w: f64, h: f64) -> BBox<f64> {
    let x1 = rng.random_range(-0.2 * w..0.7 * w);
    let y1 = rng.random_range(-0.2 * h..0.7 * h);
    let x2 = rng.random_range(x1.max(0.0) + 0.5..1.2 * w);
    let y2 = rng.random_range(y1.max(0.0) + 0.5..1.2 * h);
    BBox::new(x1, y1, x2, y2).unwrap()
}

fn check_roialign(rng: &mut ChaCha8Rng) -> f64 {
    let (c, h, w, stride) = (2, rng.random_range(2..9), rng.random_range(2..9), 4.0);
    let pool = [1, 2, 3, 7][rng.random_range(0..4)];
    let spb = rng.random_range(1..3);
    let roi = random_roi(rng, w as f64 * stride, h as f64 * stride);
    let data = uniform(rng, c * h * w, -1.0, 1.0);
    let r = uniform(rng, c * pool * pool, -1.0, 1.0);
    let f = |x: &[f64]| {
        let grid = FeatureGrid::new(c, h, w, stride, x.to_vec()).unwrap();
        roialign(&grid, &roi, pool, spb).unwrap().data.iter().zip(&r).map(|(a, b)| a * b).sum()
    };
    let grid = FeatureGrid::new(c, h, w, stride, data.clone()).unwrap();
    let mut analytic = vec![0.0; data.len()];
    roialign_grad(&grid, &roi, pool, spb).unwrap().backward_into(&r, &mut analytic).unwrap();
    rel_err(&analytic, &numeric_grad(&data, f))
}

fn check_density(rng: &mut ChaCha8Rng) -> f64 {
    let k = rng.random_range(1..4);
    let g = random_gmm(rng, k, 1.0, (0.2, 1.5), (0.05, 1.0));
    let d = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let f = |x: &[f64]| gmm_from_flat(x, k).density(NormalizedOffset::new(x[5 * k], x[5 * k + 1]));
    let dg = g.density_grad(NormalizedOffset::new(d[0], d[1]));
    let analytic: Vec<f64> = grad_flat(&dg.params).into_iter().chain(dg.d_offset).collect();
    let x: Vec<f64> = gmm_flat(&g).into_iter().chain(d).collect();
    rel_err(&analytic, &numeric_grad(&x, f))
}

fn small_encoder_config(rng: &mut ChaCha8Rng) -> EncoderConfig {
    EncoderConfig {
        hidden: 8,
        pool: 2,
        components: 2,
        spatial_mean: rng.random_bool(0.25),
        learn_mu: rng.random_bool(0.8),
        learn_sigma: rng.random_bool(0.8),
        learn_pi: rng.random_bool(0.8),
        ..EncoderConfig::default()
    }
}

/// Zero biases put every unit behind a dead layer exactly on its ReLU kink,
/// where the gradient is undefined; checks run at generic points instead.
fn random_biases(rng: &mut ChaCha8Rng, w: &mut EncoderWeights<f64>) {
    for d in [&mut w.fc1, &mut w.fc2, &mut w.mu_head, &mut w.sigma_head, &mut w.pi_head] {
        d.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
}

fn check_encoder(rng: &mut ChaCha8Rng) -> f64 {
    let cfg = small_encoder_config(rng);
    let c = 3;
    let mut weights: EncoderWeights<f64> = init_weights(rng.random(), c, &cfg);
    random_biases(rng, &mut weights);
    let pooled = iqdet::gridops::PooledFeature { channels: c, pool: cfg.pool, data: uniform(rng, c * cfg.pool * cfg.pool, -1.0, 1.0) };
    let up = GmmParamGrad {
        mu: (0..2).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
        sigma: (0..2).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect(),
        pi: uniform(rng, 2, -1.0, 1.0),
    };
    let up_flat = grad_flat(&up);
    let n_w = weights.param_count();
    let f = |x: &[f64]| {
        let mut w = weights.clone();
        set_params(&mut w, &x[..n_w]);
        let p = iqdet::gridops::PooledFeature { data: x[n_w..].to_vec(), ..pooled.clone() };
        let g = encode_traced(&w, &p, &cfg).unwrap().gmm;
        gmm_flat(&g).iter().zip(&up_flat).map(|(a, b)| a * b).sum()
    };
    let (gw, dx) = encode_grad(&weights, &pooled, &cfg, &up).unwrap();
    let analytic: Vec<f64> = flat_params(&gw).into_iter().chain(dx).collect();
    let x: Vec<f64> = flat_params(&weights).into_iter().chain(pooled.data.iter().copied()).collect();
    rel_err(&analytic, &numeric_grad(&x, f))
}

fn scalar_rel(analytic: f64, numeric: f64) -> f64 {
    rel_err(&[analytic], &[numeric])
}

fn check_scalar_losses(rng: &mut ChaCha8Rng) -> [f64; 4] {
    let (a, g) = (FOCAL_ALPHA, FOCAL_GAMMA);
    let logit = rng.random_range(-6.0..6.0);
    let q = rng.random_range(0.0..1.0);
    let focal = scalar_rel(
        focal_soft(logit, q, a, g).unwrap().grad,
        numeric_grad(&[logit], |x| focal_soft(x[0], q, a, g).unwrap().loss)[0],
    );
    let b = scalar_rel(bce(logit, q).unwrap().grad, numeric_grad(&[logit], |x| bce(x[0], q).unwrap().loss)[0]);
    let p = rng.random_range(0.01..0.99);
    let bp = scalar_rel(bce_prob(p, q).unwrap().grad, numeric_grad(&[p], |x| bce_prob(x[0], q).unwrap().loss)[0]);
    let pred = uniform(rng, 4, 0.1, 5.0);
    let target = Ltrb::from_array([0, 1, 2, 3].map(|_| rng.random_range(0.1..5.0)));
    let il = iou_loss(Ltrb::from_array([pred[0], pred[1], pred[2], pred[3]]), target).unwrap();
    let num = numeric_grad(&pred, |x| iou_loss(Ltrb::from_array([x[0], x[1], x[2], x[3]]), target).unwrap().loss);
    [focal, b, bp, rel_err(&il.grad, &num)]
}

struct LossFixture {
    instances: Vec<Instance<f64>>,
    assignment: AssignmentResult<f64>,
    predictions: Vec<LevelPredictions<f64>>,
}

fn loss_fixture(rng: &mut ChaCha8Rng, gmm: impl Fn(&mut ChaCha8Rng) -> QualityGmm<f64>) -> LossFixture {
    let (pyr, shapes) = toy_pyramid();
    let n = rng.random_range(1..4);
    let instances = random_instances(rng, n);
    let gmms: Vec<Vec<QualityGmm<f64>>> = (0..n).map(|_| vec![gmm(rng), gmm(rng)]).collect();
    let assignment = assign_image(&instances, gmms, &pyr, &shapes, &AssignConfig::default(), rng.random()).unwrap();
    let predictions = random_predictions(rng, &shapes);
    LossFixture { instances, assignment, predictions }
}

/// Worst relative error of the cls, reg and aux terms against their heads.
fn check_head_losses(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let fx = loss_fixture(rng, |r| random_gmm(r, 2, 0.8, (0.2, 1.2), (0.2, 1.0)));
    let cfg = LossConfig { quality_supervision: false, ..LossConfig::default() };
    let out = total_loss(&fx.assignment, &fx.predictions, &fx.instances, &cfg).unwrap();
    [0, 1, 2].map(|head| {
        let pick = |p: &LevelPredictions<f64>| -> Vec<f64> { [&p.cls, &p.reg, &p.aux][head].data().to_vec() };
        let x: Vec<f64> = fx.predictions.iter().flat_map(pick).collect();
        let f = |x: &[f64]| {
            let mut preds = fx.predictions.clone();
            let mut off = 0;
            for p in preds.iter_mut() {
                let g = [&mut p.cls, &mut p.reg, &mut p.aux].into_iter().nth(head).unwrap();
                let n = g.data().len();
                g.data_mut().copy_from_slice(&x[off..off + n]);
                off += n;
            }
            let r = total_loss(&fx.assignment, &preds, &fx.instances, &cfg).unwrap().report;
            // box IoU targets of the aux term are detached
            [r.l_cls, r.l_reg, r.l_aux][head]
        };
        let analytic: Vec<f64> =
            out.pred_grads.iter().flat_map(|g| [&g.cls, &g.reg, &g.aux][head].iter().copied()).collect();
        rel_err(&analytic, &numeric_grad(&x, f))
    })
}

/// Mixtures whose surface stays strictly inside the probability clamp.
fn interior_gmm(rng: &mut ChaCha8Rng) -> QualityGmm<f64> {
    random_gmm(rng, 2, 0.3, (0.6, 1.5), (0.2, 0.45))
}

fn check_iq_loss(rng: &mut ChaCha8Rng) -> f64 {
    let fx = loss_fixture(rng, interior_gmm);
    let cfg = LossConfig { lambda_iq: rng.random_range(0.5..2.0), ..LossConfig::default() };
    let out = total_loss(&fx.assignment, &fx.predictions, &fx.instances, &cfg).unwrap();
    let x: Vec<f64> = fx.assignment.gmms.iter().flatten().flat_map(gmm_flat).collect();
    let f = |x: &[f64]| {
        let mut a = fx.assignment.clone();
        for (n, g) in a.gmms.iter_mut().flatten().enumerate() {
            *g = gmm_from_flat(&x[10 * n..10 * (n + 1)], 2);
        }
        let r = total_loss(&a, &fx.predictions, &fx.instances, &cfg).unwrap().report;
        r.lambda_iq * r.l_iq
    };
    let analytic: Vec<f64> = out.gmm_grads.iter().flatten().flat_map(grad_flat).collect();
    rel_err(&analytic, &numeric_grad(&x, f))
}

/// Feature grids -> RoIAlign -> encoder -> mixture surface -> L_IQ, against
/// the grids and the encoder weights.
fn check_end_to_end(rng: &mut ChaCha8Rng) -> f64 {
    let (pyr, shapes) = toy_pyramid();
    let cfg = EncoderConfig { hidden: 8, components: 2, ..EncoderConfig::default() };
    let c = 2;
    let mut weights: EncoderWeights<f64> = init_weights(rng.random(), c, &cfg);
    random_biases(rng, &mut weights);
    // keep the surface away from the probability clamp
    for head in [&mut weights.mu_head, &mut weights.sigma_head, &mut weights.pi_head] {
        head.weight.iter_mut().for_each(|v| *v *= 0.1);
    }
    weights.sigma_head.bias.iter_mut().for_each(|b| *b = 0.5);
    weights.pi_head.bias.iter_mut().for_each(|b| *b = -1.0);
    let grids: Vec<FeatureGrid<f64>> = shapes
        .iter()
        .map(|s| FeatureGrid::new(c, s.height, s.width, s.stride, uniform(rng, c * s.cells(), -1.0, 1.0)).unwrap())
        .collect();
    let n = rng.random_range(1..3);
    let instances = random_instances(rng, n);
    let predictions = random_predictions(rng, &shapes);
    let plans: Vec<Vec<RoiAlignPlan<f64>>> = instances
        .iter()
        .map(|i| shapes.iter().map(|s| RoiAlignPlan::new(*s, &i.bbox, cfg.pool, cfg.samples_per_bin).unwrap()).collect())
        .collect();
    let encode_all = |w: &EncoderWeights<f64>, g: &[FeatureGrid<f64>]| {
        plans
            .iter()
            .map(|per| per.iter().zip(g).map(|(p, grid)| encode_traced(w, &p.apply(grid).unwrap(), &cfg).unwrap()).collect())
            .collect::<Vec<Vec<_>>>()
    };
    let traces = encode_all(&weights, &grids);
    let gmms = traces.iter().map(|t| t.iter().map(|t| t.gmm.clone()).collect()).collect();
    let assignment = assign_image(&instances, gmms, &pyr, &shapes, &AssignConfig::default(), rng.random()).unwrap();
    let loss_cfg = LossConfig::default();
    let out = total_loss(&assignment, &predictions, &instances, &loss_cfg).unwrap();

    let mut enc_grad = weights.zeros_like();
    let mut grid_grads: Vec<Vec<f64>> = grids.iter().map(|g| vec![0.0; g.data().len()]).collect();
    for (i, per) in traces.iter().enumerate() {
        for (l, t) in per.iter().enumerate() {
            let dpooled = encode_backward(&weights, t, &cfg, &out.gmm_grads[i][l], &mut enc_grad);
            plans[i][l].backward_into(&dpooled, &mut grid_grads[l]).unwrap();
        }
    }
    let analytic: Vec<f64> = grid_grads.into_iter().flatten().chain(flat_params(&enc_grad)).collect();

    let sizes: Vec<usize> = grids.iter().map(|g| g.data().len()).collect();
    let x: Vec<f64> = grids.iter().flat_map(|g| g.data().iter().copied()).chain(flat_params(&weights)).collect();
    let f = |x: &[f64]| {
        let mut g = grids.clone();
        let mut off = 0;
        for (grid, &n) in g.iter_mut().zip(&sizes) {
            grid.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }
        let mut w = weights.clone();
        set_params(&mut w, &x[off..]);
        let mut a = assignment.clone();
        a.gmms = encode_all(&w, &g).into_iter().map(|t| t.into_iter().map(|t| t.gmm).collect()).collect();
        let r = total_loss(&a, &predictions, &instances, &loss_cfg).unwrap().report;
        r.lambda_iq * r.l_iq
    };
    rel_err(&analytic, &numeric_grad(&x, f))
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: Vec<(&str, f64, f64)> = Vec::new();
    let mut track = |name: &'static str, tol: f64, errs: Vec<f64>| {
        worst.push((name, errs.iter().copied().fold(0.0, f64::max), tol));
    };
    let runs = |rng: &mut ChaCha8Rng, f: &dyn Fn(&mut ChaCha8Rng) -> f64| (0..GRAD_INSTANCES).map(|_| f(rng)).collect();
    track("bilinear", OP_TOL, runs(&mut rng, &check_bilinear));
    track("roialign", OP_TOL, runs(&mut rng, &check_roialign));
    track("density", OP_TOL, runs(&mut rng, &check_density));
    track("encoder", OP_TOL, runs(&mut rng, &check_encoder));
    let scalar: Vec<[f64; 4]> = (0..GRAD_INSTANCES).map(|_| check_scalar_losses(&mut rng)).collect();
    for (i, name) in ["focal", "bce", "bce_prob", "iou_loss"].into_iter().enumerate() {
        track(name, OP_TOL, scalar.iter().map(|e| e[i]).collect());
    }
    let heads: Vec<[f64; 3]> = (0..GRAD_INSTANCES).map(|_| check_head_losses(&mut rng)).collect();
    for (i, name) in ["L_cls", "L_reg", "L_aux"].into_iter().enumerate() {
        track(name, OP_TOL, heads.iter().map(|e| e[i]).collect());
    }
    track("L_IQ", OP_TOL, runs(&mut rng, &check_iq_loss));
    track("end-to-end", E2E_TOL, runs(&mut rng, &check_end_to_end));
    let elapsed = start.elapsed();
    let ok = worst.iter().all(|&(_, e, tol)| e < tol) && elapsed < GRAD_BUDGET;
    let detail = worst.iter().map(|(n, e, _)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    outcome(ok, format!("{GRAD_INSTANCES} instances each, worst relative error: {detail}"))
}

// --------------------------------------------------------- 2: oracle suite

/// Area by counting lattice cells of side 1/8; exact for boxes on a 1/4 lattice.
fn raster_iou(a: &BBox<f64>, b: &BBox<f64>, extent: usize) -> f64 {
    let n = extent * 8;
    let (mut inter, mut uni) = (0usize, 0usize);
    for iy in 0..n {
        let y = (iy as f64 + 0.5) / 8.0;
        for ix in 0..n {
            let x = (ix as f64 + 0.5) / 8.0;
            let ina = a.x1 < x && x < a.x2 && a.y1 < y && y < a.y2;
            let inb = b.x1 < x && x < b.x2 && b.y1 < y && y < b.y2;
            inter += (ina && inb) as usize;
            uni += (ina || inb) as usize;
        }
    }
    inter as f64 / uni as f64
}

fn lattice_box(rng: &mut ChaCha8Rng, extent: usize) -> BBox<f64> {
    let q = 4 * extent;
    let (x1, y1) = (rng.random_range(0..q - 1), rng.random_range(0..q - 1));
    let (x2, y2) = (rng.random_range(x1 + 1..=q), rng.random_range(y1 + 1..=q));
    BBox::new(x1 as f64 / 4.0, y1 as f64 / 4.0, x2 as f64 / 4.0, y2 as f64 / 4.0).unwrap()
}

/// Direct bilinear sample with the cell-center convention and border
/// replication, written out independently of the library.
fn sample_point(grid: &FeatureGrid<f64>, c: usize, x: f64, y: f64) -> f64 {
    let s = grid.stride();
    let coord = |v: f64, n: usize| -> (usize, usize, f64) {
        let u = (v.clamp(0.0, n as f64 * s) / s - 0.5).clamp(0.0, (n - 1) as f64);
        if n == 1 {
            return (0, 0, 0.0);
        }
        let k0 = (u.floor() as usize).min(n - 2);
        (k0, k0 + 1, u - k0 as f64)
    };
    let (j0, j1, fx) = coord(x, grid.width());
    let (i0, i1, fy) = coord(y, grid.height());
    let g = |i, j| grid.get(c, i, j);
    (1.0 - fy) * ((1.0 - fx) * g(i0, j0) + fx * g(i0, j1)) + fy * ((1.0 - fx) * g(i1, j0) + fx * g(i1, j1))
}

fn roialign_oracle(grid: &FeatureGrid<f64>, roi: &BBox<f64>, pool: usize, spb: usize) -> Vec<f64> {
    let (bw, bh) = (roi.width() / pool as f64, roi.height() / pool as f64);
    let mut out = Vec::new();
    for c in 0..grid.channels() {
        for py in 0..pool {
            for px in 0..pool {
                let mut acc = 0.0;
                for sy in 0..spb {
                    for sx in 0..spb {
                        let x = roi.x1 + bw * (px as f64 + (sx as f64 + 0.5) / spb as f64);
                        let y = roi.y1 + bh * (py as f64 + (sy as f64 + 0.5) / spb as f64);
                        acc += sample_point(grid, c, x, y);
                    }
                }
                out.push(acc / (spb * spb) as f64);
            }
        }
    }
    out
}

fn plain_iou(a: &BBox<f64>, b: &BBox<f64>) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let i = w * h;
    i / (a.area() + b.area() - i)
}

/// Quadratic suppression: rank by score, keep a box when no kept box of
/// higher rank overlaps it beyond the threshold.
fn nms_oracle(boxes: &[BBox<f64>], scores: &[f64], thr: f64, topk: usize) -> Vec<usize> {
    let n = boxes.len();
    let overlap: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| plain_iou(&boxes[i], &boxes[j])).collect()).collect();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for &i in &rank {
        if kept.iter().all(|&j| overlap[i][j] <= thr) {
            kept.push(i);
        }
    }
    kept.truncate(topk);
    kept
}

/// Top-k by counting, for each candidate, how many others precede it.
fn topk_oracle(c: &[Candidate<f64>], k: usize) -> Vec<(usize, usize)> {
    let before = |a: &Candidate<f64>, b: &Candidate<f64>| {
        a.quality > b.quality || (a.quality == b.quality && (a.level, a.draw) < (b.level, b.draw))
    };
    let mut ranked: Vec<(usize, (usize, usize))> =
        c.iter().map(|x| (c.iter().filter(|y| before(y, x)).count(), (x.level, x.draw))).collect();
    ranked.sort();
    ranked.into_iter().filter(|&(r, _)| r < k).map(|(_, id)| id).collect()
}

fn oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    let mut iou_err: f64 = 0.0;
    for _ in 0..ORACLE_INSTANCES {
        let (a, b) = (lattice_box(&mut rng, 16), lattice_box(&mut rng, 16));
        iou_err = iou_err.max((iou(&a, &b).unwrap() - raster_iou(&a, &b, 16)).abs());
    }

    let mut roi_err: f64 = 0.0;
    for _ in 0..ORACLE_INSTANCES {
        let (c, h, w, stride) = (3, rng.random_range(1..10), rng.random_range(1..10), [2.0, 4.0, 8.0][rng.random_range(0..3)]);
        let grid = FeatureGrid::new(c, h, w, stride, uniform(&mut rng, c * h * w, -1.0, 1.0)).unwrap();
        let roi = random_roi(&mut rng, w as f64 * stride, h as f64 * stride);
        let pool = rng.random_range(1..8);
        let spb = rng.random_range(1..4);
        let got = roialign(&grid, &roi, pool, spb).unwrap().data;
        for (a, b) in got.iter().zip(roialign_oracle(&grid, &roi, pool, spb)) {
            roi_err = roi_err.max((a - b).abs());
        }
    }

    let mut nms_bad = 0;
    for _ in 0..ORACLE_INSTANCES {
        let n = rng.random_range(1..80);
        let boxes: Vec<BBox<f64>> = (0..n)
            .map(|_| {
                let (x, y) = (rng.random_range(0.0..40.0), rng.random_range(0.0..40.0));
                BBox::new(x, y, x + rng.random_range(1.0..25.0), y + rng.random_range(1.0..25.0)).unwrap()
            })
            .collect();
        // coarse scores force ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0f64) * 10.0).round() / 10.0).collect();
        let thr = rng.random_range(0.2..0.8);
        let topk = rng.random_range(1..100);
        if nms(&boxes, &scores, thr, topk) != nms_oracle(&boxes, &scores, thr, topk) {
            nms_bad += 1;
        }
    }

    let mut topk_bad = 0;
    let shape = GridShape::new(8, 8, 8.0).unwrap();
    for _ in 0..ORACLE_INSTANCES {
        let n = rng.random_range(1..60);
        let samples: Vec<Candidate<f64>> = (0..n)
            .map(|i| {
                let point = Point::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
                Candidate {
                    instance: 0,
                    level: rng.random_range(0..3),
                    draw: i,
                    point,
                    offset: NormalizedOffset::new(0.0, 0.0),
                    quality: (rng.random_range(0.0..1.0f64) * 20.0).round() / 20.0,
                    stencil: stencil_at(&shape, point).unwrap(),
                }
            })
            .collect();
        let k = rng.random_range(1..=n + 5);
        let got: Vec<(usize, usize)> = select_topk(&SampleSet { samples: samples.clone() }, k)
            .unwrap()
            .samples
            .iter()
            .map(|s| (s.level, s.draw))
            .collect();
        if got != topk_oracle(&samples, k) {
            topk_bad += 1;
        }
    }

    let elapsed = start.elapsed();
    let ok = iou_err <= IOU_TOL && roi_err <= ROI_TOL && nms_bad == 0 && topk_bad == 0 && elapsed < ORACLE_BUDGET;
    outcome(
        ok,
        format!(
            "{ORACLE_INSTANCES} cases each: IoU max error {iou_err:.1e}, RoIAlign max error {roi_err:.1e}, \
             NMS mismatches {nms_bad}, top-k mismatches {topk_bad}"
        ),
    )
}

// ---------------------------------------------------- 3: sampler statistics

/// Composite Simpson rule for `exp(-z^2 / 2)` over `[a, b]`.
fn gauss_mass(a: f64, b: f64) -> f64 {
    let n = 64;
    let h = (b - a) / n as f64;
    let f = |x: f64| (-0.5 * x * x).exp();
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn sampler() -> Outcome {
    let start = Instant::now();
    let g = QualityGmm::<f64>::fixed_baseline();
    let draws = g.sample_offsets(SAMPLER_DRAWS, &mut ChaCha8Rng::seed_from_u64(SAMPLER_SEED)).unwrap();
    let b = SAMPLER_BINS;
    let edge = |k: usize| -1.0 + 2.0 * k as f64 / b as f64;
    let axis: Vec<f64> = (0..b).map(|k| gauss_mass(edge(k), edge(k + 1))).collect();
    let total: f64 = axis.iter().sum();
    let mut counts = vec![0usize; b * b];
    let (mut mx, mut my) = (0.0, 0.0);
    for s in &draws {
        let bin = |v: f64| (((v + 1.0) / 2.0 * b as f64).floor() as usize).min(b - 1);
        counts[bin(s.offset.dy) * b + bin(s.offset.dx)] += 1;
        mx += s.offset.dx;
        my += s.offset.dy;
    }
    let n = SAMPLER_DRAWS as f64;
    let tv = 0.5
        * (0..b * b)
            .map(|i| (counts[i] as f64 / n - axis[i / b] * axis[i % b] / (total * total)).abs())
            .sum::<f64>();
    let (mx, my) = (mx / n, my / n);
    let elapsed = start.elapsed();
    let ok = tv < TV_TOL && mx.abs() <= MEAN_TOL && my.abs() <= MEAN_TOL && elapsed < SAMPLER_BUDGET;
    outcome(ok, format!("TV {tv:.4} (limit {TV_TOL}), mean ({mx:.4}, {my:.4}), {SAMPLER_DRAWS} draws in {b}x{b} bins"))
}

// ---------------------------------------------------------- 4: spot values

fn spot_values() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut peak_ok, mut sigma_err) = (true, 0.0f64);
    for _ in 0..1000 {
        let mu = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let sigma = [rng.random_range(0.05..2.0), rng.random_range(0.05..2.0)];
        let g = QualityGmm::new(vec![mu], vec![sigma], vec![1.0]).unwrap();
        peak_ok &= g.density(NormalizedOffset::new(mu[0], mu[1])) == 1.0;
        let a = rng.random_range(0..2);
        let mut d = mu;
        d[a] += if rng.random_bool(0.5) { sigma[a] } else { -sigma[a] };
        sigma_err = sigma_err.max((g.density(NormalizedOffset::new(d[0], d[1])) - (-0.5f64).exp()).abs());
    }
    outcome(
        peak_ok && sigma_err <= SPOT_TOL,
        format!("density at mu exactly 1: {peak_ok}; one sigma off, max error from e^-0.5 {sigma_err:.1e}"),
    )
}

// ------------------------------------------------------ 5: toy training

fn toy_training() -> Outcome {
    let start = Instant::now();
    let run = |mode: AssignMode| {
        let cfg = TrainConfig { steps: TRAIN_STEPS, mode, ..TrainConfig::default() };
        let mut ious = Vec::with_capacity(TRAIN_STEPS);
        let outcome = train_with::<f64>(&cfg, init_model(&cfg), |r| ious.push(r.mean_positive_iou)).unwrap();
        let tail = &ious[ious.len() - FINAL_WINDOW..];
        let mean_iou = tail.iter().sum::<f64>() / FINAL_WINDOW as f64;
        let report = evaluate(&outcome.model, &cfg, &heldout_scene_seeds(HELDOUT_SCENES)).unwrap();
        (mean_iou, report.ap50)
    };
    let (iq_iou, iq_ap) = run(AssignMode::Iqdet);
    let (c_iou, c_ap) = run(AssignMode::Center);
    let elapsed = start.elapsed();
    let ok = iq_iou > c_iou && iq_ap >= c_ap - AP_MARGIN && elapsed < TRAIN_BUDGET;
    outcome(
        ok,
        format!(
            "final-{FINAL_WINDOW}-step positive IoU iqdet {iq_iou:.5} vs center {c_iou:.5}; \
             AP@0.5 on {HELDOUT_SCENES} held-out scenes iqdet {iq_ap:.4} vs center {c_ap:.4}"
        ),
    )
}

// ------------------------------------------------------ 6: learnability

fn learnability() -> Outcome {
    let flags = [("none", false, false, false), ("mu", true, false, false), ("mu+sigma", true, true, false), ("mu+sigma+pi", true, true, true)];
    let mut notes = Vec::new();
    let mut ok = true;
    for (name, lm, ls, lp) in flags {
        let cfg = TrainConfig { steps: ABLATION_STEPS, learn_mu: lm, learn_sigma: ls, learn_pi: lp, ..TrainConfig::default() };
        let analytic = QualityGmm::<f64>::centered(cfg.components, 1.0, 1.0).unwrap();
        let (mut steps, mut fixed_held, mut moved) = (0, true, false);
        let result = train_with::<f64>(&cfg, init_model(&cfg), |r| {
            steps += 1;
            for g in &r.gmms {
                if !lm {
                    fixed_held &= g.mu == analytic.mu;
                }
                if !ls {
                    fixed_held &= g.sigma == analytic.sigma;
                }
                if !lp {
                    fixed_held &= g.pi == analytic.pi;
                }
                moved |= g != &analytic;
            }
        });
        let completed = result.is_ok() && steps == ABLATION_STEPS;
        // with every head fixed the mixture must be the centered Gaussian;
        // otherwise the learned heads must actually vary
        let shape_ok = if lm || ls || lp { moved } else { !moved };
        ok &= completed && fixed_held && shape_ok;
        notes.push(format!("{name}: {steps} steps, fixed heads exact {fixed_held}, learned heads vary {moved}"));
    }
    outcome(ok, notes.join("; "))
}

// ------------------------------------------------------ 7: determinism

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(common::bin());
        cmd.args(["train-toy", "--steps", DETERMINISM_STEPS, "--seed", "7", "--out"]).arg(&out);
        if let Some(t) = threads {
            cmd.env("IQDET_THREADS", t);
        }
        let status = cmd.output().unwrap().status;
        assert!(status.success(), "train-toy failed");
        out
    };
    let a = run("a", None);
    let b = run("b", None);
    let c = run("c", Some("3"));
    let files = ["log.jsonl", io::CHECKPOINT_TENSORS, io::CHECKPOINT_MANIFEST];
    let same = |x: &std::path::Path, y: &std::path::Path| files.iter().all(|f| fs::read(x.join(f)).unwrap() == fs::read(y.join(f)).unwrap());
    let (ab, ac) = (same(&a, &b), same(&a, &c));
    outcome(ab && ac, format!("{DETERMINISM_STEPS} steps: repeat run identical {ab}, 3-thread run identical {ac}"))
}

// ------------------------------------------------------ 8: golden files

fn golden() -> Outcome {
    match common::golden_mismatches() {
        Ok(bad) if bad.is_empty() => outcome(true, format!("{} byte-identical", common::GOLDEN_OUTPUTS.join(", "))),
        Ok(bad) => outcome(false, format!("differs: {}", bad.join(", "))),
        Err(e) => outcome(false, e),
    }
}
