//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p evifuse-cli --test acceptance`. Criteria 5 to 8
//! share one trained model (200 phantoms, 32×32, seed 42, 60 epochs).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use evifuse::autodiff::{exp_tanh, Graph, NodeId, ParamStore, Tensor};
use evifuse::losses::{evidence_loss, loss_gradients, total_loss, GroundTruthGrid, LossWeights};
use evifuse::metrics::{
    dcs, dgs, dice_score, ece, ece_pairs, neg_log_ece, ueo, volume_correlation, EvalRecord, ECE_FLOOR,
};
use evifuse::net::{Fusion, Model};
use evifuse::opinion::{combine, conflict, EvidenceMap, Opinion, OpinionGrid};
use evifuse::phantom::{generate_phantom, Perturbation, PhaseStack};
use evifuse::Error;
use evifuse_cli::{cmd_eval, cmd_phantom, cmd_train, evaluate, select, Evaluation, RunConfig, RunMeta, Subset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution, Exp1};

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit: Duration, start: Instant) -> Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        Err(format!("took {:.1} s, limit {} s", t.as_secs_f64(), limit.as_secs()))
    } else {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// 1. opinion algebra
// ---------------------------------------------------------------------------

fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let t: f64 = w.iter().sum();
    w.iter().map(|x| x / t).collect()
}

/// Uniform on the simplex, with uncertainty at least 1e-3.
fn random_opinion(rng: &mut ChaCha8Rng, n: usize) -> Opinion {
    let p = simplex(rng, n + 1);
    let u = 1e-3 + (1.0 - 1e-3) * p[n];
    let beliefs: Vec<f64> = p[..n].iter().map(|b| b * (1.0 - u) / (1.0 - p[n]).max(1e-300)).collect();
    let u = 1.0 - beliefs.iter().sum::<f64>();
    Opinion::new(beliefs, u).unwrap()
}

/// An opinion whose belief in `t` is at least `floor`.
fn agreeing_opinion(rng: &mut ChaCha8Rng, n: usize, t: usize, floor: f64) -> Opinion {
    let u = rng.random_range(1e-3..(1.0 - floor).max(2e-3));
    let room = (1.0 - u - floor).max(0.0);
    let bt = floor.min(1.0 - u) + rng.random::<f64>() * room;
    let rest = simplex(rng, n - 1);
    let mut beliefs = Vec::with_capacity(n);
    let mut k = 0;
    for i in 0..n {
        if i == t {
            beliefs.push(bt);
        } else {
            beliefs.push(rest[k] * (1.0 - u - bt).max(0.0));
            k += 1;
        }
    }
    let u = 1.0 - beliefs.iter().sum::<f64>();
    Opinion::new(beliefs, u).unwrap()
}

fn max_diff(a: &Opinion, b: &Opinion) -> f64 {
    a.beliefs()
        .iter()
        .zip(b.beliefs())
        .map(|(x, y)| (x - y).abs())
        .fold((a.uncertainty() - b.uncertainty()).abs(), f64::max)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let trials = 100_000;
    let tol = 1e-9;
    for trial in 0..trials {
        let n = [2, 3, 5][trial % 3];
        let (a, b, c) = (
            random_opinion(&mut rng, n),
            random_opinion(&mut rng, n),
            random_opinion(&mut rng, n),
        );
        let ab = combine(&a, &b).map_err(|e| format!("combine: {e}"))?;
        let mass: f64 = ab.beliefs().iter().sum::<f64>() + ab.uncertainty();
        ensure!((mass - 1.0).abs() <= tol && ab.beliefs().iter().all(|x| *x >= 0.0), "normalization, trial {trial}");
        ensure!(max_diff(&ab, &combine(&b, &a).unwrap()) <= tol, "commutativity, trial {trial}");
        let left = combine(&ab, &c).unwrap();
        let right = combine(&a, &combine(&b, &c).unwrap()).unwrap();
        ensure!(max_diff(&left, &right) <= 1e-8, "associativity, trial {trial}: {:e}", max_diff(&left, &right));
        let v = Opinion::vacuous(n);
        ensure!(
            max_diff(&combine(&a, &v).unwrap(), &a) <= 1e-12 && max_diff(&combine(&v, &a).unwrap(), &a) <= 1e-12,
            "vacuous identity, trial {trial}"
        );
        let cf = conflict(&a, &b).unwrap();
        ensure!((0.0..=1.0).contains(&cf), "conflict {cf} outside [0, 1]");

        // an expert whose target belief tops every belief of the original
        // never lowers it
        let t = rng.random_range(0..n);
        let top = a.beliefs().iter().cloned().fold(0.0, f64::max);
        let agree = agreeing_opinion(&mut rng, n, t, top);
        ensure!(agree.beliefs()[t] >= top, "agreeing construction");
        ensure!(
            combine(&a, &agree).unwrap().beliefs()[t] >= a.beliefs()[t] - tol,
            "agreeing expert lowered belief, trial {trial}"
        );
        // belief loss bounded through the other expert's uncertainty
        let (ua, ub) = (a.uncertainty(), b.uncertainty());
        for k in 0..n {
            let bound = a.beliefs()[k] * (1.0 + ua) / (1.0 / (1.0 - ub) + ua);
            ensure!(a.beliefs()[k] - ab.beliefs()[k] <= bound + tol, "belief-loss bound, trial {trial}");
        }
        // fusion never raises uncertainty
        ensure!(ab.uncertainty() <= ua.min(ub) + tol, "uncertainty increased, trial {trial}");
        // fused uncertainty is monotone in either input's uncertainty
        let dir = simplex(&mut rng, n);
        let (u1, u2) = {
            let (x, y) = (rng.random_range(0.01..0.99), rng.random_range(0.01..0.99));
            (f64::min(x, y), f64::max(x, y))
        };
        let with_u = |u: f64| Opinion::new(dir.iter().map(|d| d * (1.0 - u)).collect(), u).unwrap();
        let (lo, hi) = (with_u(u1), with_u(u2));
        ensure!(
            combine(&a, &lo).unwrap().uncertainty() <= combine(&a, &hi).unwrap().uncertainty() + 1e-12
                && combine(&lo, &a).unwrap().uncertainty() <= combine(&hi, &a).unwrap().uncertainty() + 1e-12,
            "uncertainty not monotone, trial {trial}"
        );
    }
    within(Duration::from_secs(30), start)?;
    Ok(format!("{trials} random pairs and triples over N in {{2, 3, 5}}"))
}

// ---------------------------------------------------------------------------
// 2. evidence loss against Monte Carlo
// ---------------------------------------------------------------------------

fn sampled<const N: usize>(alpha: &[f64], t: usize, draws: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let arr: [f64; N] = alpha.try_into().unwrap();
    let dist = Dirichlet::new(arr).unwrap();
    let (mut sum, mut sq) = (0.0, 0.0);
    for _ in 0..draws {
        let v = -dist.sample(rng)[t].ln();
        sum += v;
        sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean) * n / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws = 1_000_000;
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let n = [2, 3, 5][k % 3];
        let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..10.0)).collect();
        let t = rng.random_range(0..n);
        let y = GroundTruthGrid::new(n, 1, 1, vec![t]).unwrap();
        let closed = evidence_loss(&y, &alpha).map_err(|e| e.to_string())?;
        let (mean, se) = match n {
            2 => sampled::<2>(&alpha, t, draws, &mut rng),
            3 => sampled::<3>(&alpha, t, draws, &mut rng),
            _ => sampled::<5>(&alpha, t, draws, &mut rng),
        };
        let z = (closed - mean).abs() / se;
        worst = worst.max(z);
        ensure!(z < 3.0, "alpha {alpha:?}, target {t}: closed {closed}, sampled {mean} ± {se}");
    }
    within(Duration::from_secs(60), start)?;
    Ok(format!("20 random alphas, 1e6 draws each, worst deviation {worst:.2} standard errors"))
}

// ---------------------------------------------------------------------------
// 3. gradients against central differences
// ---------------------------------------------------------------------------

const H: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn objective(y: &GroundTruthGrid, maps: &[EvidenceMap], w: &LossWeights) -> f64 {
    let per_phase: Vec<(Vec<f64>, Vec<f64>)> = maps
        .iter()
        .map(|e| {
            let px = e.pixels();
            let alphas: Vec<f64> = e.data.iter().map(|v| v + 1.0).collect();
            let probs = (0..alphas.len())
                .map(|i| alphas[i] / (0..e.n_categories).map(|n| alphas[n * px + i % px]).sum::<f64>())
                .collect();
            (probs, alphas)
        })
        .collect();
    let grids: Vec<OpinionGrid> = maps.iter().map(OpinionGrid::from_evidence).collect();
    let fused = OpinionGrid::combine_many(&grids.iter().collect::<Vec<_>>()).unwrap();
    let pp: Vec<(&[f64], &[f64])> = per_phase.iter().map(|(p, a)| (p.as_slice(), a.as_slice())).collect();
    total_loss(y, &pp, (&fused.prediction().unwrap(), &fused.to_alphas().unwrap()), w).unwrap()
}

fn objective_worst(seed: u64, nc: usize, h: usize, w: usize, phases: usize, weights: &LossWeights) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = GroundTruthGrid::new(nc, h, w, (0..h * w).map(|_| rng.random_range(0..nc)).collect()).unwrap();
    let maps: Vec<EvidenceMap> = (0..phases)
        .map(|_| EvidenceMap::new(nc, h, w, (0..nc * h * w).map(|_| rng.random_range(0.37..2.7)).collect()).unwrap())
        .collect();
    let out = loss_gradients(&y, &maps.iter().collect::<Vec<_>>(), weights).unwrap();
    let mut worst: f64 = 0.0;
    for s in 0..phases {
        for i in 0..maps[s].data.len() {
            let at = |v: f64| {
                let mut m = maps.clone();
                m[s].data[i] = v;
                objective(&y, &m, weights)
            };
            let x = maps[s].data[i];
            let numeric = (at(x + H) - at(x - H)) / (2.0 * H);
            worst = worst.max(rel_err(out.grads[s][i], numeric));
        }
    }
    worst
}

type Build<'a> = dyn Fn(&mut Graph, &ParamStore) -> NodeId + 'a;

fn layer_worst(store: &mut ParamStore, build: &Build, seed: u64) -> f64 {
    let mut g = Graph::new();
    let out = build(&mut g, store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: Vec<f64> = (0..g.value(out).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    store.zero_grad();
    g.backward(&[(out, &c)], store).unwrap();
    let loss = |s: &ParamStore| {
        let mut g = Graph::new();
        let out = build(&mut g, s);
        g.value(out).data().iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut worst: f64 = 0.0;
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let id = store.find(&name).unwrap();
        for i in 0..store.get(id).value.len() {
            let x = store.get(id).value.data()[i];
            let mut probe = store.clone();
            probe.get_mut(id).value.data_mut()[i] = x + H;
            let up = loss(&probe);
            probe.get_mut(id).value.data_mut()[i] = x - H;
            let down = loss(&probe);
            worst = worst.max(rel_err(store.get(id).grad[i], (up - down) / (2.0 * H)));
        }
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut checks: Vec<(&str, f64)> = Vec::new();
    let default = LossWeights::default();
    let evidence_only = LossWeights {
        lambda_p: 1.0,
        lambda_m: 0.0,
        ..default
    };
    let mixture_only = LossWeights {
        lambda_p: 0.0,
        lambda_m: 1.0,
        ..default
    };
    checks.push(("objective 3x3, 2 phases", objective_worst(1, 2, 3, 3, 2, &default)));
    checks.push(("objective 4x4, 4 phases, N=3", objective_worst(2, 3, 4, 4, 4, &default)));
    checks.push(("objective 8x8, 4 phases", objective_worst(3, 2, 8, 8, 4, &default)));
    checks.push(("phase terms only", objective_worst(4, 2, 5, 5, 3, &evidence_only)));
    checks.push(("fusion path only", objective_worst(5, 3, 5, 4, 4, &mixture_only)));
    checks.push(("single phase", objective_worst(6, 2, 6, 6, 1, &default)));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0));
    let w = store.add("w", rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5));
    let b = store.add("b", rand_tensor(&mut rng, &[4], -0.5, 0.5));
    checks.push((
        "conv 3x3",
        layer_worst(
            &mut store,
            &|g, s| {
                let (xi, wi, bi) = (g.param(s, x), g.param(s, w), g.param(s, b));
                g.conv2d(xi, wi, bi).unwrap()
            },
            1,
        ),
    ));

    let mut store = ParamStore::new();
    let x = store.add("x", rand_tensor(&mut rng, &[1, 2, 8, 8], -3.0, 3.0));
    checks.push((
        "exp(tanh)",
        layer_worst(
            &mut store,
            &|g, s| {
                let xi = g.param(s, x);
                g.exp_tanh(xi)
            },
            2,
        ),
    ));

    let mut store = ParamStore::new();
    let data: Vec<f64> = (0..2 * 8 * 8)
        .map(|_| rng.random_range(0.05..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let x = store.add("x", Tensor::new(vec![1, 2, 8, 8], data).unwrap());
    checks.push((
        "relu, pool, upsample, add",
        layer_worst(
            &mut store,
            &|g, s| {
                let xi = g.param(s, x);
                let r = g.relu(xi);
                let p = g.avg_pool2(r).unwrap();
                let u = g.upsample2(p).unwrap();
                g.add(u, xi).unwrap()
            },
            3,
        ),
    ));

    for (name, worst) in &checks {
        ensure!(*worst < 1e-4, "{name}: max relative error {worst:e}");
    }
    within(Duration::from_secs(60), start)?;
    let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
    Ok(format!("{} gradient checks, max relative error {worst:.1e}", checks.len()))
}

// ---------------------------------------------------------------------------
// 4. evidence bound
// ---------------------------------------------------------------------------

fn criterion_4() -> Outcome {
    use std::f64::consts::E;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (u_lo, u_hi) = (1.0 / (1.0 + E), E / (1.0 + E));
    let passes = 10_000;
    let (mut e_min, mut e_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for x in [f64::MIN, -1e300, -40.0, -1.0, 0.0, 1.0, 40.0, 1e300, f64::MAX] {
        let v = exp_tanh(x);
        ensure!(v > 1.0 / E && v < E, "exp(tanh({x})) = {v} outside (1/e, e)");
    }
    let mut model = None;
    for pass in 0..passes {
        if pass % 500 == 0 {
            let mut m = Model::new(evifuse::net::NetworkConfig {
                seed: pass as u64,
                ..Default::default()
            })
            .unwrap();
            let scale = rng.random_range(1.0..1000.0);
            for p in m.params_mut().iter_mut() {
                if p.name.ends_with(".out.weight") {
                    p.value.data_mut().iter_mut().for_each(|v| *v *= scale);
                }
            }
            model = Some(m);
        }
        let m = model.as_ref().unwrap();
        let mag = 10f64.powf(rng.random_range(-2.0..3.0));
        let f = rand_tensor(&mut rng, &[1, m.config().channels, 4, 4], -mag, mag);
        let ev = m.expert_forward(pass % 4, &f).map_err(|e| e.to_string())?;
        let d = ev.data();
        for &v in d {
            e_min = e_min.min(v);
            e_max = e_max.max(v);
            ensure!(v > 1.0 / E && v < E, "evidence {v} outside (1/e, e)");
        }
        let px = d.len() / 2;
        for p in 0..px {
            let u = 2.0 / (d[p] + d[p + px] + 2.0);
            ensure!(u > u_lo && u < u_hi, "uncertainty {u} outside ({u_lo:.4}, {u_hi:.4})");
        }
    }
    Ok(format!("{passes} expert passes, evidence in [{e_min:.6}, {e_max:.6}]"))
}

// ---------------------------------------------------------------------------
// 5 to 8. trained model on the phantom task
// ---------------------------------------------------------------------------

struct Trained {
    model: Model,
    test: Vec<PhaseStack>,
    meta: RunMeta,
    train_time: Duration,
}

static TRAINED: OnceLock<Result<Trained, String>> = OnceLock::new();

fn trained() -> Result<&'static Trained, String> {
    TRAINED
        .get_or_init(|| {
            let cfg = RunConfig::default().resolve().map_err(|e| e.to_string())?;
            let start = Instant::now();
            let data = generate_phantom(cfg.phantom.count, cfg.phantom.size, cfg.seed).map_err(|e| e.to_string())?;
            let train = select(data.clone(), cfg.split.train_fraction, Subset::Train).map_err(|e| e.to_string())?;
            let test = select(data, cfg.split.train_fraction, Subset::Test).map_err(|e| e.to_string())?;
            let mut model = Model::new(cfg.network.clone()).map_err(|e| e.to_string())?;
            evifuse::net::train_model(&mut model, &train, &cfg.train, &cfg.loss, |_| {}).map_err(|e| e.to_string())?;
            Ok(Trained {
                model,
                test,
                meta: cfg.meta(),
                train_time: start.elapsed(),
            })
        })
        .as_ref()
        .map_err(|e| format!("training failed: {e}"))
}

fn eval_on_test(fusion: Fusion, p: Perturbation) -> Result<Evaluation, String> {
    let t = trained()?;
    evaluate(&t.model, &t.test, fusion, p, 10, &t.meta).map_err(|e| e.to_string())
}

fn criterion_5() -> Outcome {
    let t = trained()?;
    let e = eval_on_test(Fusion::Mems, Perturbation::None)?;
    let r = &e.report;
    ensure!(t.train_time < Duration::from_secs(600), "training took {:.0} s", t.train_time.as_secs_f64());
    ensure!(r.dgs >= 0.85 && r.dcs >= 0.80, "held-out DGS {:.4}, DCS {:.4}", r.dgs, r.dcs);
    Ok(format!(
        "held-out DGS {:.4}, DCS {:.4} ({} slices), trained in {:.0} s",
        r.dgs,
        r.dcs,
        r.n_slices,
        t.train_time.as_secs_f64()
    ))
}

const NOISE_SWEEP: [f64; 5] = [0.0, 0.03, 0.05, 0.1, 0.2];

fn noise(v: f64) -> Perturbation {
    if v == 0.0 {
        Perturbation::None
    } else {
        Perturbation::Noise { variance: v }
    }
}

fn criterion_6() -> Outcome {
    let mut dgs_vals = Vec::new();
    let mut u_vals = Vec::new();
    for v in NOISE_SWEEP {
        let r = eval_on_test(Fusion::Mems, noise(v))?.report;
        dgs_vals.push(r.dgs);
        u_vals.push(r.mean_u_fused);
    }
    for i in 1..NOISE_SWEEP.len() {
        ensure!(
            dgs_vals[i] <= dgs_vals[i - 1] + 0.01,
            "DGS rose from {:.4} to {:.4} at noise {}",
            dgs_vals[i - 1],
            dgs_vals[i],
            NOISE_SWEEP[i]
        );
        ensure!(
            u_vals[i] >= u_vals[i - 1] - 0.01,
            "fused u fell from {:.4} to {:.4} at noise {}",
            u_vals[i - 1],
            u_vals[i],
            NOISE_SWEEP[i]
        );
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" ");
    Ok(format!("DGS {} / mean fused u {}", fmt(&dgs_vals), fmt(&u_vals)))
}

fn criterion_7() -> Outcome {
    let mut strictly = false;
    let mut parts = Vec::new();
    for p in [Perturbation::Missing { count: 1 }, Perturbation::Noise { variance: 0.1 }] {
        let m = eval_on_test(Fusion::Mems, p)?.report.dgs;
        let a = eval_on_test(Fusion::Average, p)?.report.dgs;
        ensure!(m >= a - 0.01, "{p}: MEMS DGS {m:.4} below average DGS {a:.4} - 0.01");
        strictly |= m > a;
        parts.push(format!("{p}: MEMS {m:.5} vs average {a:.5}"));
    }
    ensure!(strictly, "MEMS never strictly ahead ({})", parts.join("; "));
    Ok(parts.join("; "))
}

fn criterion_8() -> Outcome {
    let settings = [
        Perturbation::None,
        Perturbation::Noise { variance: 0.03 },
        Perturbation::Noise { variance: 0.05 },
        Perturbation::Noise { variance: 0.1 },
        Perturbation::Noise { variance: 0.2 },
        Perturbation::Blur { variance: 10.0, kernel: 13 },
        Perturbation::Missing { count: 1 },
        Perturbation::Missing { count: 2 },
        Perturbation::Missing { count: 3 },
    ];
    let (mut pixels, mut samples) = (0usize, 0usize);
    let mut worst = f64::NEG_INFINITY;
    for p in settings {
        let e = eval_on_test(Fusion::Mems, p)?;
        ensure!(
            e.uncertainty_violations == 0,
            "{p}: {} pixels exceed the smallest phase uncertainty (max excess {:e})",
            e.uncertainty_violations,
            e.max_uncertainty_excess
        );
        for (f, m) in e.sample_u_fused.iter().zip(&e.sample_u_phase_min) {
            ensure!(*f <= m + 1e-9, "{p}: sample mean fused u {f} above phase mean {m}");
        }
        pixels += e.n_pixels;
        samples += e.sample_u_fused.len();
        worst = worst.max(e.max_uncertainty_excess);
    }
    Ok(format!(
        "{samples} samples, {pixels} pixels over {} settings, max fused-minus-phase u {worst:.3e}",
        settings.len()
    ))
}

// ---------------------------------------------------------------------------
// 9. determinism
// ---------------------------------------------------------------------------

/// Every file under `dir` as (relative path, bytes), in sorted order.
fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out
}

fn full_run(root: &Path, cfg: &RunConfig) -> Result<(), String> {
    let data = root.join("data");
    cmd_phantom(cfg, &data).map_err(|e| e.to_string())?;
    let run = cmd_train(cfg, &data, Subset::Train, &root.join("run")).map_err(|e| e.to_string())?;
    cmd_eval(cfg, &run.checkpoint, &data, Subset::Test, &root.join("eval")).map_err(|e| e.to_string())?;
    Ok(())
}

fn criterion_9() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.phantom.count = 24;
    cfg.train.epochs = 3;
    cfg.train.augment_rotation = true;
    cfg.eval.perturb = vec!["none".into(), "noise:0.1".into(), "blur:10,13".into(), "missing:2".into()];
    let cfg = cfg.resolve().map_err(|e| e.to_string())?;
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        full_run(d.path(), &cfg)?;
    }
    let mut files = 0;
    for sub in ["data", "run", "eval"] {
        let a = read_tree(&dirs[0].path().join(sub));
        let b = read_tree(&dirs[1].path().join(sub));
        ensure!(a.len() == b.len(), "{sub}: {} vs {} files", a.len(), b.len());
        for ((pa, ba), (pb, bb)) in a.iter().zip(&b) {
            ensure!(pa == pb && ba == bb, "{sub}/{} differs between runs", pa.display());
        }
        files += a.len();
    }
    let csv = std::fs::read_to_string(dirs[0].path().join("eval/metrics.csv")).unwrap();
    ensure!(csv.contains(&cfg.meta().run_id), "metrics CSV lacks the run id");
    Ok(format!("{files} files byte-identical across two runs (dataset, checkpoint, loss and metric CSVs)"))
}

// ---------------------------------------------------------------------------
// 10. metric examples
// ---------------------------------------------------------------------------

fn record(case_id: usize, pred: &[u8], truth: &[u8]) -> EvalRecord {
    let n = pred.len();
    EvalRecord::new(case_id, pred.to_vec(), truth.to_vec(), vec![0.5; n], vec![0.9; n]).unwrap()
}

fn ueo_sweep_oracle(u: &[f64], err: &[u8]) -> f64 {
    let lo = u.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut best = 0.0f64;
    for i in 1..=99 {
        let tau = i as f64 / 100.0;
        let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
        for (x, e) in u.iter().zip(err) {
            let norm = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
            match (norm > tau, *e == 1) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fneg += 1.0,
                _ => {}
            }
        }
        best = best.max(if tp + fp + fneg == 0.0 { 1.0 } else { 2.0 * tp / (2.0 * tp + fp + fneg) });
    }
    best
}

fn criterion_10() -> Outcome {
    let mut n = 0;
    let mut check = |ok: bool, what: &str| -> Result<(), String> {
        n += 1;
        if ok {
            Ok(())
        } else {
            Err(what.to_string())
        }
    };
    // dice
    check(dice_score(&[1, 1, 0], &[1, 1, 0]).unwrap() == 1.0, "dice identical")?;
    check(dice_score(&[1, 0, 0], &[0, 1, 0]).unwrap() == 0.0, "dice disjoint")?;
    check(dice_score(&[1, 0, 1, 0], &[1, 1, 0, 0]).unwrap() == 0.5, "dice half overlap")?;
    check(dice_score(&[0, 0], &[0, 0]).unwrap() == 1.0, "dice both empty")?;
    check(matches!(dice_score(&[0], &[0, 1]), Err(Error::Shape(_))), "dice shape error")?;
    // DGS / DCS
    let perfect = [record(0, &[1, 0], &[1, 0]), record(1, &[0, 0], &[0, 0])];
    check(dgs(&perfect).unwrap() == 1.0 && dcs(&perfect).unwrap() == 1.0, "perfect slices")?;
    let half = [record(0, &[1, 0], &[1, 0]), record(0, &[1, 0], &[0, 1])];
    check(dgs(&half).unwrap() == 0.5, "DGS of dice 1 and 0")?;
    let case = [
        record(3, &[1, 0, 0, 0, 0, 0], &[1, 0, 0, 0, 0, 0]),
        record(3, &[1, 0, 0, 0, 0, 1], &[1, 1, 1, 1, 0, 0]),
    ];
    check((dgs(&case).unwrap() - 2.0 / 3.0).abs() < 1e-15, "slice-averaged dice 2/3")?;
    check((dcs(&case).unwrap() - 0.5).abs() < 1e-15, "pooled case dice 1/2")?;
    check(matches!(dgs(&[]), Err(Error::EmptyInput(_))), "DGS empty input")?;
    check(matches!(dcs(&[]), Err(Error::EmptyInput(_))), "DCS empty input")?;
    // ECE
    let sure = EvalRecord::new(0, vec![1, 0], vec![1, 0], vec![0.1, 0.1], vec![1.0, 1.0]).unwrap();
    let e0 = ece(&[sure], 10).unwrap();
    check(e0 == 0.0 && neg_log_ece(e0) == -ECE_FLOOR.ln(), "perfect calibration")?;
    let matched = ece_pairs(&[0.8; 10], &(0..10).map(|i| i < 8).collect::<Vec<_>>(), 1).unwrap();
    check(matched.abs() < 1e-15, "matched single bin")?;
    let mut conf = vec![0.9; 100];
    conf.extend(vec![0.6; 100]);
    let correct: Vec<bool> = (0..100).map(|i| i < 70).chain((0..100).map(|i| i < 60)).collect();
    let e2 = ece_pairs(&conf, &correct, 10).unwrap();
    check((e2 - 0.1).abs() < 1e-12, "two constructed bins give 0.1")?;
    check((neg_log_ece(e2) - 2.302_585_093).abs() < 1e-8, "negative log ECE 2.3026")?;
    check(matches!(ece_pairs(&[], &[], 10), Err(Error::EmptyInput(_))), "ECE empty input")?;
    // UEO
    let err = [0, 1, 1, 0, 0, 1];
    let u: Vec<f64> = err.iter().map(|e| if *e == 1 { 1.0 } else { 0.05 }).collect();
    check(ueo(&u, &err).unwrap() == 1.0, "UEO exact overlap")?;
    check(ueo(&[0.4; 4], &[0; 4]).unwrap() == 1.0, "UEO no errors, flat map")?;
    check(ueo(&[0.2, 0.9, 0.4, 0.3], &[0; 4]).unwrap() == 0.0, "UEO no errors, varying map")?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for size in [4usize, 64, 4096] {
        let u: Vec<f64> = (0..size).map(|_| rng.random_range(0.01..1.0)).collect();
        let err: Vec<u8> = (0..size).map(|_| u8::from(rng.random_bool(0.2))).collect();
        check(ueo(&u, &err).unwrap() == ueo_sweep_oracle(&u, &err), "UEO matches the sweep oracle")?;
    }
    // correlation
    let t = [10.0, 25.0, 3.0, 40.0];
    check((volume_correlation(&t, &t).unwrap() - 1.0).abs() < 1e-15, "r = 1")?;
    let neg: Vec<f64> = t.iter().map(|v| 100.0 - v).collect();
    check((volume_correlation(&neg, &t).unwrap() + 1.0).abs() < 1e-15, "r = -1")?;
    check(
        matches!(volume_correlation(&[1.0; 3], &[1.0, 2.0, 3.0]), Err(Error::DegenerateCorrelation(_))),
        "constant input",
    )?;
    Ok(format!("{n} metric examples"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "opinion algebra properties", criterion_1),
        (2, "evidence loss matches Monte Carlo", criterion_2),
        (3, "gradients match finite differences", criterion_3),
        (4, "evidence bound", criterion_4),
        (5, "end-to-end learning", criterion_5),
        (6, "robustness direction under noise", criterion_6),
        (7, "MEMS versus average fusion", criterion_7),
        (8, "fused uncertainty below phase uncertainty", criterion_8),
        (9, "determinism", criterion_9),
        (10, "metric examples", criterion_10),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, f) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {id}: PASS {name}: {detail} [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {id}: FAIL {name}: {why} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
