use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use evifuse::metrics::{
    case_volumes, dcs, dgs, ece, neg_log_ece, ueo_by_case, volume_correlation, EvalRecord, MetricsReport,
};
use evifuse::net::{forward_pipeline, train_model, EpochStats, Fusion, Model};
use evifuse::phantom::{
    generate_phantom, perturb, read_dataset, sample_dir_name, write_dataset, Manifest, PerturbSpec,
    Perturbation, PhaseStack, GENERATOR_VERSION,
};
use serde::Serialize;

use crate::config::{RunConfig, RunMeta};
use crate::{create_dir, write_file, CliError, Result};

/// Tolerance of the fused-versus-phase uncertainty check.
pub const UNCERTAINTY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    Train,
    Test,
    All,
}

/// Keeps the requested side of the case-level split: the first
/// `round(train_fraction * n_cases)` case ids train, the rest test.
pub fn select(samples: Vec<PhaseStack>, train_fraction: f64, subset: Subset) -> Result<Vec<PhaseStack>> {
    let cases: BTreeSet<usize> = samples.iter().map(|s| s.case_id).collect();
    let n_train = ((train_fraction * cases.len() as f64).round() as usize).min(cases.len());
    let train_cases: BTreeSet<usize> = cases.iter().take(n_train).copied().collect();
    let kept: Vec<PhaseStack> = samples
        .into_iter()
        .filter(|s| match subset {
            Subset::All => true,
            Subset::Train => train_cases.contains(&s.case_id),
            Subset::Test => !train_cases.contains(&s.case_id),
        })
        .collect();
    if kept.is_empty() {
        return Err(CliError::Config(format!(
            "{subset:?} subset is empty (train_fraction {train_fraction}, {} cases)",
            cases.len()
        )));
    }
    Ok(kept)
}

pub fn cmd_phantom(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let meta = cfg.meta();
    let samples = generate_phantom(cfg.phantom.count, cfg.phantom.size, cfg.seed)?;
    let manifest = Manifest {
        generator_version: GENERATOR_VERSION,
        seed: cfg.seed,
        count: cfg.phantom.count,
        size: cfg.phantom.size,
        config_hash: meta.config_hash,
        samples: samples.iter().map(|s| sample_dir_name(s.id)).collect(),
    };
    write_dataset(out, &samples, &manifest).map_err(|e| at(out, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    #[serde(flatten)]
    pub meta: RunMeta,
    pub dataset_config_hash: String,
    pub n_samples: usize,
    pub curve: Vec<EpochStats>,
    #[serde(serialize_with = "file_name")]
    pub checkpoint: PathBuf,
    #[serde(serialize_with = "file_name")]
    pub loss_csv: PathBuf,
    pub config: RunConfig,
}

pub const LOSS_CSV_HEADER: &str = "run_id,epoch,total,phase_term,mixture_term,lr";

pub fn cmd_train(cfg: &RunConfig, data: &Path, subset: Subset, out: &Path) -> Result<TrainOutcome> {
    let meta = cfg.meta();
    let (manifest, samples) = read_dataset(data).map_err(|e| at(data, e))?;
    let samples = select(samples, cfg.split.train_fraction, subset)?;
    let mut model = Model::new(cfg.network.clone())?;
    let curve = train_model(&mut model, &samples, &cfg.train, &cfg.loss, |_| {})?;

    create_dir(out)?;
    let checkpoint = out.join("model.ckpt");
    model.save(&checkpoint, &meta.run_id).map_err(|e| at(&checkpoint, e))?;
    let mut csv = String::from(LOSS_CSV_HEADER);
    csv.push('\n');
    for s in &curve {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            meta.run_id, s.epoch, s.total, s.phase_term, s.mixture_term, s.lr
        )
        .expect("write to string");
    }
    let loss_csv = out.join("loss.csv");
    write_file(&loss_csv, csv)?;

    let outcome = TrainOutcome {
        meta,
        dataset_config_hash: manifest.config_hash,
        n_samples: samples.len(),
        curve,
        checkpoint,
        loss_csv,
        config: cfg.clone(),
    };
    write_json(&out.join("train.json"), &outcome)?;
    Ok(outcome)
}

/// `perturb_param` column: the magnitude, with the blur kernel after a `/`.
pub fn perturb_param(p: &Perturbation) -> String {
    match *p {
        Perturbation::None => "0".into(),
        Perturbation::Noise { variance } => format!("{variance}"),
        Perturbation::Blur { variance, kernel } => format!("{variance}/{kernel}"),
        Perturbation::Missing { count } => format!("{count}"),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub report: MetricsReport,
    #[serde(skip)]
    pub records: Vec<EvalRecord>,
    /// Mean fused uncertainty per sample.
    pub sample_u_fused: Vec<f64>,
    /// Smallest per-phase mean uncertainty per sample.
    pub sample_u_phase_min: Vec<f64>,
    /// Pixels whose fused uncertainty exceeds the smallest present-phase
    /// uncertainty by more than [`UNCERTAINTY_TOL`].
    pub uncertainty_violations: usize,
    pub max_uncertainty_excess: f64,
    pub n_pixels: usize,
}

/// Runs the full pipeline over `samples` under one perturbation; the
/// perturbation stream is seeded with `meta.seed`.
pub fn evaluate(
    model: &Model,
    samples: &[PhaseStack],
    fusion: Fusion,
    perturbation: Perturbation,
    ece_bins: usize,
    meta: &RunMeta,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(CliError::Config("nothing to evaluate".into()));
    }
    let spec = PerturbSpec {
        perturbation,
        seed: meta.seed,
    };
    let mut records = Vec::with_capacity(samples.len());
    let mut phase_sum = [0.0f64; 4];
    let mut phase_px = [0usize; 4];
    let (mut fused_sum, mut n_pixels) = (0.0, 0usize);
    let (mut present_min, mut present_max) = (usize::MAX, 0usize);
    let (mut violations, mut max_excess) = (0usize, f64::NEG_INFINITY);
    let mut sample_u_fused = Vec::with_capacity(samples.len());
    let mut sample_u_phase_min = Vec::with_capacity(samples.len());
    for sample in samples {
        let s = match perturbation {
            Perturbation::None => sample.clone(),
            _ => perturb(sample, &spec)?,
        };
        let out = forward_pipeline(model, &s, fusion)?;
        let px = s.pixels();
        let labels = out.labels();
        let p = out.prediction()?;
        let confidence: Vec<f64> = (0..px).map(|i| p[labels[i] * px + i]).collect();
        let u = &out.fused.uncertainty;

        let mut phase_means = Vec::with_capacity(out.phases.len());
        for (phase, grid) in out.phases.iter().zip(&out.phase_opinions) {
            let sum: f64 = grid.uncertainty.iter().sum();
            phase_sum[phase.index()] += sum;
            phase_px[phase.index()] += px;
            phase_means.push(sum / px as f64);
        }
        for i in 0..px {
            let min_phase = out
                .phase_opinions
                .iter()
                .map(|g| g.uncertainty[i])
                .fold(f64::INFINITY, f64::min);
            let excess = u[i] - min_phase;
            max_excess = max_excess.max(excess);
            if excess > UNCERTAINTY_TOL {
                violations += 1;
            }
        }
        let fused_total: f64 = u.iter().sum();
        sample_u_fused.push(fused_total / px as f64);
        sample_u_phase_min.push(phase_means.iter().copied().fold(f64::INFINITY, f64::min));
        fused_sum += fused_total;
        n_pixels += px;
        present_min = present_min.min(out.phases.len());
        present_max = present_max.max(out.phases.len());

        records.push(EvalRecord::new(
            s.case_id,
            labels.iter().map(|l| *l as u8).collect(),
            s.mask.clone(),
            u.clone(),
            confidence,
        )?);
    }

    let e = ece(&records, ece_bins)?;
    let (pred_vol, true_vol) = case_volumes(&records);
    let n_cases = records.iter().map(|r| r.case_id).collect::<BTreeSet<_>>().len();
    let mut mean_u_phase = [None; 4];
    for k in 0..4 {
        if phase_px[k] > 0 {
            mean_u_phase[k] = Some(phase_sum[k] / phase_px[k] as f64);
        }
    }
    let report = MetricsReport {
        run_id: meta.run_id.clone(),
        fusion: fusion.name().into(),
        perturb_kind: perturbation.kind().into(),
        perturb_param: perturb_param(&perturbation),
        dgs: dgs(&records)?,
        dcs: dcs(&records)?,
        ece: e,
        neg_log_ece: neg_log_ece(e),
        ueo: ueo_by_case(&records)?,
        pearson_r: volume_correlation(&pred_vol, &true_vol).ok(),
        mean_u_fused: fused_sum / n_pixels as f64,
        mean_u_phase,
        n_slices: records.len(),
        n_cases,
        present_min,
        present_max,
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
    };
    Ok(Evaluation {
        report,
        records,
        sample_u_fused,
        sample_u_phase_min,
        uncertainty_violations: violations,
        max_uncertainty_excess: max_excess,
        n_pixels,
    })
}

#[derive(Serialize)]
struct EvalFile<'a> {
    #[serde(flatten)]
    meta: &'a RunMeta,
    checkpoint_run_id: &'a str,
    n_samples: usize,
    evaluations: &'a [Evaluation],
    config: &'a RunConfig,
}

/// Evaluates a checkpoint once per configured perturbation and writes
/// `metrics.csv` and `metrics.json` into `out`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path, subset: Subset, out: &Path) -> Result<Vec<Evaluation>> {
    let meta = cfg.meta();
    let (model, header) = Model::load(checkpoint).map_err(|e| at(checkpoint, e))?;
    let (_, samples) = read_dataset(data).map_err(|e| at(data, e))?;
    let samples = select(samples, cfg.split.train_fraction, subset)?;
    let evaluations = cfg
        .perturbations()?
        .into_iter()
        .map(|p| evaluate(&model, &samples, cfg.eval.fusion, p, cfg.eval.ece_bins, &meta))
        .collect::<Result<Vec<_>>>()?;

    create_dir(out)?;
    let mut csv = MetricsReport::csv_header();
    csv.push('\n');
    for e in &evaluations {
        csv.push_str(&e.report.csv_row());
        csv.push('\n');
    }
    write_file(&out.join("metrics.csv"), csv)?;
    write_json(
        &out.join("metrics.json"),
        &EvalFile {
            meta: &meta,
            checkpoint_run_id: &header.run_id,
            n_samples: samples.len(),
            evaluations: &evaluations,
            config: cfg,
        },
    )?;
    Ok(evaluations)
}

/// Prefixes an error with the path it came from.
fn at(path: &Path, e: evifuse::Error) -> CliError {
    match CliError::from(e) {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        CliError::Runtime(m) => CliError::Runtime(format!("{}: {m}", path.display())),
    }
}

/// Serializes only the file name of an output path.
fn file_name<S: serde::Serializer>(path: &Path, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(path, text + "\n")?;
    Ok(())
}
