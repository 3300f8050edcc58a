use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::record::{write_samples_csv, RealizationFile, SampleOutcome, SampleRecord, TargetKind};
use crate::critical::{critical_space, rho_scan, RhoScan};
use crate::error::{Error, Result};
use crate::fv::{reoptimize, run_fv, FvConfig, Realization};
use crate::metrics::{angular_distance, decompose, DecompositionReport, DecompositionRow, STABILITY_THRESHOLD};
use crate::network::JacobianMatrix;
use crate::objective::{FeatureObjective, FeatureResponse};
use crate::pipeline::FeaturePipeline;
use crate::sampling::{hoyer, sample_objective};
use crate::solver::{out_of_c_fraction, predict_objective, project_objective, Prediction, SubspaceBasis};

/// Fraction of failed samples above which a run counts as failed.
pub const MAX_FAILURE_FRACTION: f64 = 0.1;

/// Scores closer than this are treated as equal during selection.
const SELECTION_TIE: f64 = 1e-9;

#[derive(Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Target = 0,
    FvInit = 1,
    Random = 2,
}

/// Validation samples draw from indices above this offset.
const VALIDATION_OFFSET: u64 = 1 << 32;

/// Independent generator for `(seed, index, purpose)`.
fn stream(seed: u64, index: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_mul(4) + purpose as u64);
    rng
}

#[derive(Debug, Clone)]
struct Target {
    index: usize,
    kind: TargetKind,
    x: FeatureObjective,
    sparseness: f64,
    fv_seed: u64,
    random: FeatureObjective,
}

fn make_target(seed: u64, stream_index: u64, index: usize, kind: TargetKind, n_f: usize, canonical: usize) -> Result<Target> {
    let x = match kind {
        TargetKind::Random => sample_objective(n_f, &mut stream(seed, stream_index, Purpose::Target))?.x,
        TargetKind::Canonical => FeatureObjective::canonical(n_f, canonical % n_f),
    };
    Ok(Target {
        index,
        kind,
        sparseness: hoyer(&x.as_slice().iter().map(|v| v.abs()).collect::<Vec<_>>())?,
        x,
        fv_seed: stream(seed, stream_index, Purpose::FvInit).next_u64(),
        random: sample_objective(n_f, &mut stream(seed, stream_index, Purpose::Random))?.x,
    })
}

/// A realization of a known target.
#[derive(Debug, Clone)]
pub struct KnownRealization {
    pub x_true: FeatureObjective,
    pub y: FeatureResponse,
    pub jacobian: JacobianMatrix,
}

/// Median angular distance between predictions and projected targets, or
/// `None` if no target is recoverable under `c`.
pub fn validation_score(c: &SubspaceBasis, samples: &[KnownRealization], k: u32) -> Option<f64> {
    let mut d: Vec<f64> = samples
        .iter()
        .filter_map(|s| {
            let proj = project_objective(&s.x_true, &s.y, k, c).ok()?;
            let pred = predict_objective(&s.y, &s.jacobian, k, c).ok()?;
            Some(angular_distance(&pred.x_hat, &proj))
        })
        .collect();
    median(&mut d)
}

/// Index of the candidate with the lowest [`validation_score`]; ties go to
/// the lower-dimensional candidate, then to the earlier one. Falls back to
/// the first candidate when none can be scored.
pub fn select_critical_space(candidates: &[SubspaceBasis], samples: &[KnownRealization], k: u32) -> (usize, Vec<Option<f64>>) {
    let scores: Vec<Option<f64>> = candidates.iter().map(|c| validation_score(c, samples, k)).collect();
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        let Some(s) = *s else { continue };
        best = match best {
            None => Some(i),
            Some(b) => {
                let sb = scores[b].expect("scored");
                let better = s < sb - SELECTION_TIE || ((s - sb).abs() <= SELECTION_TIE && candidates[i].dim() < candidates[b].dim());
                Some(if better { i } else { b })
            }
        };
    }
    (best.unwrap_or(0), scores)
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub label: String,
    pub critical_space: SubspaceBasis,
    pub validation_median_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalSpaceReport {
    pub jacobians_used: usize,
    pub scan: Option<RhoScan>,
    pub candidates: Vec<Candidate>,
    pub selected: usize,
    /// Known-target realizations the selection was scored on.
    pub selection_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub samples: usize,
    pub failed: usize,
    pub validation_samples: usize,
    pub validation_failed: usize,
    pub critical_space_dim: usize,
    pub median_angular_distance_deg: Option<f64>,
    pub median_angular_distance_random_deg: Option<f64>,
    pub median_angular_distance_canonical_deg: Option<f64>,
    pub median_projected_distance_deg: Option<f64>,
    pub median_full_space_distance_deg: Option<f64>,
    pub median_ybar_distance_deg: Option<f64>,
    pub median_ssim_reopt_true: Option<f64>,
    pub median_ssim_reopt_hat: Option<f64>,
    pub median_ssim_reopt_ybar: Option<f64>,
    pub median_ssim_reopt_random: Option<f64>,
    pub stable_fraction: Option<f64>,
    pub alpha: Vec<f64>,
}

impl Summary {
    pub fn failure_fraction(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.failed as f64 / self.samples as f64
        }
    }
}

/// Wall-clock seconds per stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub targets_s: f64,
    pub fv_s: f64,
    pub critical_space_s: f64,
    pub evaluation_s: f64,
    pub output_s: f64,
    pub total_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    /// Config as run, without the output directory.
    pub config: serde_json::Value,
    pub master_seed: u64,
    pub n_features: usize,
    pub n_params: usize,
    pub fv_seeds: Vec<u64>,
    pub validation_fv_seeds: Vec<u64>,
    pub files: Vec<String>,
    /// Kept apart so that reruns compare equal byte for byte.
    pub timings_file: Option<String>,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub index: usize,
    pub selected: Prediction,
    pub full: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionFile {
    pub indices: Vec<usize>,
    pub report: DecompositionReport,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub output_dir: PathBuf,
    pub records: Vec<SampleRecord>,
    pub critical_space: Option<CriticalSpaceReport>,
    pub summary: Summary,
    pub timings: Timings,
}

struct Realized {
    realization: Realization,
    jacobian: JacobianMatrix,
}

fn realize(pipe: &FeaturePipeline, t: &Target, k: u32, fv: &FvConfig) -> Result<Realized> {
    let fv = FvConfig { seed: t.fv_seed, ..fv.clone() };
    let realization = run_fv(pipe, &t.x, k, &fv)?;
    let jacobian = pipe.jacobian(&realization.v_star)?;
    Ok(Realized { realization, jacobian })
}

struct Evaluated {
    outcome: SampleOutcome,
    prediction: PredictionRecord,
    decomposition: DecompositionRow,
}

fn evaluate(pipe: &FeaturePipeline, cfg: &ExperimentConfig, t: &Target, r: &Realized, c: &SubspaceBasis) -> Result<Evaluated> {
    let (k, y, jac) = (cfg.k, &r.realization.y, &r.jacobian);
    let selected = predict_objective(y, jac, k, c)?;
    let full = if c.is_full() {
        selected.clone()
    } else {
        predict_objective(y, jac, k, &SubspaceBasis::full(c.ambient_dim()))?
    };
    let x_projected = match project_objective(&t.x, y, k, c) {
        Ok(p) => Some(p),
        Err(Error::UnrecoverableObjective) => None,
        Err(e) => return Err(e),
    };
    let ybar = y.direction()?;
    let reopt = |x: &FeatureObjective| reoptimize(pipe, &r.realization, x, k, cfg.reopt_steps, &cfg.fv).map(|o| o.ssim);
    let ssim_true = reopt(&t.x)?;
    let outcome = SampleOutcome {
        y: y.clone(),
        angular_distance_deg: angular_distance(&selected.x_hat, &t.x),
        projected_distance_deg: x_projected.as_ref().map(|p| angular_distance(&selected.x_hat, p)),
        full_space_distance_deg: angular_distance(&full.x_hat, &t.x),
        ybar_distance_deg: angular_distance(&ybar, &t.x),
        out_of_c_fraction: out_of_c_fraction(&t.x, y, k, c)?,
        ssim_reopt_true: ssim_true,
        ssim_reopt_hat: reopt(&selected.x_hat)?,
        ssim_reopt_ybar: reopt(&ybar)?,
        ssim_reopt_random: reopt(&t.random)?,
        stable: ssim_true >= STABILITY_THRESHOLD,
        random_objective: t.random.clone(),
        x_hat: selected.x_hat.clone(),
        x_hat_full: full.x_hat.clone(),
        x_projected,
        fv_value: r.realization.final_value,
        fv_grad_norm: r.realization.grad_norm_at_opt,
        line_search_failed: r.realization.lbfgs_line_search_failed,
        multiplicity: selected.multiplicity,
        degenerate: selected.degenerate,
    };
    Ok(Evaluated {
        outcome,
        decomposition: decompose(&t.x, y, jac, k)?,
        prediction: PredictionRecord {
            index: t.index,
            selected,
            full,
        },
    })
}

fn same_span(a: &SubspaceBasis, b: &SubspaceBasis) -> bool {
    a.dim() == b.dim()
        && (0..a.dim()).all(|j| {
            let v = a.basis().column(j);
            let p = b.project(&v);
            v.iter().zip(&p).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() < 1e-8
        })
}

fn estimate_critical_space(cfg: &ExperimentConfig, n_f: usize, jacs: &[JacobianMatrix], known: &[KnownRealization]) -> Result<CriticalSpaceReport> {
    let mut candidates = vec![Candidate {
        label: "full".into(),
        critical_space: SubspaceBasis::full(n_f),
        validation_median_deg: None,
    }];
    let mut scan = None;
    if let Some(cs) = &cfg.critical_space {
        if jacs.is_empty() {
            log::warn!("no Jacobians available; only the full space is considered");
        } else {
            let mut found: Vec<(String, SubspaceBasis)> = Vec::new();
            if let Some(rho) = cs.rho {
                found.push((format!("rho={rho}"), critical_space(jacs, rho)?));
            }
            if cs.scan {
                let s = rho_scan(jacs)?;
                for p in s.candidates() {
                    found.push((format!("scan rho in ({:.3e}, {:.3e}]", p.rho_lo, p.rho_hi), p.critical_space.clone()));
                }
                scan = Some(s);
            }
            for (label, c) in found {
                if c.dim() > 0 && !candidates.iter().any(|k| same_span(&k.critical_space, &c)) {
                    candidates.push(Candidate {
                        label,
                        critical_space: c,
                        validation_median_deg: None,
                    });
                }
            }
        }
    }
    let bases: Vec<SubspaceBasis> = candidates.iter().map(|c| c.critical_space.clone()).collect();
    let (selected, scores) = select_critical_space(&bases, known, cfg.k);
    for (c, s) in candidates.iter_mut().zip(scores) {
        c.validation_median_deg = s;
    }
    Ok(CriticalSpaceReport {
        jacobians_used: jacs.len(),
        scan,
        candidates,
        selected,
        selection_samples: known.len(),
    })
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T, files: &mut Vec<String>) -> Result<()> {
    fs::write(dir.join(name), serde_json::to_string_pretty(value)?)?;
    files.push(name.to_string());
    Ok(())
}

fn seconds(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn config_echo(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(cfg)?;
    if let Some(m) = v.as_object_mut() {
        m.remove("output_dir");
    }
    Ok(v)
}

/// Runs the full protocol and writes its outputs to `cfg.output_dir`.
///
/// Per-sample failures are recorded and do not abort the run; the caller
/// decides what [`Summary::failure_fraction`] is acceptable.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let pipe = cfg.build_pipeline()?;
    let n_f = pipe.n_features();
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir)?;
    let mut timings = Timings::default();

    let t0 = Instant::now();
    let counts = cfg.samples;
    let mut targets = Vec::with_capacity(counts.random + counts.canonical);
    for i in 0..counts.random + counts.canonical {
        let kind = if i < counts.random { TargetKind::Random } else { TargetKind::Canonical };
        targets.push(make_target(cfg.seed, i as u64, i, kind, n_f, i.saturating_sub(counts.random))?);
    }
    let n_val = if cfg.critical_space.is_some() { counts.validation } else { 0 };
    let validation: Vec<Target> = (0..n_val)
        .map(|i| make_target(cfg.seed, VALIDATION_OFFSET + i as u64, i, TargetKind::Random, n_f, 0))
        .collect::<Result<_>>()?;
    timings.targets_s = seconds(t0);

    if targets.is_empty() {
        let summary = summarize(&[], &[], 0, 0, n_f);
        let manifest = Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: config_echo(cfg)?,
            master_seed: cfg.seed,
            n_features: n_f,
            n_params: pipe.n_params(),
            fv_seeds: vec![],
            validation_fv_seeds: vec![],
            files: vec!["manifest.json".into()],
            timings_file: None,
            summary: summary.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        timings.total_s = seconds(start);
        return Ok(ExperimentReport {
            output_dir: dir,
            records: vec![],
            critical_space: None,
            summary,
            timings,
        });
    }

    let t0 = Instant::now();
    log::info!("running feature visualization for {} targets", targets.len() + validation.len());
    let realized: Vec<Result<Realized>> = targets.par_iter().map(|t| realize(&pipe, t, cfg.k, &cfg.fv)).collect();
    let realized_val: Vec<Result<Realized>> = validation.par_iter().map(|t| realize(&pipe, t, cfg.k, &cfg.fv)).collect();
    timings.fv_s = seconds(t0);

    let t0 = Instant::now();
    let m = cfg.critical_space.map_or(0, |c| c.sample_count);
    let jacs: Vec<JacobianMatrix> = realized.iter().filter_map(|r| r.as_ref().ok()).take(m).map(|r| r.jacobian.clone()).collect();
    let known = |ts: &[Target], rs: &[Result<Realized>]| -> Vec<KnownRealization> {
        ts.iter()
            .zip(rs)
            .filter_map(|(t, r)| {
                r.as_ref().ok().map(|r| KnownRealization {
                    x_true: t.x.clone(),
                    y: r.realization.y.clone(),
                    jacobian: r.jacobian.clone(),
                })
            })
            .collect()
    };
    let critical = if cfg.critical_space.is_some() {
        let mut scoring = known(&validation, &realized_val);
        if scoring.is_empty() {
            log::warn!("no validation realizations; scoring critical spaces on the experiment samples");
            scoring = known(&targets, &realized);
        }
        let report = estimate_critical_space(cfg, n_f, &jacs, &scoring)?;
        log::info!(
            "selected critical space {} of dimension {}",
            report.candidates[report.selected].label,
            report.candidates[report.selected].critical_space.dim()
        );
        Some(report)
    } else {
        None
    };
    let c = critical
        .as_ref()
        .map_or_else(|| SubspaceBasis::full(n_f), |r| r.candidates[r.selected].critical_space.clone());
    timings.critical_space_s = seconds(t0);

    let t0 = Instant::now();
    let evaluated: Vec<Result<Evaluated>> = targets
        .par_iter()
        .zip(&realized)
        .map(|(t, r)| match r {
            Ok(r) => evaluate(&pipe, cfg, t, r, &c),
            Err(e) => Err(Error::InvalidArgument(e.to_string())),
        })
        .collect();
    timings.evaluation_s = seconds(t0);

    let t0 = Instant::now();
    let mut records = Vec::with_capacity(targets.len());
    let mut predictions = Vec::new();
    let mut rows = Vec::new();
    let mut indices = Vec::new();
    for ((t, e), r) in targets.iter().zip(evaluated).zip(&realized) {
        let (outcome, error) = match e {
            Ok(ev) => {
                predictions.push(ev.prediction);
                rows.push(ev.decomposition);
                indices.push(t.index);
                (Some(ev.outcome), None)
            }
            Err(e) => {
                let msg = match r {
                    Err(fv) => format!("feature visualization: {fv}"),
                    Ok(_) => format!("evaluation: {e}"),
                };
                log::warn!("sample {} failed: {msg}", t.index);
                (None, Some(msg))
            }
        };
        records.push(SampleRecord {
            index: t.index,
            kind: t.kind,
            fv_seed: t.fv_seed,
            x_true: t.x.clone(),
            sparseness: t.sparseness,
            outcome,
            error,
        });
    }
    let decomposition = DecompositionReport::from_rows(rows);
    let val_failed = realized_val.iter().filter(|r| r.is_err()).count();
    let summary = summarize(&records, &decomposition.alpha, n_val, val_failed, c.dim());

    let mut files = Vec::new();
    write_samples_csv(&records, &dir.join("samples.csv"))?;
    files.push("samples.csv".to_string());
    write_json(&dir, "samples.json", &records, &mut files)?;
    write_json(&dir, "predictions.json", &predictions, &mut files)?;
    write_json(&dir, "decomposition.json", &DecompositionFile { indices, report: decomposition }, &mut files)?;
    if let Some(report) = &critical {
        write_json(&dir, "critical_space.json", report, &mut files)?;
    }
    if cfg.save_realizations {
        let rdir = dir.join("realizations");
        fs::create_dir_all(&rdir)?;
        for (t, r) in targets.iter().zip(&realized) {
            if let Ok(r) = r {
                let name = format!("realizations/sample_{:04}.json", t.index);
                RealizationFile {
                    k: cfg.k,
                    objective: Some(t.x.clone()),
                    y: r.realization.y.clone(),
                    jacobian: r.jacobian.clone(),
                    v_star: r.realization.v_star.clone(),
                    image: r.realization.image.clone(),
                }
                .save(&dir.join(&name))?;
                files.push(name);
            }
        }
    }
    files.push("manifest.json".into());
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config_echo(cfg)?,
        master_seed: cfg.seed,
        n_features: n_f,
        n_params: pipe.n_params(),
        fv_seeds: targets.iter().map(|t| t.fv_seed).collect(),
        validation_fv_seeds: validation.iter().map(|t| t.fv_seed).collect(),
        files,
        timings_file: Some("timings.json".into()),
        summary: summary.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    timings.output_s = seconds(t0);
    timings.total_s = seconds(start);
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(&timings)?)?;

    Ok(ExperimentReport {
        output_dir: dir,
        records,
        critical_space: critical,
        summary,
        timings,
    })
}

fn summarize(records: &[SampleRecord], alpha: &[f64], validation: usize, validation_failed: usize, c_dim: usize) -> Summary {
    let ok: Vec<(&SampleRecord, &SampleOutcome)> = records.iter().filter_map(|r| r.outcome.as_ref().map(|o| (r, o))).collect();
    let med = |f: &dyn Fn(&SampleRecord, &SampleOutcome) -> Option<f64>| {
        let mut v: Vec<f64> = ok.iter().filter_map(|(r, o)| f(r, o)).collect();
        median(&mut v)
    };
    Summary {
        samples: records.len(),
        failed: records.len() - ok.len(),
        validation_samples: validation,
        validation_failed,
        critical_space_dim: c_dim,
        median_angular_distance_deg: med(&|_, o| Some(o.angular_distance_deg)),
        median_angular_distance_random_deg: med(&|r, o| (r.kind == TargetKind::Random).then_some(o.angular_distance_deg)),
        median_angular_distance_canonical_deg: med(&|r, o| (r.kind == TargetKind::Canonical).then_some(o.angular_distance_deg)),
        median_projected_distance_deg: med(&|_, o| o.projected_distance_deg),
        median_full_space_distance_deg: med(&|_, o| Some(o.full_space_distance_deg)),
        median_ybar_distance_deg: med(&|_, o| Some(o.ybar_distance_deg)),
        median_ssim_reopt_true: med(&|_, o| Some(o.ssim_reopt_true)),
        median_ssim_reopt_hat: med(&|_, o| Some(o.ssim_reopt_hat)),
        median_ssim_reopt_ybar: med(&|_, o| Some(o.ssim_reopt_ybar)),
        median_ssim_reopt_random: med(&|_, o| Some(o.ssim_reopt_random)),
        stable_fraction: (!ok.is_empty()).then(|| ok.iter().filter(|(_, o)| o.stable).count() as f64 / ok.len() as f64),
        alpha: alpha.to_vec(),
    }
}
