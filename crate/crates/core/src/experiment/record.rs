use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::JacobianMatrix;
use crate::objective::{FeatureObjective, FeatureResponse};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Random,
    Canonical,
}

/// Everything measured for one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub y: FeatureResponse,
    /// Prediction under the selected critical space.
    pub x_hat: FeatureObjective,
    /// Prediction over the full feature space.
    pub x_hat_full: FeatureObjective,
    /// Recoverable representative of `x_true`; absent if it projects to zero.
    pub x_projected: Option<FeatureObjective>,
    /// `x_hat` against `x_true`.
    pub angular_distance_deg: f64,
    /// `x_hat` against `x_projected`.
    pub projected_distance_deg: Option<f64>,
    pub full_space_distance_deg: f64,
    /// `ȳ` against `x_true`.
    pub ybar_distance_deg: f64,
    pub out_of_c_fraction: f64,
    pub random_objective: FeatureObjective,
    pub ssim_reopt_true: f64,
    pub ssim_reopt_hat: f64,
    pub ssim_reopt_ybar: f64,
    pub ssim_reopt_random: f64,
    /// `ssim_reopt_true ≥ 0.7`.
    pub stable: bool,
    pub fv_value: f64,
    pub fv_grad_norm: f64,
    pub line_search_failed: bool,
    pub multiplicity: bool,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub kind: TargetKind,
    pub fv_seed: u64,
    pub x_true: FeatureObjective,
    pub sparseness: f64,
    pub outcome: Option<SampleOutcome>,
    pub error: Option<String>,
}

const CSV_HEADER: [&str; 24] = [
    "index",
    "kind",
    "fv_seed",
    "sparseness",
    "error",
    "angular_distance_deg",
    "projected_distance_deg",
    "full_space_distance_deg",
    "ybar_distance_deg",
    "out_of_c_fraction",
    "ssim_reopt_true",
    "ssim_reopt_hat",
    "ssim_reopt_ybar",
    "ssim_reopt_random",
    "stable",
    "fv_value",
    "fv_grad_norm",
    "line_search_failed",
    "multiplicity",
    "degenerate",
    "x_true",
    "x_hat",
    "x_hat_full",
    "y",
];

fn joined(v: &[f64]) -> String {
    v.iter().map(f64::to_string).collect::<Vec<_>>().join(";")
}

/// One row per sample; vectors are `;`-separated.
pub fn write_samples_csv(records: &[SampleRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(CSV_HEADER).map_err(csv_error)?;
    for r in records {
        let mut row = vec![
            r.index.to_string(),
            match r.kind {
                TargetKind::Random => "random".into(),
                TargetKind::Canonical => "canonical".into(),
            },
            r.fv_seed.to_string(),
            r.sparseness.to_string(),
            r.error.clone().unwrap_or_default(),
        ];
        match &r.outcome {
            Some(o) => row.extend([
                o.angular_distance_deg.to_string(),
                o.projected_distance_deg.map(|v| v.to_string()).unwrap_or_default(),
                o.full_space_distance_deg.to_string(),
                o.ybar_distance_deg.to_string(),
                o.out_of_c_fraction.to_string(),
                o.ssim_reopt_true.to_string(),
                o.ssim_reopt_hat.to_string(),
                o.ssim_reopt_ybar.to_string(),
                o.ssim_reopt_random.to_string(),
                o.stable.to_string(),
                o.fv_value.to_string(),
                o.fv_grad_norm.to_string(),
                o.line_search_failed.to_string(),
                o.multiplicity.to_string(),
                o.degenerate.to_string(),
                joined(r.x_true.as_slice()),
                joined(o.x_hat.as_slice()),
                joined(o.x_hat_full.as_slice()),
                joined(o.y.values()),
            ]),
            None => {
                row.extend(std::iter::repeat_n(String::new(), 15));
                row.push(joined(r.x_true.as_slice()));
                row.extend(std::iter::repeat_n(String::new(), 3));
            }
        }
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// A single realization with what inversion needs, as read and written by
/// the command line tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealizationFile {
    pub k: u32,
    /// Known target, if any.
    pub objective: Option<FeatureObjective>,
    pub y: FeatureResponse,
    pub jacobian: JacobianMatrix,
    pub v_star: Tensor,
    pub image: Tensor,
}

impl RealizationFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if r.jacobian.n_features() != r.y.len() || !r.jacobian.matrix().is_finite() {
            return Err(Error::Format(format!("{}: jacobian does not match y", path.display())));
        }
        Ok(r)
    }
}
