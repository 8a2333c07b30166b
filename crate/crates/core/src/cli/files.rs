//! On-disk formats written by the command line: ensemble manifests,
//! prediction lines and synthetic-spec files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PredictMethod;
use crate::bayes::{EnsembleModel, UncertaintyReport};
use crate::data::{ActionType, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{self, HeadConfig, HeadParams};
use crate::numeric::Matrix;
use crate::train::TrainConfig;

pub const MANIFEST_FORMAT: &str = "affordance-ensemble";
pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const SYNTH_SPEC_FORMAT: &str = "affordance-synth-spec";
pub const SYNTH_SPEC_FORMAT_VERSION: u32 = 1;

/// Lists the member files of an ensemble. Paths are relative to the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub seed: u64,
    pub action: ActionType,
    pub config: HeadConfig,
    pub train: TrainConfig,
    pub members: Vec<ManifestMember>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMember {
    /// Stream index the member was trained with.
    pub member_id: u64,
    pub file: String,
    pub log: String,
}

pub fn member_file_name(i: usize) -> String {
    format!("member_{i:03}.json")
}

pub fn member_log_name(i: usize) -> String {
    format!("train_log_{i:03}.jsonl")
}

/// A model file or a manifest, whichever `path` holds.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum LoadedModel {
    Single {
        params: HeadParams,
        config: HeadConfig,
    },
    Ensemble(EnsembleModel),
}

impl LoadedModel {
    pub fn config(&self) -> &HeadConfig {
        match self {
            LoadedModel::Single { config, .. } => config,
            LoadedModel::Ensemble(e) => &e.config,
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn with_path(path: &Path, err: Error) -> Error {
    Error::format(format!("{}: {err}", path.display()))
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let bytes = read(path)?;
    #[derive(Deserialize)]
    struct Peek {
        format: Option<String>,
    }
    let peek: Peek = serde_json::from_slice(&bytes)
        .map_err(|e| with_path(path, Error::format(e.to_string())))?;
    if peek.format.as_deref() != Some(MANIFEST_FORMAT) {
        let (params, config) = model::deserialize(&bytes).map_err(|e| with_path(path, e))?;
        return Ok(LoadedModel::Single { params, config });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| with_path(path, Error::format(e.to_string())))?;
    if manifest.format_version != MANIFEST_FORMAT_VERSION {
        return Err(with_path(
            path,
            Error::format(format!(
                "unsupported manifest version {}",
                manifest.format_version
            )),
        ));
    }
    let base = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut members = Vec::with_capacity(manifest.members.len());
    for (i, m) in manifest.members.iter().enumerate() {
        let member_path = base.join(&m.file);
        let (params, config) =
            model::deserialize(&read(&member_path)?).map_err(|e| with_path(&member_path, e))?;
        if config != manifest.config {
            return Err(Error::Member {
                member: i,
                source: Box::new(Error::format(format!(
                    "{} does not match the manifest's head configuration",
                    member_path.display()
                ))),
            });
        }
        members.push(params);
    }
    let ids = manifest.members.iter().map(|m| m.member_id).collect();
    Ok(LoadedModel::Ensemble(EnsembleModel::new(
        manifest.config,
        members,
        manifest.seed,
        ids,
    )?))
}

/// One line of `predict` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub record_id: String,
    pub method: PredictMethod,
    pub num_samples: usize,
    pub mean_p: Vec<f64>,
    pub predicted_class: usize,
    /// `mean_p[predicted_class]`.
    pub confidence: f64,
    pub trace_a: f64,
    pub trace_e: f64,
    pub predicted_class_var_a: f64,
    pub predicted_class_var_e: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    /// Row-major rows; only with `--full`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_a: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_e: Option<Vec<Vec<f64>>>,
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

impl PredictionLine {
    pub fn new(
        record_id: &str,
        method: PredictMethod,
        report: &UncertaintyReport,
        label: Option<usize>,
        full: bool,
    ) -> Self {
        PredictionLine {
            record_id: record_id.to_string(),
            method,
            num_samples: report.num_samples,
            mean_p: report.mean_p.to_vec(),
            predicted_class: report.predicted_class,
            confidence: report.mean_p[report.predicted_class],
            trace_a: report.trace_a,
            trace_e: report.trace_e,
            predicted_class_var_a: report.predicted_class_var_a,
            predicted_class_var_e: report.predicted_class_var_e,
            label,
            sigma_a: full.then(|| rows(&report.sigma_a)),
            sigma_e: full.then(|| rows(&report.sigma_e)),
        }
    }
}

/// A [`SynthSpec`] behind a format header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpecFile {
    pub format: String,
    pub format_version: u32,
    #[serde(flatten)]
    pub spec: SynthSpec,
}

impl SynthSpecFile {
    pub fn new(spec: SynthSpec) -> Self {
        SynthSpecFile {
            format: SYNTH_SPEC_FORMAT.into(),
            format_version: SYNTH_SPEC_FORMAT_VERSION,
            spec,
        }
    }

    pub fn load(path: &Path) -> Result<SynthSpec> {
        let file: SynthSpecFile = serde_json::from_slice(&read(path)?)
            .map_err(|e| with_path(path, Error::format(e.to_string())))?;
        if file.format != SYNTH_SPEC_FORMAT || file.format_version != SYNTH_SPEC_FORMAT_VERSION {
            return Err(with_path(
                path,
                Error::format(format!(
                    "expected {SYNTH_SPEC_FORMAT} version {SYNTH_SPEC_FORMAT_VERSION}, got {} version {}",
                    file.format, file.format_version
                )),
            ));
        }
        Ok(file.spec)
    }
}
