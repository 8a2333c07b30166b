//! Feature-record datasets.
//!
//! On disk a dataset is JSON lines: the first line is a header object, every
//! following non-blank line one record.
//!
//! ```text
//! {"format":"affordance-dataset","format_version":1,"obj_feature_dim":576,
//!  "global_feature_dim":576,"num_object_classes":2,"class_names":["chair","cup"]}
//! {"record_id":"r1","object_class_id":0,"object_class_name":"chair",
//!  "obj_feat":[...],"glob_feat":[...],"labels":{"sit":0,"grasp":6}}
//! ```
//!
//! Labels are per action and optional; values are the seven affordance
//! categories `0..=6`.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{Granularity, EXCEPTION, NEGATIVE, POSITIVE};
use crate::model::NUM_CATEGORIES;
use crate::numeric::{RngStream, Vector};

pub const DATASET_FORMAT: &str = "affordance-dataset";
pub const DATASET_FORMAT_VERSION: u32 = 1;

/// The three annotated actions.
#[derive(
    Debug,
    Clone,
    Copy,
    PartialEq,
    Eq,
    PartialOrd,
    Ord,
    Hash,
    Serialize,
    Deserialize,
    clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum ActionType {
    Sit,
    Run,
    Grasp,
}

impl ActionType {
    pub const ALL: [ActionType; 3] = [ActionType::Sit, ActionType::Run, ActionType::Grasp];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionType::Sit => "sit",
            ActionType::Run => "run",
            ActionType::Grasp => "grasp",
        }
    }
}

impl fmt::Display for ActionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sit" => Ok(ActionType::Sit),
            "run" => Ok(ActionType::Run),
            "grasp" => Ok(ActionType::Grasp),
            other => Err(Error::invalid(format!("unknown action {other:?}"))),
        }
    }
}

/// One object instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub record_id: String,
    pub object_class_id: usize,
    pub object_class_name: String,
    /// φ(o)
    pub obj_feat: Vector,
    /// φ(I)
    pub glob_feat: Vector,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<ActionType, usize>,
}

impl FeatureRecord {
    pub fn label(&self, action: ActionType) -> Option<usize> {
        self.labels.get(&action).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format: String,
    pub format_version: u32,
    pub obj_feature_dim: usize,
    pub global_feature_dim: usize,
    pub num_object_classes: usize,
    pub class_names: Vec<String>,
}

impl DatasetHeader {
    pub fn new(
        obj_feature_dim: usize,
        global_feature_dim: usize,
        class_names: Vec<String>,
    ) -> Self {
        DatasetHeader {
            format: DATASET_FORMAT.to_string(),
            format_version: DATASET_FORMAT_VERSION,
            obj_feature_dim,
            global_feature_dim,
            num_object_classes: class_names.len(),
            class_names,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.format != DATASET_FORMAT {
            return Err(Error::format(format!(
                "not a dataset file (format {:?})",
                self.format
            )));
        }
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported dataset format version {}",
                self.format_version
            )));
        }
        if self.obj_feature_dim == 0 || self.global_feature_dim == 0 || self.num_object_classes == 0
        {
            return Err(Error::format("header dimensions must be at least 1"));
        }
        if self.class_names.len() != self.num_object_classes {
            return Err(Error::format(format!(
                "header lists {} class names for {} object classes",
                self.class_names.len(),
                self.num_object_classes
            )));
        }
        Ok(())
    }

    fn check_record(&self, r: &FeatureRecord) -> std::result::Result<(), String> {
        if r.obj_feat.dim() != self.obj_feature_dim {
            return Err(format!(
                "object features have {} components, header declares {}",
                r.obj_feat.dim(),
                self.obj_feature_dim
            ));
        }
        if r.glob_feat.dim() != self.global_feature_dim {
            return Err(format!(
                "global features have {} components, header declares {}",
                r.glob_feat.dim(),
                self.global_feature_dim
            ));
        }
        if r.object_class_id >= self.num_object_classes {
            return Err(format!(
                "object class {} out of range ({} classes)",
                r.object_class_id, self.num_object_classes
            ));
        }
        if self.class_names[r.object_class_id] != r.object_class_name {
            return Err(format!(
                "object class name {:?} does not match header entry {:?}",
                r.object_class_name, self.class_names[r.object_class_id]
            ));
        }
        for (action, &label) in &r.labels {
            if label >= NUM_CATEGORIES {
                return Err(format!(
                    "label {label} for {action} out of range (valid 0-{})",
                    NUM_CATEGORIES - 1
                ));
            }
        }
        Ok(())
    }
}

/// Validated, immutable collection of records sharing one header.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    header: DatasetHeader,
    records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, records: Vec<FeatureRecord>) -> Result<Self> {
        header.validate()?;
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            let fail = |reason: String| Error::Record {
                record_id: r.record_id.clone(),
                line: i + 2,
                reason,
            };
            header.check_record(r).map_err(fail)?;
            if !seen.insert(r.record_id.as_str()) {
                return Err(fail("duplicate record id".into()));
            }
        }
        Ok(Dataset { header, records })
    }

    pub fn header(&self) -> &DatasetHeader {
        &self.header
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records labelled for `action`, paired with their label.
    pub fn labeled(&self, action: ActionType) -> Vec<(&FeatureRecord, usize)> {
        self.records
            .iter()
            .filter_map(|r| r.label(action).map(|l| (r, l)))
            .collect()
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            header: self.header.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }

    pub fn read_from(reader: impl Read) -> Result<Self> {
        let mut lines = BufReader::new(reader).lines().enumerate();
        let header = loop {
            match lines.next() {
                None => return Err(Error::format("dataset file is empty")),
                Some((_, line)) => {
                    let line = line.map_err(|e| Error::format(e.to_string()))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    break serde_json::from_str::<DatasetHeader>(&line)
                        .map_err(|e| Error::format(format!("bad dataset header: {e}")))?;
                }
            }
        };
        header.validate()?;

        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::format(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: FeatureRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => {
                    // Recover the id for the message if the line is at least JSON.
                    let record_id = serde_json::from_str::<serde_json::Value>(&line)
                        .ok()
                        .and_then(|v| {
                            v.get("record_id")
                                .and_then(|id| id.as_str())
                                .map(String::from)
                        })
                        .unwrap_or_else(|| "<unknown>".into());
                    return Err(Error::Record {
                        record_id,
                        line: line_no,
                        reason: e.to_string(),
                    });
                }
            };
            let fail = |reason: String| Error::Record {
                record_id: record.record_id.clone(),
                line: line_no,
                reason,
            };
            header.check_record(&record).map_err(fail)?;
            if !seen.insert(record.record_id.clone()) {
                return Err(fail("duplicate record id".into()));
            }
            records.push(record);
        }
        Ok(Dataset { header, records })
    }

    pub fn write_to(&self, writer: impl Write) -> Result<()> {
        let mut w = BufWriter::new(writer);
        let to_fmt = |e: serde_json::Error| Error::format(e.to_string());
        let io = |e: std::io::Error| Error::format(e.to_string());
        serde_json::to_writer(&mut w, &self.header).map_err(to_fmt)?;
        w.write_all(b"\n").map_err(io)?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(to_fmt)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Dataset::read_from(file)
}

pub fn save(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    dataset.write_to(file)
}

/// Share of firmly positive / exception / firmly negative labels, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDistribution {
    pub action: ActionType,
    pub count: usize,
    pub firmly_positive: f64,
    pub exceptions: f64,
    pub firmly_negative: f64,
}

impl fmt::Display for CategoryDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16} {:>6}", "", self.action)?;
        writeln!(f, "{:<16} {:>6.1}", "Firmly positive", self.firmly_positive)?;
        writeln!(f, "{:<16} {:>6.1}", "Exceptions", self.exceptions)?;
        write!(f, "{:<16} {:>6.1}", "Firmly negative", self.firmly_negative)
    }
}

pub fn class_distribution(dataset: &Dataset, action: ActionType) -> Result<CategoryDistribution> {
    let mut counts = [0usize; 3];
    for (_, label) in dataset.labeled(action) {
        counts[Granularity::Three.remap(label)?] += 1;
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid(format!("no records labelled for {action}")));
    }
    let pct = |c: usize| 100.0 * c as f64 / total as f64;
    Ok(CategoryDistribution {
        action,
        count: total,
        firmly_positive: pct(counts[POSITIVE]),
        exceptions: pct(counts[EXCEPTION]),
        firmly_negative: pct(counts[NEGATIVE]),
    })
}

/// Train / validation / test partition.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Random disjoint partition with sizes `round(f * n)` for the first two
/// parts and the remainder for the third.
pub fn split(dataset: &Dataset, fractions: [f64; 3], rng: &mut RngStream) -> Result<Split> {
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(Error::invalid(format!(
            "split fractions must be non-negative, got {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions sum to {sum}, expected 1"
        )));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let n_train = ((fractions[0] * n as f64).round() as usize).min(n);
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok(Split {
        train: dataset.subset(train),
        val: dataset.subset(val),
        test: dataset.subset(test),
    })
}

/// Parameters of the Gaussian-blob generator.
///
/// Features of class `k` are `centers[k] + scales[k] · N(0, I)` over the
/// concatenated `[φ(o) ; φ(I)]` space. A fraction `label_noise_rate` of
/// labels is replaced by a uniformly drawn class (which may equal the
/// original one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub obj_feature_dim: usize,
    pub global_feature_dim: usize,
    pub num_object_classes: usize,
    pub centers: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
    pub label_noise_rate: f64,
    pub count: usize,
    pub action: ActionType,
}

impl SynthSpec {
    /// Class `k` centred at `separation · e_k`, all scales equal.
    pub fn blobs(
        num_classes: usize,
        obj_feature_dim: usize,
        global_feature_dim: usize,
        separation: f64,
        scale: f64,
        count: usize,
    ) -> Self {
        let dim = obj_feature_dim + global_feature_dim;
        let centers = (0..num_classes)
            .map(|k| {
                let mut c = vec![0.0; dim];
                if k < dim {
                    c[k] = separation;
                }
                c
            })
            .collect();
        SynthSpec {
            num_classes,
            obj_feature_dim,
            global_feature_dim,
            num_object_classes: 1,
            centers,
            scales: vec![scale; num_classes],
            label_noise_rate: 0.0,
            count,
            action: ActionType::Sit,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.obj_feature_dim + self.global_feature_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > NUM_CATEGORIES {
            return Err(Error::invalid(format!(
                "num_classes must be in 1..={NUM_CATEGORIES}, got {}",
                self.num_classes
            )));
        }
        if self.obj_feature_dim == 0 || self.global_feature_dim == 0 || self.num_object_classes == 0
        {
            return Err(Error::invalid("synthetic dimensions must be at least 1"));
        }
        if self.centers.len() != self.num_classes || self.scales.len() != self.num_classes {
            return Err(Error::invalid("need one center and one scale per class"));
        }
        let dim = self.feature_dim();
        if let Some(k) = self.centers.iter().position(|c| c.len() != dim) {
            return Err(Error::invalid(format!(
                "center {k} must have {dim} components"
            )));
        }
        if self.centers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("centers must be finite"));
        }
        if self.scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid("scales must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.label_noise_rate) {
            return Err(Error::invalid(format!(
                "label_noise_rate must be in [0, 1], got {}",
                self.label_noise_rate
            )));
        }
        Ok(())
    }

    fn header(&self) -> DatasetHeader {
        DatasetHeader::new(
            self.obj_feature_dim,
            self.global_feature_dim,
            (0..self.num_object_classes)
                .map(|i| format!("object_{i}"))
                .collect(),
        )
    }

    /// Unit vector orthogonal to every class center. `None` when the centers
    /// span the whole feature space.
    pub fn held_out_direction(&self) -> Option<Vec<f64>> {
        let dim = self.feature_dim();
        // Orthonormal basis of span(centers).
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for c in &self.centers {
            if let Some(u) = orthonormalize(c.clone(), &basis) {
                basis.push(u);
            }
        }
        (0..dim).find_map(|i| {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            orthonormalize(e, &basis)
        })
    }
}

fn orthonormalize(mut v: Vec<f64>, basis: &[Vec<f64>]) -> Option<Vec<f64>> {
    for u in basis {
        let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        for (a, b) in v.iter_mut().zip(u) {
            *a -= proj * b;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 1e-8).then(|| v.into_iter().map(|x| x / norm).collect())
}

/// Ground truth emitted next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub kind: String,
    pub spec: SynthSpec,
    pub seed: u64,
    pub stream_id: u64,
    /// OOD only: shift along `direction`, in units of each class scale.
    pub shift: Option<f64>,
    pub direction: Option<Vec<f64>>,
    /// Generating class of every record, in record order.
    pub source_classes: Vec<usize>,
    /// Blobs only: whether label noise replaced the record's label.
    pub noisy_labels: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub metadata: SynthMetadata,
}

fn gaussian_point(
    center: &[f64],
    offset: Option<(&[f64], f64)>,
    scale: f64,
    rng: &mut RngStream,
) -> Vec<f64> {
    center
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let shift = offset.map_or(0.0, |(d, s)| d[i] * s);
            c + shift + scale * rng.standard_normal()
        })
        .collect()
}

fn make_record(
    spec: &SynthSpec,
    header: &DatasetHeader,
    id: String,
    features: Vec<f64>,
    class_id: usize,
) -> Result<FeatureRecord> {
    let (obj, glob) = features.split_at(spec.obj_feature_dim);
    Ok(FeatureRecord {
        record_id: id,
        object_class_id: class_id,
        object_class_name: header.class_names[class_id].clone(),
        obj_feat: Vector::new(obj.to_vec())?,
        glob_feat: Vector::new(glob.to_vec())?,
        labels: BTreeMap::new(),
    })
}

/// Labelled Gaussian blobs.
pub fn synth_blobs(spec: &SynthSpec, rng: &mut RngStream) -> Result<SynthOutput> {
    spec.validate()?;
    let header = spec.header();
    let mut records = Vec::with_capacity(spec.count);
    let mut source_classes = Vec::with_capacity(spec.count);
    let mut noisy_labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let k = rng.index(spec.num_classes);
        let object_class = rng.index(spec.num_object_classes);
        let features = gaussian_point(&spec.centers[k], None, spec.scales[k], rng);
        // Both draws happen for every record so datasets that differ only in
        // noise rate share their features.
        let replacement = rng.index(spec.num_classes);
        let flipped = rng.bernoulli(spec.label_noise_rate);
        let label = if flipped { replacement } else { k };
        let mut record = make_record(spec, &header, format!("rec-{i:06}"), features, object_class)?;
        record.labels.insert(spec.action, label);
        records.push(record);
        source_classes.push(k);
        noisy_labels.push(flipped);
    }
    Ok(SynthOutput {
        dataset: Dataset::new(header, records)?,
        metadata: SynthMetadata {
            kind: "blobs".into(),
            spec: spec.clone(),
            seed: rng.seed(),
            stream_id: rng.stream_id(),
            shift: None,
            direction: None,
            source_classes,
            noisy_labels,
        },
    })
}

/// Unlabelled points from the same blobs, translated by `shift · scale_k`
/// along a direction orthogonal to every class center.
pub fn synth_ood(
    spec: &SynthSpec,
    shift: f64,
    count: usize,
    rng: &mut RngStream,
) -> Result<SynthOutput> {
    spec.validate()?;
    if !shift.is_finite() || shift < 0.0 {
        return Err(Error::invalid(format!(
            "shift must be non-negative, got {shift}"
        )));
    }
    let direction = spec.held_out_direction().ok_or_else(|| {
        Error::invalid("class centers span the feature space; no held-out direction")
    })?;
    let header = spec.header();
    let mut records = Vec::with_capacity(count);
    let mut source_classes = Vec::with_capacity(count);
    for i in 0..count {
        let k = rng.index(spec.num_classes);
        let object_class = rng.index(spec.num_object_classes);
        let s = shift * spec.scales[k];
        let features = gaussian_point(&spec.centers[k], Some((&direction, s)), spec.scales[k], rng);
        records.push(make_record(
            spec,
            &header,
            format!("ood-{i:06}"),
            features,
            object_class,
        )?);
        source_classes.push(k);
    }
    Ok(SynthOutput {
        dataset: Dataset::new(header, records)?,
        metadata: SynthMetadata {
            kind: "ood".into(),
            spec: SynthSpec {
                count,
                ..spec.clone()
            },
            seed: rng.seed(),
            stream_id: rng.stream_id(),
            shift: Some(shift),
            direction: Some(direction),
            source_classes,
            noisy_labels: Vec::new(),
        },
    })
}
