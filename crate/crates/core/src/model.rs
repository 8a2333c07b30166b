//! Affordance classifier head.
//!
//! The head fuses three inputs for one object instance:
//!
//! ```text
//! h_obj  = relu(W_c · onehot(class)) ⊙ relu(W_f · φ(o))
//! h_i    = relu(W_h · [h_obj ; φ(I)])
//! logits = W_fc2 · relu(W_fc1 · h_i)
//! p      = softmax(logits)
//! ```
//!
//! Every linear map carries a bias. Dropout (inverted, so inference without
//! a mask needs no rescaling) multiplies the inputs of `W_h`, `W_fc1` and
//! `W_fc2`; the one-hot class vector is never dropped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{self, Matrix, RngStream, Vector};

pub const DEFAULT_FEATURE_DIM: usize = 576;
pub const DEFAULT_HIDDEN_DIM: usize = 128;
pub const DEFAULT_FC_HIDDEN_DIM: usize = 64;
pub const NUM_CATEGORIES: usize = 7;

/// Clamp applied to `p[label]` before taking the log.
const LOG_FLOOR: f64 = 1e-300;

/// Layer sizes and dropout rate of a head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_object_classes: usize,
    pub obj_feature_dim: usize,
    pub global_feature_dim: usize,
    pub hidden_dim: usize,
    pub fc_hidden_dim: usize,
    pub num_categories: usize,
    pub dropout_rate: f64,
}

impl HeadConfig {
    /// Default architecture (576-d features, 128/64 hidden, 7 categories, rate 0.3).
    pub fn new(num_object_classes: usize) -> Self {
        HeadConfig {
            num_object_classes,
            obj_feature_dim: DEFAULT_FEATURE_DIM,
            global_feature_dim: DEFAULT_FEATURE_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            fc_hidden_dim: DEFAULT_FC_HIDDEN_DIM,
            num_categories: NUM_CATEGORIES,
            dropout_rate: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_object_classes", self.num_object_classes),
            ("obj_feature_dim", self.obj_feature_dim),
            ("global_feature_dim", self.global_feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("fc_hidden_dim", self.fc_hidden_dim),
            ("num_categories", self.num_categories),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::invalid(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Input width of the fusion layer `W_h`.
    pub fn fusion_input_dim(&self) -> usize {
        self.hidden_dim + self.global_feature_dim
    }

    /// `(name, rows, cols)` of every linear layer, in storage order.
    pub fn layer_shapes(&self) -> [(&'static str, usize, usize); 5] {
        [
            ("class_proj", self.hidden_dim, self.num_object_classes),
            ("object_proj", self.hidden_dim, self.obj_feature_dim),
            ("fusion", self.hidden_dim, self.fusion_input_dim()),
            ("fc1", self.fc_hidden_dim, self.hidden_dim),
            ("fc2", self.num_categories, self.fc_hidden_dim),
        ]
    }
}

/// Affine map `W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.matvec(x)?;
        for (v, b) in y.iter_mut().zip(&self.bias) {
            *v += b;
        }
        Ok(y)
    }

    fn param_count(&self) -> usize {
        self.weight.values().len() + self.bias.len()
    }
}

/// All learnable parameters of the head. Gradients use the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `W_c`: one-hot object class → hidden.
    pub class_proj: Linear,
    /// `W_f`: object features → hidden.
    pub object_proj: Linear,
    /// `W_h`: `[h_obj ; φ(I)]` → hidden.
    pub fusion: Linear,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Gradient of the loss with respect to every entry of [`HeadParams`].
pub type Gradients = HeadParams;

impl HeadParams {
    pub fn zeros(config: &HeadConfig) -> Self {
        let [c, f, h, f1, f2] = config.layer_shapes().map(|(_, r, k)| Linear::zeros(r, k));
        HeadParams {
            class_proj: c,
            object_proj: f,
            fusion: h,
            fc1: f1,
            fc2: f2,
        }
    }

    pub fn zeros_like(other: &HeadParams) -> Self {
        let z = |l: &Linear| Linear::zeros(l.out_dim(), l.in_dim());
        HeadParams {
            class_proj: z(&other.class_proj),
            object_proj: z(&other.object_proj),
            fusion: z(&other.fusion),
            fc1: z(&other.fc1),
            fc2: z(&other.fc2),
        }
    }

    pub fn layers(&self) -> [&Linear; 5] {
        [
            &self.class_proj,
            &self.object_proj,
            &self.fusion,
            &self.fc1,
            &self.fc2,
        ]
    }

    pub fn layers_mut(&mut self) -> [&mut Linear; 5] {
        [
            &mut self.class_proj,
            &mut self.object_proj,
            &mut self.fusion,
            &mut self.fc1,
            &mut self.fc2,
        ]
    }

    /// Flat views of every weight matrix and bias vector, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .into_iter()
            .flat_map(|l| [l.weight.values(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| [l.weight.values_mut(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    /// `self += scale · other`, shapes assumed equal.
    pub fn add_scaled(&mut self, other: &HeadParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Errors unless every layer has the shape `config` prescribes.
    pub fn check_shapes(&self, config: &HeadConfig) -> Result<()> {
        for ((name, rows, cols), layer) in config.layer_shapes().into_iter().zip(self.layers()) {
            if layer.weight.shape() != (rows, cols) || layer.bias.len() != rows {
                return Err(Error::shape(format!(
                    "layer {name}: expected {rows}x{cols} weight and {rows} bias, found {}x{} and {}",
                    layer.weight.rows(),
                    layer.weight.cols(),
                    layer.bias.len()
                )));
            }
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &HeadParams) -> bool {
        self.layers()
            .iter()
            .zip(other.layers())
            .all(|(a, b)| a.weight.shape() == b.weight.shape() && a.bias.len() == b.bias.len())
    }
}

/// Weights uniform on `±sqrt(6 / fan_in)`, biases zero.
pub fn init_params(config: &HeadConfig, rng: &mut RngStream) -> Result<HeadParams> {
    config.validate()?;
    let mut params = HeadParams::zeros(config);
    for layer in params.layers_mut() {
        let bound = (6.0 / layer.in_dim() as f64).sqrt();
        for w in layer.weight.values_mut() {
            *w = rng.uniform_range(-bound, bound);
        }
    }
    Ok(params)
}

/// Where a dropout mask's randomness came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub seed: u64,
    pub stream_id: u64,
    pub pass: u64,
}

/// Inverted-dropout multipliers for the three dropped layer inputs.
/// Each entry is either `0` or `1 / (1 - rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub rate: f64,
    pub fusion_input: Vec<f64>,
    pub fc1_input: Vec<f64>,
    pub fc2_input: Vec<f64>,
    pub provenance: Option<MaskProvenance>,
}

impl DropoutMask {
    /// Draws a fresh mask. One uniform is consumed per entry regardless of
    /// `rate`, so the stream position does not depend on the rate.
    pub fn sample(config: &HeadConfig, rate: f64, rng: &mut RngStream, pass: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        let keep = 1.0 / (1.0 - rate);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.uniform() >= rate { keep } else { 0.0 })
                .collect()
        };
        let fusion_input = draw(config.fusion_input_dim());
        let fc1_input = draw(config.hidden_dim);
        let fc2_input = draw(config.fc_hidden_dim);
        Ok(DropoutMask {
            rate,
            fusion_input,
            fc1_input,
            fc2_input,
            provenance: Some(MaskProvenance {
                seed: rng.seed(),
                stream_id: rng.stream_id(),
                pass,
            }),
        })
    }

    /// All-ones mask (rate 0).
    pub fn identity(config: &HeadConfig) -> Self {
        DropoutMask {
            rate: 0.0,
            fusion_input: vec![1.0; config.fusion_input_dim()],
            fc1_input: vec![1.0; config.hidden_dim],
            fc2_input: vec![1.0; config.fc_hidden_dim],
            provenance: None,
        }
    }

    fn check(&self, params: &HeadParams) -> Result<()> {
        let expected = [
            (
                "fusion_input",
                params.fusion.in_dim(),
                self.fusion_input.len(),
            ),
            ("fc1_input", params.fc1.in_dim(), self.fc1_input.len()),
            ("fc2_input", params.fc2.in_dim(), self.fc2_input.len()),
        ];
        for (name, want, got) in expected {
            if want != got {
                return Err(Error::shape(format!(
                    "dropout mask {name} has length {got}, layer expects {want}"
                )));
            }
        }
        Ok(())
    }
}

/// Intermediate activations of one forward pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub class_id: usize,
    pub obj_feat: Vec<f64>,
    pub class_pre: Vec<f64>,
    pub object_pre: Vec<f64>,
    pub h_obj: Vec<f64>,
    /// `[h_obj ; φ(I)]` after the mask.
    pub fusion_input: Vec<f64>,
    pub fusion_pre: Vec<f64>,
    pub h_i: Vec<f64>,
    /// `h_i` after the mask.
    pub fc1_input: Vec<f64>,
    pub fc1_pre: Vec<f64>,
    /// `relu(fc1_pre)` after the mask.
    pub fc2_input: Vec<f64>,
    pub logits: Vec<f64>,
    pub p: Vector,
    pub masked: bool,
}

fn apply_mask(x: &mut [f64], mask: Option<&[f64]>) {
    if let Some(m) = mask {
        for (v, k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::shape(format!(
            "{what} has dimension {got}, expected {want}"
        )));
    }
    Ok(())
}

pub fn forward(
    params: &HeadParams,
    class_id: usize,
    obj_feat: &[f64],
    glob_feat: &[f64],
    mask: Option<&DropoutMask>,
) -> Result<ForwardTrace> {
    let num_classes = params.class_proj.in_dim();
    let hidden = params.class_proj.out_dim();
    check_dim(
        "object features",
        obj_feat.len(),
        params.object_proj.in_dim(),
    )?;
    check_dim(
        "global features",
        glob_feat.len(),
        params.fusion.in_dim().saturating_sub(hidden),
    )?;
    if let Some(m) = mask {
        m.check(params)?;
    }

    let onehot = numeric::one_hot(class_id, num_classes)?;
    let class_pre = params.class_proj.apply(&onehot)?;
    let object_pre = params.object_proj.apply(obj_feat)?;
    let h_obj = numeric::hadamard(&numeric::relu(&class_pre), &numeric::relu(&object_pre))?;

    let mut fusion_input = Vec::with_capacity(params.fusion.in_dim());
    fusion_input.extend_from_slice(&h_obj);
    fusion_input.extend_from_slice(glob_feat);
    apply_mask(&mut fusion_input, mask.map(|m| m.fusion_input.as_slice()));
    let fusion_pre = params.fusion.apply(&fusion_input)?;
    let h_i = numeric::relu(&fusion_pre);

    let mut fc1_input = h_i.clone();
    apply_mask(&mut fc1_input, mask.map(|m| m.fc1_input.as_slice()));
    let fc1_pre = params.fc1.apply(&fc1_input)?;
    let mut fc2_input = numeric::relu(&fc1_pre);
    apply_mask(&mut fc2_input, mask.map(|m| m.fc2_input.as_slice()));
    let logits = params.fc2.apply(&fc2_input)?;
    let p = numeric::softmax(&logits)?;

    Ok(ForwardTrace {
        class_id,
        obj_feat: obj_feat.to_vec(),
        class_pre,
        object_pre,
        h_obj,
        fusion_input,
        fusion_pre,
        h_i,
        fc1_input,
        fc1_pre,
        fc2_input,
        logits,
        p,
        masked: mask.is_some(),
    })
}

/// Deterministic (mask-free) class probabilities.
pub fn predict(
    params: &HeadParams,
    class_id: usize,
    obj_feat: &[f64],
    glob_feat: &[f64],
) -> Result<Vector> {
    Ok(forward(params, class_id, obj_feat, glob_feat, None)?.p)
}

pub fn loss_cross_entropy(p: &[f64], label: usize) -> Result<f64> {
    if label >= p.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} categories",
            p.len()
        )));
    }
    Ok(-p[label].max(LOG_FLOOR).ln())
}

fn relu_grad(upstream: &[f64], pre: &[f64]) -> Vec<f64> {
    upstream
        .iter()
        .zip(pre)
        .map(|(&g, &z)| if z > 0.0 { g } else { 0.0 })
        .collect()
}

/// Exact gradient of `loss_cross_entropy(trace.p, label)` w.r.t. all parameters.
pub fn backward(
    trace: &ForwardTrace,
    params: &HeadParams,
    label: usize,
    mask: Option<&DropoutMask>,
) -> Result<Gradients> {
    let consistent = trace.masked == mask.is_some()
        && trace.p.dim() == params.fc2.out_dim()
        && trace.fc2_input.len() == params.fc2.in_dim()
        && trace.fc1_input.len() == params.fc1.in_dim()
        && trace.fusion_input.len() == params.fusion.in_dim()
        && trace.h_obj.len() == params.object_proj.out_dim()
        && trace.obj_feat.len() == params.object_proj.in_dim()
        && trace.class_id < params.class_proj.in_dim();
    if !consistent {
        return Err(Error::InvalidState(
            "forward trace was not produced by these parameters and mask".into(),
        ));
    }
    if let Some(m) = mask {
        m.check(params)?;
    }
    if label >= trace.p.dim() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} categories",
            trace.p.dim()
        )));
    }

    let mut grads = HeadParams::zeros_like(params);
    let hidden = params.class_proj.out_dim();

    // softmax + cross-entropy
    let mut d_logits = trace.p.to_vec();
    d_logits[label] -= 1.0;
    grads
        .fc2
        .weight
        .add_outer_scaled(&d_logits, &trace.fc2_input, 1.0);
    grads.fc2.bias.copy_from_slice(&d_logits);

    let mut d_fc2_in = params.fc2.weight.matvec_transposed(&d_logits)?;
    apply_mask(&mut d_fc2_in, mask.map(|m| m.fc2_input.as_slice()));
    let d_fc1_pre = relu_grad(&d_fc2_in, &trace.fc1_pre);
    grads
        .fc1
        .weight
        .add_outer_scaled(&d_fc1_pre, &trace.fc1_input, 1.0);
    grads.fc1.bias.copy_from_slice(&d_fc1_pre);

    let mut d_h_i = params.fc1.weight.matvec_transposed(&d_fc1_pre)?;
    apply_mask(&mut d_h_i, mask.map(|m| m.fc1_input.as_slice()));
    let d_fusion_pre = relu_grad(&d_h_i, &trace.fusion_pre);
    grads
        .fusion
        .weight
        .add_outer_scaled(&d_fusion_pre, &trace.fusion_input, 1.0);
    grads.fusion.bias.copy_from_slice(&d_fusion_pre);

    let mut d_fusion_in = params.fusion.weight.matvec_transposed(&d_fusion_pre)?;
    apply_mask(&mut d_fusion_in, mask.map(|m| m.fusion_input.as_slice()));
    // Only the h_obj half of the concatenation has parameters upstream.
    let d_h_obj = &d_fusion_in[..hidden];

    let class_act = numeric::relu(&trace.class_pre);
    let object_act = numeric::relu(&trace.object_pre);
    let d_class_act = numeric::hadamard(d_h_obj, &object_act)?;
    let d_object_act = numeric::hadamard(d_h_obj, &class_act)?;

    let d_class_pre = relu_grad(&d_class_act, &trace.class_pre);
    // W_c · onehot selects one column, so only that column gets gradient.
    let cols = params.class_proj.in_dim();
    for (r, &g) in d_class_pre.iter().enumerate() {
        grads.class_proj.weight.values_mut()[r * cols + trace.class_id] = g;
    }
    grads.class_proj.bias.copy_from_slice(&d_class_pre);

    let d_object_pre = relu_grad(&d_object_act, &trace.object_pre);
    grads
        .object_proj
        .weight
        .add_outer_scaled(&d_object_pre, &trace.obj_feat, 1.0);
    grads.object_proj.bias.copy_from_slice(&d_object_pre);

    Ok(grads)
}

pub const MODEL_FORMAT: &str = "affordance-head";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    name: String,
    rows: usize,
    cols: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelDocument {
    format: String,
    format_version: u32,
    config: HeadConfig,
    layers: Vec<LayerRecord>,
}

/// Encodes a head as the versioned JSON model document.
pub fn serialize(params: &HeadParams, config: &HeadConfig) -> Result<Vec<u8>> {
    config.validate()?;
    params.check_shapes(config)?;
    let layers = config
        .layer_shapes()
        .into_iter()
        .zip(params.layers())
        .map(|((name, rows, cols), layer)| LayerRecord {
            name: name.to_string(),
            rows,
            cols,
            weight: layer.weight.values().to_vec(),
            bias: layer.bias.clone(),
        })
        .collect();
    let doc = ModelDocument {
        format: MODEL_FORMAT.to_string(),
        format_version: MODEL_FORMAT_VERSION,
        config: config.clone(),
        layers,
    };
    serde_json::to_vec(&doc).map_err(|e| Error::format(e.to_string()))
}

/// Decodes and validates a model document.
pub fn deserialize(bytes: &[u8]) -> Result<(HeadParams, HeadConfig)> {
    let doc: ModelDocument = serde_json::from_slice(bytes)
        .map_err(|e| Error::format(format!("corrupt model file: {e}")))?;
    if doc.format != MODEL_FORMAT {
        return Err(Error::format(format!(
            "not a model file (format {:?})",
            doc.format
        )));
    }
    if doc.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
            doc.format_version
        )));
    }
    doc.config
        .validate()
        .map_err(|e| Error::format(e.to_string()))?;
    let shapes = doc.config.layer_shapes();
    if doc.layers.len() != shapes.len() {
        return Err(Error::format(format!(
            "model file has {} layers, expected {}",
            doc.layers.len(),
            shapes.len()
        )));
    }
    let mut params = HeadParams::zeros(&doc.config);
    for ((record, (name, rows, cols)), layer) in
        doc.layers.into_iter().zip(shapes).zip(params.layers_mut())
    {
        if record.name != name {
            return Err(Error::format(format!(
                "expected layer {name}, found {}",
                record.name
            )));
        }
        if (record.rows, record.cols) != (rows, cols) {
            return Err(Error::shape(format!(
                "layer {name} declared as {}x{}, config implies {rows}x{cols}",
                record.rows, record.cols
            )));
        }
        if record.bias.len() != rows {
            return Err(Error::shape(format!(
                "layer {name} has {} bias entries, expected {rows}",
                record.bias.len()
            )));
        }
        layer.weight = Matrix::from_row_major(rows, cols, record.weight)?;
        if record.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::format(format!("layer {name} bias is not finite")));
        }
        layer.bias = record.bias;
    }
    Ok((params, doc.config))
}

/// Like [`deserialize`] but rejects models whose output width is not
/// `num_categories`.
pub fn deserialize_expecting(
    bytes: &[u8],
    num_categories: usize,
) -> Result<(HeadParams, HeadConfig)> {
    let (params, config) = deserialize(bytes)?;
    if config.num_categories != num_categories {
        return Err(Error::shape(format!(
            "model predicts {} categories, expected {num_categories}",
            config.num_categories
        )));
    }
    Ok((params, config))
}
