// SPDX-License-Identifier: MIT OR Apache-2.0

//! Representation geometry: linear CKA between pooled hidden-state views.
//!
//! Every comparison works on a [`RepresentationMatrix`], an `N x d` matrix
//! whose rows are probe samples in a fixed order. Three analyses are built on
//! top of [`linear_cka`]:
//!
//! - [`cross_modal_profile`]: vision vs text alignment at every layer of one
//!   checkpoint.
//! - [`drift_cka`]: matched-layer similarity between an anchor checkpoint and
//!   a target checkpoint, averaged over layers, per pooled view.
//! - [`pool_views`]: the span means that produce the pooled views from raw
//!   per-token states.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtraceError};
use crate::model::SequenceLayout;

/// Relative threshold under which a centered matrix counts as degenerate.
const DEGENERACY_RTOL: f64 = 1e-12;

/// Which token span a pooled representation averages over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    VisionPooled,
    TextPooled,
    JointPooled,
}

impl View {
    pub const ALL: [View; 3] = [View::VisionPooled, View::TextPooled, View::JointPooled];

    /// Numeric code stored in container headers.
    pub fn code(self) -> u64 {
        match self {
            View::VisionPooled => 0,
            View::TextPooled => 1,
            View::JointPooled => 2,
        }
    }

    pub fn from_code(code: u64) -> Option<View> {
        View::ALL.into_iter().find(|v| v.code() == code)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            View::VisionPooled => "vision_pooled",
            View::TextPooled => "text_pooled",
            View::JointPooled => "joint_pooled",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = VtraceError;

    fn from_str(s: &str) -> Result<Self> {
        View::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| VtraceError::parse(s, "expected vision_pooled, text_pooled or joint_pooled"))
    }
}

/// Sample-by-feature matrix of one pooled view at one layer of one checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct RepresentationMatrix {
    data: Array2<f64>,
    pub checkpoint_id: String,
    pub layer: usize,
    pub view: View,
}

impl RepresentationMatrix {
    pub fn new(data: Array2<f64>, checkpoint_id: impl Into<String>, layer: usize, view: View) -> Result<Self> {
        let (n, d) = data.dim();
        if n < 2 {
            return Err(VtraceError::InsufficientSamples(n));
        }
        if d == 0 {
            return Err(VtraceError::ShapeMismatch("feature dimension is 0".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(VtraceError::DegenerateRepresentation(
                "matrix contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            data,
            checkpoint_id: checkpoint_id.into(),
            layer,
            view,
        })
    }

    /// Convenience constructor for ad-hoc matrices without provenance.
    pub fn anonymous(data: Array2<f64>) -> Result<Self> {
        Self::new(data, "", 0, View::JointPooled)
    }

    pub fn data(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn features(&self) -> usize {
        self.data.ncols()
    }
}

fn centered(data: ArrayView2<'_, f64>) -> Array2<f64> {
    let means = data.mean_axis(Axis(0)).expect("at least one row");
    &data - &means.insert_axis(Axis(0))
}

fn frobenius(m: ArrayView2<'_, f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Subtracts each column's mean over samples.
pub fn center_columns(m: &RepresentationMatrix) -> Result<RepresentationMatrix> {
    if m.samples() < 2 {
        return Err(VtraceError::InsufficientSamples(m.samples()));
    }
    Ok(RepresentationMatrix {
        data: centered(m.data()),
        checkpoint_id: m.checkpoint_id.clone(),
        layer: m.layer,
        view: m.view,
    })
}

fn check_nondegenerate(raw: ArrayView2<'_, f64>, centered: ArrayView2<'_, f64>, which: &str) -> Result<()> {
    let norm_c = frobenius(centered);
    let norm = frobenius(raw);
    if norm_c < DEGENERACY_RTOL * norm.max(1.0) {
        return Err(VtraceError::DegenerateRepresentation(format!(
            "{which} has zero variance across samples (centered norm {norm_c:e})"
        )));
    }
    Ok(())
}

/// Linear CKA `||XcᵀYc||² / (||XcᵀXc|| ||YcᵀYc||)` with centering applied
/// internally. Feature dimensions of `x` and `y` may differ.
pub fn linear_cka(x: &RepresentationMatrix, y: &RepresentationMatrix) -> Result<f64> {
    linear_cka_raw(x.data(), y.data())
}

pub(crate) fn linear_cka_raw(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    if x.nrows() != y.nrows() {
        return Err(VtraceError::ShapeMismatch(format!(
            "sample counts differ: {} vs {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.nrows() < 2 {
        return Err(VtraceError::InsufficientSamples(x.nrows()));
    }
    let xc = centered(x);
    let yc = centered(y);
    check_nondegenerate(x, xc.view(), "X")?;
    check_nondegenerate(y, yc.view(), "Y")?;

    let cross = xc.t().dot(&yc);
    let gram_x = xc.t().dot(&xc);
    let gram_y = yc.t().dot(&yc);
    let num: f64 = cross.iter().map(|v| v * v).sum();
    Ok(num / (frobenius(gram_x.view()) * frobenius(gram_y.view())))
}

/// Pooled vectors for one sample at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledViews {
    pub vision: Array1<f64>,
    pub text: Array1<f64>,
    pub joint: Array1<f64>,
}

impl PooledViews {
    pub fn get(&self, view: View) -> &Array1<f64> {
        match view {
            View::VisionPooled => &self.vision,
            View::TextPooled => &self.text,
            View::JointPooled => &self.joint,
        }
    }
}

fn span_mean(states: &Array2<f64>, span: &[usize]) -> Array1<f64> {
    let mut acc = Array1::<f64>::zeros(states.ncols());
    for &t in span {
        acc += &states.row(t);
    }
    acc / span.len() as f64
}

/// Mean-pools each layer's token states over the layout's vision span, text
/// span, and their union.
///
/// `hidden[l]` holds the `tokens x d` states after layer `l`.
pub fn pool_views(hidden: &[Array2<f64>], layout: &SequenceLayout) -> Result<Vec<PooledViews>> {
    let vision = layout.vision_span();
    let text = layout.text_span();
    if vision.is_empty() {
        return Err(VtraceError::EmptySpan("vision"));
    }
    if text.is_empty() {
        return Err(VtraceError::EmptySpan("text"));
    }
    let mut joint: Vec<usize> = vision.iter().chain(text.iter()).copied().collect();
    joint.sort_unstable();

    hidden
        .iter()
        .map(|states| {
            if states.nrows() != layout.sequence_len() {
                return Err(VtraceError::ShapeMismatch(format!(
                    "hidden state has {} tokens, layout expects {}",
                    states.nrows(),
                    layout.sequence_len()
                )));
            }
            Ok(PooledViews {
                vision: span_mean(states, &vision),
                text: span_mean(states, &text),
                joint: span_mean(states, &joint),
            })
        })
        .collect()
}

/// Stacked pooled views for one checkpoint over a fixed probe set.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointActivations {
    pub checkpoint_id: String,
    pub dataset_id: String,
    /// Hash of the probe-sample identifiers, in order.
    pub sample_order_hash: u64,
    /// Provenance-only text template the probe set was described with.
    pub probe_template: Option<String>,
    layers: Vec<BTreeMap<View, RepresentationMatrix>>,
}

impl CheckpointActivations {
    /// Stacks per-sample pooled views (`samples[i][layer]`) into per-layer
    /// matrices.
    pub fn from_samples(
        checkpoint_id: impl Into<String>,
        dataset_id: impl Into<String>,
        sample_order_hash: u64,
        samples: &[Vec<PooledViews>],
    ) -> Result<Self> {
        let checkpoint_id = checkpoint_id.into();
        if samples.len() < 2 {
            return Err(VtraceError::InsufficientSamples(samples.len()));
        }
        let num_layers = samples[0].len();
        if samples.iter().any(|s| s.len() != num_layers) {
            return Err(VtraceError::LayerMismatch(
                "samples cover different numbers of layers".into(),
            ));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for layer in 0..num_layers {
            let mut views = BTreeMap::new();
            for view in View::ALL {
                let d = samples[0][layer].get(view).len();
                let mut data = Array2::<f64>::zeros((samples.len(), d));
                for (i, s) in samples.iter().enumerate() {
                    let row = s[layer].get(view);
                    if row.len() != d {
                        return Err(VtraceError::ShapeMismatch(format!(
                            "sample {i} has feature dim {} at layer {layer}, expected {d}",
                            row.len()
                        )));
                    }
                    data.row_mut(i).assign(row);
                }
                views.insert(
                    view,
                    RepresentationMatrix::new(data, checkpoint_id.clone(), layer, view)?,
                );
            }
            layers.push(views);
        }
        Ok(Self {
            checkpoint_id,
            dataset_id: dataset_id.into(),
            sample_order_hash,
            probe_template: None,
            layers,
        })
    }

    /// Assembles activations from already-stacked matrices, e.g. read back
    /// from disk. Every layer must carry the same set of views.
    pub fn from_matrices(
        checkpoint_id: impl Into<String>,
        dataset_id: impl Into<String>,
        sample_order_hash: u64,
        layers: Vec<BTreeMap<View, RepresentationMatrix>>,
    ) -> Result<Self> {
        let n = layers
            .first()
            .and_then(|l| l.values().next())
            .map(RepresentationMatrix::samples)
            .ok_or_else(|| VtraceError::LayerMismatch("no layers".into()))?;
        for (l, views) in layers.iter().enumerate() {
            for m in views.values() {
                if m.samples() != n {
                    return Err(VtraceError::ShapeMismatch(format!(
                        "layer {l} view {} has {} samples, expected {n}",
                        m.view,
                        m.samples()
                    )));
                }
            }
        }
        Ok(Self {
            checkpoint_id: checkpoint_id.into(),
            dataset_id: dataset_id.into(),
            sample_order_hash,
            probe_template: None,
            layers,
        })
    }

    pub fn with_probe_template(mut self, template: impl Into<String>) -> Self {
        self.probe_template = Some(template.into());
        self
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_samples(&self) -> usize {
        self.layers
            .first()
            .and_then(|l| l.values().next())
            .map_or(0, RepresentationMatrix::samples)
    }

    pub fn matrix(&self, layer: usize, view: View) -> Option<&RepresentationMatrix> {
        self.layers.get(layer).and_then(|l| l.get(&view))
    }

    pub fn layers(&self) -> &[BTreeMap<View, RepresentationMatrix>] {
        &self.layers
    }
}

/// Layer-wise vision/text CKA within one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaProfile {
    pub dataset_id: String,
    pub checkpoint_id: String,
    pub values: Vec<(usize, f64)>,
}

pub fn cross_modal_profile(activations: &CheckpointActivations) -> Result<CkaProfile> {
    if activations.num_samples() < 2 {
        return Err(VtraceError::InsufficientSamples(activations.num_samples()));
    }
    let mut values = Vec::with_capacity(activations.num_layers());
    for layer in 0..activations.num_layers() {
        let missing = || VtraceError::LayerMismatch(format!("layer {layer} lacks a vision or text view"));
        let v = activations.matrix(layer, View::VisionPooled).ok_or_else(missing)?;
        let q = activations.matrix(layer, View::TextPooled).ok_or_else(missing)?;
        values.push((layer, linear_cka(v, q)?));
    }
    Ok(CkaProfile {
        dataset_id: activations.dataset_id.clone(),
        checkpoint_id: activations.checkpoint_id.clone(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewDrift {
    pub per_layer: Vec<f64>,
    pub mean: f64,
}

/// Matched-layer CKA between two checkpoints, per view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub anchor_id: String,
    pub target_id: String,
    pub per_view: BTreeMap<View, ViewDrift>,
}

pub fn drift_cka(
    anchor: &CheckpointActivations,
    target: &CheckpointActivations,
    views: &[View],
) -> Result<DriftReport> {
    if anchor.num_layers() != target.num_layers() {
        return Err(VtraceError::LayerMismatch(format!(
            "anchor has {} layers, target has {}",
            anchor.num_layers(),
            target.num_layers()
        )));
    }
    if anchor.sample_order_hash != target.sample_order_hash {
        return Err(VtraceError::ShapeMismatch(
            "anchor and target were computed on different probe orderings".into(),
        ));
    }
    let mut per_view = BTreeMap::new();
    for &view in views {
        let mut per_layer = Vec::with_capacity(anchor.num_layers());
        for layer in 0..anchor.num_layers() {
            let missing = |side: &str| VtraceError::LayerMismatch(format!("{side} lacks {view} at layer {layer}"));
            let a = anchor.matrix(layer, view).ok_or_else(|| missing("anchor"))?;
            let t = target.matrix(layer, view).ok_or_else(|| missing("target"))?;
            per_layer.push(linear_cka(a, t)?);
        }
        let mean = per_layer.iter().sum::<f64>() / per_layer.len().max(1) as f64;
        per_view.insert(view, ViewDrift { per_layer, mean });
    }
    Ok(DriftReport {
        anchor_id: anchor.checkpoint_id.clone(),
        target_id: target.checkpoint_id.clone(),
        per_view,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rm(data: Array2<f64>) -> RepresentationMatrix {
        RepresentationMatrix::anonymous(data).unwrap()
    }

    #[test]
    fn centering_two_rows() {
        let c = center_columns(&rm(array![[1.0], [3.0]])).unwrap();
        assert_eq!(c.data(), array![[-1.0], [1.0]]);
    }

    #[test]
    fn centering_three_by_two() {
        let c = center_columns(&rm(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])).unwrap();
        assert_eq!(c.data(), array![[-2.0, -2.0], [0.0, 0.0], [2.0, 2.0]]);
    }

    #[test]
    fn centering_is_idempotent() {
        let once = center_columns(&rm(array![[0.3, -1.0], [2.5, 4.0], [-7.0, 0.125]])).unwrap();
        let twice = center_columns(&once).unwrap();
        for (a, b) in once.data().iter().zip(twice.data().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn too_few_samples() {
        let err = RepresentationMatrix::anonymous(array![[1.0, 2.0]]).unwrap_err();
        assert!(matches!(err, VtraceError::InsufficientSamples(1)));
    }

    #[test]
    fn row_mismatch_is_reported() {
        let x = rm(array![[1.0], [2.0], [4.0]]);
        let y = rm(array![[1.0], [2.0]]);
        assert!(matches!(linear_cka(&x, &y), Err(VtraceError::ShapeMismatch(_))));
    }

    #[test]
    fn constant_columns_are_degenerate() {
        let x = rm(array![[1.0, 5.0], [1.0, 5.0], [1.0, 5.0]]);
        let y = rm(array![[1.0], [2.0], [0.0]]);
        assert!(matches!(
            linear_cka(&x, &y),
            Err(VtraceError::DegenerateRepresentation(_))
        ));
    }

    #[test]
    fn scaled_copy_is_fully_similar() {
        let x = rm(array![[1.0, 0.0], [0.0, 2.0], [3.0, 1.0], [-1.0, 4.0]]);
        let y = rm(x.data().mapv(|v| -3.5 * v));
        assert!((linear_cka(&x, &y).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn drift_layer_count_mismatch() {
        let sample = |layers: usize| -> Vec<PooledViews> {
            (0..layers)
                .map(|l| PooledViews {
                    vision: array![l as f64, 1.0],
                    text: array![1.0, l as f64],
                    joint: array![0.5, 0.5],
                })
                .collect()
        };
        let mk = |layers: usize| {
            let mut s = vec![sample(layers), sample(layers)];
            for layer in s[1].iter_mut() {
                layer.vision[1] = 2.0;
            }
            CheckpointActivations::from_samples("c", "d", 0, &s).unwrap()
        };
        let err = drift_cka(&mk(2), &mk(3), &View::ALL).unwrap_err();
        assert!(matches!(err, VtraceError::LayerMismatch(_)));
    }

    #[test]
    fn view_names_round_trip() {
        for v in View::ALL {
            assert_eq!(v.as_str().parse::<View>().unwrap(), v);
            assert_eq!(View::from_code(v.code()), Some(v));
        }
    }
}
