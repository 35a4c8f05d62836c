// SPDX-License-Identifier: MIT OR Apache-2.0

//! Action-conditioned attention heatmaps and the localization metrics
//! computed on them: thresholded IoU, attention mass, and peak hit.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VtraceError};
use crate::model::{ForwardTrace, SequenceLayout};

/// Non-negative attention values over a patch grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    values: Vec<f64>,
    grid: (usize, usize),
    /// Layers that were averaged to produce the map.
    pub layers: Vec<usize>,
}

impl Heatmap {
    pub fn new(values: Vec<f64>, grid: (usize, usize)) -> Result<Self> {
        if values.is_empty() || values.len() != grid.0 * grid.1 {
            return Err(VtraceError::ShapeMismatch(format!(
                "{} heatmap values for a {}x{} grid",
                values.len(),
                grid.0,
                grid.1
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(VtraceError::ShapeMismatch(
                "heatmap values must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            values,
            grid,
            layers: Vec::new(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, c: f64) -> Heatmap {
        Heatmap {
            values: self.values.iter().map(|v| v * c).collect(),
            grid: self.grid,
            layers: self.layers.clone(),
        }
    }

    /// Grid as CSV text, one line per patch row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for r in 0..self.grid.0 {
            let row = &self.values[r * self.grid.1..(r + 1) * self.grid.1];
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionKind {
    /// The active target object.
    Target,
    /// The agent; the synthetic env has no separate gripper or robot body.
    Agent,
    AgentPlusTarget,
    Background,
    Custom,
}

impl RegionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RegionKind::Target => "target",
            RegionKind::Agent => "agent",
            RegionKind::AgentPlusTarget => "agent_plus_target",
            RegionKind::Background => "background",
            RegionKind::Custom => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    patches: BTreeSet<usize>,
    pub kind: RegionKind,
}

impl RegionMask {
    pub fn new(patches: impl IntoIterator<Item = usize>, kind: RegionKind, num_patches: usize) -> Result<Self> {
        let patches: BTreeSet<usize> = patches.into_iter().collect();
        if let Some(&p) = patches.iter().find(|&&p| p >= num_patches) {
            return Err(VtraceError::ShapeMismatch(format!(
                "mask patch {p} outside a {num_patches}-patch grid"
            )));
        }
        Ok(Self { patches, kind })
    }

    pub fn contains(&self, patch: usize) -> bool {
        self.patches.contains(&patch)
    }

    pub fn patches(&self) -> &BTreeSet<usize> {
        &self.patches
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn union(&self, other: &RegionMask) -> RegionMask {
        RegionMask {
            patches: self.patches.union(&other.patches).copied().collect(),
            kind: self.kind,
        }
    }

    pub fn complement(&self, num_patches: usize) -> RegionMask {
        RegionMask {
            patches: (0..num_patches).filter(|p| !self.patches.contains(p)).collect(),
            kind: RegionKind::Custom,
        }
    }
}

/// Mean over the given layers, every recorded head, and every action query
/// of the attention each vision patch receives.
pub fn action_heatmap(trace: &ForwardTrace, layout: &SequenceLayout, layers: &[usize]) -> Result<Heatmap> {
    let actions = layout.action_span();
    if actions.is_empty() {
        return Err(VtraceError::EmptySpan("action"));
    }
    if layers.is_empty() {
        return Err(VtraceError::EmptySpan("layers"));
    }
    let vision = layout.vision_span();
    let mut values = vec![0.0; vision.len()];
    let mut count = 0usize;
    for rec in trace.attention.iter().filter(|r| layers.contains(&r.layer)) {
        for &a in actions {
            for (j, &col) in vision.iter().enumerate() {
                values[j] += rec.weights[[a, col]];
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(VtraceError::LayerMismatch(format!(
            "trace has no attention records for layers {layers:?}"
        )));
    }
    for v in &mut values {
        *v /= count as f64;
    }
    let mut map = Heatmap::new(values, layout.patch_grid)?;
    map.layers = layers.to_vec();
    Ok(map)
}

/// Nearest-rank 90th percentile: the value at 1-based rank `ceil(0.9 n)`
/// of the ascending-sorted values.
pub fn nearest_rank_q90(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = (9 * sorted.len()).div_ceil(10).max(1);
    sorted[rank - 1]
}

/// Patches at or above the 90th percentile.
pub fn high_attention_set(heatmap: &Heatmap) -> BTreeSet<usize> {
    let tau = nearest_rank_q90(heatmap.values());
    heatmap
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= tau)
        .map(|(j, _)| j)
        .collect()
}

pub fn iou90(heatmap: &Heatmap, mask: &RegionMask) -> f64 {
    if mask.is_empty() {
        return 0.0;
    }
    let high = high_attention_set(heatmap);
    let inter = high.intersection(mask.patches()).count();
    let union = high.union(mask.patches()).count();
    inter as f64 / union as f64
}

pub fn mass(heatmap: &Heatmap, mask: &RegionMask) -> Result<f64> {
    let total: f64 = heatmap.values().iter().sum();
    if total <= 0.0 {
        return Err(VtraceError::DegenerateHeatmap);
    }
    let inside: f64 = mask.patches().iter().filter_map(|&p| heatmap.values().get(p)).sum();
    Ok(inside / total)
}

/// Index of the largest value, lowest index on ties.
pub fn peak_patch(heatmap: &Heatmap) -> usize {
    let mut best = 0;
    for (j, &v) in heatmap.values().iter().enumerate() {
        if v > heatmap.values()[best] {
            best = j;
        }
    }
    best
}

pub fn hit(heatmap: &Heatmap, mask: &RegionMask) -> bool {
    mask.contains(peak_patch(heatmap))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSplit {
    pub phase1: Range<usize>,
    pub phase2: Range<usize>,
}

/// First and second halves of a `steps`-long rollout; the first half gets
/// the extra step when `steps` is odd.
pub fn phase_split(steps: usize) -> Result<PhaseSplit> {
    if steps == 0 {
        return Err(VtraceError::EmptyRollout);
    }
    let mid = steps.div_ceil(2);
    Ok(PhaseSplit {
        phase1: 0..mid,
        phase2: mid..steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub steps: usize,
    pub iou90: f64,
    pub mass: f64,
    pub hit_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub phase1: MetricSummary,
    /// Absent when the rollout has a single step.
    pub phase2: Option<MetricSummary>,
    pub full: MetricSummary,
}

fn summarize(heatmaps: &[Heatmap], masks: &[RegionMask], range: Range<usize>) -> Result<Option<MetricSummary>> {
    if range.is_empty() {
        return Ok(None);
    }
    let steps = range.len();
    let (mut iou, mut m, mut hits) = (0.0, 0.0, 0usize);
    for t in range {
        iou += iou90(&heatmaps[t], &masks[t]);
        m += mass(&heatmaps[t], &masks[t])?;
        hits += usize::from(hit(&heatmaps[t], &masks[t]));
    }
    let n = steps as f64;
    Ok(Some(MetricSummary {
        steps,
        iou90: iou / n,
        mass: m / n,
        hit_rate: hits as f64 / n,
    }))
}

/// Per-phase and whole-rollout means of the per-step metrics, with one mask
/// per step.
pub fn phase_metrics(heatmaps: &[Heatmap], masks: &[RegionMask]) -> Result<PhaseMetrics> {
    if heatmaps.len() != masks.len() {
        return Err(VtraceError::LengthMismatch(format!(
            "{} heatmaps but {} masks",
            heatmaps.len(),
            masks.len()
        )));
    }
    let split = phase_split(heatmaps.len())?;
    Ok(PhaseMetrics {
        phase1: summarize(heatmaps, masks, split.phase1)?.expect("phase 1 is never empty"),
        phase2: summarize(heatmaps, masks, split.phase2)?,
        full: summarize(heatmaps, masks, 0..heatmaps.len())?.expect("nonempty rollout"),
    })
}
