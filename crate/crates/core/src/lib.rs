// SPDX-License-Identifier: MIT OR Apache-2.0

//! Interpretability toolkit for small vision-language-action policies:
//! representation geometry, attention knockouts, action-conditioned
//! localization, and input perturbations, plus a deterministic reference
//! model and an evaluation harness.

pub mod container;
pub mod error;
pub mod harness;
pub mod intervention;
pub mod localization;
pub mod model;
pub mod observation;
pub mod perturbation;
pub mod repr_geometry;
pub mod rng;

pub use error::{Result, VtraceError};
pub use harness::{EnvConfig, GridEnv, SuiteConfig, SuiteReport};
pub use intervention::{
    build_mask, resolve_spec, window_layers, AttentionBase, AttentionMask, InterventionHandle, Knockout, KnockoutSpec,
    LayerSelector, Rule, Stage, TokenPartition, TokenRole,
};
pub use localization::{
    action_heatmap, hit, iou90, mass, phase_metrics, phase_split, Heatmap, PhaseMetrics, PhaseSplit, RegionKind,
    RegionMask,
};
pub use model::{
    build_early_fusion_policy, build_late_fusion_policy, build_policy, build_shortcut_policy, Action, ForwardTrace,
    Instruction, Model, ModelConfig, ModelKind, SequenceLayout, Token,
};
pub use observation::Observation;
pub use perturbation::{apply_visual_mask, edit_instruction, InstructionEdit, MaskStyle, Perturbation};
pub use repr_geometry::{
    cross_modal_profile, drift_cka, linear_cka, CheckpointActivations, CkaProfile, DriftReport, RepresentationMatrix,
    View,
};
