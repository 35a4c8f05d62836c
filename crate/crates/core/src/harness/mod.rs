// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-loop rollouts in a synthetic grid world, success-rate suites,
//! layer sweeps, localization tables, and checkpoint-drift fixtures.

mod drift;
mod env;
mod rollout;
mod suite;

pub use drift::{drift_fixture, ProbeSet};
pub use env::{scripted_action, EnvConfig, GridEnv};
pub use rollout::{run_episode, Condition, EpisodeResult, StepRecord};
pub use suite::{
    edit_probe, episode_localization, episode_masks, format_percent, layer_sweep, localization_csv, localize,
    run_condition, run_suite, sweep_csv, EditReport, EpisodeMasks, LocalizationRow, Phase, ReportMeta, SuiteConfig,
    SuiteEntry, SuiteReport, SweepPoint, TOOLKIT_VERSION,
};
