// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use crate::error::Result;
use crate::intervention::{resolve_spec, KnockoutSpec};
use crate::localization::{action_heatmap, Heatmap};
use crate::model::{Action, Instruction, Model};
use crate::observation::Observation;
use crate::perturbation::{edit_instruction, InstructionEdit, Perturbation};

use super::env::GridEnv;

/// Everything that can be changed about a rollout without touching weights.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Condition {
    pub knockout: Option<KnockoutSpec>,
    pub perturbation: Option<Perturbation>,
    pub edit: Option<InstructionEdit>,
}

impl Condition {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn knockout(spec: KnockoutSpec) -> Self {
        Self {
            knockout: Some(spec),
            ..Self::default()
        }
    }

    pub fn perturbation(p: Perturbation) -> Self {
        Self {
            perturbation: Some(p),
            ..Self::default()
        }
    }

    pub fn edit(e: InstructionEdit) -> Self {
        Self {
            edit: Some(e),
            ..Self::default()
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.knockout.is_none() && self.perturbation.is_none() && self.edit.is_none()
    }

    pub fn key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(k) = &self.knockout {
            parts.push(k.key());
        }
        if let Some(p) = &self.perturbation {
            parts.push(p.key());
        }
        if let Some(e) = &self.edit {
            parts.push(e.key());
        }
        if parts.is_empty() {
            f.write_str("baseline")
        } else {
            f.write_str(&parts.join(" "))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub obs_hash: u64,
    pub action: Action,
    pub logits: [f64; 5],
    pub readout: [f64; 6],
    pub active_subgoal: usize,
    pub agent_patch: usize,
    pub target_patch: usize,
    pub heatmap: Option<Heatmap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: usize,
    pub per_step: Vec<StepRecord>,
    pub spec_key: String,
    pub seed: u64,
    /// Patches of every subgoal, in order.
    pub subgoals: Vec<usize>,
}

impl EpisodeResult {
    pub fn actions(&self) -> Vec<Action> {
        self.per_step.iter().map(|s| s.action).collect()
    }
}

/// Closed-loop rollout from the given (reset) environment. When
/// `heatmap_layers` is set, each step also records the action-conditioned
/// heatmap over those layers.
pub fn run_episode(
    model: &Model,
    env: GridEnv,
    condition: &Condition,
    heatmap_layers: Option<&[usize]>,
) -> Result<EpisodeResult> {
    let mut env = env;
    let instruction_len = env.subgoal_colors().len();
    let layout = model.layout(instruction_len)?;
    let handle = match &condition.knockout {
        Some(spec) => Some(resolve_spec(
            spec,
            &layout.partition,
            model.num_layers(),
            model.regime(),
        )?),
        None => None,
    };
    let mut per_step: Vec<StepRecord> = Vec::new();
    let mut last: Option<(Observation, Instruction)> = None;
    let mut obs = env.render();
    while !env.is_done() {
        let seen = match &condition.perturbation {
            Some(p) => p.apply(&env, &obs)?,
            None => obs.clone(),
        };
        let base = env.instruction();
        let instruction = match &condition.edit {
            Some(e) => Instruction::new(edit_instruction(&base.tokens, e), base.active),
            None => base,
        };
        // The forward pass is deterministic: unchanged inputs (the agent
        // stayed put) give the previous step back.
        let repeat = matches!(&last, Some((o, i)) if *o == seen && *i == instruction);
        let record = if repeat {
            let prev = per_step.last().expect("a previous step exists");
            StepRecord {
                active_subgoal: env.active(),
                agent_patch: env.agent_patch(),
                target_patch: env.active_target(),
                ..prev.clone()
            }
        } else {
            let trace = model.forward(&seen, &instruction, handle.as_ref())?;
            let heatmap = match heatmap_layers {
                Some(layers) => Some(action_heatmap(&trace, &layout, layers)?),
                None => None,
            };
            StepRecord {
                obs_hash: seen.digest(),
                action: trace.action,
                logits: trace.logits,
                readout: trace.readout,
                active_subgoal: env.active(),
                agent_patch: env.agent_patch(),
                target_patch: env.active_target(),
                heatmap,
            }
        };
        let action = record.action;
        per_step.push(record);
        last = Some((seen, instruction));
        obs = env.step(action).0;
    }
    Ok(EpisodeResult {
        success: env.is_success(),
        steps: env.steps(),
        per_step,
        spec_key: condition.key(),
        seed: env.seed(),
        subgoals: env.subgoals().to_vec(),
    })
}
