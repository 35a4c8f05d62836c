// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::error::{Result, VtraceError};
use crate::model::{Model, WeightGroup};
use crate::observation::stable_hash;
use crate::repr_geometry::{pool_views, CheckpointActivations};
use crate::rng::derive_seed;

use super::env::{EnvConfig, GridEnv};

const PROBE_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// Fixed probe set: single-subgoal scenes whose distractor count cycles, so
/// the pooled vision states differ between samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSet {
    pub samples: usize,
    pub seed: u64,
    pub env: EnvConfig,
}

impl ProbeSet {
    pub fn for_model(model: &Model, samples: usize, seed: u64) -> Self {
        let cfg = model.config();
        Self {
            samples,
            seed,
            env: EnvConfig {
                grid: cfg.patch_grid.0,
                colors: cfg.color_vocab,
                subgoals: 1,
                ..EnvConfig::default()
            },
        }
    }

    pub fn dataset_id(&self) -> String {
        format!("probe-{}x{}-s{}", self.env.grid, self.samples, self.seed)
    }

    fn sample_seed(&self, i: usize) -> u64 {
        derive_seed(self.seed, PROBE_STREAM, i as u64)
    }

    /// Hash of the ordered sample seeds.
    pub fn order_hash(&self) -> u64 {
        let ids: Vec<String> = (0..self.samples).map(|i| self.sample_seed(i).to_string()).collect();
        stable_hash(&ids.join(","))
    }

    pub fn activations(&self, model: &Model, checkpoint_id: &str) -> Result<CheckpointActivations> {
        if self.env.grid != model.config().patch_grid.0 || model.config().patch_grid.0 != model.config().patch_grid.1 {
            return Err(VtraceError::ShapeMismatch(format!(
                "probe grid {} does not match model grid {:?}",
                self.env.grid,
                model.config().patch_grid
            )));
        }
        let max_distractors = self.env.colors - 1;
        let mut samples = Vec::with_capacity(self.samples);
        for i in 0..self.samples {
            let env_cfg = EnvConfig {
                distractors: Some(i % (max_distractors + 1)),
                ..self.env.clone()
            };
            let (env, obs) = GridEnv::reset(&env_cfg, self.sample_seed(i))?;
            let instruction = env.instruction();
            let trace = model.forward(&obs, &instruction, None)?;
            let layout = model.layout(instruction.tokens.len())?;
            samples.push(pool_views(&trace.hidden, &layout)?);
        }
        Ok(
            CheckpointActivations::from_samples(checkpoint_id, self.dataset_id(), self.order_hash(), &samples)?
                .with_probe_template("go to the {color} object"),
        )
    }
}

/// Activations of `model` and of a copy with seeded noise of standard
/// deviation `scale` on `group`, both on the same probe set.
pub fn drift_fixture(
    model: &Model,
    scale: f64,
    group: WeightGroup,
    probe: &ProbeSet,
) -> Result<(CheckpointActivations, CheckpointActivations)> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(VtraceError::InvalidConfig(format!(
            "noise scale must be finite and >= 0, got {scale}"
        )));
    }
    let anchor = probe.activations(model, &format!("{}-anchor", model.kind().as_str()))?;
    let noisy = model.with_noise(group, scale, derive_seed(probe.seed, NOISE_STREAM, 0));
    let target = probe.activations(&noisy, &format!("{}-{group:?}-{scale}", model.kind().as_str()))?;
    Ok((anchor, target))
}
