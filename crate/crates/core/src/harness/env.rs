// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Result, VtraceError};
use crate::localization::{RegionKind, RegionMask};
use crate::model::{Action, Instruction, Token};
use crate::observation::{Observation, AGENT, DEFAULT_PATCH_PX, FLOOR, OBJECT_COLORS};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Side length `P` of the square patch grid.
    pub grid: usize,
    pub colors: usize,
    /// Ordered subgoal colors; drawn from the seed when empty.
    pub subgoal_colors: Vec<u8>,
    /// Used when `subgoal_colors` is empty.
    pub subgoals: usize,
    /// Distractor objects; `None` places every remaining color once.
    pub distractors: Option<usize>,
    /// Defaults to `4 * grid`.
    pub step_limit: Option<usize>,
    pub patch_px: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            colors: 6,
            subgoal_colors: Vec::new(),
            subgoals: 1,
            distractors: None,
            step_limit: None,
            patch_px: DEFAULT_PATCH_PX,
        }
    }
}

impl EnvConfig {
    pub fn num_subgoals(&self) -> usize {
        if self.subgoal_colors.is_empty() {
            self.subgoals
        } else {
            self.subgoal_colors.len()
        }
    }

    pub fn step_limit(&self) -> usize {
        self.step_limit.unwrap_or(4 * self.grid)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VtraceError::InvalidConfig(m));
        if self.grid < 2 {
            return bad(format!("grid must be at least 2, got {}", self.grid));
        }
        if !(2..=OBJECT_COLORS.len()).contains(&self.colors) {
            return bad(format!(
                "colors must be in 2..={}, got {}",
                OBJECT_COLORS.len(),
                self.colors
            ));
        }
        if !(1..=2).contains(&self.num_subgoals()) {
            return bad(format!("1 or 2 subgoals supported, got {}", self.num_subgoals()));
        }
        if self.num_subgoals() > self.colors {
            return bad(format!(
                "{} subgoals need distinct colors, only {} available",
                self.num_subgoals(),
                self.colors
            ));
        }
        for (i, &c) in self.subgoal_colors.iter().enumerate() {
            if c as usize >= self.colors {
                return bad(format!("subgoal color {c} outside {} colors", self.colors));
            }
            if self.subgoal_colors[..i].contains(&c) {
                return bad(format!("subgoal color {c} repeated"));
            }
        }
        if self.patch_px == 0 {
            return bad("patch_px must be at least 1".into());
        }
        Ok(())
    }

    /// `n` tasks with fixed subgoal colors: the first half single-subgoal,
    /// the rest two-subgoal.
    pub fn task_set(n: usize, base: &EnvConfig) -> Vec<EnvConfig> {
        let c = base.colors as u8;
        (0..n)
            .map(|t| {
                let first = (t % base.colors) as u8;
                let subgoal_colors = if t < n.div_ceil(2) {
                    vec![first]
                } else {
                    vec![first, (first + 1) % c]
                };
                EnvConfig {
                    subgoal_colors,
                    ..base.clone()
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridEnv {
    config: EnvConfig,
    /// Object color per patch.
    objects: Vec<Option<u8>>,
    agent: (usize, usize),
    subgoals: Vec<usize>,
    subgoal_colors: Vec<u8>,
    active: usize,
    steps: usize,
    done: bool,
    success: bool,
    seed: u64,
}

fn draw_free(rng: &mut SplitMix64, taken: &mut [bool]) -> usize {
    loop {
        let p = rng.below(taken.len());
        if !taken[p] {
            taken[p] = true;
            return p;
        }
    }
}

impl GridEnv {
    /// Deterministic placement from `seed`: agent first, then subgoal
    /// objects, then distractors, each on a free patch.
    pub fn reset(config: &EnvConfig, seed: u64) -> Result<(GridEnv, Observation)> {
        config.validate()?;
        let n = config.grid * config.grid;
        let mut rng = SplitMix64::new(seed);

        let subgoal_colors: Vec<u8> = if config.subgoal_colors.is_empty() {
            let mut pool: Vec<u8> = (0..config.colors as u8).collect();
            (0..config.subgoals)
                .map(|_| pool.remove(rng.below(pool.len())))
                .collect()
        } else {
            config.subgoal_colors.clone()
        };
        let remaining: Vec<u8> = (0..config.colors as u8)
            .filter(|c| !subgoal_colors.contains(c))
            .collect();
        let distractors = config.distractors.unwrap_or(remaining.len()).min(remaining.len());
        let needed = 1 + subgoal_colors.len() + distractors;
        if needed > n {
            return Err(VtraceError::PlacementError {
                needed,
                grid: config.grid,
                reason: "more objects than patches".into(),
            });
        }

        let mut taken = vec![false; n];
        let agent = draw_free(&mut rng, &mut taken);
        let mut objects = vec![None; n];
        let mut subgoals = Vec::with_capacity(subgoal_colors.len());
        for &c in &subgoal_colors {
            let p = draw_free(&mut rng, &mut taken);
            objects[p] = Some(c);
            subgoals.push(p);
        }
        for &c in &remaining[..distractors] {
            let p = draw_free(&mut rng, &mut taken);
            objects[p] = Some(c);
        }

        let mut env = GridEnv {
            config: config.clone(),
            objects,
            agent: (agent / config.grid, agent % config.grid),
            subgoals,
            subgoal_colors,
            active: 0,
            steps: 0,
            done: config.step_limit() == 0,
            success: false,
            seed,
        };
        env.advance();
        let obs = env.render();
        Ok((env, obs))
    }

    fn advance(&mut self) {
        while !self.success && self.agent_patch() == self.subgoals[self.active] {
            if self.active + 1 == self.subgoals.len() {
                self.success = true;
                self.done = true;
            } else {
                self.active += 1;
            }
        }
    }

    /// Moves the agent one cell, clamped at the border. Returns the new
    /// observation, `done` and `success`.
    pub fn step(&mut self, action: Action) -> (Observation, bool, bool) {
        if !self.done {
            let (dr, dc) = action.delta();
            let max = self.config.grid as isize - 1;
            let r = (self.agent.0 as isize + dr).clamp(0, max) as usize;
            let c = (self.agent.1 as isize + dc).clamp(0, max) as usize;
            self.agent = (r, c);
            self.steps += 1;
            self.advance();
            if self.steps >= self.config.step_limit() {
                self.done = true;
            }
        }
        (self.render(), self.done, self.success)
    }

    pub fn render(&self) -> Observation {
        let p = self.config.grid;
        let mut obs = Observation::filled(p, p, self.config.patch_px, FLOOR);
        for (patch, obj) in self.objects.iter().enumerate() {
            if let Some(c) = obj {
                obs.fill_patch(patch, OBJECT_COLORS[*c as usize]);
            }
        }
        obs.fill_patch(self.agent_patch(), AGENT);
        obs
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grid(&self) -> usize {
        self.config.grid
    }

    pub fn agent(&self) -> (usize, usize) {
        self.agent
    }

    pub fn agent_patch(&self) -> usize {
        self.agent.0 * self.config.grid + self.agent.1
    }

    pub fn subgoals(&self) -> &[usize] {
        &self.subgoals
    }

    pub fn subgoal_colors(&self) -> &[u8] {
        &self.subgoal_colors
    }

    /// Index of the subgoal being pursued (the last one once done).
    pub fn active(&self) -> usize {
        self.active
    }

    pub fn active_target(&self) -> usize {
        self.subgoals[self.active]
    }

    pub fn objects(&self) -> &[Option<u8>] {
        &self.objects
    }

    /// Patch holding an object of color `c`.
    pub fn patch_of_color(&self, c: u8) -> Option<usize> {
        self.objects.iter().position(|&o| o == Some(c))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn is_success(&self) -> bool {
        self.success
    }

    /// Subgoal colors in order, with the active one flagged.
    pub fn instruction(&self) -> Instruction {
        Instruction::new(
            self.subgoal_colors.iter().map(|&c| Token::Color(c)).collect(),
            self.active,
        )
    }

    /// Repoints the subgoals at the objects of other colors, e.g. to score
    /// an edited instruction against the objects it names. The instruction
    /// keeps the original colors.
    pub fn retarget(&mut self, colors: &[u8]) -> Result<()> {
        if colors.len() != self.subgoals.len() {
            return Err(VtraceError::LengthMismatch(format!(
                "{} subgoals, {} colors",
                self.subgoals.len(),
                colors.len()
            )));
        }
        let patches = colors
            .iter()
            .map(|&c| {
                self.patch_of_color(c)
                    .ok_or_else(|| VtraceError::InvalidConfig(format!("no object of color {c} in the scene")))
            })
            .collect::<Result<Vec<_>>>()?;
        self.subgoals = patches;
        self.active = 0;
        self.success = false;
        self.done = self.steps >= self.config.step_limit();
        self.advance();
        Ok(())
    }

    /// Ground-truth patch mask of the current state. The agent patch stands
    /// in for both gripper and robot body.
    pub fn region(&self, kind: RegionKind) -> RegionMask {
        let n = self.config.grid * self.config.grid;
        let target = [self.active_target()];
        let agent = [self.agent_patch()];
        let patches: Vec<usize> = match kind {
            RegionKind::Target => target.to_vec(),
            RegionKind::Agent => agent.to_vec(),
            RegionKind::AgentPlusTarget => target.iter().chain(agent.iter()).copied().collect(),
            RegionKind::Background | RegionKind::Custom => {
                (0..n).filter(|p| !target.contains(p) && !agent.contains(p)).collect()
            }
        };
        let mut mask = RegionMask::new(patches, kind, n).expect("patches lie on the grid");
        mask.kind = kind;
        mask
    }
}

/// Greedy scripted policy toward the active subgoal.
pub fn scripted_action(env: &GridEnv) -> Action {
    let t = env.active_target();
    crate::model::greedy_action(env.agent(), (t / env.grid(), t % env.grid()))
}
