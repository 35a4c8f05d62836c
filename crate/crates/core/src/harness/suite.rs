// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Result, VtraceError};
use crate::intervention::{KnockoutSpec, LayerSelector, Rule, Stage, WINDOW_WIDTHS};
use crate::localization::{phase_metrics, PhaseMetrics, RegionKind, RegionMask};
use crate::model::Model;
use crate::perturbation::InstructionEdit;
use crate::rng::derive_seed;

use super::env::{EnvConfig, GridEnv};
use super::rollout::{run_episode, Condition, EpisodeResult};

pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

const EPISODE_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub episodes: usize,
    pub tasks: Vec<EnvConfig>,
    pub master_seed: u64,
    /// Worker threads; 0 uses every available CPU.
    pub workers: usize,
    /// Recorded in report metadata.
    pub config_hash: String,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            tasks: EnvConfig::task_set(10, &EnvConfig::default()),
            master_seed: 0,
            workers: 0,
            config_hash: String::new(),
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(VtraceError::InvalidConfig("episodes must be at least 1".into()));
        }
        if self.tasks.is_empty() {
            return Err(VtraceError::InvalidConfig("need at least one task".into()));
        }
        for t in &self.tasks {
            t.validate()?;
        }
        Ok(())
    }

    /// Task index and seed of episode `e`: tasks cycle, seeds come from a
    /// counter-based derivation so any episode can be run on its own.
    pub fn episode(&self, e: usize) -> (usize, u64) {
        (
            e % self.tasks.len(),
            derive_seed(self.master_seed, EPISODE_STREAM, e as u64),
        )
    }

    pub fn reset(&self, e: usize) -> Result<GridEnv> {
        let (task, seed) = self.episode(e);
        Ok(GridEnv::reset(&self.tasks[task], seed)?.0)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .map_err(|e| VtraceError::InvalidConfig(format!("cannot start workers: {e}")))
    }

    /// Runs `f` on every episode index on the worker pool; results come back
    /// in index order.
    pub fn map_episodes<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync,
    {
        self.validate()?;
        let pool = self.pool()?;
        pool.install(|| (0..self.episodes).into_par_iter().map(&f).collect())
    }
}

/// Exact success counts for one condition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteEntry {
    pub spec_key: String,
    pub successes: usize,
    pub episodes: usize,
    /// `(successes, episodes)` per task.
    pub per_task: Vec<(usize, usize)>,
}

impl SuiteEntry {
    fn from_results(spec_key: String, cfg: &SuiteConfig, results: &[bool]) -> Self {
        let mut per_task = vec![(0, 0); cfg.tasks.len()];
        for (e, &ok) in results.iter().enumerate() {
            let t = &mut per_task[e % cfg.tasks.len()];
            t.0 += usize::from(ok);
            t.1 += 1;
        }
        Self {
            spec_key,
            successes: results.iter().filter(|&&ok| ok).count(),
            episodes: results.len(),
            per_task,
        }
    }

    pub fn sr(&self) -> f64 {
        100.0 * self.successes as f64 / self.episodes as f64
    }

    pub fn sr_text(&self) -> String {
        format_percent(self.successes as i128, self.episodes as i128)
    }

    /// `baseline SR - SR`, formatted from the exact rational.
    pub fn drop_text(&self, baseline: &SuiteEntry) -> String {
        let (s, e) = (self.successes as i128, self.episodes as i128);
        let (sb, eb) = (baseline.successes as i128, baseline.episodes as i128);
        format_percent(sb * e - s * eb, eb * e)
    }

    pub fn drop(&self, baseline: &SuiteEntry) -> f64 {
        baseline.sr() - self.sr()
    }
}

/// `100 * num / den` with one decimal, rounding half away from zero.
pub fn format_percent(num: i128, den: i128) -> String {
    assert!(den > 0, "percent of an empty count");
    let neg = num < 0;
    let tenths = (2000 * num.abs() + den) / (2 * den);
    let sign = if neg && tenths != 0 { "-" } else { "" };
    format!("{sign}{}.{}", tenths / 10, tenths % 10)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportMeta {
    pub toolkit_version: String,
    pub model: String,
    pub master_seed: u64,
    pub config_hash: String,
    pub episodes: usize,
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteReport {
    pub meta: ReportMeta,
    pub baseline: SuiteEntry,
    /// Baseline first, then one entry per condition.
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn entry(&self, key: &str) -> Option<&SuiteEntry> {
        self.entries.iter().find(|e| e.spec_key == key)
    }

    pub fn to_json(&self) -> Value {
        let entry = |e: &SuiteEntry| {
            json!({
                "spec_key": e.spec_key,
                "sr": e.sr_text(),
                "episodes": e.episodes,
                "successes": e.successes,
                "drop": e.drop_text(&self.baseline),
                "per_task": e.per_task.iter().enumerate().map(|(t, &(s, n))| json!({
                    "task": t,
                    "sr": format_percent(s as i128, n.max(1) as i128),
                    "successes": s,
                    "episodes": n,
                })).collect::<Vec<_>>(),
            })
        };
        json!({
            "meta": {
                "toolkit_version": self.meta.toolkit_version,
                "model": self.meta.model,
                "master_seed": self.meta.master_seed.to_string(),
                "config_hash": self.meta.config_hash,
                "episodes": self.meta.episodes,
                "tasks": self.meta.tasks,
                "seed_rule": "derive_seed(master_seed, 1, episode)",
            },
            "baseline": entry(&self.baseline),
            "entries": self.entries.iter().map(entry).collect::<Vec<_>>(),
        })
    }
}

fn meta(model: &Model, cfg: &SuiteConfig) -> ReportMeta {
    ReportMeta {
        toolkit_version: TOOLKIT_VERSION.to_string(),
        model: model.kind().as_str().to_string(),
        master_seed: cfg.master_seed,
        config_hash: cfg.config_hash.clone(),
        episodes: cfg.episodes,
        tasks: cfg.tasks.len(),
    }
}

/// Success flag of every episode under one condition.
pub fn run_condition(model: &Model, condition: &Condition, cfg: &SuiteConfig) -> Result<Vec<bool>> {
    cfg.map_episodes(|e| Ok(run_episode(model, cfg.reset(e)?, condition, None)?.success))
}

/// Baseline plus one entry per condition, all on the same episode seeds.
pub fn run_suite(model: &Model, conditions: &[Condition], cfg: &SuiteConfig) -> Result<SuiteReport> {
    let base = run_condition(model, &Condition::baseline(), cfg)?;
    let baseline = SuiteEntry::from_results("baseline".into(), cfg, &base);
    let mut entries = vec![baseline.clone()];
    for c in conditions.iter().filter(|c| !c.is_baseline()) {
        let results = run_condition(model, c, cfg)?;
        entries.push(SuiteEntry::from_results(c.key(), cfg, &results));
    }
    Ok(SuiteReport {
        meta: meta(model, cfg),
        baseline,
        entries,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepPoint {
    /// `none` for the identity sweep.
    pub rule: String,
    pub stage: String,
    pub width: usize,
    pub center: usize,
    pub successes: usize,
    pub episodes: usize,
}

impl SweepPoint {
    pub fn sr(&self) -> f64 {
        100.0 * self.successes as f64 / self.episodes as f64
    }
}

/// SR under `window(center, width)` for every width and center. `rule =
/// None` runs the identity sweep.
pub fn layer_sweep(
    model: &Model,
    stage: Stage,
    rule: Option<Rule>,
    widths: &[usize],
    cfg: &SuiteConfig,
) -> Result<Vec<SweepPoint>> {
    if let Some(&w) = widths.iter().find(|w| !WINDOW_WIDTHS.contains(w)) {
        return Err(VtraceError::InvalidWidth(w));
    }
    let identity = match rule {
        None => Some(run_condition(model, &Condition::baseline(), cfg)?),
        Some(_) => None,
    };
    let mut points = Vec::with_capacity(widths.len() * model.num_layers());
    for &width in widths {
        for center in 0..model.num_layers() {
            let results = match (rule, &identity) {
                (Some(r), _) => {
                    let spec = KnockoutSpec::new(stage, r, LayerSelector::Window { center, width })?;
                    run_condition(model, &Condition::knockout(spec), cfg)?
                }
                (None, Some(base)) => base.clone(),
                (None, None) => unreachable!(),
            };
            points.push(SweepPoint {
                rule: rule.map_or("none", Rule::as_str).to_string(),
                stage: stage.as_str().to_string(),
                width,
                center,
                successes: results.iter().filter(|&&ok| ok).count(),
                episodes: results.len(),
            });
        }
    }
    Ok(points)
}

/// Curve table with columns `rule,stage,width,center_layer,sr`.
pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("rule,stage,width,center_layer,sr\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.rule,
            p.stage,
            p.width,
            p.center,
            format_percent(p.successes as i128, p.episodes as i128)
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Phase1,
    Phase2,
    Full,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Phase1 => "phase1",
            Phase::Phase2 => "phase2",
            Phase::Full => "full",
        }
    }
}

/// One row of the localization table; metric fields are `None` when no
/// episode had steps in the phase.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationRow {
    pub model: String,
    pub phase: Phase,
    pub episodes: usize,
    /// Attention mass on the agent-plus-target mask.
    pub mass: Option<f64>,
    pub iou90_object: Option<f64>,
    pub iou90_agent_plus_object: Option<f64>,
    /// Peak-hit rate on the object mask.
    pub hit: Option<f64>,
}

/// Per-step masks for one episode. Each phase step uses the subgoal active
/// at that step; the full-rollout masks cover every subgoal.
pub struct EpisodeMasks {
    pub object: Vec<RegionMask>,
    pub agent_plus_object: Vec<RegionMask>,
    pub object_union: Vec<RegionMask>,
    pub agent_plus_object_union: Vec<RegionMask>,
}

pub fn episode_masks(episode: &EpisodeResult, num_patches: usize) -> Result<EpisodeMasks> {
    let mk = |p: Vec<usize>, kind| RegionMask::new(p, kind, num_patches);
    let mut m = EpisodeMasks {
        object: Vec::new(),
        agent_plus_object: Vec::new(),
        object_union: Vec::new(),
        agent_plus_object_union: Vec::new(),
    };
    for s in &episode.per_step {
        m.object.push(mk(vec![s.target_patch], RegionKind::Target)?);
        m.agent_plus_object
            .push(mk(vec![s.target_patch, s.agent_patch], RegionKind::AgentPlusTarget)?);
        m.object_union.push(mk(episode.subgoals.clone(), RegionKind::Target)?);
        let mut both = episode.subgoals.clone();
        both.push(s.agent_patch);
        m.agent_plus_object_union.push(mk(both, RegionKind::AgentPlusTarget)?);
    }
    Ok(m)
}

/// Phase metrics of one recorded episode for the object and agent-plus-
/// object masks: `(object, agent_plus_object)` for the phases, and the same
/// pair over the union masks for the full rollout.
pub fn episode_localization(
    episode: &EpisodeResult,
    num_patches: usize,
) -> Result<((PhaseMetrics, PhaseMetrics), (PhaseMetrics, PhaseMetrics))> {
    let heatmaps = episode
        .per_step
        .iter()
        .map(|s| {
            s.heatmap
                .clone()
                .ok_or_else(|| VtraceError::LengthMismatch("episode lacks per-step heatmaps".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = episode_masks(episode, num_patches)?;
    Ok((
        (
            phase_metrics(&heatmaps, &m.object)?,
            phase_metrics(&heatmaps, &m.agent_plus_object)?,
        ),
        (
            phase_metrics(&heatmaps, &m.object_union)?,
            phase_metrics(&heatmaps, &m.agent_plus_object_union)?,
        ),
    ))
}

#[derive(Default, Clone, Copy)]
struct Acc {
    n: usize,
    mass: f64,
    iou_o: f64,
    iou_ao: f64,
    hit: f64,
}

impl Acc {
    fn add(&mut self, mass: f64, iou_o: f64, iou_ao: f64, hit: f64) {
        self.n += 1;
        self.mass += mass;
        self.iou_o += iou_o;
        self.iou_ao += iou_ao;
        self.hit += hit;
    }

    fn row(&self, model: &str, phase: Phase) -> LocalizationRow {
        let mean = |v: f64| (self.n > 0).then(|| v / self.n as f64);
        LocalizationRow {
            model: model.to_string(),
            phase,
            episodes: self.n,
            mass: mean(self.mass),
            iou90_object: mean(self.iou_o),
            iou90_agent_plus_object: mean(self.iou_ao),
            hit: mean(self.hit),
        }
    }
}

/// Localization table over baseline rollouts: per-episode phase means,
/// averaged over the episodes that have the phase. `layers` defaults to all.
pub fn localize(model: &Model, cfg: &SuiteConfig, layers: Option<&[usize]>) -> Result<Vec<LocalizationRow>> {
    let all: Vec<usize> = (0..model.num_layers()).collect();
    let layers = layers.unwrap_or(&all);
    let n = model.config().num_patches();
    let per_episode = cfg.map_episodes(|e| {
        let ep = run_episode(model, cfg.reset(e)?, &Condition::baseline(), Some(layers))?;
        if ep.steps == 0 {
            return Ok(None);
        }
        episode_localization(&ep, n).map(Some)
    })?;
    let (mut p1, mut p2, mut full) = (Acc::default(), Acc::default(), Acc::default());
    for ((o, ao), (uo, uao)) in per_episode.into_iter().flatten() {
        p1.add(ao.phase1.mass, o.phase1.iou90, ao.phase1.iou90, o.phase1.hit_rate);
        if let (Some(o2), Some(ao2)) = (o.phase2, ao.phase2) {
            p2.add(ao2.mass, o2.iou90, ao2.iou90, o2.hit_rate);
        }
        full.add(uao.full.mass, uo.full.iou90, uao.full.iou90, uo.full.hit_rate);
    }
    let name = model.kind().as_str();
    Ok(vec![
        p1.row(name, Phase::Phase1),
        p2.row(name, Phase::Phase2),
        full.row(name, Phase::Full),
    ])
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

/// Columns `model,phase,mass,iou90_object,iou90_agent_plus_object,hit`.
pub fn localization_csv(rows: &[LocalizationRow]) -> String {
    let mut out = String::from("model,phase,mass,iou90_object,iou90_agent_plus_object,hit\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.model,
            r.phase.as_str(),
            opt(r.mass),
            opt(r.iou90_object),
            opt(r.iou90_agent_plus_object),
            opt(r.hit)
        );
    }
    out
}

/// Outcome of an instruction-edit probe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditReport {
    pub spec_key: String,
    pub episodes: usize,
    /// Episodes whose instruction the edit changes.
    pub edited: usize,
    /// Edited episodes that reach the objects the edited instruction names.
    pub retargeted: usize,
    /// Edited episodes whose rollout is identical to the unedited one.
    pub unchanged: usize,
}

impl EditReport {
    pub fn retarget_rate(&self) -> f64 {
        100.0 * self.retargeted as f64 / self.edited.max(1) as f64
    }

    pub fn unchanged_rate(&self) -> f64 {
        100.0 * self.unchanged as f64 / self.edited.max(1) as f64
    }

    pub fn to_json(&self) -> Value {
        let d = self.edited.max(1) as i128;
        json!({
            "spec_key": self.spec_key,
            "episodes": self.episodes,
            "edited": self.edited,
            "retargeted": self.retargeted,
            "retarget_rate": format_percent(self.retargeted as i128, d),
            "unchanged": self.unchanged,
            "unchanged_rate": format_percent(self.unchanged as i128, d),
        })
    }
}

/// Runs every episode with and without the edit, and once more against the
/// objects named by the edited instruction.
pub fn edit_probe(model: &Model, edit: &InstructionEdit, cfg: &SuiteConfig) -> Result<EditReport> {
    let condition = Condition::edit(edit.clone());
    let outcomes = cfg.map_episodes(|e| {
        let env = cfg.reset(e)?;
        let original = env.instruction();
        let edited_tokens = crate::perturbation::edit_instruction(&original.tokens, edit);
        if edited_tokens == original.tokens {
            return Ok(None);
        }
        let base = run_episode(model, env.clone(), &Condition::baseline(), None)?;
        let same_env = run_episode(model, env.clone(), &condition, None)?;
        let colors: Vec<u8> = edited_tokens
            .iter()
            .filter_map(|t| match t {
                crate::model::Token::Color(c) => Some(*c),
                _ => None,
            })
            .collect();
        let mut moved = env;
        let retargeted = match moved.retarget(&colors) {
            Ok(()) => run_episode(model, moved, &condition, None)?.success,
            Err(_) => false,
        };
        Ok(Some((
            retargeted,
            base.per_step == same_env.per_step && base.success == same_env.success,
        )))
    })?;
    let edited: Vec<_> = outcomes.into_iter().flatten().collect();
    Ok(EditReport {
        spec_key: edit.key(),
        episodes: cfg.episodes,
        edited: edited.len(),
        retargeted: edited.iter().filter(|e| e.0).count(),
        unchanged: edited.iter().filter(|e| e.1).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(10, 40), "25.0");
        assert_eq!(format_percent(200, 200), "100.0");
        assert_eq!(format_percent(0, 200), "0.0");
        assert_eq!(format_percent(1, 3), "33.3");
        assert_eq!(format_percent(2, 3), "66.7");
        assert_eq!(format_percent(1, 8), "12.5");
        assert_eq!(format_percent(1, 16), "6.3");
        assert_eq!(format_percent(-1, 16), "-6.3");
        assert_eq!(format_percent(-1, 3000), "0.0");
    }

    #[test]
    fn episode_indexing() {
        let cfg = SuiteConfig::default();
        assert_eq!(cfg.episode(13).0, 3);
        assert_ne!(cfg.episode(0).1, cfg.episode(10).1);
    }
}
