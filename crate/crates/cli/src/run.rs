// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use vtrace_core::container::{read_activations, write_activations};
use vtrace_core::harness::{
    drift_fixture, edit_probe, layer_sweep, localization_csv, localize, run_suite, sweep_csv, Condition, ProbeSet,
    TOOLKIT_VERSION,
};
use vtrace_core::perturbation::InstructionEdit;
use vtrace_core::repr_geometry::{cross_modal_profile, drift_cka, CheckpointActivations};
use vtrace_core::{build_policy, EnvConfig, KnockoutSpec, Model, Perturbation, Rule, Stage, SuiteConfig, View};

use crate::config::{resolve, CkaSource, Command, Loaded, Probe};
use crate::CliError;

/// One file the command will write, relative to the output directory.
#[derive(Debug, Clone)]
pub enum Artifact {
    Text {
        file: String,
        contents: String,
    },
    Dump {
        dir: String,
        activations: Box<CheckpointActivations>,
    },
}

enum Work {
    Suite(Vec<Condition>),
    Sweep {
        stage: Stage,
        rule: Option<Rule>,
        widths: Vec<usize>,
    },
    Localize(Option<Vec<usize>>),
    Edit(InstructionEdit),
    Cka {
        source: Source,
        views: Vec<View>,
        save_dumps: bool,
    },
}

enum Source {
    Dumps(PathBuf, PathBuf),
    Fixture {
        scale: f64,
        group: vtrace_core::model::WeightGroup,
        samples: usize,
        seed: u64,
    },
}

/// A validated probe block, ready to run.
pub struct Job {
    name: String,
    command: Command,
    work: Work,
}

impl Job {
    pub fn outputs(&self) -> Vec<String> {
        match &self.work {
            Work::Suite(_) | Work::Edit(_) => vec![format!("{}.json", self.name)],
            Work::Sweep { .. } | Work::Localize(_) => vec![format!("{}.csv", self.name)],
            Work::Cka { save_dumps, .. } => {
                let mut files = vec![
                    format!("{}_profile.csv", self.name),
                    format!("{}_drift.json", self.name),
                ];
                if *save_dumps {
                    files.push(format!("{}_anchor/", self.name));
                    files.push(format!("{}_target/", self.name));
                }
                files
            }
        }
    }

    pub fn describe(&self, episodes: usize, layers: usize) -> String {
        match &self.work {
            Work::Suite(c) => format!("{} conditions (+ baseline) x {episodes} episodes", c.len()),
            Work::Sweep { stage, rule, widths } => format!(
                "{}:{} widths {:?} x {layers} centers x {episodes} episodes",
                stage.as_str(),
                rule.map_or("identity", Rule::as_str),
                widths
            ),
            Work::Localize(l) => match l {
                Some(l) => format!("{episodes} baseline episodes, heatmap layers {l:?}"),
                None => format!("{episodes} baseline episodes, all heatmap layers"),
            },
            Work::Edit(e) => format!("edit {} over {episodes} episodes", e.key()),
            Work::Cka { source, views, .. } => {
                let views: Vec<&str> = views.iter().map(|v| v.as_str()).collect();
                match source {
                    Source::Dumps(a, t) => format!("dumps {} vs {}, views {views:?}", a.display(), t.display()),
                    Source::Fixture {
                        scale,
                        group,
                        samples,
                        seed,
                    } => {
                        format!(
                            "fixture {} noise {scale} on {samples} probes (seed {seed}), views {views:?}",
                            format!("{group:?}").to_lowercase()
                        )
                    }
                }
            }
        }
    }
}

pub fn build_model(loaded: &Loaded) -> Result<Model, CliError> {
    Ok(build_policy(loaded.config.model.kind, loaded.config.model.config)?)
}

pub fn suite_config(loaded: &Loaded, workers: usize) -> SuiteConfig {
    let c = &loaded.config;
    SuiteConfig {
        episodes: c.episodes,
        tasks: EnvConfig::task_set(c.tasks, &c.env),
        master_seed: c.master_seed,
        workers,
        config_hash: loaded.hash.clone(),
    }
}

/// Parses every probe block of `command` without running anything.
pub fn plan(loaded: &Loaded, model: &Model, command: Command, config_dir: &Path) -> Result<Vec<Job>, CliError> {
    let vocab = model.vocabulary();
    let mut jobs = Vec::new();
    for (i, probe) in loaded.config.probes.iter().enumerate() {
        if probe.command() != command {
            continue;
        }
        let field = |f: &str| format!("probes[{i}].{f}");
        let work = match probe {
            Probe::Knockout { specs, .. } => Work::Suite(
                specs
                    .iter()
                    .map(|s| {
                        let spec: KnockoutSpec = s
                            .parse()
                            .map_err(|e| CliError::config(format!("{}: {e}", field("specs"))))?;
                        Ok(Condition::knockout(spec))
                    })
                    .collect::<Result<_, CliError>>()?,
            ),
            Probe::Perturb { specs, .. } => Work::Suite(
                specs
                    .iter()
                    .map(|s| {
                        let p: Perturbation = s
                            .parse()
                            .map_err(|e| CliError::config(format!("{}: {e}", field("specs"))))?;
                        Ok(Condition::perturbation(p))
                    })
                    .collect::<Result<_, CliError>>()?,
            ),
            Probe::Sweep {
                stage, rule, widths, ..
            } => {
                if widths.is_empty() {
                    return Err(CliError::config(format!(
                        "{}: need at least one width",
                        field("widths")
                    )));
                }
                if let Some(w) = widths.iter().find(|w| ![1, 3, 5, 7].contains(*w)) {
                    return Err(CliError::config(format!(
                        "{}: width {w} is not one of 1, 3, 5, 7",
                        field("widths")
                    )));
                }
                Work::Sweep {
                    stage: *stage,
                    rule: *rule,
                    widths: widths.clone(),
                }
            }
            Probe::Localize { layers, .. } => {
                if let Some(&l) = layers.iter().flatten().find(|&&l| l >= model.num_layers()) {
                    return Err(CliError::config(format!(
                        "{}: layer {l} out of range for a {}-layer model",
                        field("layers"),
                        model.num_layers()
                    )));
                }
                Work::Localize(layers.clone())
            }
            Probe::Edit { edit, .. } => Work::Edit(
                InstructionEdit::parse(edit, &vocab)
                    .map_err(|e| CliError::config(format!("{}: {e}", field("edit"))))?,
            ),
            Probe::Cka {
                source,
                views,
                save_dumps,
                ..
            } => {
                if views.is_empty() {
                    return Err(CliError::config(format!("{}: need at least one view", field("views"))));
                }
                let source = match source {
                    CkaSource::Dumps { anchor, target } => {
                        let check = |p: &Option<PathBuf>, f: &str| -> Result<PathBuf, CliError> {
                            let p = p
                                .as_ref()
                                .ok_or_else(|| CliError::config(format!("{}: missing dump path", field(f))))?;
                            let p = resolve(config_dir, p);
                            if !p.is_dir() {
                                return Err(CliError::config(format!(
                                    "{}: no dump directory at {}",
                                    field(f),
                                    p.display()
                                )));
                            }
                            Ok(p)
                        };
                        Source::Dumps(check(anchor, "source.anchor")?, check(target, "source.target")?)
                    }
                    CkaSource::Fixture {
                        scale,
                        group,
                        samples,
                        seed,
                    } => {
                        if !(scale.is_finite() && *scale >= 0.0) {
                            return Err(CliError::config(format!(
                                "{}: must be finite and >= 0",
                                field("source.scale")
                            )));
                        }
                        if *samples < 2 {
                            return Err(CliError::config(format!(
                                "{}: need at least 2 samples",
                                field("source.samples")
                            )));
                        }
                        Source::Fixture {
                            scale: *scale,
                            group: *group,
                            samples: *samples,
                            seed: *seed,
                        }
                    }
                };
                Work::Cka {
                    source,
                    views: views.clone(),
                    save_dumps: *save_dumps,
                }
            }
        };
        jobs.push(Job {
            name: probe.name(),
            command,
            work,
        });
    }
    if jobs.is_empty() {
        return Err(CliError::config(format!(
            "probes: no `{}` probe block in the config",
            command.as_str()
        )));
    }
    Ok(jobs)
}

pub fn csv_header(hash: &str) -> String {
    format!("# vtrace {TOOLKIT_VERSION} config_hash={hash}\n")
}

fn meta(loaded: &Loaded, model: &Model, command: Command) -> Value {
    json!({
        "toolkit_version": TOOLKIT_VERSION,
        "config_hash": loaded.hash,
        "command": command.as_str(),
        "model": model.kind().as_str(),
        "master_seed": loaded.config.master_seed.to_string(),
        "episodes": loaded.config.episodes,
    })
}

pub fn to_json_text(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json value");
    s.push('\n');
    s
}

fn profile_csv(hash: &str, profiles: &[(&str, vtrace_core::CkaProfile)]) -> String {
    let mut out = csv_header(hash);
    out.push_str("checkpoint,layer,cka_vision_text\n");
    for (role, p) in profiles {
        for (layer, v) in &p.values {
            let _ = writeln!(out, "{role},{layer},{v}");
        }
    }
    out
}

/// Runs one job; results stay in memory until [`write_artifacts`].
pub fn execute(job: &Job, loaded: &Loaded, model: &Model, cfg: &SuiteConfig) -> Result<Vec<Artifact>, CliError> {
    let name = &job.name;
    let text = |file: String, contents: String| Artifact::Text { file, contents };
    Ok(match &job.work {
        Work::Suite(conditions) => {
            let report = run_suite(model, conditions, cfg)?;
            let mut v = report.to_json();
            v["meta"]["command"] = json!(job.command.as_str());
            vec![text(format!("{name}.json"), to_json_text(&v))]
        }
        Work::Sweep { stage, rule, widths } => {
            let points = layer_sweep(model, *stage, *rule, widths, cfg)?;
            vec![text(
                format!("{name}.csv"),
                csv_header(&loaded.hash) + &sweep_csv(&points),
            )]
        }
        Work::Localize(layers) => {
            let rows = localize(model, cfg, layers.as_deref())?;
            vec![text(
                format!("{name}.csv"),
                csv_header(&loaded.hash) + &localization_csv(&rows),
            )]
        }
        Work::Edit(edit) => {
            let report = edit_probe(model, edit, cfg)?;
            let v = json!({"meta": meta(loaded, model, job.command), "edit": report.to_json()});
            vec![text(format!("{name}.json"), to_json_text(&v))]
        }
        Work::Cka {
            source,
            views,
            save_dumps,
        } => {
            let (anchor, target) = match source {
                Source::Dumps(a, t) => (read_activations(a)?, read_activations(t)?),
                Source::Fixture {
                    scale,
                    group,
                    samples,
                    seed,
                } => {
                    let probe = ProbeSet::for_model(model, *samples, *seed);
                    drift_fixture(model, *scale, *group, &probe)?
                }
            };
            let profiles = [
                ("anchor", cross_modal_profile(&anchor)?),
                ("target", cross_modal_profile(&target)?),
            ];
            let drift = drift_cka(&anchor, &target, views)?;
            let per_view: serde_json::Map<String, Value> = drift
                .per_view
                .iter()
                .map(|(v, d)| {
                    (
                        v.as_str().to_string(),
                        json!({"mean": d.mean, "per_layer": d.per_layer}),
                    )
                })
                .collect();
            let v = json!({
                "meta": meta(loaded, model, job.command),
                "anchor_id": drift.anchor_id,
                "target_id": drift.target_id,
                "dataset_id": anchor.dataset_id,
                "views": per_view,
            });
            let mut out = vec![
                text(format!("{name}_profile.csv"), profile_csv(&loaded.hash, &profiles)),
                text(format!("{name}_drift.json"), to_json_text(&v)),
            ];
            if *save_dumps {
                out.push(Artifact::Dump {
                    dir: format!("{name}_anchor"),
                    activations: Box::new(anchor),
                });
                out.push(Artifact::Dump {
                    dir: format!("{name}_target"),
                    activations: Box::new(target),
                });
            }
            out
        }
    })
}

/// Writes every artifact under `dir`, each text file via a temporary name
/// and a rename.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<PathBuf>, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();
    for a in artifacts {
        match a {
            Artifact::Text { file, contents } => {
                let path = dir.join(file);
                let tmp = dir.join(format!(".{file}.tmp"));
                fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
                fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
                written.push(path);
            }
            Artifact::Dump { dir: sub, activations } => {
                let path = dir.join(sub);
                write_activations(&path, activations).map_err(CliError::from)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
