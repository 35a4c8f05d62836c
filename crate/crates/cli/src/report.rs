// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::{json, Map, Value};
use vtrace_core::harness::TOOLKIT_VERSION;

use crate::config::{Loaded, Probe};
use crate::run::{to_json_text, Artifact};
use crate::CliError;

/// Parsed CSV output: the config hash from its header line plus one object per row.
fn read_csv(text: &str) -> (Option<String>, Vec<Map<String, Value>>) {
    let mut lines = text.lines().peekable();
    let mut hash = None;
    while let Some(l) = lines.peek() {
        if let Some(rest) = l.strip_prefix('#') {
            hash = rest
                .split_whitespace()
                .find_map(|w| w.strip_prefix("config_hash="))
                .map(str::to_string);
            lines.next();
        } else {
            break;
        }
    }
    let Some(header) = lines.next() else {
        return (hash, Vec::new());
    };
    let cols: Vec<&str> = header.split(',').collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            cols.iter()
                .zip(l.split(','))
                .map(|(c, v)| (c.to_string(), json!(v)))
                .collect()
        })
        .collect();
    (hash, rows)
}

fn probe_files(probe: &Probe) -> Vec<String> {
    let name = probe.name();
    match probe {
        Probe::Knockout { .. } | Probe::Perturb { .. } | Probe::Edit { .. } => vec![format!("{name}.json")],
        Probe::Sweep { .. } | Probe::Localize { .. } => vec![format!("{name}.csv")],
        Probe::Cka { .. } => vec![format!("{name}_profile.csv"), format!("{name}_drift.json")],
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) if s.is_empty() => "n/a".into(),
        Value::String(s) => s.clone(),
        Value::Null => "n/a".into(),
        other => other.to_string(),
    }
}

fn table(out: &mut String, head: &[&str], rows: impl IntoIterator<Item = Vec<String>>) {
    let _ = writeln!(out, "| {} |", head.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(head.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out.push('\n');
}

fn markdown_section(out: &mut String, probe: &Probe, content: &Map<String, Value>) {
    let name = probe.name();
    let _ = writeln!(out, "## {name} ({})\n", probe.command().as_str());
    match probe {
        Probe::Knockout { .. } | Probe::Perturb { .. } => {
            let entries = content[&format!("{name}.json")]["entries"]
                .as_array()
                .cloned()
                .unwrap_or_default();
            table(
                out,
                &["condition", "SR", "drop", "successes", "episodes"],
                entries.iter().map(|e| {
                    ["spec_key", "sr", "drop", "successes", "episodes"]
                        .iter()
                        .map(|k| cell(&e[*k]))
                        .collect()
                }),
            );
        }
        Probe::Edit { .. } => {
            let e = &content[&format!("{name}.json")]["edit"];
            table(
                out,
                &["edit", "edited", "retarget rate", "unchanged rate"],
                [["spec_key", "edited", "retarget_rate", "unchanged_rate"]
                    .iter()
                    .map(|k| cell(&e[*k]))
                    .collect()],
            );
        }
        Probe::Sweep { .. } => {
            let rows = content[&format!("{name}.csv")].as_array().cloned().unwrap_or_default();
            table(
                out,
                &["rule", "stage", "width", "center", "SR"],
                rows.iter().map(|r| {
                    ["rule", "stage", "width", "center_layer", "sr"]
                        .iter()
                        .map(|k| cell(&r[*k]))
                        .collect()
                }),
            );
        }
        Probe::Localize { .. } => {
            let rows = content[&format!("{name}.csv")].as_array().cloned().unwrap_or_default();
            let cols = ["phase", "mass", "iou90_object", "iou90_agent_plus_object", "hit"];
            table(
                out,
                &cols,
                rows.iter().map(|r| cols.iter().map(|k| cell(&r[*k])).collect()),
            );
        }
        Probe::Cka { .. } => {
            let views = content[&format!("{name}_drift.json")]["views"]
                .as_object()
                .cloned()
                .unwrap_or_default();
            table(
                out,
                &["view", "mean drift CKA"],
                views.iter().map(|(v, d)| {
                    vec![
                        v.clone(),
                        d["mean"].as_f64().map_or("n/a".into(), |m| format!("{m:.6}")),
                    ]
                }),
            );
        }
    }
}

/// Combined JSON and Markdown over the outputs already in the output directory.
pub fn build(loaded: &Loaded, dir: &Path) -> Result<Vec<Artifact>, CliError> {
    let mut probes = Vec::new();
    let mut missing = Vec::new();
    let mut md = format!(
        "# vtrace report\n\ntoolkit {TOOLKIT_VERSION}, config hash `{}`, model `{}`, master seed {}\n\n",
        loaded.hash,
        loaded.config.model.kind.as_str(),
        loaded.config.master_seed
    );
    for probe in &loaded.config.probes {
        let mut content = Map::new();
        let mut hashes = Vec::new();
        let mut complete = true;
        for file in probe_files(probe) {
            let path = dir.join(&file);
            let text = match fs::read_to_string(&path) {
                Ok(t) => t,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                    missing.push(file);
                    complete = false;
                    continue;
                }
                Err(e) => return Err(CliError::io(&path, e)),
            };
            if file.ends_with(".csv") {
                let (hash, rows) = read_csv(&text);
                hashes.push(hash);
                content.insert(file, Value::Array(rows.into_iter().map(Value::Object).collect()));
            } else {
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::new(4, format!("{}: not valid JSON: {e}", path.display())))?;
                hashes.push(v["meta"]["config_hash"].as_str().map(str::to_string));
                content.insert(file, v);
            }
        }
        if !complete {
            let _ = writeln!(md, "## {} ({})\n\nnot run\n", probe.name(), probe.command().as_str());
            continue;
        }
        let stale = hashes.iter().any(|h| h.as_deref() != Some(loaded.hash.as_str()));
        markdown_section(&mut md, probe, &content);
        if stale {
            let _ = writeln!(md, "outputs were produced by a different config\n");
        }
        probes.push(json!({
            "name": probe.name(),
            "type": probe.command().as_str(),
            "stale": stale,
            "outputs": content,
        }));
    }
    let combined = json!({
        "meta": {
            "toolkit_version": TOOLKIT_VERSION,
            "config_hash": loaded.hash,
            "model": loaded.config.model.kind.as_str(),
            "master_seed": loaded.config.master_seed.to_string(),
        },
        "probes": probes,
        "missing": missing,
    });
    Ok(vec![
        Artifact::Text {
            file: "report.json".into(),
            contents: to_json_text(&combined),
        },
        Artifact::Text {
            file: "report.md".into(),
            contents: md,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_header_and_rows() {
        let (hash, rows) = read_csv("# vtrace 0.1.0 config_hash=abc\na,b\n1,2\n3,\n");
        assert_eq!(hash.as_deref(), Some("abc"));
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1]["b"], json!(""));
    }
}
