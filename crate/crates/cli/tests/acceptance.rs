// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Output};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use vtrace_core::container::write_activations;
use vtrace_core::harness::scripted_action;
use vtrace_core::intervention::{apply_to_logits, build_mask, window_layers};
use vtrace_core::localization::peak_patch;
use vtrace_core::repr_geometry::{linear_cka, CheckpointActivations, RepresentationMatrix};
use vtrace_core::{
    build_policy, edit_instruction, hit, iou90, mass, phase_metrics, AttentionBase, EnvConfig, ForwardTrace, GridEnv,
    Heatmap, Instruction, InstructionEdit, InterventionHandle, ModelConfig, ModelKind, RegionKind, RegionMask, Rule,
    Stage, TokenPartition, View, VtraceError,
};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

const DEMOS: [(&str, &[&str]); 3] = [
    (
        "early_fusion",
        &["knockout", "sweep", "localize", "perturb", "edit", "cka", "report"],
    ),
    ("late_fusion", &["knockout", "localize", "perturb", "cka", "report"]),
    ("shortcut", &["knockout", "edit", "report"]),
];

fn vtrace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtrace"))
        .args(args)
        .env_remove("VTRACE_SEED")
        .output()
        .expect("vtrace runs")
}

struct Runs {
    a: PathBuf,
    b: PathBuf,
    knockout_time: Duration,
    _tmp: tempfile::TempDir,
}

/// Runs every demo config into `root/{demo}` with the given worker count.
fn run_demos(root: &Path, workers: usize) -> Result<Duration, String> {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut knockout_time = Duration::ZERO;
    for (demo, commands) in DEMOS {
        let text = fs::read_to_string(configs.join(format!("demo_{demo}.json"))).map_err(|e| e.to_string())?;
        let mut cfg: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        cfg["output_dir"] = json!(root.join(demo));
        let path = root.join(format!("{demo}.json"));
        fs::write(&path, cfg.to_string()).map_err(|e| e.to_string())?;
        for cmd in commands {
            let start = Instant::now();
            let w = workers.to_string();
            let o = vtrace(&[cmd, "--config", path.to_str().unwrap(), "--workers", &w]);
            if demo == "early_fusion" && *cmd == "knockout" {
                knockout_time = start.elapsed();
            }
            if !o.status.success() {
                return Err(format!(
                    "{cmd} on {demo}: {}",
                    String::from_utf8_lossy(&o.stderr).trim()
                ));
            }
        }
    }
    Ok(knockout_time)
}

fn demo_runs() -> Result<Runs, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fs::create_dir_all(&a).map_err(|e| e.to_string())?;
    fs::create_dir_all(&b).map_err(|e| e.to_string())?;
    let knockout_time = run_demos(&a, 1)?;
    run_demos(&b, 8)?;
    Ok(Runs {
        a,
        b,
        knockout_time,
        _tmp: tmp,
    })
}

fn read_json(path: &Path) -> Result<Value, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// SR of every entry in a suite report, keyed by spec.
fn suite_sr(path: &Path) -> Result<BTreeMap<String, f64>, String> {
    let v = read_json(path)?;
    v["entries"]
        .as_array()
        .ok_or("no entries")?
        .iter()
        .map(|e| {
            let key = e["spec_key"].as_str().ok_or("spec_key")?.to_string();
            let sr = e["sr"].as_str().and_then(|s| s.parse().ok()).ok_or("sr")?;
            Ok((key, sr))
        })
        .collect()
}

fn sr(table: &BTreeMap<String, f64>, key: &str) -> Result<f64, String> {
    table.get(key).copied().ok_or_else(|| format!("no entry {key}"))
}

fn rate(v: &Value, key: &str) -> Result<f64, String> {
    v["edit"][key]
        .as_str()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("edit.{key} missing"))
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.random_range(-3.0..3.0))
}

fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn hsic_cka(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let (x, y) = (to_na(x), to_na(y));
    let n = x.nrows();
    let h = DMatrix::<f64>::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let k = &h * (&x * x.transpose()) * &h;
    let l = &h * (&y * y.transpose()) * &h;
    let hsic = |a: &DMatrix<f64>, b: &DMatrix<f64>| a.component_mul(b).sum();
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

fn cka(x: &Array2<f64>, y: &Array2<f64>) -> Result<f64, String> {
    let rm = |a: &Array2<f64>| RepresentationMatrix::anonymous(a.clone()).map_err(|e| e.to_string());
    linear_cka(&rm(x)?, &rm(y)?).map_err(|e| e.to_string())
}

fn c1_cka_properties() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = rng.random_range(4..=64);
        let (d1, d2) = (rng.random_range(2..=32), rng.random_range(2..=32));
        let x = random_matrix(&mut rng, n, d1);
        let y = random_matrix(&mut rng, n, d2);
        let base = cka(&x, &y)?;
        let self_sim = cka(&x, &x)?;
        ensure!((self_sim - 1.0).abs() <= 1e-10, "case {case}: self CKA {self_sim}");
        ensure!((base - cka(&y, &x)?).abs() <= 1e-12, "case {case}: asymmetric");
        ensure!((0.0..=1.0 + 1e-12).contains(&base), "case {case}: {base} out of range");
        let oracle = hsic_cka(&x, &y);
        worst = worst.max((base - oracle).abs());
        ensure!((base - oracle).abs() <= 1e-10, "case {case}: {base} vs oracle {oracle}");
        let q = DMatrix::from_fn(d1, d1, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let xq = to_na(&x) * q;
        let xq = Array2::from_shape_fn((n, d1), |(i, j)| xq[(i, j)]);
        ensure!(
            (cka(&xq, &y)? - base).abs() <= 1e-8,
            "case {case}: not rotation invariant"
        );
        let (s, shift) = (rng.random_range(0.01..100.0), rng.random_range(-5.0..5.0));
        ensure!(
            (cka(&x.mapv(|v| v * s + shift), &y)? - base).abs() <= 1e-8,
            "case {case}: not scale invariant"
        );
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(5), "took {t:.2?}");
    Ok(format!("100 pairs, max oracle gap {worst:.1e}, {t:.2?}"))
}

fn c2_drift(runs: &Runs) -> Check {
    let dir = runs.a.join("early_fusion");
    let zero = read_json(&dir.join("drift_zero_drift.json"))?;
    for view in View::ALL {
        let v = &zero["views"][view.as_str()];
        let mean = v["mean"].as_f64().ok_or("mean")?;
        ensure!((mean - 1.0).abs() <= 1e-10, "zero noise {view}: {mean}");
        for c in v["per_layer"].as_array().ok_or("per_layer")? {
            ensure!(
                (c.as_f64().unwrap_or(0.0) - 1.0).abs() <= 1e-10,
                "zero noise {view} layer value {c}"
            );
        }
    }
    let mut text_means = Vec::new();
    for s in 1..=3 {
        let v = read_json(&dir.join(format!("drift_language_s{s}_drift.json")))?;
        let text = v["views"]["text_pooled"]["mean"].as_f64().ok_or("text mean")?;
        let vision = v["views"]["vision_pooled"]["mean"].as_f64().ok_or("vision mean")?;
        ensure!(text < vision, "scale {s}: text {text} not below vision {vision}");
        text_means.push(text);
    }
    ensure!(
        text_means.windows(2).all(|w| w[1] <= w[0]),
        "text drift not monotone: {text_means:?}"
    );
    Ok(format!(
        "zero noise = 1, text < vision at 3/3 scales, text {text_means:.4?}"
    ))
}

#[derive(Clone, Copy, PartialEq)]
enum R {
    V,
    L,
    S,
    A,
}

fn oracle_blocked(
    roles: &[R],
    instr: &[bool],
    stage: Stage,
    rule: Rule,
    base: AttentionBase,
    q: usize,
    k: usize,
) -> bool {
    if base == AttentionBase::Causal && k > q {
        return true;
    }
    let (rq, rk) = (roles[q], roles[k]);
    let affected = match stage {
        Stage::Prefill => rq != R::A,
        Stage::Generation => rq == R::A,
        Stage::Global => true,
    };
    affected
        && match rule {
            Rule::NoImage => rk == R::V,
            Rule::NoText => rk == R::L,
            Rule::NoVl => (rq == R::V && rk == R::L) || (rq == R::L && rk == R::V),
            Rule::KeepStructuralOnly => rk == R::V || rk == R::L,
            Rule::DropStructural => rk == R::S,
            Rule::DropInstruction => rk == R::L && instr[k],
        }
}

fn c3_mask_exactness() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut checked, mut rejected) = (0, 0);
    for case in 0..1000 {
        let n = rng.random_range(2..24);
        let roles: Vec<R> = (0..n)
            .map(|_| [R::V, R::L, R::S, R::A][rng.random_range(0..4)])
            .collect();
        let instr: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let stage = [Stage::Prefill, Stage::Generation, Stage::Global][rng.random_range(0..3)];
        let rule = Rule::ALL[rng.random_range(0..Rule::ALL.len())];
        let base = if rng.random() {
            AttentionBase::Causal
        } else {
            AttentionBase::Bidirectional
        };
        let logits = Array2::from_shape_fn((n, n), |_| rng.random_range(-30.0..30.0));
        let pick = |r: R| (0..n).filter(|&i| roles[i] == r).collect::<Vec<_>>();
        let instruction = (0..n).filter(|&i| roles[i] == R::L && instr[i]).collect();
        let p = TokenPartition::with_instruction(pick(R::V), pick(R::L), pick(R::S), pick(R::A), instruction, n)
            .map_err(|e| e.to_string())?;
        match build_mask(&p, stage, rule, base, 0) {
            Ok(mask) => {
                let w = apply_to_logits(&mask, logits.view()).map_err(|e| e.to_string())?;
                for q in 0..n {
                    let mut sum = 0.0;
                    for k in 0..n {
                        let blocked = oracle_blocked(&roles, &instr, stage, rule, base, q, k);
                        ensure!(
                            mask.is_blocked(q, k) == blocked,
                            "case {case}: ({q},{k}) disagrees with oracle"
                        );
                        ensure!(
                            !blocked || w[[q, k]].to_bits() == 0,
                            "case {case}: blocked weight {}",
                            w[[q, k]]
                        );
                        sum += w[[q, k]];
                    }
                    ensure!((sum - 1.0).abs() <= 1e-12, "case {case}: row {q} sums to {sum}");
                }
                checked += 1;
            }
            Err(VtraceError::FullyBlockedQuery { row, .. }) => {
                ensure!(
                    (0..n).all(|k| oracle_blocked(&roles, &instr, stage, rule, base, row, k)),
                    "case {case}: spurious full block"
                );
                rejected += 1;
            }
            Err(VtraceError::IncompatibleIntervention(_)) => rejected += 1,
            Err(e) => return Err(format!("case {case}: {e}")),
        }
    }
    for kind in [ModelKind::EarlyFusion, ModelKind::LateFusion, ModelKind::Shortcut] {
        let model = build_policy(kind, ModelConfig::default()).map_err(|e| e.to_string())?;
        let env_cfg = EnvConfig {
            subgoals: 2,
            ..EnvConfig::default()
        };
        for seed in 0..5 {
            let (env, obs) = GridEnv::reset(&env_cfg, seed).map_err(|e| e.to_string())?;
            let instruction = env.instruction();
            let layout = model.layout(instruction.tokens.len()).map_err(|e| e.to_string())?;
            let handle = InterventionHandle::identity(layout.sequence_len(), model.num_layers(), model.regime());
            let plain = model.forward(&obs, &instruction, None).map_err(|e| e.to_string())?;
            let with = model
                .forward(&obs, &instruction, Some(&handle))
                .map_err(|e| e.to_string())?;
            let bits = |t: &ForwardTrace| {
                t.attention
                    .iter()
                    .flat_map(|r| r.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                    .chain(t.logits.iter().map(|v| v.to_bits()))
                    .collect::<Vec<_>>()
            };
            ensure!(
                plain == with && bits(&plain) == bits(&with),
                "{} seed {seed}: identity handle changed the trace",
                kind.as_str()
            );
        }
    }
    let t = start.elapsed();
    ensure!(t < Duration::from_secs(5), "took {t:.2?}");
    Ok(format!(
        "1000 triples ({checked} built, {rejected} rejected), identity traces bit-identical, {t:.2?}"
    ))
}

fn c4_windows() -> Check {
    let mut cases = 0;
    for l in [6usize, 18, 32] {
        for w in [1usize, 3, 5, 7] {
            for c in 0..l {
                let expected: Vec<usize> = (0..l).filter(|&j| j.abs_diff(c) <= (w - 1) / 2).collect();
                let got = window_layers(c, w, l).map_err(|e| e.to_string())?;
                ensure!(got == expected, "L={l} w={w} c={c}: {got:?}");
                cases += 1;
            }
        }
    }
    ensure!(window_layers(0, 2, 6).is_err(), "even width accepted");
    ensure!(window_layers(6, 1, 6).is_err(), "out-of-range center accepted");
    Ok(format!("{cases} windows match the range oracle"))
}

fn c5_early_fusion(runs: &Runs) -> Check {
    let t = suite_sr(&runs.a.join("early_fusion/knockout.json"))?;
    let (base, no_text, no_image, combo) = (
        sr(&t, "baseline")?,
        sr(&t, "gen:no_text@all")?,
        sr(&t, "gen:no_image@all")?,
        sr(&t, "prefill:no_vl+gen:no_image@all")?,
    );
    ensure!(base >= 98.0, "baseline {base}");
    ensure!(no_text >= 95.0, "gen:no_text {no_text}");
    ensure!(no_image <= 30.0, "gen:no_image {no_image}");
    ensure!(combo <= 22.0, "combo {combo}");
    let time = runs.knockout_time;
    ensure!(time < Duration::from_secs(60), "knockout suite took {time:.1?}");
    Ok(format!(
        "baseline {base}, gen:no_text {no_text}, gen:no_image {no_image}, combo {combo}, {time:.1?}"
    ))
}

fn c6_late_fusion(runs: &Runs) -> Check {
    let t = suite_sr(&runs.a.join("late_fusion/knockout.json"))?;
    let (base, no_text, no_image, pre_image) = (
        sr(&t, "baseline")?,
        sr(&t, "gen:no_text@all")?,
        sr(&t, "gen:no_image@all")?,
        sr(&t, "prefill:no_image@all")?,
    );
    ensure!(no_text <= 30.0, "gen:no_text {no_text}");
    ensure!(pre_image <= 30.0, "prefill:no_image {pre_image}");
    ensure!(
        no_image > 30.0 && no_image < base - 20.0,
        "gen:no_image {no_image} vs baseline {base}"
    );
    Ok(format!(
        "baseline {base}, gen:no_text {no_text}, prefill:no_image {pre_image}, gen:no_image {no_image}"
    ))
}

fn c7_sweep(runs: &Runs) -> Check {
    let text = fs::read_to_string(runs.a.join("early_fusion/sweep.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = text
        .lines()
        .skip(2)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').collect())
        .collect();
    let cfg = ModelConfig::default();
    ensure!(
        rows.len() == cfg.layers * 4,
        "{} rows, expected {}",
        rows.len(),
        cfg.layers * 4
    );
    let w1: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r[2] == "1")
        .map(|r| (r[3].parse().unwrap_or(usize::MAX), r[4].parse().unwrap_or(f64::NAN)))
        .collect();
    let min = w1.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let at_min: Vec<usize> = w1.iter().filter(|r| r.1 == min).map(|r| r.0).collect();
    ensure!(at_min == [cfg.routing_layer], "w=1 minimum {min} at {at_min:?}");
    let others = w1
        .iter()
        .filter(|r| r.0 != cfg.routing_layer)
        .map(|r| r.1)
        .fold(f64::INFINITY, f64::min);
    ensure!(others >= 95.0, "off-routing SR drops to {others}");
    Ok(format!(
        "w=1 minimum {min} only at layer {}, others >= {others}, {} rows",
        cfg.routing_layer,
        rows.len()
    ))
}

fn brute_high(values: &[f64]) -> Vec<bool> {
    let n = values.len();
    let rank = (1..=n).find(|&r| 10 * r >= 9 * n).unwrap();
    let tau = values
        .iter()
        .copied()
        .filter(|&v| values.iter().filter(|&&u| u <= v).count() >= rank)
        .fold(f64::INFINITY, f64::min);
    values.iter().map(|&v| v >= tau).collect()
}

fn c8_localization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..500 {
        let grid = (rng.random_range(1..=16), rng.random_range(1..=16));
        let n = grid.0 * grid.1;
        let quantized: bool = rng.random();
        let mut values: Vec<f64> = (0..n)
            .map(|_| {
                if quantized {
                    f64::from(rng.random_range(0u8..4))
                } else {
                    rng.random()
                }
            })
            .collect();
        if values.iter().all(|&v| v == 0.0) {
            values[0] = 1.0;
        }
        let inside: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        let h = Heatmap::new(values.clone(), grid).map_err(|e| e.to_string())?;
        let m = RegionMask::new((0..n).filter(|&i| inside[i]), RegionKind::Custom, n).map_err(|e| e.to_string())?;

        let high = brute_high(&values);
        let inter = high.iter().zip(&inside).filter(|(a, b)| **a && **b).count();
        let union = high.iter().zip(&inside).filter(|(a, b)| **a || **b).count();
        let iou = if inside.contains(&true) {
            inter as f64 / union as f64
        } else {
            0.0
        };
        ensure!(iou90(&h, &m) == iou, "case {case}: IoU {} vs {iou}", iou90(&h, &m));

        let total: f64 = values.iter().sum();
        let within: f64 = values.iter().zip(&inside).filter(|(_, &b)| b).map(|(v, _)| v).sum();
        let got = mass(&h, &m).map_err(|e| e.to_string())?;
        ensure!(
            (got - within / total).abs() <= 1e-12,
            "case {case}: mass {got} vs {}",
            within / total
        );

        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let peak = values.iter().position(|&v| v == max).unwrap();
        ensure!(peak_patch(&h) == peak, "case {case}: peak {} vs {peak}", peak_patch(&h));
        ensure!(hit(&h, &m) == inside[peak], "case {case}: hit disagrees");

        let rest = mass(&h, &m.complement(n)).map_err(|e| e.to_string())?;
        ensure!(
            (got + rest - 1.0).abs() <= 1e-12,
            "case {case}: mass and complement sum to {}",
            got + rest
        );
        let s = rng.random_range(1e-3..1e3);
        let hs = h.scaled(s);
        ensure!(
            (mass(&hs, &m).map_err(|e| e.to_string())? - got).abs() <= 1e-12,
            "case {case}: mass not scale invariant"
        );
        ensure!(iou90(&hs, &m) == iou, "case {case}: IoU not scale invariant");
    }
    Ok("500 heatmap/mask pairs match brute force, complement and scale hold".into())
}

/// 2x2 block anchored at `patch`, shifted inward at the border.
fn footprint(patch: usize, grid: usize) -> Vec<usize> {
    let (r, c) = ((patch / grid).min(grid - 2), (patch % grid).min(grid - 2));
    vec![
        r * grid + c,
        r * grid + c + 1,
        (r + 1) * grid + c,
        (r + 1) * grid + c + 1,
    ]
}

fn c9_phase_semantics() -> Check {
    let cfg = EnvConfig {
        subgoals: 2,
        ..EnvConfig::default()
    };
    let g = cfg.grid;
    let n = g * g;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut a_gap, mut b_gap, mut used) = (0.0, 0.0, 0usize);
    for seed in 0..200u64 {
        let (mut env, _) = GridEnv::reset(&cfg, seed).map_err(|e| e.to_string())?;
        let (fa, fb) = (footprint(env.subgoals()[0], g), footprint(env.subgoals()[1], g));
        if fa.iter().any(|p| fb.contains(p)) {
            continue;
        }
        let mut active = Vec::new();
        while !env.is_done() {
            active.push(env.active());
            env.step(scripted_action(&env));
        }
        let leg1 = active.iter().filter(|&&a| a == 0).count();
        let leg2 = active.len() - leg1;
        if !env.is_success() || leg1 < 2 || leg2 < 2 || leg1.abs_diff(leg2) > 1 {
            continue;
        }
        let heatmaps = active
            .iter()
            .map(|&a| {
                let planted = if a == 0 { &fa } else { &fb };
                let values = (0..n)
                    .map(|p| {
                        if planted.contains(&p) {
                            1.0
                        } else {
                            rng.random_range(0.0..0.1)
                        }
                    })
                    .collect();
                Heatmap::new(values, (g, g))
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        let metrics = |f: &[usize]| {
            let mask = RegionMask::new(f.iter().copied(), RegionKind::Custom, n).map_err(|e| e.to_string())?;
            let m = phase_metrics(&heatmaps, &vec![mask; heatmaps.len()]).map_err(|e| e.to_string())?;
            Ok::<_, String>((m.phase1.iou90, m.phase2.ok_or("no phase 2")?.iou90))
        };
        let (a1, a2) = metrics(&fa)?;
        let (b1, b2) = metrics(&fb)?;
        a_gap += a1 - a2;
        b_gap += b2 - b1;
        used += 1;
    }
    ensure!(used > 0, "no balanced two-subgoal rollouts");
    let (a_gap, b_gap) = (a_gap / used as f64, b_gap / used as f64);
    ensure!(a_gap >= 0.2, "subgoal A phase-1 minus phase-2 IoU {a_gap:.3}");
    ensure!(b_gap >= 0.2, "subgoal B phase-2 minus phase-1 IoU {b_gap:.3}");
    Ok(format!("{used} rollouts, A gap {a_gap:.3}, B gap {b_gap:.3}"))
}

fn c10_perturbation(runs: &Runs) -> Check {
    let t = suite_sr(&runs.a.join("early_fusion/perturb.json"))?;
    let (bg_replace, bg_mosaic, target_mosaic) = (
        sr(&t, "mask:target:background_replace")?,
        sr(&t, "mask:background:mosaic:B=2")?,
        sr(&t, "mask:target:mosaic:B=2")?,
    );
    ensure!(bg_replace <= 30.0, "target background_replace {bg_replace}");
    ensure!(bg_mosaic >= 95.0, "background mosaic {bg_mosaic}");
    ensure!(
        target_mosaic >= bg_replace,
        "target mosaic {target_mosaic} below background_replace {bg_replace}"
    );
    let shortcut = read_json(&runs.a.join("shortcut/edit.json"))?;
    let unchanged = rate(&shortcut, "unchanged_rate")?;
    ensure!(unchanged == 100.0, "shortcut unchanged rate {unchanged}");
    let model = build_policy(ModelKind::Shortcut, ModelConfig::default()).map_err(|e| e.to_string())?;
    let vocab = model.vocabulary();
    let edit = InstructionEdit::parse(&["edit:red->green", "edit:green->blue", "edit:blue->red"], &vocab)
        .map_err(|e| e.to_string())?;
    for seed in 0..20 {
        let (env, obs) = GridEnv::reset(&EnvConfig::default(), seed).map_err(|e| e.to_string())?;
        let instruction = env.instruction();
        let edited = Instruction::new(edit_instruction(&instruction.tokens, &edit), instruction.active);
        let a = model.forward(&obs, &instruction, None).map_err(|e| e.to_string())?;
        let b = model.forward(&obs, &edited, None).map_err(|e| e.to_string())?;
        let bits = |t: &ForwardTrace| t.logits.map(f64::to_bits);
        ensure!(
            a.action == b.action && bits(&a) == bits(&b),
            "shortcut seed {seed}: edit changed the action logits"
        );
    }
    let early = read_json(&runs.a.join("early_fusion/edit.json"))?;
    let retarget = rate(&early, "retarget_rate")?;
    ensure!(retarget >= 95.0, "early-fusion retarget rate {retarget}");
    Ok(format!(
        "target bg_replace {bg_replace}, target mosaic {target_mosaic}, background mosaic {bg_mosaic}, shortcut logits bit-invariant, unchanged {unchanged}%, retarget {retarget}%"
    ))
}

fn files(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).map_err(|e| e.to_string())? {
            let p = e.map_err(|e| e.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_path_buf();
                out.insert(rel, fs::read(&p).map_err(|e| e.to_string())?);
            }
        }
    }
    Ok(out)
}

fn exit_code(config: &Value, dir: &Path, name: &str, cmd: &str) -> Result<i32, String> {
    let path = dir.join(format!("{name}.json"));
    let text = match config {
        Value::String(s) => s.clone(),
        v => v.to_string(),
    };
    fs::write(&path, text).map_err(|e| e.to_string())?;
    vtrace(&[cmd, "--config", path.to_str().unwrap(), "--episodes", "1"])
        .status
        .code()
        .ok_or("killed".into())
}

fn c11_determinism(runs: &Runs) -> Check {
    let mut compared = 0;
    for (demo, _) in DEMOS {
        let (a, b) = (files(&runs.a.join(demo))?, files(&runs.b.join(demo))?);
        ensure!(
            a.len() == b.len() && a.keys().eq(b.keys()),
            "{demo}: output sets differ"
        );
        for (p, bytes) in &a {
            ensure!(b[p] == *bytes, "{demo}/{}: workers 1 and 8 differ", p.display());
        }
        compared += a.len();
    }

    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let base = |probes: Value, out: &str| json!({"model": {"kind": "early_fusion"}, "output_dir": dir.join(out), "probes": probes});
    for (name, constant) in [("const", true), ("varied", false)] {
        let layer = View::ALL
            .into_iter()
            .map(|v| {
                let data = Array2::from_shape_fn((4, 3), |(i, j)| if constant { 1.0 } else { (i * 3 + j) as f64 });
                (v, RepresentationMatrix::new(data, name, 0, v).unwrap())
            })
            .collect();
        let acts = CheckpointActivations::from_matrices(name, "probe", 1, vec![layer]).map_err(|e| e.to_string())?;
        write_activations(&dir.join(name), &acts).map_err(|e| e.to_string())?;
    }
    fs::write(dir.join("blocked"), "not a directory").map_err(|e| e.to_string())?;
    let cases = [
        ("bad_json", json!("{ \"model\": "), "knockout", 2),
        (
            "unknown_spec",
            base(json!([{"type": "knockout", "specs": ["gen:no_pixels@all"]}]), "o"),
            "knockout",
            2,
        ),
        (
            "unknown_field",
            json!({"model": {"kind": "early_fusion"}, "output_dir": "o", "probes": [], "extra": 1}),
            "knockout",
            2,
        ),
        (
            "missing_dump",
            base(
                json!([{"type": "cka", "source": {"kind": "dumps", "target": "varied"}}]),
                "o",
            ),
            "cka",
            2,
        ),
        (
            "unwritable",
            base(json!([{"type": "knockout", "specs": []}]), "blocked"),
            "knockout",
            4,
        ),
        (
            "degenerate",
            base(
                json!([{"type": "cka", "source": {"kind": "dumps", "anchor": "const", "target": "varied"}}]),
                "o",
            ),
            "cka",
            3,
        ),
    ];
    for (name, cfg, cmd, want) in &cases {
        let got = exit_code(cfg, dir, name, cmd)?;
        ensure!(got == *want, "{name}: exit {got}, expected {want}");
    }
    Ok(format!(
        "{compared} demo files byte-identical across runs (workers 1 vs 8), {} exit codes",
        cases.len()
    ))
}

fn run_check(f: impl FnOnce() -> Check) -> Check {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() -> ExitCode {
    let start = Instant::now();
    let runs = demo_runs();
    let on_runs = |f: fn(&Runs) -> Check| -> Check {
        match &runs {
            Ok(r) => run_check(|| f(r)),
            Err(e) => Err(format!("demo runs failed: {e}")),
        }
    };
    let results: Vec<(&str, Check)> = vec![
        ("linear CKA properties", run_check(c1_cka_properties)),
        ("checkpoint drift", on_runs(c2_drift)),
        ("knockout mask exactness", run_check(c3_mask_exactness)),
        ("window protocol", run_check(c4_windows)),
        ("early-fusion knockout table", on_runs(c5_early_fusion)),
        ("late-fusion knockout table", on_runs(c6_late_fusion)),
        ("layer sweep", on_runs(c7_sweep)),
        ("localization metrics", run_check(c8_localization)),
        ("phase semantics", run_check(c9_phase_semantics)),
        ("perturbation and edit ordering", on_runs(c10_perturbation)),
        ("determinism and exit codes", on_runs(c11_determinism)),
    ];
    let mut failed = 0;
    for (i, (name, r)) in results.iter().enumerate() {
        match r {
            Ok(detail) => println!("criterion {:>2} PASS  {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {name}: {detail}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1?}",
        results.len() - failed,
        start.elapsed()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
