// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention knockout over role-partitioned token sequences.
//!
//! A [`KnockoutSpec`] names which query rows lose access to which key
//! columns (a stage plus a source-blocking rule) and on which layers.
//! [`resolve_spec`] turns it into an [`InterventionHandle`]: one
//! [`AttentionMask`] per layer, already combined with the model's base
//! (bidirectional or causal) mask.
//!
//! Blocking restricts the softmax support instead of adding a large negative
//! constant, so blocked weights come out exactly zero.
//!
//! Stage semantics:
//!
//! | stage        | query rows affected         |
//! |--------------|-----------------------------|
//! | `prefill`    | vision, language, structural |
//! | `gen`        | action                      |
//! | `global`     | all rows                    |

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtraceError};

/// Allowed centered-window widths.
pub const WINDOW_WIDTHS: [usize; 4] = [1, 3, 5, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionBase {
    Bidirectional,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    Vision,
    Language,
    Structural,
    Action,
}

/// Disjoint V/L/S/A index sets covering `[0, sequence_len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenPartition {
    vision: Vec<usize>,
    language: Vec<usize>,
    structural: Vec<usize>,
    action: Vec<usize>,
    /// Subset of `language` holding the task instruction.
    instruction: Vec<usize>,
    roles: Vec<TokenRole>,
}

impl TokenPartition {
    pub fn new(
        vision: Vec<usize>,
        language: Vec<usize>,
        structural: Vec<usize>,
        action: Vec<usize>,
        sequence_len: usize,
    ) -> Result<Self> {
        let instruction = language.clone();
        Self::with_instruction(vision, language, structural, action, instruction, sequence_len)
    }

    pub fn with_instruction(
        mut vision: Vec<usize>,
        mut language: Vec<usize>,
        mut structural: Vec<usize>,
        mut action: Vec<usize>,
        mut instruction: Vec<usize>,
        sequence_len: usize,
    ) -> Result<Self> {
        let mut roles: Vec<Option<TokenRole>> = vec![None; sequence_len];
        for (set, role) in [
            (&vision, TokenRole::Vision),
            (&language, TokenRole::Language),
            (&structural, TokenRole::Structural),
            (&action, TokenRole::Action),
        ] {
            for &i in set {
                let slot = roles.get_mut(i).ok_or_else(|| {
                    VtraceError::InvalidPartition(format!("index {i} outside sequence of length {sequence_len}"))
                })?;
                if let Some(prev) = slot {
                    return Err(VtraceError::InvalidPartition(format!(
                        "index {i} is both {prev:?} and {role:?}"
                    )));
                }
                *slot = Some(role);
            }
        }
        if let Some(i) = roles.iter().position(Option::is_none) {
            return Err(VtraceError::InvalidPartition(format!("index {i} has no role")));
        }
        for v in [
            &mut vision,
            &mut language,
            &mut structural,
            &mut action,
            &mut instruction,
        ] {
            v.sort_unstable();
        }
        if instruction.iter().any(|i| language.binary_search(i).is_err()) {
            return Err(VtraceError::InvalidPartition(
                "instruction tokens must be a subset of the language span".into(),
            ));
        }
        Ok(Self {
            vision,
            language,
            structural,
            action,
            instruction,
            roles: roles.into_iter().map(|r| r.expect("checked above")).collect(),
        })
    }

    pub fn sequence_len(&self) -> usize {
        self.roles.len()
    }

    pub fn role(&self, index: usize) -> TokenRole {
        self.roles[index]
    }

    pub fn vision(&self) -> &[usize] {
        &self.vision
    }

    pub fn language(&self) -> &[usize] {
        &self.language
    }

    pub fn structural(&self) -> &[usize] {
        &self.structural
    }

    pub fn action(&self) -> &[usize] {
        &self.action
    }

    pub fn instruction(&self) -> &[usize] {
        &self.instruction
    }

    fn is_instruction(&self, index: usize) -> bool {
        self.instruction.binary_search(&index).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    #[serde(rename = "gen", alias = "generation")]
    Generation,
    Global,
}

impl Stage {
    fn affects(self, role: TokenRole) -> bool {
        match self {
            Stage::Prefill => role != TokenRole::Action,
            Stage::Generation => role == TokenRole::Action,
            Stage::Global => true,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prefill => "prefill",
            Stage::Generation => "gen",
            Stage::Global => "global",
        }
    }
}

impl FromStr for Stage {
    type Err = VtraceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prefill" => Ok(Stage::Prefill),
            "gen" => Ok(Stage::Generation),
            "global" => Ok(Stage::Global),
            _ => Err(VtraceError::parse(s, "unknown stage (prefill, gen, global)")),
        }
    }
}

/// Source-blocking rule: which key columns an affected query row loses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    NoImage,
    NoText,
    /// Vision and language stop attending to each other; other edges stay.
    NoVl,
    KeepStructuralOnly,
    DropStructural,
    DropInstruction,
}

impl Rule {
    pub const ALL: [Rule; 6] = [
        Rule::NoImage,
        Rule::NoText,
        Rule::NoVl,
        Rule::KeepStructuralOnly,
        Rule::DropStructural,
        Rule::DropInstruction,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Rule::NoImage => "no_image",
            Rule::NoText => "no_text",
            Rule::NoVl => "no_vl",
            Rule::KeepStructuralOnly => "keep_structural_only",
            Rule::DropStructural => "drop_structural",
            Rule::DropInstruction => "drop_instruction",
        }
    }

    fn blocks(self, partition: &TokenPartition, query: usize, key: usize) -> bool {
        let q = partition.role(query);
        let k = partition.role(key);
        match self {
            Rule::NoImage => k == TokenRole::Vision,
            Rule::NoText => k == TokenRole::Language,
            Rule::NoVl => matches!(
                (q, k),
                (TokenRole::Vision, TokenRole::Language) | (TokenRole::Language, TokenRole::Vision)
            ),
            Rule::KeepStructuralOnly => matches!(k, TokenRole::Vision | TokenRole::Language),
            Rule::DropStructural => k == TokenRole::Structural,
            Rule::DropInstruction => partition.is_instruction(key),
        }
    }
}

impl FromStr for Rule {
    type Err = VtraceError;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| VtraceError::parse(s, "unknown knockout rule"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Knockout {
    Single(Stage, Rule),
    /// A prefill rule and a generation rule on the same layer set.
    Combo {
        prefill: Rule,
        generation: Rule,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSelector {
    All,
    Window { center: usize, width: usize },
}

/// Declarative intervention, serialized as e.g. `gen:no_image@window(14,7)`
/// or `prefill:no_vl+gen:no_text@all`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KnockoutSpec {
    pub knockout: Knockout,
    pub layers: LayerSelector,
}

impl KnockoutSpec {
    pub fn new(stage: Stage, rule: Rule, layers: LayerSelector) -> Result<Self> {
        let spec = Self {
            knockout: Knockout::Single(stage, rule),
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn combo(prefill: Rule, generation: Rule, layers: LayerSelector) -> Result<Self> {
        let spec = Self {
            knockout: Knockout::Combo { prefill, generation },
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if let LayerSelector::Window { width, .. } = self.layers {
            if !WINDOW_WIDTHS.contains(&width) {
                return Err(VtraceError::InvalidWidth(width));
            }
        }
        Ok(())
    }

    /// `(stage, rule)` pairs this spec applies, in application order.
    pub fn parts(&self) -> Vec<(Stage, Rule)> {
        match self.knockout {
            Knockout::Single(stage, rule) => vec![(stage, rule)],
            Knockout::Combo { prefill, generation } => {
                vec![(Stage::Prefill, prefill), (Stage::Generation, generation)]
            }
        }
    }

    pub fn key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for KnockoutSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.knockout {
            Knockout::Single(stage, rule) => write!(f, "{}:{}", stage.as_str(), rule.as_str())?,
            Knockout::Combo { prefill, generation } => {
                write!(f, "prefill:{}+gen:{}", prefill.as_str(), generation.as_str())?
            }
        }
        match self.layers {
            LayerSelector::All => write!(f, "@all"),
            LayerSelector::Window { center, width } => write!(f, "@window({center},{width})"),
        }
    }
}

fn parse_part(input: &str, part: &str) -> Result<(Stage, Rule)> {
    let (stage, rule) = part
        .split_once(':')
        .ok_or_else(|| VtraceError::parse(input, "expected <stage>:<rule>"))?;
    let stage = stage
        .parse::<Stage>()
        .map_err(|_| VtraceError::parse(input, format!("unknown stage '{stage}'")))?;
    let rule = rule
        .parse::<Rule>()
        .map_err(|_| VtraceError::parse(input, format!("unknown rule '{rule}'")))?;
    Ok((stage, rule))
}

fn parse_layers(input: &str, s: &str) -> Result<LayerSelector> {
    if s == "all" {
        return Ok(LayerSelector::All);
    }
    let inner = s
        .strip_prefix("window(")
        .and_then(|r| r.strip_suffix(')'))
        .ok_or_else(|| VtraceError::parse(input, "layer selector must be 'all' or 'window(c,w)'"))?;
    let (c, w) = inner
        .split_once(',')
        .ok_or_else(|| VtraceError::parse(input, "window needs two arguments"))?;
    let num = |t: &str| {
        if t.is_empty() || !t.bytes().all(|b| b.is_ascii_digit()) {
            return Err(VtraceError::parse(input, format!("'{t}' is not a layer index")));
        }
        t.parse::<usize>().map_err(|e| VtraceError::parse(input, e.to_string()))
    };
    Ok(LayerSelector::Window {
        center: num(c)?,
        width: num(w)?,
    })
}

impl FromStr for KnockoutSpec {
    type Err = VtraceError;

    fn from_str(s: &str) -> Result<Self> {
        let (body, layers) = s
            .rsplit_once('@')
            .ok_or_else(|| VtraceError::parse(s, "missing '@<layers>'"))?;
        let layers = parse_layers(s, layers)?;
        let spec = match body.split_once('+') {
            None => {
                let (stage, rule) = parse_part(s, body)?;
                KnockoutSpec {
                    knockout: Knockout::Single(stage, rule),
                    layers,
                }
            }
            Some((first, second)) => {
                let (s1, prefill) = parse_part(s, first)?;
                let (s2, generation) = parse_part(s, second)?;
                if s1 != Stage::Prefill || s2 != Stage::Generation {
                    return Err(VtraceError::parse(s, "combo must be 'prefill:<rule>+gen:<rule>'"));
                }
                KnockoutSpec {
                    knockout: Knockout::Combo { prefill, generation },
                    layers,
                }
            }
        };
        spec.validate().map_err(|e| VtraceError::parse(s, e.to_string()))?;
        Ok(spec)
    }
}

/// Layers `center - (width-1)/2 ..= center + (width-1)/2`, clamped to
/// `[0, total_layers)`.
pub fn window_layers(center: usize, width: usize, total_layers: usize) -> Result<Vec<usize>> {
    if center >= total_layers {
        return Err(VtraceError::LayerOutOfRange {
            layer: center,
            total: total_layers,
        });
    }
    if width % 2 == 0 {
        return Err(VtraceError::InvalidWidth(width));
    }
    let half = (width - 1) / 2;
    let lo = center.saturating_sub(half);
    let hi = (center + half).min(total_layers - 1);
    Ok((lo..=hi).collect())
}

/// Boolean query x key matrix; `true` removes the edge from the softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    pub layer: usize,
    pub base: AttentionBase,
    len: usize,
    blocked: Vec<bool>,
}

impl AttentionMask {
    /// The base mask alone: nothing blocked (bidirectional) or the causal
    /// upper triangle.
    pub fn base(layer: usize, len: usize, base: AttentionBase) -> Self {
        let mut blocked = vec![false; len * len];
        if base == AttentionBase::Causal {
            for i in 0..len {
                for j in (i + 1)..len {
                    blocked[i * len + j] = true;
                }
            }
        }
        Self {
            layer,
            base,
            len,
            blocked,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_blocked(&self, query: usize, key: usize) -> bool {
        self.blocked[query * self.len + key]
    }

    pub fn row(&self, query: usize) -> &[bool] {
        &self.blocked[query * self.len..(query + 1) * self.len]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.blocked
    }

    pub fn block(&mut self, query: usize, key: usize) {
        self.blocked[query * self.len + key] = true;
    }

    fn union_with(&mut self, other: &AttentionMask) {
        for (a, b) in self.blocked.iter_mut().zip(&other.blocked) {
            *a |= *b;
        }
    }

    /// First query row whose keys are all blocked, if any.
    pub fn fully_blocked_row(&self) -> Option<usize> {
        (0..self.len).find(|&i| self.row(i).iter().all(|&b| b))
    }

    fn check_rows(&self) -> Result<()> {
        match self.fully_blocked_row() {
            Some(row) => Err(VtraceError::FullyBlockedQuery { layer: self.layer, row }),
            None => Ok(()),
        }
    }
}

fn check_compatible(partition: &TokenPartition, stage: Stage, rule: Rule, base: AttentionBase) -> Result<()> {
    if rule == Rule::NoVl {
        if stage == Stage::Generation {
            return Err(VtraceError::IncompatibleIntervention(
                "no_vl blocks context formation and is not a generation-stage rule".into(),
            ));
        }
        if base == AttentionBase::Causal {
            return Err(VtraceError::IncompatibleIntervention(
                "no_vl requires bidirectional context formation; use prefill:no_image on causal models".into(),
            ));
        }
    }
    if stage != Stage::Prefill && partition.action().is_empty() {
        return Err(VtraceError::IncompatibleIntervention(format!(
            "{} rules need at least one action token",
            stage.as_str()
        )));
    }
    if rule == Rule::DropInstruction && partition.instruction().is_empty() {
        return Err(VtraceError::IncompatibleIntervention(
            "drop_instruction needs tagged instruction tokens".into(),
        ));
    }
    Ok(())
}

fn rule_mask(partition: &TokenPartition, stage: Stage, rule: Rule, base: AttentionBase, layer: usize) -> AttentionMask {
    let n = partition.sequence_len();
    let mut mask = AttentionMask::base(layer, n, base);
    for q in 0..n {
        if !stage.affects(partition.role(q)) {
            continue;
        }
        for k in 0..n {
            if rule.blocks(partition, q, k) {
                mask.block(q, k);
            }
        }
    }
    mask
}

/// Mask for one `(stage, rule)` pair on top of the base mask. Fails if any
/// query row ends up with no keys.
pub fn build_mask(
    partition: &TokenPartition,
    stage: Stage,
    rule: Rule,
    base: AttentionBase,
    layer: usize,
) -> Result<AttentionMask> {
    check_compatible(partition, stage, rule, base)?;
    let mask = rule_mask(partition, stage, rule, base, layer);
    mask.check_rows()?;
    Ok(mask)
}

/// Per-layer masks consumed by the model's forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InterventionHandle {
    spec: Option<KnockoutSpec>,
    masks: Vec<AttentionMask>,
}

impl InterventionHandle {
    /// Handle that applies only the base mask on every layer.
    pub fn identity(sequence_len: usize, total_layers: usize, base: AttentionBase) -> Self {
        Self {
            spec: None,
            masks: (0..total_layers)
                .map(|l| AttentionMask::base(l, sequence_len, base))
                .collect(),
        }
    }

    pub fn spec(&self) -> Option<&KnockoutSpec> {
        self.spec.as_ref()
    }

    pub fn num_layers(&self) -> usize {
        self.masks.len()
    }

    pub fn sequence_len(&self) -> usize {
        self.masks.first().map_or(0, AttentionMask::len)
    }

    pub fn mask(&self, layer: usize) -> &AttentionMask {
        &self.masks[layer]
    }

    /// Layers whose mask differs from the base mask.
    pub fn intervened_layers(&self) -> Vec<usize> {
        self.masks
            .iter()
            .filter(|m| *m != &AttentionMask::base(m.layer, m.len, m.base))
            .map(|m| m.layer)
            .collect()
    }
}

pub fn selected_layers(selector: LayerSelector, total_layers: usize) -> Result<Vec<usize>> {
    match selector {
        LayerSelector::All => Ok((0..total_layers).collect()),
        LayerSelector::Window { center, width } => window_layers(center, width, total_layers),
    }
}

/// Resolves a spec into per-layer masks for a concrete sequence and depth.
pub fn resolve_spec(
    spec: &KnockoutSpec,
    partition: &TokenPartition,
    total_layers: usize,
    base: AttentionBase,
) -> Result<InterventionHandle> {
    spec.validate()?;
    let parts = spec.parts();
    for &(stage, rule) in &parts {
        check_compatible(partition, stage, rule, base)?;
    }
    let selected = selected_layers(spec.layers, total_layers)?;
    let mut handle = InterventionHandle::identity(partition.sequence_len(), total_layers, base);
    handle.spec = Some(*spec);
    for layer in selected {
        let mut mask = AttentionMask::base(layer, partition.sequence_len(), base);
        for &(stage, rule) in &parts {
            mask.union_with(&rule_mask(partition, stage, rule, base, layer));
        }
        mask.check_rows()?;
        handle.masks[layer] = mask;
    }
    Ok(handle)
}

/// Row-wise softmax restricted to unblocked entries, in place. Blocked
/// entries become exactly 0. Returns the first fully blocked row on failure.
pub(crate) fn masked_softmax_in_place(
    logits: &mut Array2<f64>,
    blocked: impl Fn(usize, usize) -> bool,
) -> std::result::Result<(), usize> {
    let ncols = logits.ncols();
    let mut open = vec![false; ncols];
    for (i, mut row) in logits.rows_mut().into_iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for (j, o) in open.iter_mut().enumerate() {
            *o = !blocked(i, j);
            if *o && row[j] > max {
                max = row[j];
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(i);
        }
        // Rows repeat a handful of logit values; reuse the last exp.
        let (mut last_x, mut last_e) = (f64::NAN, 0.0);
        let mut sum = 0.0;
        for (v, &o) in row.iter_mut().zip(&open) {
            if o {
                let x = *v - max;
                if x != last_x {
                    last_x = x;
                    last_e = x.exp();
                }
                *v = last_e;
                sum += last_e;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(())
}

/// Attention weights for `logits` under `mask`.
pub fn apply_to_logits(mask: &AttentionMask, logits: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if logits.dim() != (mask.len(), mask.len()) {
        return Err(VtraceError::ShapeMismatch(format!(
            "logits are {:?}, mask is {}x{}",
            logits.dim(),
            mask.len(),
            mask.len()
        )));
    }
    let mut w = logits.to_owned();
    masked_softmax_in_place(&mut w, |i, j| mask.is_blocked(i, j))
        .map_err(|row| VtraceError::FullyBlockedQuery { layer: mask.layer, row })?;
    Ok(w)
}
