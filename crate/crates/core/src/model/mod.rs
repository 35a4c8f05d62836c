// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic multimodal mini-transformer with hand-constructed weights.
//!
//! Three policies share one forward pass and differ only in their weights:
//!
//! - **early fusion** (bidirectional): at the fusion layer every vision
//!   token looks up the active instruction color and marks itself as matched;
//!   at the routing layer the action slot reads the matched patch's position
//!   and the agent's position. Generation-time text removal is harmless,
//!   generation-time image removal at the routing layer is fatal.
//! - **late fusion** (causal): instruction tokens locate their color in the
//!   image during prefill and cache its position; the action token reads the
//!   target position from the instruction and the agent position from the
//!   image, with a partial fallback cached in the `In:` token by a
//!   sliding-window head.
//! - **shortcut**: ignores the instruction and walks to a memorized patch.
//!
//! Every head also carries an attention sink on `<bos>` so that queries
//! without a designated target read (almost) nothing.

mod construct;
pub mod layout;
pub mod vocab;

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VtraceError};
use crate::intervention::{masked_softmax_in_place, AttentionBase, InterventionHandle};
use crate::observation::{Observation, Rgb, AGENT, FLOOR, OBJECT_COLORS};

pub use layout::{SequenceLayout, Slot};
pub use vocab::{Instruction, Token, Vocabulary, COLOR_NAMES, STRUCTURAL};

/// Maximum RGB distance at which a patch counts as a palette color.
pub const PALETTE_TOLERANCE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    EarlyFusion,
    LateFusion,
    Shortcut,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::EarlyFusion => "early_fusion",
            ModelKind::LateFusion => "late_fusion",
            ModelKind::Shortcut => "shortcut",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub patch_grid: (usize, usize),
    pub color_vocab: usize,
    pub regime: AttentionBase,
    pub seed: u64,
    /// Layer where vision and language first exchange information.
    pub fusion_layer: usize,
    /// Layer carrying the only vision-to-action pathway.
    pub routing_layer: usize,
    pub action_slots: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            heads: 2,
            hidden_dim: 32,
            patch_grid: (8, 8),
            color_vocab: 6,
            regime: AttentionBase::Bidirectional,
            seed: 0,
            fusion_layer: 1,
            routing_layer: 4,
            action_slots: 1,
        }
    }
}

impl ModelConfig {
    pub fn causal() -> Self {
        Self {
            regime: AttentionBase::Causal,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid.0 * self.patch_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VtraceError::InvalidConfig(m));
        Vocabulary::new(self.color_vocab)?;
        if self.layers < 3 {
            return bad(format!("need at least 3 layers, got {}", self.layers));
        }
        if self.heads < 2 {
            return bad(format!("need at least 2 heads, got {}", self.heads));
        }
        if self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            ));
        }
        let needed = construct::Channels::new(self.color_vocab).total();
        if self.hidden_dim < needed {
            return bad(format!(
                "hidden_dim {} too small: {} colors need {needed} channels",
                self.hidden_dim, self.color_vocab
            ));
        }
        if self.head_dim() < self.color_vocab + 1 {
            return bad(format!(
                "head_dim {} too small for {} colors",
                self.head_dim(),
                self.color_vocab
            ));
        }
        if self.patch_grid.0 < 2 || self.patch_grid.1 < 2 {
            return bad(format!("patch grid {:?} too small", self.patch_grid));
        }
        if self.fusion_layer >= self.routing_layer || self.routing_layer >= self.layers {
            return bad(format!(
                "need fusion_layer < routing_layer < layers, got {} / {} / {}",
                self.fusion_layer, self.routing_layer, self.layers
            ));
        }
        if self.action_slots == 0 {
            return bad("need at least one action slot".into());
        }
        if self.regime == AttentionBase::Causal && self.action_slots != 1 {
            return bad("causal layouts decode exactly one action token".into());
        }
        Ok(())
    }
}

/// Discrete move on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Stay];

    /// `(drow, dcol)` of the move.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (-1, 0),
            Action::Down => (1, 0),
            Action::Left => (0, -1),
            Action::Right => (0, 1),
            Action::Stay => (0, 0),
        }
    }
}

/// Greedy move from `agent` toward `target`: the axis with the larger gap
/// first, vertical on ties, `Stay` when already there. The reference models'
/// readout implements exactly this rule.
pub fn greedy_action(agent: (usize, usize), target: (usize, usize)) -> Action {
    let dr = target.0 as isize - agent.0 as isize;
    let dc = target.1 as isize - agent.1 as isize;
    if dr == 0 && dc == 0 {
        Action::Stay
    } else if dr.abs() >= dc.abs() {
        if dr < 0 {
            Action::Up
        } else {
            Action::Down
        }
    } else if dc < 0 {
        Action::Left
    } else {
        Action::Right
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub weights: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub action: Action,
    pub logits: [f64; 5],
    /// Decoded `[target presence, target row, target col, agent presence,
    /// agent row, agent col]` read from the first action slot.
    pub readout: [f64; 6],
    /// Token states after each layer.
    pub hidden: Vec<Array2<f64>>,
    pub attention: Vec<AttentionRecord>,
}

impl ForwardTrace {
    pub fn record(&self, layer: usize, head: usize) -> Option<&AttentionRecord> {
        self.attention.iter().find(|r| r.layer == layer && r.head == head)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HeadWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
    /// Sliding-window size (0 = unrestricted). The first sequence position
    /// stays visible regardless.
    pub window: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    /// 1.0 on channels hard-thresholded at 0.5 after the layer.
    pub threshold: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Weights {
    /// Palette one-hot (object colors, then agent) to hidden.
    pub patch: Array2<f64>,
    pub position: Array2<f64>,
    pub token: Array2<f64>,
    /// Extra embedding added to the active instruction token, by color.
    pub active: Array2<f64>,
    pub action: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub readout: Array2<f64>,
}

/// Weight groups that can be perturbed independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightGroup {
    /// Patch and position embeddings.
    Vision,
    /// Color-word and active-flag embeddings.
    Language,
}

/// Palette class of one patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchClass {
    Floor,
    Agent,
    Color(usize),
    Unknown,
}

fn dist(a: Rgb, b: Rgb) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Nearest palette entry within [`PALETTE_TOLERANCE`].
pub fn classify_patch(rgb: Rgb, color_vocab: usize) -> PatchClass {
    let mut best = (PatchClass::Unknown, PALETTE_TOLERANCE);
    let candidates = [(PatchClass::Floor, FLOOR), (PatchClass::Agent, AGENT)]
        .into_iter()
        .chain(
            OBJECT_COLORS
                .iter()
                .take(color_vocab)
                .enumerate()
                .map(|(c, &rgb)| (PatchClass::Color(c), rgb)),
        );
    for (class, reference) in candidates {
        let d = dist(rgb, reference);
        if d < best.1 {
            best = (class, d);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    kind: ModelKind,
    weights: Weights,
    memorized_patch: Option<usize>,
    action_blind_to_language: bool,
}

pub fn build_early_fusion_policy(config: ModelConfig) -> Result<Model> {
    construct::early_fusion(config)
}

pub fn build_late_fusion_policy(config: ModelConfig) -> Result<Model> {
    construct::late_fusion(config)
}

pub fn build_shortcut_policy(config: ModelConfig) -> Result<Model> {
    construct::shortcut(config)
}

/// Builds the policy for `kind`, adjusting the attention regime to the one
/// the construction needs.
pub fn build_policy(kind: ModelKind, mut config: ModelConfig) -> Result<Model> {
    match kind {
        ModelKind::EarlyFusion => {
            config.regime = AttentionBase::Bidirectional;
            build_early_fusion_policy(config)
        }
        ModelKind::LateFusion => {
            config.regime = AttentionBase::Causal;
            config.action_slots = 1;
            build_late_fusion_policy(config)
        }
        ModelKind::Shortcut => build_shortcut_policy(config),
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn regime(&self) -> AttentionBase {
        self.config.regime
    }

    pub fn num_layers(&self) -> usize {
        self.config.layers
    }

    pub fn fusion_layer(&self) -> usize {
        self.config.fusion_layer
    }

    pub fn routing_layer(&self) -> usize {
        self.config.routing_layer
    }

    pub fn memorized_patch(&self) -> Option<usize> {
        self.memorized_patch
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.config.color_vocab).expect("validated at construction")
    }

    pub fn layout(&self, instruction_len: usize) -> Result<SequenceLayout> {
        SequenceLayout::for_regime(
            self.config.regime,
            self.config.patch_grid,
            instruction_len,
            self.config.action_slots,
        )
    }

    fn embed(&self, layout: &SequenceLayout, obs: &Observation, instruction: &Instruction) -> Result<Array2<f64>> {
        let vocab = self.vocabulary();
        let w = &self.weights;
        let mut x = Array2::<f64>::zeros((layout.sequence_len(), self.config.hidden_dim));
        for (i, slot) in layout.slots().iter().enumerate() {
            let mut row = x.row_mut(i);
            match *slot {
                Slot::Patch(p) => {
                    row += &w.position.row(p);
                    match classify_patch(obs.patch_mean(p), self.config.color_vocab) {
                        PatchClass::Color(c) => row += &w.patch.row(c),
                        PatchClass::Agent => row += &w.patch.row(self.config.color_vocab),
                        PatchClass::Floor | PatchClass::Unknown => {}
                    }
                }
                Slot::Instruction(k) => {
                    let token = instruction.tokens[k];
                    row += &w.token.row(vocab.index(token)?);
                    if k == instruction.active {
                        if let Token::Color(c) = token {
                            row += &w.active.row(c as usize);
                        }
                    }
                }
                Slot::Structural(t) => row += &w.token.row(vocab.index(t)?),
                Slot::Action(_) => row += &w.action.row(0),
            }
        }
        Ok(x)
    }

    /// Runs the full sequence (context plus action slots) under `handle`.
    ///
    /// The causal regime's single pass is equivalent to prefilling the
    /// context and then decoding the action token against the cache, since
    /// no earlier position can see a later one.
    pub fn forward(
        &self,
        obs: &Observation,
        instruction: &Instruction,
        handle: Option<&InterventionHandle>,
    ) -> Result<ForwardTrace> {
        if obs.patch_grid() != self.config.patch_grid {
            return Err(VtraceError::ShapeMismatch(format!(
                "observation grid {:?}, model expects {:?}",
                obs.patch_grid(),
                self.config.patch_grid
            )));
        }
        let vocab = self.vocabulary();
        for &t in &instruction.tokens {
            vocab.check(t)?;
            if t.is_structural() {
                return Err(VtraceError::UnknownToken(format!("{t} is not an instruction word")));
            }
        }
        let layout = self.layout(instruction.tokens.len())?;
        let n = layout.sequence_len();
        if let Some(h) = handle {
            if h.sequence_len() != n || h.num_layers() != self.config.layers {
                return Err(VtraceError::ShapeMismatch(format!(
                    "handle covers {} tokens x {} layers, input needs {n} x {}",
                    h.sequence_len(),
                    h.num_layers(),
                    self.config.layers
                )));
            }
            if h.mask(0).base != self.config.regime {
                return Err(VtraceError::IncompatibleIntervention(
                    "handle was resolved for a different attention regime".into(),
                ));
            }
        }

        let partition = &layout.partition;
        let causal = self.config.regime == AttentionBase::Causal;
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();

        let mut x = self.embed(&layout, obs, instruction)?;
        let mut hidden = Vec::with_capacity(self.config.layers);
        let mut attention = Vec::with_capacity(self.config.layers * self.config.heads);

        for (l, layer) in self.weights.layers.iter().enumerate() {
            let mut blocked = match handle {
                Some(h) => h.mask(l).as_slice().to_vec(),
                None => (0..n * n).map(|ij| causal && ij % n > ij / n).collect(),
            };
            if self.action_blind_to_language {
                for &a in partition.action() {
                    for &t in partition.language() {
                        blocked[a * n + t] = true;
                    }
                }
            }
            let mut update = Array2::<f64>::zeros(x.dim());
            for (h, head) in layer.heads.iter().enumerate() {
                // Head dimensions that cannot contribute are skipped.
                let qk = live_columns(head.query.view(), head.key.view());
                let vo = live_columns(head.value.view(), head.output.t());
                let q = x.dot(&head.query.select(Axis(1), &qk));
                let k = x.dot(&head.key.select(Axis(1), &qk));
                let mut w = q.dot(&k.t()) * scale;
                let window = head.window;
                masked_softmax_in_place(&mut w, |i, j| {
                    blocked[i * n + j] || (window > 0 && j != 0 && i.abs_diff(j) >= window)
                })
                .map_err(|row| VtraceError::FullyBlockedQuery { layer: l, row })?;
                if !vo.is_empty() {
                    let v = x.dot(&head.value.select(Axis(1), &vo));
                    update += &w.dot(&v).dot(&head.output.select(Axis(0), &vo));
                }
                attention.push(AttentionRecord {
                    layer: l,
                    head: h,
                    weights: w,
                });
            }
            x += &update;
            for (c, &t) in layer.threshold.iter().enumerate() {
                if t != 0.0 {
                    x.column_mut(c).mapv_inplace(|v| if v > 0.5 { 1.0 } else { 0.0 });
                }
            }
            hidden.push(x.clone());
        }

        let slot = layout.action_span()[0];
        let r = x.row(slot).dot(&self.weights.readout);
        let readout = [r[0], r[1], r[2], r[3], r[4], r[5]];
        let logits = decode_logits(readout);
        Ok(ForwardTrace {
            action: argmax_action(&logits),
            logits,
            readout,
            hidden,
            attention,
        })
    }

    /// Copy with seeded Gaussian noise of standard deviation `scale` added to
    /// the given weight group.
    pub fn with_noise(&self, group: WeightGroup, scale: f64, seed: u64) -> Model {
        let mut out = self.clone();
        if scale == 0.0 {
            return out;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut jitter = |m: &mut Array2<f64>, rows: std::ops::Range<usize>| {
            for r in rows {
                for v in m.row_mut(r).iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v += scale * z;
                }
            }
        };
        let w = &mut out.weights;
        match group {
            WeightGroup::Vision => {
                let (pr, xr) = (w.patch.nrows(), w.position.nrows());
                jitter(&mut w.patch, 0..pr);
                jitter(&mut w.position, 0..xr);
            }
            WeightGroup::Language => {
                let colors = self.config.color_vocab;
                let ar = w.active.nrows();
                jitter(&mut w.token, 0..colors);
                jitter(&mut w.active, 0..ar);
            }
        }
        out
    }

    /// Named weight tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Option<usize>, Array2<f64>)> {
        let w = &self.weights;
        let mut out = vec![
            ("embed.patch".to_string(), None, w.patch.clone()),
            ("embed.position".to_string(), None, w.position.clone()),
            ("embed.token".to_string(), None, w.token.clone()),
            ("embed.active".to_string(), None, w.active.clone()),
            ("embed.action".to_string(), None, w.action.clone()),
            ("readout".to_string(), None, w.readout.clone()),
        ];
        for (l, layer) in w.layers.iter().enumerate() {
            for (h, head) in layer.heads.iter().enumerate() {
                for (part, m) in [
                    ("query", &head.query),
                    ("key", &head.key),
                    ("value", &head.value),
                    ("output", &head.output),
                ] {
                    out.push((format!("layer{l}.head{h}.{part}"), Some(l), m.clone()));
                }
                out.push((
                    format!("layer{l}.head{h}.window"),
                    Some(l),
                    Array2::from_elem((1, 1), head.window as f64),
                ));
            }
            out.push((
                format!("layer{l}.threshold"),
                Some(l),
                layer.threshold.clone().insert_axis(Axis(0)),
            ));
        }
        out
    }

    /// Rebuilds a model from [`Model::tensors`] output plus its metadata.
    pub fn from_tensors(
        config: ModelConfig,
        kind: ModelKind,
        memorized_patch: Option<usize>,
        action_blind_to_language: bool,
        mut tensors: BTreeMap<String, Array2<f64>>,
    ) -> Result<Model> {
        config.validate()?;
        let mut take = |name: &str, shape: (usize, usize)| -> Result<Array2<f64>> {
            let m = tensors
                .remove(name)
                .ok_or_else(|| VtraceError::ShapeMismatch(format!("missing tensor {name}")))?;
            if m.dim() != shape {
                return Err(VtraceError::ShapeMismatch(format!(
                    "tensor {name} is {:?}, expected {shape:?}",
                    m.dim()
                )));
            }
            Ok(m)
        };
        let d = config.hidden_dim;
        let dh = config.head_dim();
        let vocab = Vocabulary::new(config.color_vocab)?;
        let patch = take("embed.patch", (config.color_vocab + 1, d))?;
        let position = take("embed.position", (config.num_patches(), d))?;
        let token = take("embed.token", (vocab.size(), d))?;
        let active = take("embed.active", (config.color_vocab, d))?;
        let action = take("embed.action", (1, d))?;
        let readout = take("readout", (d, 6))?;
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let mut heads = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let p = |part: &str| format!("layer{l}.head{h}.{part}");
                let window = take(&p("window"), (1, 1))?[[0, 0]];
                heads.push(HeadWeights {
                    query: take(&p("query"), (d, dh))?,
                    key: take(&p("key"), (d, dh))?,
                    value: take(&p("value"), (d, dh))?,
                    output: take(&p("output"), (dh, d))?,
                    window: window as usize,
                });
            }
            let threshold = take(&format!("layer{l}.threshold"), (1, d))?.row(0).to_owned();
            layers.push(LayerWeights { heads, threshold });
        }
        Ok(Model {
            config,
            kind,
            weights: Weights {
                patch,
                position,
                token,
                active,
                action,
                layers,
                readout,
            },
            memorized_patch,
            action_blind_to_language,
        })
    }

    pub fn action_blind_to_language(&self) -> bool {
        self.action_blind_to_language
    }
}

/// Columns where both `a` and `b` have a nonzero entry.
fn live_columns(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Vec<usize> {
    (0..a.ncols())
        .filter(|&c| a.column(c).iter().any(|v| *v != 0.0) && b.column(c).iter().any(|v| *v != 0.0))
        .collect()
}

/// Move logits from the readout: vertical moves carry a +0.25 bias so ties
/// go vertical, `Stay` sits at 0.5, and a missing target or agent signal
/// (presence below 0.5) leaves only `Stay`.
fn decode_logits(r: [f64; 6]) -> [f64; 5] {
    let (tp, ap) = (r[0], r[3]);
    if tp <= 0.5 || ap <= 0.5 {
        return [0.0, 0.0, 0.0, 0.0, 0.5];
    }
    let dr = r[1] / tp - r[4] / ap;
    let dc = r[2] / tp - r[5] / ap;
    [-dr + 0.25, dr + 0.25, -dc, dc, 0.5]
}

fn argmax_action(logits: &[f64; 5]) -> Action {
    let mut best = 0;
    for i in 1..5 {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    Action::ALL[best]
}
