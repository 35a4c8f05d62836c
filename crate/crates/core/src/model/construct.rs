// SPDX-License-Identifier: MIT OR Apache-2.0

//! Analytic weight construction for the reference policies.

use ndarray::{Array1, Array2};

use super::vocab::{Token, Vocabulary, STRUCTURAL};
use super::{HeadWeights, LayerWeights, Model, ModelConfig, ModelKind, Weights};
use crate::error::{Result, VtraceError};
use crate::intervention::AttentionBase;
use crate::rng::SplitMix64;

/// Logit of a designated query-key match.
const MATCH_LOGIT: f64 = 40.0;
/// Logit of the late-fusion agent-position fallback held by `In:`.
const FALLBACK_LOGIT: f64 = 30.0;
/// Logit every query assigns to `<bos>`.
const SINK_LOGIT: f64 = 20.0;

/// Residual-stream channel map. `c` is the number of colors.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Channels {
    c: usize,
}

impl Channels {
    pub fn new(colors: usize) -> Self {
        Self { c: colors }
    }

    /// Vision-side color one-hot.
    fn vision_color(&self, k: usize) -> usize {
        k
    }

    fn agent(&self) -> usize {
        self.c
    }

    /// Color of the active instruction token.
    fn active_color(&self, k: usize) -> usize {
        self.c + 1 + k
    }

    fn language(&self) -> usize {
        2 * self.c + 1
    }

    fn constant(&self) -> usize {
        2 * self.c + 2
    }

    fn structural(&self, token: Token) -> usize {
        2 * self.c + 3 + token.structural_index().expect("structural token")
    }

    fn action(&self) -> usize {
        2 * self.c + 9
    }

    /// `(presence, row, col)` of a patch.
    fn position(&self) -> [usize; 3] {
        let b = 2 * self.c + 10;
        [b, b + 1, b + 2]
    }

    fn matched(&self) -> usize {
        2 * self.c + 13
    }

    fn target(&self) -> [usize; 3] {
        let b = 2 * self.c + 14;
        [b, b + 1, b + 2]
    }

    fn agent_location(&self) -> [usize; 3] {
        let b = 2 * self.c + 17;
        [b, b + 1, b + 2]
    }

    pub fn total(&self) -> usize {
        2 * self.c + 20
    }
}

struct HeadBuilder {
    head: HeadWeights,
    qk_dims: usize,
    value_dims: usize,
    gain: f64,
}

impl HeadBuilder {
    /// Idle head: every query attends `<bos>`, nothing is written.
    fn new(cfg: &ModelConfig, ch: &Channels) -> Self {
        let (d, dh) = (cfg.hidden_dim, cfg.head_dim());
        let mut b = Self {
            head: HeadWeights {
                query: Array2::zeros((d, dh)),
                key: Array2::zeros((d, dh)),
                value: Array2::zeros((d, dh)),
                output: Array2::zeros((dh, d)),
                window: 0,
            },
            qk_dims: 0,
            value_dims: 0,
            gain: (dh as f64).sqrt(),
        };
        b.attend(ch.constant(), &[(ch.structural(Token::Bos), SINK_LOGIT)]);
        b
    }

    /// A query carrying `query_channel` gets `logit * feature` toward every
    /// key carrying one of the listed channels.
    fn attend(&mut self, query_channel: usize, keys: &[(usize, f64)]) -> &mut Self {
        let dim = self.qk_dims;
        self.qk_dims += 1;
        self.head.query[[query_channel, dim]] = self.gain;
        for &(k, logit) in keys {
            self.head.key[[k, dim]] = logit;
        }
        self
    }

    /// Copies the sum of `sources` (read from attended keys) into `dest`.
    fn copy(&mut self, sources: &[usize], dest: usize) -> &mut Self {
        let dim = self.value_dims;
        self.value_dims += 1;
        for &s in sources {
            self.head.value[[s, dim]] = 1.0;
        }
        self.head.output[[dim, dest]] = 1.0;
        self
    }

    fn window(&mut self, size: usize) -> &mut Self {
        self.head.window = size;
        self
    }

    fn build(self) -> HeadWeights {
        self.head
    }
}

fn idle_layer(cfg: &ModelConfig, ch: &Channels) -> LayerWeights {
    LayerWeights {
        heads: (0..cfg.heads).map(|_| HeadBuilder::new(cfg, ch).build()).collect(),
        threshold: Array1::zeros(cfg.hidden_dim),
    }
}

fn embeddings(cfg: &ModelConfig, ch: &Channels) -> Result<Weights> {
    let d = cfg.hidden_dim;
    let c = cfg.color_vocab;
    let vocab = Vocabulary::new(c)?;
    let (rows, cols) = cfg.patch_grid;

    let mut patch = Array2::zeros((c + 1, d));
    for k in 0..c {
        patch[[k, ch.vision_color(k)]] = 1.0;
    }
    patch[[c, ch.agent()]] = 1.0;

    let mut position = Array2::zeros((rows * cols, d));
    let [pp, pr, pc] = ch.position();
    for p in 0..rows * cols {
        position[[p, ch.constant()]] = 1.0;
        position[[p, pp]] = 1.0;
        position[[p, pr]] = (p / cols) as f64;
        position[[p, pc]] = (p % cols) as f64;
    }

    let mut token = Array2::zeros((vocab.size(), d));
    for k in 0..c {
        let row = vocab.index(Token::Color(k as u8))?;
        token[[row, ch.language()]] = 1.0;
        token[[row, ch.constant()]] = 1.0;
    }
    for t in STRUCTURAL {
        let row = vocab.index(t)?;
        token[[row, ch.structural(t)]] = 1.0;
        token[[row, ch.constant()]] = 1.0;
    }

    let mut active = Array2::zeros((c, d));
    for k in 0..c {
        active[[k, ch.active_color(k)]] = 1.0;
    }

    let mut action = Array2::zeros((1, d));
    action[[0, ch.action()]] = 1.0;
    action[[0, ch.constant()]] = 1.0;

    let mut readout = Array2::zeros((d, 6));
    for (i, &src) in ch.target().iter().chain(ch.agent_location().iter()).enumerate() {
        readout[[src, i]] = 1.0;
    }

    Ok(Weights {
        patch,
        position,
        token,
        active,
        action,
        layers: (0..cfg.layers).map(|_| idle_layer(cfg, ch)).collect(),
        readout,
    })
}

/// Action slot reads the position of the key marked by `key_channel`.
fn route_head(cfg: &ModelConfig, ch: &Channels, key_channel: usize, dest: [usize; 3]) -> HeadWeights {
    let mut b = HeadBuilder::new(cfg, ch);
    b.attend(ch.action(), &[(key_channel, MATCH_LOGIT)]);
    for (src, dst) in ch.position().into_iter().zip(dest) {
        b.copy(&[src], dst);
    }
    b.build()
}

fn require_regime(cfg: &ModelConfig, regime: AttentionBase, what: &str) -> Result<()> {
    if cfg.regime != regime {
        return Err(VtraceError::InvalidConfig(format!(
            "{what} needs the {regime:?} attention regime"
        )));
    }
    Ok(())
}

pub(crate) fn early_fusion(cfg: ModelConfig) -> Result<Model> {
    cfg.validate()?;
    require_regime(&cfg, AttentionBase::Bidirectional, "early fusion")?;
    let ch = Channels::new(cfg.color_vocab);
    let mut w = embeddings(&cfg, &ch)?;

    // Fusion: each vision token finds the active instruction token of its
    // own color and copies its language flag into `matched`.
    let mut matcher = HeadBuilder::new(&cfg, &ch);
    for k in 0..cfg.color_vocab {
        matcher.attend(ch.vision_color(k), &[(ch.active_color(k), MATCH_LOGIT)]);
    }
    matcher.copy(&[ch.language()], ch.matched());
    let fusion = &mut w.layers[cfg.fusion_layer];
    fusion.heads[0] = matcher.build();
    fusion.threshold[ch.matched()] = 1.0;

    let routing = &mut w.layers[cfg.routing_layer];
    routing.heads[0] = route_head(&cfg, &ch, ch.matched(), ch.target());
    routing.heads[1] = route_head(&cfg, &ch, ch.agent(), ch.agent_location());

    Ok(Model {
        config: cfg,
        kind: ModelKind::EarlyFusion,
        weights: w,
        memorized_patch: None,
        action_blind_to_language: false,
    })
}

/// Rows of the image the `In:` token's sliding window still covers.
pub(crate) fn cached_rows(rows: usize) -> usize {
    rows - rows / 4
}

pub(crate) fn late_fusion(cfg: ModelConfig) -> Result<Model> {
    cfg.validate()?;
    require_regime(&cfg, AttentionBase::Causal, "late fusion")?;
    let ch = Channels::new(cfg.color_vocab);
    let mut w = embeddings(&cfg, &ch)?;
    let (rows, cols) = cfg.patch_grid;

    // Prefill: the active instruction token locates its color in the image
    // and caches the patch position.
    let mut locate = HeadBuilder::new(&cfg, &ch);
    for k in 0..cfg.color_vocab {
        locate.attend(ch.active_color(k), &[(ch.vision_color(k), MATCH_LOGIT)]);
    }
    for (src, dst) in ch.position().into_iter().zip(ch.target()) {
        locate.copy(&[src], dst);
    }

    // Prefill: `In:` caches the agent position, but its window only reaches
    // back over the last `cached_rows` rows of patches.
    let mut cache = HeadBuilder::new(&cfg, &ch);
    cache
        .attend(ch.structural(Token::In), &[(ch.agent(), MATCH_LOGIT)])
        .window(cached_rows(rows) * cols + 1);
    for (src, dst) in ch.position().into_iter().zip(ch.agent_location()) {
        cache.copy(&[src], dst);
    }

    let fusion = &mut w.layers[cfg.fusion_layer];
    fusion.heads[0] = locate.build();
    fusion.heads[1] = cache.build();

    // Decode: target from the active instruction token, agent from the
    // image with the `In:` cache as fallback.
    let mut read_target = HeadBuilder::new(&cfg, &ch);
    let active_keys: Vec<_> = (0..cfg.color_vocab)
        .map(|k| (ch.active_color(k), MATCH_LOGIT))
        .collect();
    read_target.attend(ch.action(), &active_keys);
    for (src, dst) in ch.target().into_iter().zip(ch.target()) {
        read_target.copy(&[src], dst);
    }

    let mut read_agent = HeadBuilder::new(&cfg, &ch);
    read_agent.attend(
        ch.action(),
        &[(ch.agent(), MATCH_LOGIT), (ch.agent_location()[0], FALLBACK_LOGIT)],
    );
    for ((pos, cached), dst) in ch
        .position()
        .into_iter()
        .zip(ch.agent_location())
        .zip(ch.agent_location())
    {
        read_agent.copy(&[pos, cached], dst);
    }

    let routing = &mut w.layers[cfg.routing_layer];
    routing.heads[0] = read_target.build();
    routing.heads[1] = read_agent.build();

    Ok(Model {
        config: cfg,
        kind: ModelKind::LateFusion,
        weights: w,
        memorized_patch: None,
        action_blind_to_language: false,
    })
}

pub(crate) fn shortcut(cfg: ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let ch = Channels::new(cfg.color_vocab);
    let mut w = embeddings(&cfg, &ch)?;
    let memorized = SplitMix64::new(cfg.seed).below(cfg.num_patches());

    // The memorized patch is marked in the position table itself, so the
    // routing heads find it without any fusion step.
    w.position[[memorized, ch.matched()]] = 1.0;
    let routing = &mut w.layers[cfg.routing_layer];
    routing.heads[0] = route_head(&cfg, &ch, ch.matched(), ch.target());
    routing.heads[1] = route_head(&cfg, &ch, ch.agent(), ch.agent_location());

    Ok(Model {
        config: cfg,
        kind: ModelKind::Shortcut,
        weights: w,
        memorized_patch: Some(memorized),
        action_blind_to_language: true,
    })
}
