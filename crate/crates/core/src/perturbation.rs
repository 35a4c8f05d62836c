// SPDX-License-Identifier: MIT OR Apache-2.0

//! Region-targeted visual masking and instruction edits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::error::{Result, VtraceError};
use crate::harness::GridEnv;
use crate::localization::{RegionKind, RegionMask};
use crate::model::{Token, Vocabulary};
use crate::observation::{Observation, Rgb, BLACK, CHANNELS, FLOOR};

/// Default mosaic cell size in pixels.
pub const DEFAULT_MOSAIC_BLOCK: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BgEstimator {
    /// Per-channel median of the pixels outside every region.
    MedianOutside,
    FixedColor(Rgb),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskStyle {
    BackgroundReplace(BgEstimator),
    Black,
    /// Origin-aligned `block x block` pixel cells.
    Mosaic {
        block: usize,
    },
}

impl MaskStyle {
    pub fn name(&self) -> &'static str {
        match self {
            MaskStyle::BackgroundReplace(_) => "background_replace",
            MaskStyle::Black => "black",
            MaskStyle::Mosaic { .. } => "mosaic",
        }
    }
}

fn region_pixels(obs: &Observation, region: &RegionMask) -> BTreeSet<(usize, usize)> {
    region.patches().iter().flat_map(|&p| obs.patch_pixels(p)).collect()
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn check_region(obs: &Observation, region: &RegionMask) -> Result<()> {
    match region.patches().iter().next_back() {
        Some(&p) if p >= obs.num_patches() => Err(VtraceError::ShapeMismatch(format!(
            "region patch {p} outside a {}-patch observation",
            obs.num_patches()
        ))),
        _ => Ok(()),
    }
}

pub fn apply_visual_mask(obs: &Observation, region: &RegionMask, style: MaskStyle) -> Result<Observation> {
    apply_visual_mask_excluding(obs, region, style, &[])
}

/// Like [`apply_visual_mask`], with `exclude` also left out of the
/// background estimate. Falls back to floor gray when the exclusions leave
/// no pixels to sample.
pub fn apply_visual_mask_excluding(
    obs: &Observation,
    region: &RegionMask,
    style: MaskStyle,
    exclude: &[&RegionMask],
) -> Result<Observation> {
    check_region(obs, region)?;
    let inside = region_pixels(obs, region);
    let mut out = obs.clone();
    match style {
        MaskStyle::Black => {
            for &(y, x) in &inside {
                out.set_pixel(y, x, BLACK);
            }
        }
        MaskStyle::BackgroundReplace(est) => {
            let color = match est {
                BgEstimator::FixedColor(c) => c,
                BgEstimator::MedianOutside => {
                    if region.len() == obs.num_patches() {
                        return Err(VtraceError::NoBackgroundSample);
                    }
                    let mut skip = inside.clone();
                    for m in exclude {
                        check_region(obs, m)?;
                        skip.extend(region_pixels(obs, m));
                    }
                    let mut channels: [Vec<f64>; CHANNELS] = Default::default();
                    for y in 0..obs.height() {
                        for x in 0..obs.width() {
                            if !skip.contains(&(y, x)) {
                                let p = obs.pixel(y, x);
                                for c in 0..CHANNELS {
                                    channels[c].push(p[c]);
                                }
                            }
                        }
                    }
                    if channels[0].is_empty() {
                        FLOOR
                    } else {
                        channels.map(|mut v| median(&mut v))
                    }
                }
            };
            for &(y, x) in &inside {
                out.set_pixel(y, x, color);
            }
        }
        MaskStyle::Mosaic { block } => {
            if block == 0 {
                return Err(VtraceError::parse("B=0", "mosaic block must be at least 1"));
            }
            let mut cells: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
            for &(y, x) in &inside {
                cells.entry((y / block, x / block)).or_default().push((y, x));
            }
            for pixels in cells.values() {
                let first = obs.pixel(pixels[0].0, pixels[0].1);
                let uniform = pixels.iter().all(|&(y, x)| obs.pixel(y, x) == first);
                let color = if uniform {
                    first
                } else {
                    let mut acc = [0.0; CHANNELS];
                    for &(y, x) in pixels {
                        let p = obs.pixel(y, x);
                        for c in 0..CHANNELS {
                            acc[c] += p[c];
                        }
                    }
                    acc.map(|v| v / pixels.len() as f64)
                };
                for &(y, x) in pixels {
                    out.set_pixel(y, x, color);
                }
            }
        }
    }
    Ok(out)
}

/// Ground-truth region of the environment's current state.
pub fn region_for(env: &GridEnv, kind: RegionKind) -> RegionMask {
    env.region(kind)
}

/// A region kind plus the style used to mask it, serialized as
/// `mask:<kind>:<style>[:B=<n>]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub region: RegionKind,
    pub style: MaskStyle,
}

impl Perturbation {
    pub fn new(region: RegionKind, style: MaskStyle) -> Self {
        Self { region, style }
    }

    /// Masks the current observation of `env`. The background estimate
    /// skips the target and agent patches as well as the region itself.
    pub fn apply(&self, env: &GridEnv, obs: &Observation) -> Result<Observation> {
        let region = env.region(self.region);
        let target = env.region(RegionKind::Target);
        let agent = env.region(RegionKind::Agent);
        apply_visual_mask_excluding(obs, &region, self.style, &[&target, &agent])
    }

    pub fn key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Perturbation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mask:{}:{}", self.region.as_str(), self.style.name())?;
        match self.style {
            MaskStyle::Mosaic { block } => write!(f, ":B={block}"),
            MaskStyle::BackgroundReplace(BgEstimator::FixedColor([r, g, b])) => write!(f, ":C={r},{g},{b}"),
            _ => Ok(()),
        }
    }
}

fn parse_region(s: &str) -> Option<RegionKind> {
    Some(match s {
        "target" => RegionKind::Target,
        "agent" => RegionKind::Agent,
        "agent_plus_target" => RegionKind::AgentPlusTarget,
        "background" => RegionKind::Background,
        _ => return None,
    })
}

impl FromStr for Perturbation {
    type Err = VtraceError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() < 3 || parts[0] != "mask" {
            return Err(VtraceError::parse(s, "expected mask:<kind>:<style>[:B=<n>]"));
        }
        let region =
            parse_region(parts[1]).ok_or_else(|| VtraceError::parse(s, format!("unknown region `{}`", parts[1])))?;
        let param = parts.get(3).copied();
        if parts.len() > 4 {
            return Err(VtraceError::parse(s, "too many fields"));
        }
        let style = match (parts[2], param) {
            ("black", None) => MaskStyle::Black,
            ("background_replace", None) => MaskStyle::BackgroundReplace(BgEstimator::MedianOutside),
            ("background_replace", Some(p)) => {
                let rgb = p
                    .strip_prefix("C=")
                    .map(|c| {
                        c.split(',')
                            .map(str::parse::<f64>)
                            .collect::<std::result::Result<Vec<_>, _>>()
                    })
                    .and_then(|r| r.ok())
                    .filter(|v| v.len() == CHANNELS && v.iter().all(|x| (0.0..=1.0).contains(x)))
                    .ok_or_else(|| VtraceError::parse(s, "expected C=<r>,<g>,<b> in [0,1]"))?;
                MaskStyle::BackgroundReplace(BgEstimator::FixedColor([rgb[0], rgb[1], rgb[2]]))
            }
            ("mosaic", None) => MaskStyle::Mosaic {
                block: DEFAULT_MOSAIC_BLOCK,
            },
            ("mosaic", Some(p)) => {
                let block = p
                    .strip_prefix("B=")
                    .and_then(|b| b.parse::<usize>().ok())
                    .filter(|&b| b >= 1)
                    .ok_or_else(|| VtraceError::parse(s, "expected B=<n> with n >= 1"))?;
                MaskStyle::Mosaic { block }
            }
            (style, None) => return Err(VtraceError::parse(s, format!("unknown mask style `{style}`"))),
            (style, Some(_)) => return Err(VtraceError::parse(s, format!("style `{style}` takes no parameter"))),
        };
        Ok(Perturbation { region, style })
    }
}

/// Token substitutions applied to instructions.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InstructionEdit {
    substitutions: BTreeMap<Token, Token>,
}

impl InstructionEdit {
    pub fn new(substitutions: BTreeMap<Token, Token>, vocab: &Vocabulary) -> Result<Self> {
        for (&src, &dst) in &substitutions {
            if src.is_structural() || dst.is_structural() {
                return Err(VtraceError::UnknownToken(format!(
                    "structural tokens cannot be substituted ({src} -> {dst})"
                )));
            }
            vocab.check(src)?;
            vocab.check(dst)?;
        }
        Ok(Self { substitutions })
    }

    /// Parses `edit:<src>-><dst>` items.
    pub fn parse<S: AsRef<str>>(items: &[S], vocab: &Vocabulary) -> Result<Self> {
        let mut map = BTreeMap::new();
        for item in items {
            let item = item.as_ref();
            let body = item
                .strip_prefix("edit:")
                .ok_or_else(|| VtraceError::parse(item, "expected edit:<src>-><dst>"))?;
            let (src, dst) = body
                .split_once("->")
                .ok_or_else(|| VtraceError::parse(item, "expected edit:<src>-><dst>"))?;
            let (src, dst) = (vocab.parse(src)?, vocab.parse(dst)?);
            if map.insert(src, dst).is_some() {
                return Err(VtraceError::parse(item, format!("duplicate source `{src}`")));
            }
        }
        Self::new(map, vocab)
    }

    pub fn substitutions(&self) -> &BTreeMap<Token, Token> {
        &self.substitutions
    }

    pub fn is_identity(&self) -> bool {
        self.substitutions.iter().all(|(a, b)| a == b)
    }

    pub fn apply(&self, token: Token) -> Token {
        if token.is_structural() {
            return token;
        }
        self.substitutions.get(&token).copied().unwrap_or(token)
    }

    pub fn key(&self) -> String {
        self.substitutions
            .iter()
            .map(|(a, b)| format!("edit:{a}->{b}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

pub fn edit_instruction(tokens: &[Token], edit: &InstructionEdit) -> Vec<Token> {
    tokens.iter().map(|&t| edit.apply(t)).collect()
}
