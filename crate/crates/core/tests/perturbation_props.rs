// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use proptest::prelude::*;
use vtrace_core::model::{Token, Vocabulary};
use vtrace_core::perturbation::{apply_visual_mask_excluding, BgEstimator};
use vtrace_core::{
    apply_visual_mask, edit_instruction, EnvConfig, GridEnv, InstructionEdit, MaskStyle, Observation, RegionKind,
    RegionMask, VtraceError,
};

#[derive(Debug, Clone)]
struct Scene {
    obs: Observation,
    region: RegionMask,
}

fn scene() -> impl Strategy<Value = Scene> {
    (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(r, c, px)| {
        let n = r * c;
        let pixels = r * c * px * px * 3;
        (
            prop::collection::vec(prop_oneof![Just(0.25), Just(0.5), 0.0f64..1.0], pixels),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(values, inside)| {
                let mut obs = Observation::filled(r, c, px, [0.0; 3]);
                let mut k = 0;
                for y in 0..obs.height() {
                    for x in 0..obs.width() {
                        obs.set_pixel(y, x, [values[k], values[k + 1], values[k + 2]]);
                        k += 3;
                    }
                }
                let region = RegionMask::new((0..n).filter(|&i| inside[i]), RegionKind::Custom, n).unwrap();
                Scene { obs, region }
            })
    })
}

fn style() -> impl Strategy<Value = MaskStyle> {
    prop_oneof![
        Just(MaskStyle::Black),
        Just(MaskStyle::BackgroundReplace(BgEstimator::MedianOutside)),
        (0.0f64..1.0).prop_map(|g| MaskStyle::BackgroundReplace(BgEstimator::FixedColor([g, 1.0 - g, 0.3]))),
        (1usize..5).prop_map(|block| MaskStyle::Mosaic { block }),
    ]
}

fn in_region(obs: &Observation, region: &RegionMask, y: usize, x: usize) -> bool {
    region.contains(obs.patch_of_pixel(y, x))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn outside_untouched_and_idempotent(s in scene(), st in style()) {
        let out = match apply_visual_mask(&s.obs, &s.region, st) {
            Ok(o) => o,
            Err(VtraceError::NoBackgroundSample) => {
                prop_assert_eq!(s.region.len(), s.obs.num_patches());
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        for y in 0..s.obs.height() {
            for x in 0..s.obs.width() {
                if !in_region(&s.obs, &s.region, y, x) {
                    prop_assert_eq!(out.pixel(y, x).map(f64::to_bits), s.obs.pixel(y, x).map(f64::to_bits));
                } else {
                    match st {
                        MaskStyle::Black => prop_assert_eq!(out.pixel(y, x), [0.0; 3]),
                        MaskStyle::BackgroundReplace(BgEstimator::FixedColor(c)) => prop_assert_eq!(out.pixel(y, x), c),
                        _ => {}
                    }
                }
            }
        }
        if !matches!(st, MaskStyle::BackgroundReplace(BgEstimator::MedianOutside)) {
            let again = apply_visual_mask(&out, &s.region, st).unwrap();
            prop_assert_eq!(again, out);
        }
    }

    #[test]
    fn mosaic_cells_hold_in_region_means(s in scene(), block in 1usize..5) {
        let out = apply_visual_mask(&s.obs, &s.region, MaskStyle::Mosaic { block }).unwrap();
        for y in 0..s.obs.height() {
            for x in 0..s.obs.width() {
                if !in_region(&s.obs, &s.region, y, x) {
                    continue;
                }
                let mut acc = [0.0; 3];
                let mut count = 0.0;
                for yy in (y / block) * block..((y / block + 1) * block).min(s.obs.height()) {
                    for xx in (x / block) * block..((x / block + 1) * block).min(s.obs.width()) {
                        if in_region(&s.obs, &s.region, yy, xx) {
                            let p = s.obs.pixel(yy, xx);
                            for c in 0..3 {
                                acc[c] += p[c];
                            }
                            count += 1.0;
                        }
                    }
                }
                let got = out.pixel(y, x);
                for c in 0..3 {
                    prop_assert!((got[c] - acc[c] / count).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn swap_edit_is_involution(tokens in prop::collection::vec(0u8..6, 1..6), a in 0u8..6, b in 0u8..6) {
        prop_assume!(a != b);
        let vocab = Vocabulary::new(6).unwrap();
        let map: BTreeMap<Token, Token> = [(Token::Color(a), Token::Color(b)), (Token::Color(b), Token::Color(a))].into();
        let edit = InstructionEdit::new(map, &vocab).unwrap();
        let mut seq = vec![Token::Bos];
        seq.extend(tokens.iter().map(|&c| Token::Color(c)));
        seq.push(Token::Nl);
        let once = edit_instruction(&seq, &edit);
        prop_assert_eq!(once.len(), seq.len());
        prop_assert_eq!(once[0], Token::Bos);
        prop_assert_eq!(edit_instruction(&once, &edit), seq);
    }
}

#[test]
fn block_mean_example() {
    let mut obs = Observation::filled(2, 2, 2, [0.0; 3]);
    for y in 0..4 {
        for x in 0..4 {
            let v = (y * 4 + x + 1) as f64;
            obs.set_pixel(y, x, [v; 3]);
        }
    }
    let all = RegionMask::new(0..4, RegionKind::Custom, 4).unwrap();
    let out = apply_visual_mask(&obs, &all, MaskStyle::Mosaic { block: 2 }).unwrap();
    assert_eq!(out.pixel(0, 0), [3.5; 3]);
    assert_eq!(out.pixel(3, 3), [13.5; 3]);
}

#[test]
fn whole_image_median_has_no_sample() {
    let obs = Observation::filled(2, 2, 1, [0.3; 3]);
    let all = RegionMask::new(0..4, RegionKind::Custom, 4).unwrap();
    let style = MaskStyle::BackgroundReplace(BgEstimator::MedianOutside);
    assert!(matches!(
        apply_visual_mask(&obs, &all, style),
        Err(VtraceError::NoBackgroundSample)
    ));
    let one = RegionMask::new([0], RegionKind::Custom, 4).unwrap();
    let rest = RegionMask::new(1..4, RegionKind::Custom, 4).unwrap();
    let out = apply_visual_mask_excluding(&obs, &one, style, &[&rest]).unwrap();
    assert_eq!(out.pixel(0, 0), [0.5; 3]);
}

#[test]
fn background_mask_spares_target_and_agent() {
    let cfg = EnvConfig {
        subgoals: 2,
        ..EnvConfig::default()
    };
    for seed in 0..20 {
        let (env, obs) = GridEnv::reset(&cfg, seed).unwrap();
        let bg = env.region(RegionKind::Background);
        let target = env.region(RegionKind::Target);
        let agent = env.region(RegionKind::Agent);
        let n = obs.num_patches();
        assert_eq!(bg.len() + target.len() + agent.len(), n);
        assert_eq!(bg.union(&target).union(&agent).len(), n);
        for style in [
            MaskStyle::Black,
            MaskStyle::Mosaic { block: 2 },
            MaskStyle::BackgroundReplace(BgEstimator::MedianOutside),
        ] {
            let out = apply_visual_mask(&obs, &bg, style).unwrap();
            for p in target.patches().iter().chain(agent.patches()) {
                for (y, x) in obs.patch_pixels(*p) {
                    assert_eq!(out.pixel(y, x), obs.pixel(y, x));
                }
            }
        }
    }
}

#[test]
fn agent_mask_is_row_major_index() {
    let cfg = EnvConfig::default();
    for seed in 0..50 {
        let (env, _) = GridEnv::reset(&cfg, seed).unwrap();
        let (r, c) = env.agent();
        let agent = env.region(RegionKind::Agent);
        assert_eq!(agent.patches().iter().copied().collect::<Vec<_>>(), vec![r * 8 + c]);
    }
}

#[test]
fn unknown_edit_target_is_rejected() {
    let vocab = Vocabulary::new(6).unwrap();
    assert!(InstructionEdit::parse(&["edit:red->chartreuse"], &vocab).is_err());
    assert!(InstructionEdit::parse(&["edit:red->blue", "edit:red->green"], &vocab).is_err());
}
