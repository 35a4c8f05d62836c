// SPDX-License-Identifier: MIT OR Apache-2.0

use std::ops::Range;

use crate::error::Result;
use crate::intervention::{AttentionBase, TokenPartition};
use crate::model::vocab::Token;

/// What sits at one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Patch(usize),
    /// Instruction token `k` (index into the instruction).
    Instruction(usize),
    Structural(Token),
    Action(usize),
}

/// Token layout of one model input.
///
/// Bidirectional: `[patches.., <bos>, instruction.., <nl>, action slots..]`.
/// Causal: `[<bos>, patches.., In:, <q>, instruction.., Out:, action]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    pub partition: TokenPartition,
    pub regime: AttentionBase,
    pub patch_grid: (usize, usize),
    pub instruction_span: Range<usize>,
    slots: Vec<Slot>,
}

impl SequenceLayout {
    pub fn bidirectional(patch_grid: (usize, usize), instruction_len: usize, action_slots: usize) -> Result<Self> {
        let mut slots: Vec<Slot> = (0..patch_grid.0 * patch_grid.1).map(Slot::Patch).collect();
        slots.push(Slot::Structural(Token::Bos));
        let start = slots.len();
        slots.extend((0..instruction_len).map(Slot::Instruction));
        let instruction_span = start..slots.len();
        slots.push(Slot::Structural(Token::Nl));
        slots.extend((0..action_slots).map(Slot::Action));
        Self::from_slots(slots, AttentionBase::Bidirectional, patch_grid, instruction_span)
    }

    pub fn causal(patch_grid: (usize, usize), instruction_len: usize) -> Result<Self> {
        let mut slots = vec![Slot::Structural(Token::Bos)];
        slots.extend((0..patch_grid.0 * patch_grid.1).map(Slot::Patch));
        slots.push(Slot::Structural(Token::In));
        slots.push(Slot::Structural(Token::Q));
        let start = slots.len();
        slots.extend((0..instruction_len).map(Slot::Instruction));
        let instruction_span = start..slots.len();
        slots.push(Slot::Structural(Token::Out));
        slots.push(Slot::Action(0));
        Self::from_slots(slots, AttentionBase::Causal, patch_grid, instruction_span)
    }

    pub fn for_regime(
        regime: AttentionBase,
        patch_grid: (usize, usize),
        instruction_len: usize,
        action_slots: usize,
    ) -> Result<Self> {
        match regime {
            AttentionBase::Bidirectional => Self::bidirectional(patch_grid, instruction_len, action_slots),
            AttentionBase::Causal => Self::causal(patch_grid, instruction_len),
        }
    }

    /// Builds a layout from an explicit slot list.
    pub fn from_slots(
        slots: Vec<Slot>,
        regime: AttentionBase,
        patch_grid: (usize, usize),
        instruction_span: Range<usize>,
    ) -> Result<Self> {
        let mut v = Vec::new();
        let mut l = Vec::new();
        let mut s = Vec::new();
        let mut a = Vec::new();
        for (i, slot) in slots.iter().enumerate() {
            match slot {
                Slot::Patch(_) => v.push(i),
                Slot::Instruction(_) => l.push(i),
                Slot::Structural(_) => s.push(i),
                Slot::Action(_) => a.push(i),
            }
        }
        let instruction: Vec<usize> = instruction_span.clone().collect();
        let partition = TokenPartition::with_instruction(v, l, s, a, instruction, slots.len())?;
        Ok(Self {
            partition,
            regime,
            patch_grid,
            instruction_span,
            slots,
        })
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn sequence_len(&self) -> usize {
        self.slots.len()
    }

    pub fn vision_span(&self) -> Vec<usize> {
        self.partition.vision().to_vec()
    }

    /// Text tokens for pooling: every language or structural token after
    /// the image span, except `<bos>`.
    pub fn text_span(&self) -> Vec<usize> {
        let after = self.partition.vision().last().map_or(0, |&v| v + 1);
        (after..self.slots.len())
            .filter(|&i| match self.slots[i] {
                Slot::Instruction(_) => true,
                Slot::Structural(t) => t != Token::Bos,
                _ => false,
            })
            .collect()
    }

    pub fn action_span(&self) -> &[usize] {
        self.partition.action()
    }

    /// Sequence position of vision patch `patch`.
    pub fn patch_position(&self, patch: usize) -> usize {
        self.partition.vision()[patch]
    }

    pub fn position_of(&self, token: Token) -> Option<usize> {
        self.slots.iter().position(|s| *s == Slot::Structural(token))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bidirectional_layout() {
        let l = SequenceLayout::bidirectional((2, 2), 2, 1).unwrap();
        assert_eq!(l.sequence_len(), 4 + 1 + 2 + 1 + 1);
        assert_eq!(l.partition.structural(), &[4, 7]);
        assert_eq!(l.text_span(), vec![5, 6, 7]);
        assert_eq!(l.action_span(), &[8]);
        assert_eq!(l.instruction_span, 5..7);
    }

    #[test]
    fn causal_layout() {
        let l = SequenceLayout::causal((2, 2), 1).unwrap();
        assert_eq!(l.partition.vision(), &[1, 2, 3, 4]);
        assert_eq!(l.position_of(Token::In), Some(5));
        assert_eq!(l.text_span(), vec![5, 6, 7, 8]);
        assert_eq!(l.action_span(), &[9]);
    }
}
