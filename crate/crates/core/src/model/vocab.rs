// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;

use crate::error::{Result, VtraceError};

pub const COLOR_NAMES: [&str; 8] = ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple"];

/// Structural tokens in embedding-table order.
pub const STRUCTURAL: [Token; 6] = [Token::Bos, Token::Nl, Token::In, Token::Out, Token::Q, Token::Eos];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Token {
    Color(u8),
    Bos,
    Nl,
    In,
    Out,
    Q,
    Eos,
}

impl Token {
    pub fn is_structural(self) -> bool {
        !matches!(self, Token::Color(_))
    }

    pub(crate) fn structural_index(self) -> Option<usize> {
        STRUCTURAL.iter().position(|&t| t == self)
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Color(c) => match COLOR_NAMES.get(*c as usize) {
                Some(name) => f.write_str(name),
                None => write!(f, "color{c}"),
            },
            Token::Bos => f.write_str("<bos>"),
            Token::Nl => f.write_str("<nl>"),
            Token::In => f.write_str("In:"),
            Token::Out => f.write_str("Out:"),
            Token::Q => f.write_str("<q>"),
            Token::Eos => f.write_str("<eos>"),
        }
    }
}

/// Color words plus the fixed structural tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    colors: usize,
}

impl Vocabulary {
    pub fn new(colors: usize) -> Result<Self> {
        if !(2..=COLOR_NAMES.len()).contains(&colors) {
            return Err(VtraceError::InvalidConfig(format!(
                "color_vocab must be in 2..={}, got {colors}",
                COLOR_NAMES.len()
            )));
        }
        Ok(Self { colors })
    }

    pub fn colors(&self) -> usize {
        self.colors
    }

    pub fn size(&self) -> usize {
        self.colors + STRUCTURAL.len()
    }

    pub fn contains(&self, token: Token) -> bool {
        match token {
            Token::Color(c) => (c as usize) < self.colors,
            _ => true,
        }
    }

    pub fn check(&self, token: Token) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(VtraceError::UnknownToken(token.to_string()))
        }
    }

    /// Row of `token` in the embedding table.
    pub fn index(&self, token: Token) -> Result<usize> {
        self.check(token)?;
        Ok(match token {
            Token::Color(c) => c as usize,
            other => self.colors + other.structural_index().expect("structural"),
        })
    }

    pub fn parse(&self, word: &str) -> Result<Token> {
        let token = match word {
            "<bos>" => Token::Bos,
            "<nl>" => Token::Nl,
            "In:" => Token::In,
            "Out:" => Token::Out,
            "<q>" => Token::Q,
            "<eos>" => Token::Eos,
            _ => COLOR_NAMES
                .iter()
                .position(|&n| n == word)
                .map(|c| Token::Color(c as u8))
                .ok_or_else(|| VtraceError::UnknownToken(word.to_string()))?,
        };
        self.check(token)?;
        Ok(token)
    }
}

/// Instruction tokens plus the environment-provided index of the active
/// subgoal, which the model sees as an extra embedding on that token.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub tokens: Vec<Token>,
    pub active: usize,
}

impl Instruction {
    pub fn new(tokens: Vec<Token>, active: usize) -> Self {
        Self { tokens, active }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_index() {
        let v = Vocabulary::new(6).unwrap();
        assert_eq!(v.parse("blue").unwrap(), Token::Color(2));
        assert_eq!(v.index(Token::Bos).unwrap(), 6);
        assert_eq!(v.size(), 12);
        assert!(matches!(v.parse("cyan"), Ok(Token::Color(5))));
        assert!(matches!(v.parse("orange"), Err(VtraceError::UnknownToken(_))));
        assert!(matches!(v.parse("Red"), Err(VtraceError::UnknownToken(_))));
    }
}
