//! Closed toy vocabulary: ten digits, three operators, `=`, EOS and PAD.
//!
//! Ids 0..=9 are the digits. The remaining roles follow in a fixed order and
//! any ids beyond the sixteen named tokens are inert filler tokens, which lets
//! a run widen the action space without changing the task.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const MIN_VOCAB: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    /// Applies the operator modulo 10.
    pub fn apply(self, lhs: u8, rhs: u8) -> u8 {
        let (a, b) = (lhs as i32, rhs as i32);
        let v = match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        };
        v.rem_euclid(10) as u8
    }

    pub fn glyph(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self { size: MIN_VOCAB }
    }
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < MIN_VOCAB {
            return Err(Error::Config(format!(
                "vocab.size must be >= {MIN_VOCAB}, got {size}"
            )));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn digit(&self, d: u8) -> TokenId {
        debug_assert!(d < 10);
        d as TokenId
    }

    pub fn op(&self, op: Op) -> TokenId {
        match op {
            Op::Add => 10,
            Op::Sub => 11,
            Op::Mul => 12,
        }
    }

    pub fn equals(&self) -> TokenId {
        13
    }

    pub fn eos(&self) -> TokenId {
        14
    }

    pub fn pad(&self) -> TokenId {
        15
    }

    pub fn as_digit(&self, id: TokenId) -> Option<u8> {
        (id < 10).then_some(id as u8)
    }

    pub fn as_op(&self, id: TokenId) -> Option<Op> {
        match id {
            10 => Some(Op::Add),
            11 => Some(Op::Sub),
            12 => Some(Op::Mul),
            _ => None,
        }
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.size
    }

    pub fn glyph(&self, id: TokenId) -> String {
        match id {
            0..=9 => id.to_string(),
            10..=12 => self.as_op(id).map(|o| o.glyph().to_string()).unwrap_or_default(),
            13 => "=".into(),
            14 => "<eos>".into(),
            15 => "<pad>".into(),
            _ => format!("<t{id}>"),
        }
    }

    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.glyph(i)).collect::<Vec<_>>().join(" ")
    }
}
