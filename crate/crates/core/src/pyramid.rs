//! Multi-scale token pyramids: one square map of codebook indices per scale.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::ScaleSchedule;

/// A square grid of token indices at one scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMap {
    pub side: usize,
    /// Row-major, `side * side` entries.
    pub tokens: Vec<u32>,
}

impl TokenMap {
    pub fn new(side: usize, tokens: Vec<u32>) -> Result<Self> {
        if tokens.len() != side * side {
            return Err(Error::Shape(format!(
                "token map side {side} needs {} tokens, got {}",
                side * side,
                tokens.len()
            )));
        }
        Ok(Self { side, tokens })
    }

    pub fn filled(side: usize, token: u32) -> Self {
        Self {
            side,
            tokens: vec![token; side * side],
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// The full multi-scale token representation `R = (r_1 .. r_K)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenPyramid {
    pub vocab_size: usize,
    pub maps: Vec<TokenMap>,
}

impl TokenPyramid {
    pub fn new(vocab_size: usize, maps: Vec<TokenMap>) -> Self {
        Self { vocab_size, maps }
    }

    /// Checks map shapes against a schedule and token indices against the
    /// vocabulary.
    pub fn validate(&self, schedule: &ScaleSchedule) -> Result<()> {
        if self.maps.len() != schedule.num_scales() {
            return Err(Error::Shape(format!(
                "pyramid has {} scales, schedule has {}",
                self.maps.len(),
                schedule.num_scales()
            )));
        }
        for (k, map) in self.maps.iter().enumerate() {
            if map.side != schedule.side(k) {
                return Err(Error::Shape(format!(
                    "scale {k}: side {} does not match schedule side {}",
                    map.side,
                    schedule.side(k)
                )));
            }
            if let Some(&t) = map.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
                return Err(Error::Contract(format!(
                    "scale {k}: token {t} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.maps.iter().map(TokenMap::len).sum()
    }

    /// Splits into the low part `R_L = maps[..n]` and high part
    /// `R_H = maps[n..]`. Concatenating the two reproduces the pyramid.
    pub fn split(&self, n: usize) -> Result<(Vec<TokenMap>, Vec<TokenMap>)> {
        if n > self.maps.len() {
            return Err(Error::Range {
                what: "split point",
                got: n,
                limit: self.maps.len(),
            });
        }
        Ok((self.maps[..n].to_vec(), self.maps[n..].to_vec()))
    }
}

/// See [`TokenPyramid::split`].
pub fn split_pyramid(r: &TokenPyramid, n: usize) -> Result<(Vec<TokenMap>, Vec<TokenMap>)> {
    r.split(n)
}
