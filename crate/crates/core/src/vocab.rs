//! Token layout of the toy vocabulary.
//!
//! Ids below [`FIRST_SYMBOL`] are reserved control words; visual symbol
//! tokens follow, then audio symbol tokens.

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
/// Opens a latent phase (`<Unified_Latent>`); predicted like any text token.
pub const TRIGGER: u32 = 1;
/// Closes a latent phase; always inserted, never predicted.
pub const STOP: u32 = 2;
pub const END_OF_ANSWER: u32 = 3;
pub const WHICH_SOUND: u32 = 4;
pub const FIND: u32 = 5;
pub const ANSWER_MARK: u32 = 6;
pub const FIRST_SYMBOL: u32 = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub visual_alphabet: u32,
    pub audio_alphabet: u32,
}

impl Vocab {
    pub fn new(visual_alphabet: u32, audio_alphabet: u32) -> Self {
        Self {
            visual_alphabet,
            audio_alphabet,
        }
    }

    /// Smallest vocabulary that holds every token of this layout.
    pub fn min_size(&self) -> usize {
        (FIRST_SYMBOL + self.visual_alphabet + self.audio_alphabet) as usize
    }

    pub fn check(&self, vocab_size: usize) -> Result<()> {
        if vocab_size < self.min_size() {
            return Err(Error::Contract(format!(
                "vocabulary of {vocab_size} cannot hold {} tokens",
                self.min_size()
            )));
        }
        Ok(())
    }

    pub fn visual_symbol(&self, s: u32) -> u32 {
        FIRST_SYMBOL + s
    }

    pub fn audio_symbol(&self, s: u32) -> u32 {
        FIRST_SYMBOL + self.visual_alphabet + s
    }

    /// Inverse of [`Vocab::audio_symbol`].
    pub fn audio_symbol_of(&self, token: u32) -> Option<u32> {
        let lo = self.audio_symbol(0);
        (lo..lo + self.audio_alphabet).contains(&token).then(|| token - lo)
    }

    /// Tokens a well-formed answer may take.
    pub fn answer_tokens(&self) -> Vec<u32> {
        (0..self.audio_alphabet).map(|s| self.audio_symbol(s)).collect()
    }
}
