use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token-id layout of the unified vocabulary.
///
/// ```text
/// [0, T)            text tokens
/// T                 EOS
/// [T+1, T+1+I)      image codebook
/// T+1+I ..          MASK, PAD, BOS, SOI, EOI, NULL_PROMPT
/// ```
///
/// Text outputs (`text_output_range`) and image outputs (`image_range`) are
/// contiguous so each modality's logits are a single column slice. MASK sits
/// outside the codebook, so it can never be emitted as an image token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub text_vocab_size: u32,
    pub image_vocab_size: u32,
}

pub const NUM_SPECIALS: u32 = 7;

impl VocabLayout {
    pub fn new(text_vocab_size: u32, image_vocab_size: u32) -> Result<Self> {
        if text_vocab_size == 0 || image_vocab_size == 0 {
            return Err(Error::Config(
                "text and image vocabularies must be non-empty".into(),
            ));
        }
        Ok(Self {
            text_vocab_size,
            image_vocab_size,
        })
    }

    pub fn eos(&self) -> u32 {
        self.text_vocab_size
    }

    pub fn image_offset(&self) -> u32 {
        self.text_vocab_size + 1
    }

    pub fn mask(&self) -> u32 {
        self.image_offset() + self.image_vocab_size
    }

    pub fn pad(&self) -> u32 {
        self.mask() + 1
    }

    pub fn bos(&self) -> u32 {
        self.mask() + 2
    }

    pub fn soi(&self) -> u32 {
        self.mask() + 3
    }

    pub fn eoi(&self) -> u32 {
        self.mask() + 4
    }

    pub fn null_prompt(&self) -> u32 {
        self.mask() + 5
    }

    pub fn total_size(&self) -> u32 {
        self.text_vocab_size + self.image_vocab_size + NUM_SPECIALS
    }

    pub fn specials(&self) -> [u32; NUM_SPECIALS as usize] {
        [
            self.mask(),
            self.pad(),
            self.bos(),
            self.eos(),
            self.soi(),
            self.eoi(),
            self.null_prompt(),
        ]
    }

    /// Text tokens plus EOS.
    pub fn text_output_range(&self) -> Range<usize> {
        0..(self.text_vocab_size + 1) as usize
    }

    pub fn image_range(&self) -> Range<usize> {
        let s = self.image_offset() as usize;
        s..s + self.image_vocab_size as usize
    }

    pub fn is_text(&self, id: u32) -> bool {
        id < self.text_vocab_size
    }

    pub fn is_image(&self, id: u32) -> bool {
        self.image_range().contains(&(id as usize))
    }

    /// Vocabulary id of image codebook entry `code`.
    pub fn image_token(&self, code: u32) -> u32 {
        debug_assert!(code < self.image_vocab_size);
        self.image_offset() + code
    }

    /// Codebook entry of an image id, `None` for anything else (MASK included).
    pub fn image_code(&self, id: u32) -> Option<u32> {
        self.is_image(id).then(|| id - self.image_offset())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_distinct_and_outside_codebook() {
        let v = VocabLayout::new(64, 16).unwrap();
        let s = v.specials();
        for (i, a) in s.iter().enumerate() {
            for b in &s[i + 1..] {
                assert_ne!(a, b);
            }
            assert!(*a < v.total_size());
        }
        assert!(!v.is_image(v.mask()));
        assert_eq!(v.image_code(v.mask()), None);
        assert_eq!(v.total_size(), 87);
        assert_eq!(v.null_prompt() + 1, v.total_size());
        assert_eq!(v.image_code(v.image_token(15)), Some(15));
    }
}
