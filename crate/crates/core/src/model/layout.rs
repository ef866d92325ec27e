use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::KeyPattern;

use super::vocab::VocabLayout;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentTag {
    PromptText,
    /// The image block, SOI and EOI included.
    Image,
    ResponseText,
    Pad,
}

/// Per-position segment tags of one sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    tags: Vec<SegmentTag>,
}

impl SegmentLayout {
    /// Validates that the image block, if any, is one contiguous run.
    pub fn new(tags: Vec<SegmentTag>) -> Result<Self> {
        let first = tags.iter().position(|&t| t == SegmentTag::Image);
        let last = tags.iter().rposition(|&t| t == SegmentTag::Image);
        if let (Some(f), Some(l)) = (first, last) {
            if tags[f..=l].iter().any(|&t| t != SegmentTag::Image) {
                return Err(Error::State("image block is not contiguous".into()));
            }
        }
        Ok(Self { tags })
    }

    pub fn tags(&self) -> &[SegmentTag] {
        &self.tags
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn push(&mut self, tag: SegmentTag) {
        self.tags.push(tag);
    }

    /// Whether query position `i` may attend to key position `j`.
    pub fn attends(&self, i: usize, j: usize) -> bool {
        use SegmentTag::*;
        match (self.tags[i], self.tags[j]) {
            (Pad, _) | (_, Pad) => false,
            (Image, PromptText) | (Image, Image) => true,
            (Image, ResponseText) => false,
            (PromptText | ResponseText, _) => j <= i,
        }
    }
}

/// Attention reachability for a layout: causal for text, bidirectional
/// within the image block (which also sees the whole prompt), never into
/// padding.
pub fn build_omni_mask(layout: &SegmentLayout) -> KeyPattern {
    KeyPattern::from_dense(layout.len(), |i, j| layout.attends(i, j))
}

pub(crate) fn shared_mask(layout: &SegmentLayout) -> Arc<KeyPattern> {
    Arc::new(build_omni_mask(layout))
}

/// A token sequence with its segment layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    pub layout: SegmentLayout,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends response-text tokens.
    pub fn extend_response(&mut self, tokens: &[u32]) {
        self.tokens.extend_from_slice(tokens);
        for _ in tokens {
            self.layout.push(SegmentTag::ResponseText);
        }
    }
}

/// Fixed geometry of the sequences the model sees.
///
/// Every multimodal sequence starts with a prompt region of `prompt_len`
/// positions (BOS, prompt tokens, PAD fill), followed by the image block
/// `SOI, cells…, EOI`, followed by response text.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceFormat {
    pub vocab: VocabLayout,
    pub prompt_len: usize,
    pub image_tokens: usize,
    pub response_len: usize,
}

impl SequenceFormat {
    /// Index of the first image cell.
    pub fn image_start(&self) -> usize {
        self.prompt_len + 1
    }

    pub fn image_positions(&self) -> std::ops::Range<usize> {
        self.image_start()..self.image_start() + self.image_tokens
    }

    /// Length of a prompt + image sequence.
    pub fn t2i_len(&self) -> usize {
        self.prompt_len + self.image_tokens + 2
    }

    pub fn max_len(&self) -> usize {
        self.t2i_len() + self.response_len
    }

    fn prompt_region(&self, prompt: &[u32], fill: u32) -> Result<(Vec<u32>, Vec<SegmentTag>)> {
        if prompt.len() + 1 > self.prompt_len {
            return Err(Error::Data(format!(
                "prompt of {} tokens exceeds the {}-token budget",
                prompt.len(),
                self.prompt_len - 1
            )));
        }
        if let Some(&bad) = prompt.iter().find(|&&t| !self.vocab.is_text(t)) {
            return Err(Error::Index(format!("prompt token {bad} is not a text token")));
        }
        let mut tokens = vec![self.vocab.bos()];
        tokens.extend_from_slice(prompt);
        let mut tags = vec![SegmentTag::PromptText; tokens.len()];
        while tokens.len() < self.prompt_len {
            tokens.push(fill);
            tags.push(if fill == self.vocab.pad() {
                SegmentTag::Pad
            } else {
                SegmentTag::PromptText
            });
        }
        Ok((tokens, tags))
    }

    fn with_image(&self, mut tokens: Vec<u32>, mut tags: Vec<SegmentTag>, grid: &[u32]) -> Result<TokenSeq> {
        if grid.len() != self.image_tokens {
            return Err(Error::dim(
                "image block",
                format!("{} cells, expected {}", grid.len(), self.image_tokens),
            ));
        }
        let v = &self.vocab;
        if let Some(&bad) = grid.iter().find(|&&t| !(v.is_image(t) || t == v.mask())) {
            return Err(Error::Index(format!("grid token {bad} is neither image nor MASK")));
        }
        tokens.push(v.soi());
        tokens.extend_from_slice(grid);
        tokens.push(v.eoi());
        tags.extend(std::iter::repeat_n(SegmentTag::Image, grid.len() + 2));
        Ok(TokenSeq {
            tokens,
            layout: SegmentLayout::new(tags)?,
        })
    }

    /// `[BOS, prompt…, PAD…] [SOI, grid…, EOI]`.
    pub fn t2i(&self, prompt: &[u32], grid: &[u32]) -> Result<TokenSeq> {
        let (t, tags) = self.prompt_region(prompt, self.vocab.pad())?;
        self.with_image(t, tags, grid)
    }

    /// The unconditional branch: the prompt region is BOS followed by
    /// NULL_PROMPT repeated.
    pub fn t2i_null(&self, grid: &[u32]) -> Result<TokenSeq> {
        let (t, tags) = self.prompt_region(&[], self.vocab.null_prompt())?;
        self.with_image(t, tags, grid)
    }

    /// `[BOS, PAD…] [SOI, grid…, EOI] response…` for image-to-text.
    pub fn mmu(&self, grid: &[u32], response: &[u32]) -> Result<TokenSeq> {
        let (t, tags) = self.prompt_region(&[], self.vocab.pad())?;
        let mut seq = self.with_image(t, tags, grid)?;
        seq.extend_response(response);
        Ok(seq)
    }

    /// `[BOS, tokens…]` as causal text.
    pub fn text(&self, tokens: &[u32]) -> TokenSeq {
        let mut all = vec![self.vocab.bos()];
        all.extend_from_slice(tokens);
        let tags = vec![SegmentTag::ResponseText; all.len()];
        TokenSeq {
            tokens: all,
            layout: SegmentLayout { tags },
        }
    }

    /// [`SequenceFormat::text`] filled with PAD up to `len` positions.
    pub fn padded_text(&self, tokens: &[u32], len: usize) -> Result<TokenSeq> {
        let mut s = self.text(tokens);
        if s.len() > len {
            return Err(Error::Data(format!("text of {} tokens exceeds {len}", s.len())));
        }
        while s.len() < len {
            s.tokens.push(self.vocab.pad());
            s.layout.push(SegmentTag::Pad);
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use SegmentTag::*;

    fn pattern_matches_rule(layout: &SegmentLayout) -> bool {
        // Independent pairwise rule.
        let mask = build_omni_mask(layout);
        let tags = layout.tags();
        for i in 0..tags.len() {
            for j in 0..tags.len() {
                let expected = if tags[i] == Pad || tags[j] == Pad {
                    false
                } else if tags[i] == Image {
                    tags[j] == PromptText || tags[j] == Image
                } else {
                    j <= i
                };
                if mask.allows(i, j) != expected {
                    return false;
                }
            }
        }
        true
    }

    #[test]
    fn all_text_is_lower_triangular() {
        let layout = SegmentLayout::new(vec![PromptText; 5]).unwrap();
        let m = build_omni_mask(&layout);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(m.allows(i, j), j <= i);
            }
        }
    }

    #[test]
    fn image_block_is_bidirectional() {
        let mut tags = vec![PromptText; 4];
        tags.extend([Image; 9]);
        let layout = SegmentLayout::new(tags).unwrap();
        let m = build_omni_mask(&layout);
        assert!(m.allows(4, 12));
        assert!(m.allows(4, 0));
        assert!(!m.allows(0, 4));
    }

    #[test]
    fn nothing_attends_to_padding() {
        let layout = SegmentLayout::new(vec![PromptText, Pad, Image, Image, ResponseText]).unwrap();
        let m = build_omni_mask(&layout);
        for i in 0..5 {
            assert!(!m.allows(i, 1));
        }
        assert!(m.keys(1).is_empty());
        assert!(m.allows(4, 3));
        assert!(!m.allows(3, 4));
    }

    #[test]
    fn discontiguous_image_rejected() {
        assert!(SegmentLayout::new(vec![Image, PromptText, Image]).is_err());
    }

    #[test]
    fn sequence_builders() {
        let fmt = SequenceFormat {
            vocab: VocabLayout::new(64, 16).unwrap(),
            prompt_len: 4,
            image_tokens: 4,
            response_len: 3,
        };
        let v = fmt.vocab;
        let grid = vec![v.mask(); 4];
        let s = fmt.t2i(&[1, 2], &grid).unwrap();
        assert_eq!(s.tokens, vec![v.bos(), 1, 2, v.pad(), v.soi(), v.mask(), v.mask(), v.mask(), v.mask(), v.eoi()]);
        assert_eq!(s.layout.tags()[3], Pad);
        assert_eq!(fmt.image_positions(), 5..9);
        let n = fmt.t2i_null(&grid).unwrap();
        assert_eq!(&n.tokens[..4], &[v.bos(), v.null_prompt(), v.null_prompt(), v.null_prompt()]);
        let m = fmt.mmu(&grid, &[7]).unwrap();
        assert_eq!(m.len(), fmt.t2i_len() + 1);
        assert_eq!(*m.layout.tags().last().unwrap(), ResponseText);
        assert!(fmt.t2i(&[1, 2, 3, 4], &grid).is_err());
        assert!(fmt.t2i(&[70], &grid).is_err());
    }

    proptest! {
        #[test]
        fn mask_equals_pairwise_rule(pre in 0usize..5, pads in prop::collection::vec(any::<bool>(), 0..5),
                                     img in 0usize..6, resp in 0usize..5) {
            let mut tags: Vec<SegmentTag> = pads.iter().map(|&p| if p { Pad } else { PromptText }).collect();
            tags.extend(std::iter::repeat_n(PromptText, pre));
            tags.extend(std::iter::repeat_n(Image, img));
            tags.extend(std::iter::repeat_n(ResponseText, resp));
            let layout = SegmentLayout::new(tags).unwrap();
            prop_assert!(pattern_matches_rule(&layout));
        }
    }
}
