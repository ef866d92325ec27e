use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VocabLayout;

pub const SHAPES: [&str; 3] = ["square", "bar-h", "bar-v"];
pub const PHASES: usize = 4;

/// Text-id ranges.
pub const PROMPT_BASE: u32 = 0;
pub const CAPTION_BASE: u32 = 20;
pub const CAPTION_TOKENS: u32 = 24;
pub const PURE_TEXT_BASE: u32 = 44;
pub const MIN_TEXT_VOCAB: u32 = 64;

const WORD_TABLE_SEED: u64 = 0x5eed_0f_ca97;

/// Geometry and vocabulary of the synthetic paired task.
///
/// A grid shows one object (shape, colour, anchor) over a floor of diagonal
/// stripes in four tones. The stripe phase is a latent attribute: prompts do
/// not mention it, captions do. Object cells cycle through four shades of
/// their colour in step with the floor, so any single cell pins the phase.
///
/// Image codes: `0..4` are the floor tones, then four shades per colour
/// (`4 + 4c + s`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTaskSpec {
    pub grid_side: usize,
    pub num_colors: usize,
    pub vocab: VocabLayout,
    /// Caption block length, EOS padding included.
    pub caption_len: usize,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        Self {
            grid_side: 8,
            num_colors: 3,
            vocab: VocabLayout {
                text_vocab_size: 64,
                image_vocab_size: 16,
            },
            caption_len: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attributes {
    pub shape: u8,
    pub color: u8,
    pub anchor: u8,
    pub phase: u8,
}

/// One word per attribute value, each 1–3 caption tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WordTable {
    pub shapes: Vec<Vec<u32>>,
    pub colors: Vec<Vec<u32>>,
    pub rows: Vec<Vec<u32>>,
    pub cols: Vec<Vec<u32>>,
    pub phases: Vec<Vec<u32>>,
}

fn prefix_related(a: &[u32], b: &[u32]) -> bool {
    let n = a.len().min(b.len());
    a[..n] == b[..n]
}

fn word_category(rng: &mut ChaCha8Rng, count: usize) -> Vec<Vec<u32>> {
    let mut words: Vec<Vec<u32>> = Vec::with_capacity(count);
    while words.len() < count {
        let len = rng.random_range(1..=3);
        let w: Vec<u32> = (0..len)
            .map(|_| CAPTION_BASE + rng.random_range(0..CAPTION_TOKENS))
            .collect();
        // prefix-free, so captions parse uniquely
        if words.iter().all(|o| !prefix_related(o, &w)) {
            words.push(w);
        }
    }
    words
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_side < 6 {
            return Err(Error::Config(format!("grid side {} is below 6", self.grid_side)));
        }
        if self.num_colors == 0 {
            return Err(Error::Config("attribute space is empty: no colours".into()));
        }
        let codes = PHASES * (self.num_colors + 1);
        if codes > self.vocab.image_vocab_size as usize {
            return Err(Error::Config(format!(
                "{} colours need {codes} image codes, vocabulary has {}",
                self.num_colors,
                self.vocab.image_vocab_size
            )));
        }
        if self.vocab.text_vocab_size < MIN_TEXT_VOCAB {
            return Err(Error::Config(format!(
                "text vocabulary {} is below {MIN_TEXT_VOCAB}",
                self.vocab.text_vocab_size
            )));
        }
        if self.num_colors > 7 {
            return Err(Error::Config("at most 7 colour prompt words".into()));
        }
        if self.caption_len < 16 {
            return Err(Error::Config("captions need 16 positions".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// Anchor coordinates along one axis.
    pub fn anchor_coords(&self) -> [usize; 3] {
        let g = self.grid_side;
        [1, g / 2 - 1, g - 3]
    }

    pub fn num_anchors(&self) -> usize {
        9
    }

    /// Attribute tuples in canonical order.
    pub fn attribute_space(&self) -> Vec<Attributes> {
        let mut out = Vec::new();
        for shape in 0..SHAPES.len() as u8 {
            for color in 0..self.num_colors as u8 {
                for anchor in 0..self.num_anchors() as u8 {
                    for phase in 0..PHASES as u8 {
                        out.push(Attributes {
                            shape,
                            color,
                            anchor,
                            phase,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn word_table(&self) -> WordTable {
        let mut rng = ChaCha8Rng::seed_from_u64(WORD_TABLE_SEED);
        WordTable {
            shapes: word_category(&mut rng, SHAPES.len()),
            colors: word_category(&mut rng, self.num_colors),
            rows: word_category(&mut rng, 3),
            cols: word_category(&mut rng, 3),
            phases: word_category(&mut rng, PHASES),
        }
    }

    /// `[shape, colour, anchor]` prompt words; the phase is not mentioned.
    pub fn prompt(&self, a: &Attributes) -> Vec<u32> {
        vec![
            PROMPT_BASE + a.shape as u32,
            PROMPT_BASE + 3 + a.color as u32,
            PROMPT_BASE + 10 + a.anchor as u32,
        ]
    }

    /// Inverse of [`ToyTaskSpec::prompt`] with the phase left open.
    pub fn parse_prompt(&self, prompt: &[u32]) -> Option<(u8, u8, u8)> {
        let [s, c, a] = *prompt else { return None };
        let s = s.checked_sub(PROMPT_BASE)?;
        let c = c.checked_sub(PROMPT_BASE + 3)?;
        let a = a.checked_sub(PROMPT_BASE + 10)?;
        (s < 3 && (c as usize) < self.num_colors && (a as usize) < self.num_anchors())
            .then_some((s as u8, c as u8, a as u8))
    }

    /// Cells covered by the object. Size couples to the other attributes:
    /// squares are 3×3 for even colours, 2×2 for odd; bars are 4 long for
    /// odd colours, 3 otherwise, and lengthen by one in the centre anchor.
    pub fn object_cells(&self, a: &Attributes) -> Vec<(usize, usize)> {
        let g = self.grid_side;
        let coords = self.anchor_coords();
        let (r0, c0) = (coords[a.anchor as usize / 3], coords[a.anchor as usize % 3]);
        let mut cells = Vec::new();
        match a.shape {
            0 => {
                let s = if a.color % 2 == 0 { 3 } else { 2 };
                for r in r0..(r0 + s).min(g) {
                    for c in c0..(c0 + s).min(g) {
                        cells.push((r, c));
                    }
                }
            }
            _ => {
                let len = 3 + (a.color % 2) as usize + usize::from(a.anchor == 4);
                let start = |x: usize| x.min(g - len);
                for t in 0..len {
                    cells.push(if a.shape == 1 {
                        (r0, start(c0) + t)
                    } else {
                        (start(r0) + t, c0)
                    });
                }
            }
        }
        cells
    }

    /// Canonical grid as image codes.
    pub fn render_codes(&self, a: &Attributes) -> Vec<u32> {
        let g = self.grid_side;
        let p = PHASES as u32;
        let tone = |r: usize, c: usize| ((r + c + a.phase as usize) % PHASES) as u32;
        let mut grid: Vec<u32> = (0..g * g).map(|i| tone(i / g, i % g)).collect();
        for (r, c) in self.object_cells(a) {
            grid[r * g + c] = p + p * a.color as u32 + tone(r, c);
        }
        grid
    }

    /// Canonical grid as vocabulary ids.
    pub fn render(&self, a: &Attributes) -> Vec<u32> {
        self.render_codes(a)
            .into_iter()
            .map(|c| self.vocab.image_token(c))
            .collect()
    }

    /// Canonical caption: shape, colour, row, column and phase words, then
    /// EOS.
    pub fn caption(&self, a: &Attributes) -> Vec<u32> {
        let w = self.word_table();
        let mut out = Vec::new();
        out.extend(&w.shapes[a.shape as usize]);
        out.extend(&w.colors[a.color as usize]);
        out.extend(&w.rows[a.anchor as usize / 3]);
        out.extend(&w.cols[a.anchor as usize % 3]);
        out.extend(&w.phases[a.phase as usize]);
        out.push(self.vocab.eos());
        out
    }

    /// Caption padded with EOS to `caption_len`.
    pub fn padded_caption(&self, a: &Attributes) -> Vec<u32> {
        let mut c = self.caption(a);
        c.resize(self.caption_len, self.vocab.eos());
        c
    }

    /// Attributes whose rendering is exactly `grid`.
    pub fn attributes_of(&self, grid: &[u32]) -> Option<Attributes> {
        self.attribute_space().into_iter().find(|a| self.render(a) == grid)
    }
}

/// Fraction of cells agreeing with the closest canonical rendering the
/// prompt allows (any phase).
pub fn verify_image(spec: &ToyTaskSpec, prompt: &[u32], grid: &[u32]) -> Result<f64> {
    if grid.len() != spec.cells() {
        return Err(Error::dim(
            "verify_image",
            format!("{} cells, expected {}", grid.len(), spec.cells()),
        ));
    }
    let (shape, color, anchor) = spec
        .parse_prompt(prompt)
        .ok_or_else(|| Error::Data(format!("prompt {prompt:?} is not a task prompt")))?;
    let mut best = 0usize;
    for phase in 0..PHASES as u8 {
        let canon = spec.render(&Attributes {
            shape,
            color,
            anchor,
            phase,
        });
        best = best.max(canon.iter().zip(grid).filter(|(a, b)| a == b).count());
    }
    Ok(best as f64 / grid.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CaptionVerdict {
    Match,
    Mismatch,
    /// The grid is not a canonical rendering.
    Indeterminate,
}

/// Compares `caption`, cut after its first EOS, with the canonical caption
/// of the grid's attributes.
pub fn verify_caption(spec: &ToyTaskSpec, grid: &[u32], caption: &[u32]) -> CaptionVerdict {
    let Some(a) = spec.attributes_of(grid) else {
        log::debug!("verify_caption: grid is not a canonical rendering");
        return CaptionVerdict::Indeterminate;
    };
    let eos = spec.vocab.eos();
    let cut = match caption.iter().position(|&t| t == eos) {
        Some(i) => &caption[..=i],
        None => caption,
    };
    if cut == spec.caption(&a) {
        CaptionVerdict::Match
    } else {
        CaptionVerdict::Mismatch
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairExample {
    pub attributes: Attributes,
    pub prompt: Vec<u32>,
    /// Vocabulary ids, `g×g`.
    pub grid: Vec<u32>,
    /// Canonical caption ending in EOS.
    pub caption: Vec<u32>,
}

impl PairExample {
    pub fn new(spec: &ToyTaskSpec, a: Attributes) -> Self {
        Self {
            attributes: a,
            prompt: spec.prompt(&a),
            grid: spec.render(&a),
            caption: spec.caption(&a),
        }
    }
}

/// Seeded draw: a shuffled pass over the attribute space, then uniform
/// draws with replacement once it is exhausted.
pub fn generate_pairs(spec: &ToyTaskSpec, seed: u64, count: usize) -> Result<Vec<PairExample>> {
    spec.validate()?;
    let space = spec.attribute_space();
    if space.is_empty() {
        return Err(Error::Config("attribute space is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = space.clone();
    order.shuffle(&mut rng);
    if count > space.len() {
        log::info!(
            "{count} pairs requested from {} tuples; continuing with replacement",
            space.len()
        );
    }
    let out = (0..count)
        .map(|i| {
            let a = if i < order.len() {
                order[i]
            } else {
                space[rng.random_range(0..space.len())]
            };
            PairExample::new(spec, a)
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    fn spec() -> ToyTaskSpec {
        ToyTaskSpec::default()
    }

    #[test]
    fn default_spec_is_valid() {
        let s = spec();
        s.validate().unwrap();
        assert_eq!(s.attribute_space().len(), 3 * 3 * 9 * 4);
        for a in s.attribute_space() {
            assert!(s.caption(&a).len() <= 16);
            assert!(s.object_cells(&a).iter().all(|&(r, c)| r < 8 && c < 8));
        }
    }

    #[test]
    fn mapping_is_injective() {
        let s = spec();
        let space = s.attribute_space();
        let grids: HashSet<Vec<u32>> = space.iter().map(|a| s.render(a)).collect();
        let caps: HashSet<Vec<u32>> = space.iter().map(|a| s.caption(a)).collect();
        assert_eq!(grids.len(), space.len());
        assert_eq!(caps.len(), space.len());
    }

    #[test]
    fn same_seed_same_pairs_and_full_coverage() {
        let s = spec();
        let n = s.attribute_space().len();
        let a = generate_pairs(&s, 7, n).unwrap();
        assert_eq!(a, generate_pairs(&s, 7, n).unwrap());
        let seen: HashSet<Attributes> = a.iter().map(|p| p.attributes).collect();
        assert_eq!(seen.len(), n);
        assert_ne!(a, generate_pairs(&s, 8, n).unwrap());
        assert_eq!(generate_pairs(&s, 7, n + 10).unwrap().len(), n + 10);
    }

    #[test]
    fn every_pair_verifies() {
        let s = spec();
        for p in generate_pairs(&s, 1, 400).unwrap() {
            assert_eq!(verify_image(&s, &p.prompt, &p.grid).unwrap(), 1.0);
            assert_eq!(verify_caption(&s, &p.grid, &p.caption), CaptionVerdict::Match);
        }
    }

    #[test]
    fn floor_only_grid_agreement() {
        let s = spec();
        let a = Attributes {
            shape: 0,
            color: 0,
            anchor: 0,
            phase: 0,
        };
        let mut grid = s.render(&a);
        // erase the object, leaving the phase-0 floor
        for (r, c) in s.object_cells(&a) {
            grid[r * 8 + c] = s.vocab.image_token(((r + c) % 4) as u32);
        }
        let area = s.object_cells(&a).len();
        let got = verify_image(&s, &s.prompt(&a), &grid).unwrap();
        assert!((got - (1.0 - area as f64 / 64.0)).abs() < 1e-12);
    }

    #[test]
    fn random_grid_is_near_chance() {
        let s = spec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let space = s.attribute_space();
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let a = space[rng.random_range(0..space.len())];
            let grid: Vec<u32> = (0..64).map(|_| s.vocab.image_token(rng.random_range(0..16))).collect();
            total += verify_image(&s, &s.prompt(&a), &grid).unwrap();
        }
        let mean = total / trials as f64;
        // max over four phases of Binomial(64, 1/16)/64
        assert!((0.07..0.12).contains(&mean), "{mean}");
    }

    #[test]
    fn caption_checks() {
        let s = spec();
        let a = s.attribute_space()[17];
        let grid = s.render(&a);
        let mut cap = s.padded_caption(&a);
        assert_eq!(verify_caption(&s, &grid, &cap), CaptionVerdict::Match);
        cap[0] = if cap[0] == CAPTION_BASE { CAPTION_BASE + 1 } else { CAPTION_BASE };
        assert_eq!(verify_caption(&s, &grid, &cap), CaptionVerdict::Mismatch);
        let mut odd = grid.clone();
        odd[0] = s.vocab.image_token(5);
        assert_eq!(verify_caption(&s, &odd, &cap), CaptionVerdict::Indeterminate);
    }

    #[test]
    fn exhaustive_roundtrip() {
        let s = spec();
        for a in s.attribute_space() {
            assert_eq!(s.attributes_of(&s.render(&a)), Some(a));
            assert_eq!(s.parse_prompt(&s.prompt(&a)), Some((a.shape, a.color, a.anchor)));
        }
    }
}
