//! Bracketed-repetition grammar for the pure-text corpus.
//!
//! ```text
//! S     := group+ EOS
//! group := open_k sym_k^n close_k      k ∈ 0..6, n ∈ 1..=4
//! ```
//!
//! Symbols and the closing bracket are fixed by the opening bracket, so only
//! the bracket choice and the repetition count carry entropy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::task::PURE_TEXT_BASE;

pub const KINDS: u32 = 6;
pub const MAX_REPEAT: usize = 4;

fn open(k: u32) -> u32 {
    PURE_TEXT_BASE + k
}

fn sym(k: u32) -> u32 {
    PURE_TEXT_BASE + KINDS + k
}

fn close(k: u32) -> u32 {
    PURE_TEXT_BASE + 2 * KINDS + k
}

/// `count` sequences of at most `max_len` tokens each, EOS included.
/// `max_len` below 4 leaves no room for a group, so the corpus is empty.
pub fn generate_pure_text(seed: u64, count: usize, max_len: usize, eos: u32) -> Vec<Vec<u32>> {
    if max_len < 4 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let mut s = Vec::new();
            loop {
                let k = rng.random_range(0..KINDS);
                let n = rng.random_range(1..=MAX_REPEAT);
                if !s.is_empty() && s.len() + n + 2 + 1 > max_len {
                    break;
                }
                let n = n.min(max_len - s.len() - 3);
                s.push(open(k));
                s.extend(std::iter::repeat_n(sym(k), n));
                s.push(close(k));
                if rng.random_bool(0.35) {
                    break;
                }
            }
            s.push(eos);
            s
        })
        .collect()
}

/// Recognizer for the grammar.
pub fn accepts(seq: &[u32], eos: u32) -> bool {
    let Some((&last, body)) = seq.split_last() else {
        return false;
    };
    if last != eos || body.is_empty() {
        return false;
    }
    let mut i = 0;
    while i < body.len() {
        let Some(k) = body[i].checked_sub(PURE_TEXT_BASE).filter(|&k| k < KINDS) else {
            return false;
        };
        i += 1;
        let start = i;
        while i < body.len() && body[i] == sym(k) {
            i += 1;
        }
        let n = i - start;
        if !(1..=MAX_REPEAT).contains(&n) || i >= body.len() || body[i] != close(k) {
            return false;
        }
        i += 1;
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    const EOS: u32 = 64;

    #[test]
    fn deterministic_and_accepted() {
        let a = generate_pure_text(5, 200, 24, EOS);
        assert_eq!(a, generate_pure_text(5, 200, 24, EOS));
        assert_eq!(a.len(), 200);
        for s in &a {
            assert!(s.len() <= 24);
            assert!(accepts(s, EOS), "{s:?}");
        }
        assert!(generate_pure_text(5, 0, 24, EOS).is_empty());
    }

    #[test]
    fn recognizer_rejects() {
        assert!(accepts(&[open(1), sym(1), close(1), EOS], EOS));
        assert!(!accepts(&[open(1), sym(2), close(1), EOS], EOS));
        assert!(!accepts(&[open(1), close(1), EOS], EOS));
        assert!(!accepts(&[open(1), sym(1), close(1)], EOS));
        assert!(!accepts(&[EOS], EOS));
        assert!(!accepts(&[open(0), sym(0), sym(0), sym(0), sym(0), sym(0), close(0), EOS], EOS));
    }
}
