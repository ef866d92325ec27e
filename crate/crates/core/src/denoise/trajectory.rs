//! Recorded sampling trajectories and their on-disk store.
//!
//! Store layout: a data file of records, each `len u64` followed by `len`
//! bytes, and a text index with one `offset length kind steps` line per
//! record. All integers little-endian.
//!
//! Image record: `kind=1 u8, K u32, m u32, I u32, cfg f64, prompt (u32 len,
//! u32s), (K+1)·m u32 states, K step records (count u32, positions u32s,
//! confidences f32s, logits count·I f32s), (K+1)·m·I f32 labels`.
//!
//! Text record: `kind=2 u8, K u32, n u32, capped u8, context (u32 len, u32
//! tokens, u8 tags), (K+1)·n u32 iterates`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SegmentLayout, SegmentTag, TokenSeq};

/// Positions committed by one sampler step, with the confidence and the
/// image-codebook logits each was decided with.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub positions: Vec<u32>,
    pub confidences: Vec<f32>,
    /// `positions.len() × I`.
    pub logits: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTrajectory {
    pub prompt: Vec<u32>,
    pub cfg_scale: f64,
    pub image_vocab: usize,
    /// `u^0..u^K`, grid cells as vocabulary ids.
    pub states: Vec<Vec<u32>>,
    /// Step `k` turns `u^k` into `u^{k+1}`.
    pub steps: Vec<StepRecord>,
    /// `P^0..P^K`, each `m × I`.
    pub reg_labels: Vec<Vec<f32>>,
}

impl ImageTrajectory {
    pub fn num_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &[u32] {
        self.states.last().expect("at least u^0")
    }

    pub fn masked_positions(&self, k: usize, mask_id: u32) -> Vec<usize> {
        self.states[k]
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t == mask_id)
            .map(|(i, _)| i)
            .collect()
    }

    /// Checks the structural invariants: a MASK-free endpoint, frozen
    /// commitments, exactly the recorded positions committed per step, and a
    /// zero `P^0`.
    pub fn validate(&self, mask_id: u32) -> Result<()> {
        let k = self.num_steps();
        if self.steps.len() != k || self.reg_labels.len() != k + 1 {
            return Err(Error::State("trajectory arrays disagree on K".into()));
        }
        if self.final_state().contains(&mask_id) {
            return Err(Error::State("final state still has MASK tokens".into()));
        }
        if self.reg_labels[0].iter().any(|&x| x != 0.0) {
            return Err(Error::State("P^0 is not zero".into()));
        }
        for s in 0..k {
            let (a, b) = (&self.states[s], &self.states[s + 1]);
            let mut changed = Vec::new();
            for i in 0..a.len() {
                if a[i] != mask_id && a[i] != b[i] {
                    return Err(Error::State(format!("position {i} changed after commit at step {s}")));
                }
                if a[i] == mask_id && b[i] != mask_id {
                    changed.push(i as u32);
                }
            }
            if changed != self.steps[s].positions {
                return Err(Error::State(format!("step {s} record does not match its state change")));
            }
        }
        Ok(())
    }
}

/// Jacobi iterates for one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextTrajectory {
    /// Everything before the block.
    pub context: TokenSeq,
    /// `v^0..v^K`; `v^K == v^{K−1}` unless capped.
    pub iterates: Vec<Vec<u32>>,
    pub capped: bool,
}

impl TextTrajectory {
    /// Forward passes spent, `K`.
    pub fn converged_iteration(&self) -> usize {
        self.iterates.len() - 1
    }

    pub fn block_len(&self) -> usize {
        self.iterates[0].len()
    }

    pub fn fixed_point(&self) -> &[u32] {
        self.iterates.last().expect("at least v^0")
    }

    /// Fixed point cut after the first EOS.
    pub fn output(&self, eos: u32) -> &[u32] {
        let fp = self.fixed_point();
        match fp.iter().position(|&t| t == eos) {
            Some(i) => &fp[..=i],
            None => fp,
        }
    }

    /// Context followed by iterate `k`.
    pub fn sequence(&self, k: usize) -> TokenSeq {
        let mut s = self.context.clone();
        s.extend_response(&self.iterates[k]);
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Trajectory {
    Image(ImageTrajectory),
    Text(TextTrajectory),
}

impl Trajectory {
    fn kind(&self) -> u8 {
        match self {
            Trajectory::Image(_) => 1,
            Trajectory::Text(_) => 2,
        }
    }

    fn steps(&self) -> usize {
        match self {
            Trajectory::Image(t) => t.num_steps(),
            Trajectory::Text(t) => t.converged_iteration(),
        }
    }
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32s(&mut self, v: &[u32]) {
        v.iter().for_each(|&x| self.u32(x));
    }
    fn f32s(&mut self, v: &[f32]) {
        v.iter().for_each(|&x| self.0.extend_from_slice(&x.to_le_bytes()));
    }
}

struct Dec<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len());
        let end = end.ok_or_else(|| Error::Format("truncated trajectory record".into()))?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn len(&mut self, limit: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > limit {
            return Err(Error::Format(format!("length {n} exceeds record size")));
        }
        Ok(n)
    }
    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        Ok(self
            .take(n.checked_mul(4).ok_or_else(|| Error::Format("overflow".into()))?)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self.u32s(n)?.into_iter().map(f32::from_bits).collect())
    }
}

fn tag_code(t: SegmentTag) -> u8 {
    match t {
        SegmentTag::PromptText => 0,
        SegmentTag::Image => 1,
        SegmentTag::ResponseText => 2,
        SegmentTag::Pad => 3,
    }
}

fn tag_from(c: u8) -> Result<SegmentTag> {
    Ok(match c {
        0 => SegmentTag::PromptText,
        1 => SegmentTag::Image,
        2 => SegmentTag::ResponseText,
        3 => SegmentTag::Pad,
        _ => return Err(Error::Format(format!("unknown segment tag {c}"))),
    })
}

pub fn encode(t: &Trajectory) -> Vec<u8> {
    let mut e = Enc(Vec::new());
    e.u8(t.kind());
    match t {
        Trajectory::Image(t) => {
            let m = t.states[0].len();
            e.u32(t.num_steps() as u32);
            e.u32(m as u32);
            e.u32(t.image_vocab as u32);
            e.0.extend_from_slice(&t.cfg_scale.to_le_bytes());
            e.u32(t.prompt.len() as u32);
            e.u32s(&t.prompt);
            t.states.iter().for_each(|s| e.u32s(s));
            for s in &t.steps {
                e.u32(s.positions.len() as u32);
                e.u32s(&s.positions);
                e.f32s(&s.confidences);
                e.f32s(&s.logits);
            }
            t.reg_labels.iter().for_each(|l| e.f32s(l));
        }
        Trajectory::Text(t) => {
            e.u32(t.converged_iteration() as u32);
            e.u32(t.block_len() as u32);
            e.u8(t.capped as u8);
            e.u32(t.context.len() as u32);
            e.u32s(&t.context.tokens);
            t.context.layout.tags().iter().for_each(|&g| e.u8(tag_code(g)));
            t.iterates.iter().for_each(|v| e.u32s(v));
        }
    }
    e.0
}

pub fn decode(bytes: &[u8]) -> Result<Trajectory> {
    let mut d = Dec { b: bytes, pos: 0 };
    let lim = bytes.len();
    let out = match d.u8()? {
        1 => {
            let k = d.len(lim)?;
            let m = d.len(lim)?;
            let iv = d.len(lim)?;
            let cfg_scale = f64::from_le_bytes(d.take(8)?.try_into().expect("8 bytes"));
            let plen = d.len(lim)?;
            let prompt = d.u32s(plen)?;
            let states = (0..=k).map(|_| d.u32s(m)).collect::<Result<Vec<_>>>()?;
            let mut steps = Vec::with_capacity(k);
            for _ in 0..k {
                let c = d.len(lim)?;
                steps.push(StepRecord {
                    positions: d.u32s(c)?,
                    confidences: d.f32s(c)?,
                    logits: d.f32s(c * iv)?,
                });
            }
            let reg_labels = (0..=k).map(|_| d.f32s(m * iv)).collect::<Result<Vec<_>>>()?;
            Trajectory::Image(ImageTrajectory {
                prompt,
                cfg_scale,
                image_vocab: iv,
                states,
                steps,
                reg_labels,
            })
        }
        2 => {
            let k = d.len(lim)?;
            let n = d.len(lim)?;
            let capped = d.u8()? != 0;
            let clen = d.len(lim)?;
            let tokens = d.u32s(clen)?;
            let tags = d.take(clen)?.iter().map(|&c| tag_from(c)).collect::<Result<Vec<_>>>()?;
            let iterates = (0..=k).map(|_| d.u32s(n)).collect::<Result<Vec<_>>>()?;
            Trajectory::Text(TextTrajectory {
                context: TokenSeq {
                    tokens,
                    layout: SegmentLayout::new(tags)?,
                },
                iterates,
                capped,
            })
        }
        other => return Err(Error::Format(format!("unknown trajectory kind {other}"))),
    };
    if d.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in trajectory record".into()));
    }
    Ok(out)
}

fn path_err(path: &Path, e: std::io::Error) -> Error {
    Error::Path {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

/// Writes `data` and its index `index`.
pub fn write_store(data: &Path, index: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(data).map_err(|e| path_err(data, e))?);
    let mut idx = String::new();
    let mut offset = 0u64;
    for t in trajs {
        let blob = encode(t);
        w.write_all(&(blob.len() as u64).to_le_bytes())?;
        w.write_all(&blob)?;
        idx.push_str(&format!("{offset} {} {} {}\n", blob.len(), t.kind(), t.steps()));
        offset += 8 + blob.len() as u64;
    }
    w.flush()?;
    fs::write(index, idx).map_err(|e| path_err(index, e))?;
    Ok(())
}

/// Reads every record listed in the index.
pub fn read_store(data: &Path, index: &Path) -> Result<Vec<Trajectory>> {
    let bytes = fs::read(data).map_err(|e| path_err(data, e))?;
    let idx = BufReader::new(fs::File::open(index).map_err(|e| path_err(index, e))?);
    let mut out = Vec::new();
    for line in idx.lines() {
        let line = line?;
        let f: Vec<u64> = line
            .split_whitespace()
            .map(|x| x.parse().map_err(|_| Error::Format(format!("bad index line {line:?}"))))
            .collect::<Result<_>>()?;
        let [offset, len, ..] = f[..] else {
            return Err(Error::Format(format!("bad index line {line:?}")));
        };
        let start = offset as usize + 8;
        let end = start + len as usize;
        if end > bytes.len() || bytes[offset as usize..start] != len.to_le_bytes() {
            return Err(Error::Format(format!("index entry at {offset} does not match data")));
        }
        out.push(decode(&bytes[start..end])?);
    }
    Ok(out)
}

/// Human-readable dump: one JSON object per line.
pub fn dump_lines(trajs: &[Trajectory]) -> Result<String> {
    let mut s = String::new();
    for t in trajs {
        let v = match t {
            Trajectory::Image(t) => serde_json::json!({"kind": "image", "trajectory": t}),
            Trajectory::Text(t) => serde_json::json!({"kind": "text", "trajectory": t}),
        };
        s.push_str(&serde_json::to_string(&v)?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SegmentTag::*;

    fn sample_image_traj() -> ImageTrajectory {
        ImageTrajectory {
            prompt: vec![1, 2],
            cfg_scale: 1.5,
            image_vocab: 2,
            states: vec![vec![9, 9], vec![3, 9], vec![3, 4]],
            steps: vec![
                StepRecord {
                    positions: vec![0],
                    confidences: vec![0.7],
                    logits: vec![0.1, 0.2],
                },
                StepRecord {
                    positions: vec![1],
                    confidences: vec![0.9],
                    logits: vec![-1.0, 2.0],
                },
            ],
            reg_labels: vec![vec![0.0; 4], vec![0.1, 0.2, 0.0, 0.5], vec![0.1, 0.2, -1.0, 2.0]],
        }
    }

    fn sample_text_traj() -> TextTrajectory {
        TextTrajectory {
            context: TokenSeq {
                tokens: vec![5, 6, 7],
                layout: SegmentLayout::new(vec![PromptText, Pad, Image]).unwrap(),
            },
            iterates: vec![vec![1, 2], vec![3, 2], vec![3, 2]],
            capped: false,
        }
    }

    #[test]
    fn validate_catches_changes() {
        let t = sample_image_traj();
        t.validate(9).unwrap();
        let mut bad = t.clone();
        bad.states[2][0] = 4;
        assert!(bad.validate(9).is_err());
        let mut bad = t.clone();
        bad.reg_labels[0][1] = 1.0;
        assert!(bad.validate(9).is_err());
    }

    #[test]
    fn record_roundtrip_and_store() {
        let items = vec![Trajectory::Image(sample_image_traj()), Trajectory::Text(sample_text_traj())];
        for t in &items {
            assert_eq!(&decode(&encode(t)).unwrap(), t);
            let b = encode(t);
            assert!(decode(&b[..b.len() - 1]).is_err());
        }
        let dir = tempfile::tempdir().unwrap();
        let (d, i) = (dir.path().join("t.bin"), dir.path().join("t.idx"));
        write_store(&d, &i, &items).unwrap();
        assert_eq!(read_store(&d, &i).unwrap(), items);
        let dump = dump_lines(&items).unwrap();
        assert_eq!(dump.lines().count(), 2);
        for l in dump.lines() {
            serde_json::from_str::<serde_json::Value>(l).unwrap();
        }
    }

    #[test]
    fn text_accessors() {
        let t = sample_text_traj();
        assert_eq!(t.converged_iteration(), 2);
        assert_eq!(t.output(3), &[3]);
        assert_eq!(t.sequence(1).tokens, vec![5, 6, 7, 3, 2]);
    }
}
