//! Training objectives, built on a gradient tape over the student's
//! parameter nodes. Frozen-model targets come from a separate tape-free
//! forward and never receive gradients.
//!
//! Every term is a mean over all contributing positions of the batch.

use std::ops::Range;

use crate::denoise::{ImageTrajectory, TextTrajectory};
use crate::error::{Error, Result};
use crate::model::{bind, forward_graph, ModelConfig, TokenSeq};
use crate::numerics::{log_softmax_vec, Graph, Real, Tensor, Var};

use super::plan::LossWeights;

/// Logits of a batch under fixed parameters.
pub fn frozen_logits<T: Real>(config: &ModelConfig, params: &[Tensor<T>], batch: &[&TokenSeq]) -> Result<Tensor<T>> {
    let mut g = Graph::<T>::new();
    let vars = bind(&mut g, params, false);
    let out = forward_graph(config, &mut g, &vars, batch)?;
    Ok(g.into_value(out))
}

fn zero<T: Real>(g: &mut Graph<T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

/// Student log-probabilities over `cols` at `rows`.
fn student_logp<T: Real>(g: &mut Graph<T>, logits: Var, rows: &[usize], cols: &Range<usize>) -> Result<Var> {
    let x = g.gather_rows(logits, rows)?;
    let x = g.slice_cols(x, cols.start, cols.len())?;
    g.log_softmax(x)
}

fn target_tensor<T: Real>(rows: usize, width: usize, data: Vec<T>) -> Result<Tensor<T>> {
    Tensor::new(vec![rows, width], data)
}

fn ce_rows<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    rows: &[usize],
    cols: &Range<usize>,
    targets: &[usize],
) -> Result<Var> {
    if rows.is_empty() {
        return Ok(zero(g));
    }
    let x = g.gather_rows(logits, rows)?;
    let x = g.slice_cols(x, cols.start, cols.len())?;
    let rel: Vec<usize> = targets
        .iter()
        .map(|&t| {
            t.checked_sub(cols.start)
                .filter(|&r| r < cols.len())
                .ok_or_else(|| Error::Index(format!("target {t} outside output range {cols:?}")))
        })
        .collect::<Result<_>>()?;
    g.cross_entropy(x, &rel)
}

/// One image trajectory with a sampled step `k` and its segment endpoint
/// `e ≥ k`.
#[derive(Clone, Copy, Debug)]
pub struct ImageSample<'a> {
    pub traj: &'a ImageTrajectory,
    pub k: usize,
    pub e: usize,
}

/// One Jacobi trajectory with a sampled iterate `k` and endpoint `e ≥ k`.
#[derive(Clone, Copy, Debug)]
pub struct TextSample<'a> {
    pub traj: &'a TextTrajectory,
    pub k: usize,
    pub e: usize,
}

/// Image consistency and image regularization terms, sharing one student
/// forward on `u^k`.
///
/// Both are read at the positions masked in `u^k`. The consistency target is
/// the frozen model on `u^e`; the regularization target is `softmax(P^e)`.
/// A batch with no masked positions contributes 0.
pub fn image_terms<T: Real>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    vars: &[Var],
    frozen: &[Tensor<T>],
    items: &[ImageSample],
) -> Result<(Var, Var)> {
    if items.is_empty() {
        let z = zero(g);
        return Ok((z, z));
    }
    let fmt = config.format();
    let v = config.vocab;
    let range = v.image_range();
    let iv = range.len();
    let mut student = Vec::with_capacity(items.len());
    let mut target = Vec::with_capacity(items.len());
    for it in items {
        let k_max = it.traj.num_steps();
        if it.k > it.e || it.e > k_max {
            return Err(Error::State(format!("steps k={} e={} outside 0..={k_max}", it.k, it.e)));
        }
        if it.traj.reg_labels.len() != k_max + 1 {
            return Err(Error::Data("trajectory lacks regularization labels".into()));
        }
        student.push(fmt.t2i(&it.traj.prompt, &it.traj.states[it.k])?);
        target.push(fmt.t2i(&it.traj.prompt, &it.traj.states[it.e])?);
    }
    let refs: Vec<&TokenSeq> = student.iter().collect();
    let logits = forward_graph(config, g, vars, &refs)?;
    let trefs: Vec<&TokenSeq> = target.iter().collect();
    let tlogits = frozen_logits(config, frozen, &trefs)?;

    let len = fmt.t2i_len();
    let mut rows = Vec::new();
    let mut cons = Vec::new();
    let mut reg = Vec::new();
    for (b, it) in items.iter().enumerate() {
        let label = &it.traj.reg_labels[it.e];
        for p in it.traj.masked_positions(it.k, v.mask()) {
            let row = b * len + fmt.image_start() + p;
            rows.push(row);
            cons.extend(log_softmax_vec(&tlogits.row(row)[range.clone()]));
            let lp: Vec<T> = label[p * iv..(p + 1) * iv].iter().map(|&x| T::from_f64(x as f64)).collect();
            reg.extend(log_softmax_vec(&lp));
        }
    }
    if rows.is_empty() {
        let z = zero(g);
        return Ok((z, z));
    }
    let q = student_logp(g, logits, &rows, &range)?;
    let n = rows.len();
    let c = g.kl_to_target(&target_tensor(n, iv, cons)?, q)?;
    let r = g.kl_to_target(&target_tensor(n, iv, reg)?, q)?;
    Ok((c, r))
}

/// Text consistency and text regularization terms.
///
/// Consistency: the student on `[context, v^k]` against the frozen model on
/// `[context, v^e]`, per block position. Regularization: teacher-forced
/// cross-entropy of the student on `[context, v^K]` against `v^K`.
pub fn text_terms<T: Real>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    vars: &[Var],
    frozen: &[Tensor<T>],
    items: &[TextSample],
) -> Result<(Var, Var)> {
    if items.is_empty() {
        let z = zero(g);
        return Ok((z, z));
    }
    let range = config.vocab.text_output_range();
    let width = range.len();
    let len = items[0].traj.context.len() + items[0].traj.block_len();
    let mut at_k = Vec::with_capacity(items.len());
    let mut at_e = Vec::with_capacity(items.len());
    let mut at_end = Vec::with_capacity(items.len());
    for it in items {
        let kk = it.traj.converged_iteration();
        if it.k > it.e || it.e > kk {
            return Err(Error::State(format!("iterates k={} e={} outside 0..={kk}", it.k, it.e)));
        }
        at_k.push(it.traj.sequence(it.k));
        at_e.push(it.traj.sequence(it.e));
        at_end.push(it.traj.sequence(kk));
    }
    let refs: Vec<&TokenSeq> = at_k.iter().collect();
    let logits = forward_graph(config, g, vars, &refs)?;
    let erefs: Vec<&TokenSeq> = at_e.iter().collect();
    let tlogits = frozen_logits(config, frozen, &erefs)?;
    let frefs: Vec<&TokenSeq> = at_end.iter().collect();
    let end_logits = forward_graph(config, g, vars, &frefs)?;

    let mut rows = Vec::new();
    let mut cons = Vec::new();
    let mut targets = Vec::new();
    for (b, it) in items.iter().enumerate() {
        let start = it.traj.context.len() - 1;
        let fp = it.traj.fixed_point();
        for (i, &tok) in fp.iter().enumerate() {
            let row = b * len + start + i;
            rows.push(row);
            cons.extend(log_softmax_vec(&tlogits.row(row)[range.clone()]));
            targets.push(tok as usize);
        }
    }
    let q = student_logp(g, logits, &rows, &range)?;
    let c = g.kl_to_target(&target_tensor(rows.len(), width, cons)?, q)?;
    let r = ce_rows(g, end_logits, &rows, &range, &targets)?;
    Ok((c, r))
}

/// Next-token cross-entropy over non-PAD targets of `[BOS, tokens…, PAD…]`
/// sequences padded to `len`.
pub fn ar_loss<T: Real>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    vars: &[Var],
    seqs: &[Vec<u32>],
    len: usize,
) -> Result<Var> {
    if seqs.is_empty() {
        return Ok(zero(g));
    }
    let fmt = config.format();
    let batch = seqs
        .iter()
        .map(|s| fmt.padded_text(s, len))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TokenSeq> = batch.iter().collect();
    let logits = forward_graph(config, g, vars, &refs)?;
    let pad = config.vocab.pad();
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, s) in batch.iter().enumerate() {
        for i in 0..len - 1 {
            let t = s.tokens[i + 1];
            if t != pad {
                rows.push(b * len + i);
                targets.push(t as usize);
            }
        }
    }
    ce_rows(g, logits, &rows, &config.vocab.text_output_range(), &targets)
}

/// Caption next-token loss on `[BOS, PAD…][SOI, grid, EOI] caption`.
pub fn caption_loss<T: Real>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    vars: &[Var],
    items: &[(&[u32], &[u32])],
) -> Result<Var> {
    if items.is_empty() {
        return Ok(zero(g));
    }
    let fmt = config.format();
    let batch = items
        .iter()
        .map(|(grid, cap)| fmt.mmu(grid, cap))
        .collect::<Result<Vec<_>>>()?;
    let len = batch[0].len();
    let refs: Vec<&TokenSeq> = batch.iter().collect();
    let logits = forward_graph(config, g, vars, &refs)?;
    let start = fmt.t2i_len() - 1;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, (_, cap)) in items.iter().enumerate() {
        for (i, &t) in cap.iter().enumerate() {
            rows.push(b * len + start + i);
            targets.push(t as usize);
        }
    }
    ce_rows(g, logits, &rows, &config.vocab.text_output_range(), &targets)
}

/// A grid with some positions hidden. `prompt = None` selects the
/// NULL-prompt branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MtpItem {
    pub prompt: Option<Vec<u32>>,
    /// True grid, vocabulary ids.
    pub grid: Vec<u32>,
    pub masked: Vec<usize>,
}

/// Mask-token cross-entropy at the hidden positions, with the one-hot
/// target mixed with a uniform one by `smoothing`. `None` when the batch
/// hides nothing.
pub fn mtp_loss<T: Real>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    vars: &[Var],
    items: &[MtpItem],
    smoothing: f64,
) -> Result<Option<Var>> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!("label smoothing {smoothing} outside [0, 1)")));
    }
    let total: usize = items.iter().map(|i| i.masked.len()).sum();
    if total == 0 {
        log::warn!("mtp batch has no masked positions; skipped");
        return Ok(None);
    }
    let fmt = config.format();
    let v = config.vocab;
    let mut batch = Vec::with_capacity(items.len());
    for it in items {
        let mut grid = it.grid.clone();
        for &p in &it.masked {
            *grid
                .get_mut(p)
                .ok_or_else(|| Error::Index(format!("masked position {p} outside grid")))? = v.mask();
        }
        batch.push(match &it.prompt {
            Some(p) => fmt.t2i(p, &grid)?,
            None => fmt.t2i_null(&grid)?,
        });
    }
    let refs: Vec<&TokenSeq> = batch.iter().collect();
    let logits = forward_graph(config, g, vars, &refs)?;
    let len = fmt.t2i_len();
    let mut rows = Vec::with_capacity(total);
    let mut targets = Vec::with_capacity(total);
    for (b, it) in items.iter().enumerate() {
        for &p in &it.masked {
            rows.push(b * len + fmt.image_start() + p);
            targets.push(it.grid[p] as usize);
        }
    }
    let range = v.image_range();
    let ce = ce_rows(g, logits, &rows, &range, &targets)?;
    if smoothing == 0.0 {
        return Ok(Some(ce));
    }
    let lp = student_logp(g, logits, &rows, &range)?;
    let uniform = g.mean(lp);
    g.weighted_sum(&[(ce, 1.0 - smoothing), (uniform, -smoothing)]).map(Some)
}

/// The five terms of the distillation objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub image_consistency: Var,
    pub text_consistency: Var,
    pub image_reg: Var,
    pub text_reg: Var,
    pub ar: Var,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, Var); 5] {
        [
            ("image_consistency", self.image_consistency),
            ("text_consistency", self.text_consistency),
            ("image_reg", self.image_reg),
            ("text_reg", self.text_reg),
            ("ar", self.ar),
        ]
    }
}

/// `c_u + α·c_v + β·reg_u + γ·reg_v + δ·ar`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    g.weighted_sum(&[
        (terms.image_consistency, 1.0),
        (terms.text_consistency, w.alpha),
        (terms.image_reg, w.beta),
        (terms.text_reg, w.gamma),
        (terms.ar, w.delta),
    ])
}

/// Inputs of one distillation step.
#[derive(Clone, Debug, Default)]
pub struct DistillBatch<'a> {
    pub images: Vec<ImageSample<'a>>,
    pub texts: Vec<TextSample<'a>>,
    /// Pure-text sequences; each is laid out as `[BOS, tokens…]` padded to
    /// `ar_len` positions.
    pub ar: Vec<Vec<u32>>,
    pub ar_len: usize,
}

/// All five terms on one tape.
pub fn distill_terms<T: Real>(
    config: &ModelConfig,
    g: &mut Graph<T>,
    vars: &[Var],
    frozen: &[Tensor<T>],
    batch: &DistillBatch,
) -> Result<LossTerms> {
    let (image_consistency, image_reg) = image_terms(config, g, vars, frozen, &batch.images)?;
    let (text_consistency, text_reg) = text_terms(config, g, vars, frozen, &batch.texts)?;
    let ar = ar_loss(config, g, vars, &batch.ar, batch.ar_len)?;
    Ok(LossTerms {
        image_consistency,
        text_consistency,
        image_reg,
        text_reg,
        ar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::{jacobi_decode, StepRecord};
    use crate::model::{init_model, Model};

    fn models() -> (Model, Model) {
        let cfg = ModelConfig::tiny();
        let a = init_model(&cfg).unwrap();
        let b = init_model(&ModelConfig { rng_seed: 9, ..cfg }).unwrap();
        (a, b)
    }

    fn lsm(row: &[f32]) -> Vec<f64> {
        log_softmax_vec(&row.iter().map(|&x| x as f64).collect::<Vec<_>>())
    }

    fn kl(p_logits: &[f32], q_logits: &[f32]) -> f64 {
        let (p, q) = (lsm(p_logits), lsm(q_logits));
        p.iter().zip(&q).map(|(a, b)| a.exp() * (a - b)).sum()
    }

    fn eval<F>(student: &Model, build: F) -> f64
    where
        F: FnOnce(&mut Graph<f32>, &[Var]) -> Var,
    {
        let mut g = Graph::<f32>::new();
        let vars = bind(&mut g, &student.params, true);
        let out = build(&mut g, &vars);
        g.value(out).item() as f64
    }

    /// Two steps over a 4-cell grid: cells 1 and 2 commit first.
    fn hand_trajectory(cfg: &ModelConfig) -> ImageTrajectory {
        let v = cfg.vocab;
        let m = v.mask();
        let (a, b, c, d) = (v.image_token(0), v.image_token(3), v.image_token(1), v.image_token(2));
        let labels = (0..3)
            .map(|s| (0..16).map(|i| if s == 0 { 0.0 } else { ((i * 7 + s) % 5) as f32 - 2.0 }).collect())
            .collect();
        ImageTrajectory {
            prompt: vec![1, 2],
            cfg_scale: 0.0,
            image_vocab: 4,
            states: vec![vec![m; 4], vec![m, b, c, m], vec![a, b, c, d]],
            steps: vec![StepRecord::default(), StepRecord::default()],
            reg_labels: labels,
        }
    }

    #[test]
    fn image_terms_match_scalar_loops() {
        let (student, frozen) = models();
        let cfg = student.config;
        let fmt = cfg.format();
        let traj = hand_trajectory(&cfg);
        let range = cfg.vocab.image_range();
        for (k, e) in [(0usize, 2usize), (1, 2), (0, 1)] {
            let s_logits = student.forward(&fmt.t2i(&traj.prompt, &traj.states[k]).unwrap()).unwrap();
            let f_logits = frozen.forward(&fmt.t2i(&traj.prompt, &traj.states[e]).unwrap()).unwrap();
            let masked = traj.masked_positions(k, cfg.vocab.mask());
            let (mut c, mut r) = (0.0, 0.0);
            for &p in &masked {
                let row = fmt.image_start() + p;
                let q = &s_logits.row(row)[range.clone()];
                c += kl(&f_logits.row(row)[range.clone()], q);
                r += kl(&traj.reg_labels[e][p * 4..(p + 1) * 4], q);
            }
            let n = masked.len() as f64;
            let item = [ImageSample { traj: &traj, k, e }];
            let mut g = Graph::<f32>::new();
            let vars = bind(&mut g, &student.params, true);
            let (cv, rv) = image_terms(&cfg, &mut g, &vars, &frozen.params, &item).unwrap();
            assert!((g.value(cv).item() as f64 - c / n).abs() < 1e-5, "k={k}");
            assert!((g.value(rv).item() as f64 - r / n).abs() < 1e-5, "k={k}");
        }
    }

    #[test]
    fn image_terms_edge_cases() {
        let (student, frozen) = models();
        let cfg = student.config;
        let traj = hand_trajectory(&cfg);
        // Nothing masked at the endpoint.
        let item = [ImageSample { traj: &traj, k: 2, e: 2 }];
        let c = eval(&student, |g, v| image_terms(&cfg, g, v, &frozen.params, &item).unwrap().0);
        assert_eq!(c, 0.0);
        let mut bare = traj.clone();
        bare.reg_labels.clear();
        let item = [ImageSample { traj: &bare, k: 0, e: 2 }];
        let mut g = Graph::<f32>::new();
        let vars = bind(&mut g, &student.params, true);
        assert!(matches!(image_terms(&cfg, &mut g, &vars, &frozen.params, &item), Err(Error::Data(_))));
        let item = [ImageSample { traj: &traj, k: 2, e: 1 }];
        assert!(image_terms(&cfg, &mut g, &vars, &frozen.params, &item).is_err());
    }

    #[test]
    fn text_terms_match_scalar_loops() {
        let (student, frozen) = models();
        let cfg = student.config;
        let fmt = cfg.format();
        let range = cfg.vocab.text_output_range();
        let ctx = fmt.mmu(&[cfg.vocab.image_token(1); 4], &[]).unwrap();
        let traj = jacobi_decode(&frozen, &ctx, 4, 20, 5).unwrap();
        let kk = traj.converged_iteration();
        let start = ctx.len() - 1;
        for (k, e) in [(0, kk), (0, 1.min(kk)), (kk, kk)] {
            let s = student.forward(&traj.sequence(k)).unwrap();
            let f = frozen.forward(&traj.sequence(e)).unwrap();
            let end = student.forward(&traj.sequence(kk)).unwrap();
            let (mut c, mut r) = (0.0, 0.0);
            for (i, &t) in traj.fixed_point().iter().enumerate() {
                c += kl(&f.row(start + i)[range.clone()], &s.row(start + i)[range.clone()]);
                r -= lsm(&end.row(start + i)[range.clone()])[t as usize];
            }
            let item = [TextSample { traj: &traj, k, e }];
            let mut g = Graph::<f32>::new();
            let vars = bind(&mut g, &student.params, true);
            let (cv, rv) = text_terms(&cfg, &mut g, &vars, &frozen.params, &item).unwrap();
            assert!((g.value(cv).item() as f64 - c / 4.0).abs() < 1e-5);
            assert!((g.value(rv).item() as f64 - r / 4.0).abs() < 1e-5);
        }
    }

    #[test]
    fn consistency_vanishes_at_endpoints_when_student_is_frozen() {
        let (student, _) = models();
        let cfg = student.config;
        let traj = hand_trajectory(&cfg);
        let ctx = cfg.format().mmu(&[cfg.vocab.image_token(2); 4], &[]).unwrap();
        let t = jacobi_decode(&student, &ctx, 4, 20, 1).unwrap();
        let kk = t.converged_iteration();
        for e in [1, 2] {
            let item = [ImageSample { traj: &traj, k: e - 1, e }];
            let same = [ImageSample { traj: &traj, k: e, e }];
            let c = eval(&student, |g, v| image_terms(&cfg, g, v, &student.params, &same).unwrap().0);
            assert!(c.abs() < 1e-6);
            let c = eval(&student, |g, v| image_terms(&cfg, g, v, &student.params, &item).unwrap().0);
            assert!(c >= -1e-7);
        }
        let item = [TextSample { traj: &t, k: kk, e: kk }];
        let c = eval(&student, |g, v| text_terms(&cfg, g, v, &student.params, &item).unwrap().0);
        assert!(c.abs() < 1e-6);
    }

    #[test]
    fn uniform_student_text_reg_is_log_width() {
        let (mut student, frozen) = models();
        let n = student.params.len();
        for p in &mut student.params[n - 2..] {
            p.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let cfg = student.config;
        let ctx = cfg.format().mmu(&[cfg.vocab.image_token(0); 4], &[]).unwrap();
        let t = jacobi_decode(&frozen, &ctx, 4, 20, 2).unwrap();
        let item = [TextSample { traj: &t, k: 0, e: 0 }];
        let r = eval(&student, |g, v| text_terms(&cfg, g, v, &frozen.params, &item).unwrap().1);
        let width = (cfg.vocab.text_vocab_size + 1) as f64;
        assert!((r - width.ln()).abs() < 1e-5);
    }

    #[test]
    fn ar_loss_matches_scalar_loop() {
        let (student, _) = models();
        let cfg = student.config;
        let fmt = cfg.format();
        let eos = cfg.vocab.eos();
        let seqs = vec![vec![3, 1, eos], vec![eos], vec![0, 0, 2, 5, eos]];
        let len = 7;
        let mut total = 0.0;
        let mut count = 0;
        for s in &seqs {
            let logits = student.forward(&fmt.text(s)).unwrap();
            for (i, &t) in s.iter().enumerate() {
                total -= lsm(&logits.row(i)[cfg.vocab.text_output_range()])[t as usize];
                count += 1;
            }
        }
        let got = eval(&student, |g, v| ar_loss(&cfg, g, v, &seqs, len).unwrap());
        assert!((got - total / count as f64).abs() < 1e-5);

        let one = vec![vec![eos]];
        let logits = student.forward(&fmt.text(&[])).unwrap();
        let expected = -lsm(&logits.row(0)[cfg.vocab.text_output_range()])[eos as usize];
        let got = eval(&student, |g, v| ar_loss(&cfg, g, v, &one, 3).unwrap());
        assert!((got - expected).abs() < 1e-5);
        let mut g = Graph::<f32>::new();
        let vars = bind(&mut g, &student.params, true);
        assert!(ar_loss(&cfg, &mut g, &vars, &seqs, 4).is_err());
    }

    #[test]
    fn ar_loss_overfits_one_sequence() {
        use crate::numerics::{adam_step, AdamConfig, AdamState};
        let (mut student, _) = models();
        let cfg = student.config;
        let seqs = vec![vec![2, 4, 1, cfg.vocab.eos()]];
        let mut opt = AdamState::new(
            AdamConfig {
                lr: 3e-2,
                ..AdamConfig::default()
            },
            &student.params,
        );
        let mut last = f64::INFINITY;
        for _ in 0..300 {
            let mut g = Graph::<f32>::new();
            let vars = bind(&mut g, &student.params, true);
            let l = ar_loss(&cfg, &mut g, &vars, &seqs, 6).unwrap();
            g.backward(l).unwrap();
            last = g.value(l).item() as f64;
            let grads: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).unwrap()).collect();
            adam_step(&mut student.params, &grads, &mut opt).unwrap();
        }
        assert!(last < 0.05, "{last}");
    }

    #[test]
    fn mtp_loss_matches_scalar_loop() {
        let (student, _) = models();
        let cfg = student.config;
        let fmt = cfg.format();
        let v = cfg.vocab;
        let grid: Vec<u32> = [2, 0, 3, 1].iter().map(|&c| v.image_token(c)).collect();
        let items = vec![
            MtpItem {
                prompt: Some(vec![4]),
                grid: grid.clone(),
                masked: vec![0, 3],
            },
            MtpItem {
                prompt: None,
                grid: grid.clone(),
                masked: vec![0, 1, 2, 3],
            },
        ];
        let (mut total, mut spread) = (0.0, 0.0);
        for it in &items {
            let mut g = it.grid.clone();
            for &p in &it.masked {
                g[p] = v.mask();
            }
            let seq = match &it.prompt {
                Some(p) => fmt.t2i(p, &g).unwrap(),
                None => fmt.t2i_null(&g).unwrap(),
            };
            let logits = student.forward(&seq).unwrap();
            for &p in &it.masked {
                let lp = lsm(&logits.row(fmt.image_start() + p)[v.image_range()]);
                total -= lp[v.image_code(it.grid[p]).unwrap() as usize];
                spread -= lp.iter().sum::<f64>() / lp.len() as f64;
            }
        }
        let got = eval(&student, |g, vars| mtp_loss(&cfg, g, vars, &items, 0.0).unwrap().unwrap());
        assert!((got - total / 6.0).abs() < 1e-5);
        let smoothed = eval(&student, |g, vars| mtp_loss(&cfg, g, vars, &items, 0.1).unwrap().unwrap());
        assert!((smoothed - (0.9 * total + 0.1 * spread) / 6.0).abs() < 1e-5);
        let mut g = Graph::<f32>::new();
        let vars = bind(&mut g, &student.params, true);
        assert!(matches!(mtp_loss(&cfg, &mut g, &vars, &items, 1.0), Err(Error::Config(_))));

        let none = vec![MtpItem {
            prompt: None,
            grid,
            masked: vec![],
        }];
        let mut g = Graph::<f32>::new();
        let vars = bind(&mut g, &student.params, true);
        assert!(mtp_loss(&cfg, &mut g, &vars, &none, 0.0).unwrap().is_none());
    }

    #[test]
    fn caption_loss_matches_scalar_loop() {
        let (student, _) = models();
        let cfg = student.config;
        let fmt = cfg.format();
        let v = cfg.vocab;
        let grid = vec![v.image_token(2); 4];
        let cap = vec![1, 5, v.eos(), v.eos()];
        let logits = student.forward(&fmt.mmu(&grid, &cap).unwrap()).unwrap();
        let start = fmt.t2i_len() - 1;
        let expected: f64 = cap
            .iter()
            .enumerate()
            .map(|(i, &t)| -lsm(&logits.row(start + i)[v.text_output_range()])[t as usize])
            .sum::<f64>()
            / 4.0;
        let items = [(&grid[..], &cap[..])];
        let got = eval(&student, |g, vars| caption_loss(&cfg, g, vars, &items).unwrap());
        assert!((got - expected).abs() < 1e-5);
    }

    #[test]
    fn total_is_linear_in_each_weight() {
        let (student, _) = models();
        let mut g = Graph::<f32>::new();
        let vals = [0.3f32, 0.7, 1.1, 0.2, 2.5];
        let v: Vec<Var> = vals.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
        let terms = LossTerms {
            image_consistency: v[0],
            text_consistency: v[1],
            image_reg: v[2],
            text_reg: v[3],
            ar: v[4],
        };
        let w = LossWeights::default();
        let t = total_loss(&mut g, &terms, &w).unwrap();
        let hand = 0.3 + 10.0 * 0.7 + 20.0 * 1.1 + 100.0 * 0.2 + 2.0 * 2.5;
        assert!((g.value(t).item() as f64 - hand).abs() < 1e-4);
        let z = total_loss(&mut g, &terms, &LossWeights::zero()).unwrap();
        assert_eq!(g.value(z).item(), 0.3);
        let doubled = LossWeights { alpha: 20.0, ..w };
        let t2 = total_loss(&mut g, &terms, &doubled).unwrap();
        let diff = (g.value(t2).item() - g.value(t).item()) as f64;
        assert!((diff - 10.0 * 0.7).abs() < 1e-4);
        drop(student);
    }
}
