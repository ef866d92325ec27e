//! Trajectory pools, one distillation stage, and the staged pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoise::{default_max_iters, jacobi_decode, sample_image, ImageTrajectory, SamplingConfig, TextTrajectory};
use crate::error::{Error, Result};
use crate::model::{bind, Model};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Tensor};

use super::losses::{distill_terms, total_loss, DistillBatch, ImageSample, TextSample};
use super::metrics::MetricsWriter;
use super::plan::{segment_boundaries, StagePlan, TeacherSource};

/// Teacher trajectories for one stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StagePools {
    pub images: Vec<ImageTrajectory>,
    pub texts: Vec<TextTrajectory>,
}

/// Greedy image trajectories at the stage's step count and guidance, one per
/// prompt, and `plan.text_seeds` Jacobi trajectories per caption context.
/// Context `c`, repeat `r` starts from seed `seed + c·R + r`.
pub fn collect_pools(teacher: &Model, plan: &StagePlan, prompts: &[Vec<u32>], grids: &[Vec<u32>], seed: u64) -> Result<StagePools> {
    plan.validate()?;
    let fmt = teacher.config.format();
    let sc = SamplingConfig::greedy(plan.steps, plan.cfg_scale);
    let images = prompts
        .iter()
        .map(|p| sample_image(teacher, p, &sc))
        .collect::<Result<Vec<_>>>()?;
    let n = fmt.response_len;
    let r = plan.text_seeds as u64;
    let mut texts = Vec::with_capacity(grids.len() * plan.text_seeds);
    for (c, grid) in grids.iter().enumerate() {
        let ctx = fmt.mmu(grid, &[])?;
        for j in 0..r {
            let s = seed.wrapping_add(c as u64 * r + j);
            texts.push(jacobi_decode(teacher, &ctx, n, default_max_iters(n), s)?);
        }
    }
    Ok(StagePools { images, texts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOptions {
    pub seed: u64,
    /// Text trajectories per step.
    pub text_batch: usize,
    /// Pure-text sequences per step.
    pub ar_batch: usize,
    /// 0 disables periodic probes.
    pub eval_every: usize,
    pub eval_size: usize,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            text_batch: 16,
            ar_batch: 8,
            eval_every: 250,
            eval_size: 24,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
struct StepRecord<'a> {
    stage: &'a str,
    step: usize,
    loss: f64,
    image_consistency: f64,
    text_consistency: f64,
    image_reg: f64,
    text_reg: f64,
    ar: f64,
    jacobi_mean_iters: Option<f64>,
    image_agreement: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub student: Model,
    /// Optimizer steps applied.
    pub steps_done: usize,
    /// Set when a non-finite loss stopped the stage; `student` then holds
    /// the last parameters that produced a finite loss.
    pub aborted: Option<String>,
    pub losses: Vec<f64>,
}

/// `(k, e)` for a trajectory of `steps` transitions split into at most
/// `segments` spans; `k` uniform over `0..steps`.
fn draw_step(rng: &mut ChaCha8Rng, steps: usize, segments: usize) -> Result<(usize, usize)> {
    if steps == 0 {
        return Ok((0, 0));
    }
    let plan = segment_boundaries(steps, segments.min(steps))?;
    let k = rng.random_range(0..steps);
    Ok((k, plan.endpoint(k)))
}

/// Probe: fraction of cells where the student's greedy `steps`-step CFG-0
/// sample equals the teacher trajectory endpoint, and the student's mean
/// Jacobi iterations on the pooled caption contexts.
pub fn stage_probe(student: &Model, pools: &StagePools, steps: usize, limit: usize) -> Result<(f64, f64)> {
    let sc = SamplingConfig::greedy(steps, 0.0);
    let imgs = &pools.images[..limit.min(pools.images.len())];
    let mut agree = 0.0;
    for t in imgs {
        let s = sample_image(student, &t.prompt, &sc)?;
        let same = s.final_state().iter().zip(t.final_state()).filter(|(a, b)| a == b).count();
        agree += same as f64 / s.final_state().len() as f64;
    }
    let texts = &pools.texts[..limit.min(pools.texts.len())];
    let mut iters = 0usize;
    for (i, t) in texts.iter().enumerate() {
        let n = t.block_len();
        iters += jacobi_decode(student, &t.context, n, default_max_iters(n), i as u64)?.converged_iteration();
    }
    Ok((
        agree / imgs.len().max(1) as f64,
        iters as f64 / texts.len().max(1) as f64,
    ))
}

/// Trains `student_init` against the pooled trajectories of the stage
/// teacher. The frozen copy is refreshed from the student before every step.
pub fn run_stage(
    plan: &StagePlan,
    student_init: &Model,
    pools: &StagePools,
    text: &[Vec<u32>],
    opts: &StageOptions,
    metrics: &mut MetricsWriter,
) -> Result<StageOutcome> {
    plan.validate()?;
    let mut student = student_init.clone();
    let mut outcome = StageOutcome {
        student: student.clone(),
        steps_done: 0,
        aborted: None,
        losses: Vec::new(),
    };
    if plan.train_steps == 0 {
        return Ok(outcome);
    }
    if pools.images.is_empty() && pools.texts.is_empty() {
        return Err(Error::Data(format!("stage {}: empty trajectory pools", plan.name)));
    }
    let cfg = student.config;
    let mut opt = AdamState::new(
        AdamConfig {
            lr: plan.learning_rate,
            ..AdamConfig::default()
        },
        &student.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for step in 0..plan.train_steps {
        let mut batch = DistillBatch::default();
        if !pools.images.is_empty() {
            for _ in 0..plan.batch_size {
                let traj = &pools.images[rng.random_range(0..pools.images.len())];
                let (k, e) = draw_step(&mut rng, traj.num_steps(), plan.num_segments)?;
                batch.images.push(ImageSample { traj, k, e });
            }
        }
        if !pools.texts.is_empty() {
            for _ in 0..opts.text_batch {
                let traj = &pools.texts[rng.random_range(0..pools.texts.len())];
                let (k, e) = draw_step(&mut rng, traj.converged_iteration(), plan.num_segments)?;
                batch.texts.push(TextSample { traj, k, e });
            }
        }
        if !text.is_empty() {
            batch.ar = (0..opts.ar_batch)
                .map(|_| text[rng.random_range(0..text.len())].clone())
                .collect();
            batch.ar_len = batch.ar.iter().map(|t| t.len() + 1).max().unwrap_or(1);
        }

        let frozen = student.params.clone();
        let mut g = Graph::<f32>::new();
        let vars = bind(&mut g, &student.params, true);
        let terms = distill_terms(&cfg, &mut g, &vars, &frozen, &batch)?;
        let total = total_loss(&mut g, &terms, &plan.weights)?;
        let loss = g.value(total).item() as f64;
        if !loss.is_finite() {
            let msg = format!("stage {}: loss {loss} at step {step}", plan.name);
            log::error!("{msg}; keeping parameters from step {}", outcome.steps_done);
            outcome.aborted = Some(msg);
            return Ok(outcome);
        }
        g.backward(total)?;
        let grads: Vec<Tensor> = vars
            .iter()
            .map(|&v| g.grad(v).ok_or_else(|| Error::State("parameter without gradient".into())))
            .collect::<Result<_>>()?;
        if let Err(e) = adam_step(&mut student.params, &grads, &mut opt) {
            log::error!("stage {}: {e}; keeping parameters from step {}", plan.name, outcome.steps_done);
            outcome.aborted = Some(e.to_string());
            return Ok(outcome);
        }
        outcome.student.params.clone_from(&student.params);
        outcome.steps_done = step + 1;
        outcome.losses.push(loss);

        let v = |x| g.value(x).item() as f64;
        let mut rec = StepRecord {
            stage: &plan.name,
            step,
            loss,
            image_consistency: v(terms.image_consistency),
            text_consistency: v(terms.text_consistency),
            image_reg: v(terms.image_reg),
            text_reg: v(terms.text_reg),
            ar: v(terms.ar),
            jacobi_mean_iters: None,
            image_agreement: None,
        };
        if opts.eval_every > 0 && ((step + 1) % opts.eval_every == 0 || step + 1 == plan.train_steps) {
            let (agree, iters) = stage_probe(&student, pools, plan.steps, opts.eval_size)?;
            log::info!(
                "{} step {}: loss {loss:.4}, endpoint agreement {agree:.4}, jacobi {iters:.2}",
                plan.name,
                step + 1
            );
            rec.image_agreement = Some(agree);
            rec.jacobi_mean_iters = Some(iters);
        }
        metrics.record(&rec)?;
    }
    Ok(outcome)
}

/// Pool seed of stage `i` (0-based) in the pipeline.
pub fn pool_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_add(i as u64 * 1_000_003)
}

/// Stage result kept by the pipeline.
#[derive(Clone, Debug)]
pub struct StageCheckpoint {
    pub name: String,
    pub model: Model,
    pub aborted: Option<String>,
}

/// Runs stages in order. Each stage's teacher is the original teacher or the
/// previous stage's student, and its student starts from that teacher.
/// Stops after an aborted stage.
pub fn distill_pipeline(
    stages: &[StagePlan],
    teacher: &Model,
    prompts: &[Vec<u32>],
    grids: &[Vec<u32>],
    text: &[Vec<u32>],
    opts: &StageOptions,
    metrics: &mut MetricsWriter,
) -> Result<Vec<StageCheckpoint>> {
    distill_pipeline_with(stages, teacher, None, prompts, grids, text, opts, metrics)
}

/// [`distill_pipeline`] with optional precollected pools for the first
/// stage.
#[allow(clippy::too_many_arguments)]
pub fn distill_pipeline_with(
    stages: &[StagePlan],
    teacher: &Model,
    mut first_pools: Option<StagePools>,
    prompts: &[Vec<u32>],
    grids: &[Vec<u32>],
    text: &[Vec<u32>],
    opts: &StageOptions,
    metrics: &mut MetricsWriter,
) -> Result<Vec<StageCheckpoint>> {
    if stages.is_empty() {
        return Err(Error::Plan("no stages".into()));
    }
    let mut out: Vec<StageCheckpoint> = Vec::with_capacity(stages.len());
    for (i, plan) in stages.iter().enumerate() {
        let stage_teacher = match (plan.teacher, out.last()) {
            (TeacherSource::Original, _) => teacher,
            (TeacherSource::PreviousStage, Some(prev)) => &prev.model,
            (TeacherSource::PreviousStage, None) => {
                return Err(Error::Plan(format!("stage {} has no previous stage", plan.name)));
            }
        };
        let pools = match first_pools.take() {
            Some(p) => p,
            None => {
                log::info!("{}: collecting trajectories", plan.name);
                collect_pools(stage_teacher, plan, prompts, grids, pool_seed(opts.seed, i))?
            }
        };
        let stage_opts = StageOptions {
            seed: opts.seed.wrapping_add(i as u64),
            ..opts.clone()
        };
        let res = run_stage(plan, stage_teacher, &pools, text, &stage_opts, metrics)?;
        let aborted = res.aborted.clone();
        out.push(StageCheckpoint {
            name: plan.name.clone(),
            model: res.student,
            aborted,
        });
        if out.last().is_some_and(|c| c.aborted.is_some()) {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_pairs, generate_pure_text, ToyTaskSpec};
    use crate::distill::teacher::tests::small_config;
    use crate::model::init_model;

    fn tiny_plan(train_steps: usize) -> StagePlan {
        StagePlan {
            steps: 4,
            cfg_scale: 1.5,
            num_segments: 2,
            train_steps,
            batch_size: 2,
            text_seeds: 1,
            ..StagePlan::stage1()
        }
    }

    fn setup() -> (Model, Vec<Vec<u32>>, Vec<Vec<u32>>, Vec<Vec<u32>>) {
        let spec = ToyTaskSpec::default();
        let model = init_model(&small_config()).unwrap();
        let pairs = generate_pairs(&spec, 1, 3).unwrap();
        let prompts = pairs.iter().map(|p| p.prompt.clone()).collect();
        let grids = pairs.iter().map(|p| p.grid.clone()).collect();
        let text = generate_pure_text(1, 5, 12, spec.vocab.eos());
        (model, prompts, grids, text)
    }

    fn opts() -> StageOptions {
        StageOptions {
            text_batch: 2,
            ar_batch: 2,
            eval_every: 0,
            ..StageOptions::default()
        }
    }

    #[test]
    fn zero_steps_is_identity() {
        let (model, prompts, grids, text) = setup();
        let plan = tiny_plan(0);
        let pools = collect_pools(&model, &plan, &prompts, &grids, 0).unwrap();
        let out = run_stage(&plan, &model, &pools, &text, &opts(), &mut MetricsWriter::discard()).unwrap();
        assert_eq!(out.student, model);
        assert_eq!(out.steps_done, 0);
    }

    #[test]
    fn pools_follow_the_plan() {
        let (model, prompts, grids, _) = setup();
        let plan = StagePlan {
            text_seeds: 2,
            ..tiny_plan(1)
        };
        let pools = collect_pools(&model, &plan, &prompts, &grids, 0).unwrap();
        assert_eq!(pools.images.len(), 3);
        assert_eq!(pools.texts.len(), 6);
        for t in &pools.images {
            assert_eq!(t.num_steps(), 4);
            assert_eq!(t.cfg_scale, 1.5);
            t.validate(model.config.vocab.mask()).unwrap();
        }
        assert_ne!(pools.texts[0].iterates[0], pools.texts[1].iterates[0]);
    }

    #[test]
    fn stage_is_deterministic_and_moves_parameters() {
        let (model, prompts, grids, text) = setup();
        let plan = tiny_plan(3);
        let pools = collect_pools(&model, &plan, &prompts, &grids, 0).unwrap();
        let a = run_stage(&plan, &model, &pools, &text, &opts(), &mut MetricsWriter::discard()).unwrap();
        let b = run_stage(&plan, &model, &pools, &text, &opts(), &mut MetricsWriter::discard()).unwrap();
        assert_eq!(a.student.checksum(), b.student.checksum());
        assert_ne!(a.student.checksum(), model.checksum());
        assert_eq!(a.steps_done, 3);
        assert!(a.losses.iter().all(|l| l.is_finite() && *l >= 0.0));
    }

    #[test]
    fn nan_aborts_with_last_good_parameters() {
        let (model, prompts, grids, text) = setup();
        let plan = tiny_plan(5);
        let mut pools = collect_pools(&model, &plan, &prompts, &grids, 0).unwrap();
        for t in &mut pools.images {
            for l in &mut t.reg_labels {
                l[0] = f32::NAN;
            }
        }
        let out = run_stage(&plan, &model, &pools, &text, &opts(), &mut MetricsWriter::discard()).unwrap();
        assert!(out.aborted.is_some());
        assert_eq!(out.steps_done, 0);
        assert_eq!(out.student, model);
    }

    #[test]
    fn single_stage_pipeline_equals_run_stage() {
        let (model, prompts, grids, text) = setup();
        let plan = tiny_plan(2);
        let o = opts();
        let pipe = distill_pipeline(
            std::slice::from_ref(&plan),
            &model,
            &prompts,
            &grids,
            &text,
            &o,
            &mut MetricsWriter::discard(),
        )
        .unwrap();
        let pools = collect_pools(&model, &plan, &prompts, &grids, o.seed).unwrap();
        let direct = run_stage(&plan, &model, &pools, &text, &o, &mut MetricsWriter::discard()).unwrap();
        assert_eq!(pipe.len(), 1);
        assert_eq!(pipe[0].model.checksum(), direct.student.checksum());
    }

    #[test]
    fn two_stages_hand_off() {
        let (model, prompts, grids, text) = setup();
        let s1 = tiny_plan(1);
        let s2 = StagePlan {
            name: "second".into(),
            steps: 2,
            num_segments: 1,
            teacher: TeacherSource::PreviousStage,
            ..tiny_plan(1)
        };
        let out = distill_pipeline(&[s1, s2], &model, &prompts, &grids, &text, &opts(), &mut MetricsWriter::discard()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].name, "second");
        assert_ne!(out[0].model.checksum(), out[1].model.checksum());
        let bad = StagePlan {
            teacher: TeacherSource::PreviousStage,
            ..tiny_plan(1)
        };
        assert!(distill_pipeline(&[bad], &model, &prompts, &grids, &text, &opts(), &mut MetricsWriter::discard()).is_err());
    }
}
