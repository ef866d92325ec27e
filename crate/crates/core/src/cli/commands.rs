//! Command bodies. Each writes its outputs under one directory; wall-clock
//! figures go to separate `*timing*` files so the rest is reproducible.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use crate::corpus::{
    generate_pairs, generate_pure_text, read_pairs, read_text, verify_image, write_pairs, write_text, CorpusHeader,
    PairExample, ToyTaskSpec,
};
use crate::denoise::trajectory::{read_store, write_store};
use crate::denoise::{default_max_iters, jacobi_decode, sample_image, SamplingConfig, Trajectory};
use crate::distill::gradcheck::{check_terms, LossFixture, TermReport};
use crate::distill::{
    caption_score, collect_pools, distill_pipeline_with, image_agreement, pool_seed, train_teacher, unique_prompts,
    MetricsWriter, StagePools, TeacherData, TextDecoder,
};
use crate::error::{Error, Result};
use crate::model::{init_model, Model, ModelConfig};
use crate::numerics::GradCheckOptions;

use super::config::{Precision, RunConfig};

/// How a command ended when it did not hit an error.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Success,
    /// A stage stopped on a non-finite loss; its last good checkpoint was
    /// written.
    NumericAbort(String),
    /// A check the command exists to run did not pass.
    CheckFailed(String),
}

/// Output directory with an overwrite guard.
#[derive(Clone, Debug)]
pub struct OutDir {
    pub dir: PathBuf,
    pub overwrite: bool,
}

impl OutDir {
    pub fn new(dir: &Path, overwrite: bool) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Path {
            path: dir.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            overwrite,
        })
    }

    /// Path for a new output file.
    pub fn file(&self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if p.exists() && !self.overwrite {
            return Err(Error::Path {
                path: p,
                reason: "exists; pass --overwrite to replace it".into(),
            });
        }
        Ok(p)
    }

    pub fn write(&self, name: &str, body: &str) -> Result<()> {
        let p = self.file(name)?;
        fs::write(&p, body).map_err(|e| Error::Path {
            path: p,
            reason: e.to_string(),
        })
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, &s)
    }

    pub fn write_lines<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<()> {
        let mut s = String::new();
        for r in rows {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        self.write(name, &s)
    }

    pub fn save_model(&self, name: &str, model: &Model) -> Result<()> {
        model.save(&self.file(name)?)
    }

    pub fn metrics(&self, name: &str) -> Result<MetricsWriter> {
        MetricsWriter::create(&self.file(name)?)
    }
}

pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const TEXT_FILE: &str = "text.jsonl";
pub const RESOLVED_FILE: &str = "config.resolved";

/// Corpora read from `paths.data`.
pub struct Corpora {
    pub spec: ToyTaskSpec,
    pub train: Vec<PairExample>,
    pub heldout: Vec<PairExample>,
    pub text: Vec<Vec<u32>>,
}

impl Corpora {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.required_path("paths.data")?;
        let (spec, train) = read_pairs(&dir.join(PAIRS_FILE))?;
        let (held_spec, heldout) = read_pairs(&dir.join(HELDOUT_FILE))?;
        let text = read_text(&dir.join(TEXT_FILE))?;
        if held_spec != spec {
            return Err(Error::Data("training and held-out corpora disagree on the task".into()));
        }
        let m = cfg.model()?;
        if spec.vocab != m.vocab || spec.grid_side != m.image_side || spec.caption_len != m.response_len {
            return Err(Error::Config(format!(
                "corpus in {} does not fit the model configuration",
                dir.display()
            )));
        }
        Ok(Self {
            spec,
            train,
            heldout,
            text,
        })
    }

    /// The corpora `gen-data` writes: training pairs from `data.seed`,
    /// held-out pairs from `data.seed + 1`, text from `data.seed + 2`.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let spec = cfg.task_spec()?;
        let seed = cfg.u64("data.seed")?;
        let train = generate_pairs(&spec, seed, cfg.usize("data.train_count")?)?;
        let heldout = generate_pairs(&spec, seed.wrapping_add(1), cfg.usize("data.heldout_count")?)?;
        let text = generate_pure_text(
            seed.wrapping_add(2),
            cfg.usize("data.text_count")?,
            cfg.usize("data.text_max_len")?,
            spec.vocab.eos(),
        );
        Ok(Self {
            spec,
            train,
            heldout,
            text,
        })
    }

    /// Distinct training grids in first-seen order.
    pub fn train_grids(&self) -> Vec<Vec<u32>> {
        let mut seen = HashSet::new();
        self.train
            .iter()
            .filter(|p| seen.insert(p.grid.clone()))
            .map(|p| p.grid.clone())
            .collect()
    }
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<Model> {
    if !path.exists() {
        return Err(Error::Path {
            path: path.to_path_buf(),
            reason: "checkpoint not found".into(),
        });
    }
    let m = Model::load(path)?;
    let want = cfg.model()?;
    let same_shape = ModelConfig {
        rng_seed: m.config.rng_seed,
        ..want
    } == m.config;
    if !same_shape {
        log::warn!("{}: checkpoint configuration differs from model.* keys; using the checkpoint's", path.display());
    }
    Ok(m)
}

fn limited<T>(xs: &[T], limit: usize) -> &[T] {
    if limit == 0 {
        xs
    } else {
        &xs[..limit.min(xs.len())]
    }
}

fn parse_id_lines(path: &Path) -> Result<Vec<std::result::Result<Vec<u32>, String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Path {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<u32>().map_err(|_| format!("bad token {t:?}")))
                .collect()
        })
        .collect())
}

fn image_passes(sc: &SamplingConfig) -> usize {
    sc.steps * if sc.cfg_scale > 0.0 { 2 } else { 1 }
}

pub fn gen_data(cfg: &RunConfig, out: &OutDir) -> Result<Status> {
    let data = Corpora::generate(cfg)?;
    let seed = cfg.u64("data.seed")?;
    let pairs_header = |seed, count| CorpusHeader::Pairs {
        spec: data.spec.clone(),
        seed,
        count,
    };
    write_pairs(&out.file(PAIRS_FILE)?, &pairs_header(seed, data.train.len()), &data.train, true)?;
    write_pairs(
        &out.file(HELDOUT_FILE)?,
        &pairs_header(seed.wrapping_add(1), data.heldout.len()),
        &data.heldout,
        true,
    )?;
    let th = CorpusHeader::Text {
        seed: seed.wrapping_add(2),
        count: data.text.len(),
        max_len: cfg.usize("data.text_max_len")?,
    };
    write_text(&out.file(TEXT_FILE)?, &th, &data.text, true)?;
    log::info!(
        "wrote {} training pairs, {} held-out pairs, {} text sequences ({} attribute tuples)",
        data.train.len(),
        data.heldout.len(),
        data.text.len(),
        data.spec.attribute_space().len()
    );
    Ok(Status::Success)
}

pub fn cmd_train_teacher(cfg: &RunConfig, out: &OutDir) -> Result<Status> {
    let data = Corpora::load(cfg)?;
    let tc = cfg.teacher()?;
    let mut metrics = out.metrics("metrics.jsonl")?;
    let start = Instant::now();
    let td = TeacherData {
        spec: &data.spec,
        train: &data.train,
        text: &data.text,
        heldout: &data.heldout,
    };
    let (model, report) = train_teacher(&cfg.model()?, &tc, &td, None, &mut metrics)?;
    let secs = start.elapsed().as_secs_f64();
    out.save_model("teacher.ckpt", &model)?;
    out.write_json("report.json", &report)?;
    out.write_json("timing.json", &json!({"seconds": secs, "steps": report.steps}))?;
    Ok(Status::Success)
}

fn store_names(name: &str) -> (String, String) {
    (format!("{name}.traj"), format!("{name}.idx"))
}

pub fn cmd_collect(cfg: &RunConfig, out: &OutDir) -> Result<Status> {
    let data = Corpora::load(cfg)?;
    let teacher = load_model(&cfg.required_path("paths.teacher")?, cfg)?;
    let stage = cfg.usize("collect.stage")?;
    let plan = cfg.stage(stage)?;
    let pools = collect_pools(
        &teacher,
        &plan,
        &unique_prompts(&data.train),
        &data.train_grids(),
        pool_seed(cfg.seed()?, stage - 1),
    )?;
    let trajs: Vec<Trajectory> = pools
        .images
        .into_iter()
        .map(Trajectory::Image)
        .chain(pools.texts.into_iter().map(Trajectory::Text))
        .collect();
    let (d, i) = store_names(&plan.name);
    write_store(&out.file(&d)?, &out.file(&i)?, &trajs)?;
    log::info!("{}: {} trajectories written", plan.name, trajs.len());
    Ok(Status::Success)
}

/// Reads a pool store written by `collect`.
pub fn read_pools(dir: &Path, name: &str) -> Result<StagePools> {
    let (d, i) = store_names(name);
    let mut pools = StagePools::default();
    for t in read_store(&dir.join(d), &dir.join(i))? {
        match t {
            Trajectory::Image(t) => pools.images.push(t),
            Trajectory::Text(t) => pools.texts.push(t),
        }
    }
    Ok(pools)
}

pub fn cmd_distill(cfg: &RunConfig, out: &OutDir) -> Result<Status> {
    let data = Corpora::load(cfg)?;
    let teacher = load_model(&cfg.required_path("paths.teacher")?, cfg)?;
    let stages = cfg.stages()?;
    let first = match cfg.path("paths.pools")? {
        Some(dir) => Some(read_pools(&dir, &stages[0].name)?),
        None => None,
    };
    let mut metrics = out.metrics("metrics.jsonl")?;
    let start = Instant::now();
    let results = distill_pipeline_with(
        &stages,
        &teacher,
        first,
        &unique_prompts(&data.train),
        &data.train_grids(),
        &data.text,
        &cfg.stage_options()?,
        &mut metrics,
    )?;
    let secs = start.elapsed().as_secs_f64();
    let mut summary = Vec::new();
    let mut status = Status::Success;
    for r in &results {
        out.save_model(&format!("{}.ckpt", r.name), &r.model)?;
        summary.push(json!({"stage": r.name, "aborted": r.aborted}));
        if let Some(why) = &r.aborted {
            status = Status::NumericAbort(format!("{}: {why}", r.name));
        }
    }
    out.write_json("summary.json", &summary)?;
    out.write_json("timing.json", &json!({"seconds": secs}))?;
    Ok(status)
}

pub fn cmd_sample(cfg: &RunConfig, out: &OutDir) -> Result<Status> {
    let model = load_model(&cfg.required_path("paths.checkpoint")?, cfg)?;
    let prompts = parse_id_lines(&cfg.required_path("paths.prompts")?)?;
    let base = cfg.sampling()?;
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let sc = SamplingConfig {
            seed: base.seed.wrapping_add(i as u64),
            ..base.clone()
        };
        let start = Instant::now();
        let res = p.clone().map_err(Error::Data).and_then(|p| sample_image(&model, &p, &sc).map(|t| (p, t)));
        timing.push(json!({"index": i, "seconds": start.elapsed().as_secs_f64()}));
        rows.push(match res {
            Ok((p, t)) => json!({
                "index": i,
                "prompt": p,
                "grid": t.final_state(),
                "steps": t.num_steps(),
                "forward_passes": image_passes(&sc),
            }),
            Err(e) => {
                log::warn!("prompt {i}: {e}");
                json!({"index": i, "prompt": p.as_ref().ok(), "error": e.to_string()})
            }
        });
    }
    out.write_lines("samples.jsonl", &rows)?;
    out.write_lines("sample_timing.jsonl", &timing)?;
    Ok(Status::Success)
}

/// Caption contexts: `paths.grids` lines, or the first `eval.captions`
/// held-out grids.
fn caption_grids(cfg: &RunConfig) -> Result<Vec<std::result::Result<Vec<u32>, String>>> {
    match cfg.path("paths.grids")? {
        Some(p) => parse_id_lines(&p),
        None => {
            let data = Corpora::load(cfg)?;
            let n = cfg.usize("eval.captions")?;
            Ok(limited(&data.heldout, n).iter().map(|p| Ok(p.grid.clone())).collect())
        }
    }
}

pub fn cmd_decode_text(cfg: &RunConfig, out: &OutDir) -> Result<Status> {
    let model = load_model(&cfg.required_path("paths.checkpoint")?, cfg)?;
    let fmt = model.config.format();
    let n = fmt.response_len;
    let eos = fmt.vocab.eos();
    let seed = cfg.seed()?;
    let mut rows = Vec::new();
    let mut timing = Vec::new();
    let (mut blocks, mut iters) = (0usize, 0usize);
    for (i, g) in caption_grids(cfg)?.into_iter().enumerate() {
        let start = Instant::now();
        let res = g.map_err(Error::Data).and_then(|g| {
            let ctx = fmt.mmu(&g, &[])?;
            jacobi_decode(&model, &ctx, n, default_max_iters(n), seed.wrapping_add(i as u64))
        });
        timing.push(json!({"index": i, "seconds": start.elapsed().as_secs_f64()}));
        rows.push(match res {
            Ok(t) => {
                blocks += 1;
                iters += t.converged_iteration();
                json!({
                    "index": i,
                    "caption": t.output(eos),
                    "iterations": t.converged_iteration(),
                    "forward_passes": t.converged_iteration(),
                    "capped": t.capped,
                })
            }
            Err(e) => {
                log::warn!("context {i}: {e}");
                json!({"index": i, "error": e.to_string()})
            }
        });
    }
    out.write_lines("captions.jsonl", &rows)?;
    out.write_lines("caption_timing.jsonl", &timing)?;
    let mean = iters as f64 / blocks.max(1) as f64;
    out.write_json("decode_summary.json", &json!({"blocks": blocks, "mean_iterations": mean}))?;
    Ok(Status::Success)
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageCell {
    pub steps: usize,
    pub cfg: f64,
    pub forward_passes: usize,
    /// Cell agreement with the reference teacher's 16-step endpoints.
    pub endpoint_agreement: f64,
    pub verify_agreement: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub checkpoint: String,
    pub jacobi_mean_iterations: f64,
    pub ar_mean_iterations: f64,
    pub jacobi_tokens_per_forward: f64,
    pub ar_tokens_per_forward: f64,
    /// First checkpoint's mean Jacobi iterations over this one's.
    pub iteration_ratio: f64,
    pub caption_exact_jacobi: f64,
    pub images: Vec<ImageCell>,
}

/// Speed and agreement table over `paths.checkpoints` (comma-separated),
/// with `paths.teacher` as the 16-step reference.
pub fn bench(cfg: &RunConfig) -> Result<Vec<BenchRow>> {
    let data = Corpora::load(cfg)?;
    let reference = load_model(&cfg.required_path("paths.teacher")?, cfg)?;
    let list = cfg.str("paths.checkpoints")?;
    let ckpts: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if ckpts.is_empty() {
        return Err(Error::Config("paths.checkpoints must list at least one checkpoint".into()));
    }
    let prompts = unique_prompts(&data.heldout);
    let prompts = limited(&prompts, cfg.usize("bench.limit")?);
    let pairs = limited(&data.heldout, cfg.usize("eval.captions")?);
    let seed = cfg.seed()?;
    let refs = prompts
        .iter()
        .map(|p| sample_image(&reference, p, &SamplingConfig::greedy(16, 0.0)).map(|t| t.final_state().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut rows: Vec<BenchRow> = Vec::new();
    for path in ckpts {
        let model = load_model(Path::new(path), cfg)?;
        let n = model.config.response_len as f64;
        let jac = caption_score(&model, &data.spec, pairs, TextDecoder::Jacobi, seed)?;
        let mut images = Vec::new();
        for &steps in &cfg.usize_list("bench.steps")? {
            for &w in &cfg.f64_list("bench.cfg")? {
                let sc = SamplingConfig::greedy(steps, w);
                let (mut ep, mut ver) = (0.0, 0.0);
                for (p, r) in prompts.iter().zip(&refs) {
                    let t = sample_image(&model, p, &sc)?;
                    let g = t.final_state();
                    ep += g.iter().zip(r).filter(|(a, b)| a == b).count() as f64 / g.len() as f64;
                    ver += verify_image(&data.spec, p, g)?;
                }
                let c = prompts.len().max(1) as f64;
                images.push(ImageCell {
                    steps,
                    cfg: w,
                    forward_passes: image_passes(&sc),
                    endpoint_agreement: ep / c,
                    verify_agreement: ver / c,
                });
            }
        }
        let first = rows.first().map_or(jac.mean_iterations, |r| r.jacobi_mean_iterations);
        rows.push(BenchRow {
            checkpoint: path.to_string(),
            jacobi_mean_iterations: jac.mean_iterations,
            ar_mean_iterations: n,
            jacobi_tokens_per_forward: n / jac.mean_iterations.max(1.0),
            ar_tokens_per_forward: 1.0,
            iteration_ratio: first / jac.mean_iterations.max(1.0),
            caption_exact_jacobi: jac.exact_match,
            images,
        });
    }
    Ok(rows)
}

pub fn cmd_bench(cfg: &RunConfig, out: &OutDir) -> Result<Status> {
    let start = Instant::now();
    let rows = bench(cfg)?;
    out.write_json("bench.json", &rows)?;
    out.write_json("bench_timing.json", &json!({"seconds": start.elapsed().as_secs_f64()}))?;
    Ok(Status::Success)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub images: Vec<(usize, f64, f64)>,
    pub caption_exact_jacobi: f64,
    pub caption_exact_ar: f64,
    pub jacobi_mean_iterations: f64,
}

pub fn evaluate(cfg: &RunConfig, model: &Model, data: &Corpora) -> Result<EvalReport> {
    let prompts = unique_prompts(&data.heldout);
    let prompts = limited(&prompts, cfg.usize("eval.limit")?);
    let mut images = Vec::new();
    for &steps in &cfg.usize_list("eval.steps")? {
        for &w in &cfg.f64_list("eval.cfg")? {
            let a = image_agreement(model, &data.spec, prompts, &SamplingConfig::greedy(steps, w))?;
            images.push((steps, w, a));
        }
    }
    let pairs = limited(&data.heldout, cfg.usize("eval.captions")?);
    let seed = cfg.seed()?;
    let jac = caption_score(model, &data.spec, pairs, TextDecoder::Jacobi, seed)?;
    let ar = caption_score(model, &data.spec, pairs, TextDecoder::Ar, seed)?;
    Ok(EvalReport {
        images,
        caption_exact_jacobi: jac.exact_match,
        caption_exact_ar: ar.exact_match,
        jacobi_mean_iterations: jac.mean_iterations,
    })
}

pub fn cmd_eval(cfg: &RunConfig, out: &OutDir) -> Result<Status> {
    let data = Corpora::load(cfg)?;
    let model = load_model(&cfg.required_path("paths.checkpoint")?, cfg)?;
    let rep = evaluate(cfg, &model, &data)?;
    let rows: Vec<_> = rep
        .images
        .iter()
        .map(|&(steps, cfg, a)| json!({"steps": steps, "cfg": cfg, "agreement": a}))
        .collect();
    out.write_json(
        "eval.json",
        &json!({
            "images": rows,
            "caption_exact_jacobi": rep.caption_exact_jacobi,
            "caption_exact_ar": rep.caption_exact_ar,
            "jacobi_mean_iterations": rep.jacobi_mean_iterations,
        }),
    )?;
    Ok(Status::Success)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckRow {
    pub precision: &'static str,
    pub term: &'static str,
    pub value: f64,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Finite-difference check of every loss term on the tiny model.
pub fn gradcheck(cfg: &RunConfig) -> Result<Vec<GradcheckRow>> {
    let seed = cfg.seed()?;
    let mut mc = ModelConfig::tiny();
    mc.rng_seed = seed;
    let model = init_model(&mc)?;
    let mut fx = LossFixture::build(&model, seed)?;
    fx.grad_scale = cfg.f64("gradcheck.grad_scale")?;
    let samples = match cfg.usize("gradcheck.samples")? {
        0 => usize::MAX,
        n => n,
    };
    let opts = |mut o: GradCheckOptions| {
        o.samples = samples;
        o.seed = seed;
        o
    };
    let rows = |precision, reps: Vec<TermReport>| {
        reps.into_iter()
            .map(move |r| GradcheckRow {
                precision,
                term: r.term.name(),
                value: r.value,
                max_rel_error: r.report.max_rel_error,
                tolerance: r.report.tolerance,
                checked: r.report.checked,
                passed: r.report.passed,
            })
            .collect::<Vec<_>>()
    };
    let mut out = Vec::new();
    let p = cfg.precision()?;
    if matches!(p, Precision::F32 | Precision::Both) {
        out.extend(rows("f32", check_terms::<f32>(&fx, &opts(GradCheckOptions::single_precision()))?));
    }
    if matches!(p, Precision::F64 | Precision::Both) {
        out.extend(rows("f64", check_terms::<f64>(&fx, &opts(GradCheckOptions::double_precision()))?));
    }
    Ok(out)
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &OutDir) -> Result<Status> {
    let rows = gradcheck(cfg)?;
    out.write_json("gradcheck.json", &rows)?;
    for r in &rows {
        log::info!(
            "{} {:<18} max rel error {:.3e} (tol {:.0e}) {}",
            r.precision,
            r.term,
            r.max_rel_error,
            r.tolerance,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}/{}", r.precision, r.term))
        .collect();
    Ok(if failed.is_empty() {
        Status::Success
    } else {
        Status::CheckFailed(format!("gradient check failed: {}", failed.join(", ")))
    })
}
