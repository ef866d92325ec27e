//! Flat `key = value` run configuration with typed views.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::corpus::ToyTaskSpec;
use crate::denoise::SamplingConfig;
use crate::distill::{LossWeights, StageOptions, StagePlan, TeacherConfig, TeacherSource};
use crate::error::{Error, Result};
use crate::model::config::parse_kv;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
    Both,
}

/// Every key has a default; a config file or override may only change
/// existing keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    map: BTreeMap<String, String>,
}

fn stage_defaults(out: &mut Vec<(String, String)>, prefix: &str, p: &StagePlan) {
    let w = p.weights;
    for (k, v) in [
        ("steps", p.steps.to_string()),
        ("cfg", p.cfg_scale.to_string()),
        ("segments", p.num_segments.to_string()),
        ("train_steps", p.train_steps.to_string()),
        ("lr", p.learning_rate.to_string()),
        ("alpha", w.alpha.to_string()),
        ("beta", w.beta.to_string()),
        ("gamma", w.gamma.to_string()),
        ("delta", w.delta.to_string()),
        ("batch", p.batch_size.to_string()),
        ("text_seeds", p.text_seeds.to_string()),
    ] {
        out.push((format!("{prefix}.{k}"), v));
    }
}

fn defaults() -> Vec<(String, String)> {
    let mut d: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: &str| d.push((k.to_string(), v.to_string()));
    put("seed", "0");
    let spec = ToyTaskSpec::default();
    put("data.seed", "1");
    put("data.train_count", "2000");
    put("data.heldout_count", "200");
    put("data.text_count", "2000");
    put("data.text_max_len", "24");
    put("data.num_colors", &spec.num_colors.to_string());
    let t = TeacherConfig::default();
    put("teacher.train_steps", &t.train_steps.to_string());
    put("teacher.batch", &t.batch_size.to_string());
    put("teacher.caption_batch", &t.caption_batch.to_string());
    put("teacher.text_batch", &t.text_batch.to_string());
    put("teacher.lr", &t.learning_rate.to_string());
    put("teacher.weight_decay", &t.weight_decay.to_string());
    put("teacher.warmup", &t.warmup.to_string());
    put("teacher.prompt_dropout", &t.prompt_dropout.to_string());
    put("teacher.label_smoothing", &t.label_smoothing.to_string());
    put("teacher.caption_weight", &t.caption_weight.to_string());
    put("teacher.text_weight", &t.text_weight.to_string());
    put("teacher.eval_every", &t.eval_every.to_string());
    put("teacher.eval_size", &t.eval_size.to_string());
    put("sample.steps", "16");
    put("sample.cfg_scale", "0");
    put("sample.top_k", "0");
    put("sample.greedy", "true");
    put("sample.temperature", "1");
    put("sample.seed", "0");
    let o = StageOptions::default();
    put("distill.stages", "2");
    put("distill.text_batch", &o.text_batch.to_string());
    put("distill.ar_batch", &o.ar_batch.to_string());
    put("distill.eval_every", &o.eval_every.to_string());
    put("distill.eval_size", &o.eval_size.to_string());
    put("collect.stage", "1");
    put("paths.data", "data");
    put("paths.teacher", "");
    put("paths.checkpoint", "");
    put("paths.checkpoints", "");
    put("paths.prompts", "");
    put("paths.grids", "");
    put("paths.pools", "");
    put("eval.steps", "2,4,8,16");
    put("eval.cfg", "0,1.5");
    put("eval.limit", "0");
    put("eval.captions", "100");
    put("bench.steps", "2,4,8,16");
    put("bench.cfg", "0,1.5");
    put("bench.limit", "0");
    put("gradcheck.precision", "both");
    put("gradcheck.grad_scale", "1");
    put("gradcheck.samples", "0");
    for (k, v) in ModelConfig::default().kv_pairs() {
        d.push((k.to_string(), v));
    }
    // Guidance past 1.5 collapses the toy teacher, and students never train
    // their unconditional branch, so stage 2 samples unguided.
    let s1 = StagePlan {
        cfg_scale: 1.5,
        ..StagePlan::stage1()
    };
    let s2 = StagePlan {
        cfg_scale: 0.0,
        ..StagePlan::stage2()
    };
    stage_defaults(&mut d, "distill.stage1", &s1);
    stage_defaults(&mut d, "distill.stage2", &s2);
    d
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            map: defaults().into_iter().collect(),
        }
    }
}

impl RunConfig {
    /// Defaults overlaid with a `key = value` text.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.map.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key {key:?}"))),
        }
    }

    /// Every key, sorted, one `key = value` per line.
    pub fn resolved(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.map {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn str(&self, key: &str) -> Result<&str> {
        self.map
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Config(format!("unknown key {key:?}")))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<T> {
        let v = self.str(key)?;
        v.parse()
            .map_err(|_| Error::Config(format!("{key}: expected {what}, got {v:?}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.parse(key, "a non-negative integer")
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        self.parse(key, "a non-negative integer")
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let x: f64 = self.parse(key, "a number")?;
        if !x.is_finite() {
            return Err(Error::Config(format!("{key}: {x} is not finite")));
        }
        Ok(x)
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        self.parse(key, "true or false")
    }

    pub fn usize_list(&self, key: &str) -> Result<Vec<usize>> {
        self.list(key, "integers")
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.list(key, "numbers")
    }

    fn list<T: std::str::FromStr>(&self, key: &str, what: &str) -> Result<Vec<T>> {
        let v = self.str(key)?;
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("{key}: expected comma-separated {what}, got {v:?}")))
            })
            .collect()
    }

    /// `None` for an empty value.
    pub fn path(&self, key: &str) -> Result<Option<PathBuf>> {
        let v = self.str(key)?;
        Ok((!v.is_empty()).then(|| PathBuf::from(v)))
    }

    pub fn required_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)?
            .ok_or_else(|| Error::Config(format!("{key} must be set for this command")))
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64("seed")
    }

    pub fn model(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::default();
        for (k, v) in self.map.range("model.".to_string().."model/".to_string()) {
            if !m.set(k, v)? {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn task_spec(&self) -> Result<ToyTaskSpec> {
        let m = self.model()?;
        let spec = ToyTaskSpec {
            grid_side: m.image_side,
            num_colors: self.usize("data.num_colors")?,
            vocab: m.vocab,
            caption_len: m.response_len,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn teacher(&self) -> Result<TeacherConfig> {
        let t = TeacherConfig {
            train_steps: self.usize("teacher.train_steps")?,
            batch_size: self.usize("teacher.batch")?,
            caption_batch: self.usize("teacher.caption_batch")?,
            text_batch: self.usize("teacher.text_batch")?,
            learning_rate: self.f64("teacher.lr")?,
            weight_decay: self.f64("teacher.weight_decay")?,
            warmup: self.usize("teacher.warmup")?,
            prompt_dropout: self.f64("teacher.prompt_dropout")?,
            label_smoothing: self.f64("teacher.label_smoothing")?,
            caption_weight: self.f64("teacher.caption_weight")?,
            text_weight: self.f64("teacher.text_weight")?,
            seed: self.seed()?,
            eval_every: self.usize("teacher.eval_every")?,
            eval_size: self.usize("teacher.eval_size")?,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn sampling(&self) -> Result<SamplingConfig> {
        let k = self.usize("sample.top_k")?;
        let sc = SamplingConfig {
            steps: self.usize("sample.steps")?,
            cfg_scale: self.f64("sample.cfg_scale")?,
            top_k: (k > 0).then_some(k),
            temperature: self.f64("sample.temperature")?,
            greedy: self.bool("sample.greedy")?,
            seed: self.u64("sample.seed")?,
        };
        sc.validate()?;
        Ok(sc)
    }

    /// Stage `i` (1-based).
    pub fn stage(&self, i: usize) -> Result<StagePlan> {
        let base = match i {
            1 => StagePlan::stage1(),
            2 => StagePlan::stage2(),
            _ => return Err(Error::Plan(format!("no stage {i}; stages are 1 and 2"))),
        };
        let p = |k: &str| format!("distill.stage{i}.{k}");
        let plan = StagePlan {
            name: base.name,
            steps: self.usize(&p("steps"))?,
            cfg_scale: self.f64(&p("cfg"))?,
            num_segments: self.usize(&p("segments"))?,
            train_steps: self.usize(&p("train_steps"))?,
            learning_rate: self.f64(&p("lr"))?,
            weights: LossWeights {
                alpha: self.f64(&p("alpha"))?,
                beta: self.f64(&p("beta"))?,
                gamma: self.f64(&p("gamma"))?,
                delta: self.f64(&p("delta"))?,
            },
            teacher: if i == 1 { TeacherSource::Original } else { TeacherSource::PreviousStage },
            batch_size: self.usize(&p("batch"))?,
            text_seeds: self.usize(&p("text_seeds"))?,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn stages(&self) -> Result<Vec<StagePlan>> {
        let n = self.usize("distill.stages")?;
        if !(1..=2).contains(&n) {
            return Err(Error::Plan(format!("distill.stages = {n}; expected 1 or 2")));
        }
        (1..=n).map(|i| self.stage(i)).collect()
    }

    pub fn stage_options(&self) -> Result<StageOptions> {
        Ok(StageOptions {
            seed: self.seed()?,
            text_batch: self.usize("distill.text_batch")?,
            ar_batch: self.usize("distill.ar_batch")?,
            eval_every: self.usize("distill.eval_every")?,
            eval_size: self.usize("distill.eval_size")?,
        })
    }

    pub fn precision(&self) -> Result<Precision> {
        match self.str("gradcheck.precision")? {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            "both" => Ok(Precision::Both),
            other => Err(Error::Config(format!("gradcheck.precision: {other:?} is not f32, f64 or both"))),
        }
    }

    /// Parses every typed view so bad values surface before any work.
    pub fn validate(&self) -> Result<()> {
        self.seed()?;
        self.task_spec()?;
        self.teacher()?;
        self.sampling()?;
        self.stages()?;
        self.stage(1)?;
        self.stage(2)?;
        self.stage_options()?;
        self.precision()?;
        self.f64("gradcheck.grad_scale")?;
        self.usize("gradcheck.samples")?;
        for k in ["data.seed"] {
            self.u64(k)?;
        }
        for k in [
            "data.train_count",
            "data.heldout_count",
            "data.text_count",
            "data.text_max_len",
            "collect.stage",
            "eval.limit",
            "eval.captions",
            "bench.limit",
        ] {
            self.usize(k)?;
        }
        for k in ["eval.steps", "bench.steps"] {
            if self.usize_list(k)?.contains(&0) {
                return Err(Error::Config(format!("{k}: step counts must be positive")));
            }
        }
        for k in ["eval.cfg", "bench.cfg"] {
            if self.f64_list(k)?.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                return Err(Error::Config(format!("{k}: guidance scales must be finite and ≥ 0")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_kv(&c.resolved()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.model().unwrap(), ModelConfig::default());
        let (s1, s2) = (c.stage(1).unwrap(), c.stage(2).unwrap());
        assert_eq!((s1.cfg_scale, s2.cfg_scale), (1.5, 0.0));
        assert_eq!(StagePlan { cfg_scale: 10.0, ..s1 }, StagePlan::stage1());
        assert_eq!(StagePlan { cfg_scale: 1.5, ..s2 }, StagePlan::stage2());
        assert_eq!(c.task_spec().unwrap(), ToyTaskSpec::default());
    }

    #[test]
    fn unknown_and_malformed_keys_are_rejected() {
        assert!(matches!(RunConfig::from_kv("sample.colour = 3"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_kv("sample.steps = many"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_kv("distill.stage1.segments = 40"), Err(Error::Plan(_))));
        assert!(RunConfig::from_kv("eval.steps = 2,0").is_err());
    }

    #[test]
    fn overrides_reach_typed_views() {
        let c = RunConfig::from_kv("distill.stage2.beta = 0\nsample.top_k = 10\nmodel.num_layers = 3").unwrap();
        assert_eq!(c.stage(2).unwrap().weights.beta, 0.0);
        assert_eq!(c.sampling().unwrap().top_k, Some(10));
        assert_eq!(c.model().unwrap().num_layers, 3);
        assert!(c.resolved().contains("distill.stage2.beta = 0\n"));
    }
}
