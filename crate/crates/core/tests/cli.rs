use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;
use unidenoise::cli::{EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_OK};
use unidenoise::model::Model;

const SMALL: &str = "\
model.num_layers = 1
model.model_dim = 16
model.num_heads = 2
model.ffn_dim = 32
data.train_count = 12
data.heldout_count = 4
data.text_count = 8
teacher.train_steps = 2
teacher.batch = 4
teacher.caption_batch = 2
teacher.text_batch = 2
teacher.warmup = 1
teacher.eval_every = 0
distill.stage1.train_steps = 0
distill.stage2.train_steps = 0
distill.eval_every = 0
eval.steps = 2,16
eval.cfg = 0
eval.captions = 4
bench.steps = 2
bench.cfg = 0
";

struct Ws {
    dir: tempfile::TempDir,
}

impl Ws {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.cfg"), SMALL).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, verb: &str, out: &str, extra: &[&str]) -> i32 {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_unidenoise"));
        cmd.arg(verb)
            .arg("--config")
            .arg(self.p("small.cfg"))
            .arg("--out")
            .arg(self.p(out))
            .arg("--set")
            .arg(format!("paths.data={}", self.p("data").display()))
            .env("UNIDENOISE_LOG", "warn");
        for e in extra {
            cmd.arg(e);
        }
        cmd.status().unwrap().code().unwrap()
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.p(rel)).unwrap()).unwrap()
    }

    fn lines(&self, rel: &str) -> Vec<Value> {
        fs::read_to_string(self.p(rel))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect()
    }
}

fn same_bytes(a: &Path, b: &Path) -> bool {
    fs::read(a).unwrap() == fs::read(b).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_guarded() {
    let ws = Ws::new();
    assert_eq!(ws.run("gen-data", "data", &[]), EXIT_OK);
    assert_eq!(ws.run("gen-data", "again", &[]), EXIT_OK);
    for f in ["pairs.jsonl", "heldout.jsonl", "text.jsonl", "config.resolved"] {
        assert!(same_bytes(&ws.p("data").join(f), &ws.p("again").join(f)), "{f}");
    }
    assert_eq!(ws.run("gen-data", "data", &[]), EXIT_DATA);
    assert_eq!(ws.run("gen-data", "data", &["--overwrite"]), EXIT_OK);
    assert_eq!(ws.run("gen-data", "seeded", &["--set", "data.seed=9"]), EXIT_OK);
    assert!(!same_bytes(&ws.p("data/pairs.jsonl"), &ws.p("seeded/pairs.jsonl")));
}

#[test]
fn resolved_config_lists_every_key() {
    let ws = Ws::new();
    assert_eq!(ws.run("gen-data", "data", &["--seed", "5"]), EXIT_OK);
    let text = fs::read_to_string(ws.p("data/config.resolved")).unwrap();
    for line in ["seed = 5", "model.model_dim = 16", "distill.stage1.cfg = 1.5", "distill.stage2.segments = 2"] {
        assert!(text.lines().any(|l| l == line), "{line} missing");
    }
}

#[test]
fn config_errors_exit_with_config_code() {
    let ws = Ws::new();
    assert_eq!(ws.run("gen-data", "a", &["--set", "sample.colour=3"]), EXIT_CONFIG);
    assert_eq!(ws.run("gen-data", "b", &["--set", "sample.steps=many"]), EXIT_CONFIG);
    assert_eq!(ws.run("gen-data", "c", &["--set", "no-equals-sign"]), EXIT_CONFIG);
    assert_eq!(ws.run("distill", "d", &["--set", "distill.stages=3"]), EXIT_CONFIG);
}

#[test]
fn missing_inputs_exit_with_data_code() {
    let ws = Ws::new();
    assert_eq!(ws.run("train-teacher", "t", &[]), EXIT_DATA);
    assert_eq!(ws.run("gen-data", "data", &[]), EXIT_OK);
    let missing = format!("paths.teacher={}", ws.p("nope.ckpt").display());
    assert_eq!(ws.run("distill", "d", &["--set", &missing]), EXIT_DATA);
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_gradient() {
    let ws = Ws::new();
    let fast = ["--set", "gradcheck.samples=24"];
    assert_eq!(ws.run("gradcheck", "g", &fast), EXIT_OK);
    let rows = ws.json("g/gradcheck.json");
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 12);
    for r in rows {
        assert!(r["passed"].as_bool().unwrap());
        assert!(r["max_rel_error"].as_f64().unwrap() <= r["tolerance"].as_f64().unwrap());
    }
    let bad = ["--set", "gradcheck.samples=24", "--set", "gradcheck.grad_scale=1.5"];
    assert_eq!(ws.run("gradcheck", "bad", &bad), EXIT_CHECK);
}

#[test]
fn teacher_distill_sample_decode_bench_eval() {
    let ws = Ws::new();
    assert_eq!(ws.run("gen-data", "data", &[]), EXIT_OK);
    assert_eq!(ws.run("train-teacher", "teach", &[]), EXIT_OK);
    let metrics = ws.lines("teach/metrics.jsonl");
    assert!(!metrics.is_empty());
    let teacher_path = ws.p("teach/teacher.ckpt");
    let teacher = Model::load(&teacher_path).unwrap();
    let set_teacher = format!("paths.teacher={}", teacher_path.display());

    // Zero training steps leave both stage checkpoints equal to the teacher.
    assert_eq!(ws.run("distill", "dist", &["--set", &set_teacher]), EXIT_OK);
    let ckpts: Vec<PathBuf> = fs::read_dir(ws.p("dist"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    assert_eq!(ckpts.len(), 2);
    for c in &ckpts {
        assert_eq!(Model::load(c).unwrap(), teacher);
    }
    for l in fs::read_to_string(ws.p("dist/metrics.jsonl")).unwrap().lines() {
        serde_json::from_str::<Value>(l).unwrap();
    }

    // Collected pools feed distill the same way as pools built in place.
    assert_eq!(ws.run("collect", "pools", &["--set", &set_teacher]), EXIT_OK);
    let set_pools = format!("paths.pools={}", ws.p("pools").display());
    assert_eq!(ws.run("distill", "dist2", &["--set", &set_teacher, "--set", &set_pools]), EXIT_OK);
    assert!(same_bytes(&ws.p("dist/summary.json"), &ws.p("dist2/summary.json")));

    // Sampling: an over-long prompt becomes an error entry, the rest proceed.
    let long: Vec<String> = (0..200).map(|i| (i % 60).to_string()).collect();
    fs::write(ws.p("prompts.txt"), format!("3 7 11\n{}\n5 9\n", long.join(" "))).unwrap();
    let set_ckpt = format!("paths.checkpoint={}", teacher_path.display());
    let set_prompts = format!("paths.prompts={}", ws.p("prompts.txt").display());
    for (out, steps) in [("s16", "16"), ("s16b", "16"), ("s2", "2")] {
        let k = format!("sample.steps={steps}");
        assert_eq!(ws.run("sample", out, &["--set", &set_ckpt, "--set", &set_prompts, "--set", &k]), EXIT_OK);
    }
    assert!(same_bytes(&ws.p("s16/samples.jsonl"), &ws.p("s16b/samples.jsonl")));
    for out in ["s16", "s2"] {
        let rows = ws.lines(&format!("{out}/samples.jsonl"));
        assert_eq!(rows.len(), 3);
        assert!(rows[1].get("error").is_some());
        for r in [&rows[0], &rows[2]] {
            let grid = r["grid"].as_array().unwrap();
            assert_eq!(grid.len(), teacher.config.image_tokens());
            let mask = u64::from(teacher.config.vocab.mask());
            assert!(grid.iter().all(|g| g.as_u64().unwrap() != mask));
        }
        assert_eq!(ws.lines(&format!("{out}/sample_timing.jsonl")).len(), 3);
    }

    // Captions, then the bench over teacher vs itself.
    assert_eq!(ws.run("decode-text", "cap", &["--set", &set_ckpt]), EXIT_OK);
    let caps = ws.lines("cap/captions.jsonl");
    assert_eq!(caps.len(), 4);
    let mean_it = ws.json("cap/decode_summary.json")["mean_iterations"].as_f64().unwrap();

    let both = format!("paths.checkpoints={0},{0}", teacher_path.display());
    assert_eq!(ws.run("bench", "bench", &["--set", &set_teacher, "--set", &both]), EXIT_OK);
    let bench = ws.json("bench/bench.json");
    let rows = bench.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert_eq!(r["iteration_ratio"].as_f64().unwrap(), 1.0);
        assert_eq!(r["ar_tokens_per_forward"].as_f64().unwrap(), 1.0);
        assert!((r["jacobi_mean_iterations"].as_f64().unwrap() - mean_it).abs() < 1e-12);
    }

    assert_eq!(ws.run("eval", "ev1", &["--set", &set_ckpt]), EXIT_OK);
    assert_eq!(ws.run("eval", "ev2", &["--set", &set_ckpt]), EXIT_OK);
    assert!(same_bytes(&ws.p("ev1/eval.json"), &ws.p("ev2/eval.json")));
    let ev = ws.json("ev1/eval.json");
    assert_eq!(ev["images"].as_array().unwrap().len(), 2);
}
