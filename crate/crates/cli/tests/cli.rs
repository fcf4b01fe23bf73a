use std::path::Path;
use std::process::Command;
use std::time::Instant;

use latentkv::checkpoint::{encode_checkpoint, load_checkpoint, load_checkpoint_with, save_checkpoint};
use latentkv::interp::{parse_capture_csv, CAPTURE_CSV, SILHOUETTE_CSV, SUMMARY_TXT};
use latentkv::latent::InjectionMode;
use latentkv::model::ModelConfig;
use latentkv::tasks::{read_jsonl, solve_countdown, CountdownInstance};
use latentkv::{Error, TrainState32};
use latentkv_cli::commands::{
    cmd_eval, cmd_finetune, cmd_gen_data, cmd_interp, cmd_passcount, cmd_pretrain, DataTask, EvalTask, CHECKPOINT_FILE,
    METRICS_FILE,
};
use latentkv_cli::{exit_code, Overrides, RunConfig};

const TINY: &str = r#"
mode = "hyp2"
seed = 3

[model]
n_layers = 2
d_model = 64
n_heads = 4
vocab_size = 262
max_positions = 128

[schedule]
seq_len = 64
n_sites = 4
n_latents = 4
n_ahead = 4

[optimizer]
lr = 0.001
warmup_steps = 10

[task]
kind = "corpus"
synthetic_bytes = 60000

[train]
token_budget = 100000
batch_size = 4
eval_every = 100
checkpoint_every = 100
eval_sequences = 4
"#;

fn tiny(dir: &Path, budget: u64) -> RunConfig {
    let mut cfg = RunConfig::parse(TINY).unwrap();
    cfg.train.token_budget = budget;
    cfg.paths.out = dir.to_path_buf();
    cfg
}

const COUNTDOWN: &str = r#"
mode = "soft"
seed = 3

[model]
n_layers = 1
d_model = 16
n_heads = 2
vocab_size = 262
max_positions = 192

[schedule]
seq_len = 8
n_sites = 1
n_latents = 1
n_ahead = 1

[task]
kind = "countdown"
train_examples = 8
eval_examples = 4

[train]
epochs = 1
batch_size = 4
"#;

fn countdown_cfg(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(COUNTDOWN).unwrap();
    cfg.paths.out = dir.to_path_buf();
    cfg
}

fn run(f: impl FnOnce(&mut Vec<u8>) -> latentkv::Result<()>) -> String {
    let mut out = Vec::new();
    f(&mut out).unwrap();
    String::from_utf8(out).unwrap()
}

fn bits(s: &TrainState32) -> Vec<u32> {
    s.base
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
        .collect()
}

#[test]
fn infeasible_schedule_rejected_before_allocation() {
    let mut cfg = RunConfig::parse(TINY).unwrap();
    // would need terabytes if anything were allocated
    cfg.model = ModelConfig::new(64, 65536, 64, 262, 1 << 20);
    cfg.schedule.seq_len = 8;
    cfg.schedule.n_sites = 4;
    cfg.schedule.n_ahead = 4;
    let t = Instant::now();
    let err = cmd_pretrain(&cfg, None, &mut Vec::new()).unwrap_err();
    assert!(t.elapsed().as_secs_f64() < 1.0);
    assert!(matches!(err, Error::Config { .. }), "{}", err);
    assert!(err.to_string().contains("seq_len"), "{}", err);
    assert_eq!(exit_code(&err), 1);
}

#[test]
fn config_cross_field_checks() {
    let base = RunConfig::parse(TINY).unwrap();
    base.validate().unwrap();

    let mut c = base.clone();
    c.mode = "rollout".into();
    assert!(c.validate().is_err());

    let mut c = base.clone();
    c.model.vocab_size = 100;
    assert!(c.validate().unwrap_err().to_string().contains("vocab_size"));

    let mut c = base.clone();
    c.schedule.n_latents = 200;
    assert!(c.validate().is_err(), "span over max_positions must be rejected");

    assert!(RunConfig::parse(&format!("{}\nbogus = 1\n", TINY)).is_err());
}

#[test]
fn countdown_rejects_curriculum_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = countdown_cfg(dir.path());
    cfg.validate().unwrap();
    cfg.curriculum = Some(latentkv::train::CurriculumConfig {
        stages: 1,
        latents_per_stage: 1,
        epochs_per_stage: 1,
    });
    let err = cfg.validate().unwrap_err();
    assert!(err.to_string().contains("allow_countdown_curriculum"), "{}", err);
    cfg.task.allow_countdown_curriculum = true;
    cfg.validate().unwrap();

    cfg.task.operands = 6;
    assert!(cfg.validate().is_err());
}

#[test]
fn straight_to_sixteen_curriculum_accepted() {
    let text = r#"
mode = "hyp2"
[model]
n_layers = 2
d_model = 32
n_heads = 2
vocab_size = 262
max_positions = 512
[schedule]
seq_len = 64
n_sites = 1
n_latents = 16
n_ahead = 1
[curriculum]
stages = 1
latents_per_stage = 16
epochs_per_stage = 1
[task]
kind = "graph_qa"
"#;
    let cfg = RunConfig::parse(text).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.n_latents(), 16);

    let mut bad = cfg.clone();
    bad.schedule.n_latents = 8;
    assert!(bad.validate().unwrap_err().to_string().contains("curriculum"));

    let mut none = cfg;
    none.curriculum = None;
    assert!(none.validate().is_err(), "graph_qa needs a curriculum");
}

#[test]
fn overrides_take_precedence() {
    let mut cfg = RunConfig::parse(TINY).unwrap();
    cfg.apply(&Overrides {
        seed: Some(11),
        mode: Some("liu".into()),
        n_latents: Some(2),
        operands: Some(5),
        out: Some("elsewhere".into()),
    });
    assert_eq!(cfg.seed, 11);
    assert_eq!(cfg.mode().unwrap(), InjectionMode::EmbeddingFrozenBase);
    assert_eq!(cfg.schedule.n_latents, 2);
    assert_eq!(cfg.task.operands, 5);
    assert_eq!(cfg.paths.out, Path::new("elsewhere"));
    let round = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
    assert_eq!(round, cfg);
}

#[test]
fn pretrain_smoke_and_rerun_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = run(|o| cmd_pretrain(&tiny(a.path(), 100_000), None, o).map(|_| ()));
    let out_b = run(|o| cmd_pretrain(&tiny(b.path(), 100_000), None, o).map(|_| ()));
    assert!(a.path().join(CHECKPOINT_FILE).exists());
    assert!(out_a.contains("final step=391 tokens_seen=100096"), "{}", out_a);
    assert_eq!(out_a, out_b);
    let ma = std::fs::read(a.path().join(METRICS_FILE)).unwrap();
    let mb = std::fs::read(b.path().join(METRICS_FILE)).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 392);
    // the ppl column is filled every eval_every steps and at the end
    let last = String::from_utf8(mb).unwrap().lines().last().unwrap().to_string();
    assert!(!last.split(',').nth(3).unwrap().is_empty());
}

#[test]
fn frozen_base_checkpoint_keeps_initial_theta() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), 8_000);
    cfg.mode = "liu".into();
    let summary = cmd_pretrain(&cfg, None, &mut Vec::new()).unwrap();
    let saved = load_checkpoint::<f32>(&summary.checkpoint).unwrap();
    let init = TrainState32::new(
        InjectionMode::EmbeddingFrozenBase,
        &cfg.model,
        cfg.n_latents(),
        cfg.optimizer.clone(),
        cfg.seed,
    )
    .unwrap();
    assert_eq!(saved.step(), 32);
    assert_eq!(bits(&saved), bits(&init));
    assert_ne!(saved.coproc, init.coproc, "the Coprocessor must have trained");
}

#[test]
fn resumed_pretraining_matches_uninterrupted() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let full = run(|o| cmd_pretrain(&tiny(a.path(), 6_000), None, o).map(|_| ()));
    let first = cmd_pretrain(&tiny(b.path(), 3_000), None, &mut Vec::new()).unwrap();
    let resumed = run(|o| cmd_pretrain(&tiny(b.path(), 6_000), Some(&first.checkpoint), o).map(|_| ()));
    assert_eq!(full.lines().last(), resumed.lines().last());
    // the embedded run configs differ in token_budget, the states must not
    let state = |d: &Path| encode_checkpoint(&load_checkpoint::<f32>(&d.join(CHECKPOINT_FILE)).unwrap()).unwrap();
    assert_eq!(state(a.path()), state(b.path()));

    let mut other = tiny(b.path(), 9_000);
    other.mode = "hyp1".into();
    let err = cmd_pretrain(&other, Some(&first.checkpoint), &mut Vec::new()).unwrap_err();
    assert!(err.to_string().contains("trained as"), "{}", err);
}

#[test]
fn finetune_with_missing_resume_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = countdown_cfg(dir.path());
    let err = cmd_finetune(&cfg, Some(&dir.path().join("absent.bin")), &mut Vec::new()).unwrap_err();
    assert!(err.is_io(), "{}", err);
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn finetune_small_run_reports_accuracy_reproducibly() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out_a = run(|o| cmd_finetune(&countdown_cfg(a.path()), None, o).map(|_| ()));
    let out_b = run(|o| cmd_finetune(&countdown_cfg(b.path()), None, o).map(|_| ()));
    assert_eq!(out_a, out_b);
    let line = out_a.lines().last().unwrap();
    assert!(line.starts_with("accuracy=") && line.ends_with("total=4"), "{}", line);

    // a second finetune resumes from the first and may switch mode and N_L
    let c = tempfile::tempdir().unwrap();
    let mut cfg = countdown_cfg(c.path());
    cfg.mode = "hyp1".into();
    cfg.schedule.n_latents = 2;
    let ckpt = a.path().join(CHECKPOINT_FILE);
    cmd_finetune(&cfg, Some(&ckpt), &mut Vec::new()).unwrap();
    let before = load_checkpoint::<f32>(&ckpt).unwrap();
    let after = load_checkpoint::<f32>(&c.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(after.mode, InjectionMode::CacheConcatFrozenBase);
    assert_eq!(after.n_latents(), 2);
    assert_eq!(bits(&before), bits(&after), "hyp1 leaves the loaded Base untouched");
}

#[test]
fn gen_data_countdown_four_operands_all_verified() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cd.jsonl");
    cmd_gen_data(DataTask::Countdown, 100, 4, 0, 0, 5, &path, &mut Vec::new()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 100);
    let items: Vec<CountdownInstance> = read_jsonl(&path).unwrap();
    for inst in &items {
        assert_eq!(inst.nums.len(), 4);
        assert!(inst.verify(), "{:?}", inst);
        assert!(solve_countdown(&inst.nums, inst.target).is_some(), "{:?}", inst);
    }

    let cot = dir.path().join("g.jsonl");
    cmd_gen_data(DataTask::GraphQa, 10, 3, 3, 3, 5, &cot, &mut Vec::new()).unwrap();
    assert_eq!(std::fs::read_to_string(&cot).unwrap().lines().count(), 10);
}

#[test]
fn gen_data_unfiltered_keeps_unsolvable_draws() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("raw.jsonl");
    cmd_gen_data(DataTask::CountdownUnfiltered, 300, 3, 0, 0, 4, &path, &mut Vec::new()).unwrap();
    let items: Vec<CountdownInstance> = read_jsonl(&path).unwrap();
    assert_eq!(items.len(), 300);
    let mut unsolved = 0;
    for inst in &items {
        assert_eq!(
            inst.solution.is_some(),
            solve_countdown(&inst.nums, inst.target).is_some()
        );
        if inst.solution.is_none() {
            unsolved += 1;
        } else {
            assert!(inst.verify(), "{:?}", inst);
        }
    }
    assert!(unsolved > 0, "three operands should leave some targets unreachable");
}

fn saved_state(dir: &Path, mode: InjectionMode) -> std::path::PathBuf {
    let cfg = ModelConfig::new(1, 16, 2, 262, 192);
    let state = TrainState32::new(mode, &cfg, 2, Default::default(), 9).unwrap();
    let path = dir.join("s.bin");
    save_checkpoint(&path, &state).unwrap();
    path
}

#[test]
fn eval_on_empty_dataset_is_contract_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = saved_state(dir.path(), InjectionMode::EmbeddingCofinetuned);
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let err = cmd_eval(&ckpt, &empty, EvalTask::Countdown, &mut Vec::new()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{}", err);
    assert_eq!(exit_code(&err), 1);

    let data = dir.path().join("cd.jsonl");
    cmd_gen_data(DataTask::Countdown, 3, 3, 0, 0, 1, &data, &mut Vec::new()).unwrap();
    let out = run(|o| cmd_eval(&ckpt, &data, EvalTask::Countdown, o));
    assert!(out.contains("parse_failures=") && out.contains("total=3"), "{}", out);
}

#[test]
fn eval_corpus_uses_checkpoint_config() {
    let dir = tempfile::tempdir().unwrap();
    let summary = cmd_pretrain(&tiny(dir.path(), 2_000), None, &mut Vec::new()).unwrap();
    let (_, snapshot) = load_checkpoint_with::<f32>(&summary.checkpoint).unwrap();
    assert!(snapshot.is_some());
    let text = dir.path().join("c.txt");
    std::fs::write(&text, "the quick brown fox jumps over the lazy dog. ".repeat(20)).unwrap();
    let a = run(|o| cmd_eval(&summary.checkpoint, &text, EvalTask::Corpus, o));
    let b = run(|o| cmd_eval(&summary.checkpoint, &text, EvalTask::Corpus, o));
    assert!(a.starts_with("ppl="), "{}", a);
    assert_eq!(a, b);
}

#[test]
fn passcount_sixteen_latents() {
    let out = run(|o| cmd_passcount(16, 0, o).map(|_| ()));
    assert_eq!(
        out.trim(),
        "n_latents=16 sequential_rollout=17 three_pass=3 ratio=5.667"
    );
}

#[test]
fn interp_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = saved_state(dir.path(), InjectionMode::EmbeddingCofinetuned);
    let data = dir.path().join("cd.jsonl");
    cmd_gen_data(DataTask::Countdown, 12, 3, 0, 0, 2, &data, &mut Vec::new()).unwrap();
    let out_dir = dir.path().join("report");
    let summary = cmd_interp(
        &ckpt,
        &data,
        EvalTask::Countdown,
        0.97,
        None,
        true,
        &out_dir,
        &mut Vec::new(),
    )
    .unwrap();
    assert!(summary.starts_with("mean_offdiag_capture="), "{}", summary);
    for f in [CAPTURE_CSV, SILHOUETTE_CSV, SUMMARY_TXT, "activations.bin"] {
        assert!(out_dir.join(f).exists(), "{}", f);
    }
    let h = parse_capture_csv(&std::fs::read_to_string(out_dir.join(CAPTURE_CSV)).unwrap()).unwrap();
    assert_eq!(h.len(), 2);
    for (i, row) in h.iter().enumerate() {
        assert!(row[i].unwrap() >= 0.97 - 1e-9);
    }

    let soft = tempfile::tempdir().unwrap();
    let ckpt = saved_state(soft.path(), InjectionMode::SoftEmbeddingUnified);
    assert!(cmd_interp(
        &ckpt,
        &data,
        EvalTask::Countdown,
        0.97,
        None,
        true,
        &out_dir,
        &mut Vec::new()
    )
    .is_err());
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_latentkv"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = bin().args(["passcount", "--n-latents", "4"]).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(
        String::from_utf8_lossy(&ok.stdout).trim(),
        "n_latents=4 sequential_rollout=5 three_pass=3 ratio=1.667"
    );

    let missing = bin()
        .args(["pretrain", "--config"])
        .arg(dir.path().join("nope.toml"))
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, TINY.replace("n_ahead = 4", "n_ahead = 40")).unwrap();
    let bad = bin().args(["pretrain", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("seq_len"));

    let usage = bin().args(["pretrain", "--seed", "x"]).output().unwrap();
    assert_eq!(usage.status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));

    let data = dir.path().join("cd.jsonl");
    let gen = bin()
        .args([
            "gen-data",
            "--task",
            "countdown",
            "--count",
            "7",
            "--operands",
            "5",
            "--out",
        ])
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(gen.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 7);
}

#[test]
fn binary_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, TINY.replace("token_budget = 100000", "token_budget = 1000")).unwrap();
    let out = dir.path().join("o");
    let res = bin()
        .args(["pretrain", "--mode", "hyp1", "--n-latents", "2", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(
        stdout.contains("mode=cache_concat_frozen_base n_latents=2"),
        "{}",
        stdout
    );
    let written = RunConfig::load(&out.join("config.toml")).unwrap();
    assert_eq!(written.schedule.n_latents, 2);
}
