use std::fs;
use std::path::Path;
use std::process::Command;

use sfwm::harness::cli::{self, read_manifest, FileHash, Layout, RunConfig, Stage, Task};
use sfwm::numerics::{LrSchedule, Primitive};
use sfwm::Error;

const TINY: &str = r#"
[water]
train_episodes = 3
heldout_episodes = 1
eval_trials = 2
[water.ae]
steps = 20
[water.ae.optimizer.schedule]
total_steps = 20
warmup_steps = 2
[water.wm]
steps = 20
[water.wm.optimizer.schedule]
total_steps = 20
warmup_steps = 2
[water.policy]
steps = 20
[water.policy.optimizer.schedule]
total_steps = 20
warmup_steps = 2
[piano]
train_etudes = 2
eval_etudes = 2
[piano.ae]
steps = 20
[piano.ae.optimizer.schedule]
total_steps = 20
warmup_steps = 2
[piano.wm]
steps = 20
[piano.wm.optimizer.schedule]
total_steps = 20
warmup_steps = 2
"#;

fn tiny(out: &Path, task: Task) -> RunConfig {
    let mut c = RunConfig::from_toml(TINY, cli::Profile::Desk).unwrap();
    c.out = out.to_path_buf();
    c.task = task;
    c
}

fn outputs(e: &cli::ManifestEntry) -> Vec<FileHash> {
    e.outputs.clone()
}

fn water_models(cfg: &RunConfig) {
    cli::cmd_synth(cfg).unwrap();
    cli::cmd_preprocess(cfg, None).unwrap();
    cli::cmd_train(cfg, Stage::Ae, false).unwrap();
    cli::cmd_train(cfg, Stage::Wm, false).unwrap();
}

fn sfwm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sfwm")).args(args).output().unwrap()
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[water]\ntrain_epsiodes = 3\n").unwrap();
    let out = sfwm(&["--config", cfg.to_str().unwrap(), "synth"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train_epsiodes"));
    assert!(matches!(
        RunConfig::from_toml("bogus = 1", cli::Profile::Desk),
        Err(Error::Config(_))
    ));
}

#[test]
fn train_wm_without_ae_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = sfwm(&["--out", dir.path().to_str().unwrap(), "train", "wm"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("sfwm train:"), "{err}");
    assert!(err.contains("ae.ckpt"), "{err}");
}

#[test]
fn empty_dataset_request() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path(), Task::Water);
    cfg.water.train_episodes = 0;
    cfg.water.heldout_episodes = 0;
    let err = cli::cmd_synth(&cfg).unwrap_err();
    assert!(err.to_string().contains("empty dataset request"));
    assert_eq!(cli::exit_code(&err), 2);
    cfg.task = Task::Piano;
    cfg.piano.train_etudes = 0;
    assert!(cli::cmd_synth(&cfg).is_err());
}

#[test]
fn synth_is_byte_identical_and_writes_resolved_config() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut ca = tiny(a.path(), Task::Water);
    ca.water.train_episodes = 20;
    ca.water.heldout_episodes = 0;
    let cb = RunConfig {
        out: b.path().to_path_buf(),
        ..ca.clone()
    };
    let ea = cli::cmd_synth(&ca).unwrap();
    let eb = cli::cmd_synth(&cb).unwrap();
    let wavs = outputs(&ea).iter().filter(|f| f.path.ends_with(".wav")).count();
    assert_eq!(wavs, 20);
    assert_eq!(outputs(&ea), outputs(&eb));
    let echoed = fs::read_to_string(a.path().join("config.toml")).unwrap();
    assert_eq!(RunConfig::from_toml(&echoed, cli::Profile::Desk).unwrap().water, ca.water);
}

#[test]
fn manifest_hashes_track_file_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Task::Piano);
    let e = cli::cmd_synth(&cfg).unwrap();
    for f in &e.outputs {
        assert_eq!(cli::file_hash(&dir.path().join(&f.path)).unwrap(), f.sha256);
    }
    let first = dir.path().join(&e.outputs[0].path);
    let mut bytes = fs::read(&first).unwrap();
    bytes[0] ^= 1;
    fs::write(&first, &bytes).unwrap();
    assert_ne!(cli::file_hash(&first).unwrap(), e.outputs[0].sha256);
    // the manifest is append-only
    cli::cmd_synth(&cfg).unwrap();
    let m = read_manifest(dir.path()).unwrap();
    assert_eq!(m.len(), 2);
    assert_eq!(m[0], e);
}

#[test]
fn water_stages_are_decoupled_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Task::Water);
    water_models(&cfg);
    let layout = Layout {
        root: dir.path().to_path_buf(),
    };
    let hashes = || {
        ["ae", "wm"]
            .map(|n| cli::file_hash(&layout.ckpt(Task::Water, n)).unwrap())
    };
    let before = hashes();
    let p1 = cli::cmd_train(&cfg, Stage::Policy, false).unwrap();
    let p2 = cli::cmd_train(&cfg, Stage::Policy, false).unwrap();
    assert_eq!(before, hashes());
    assert_eq!(outputs(&p1), outputs(&p2));
    let wm_again = cli::cmd_train(&cfg, Stage::Wm, false).unwrap();
    assert_eq!(before, hashes());
    assert!(wm_again.outputs.iter().any(|f| f.sha256 == before[1]));

    let csv = fs::read_to_string(layout.logs().join("water_wm_loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    let steps: Vec<u64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps.len(), 20);
    assert!(steps.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn water_generate_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Task::Water);
    water_models(&cfg);
    let err = cli::cmd_eval(&cfg, Task::Water).unwrap_err();
    assert_eq!(cli::exit_code(&err), 3);

    let g1 = cli::cmd_generate(&cfg, None, 1).unwrap();
    assert_eq!(g1.metrics["rows"], 256);
    let g2 = cli::cmd_generate(&cfg, None, 1).unwrap();
    assert_eq!(outputs(&g1), outputs(&g2));

    cli::cmd_train(&cfg, Stage::Policy, false).unwrap();
    cli::cmd_train(&cfg, Stage::Policy, true).unwrap();
    let (_, arms) = cli::cmd_eval(&cfg, Task::Water).unwrap();
    let csv = fs::read_to_string(dir.path().join("eval/water.csv")).unwrap();
    for a in &arms {
        let rows: Vec<&str> = csv.lines().skip(1).filter(|l| l.split(',').nth(1) == Some(&a.arm)).collect();
        let wins = rows.iter().filter(|l| l.split(',').nth(2) == Some("1")).count();
        assert_eq!(rows.len(), a.n);
        assert_eq!(Some(wins), a.successes);
    }
}

#[test]
fn short_context_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Task::Water);
    water_models(&cfg);
    let wav = dir.path().join("short.wav");
    let pcm = sfwm::signal::PcmSignal::new(vec![0.0; 8000], 16_000).unwrap();
    fs::write(&wav, sfwm::signal::wav::encode_wav_pcm16(&pcm)).unwrap();
    assert!(cli::cmd_generate(&cfg, Some(&wav), 1).is_err());
}

#[test]
fn piano_generate_and_paired_eval() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Task::Piano);
    cli::cmd_synth(&cfg).unwrap();
    cli::cmd_train(&cfg, Stage::Ae, false).unwrap();
    cli::cmd_train(&cfg, Stage::Wm, false).unwrap();
    let err = cli::cmd_train(&cfg, Stage::Policy, false).unwrap_err();
    assert_eq!(cli::exit_code(&err), 2);

    let g = cli::cmd_generate(&cfg, None, 4).unwrap();
    assert_eq!(g.metrics["rows"], 256);

    let (_, arms) = cli::cmd_eval(&cfg, Task::Piano).unwrap();
    assert_eq!(arms.len(), 2);
    let csv = fs::read_to_string(dir.path().join("eval/piano.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let h1: Vec<_> = rows.iter().filter(|r| r[2] == "1").collect();
    let h16: Vec<_> = rows.iter().filter(|r| r[2] == "16").collect();
    assert_eq!(h1.len(), h16.len());
    for (a, b) in h1.iter().zip(&h16) {
        assert_eq!((a[0], a[1]), (b[0], b[1]));
    }
    let mean = |v: &[&Vec<&str>]| v.iter().map(|r| r[4].parse::<f64>().unwrap()).sum::<f64>() / v.len() as f64;
    assert!((mean(&h1) - arms[0].mean).abs() < 1e-5);
    assert!((mean(&h16) - arms[1].mean).abs() < 1e-5);
}

#[test]
fn gradcheck_names_corrupted_primitive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), Task::Water);
    let report = cli::cmd_gradcheck(&cfg, None).unwrap();
    assert!(report.entries.iter().all(|e| e.max_rel_error < 1e-4));
    let err = cli::cmd_gradcheck(&cfg, Some(Primitive::Tanh)).unwrap_err();
    assert_eq!(cli::exit_code(&err), 4);
    assert!(err.to_string().contains("tanh"), "{err}");
}

#[test]
fn paper_profile_overrides_training_defaults() {
    let c = RunConfig::for_profile(cli::Profile::Paper);
    assert_eq!(c.water.wm.batch_size, 256);
    assert_eq!(c.water.wm.steps, 3000);
    assert_eq!(c.water.wm.optimizer.schedule, LrSchedule::default());
    let d = RunConfig::from_toml("[water.wm]\nsteps = 7\n", cli::Profile::Paper).unwrap();
    assert_eq!(d.water.wm.steps, 7);
    assert_eq!(d.water.wm.batch_size, 256);
}

#[test]
fn plot_renders_csv_grid() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("g.csv");
    fs::write(&csv, "0,1\n0.5,0.25\n").unwrap();
    let pgm = dir.path().join("g.pgm");
    cli::cmd_plot(&csv, &pgm).unwrap();
    assert!(fs::read(&pgm).unwrap().starts_with(b"P5"));
}
