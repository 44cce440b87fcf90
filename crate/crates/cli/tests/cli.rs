use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn est(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_est")).args(args).output().expect("run est")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no `{key}` in:\n{text}"))
        .to_string()
}

/// Tiny model, corpus and config in `dir`; returns the config path.
fn setup(dir: &Path, stages: &str, extra: &str) -> PathBuf {
    let corpus = dir.join("corpus.txt");
    let o = est(&["gen-corpus", "--out", corpus.to_str().unwrap(), "--bytes", "40000", "--seed", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let config = dir.join("run.cfg");
    let text = format!(
        "[model]\nn_layers = 2\nn_heads = 4\nhead_dim = 8\nhidden = 32\nmlp_inner = 64\nseq_len = 16\n\n\
         [scheduler]\nstages = {stages}\n\n\
         [train]\nbatch_size = 4\neval_batches = 2\n{extra}\n\n\
         [lr_schedule]\nwarmup_steps = 5\n\n\
         [data]\ntrain = corpus.txt\n"
    );
    fs::write(&config, text).unwrap();
    config
}

fn train(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    est(&args)
}

#[test]
fn missing_config_names_path_and_exits_1() {
    let o = est(&["train", "--config", "/nonexistent/run.cfg", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/run.cfg"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(est(&["train"]).status.code(), Some(1));
    assert_eq!(est(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(est(&["--help"]).status.code(), Some(0));
}

#[test]
fn smoke_run_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "20:0.5,0.5,0.5; 35:0.5,0.5,1; 50:1,1,1", "checkpoint_every = 25\neval_every = 25");
    let out = dir.path().join("run");
    let o = train(&config, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,stage,loss,lr,cum_flops"));
    assert_eq!(lines.count(), 50);
    assert_eq!(fs::read_to_string(out.join("eval.csv")).unwrap().lines().count(), 3);
    for f in ["config", "summary", "run.log", "final/manifest", "checkpoints/step-00000025/manifest"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let summary = fs::read_to_string(out.join("summary")).unwrap();
    let savings: f64 = value(&summary, "savings_fraction").parse().unwrap();
    let predicted: f64 = value(&summary, "predicted_savings_fraction").parse().unwrap();
    assert!((savings - predicted).abs() < 1e-12);
    assert!(savings > 0.0);

    // stdout carries no timestamps, so a second run prints the same thing
    let again = train(&config, &dir.path().join("run2"), &[]);
    assert_eq!(stdout(&o), stdout(&again));
}

#[test]
fn resume_reproduces_final_loss() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "15:0.5,0.5,0.5; 40:1,1,1", "checkpoint_every = 20");
    let full = dir.path().join("full");
    assert!(train(&config, &full, &[]).status.success());

    let resumed = dir.path().join("resumed");
    let ckpt = full.join("checkpoints/step-00000020");
    let o = train(&config, &resumed, &["--resume", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read_to_string(full.join("summary")).unwrap();
    let b = fs::read_to_string(resumed.join("summary")).unwrap();
    assert_eq!(value(&a, "final_train_loss"), value(&b, "final_train_loss"));
    assert_eq!(value(&a, "final_eval_loss"), value(&b, "final_eval_loss"));
    assert_eq!(
        fs::read_to_string(full.join("loss.csv")).unwrap(),
        fs::read_to_string(resumed.join("loss.csv")).unwrap()
    );

    // a different config must not resume from it
    let other = dir.path().join("other.cfg");
    fs::write(&other, fs::read_to_string(&config).unwrap().replace("batch_size = 4", "batch_size = 2")).unwrap();
    let o = train(&other, &dir.path().join("x"), &["--resume", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("different config"));
}

#[test]
fn numerical_abort_exits_2_and_keeps_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "60:1,1,1", "checkpoint_every = 1");
    let text = fs::read_to_string(&config)
        .unwrap()
        .replace("warmup_steps = 5", "warmup_steps = 0\nmin_lr = 1e35")
        + "\n[optimizer]\npeak_lr = 1e35\n";
    fs::write(&config, text).unwrap();
    let out = dir.path().join("run");
    let o = train(&config, &out, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(out.join("loss.csv").exists());
    assert!(out.join("checkpoints/step-00000001/manifest").exists());
    assert!(!out.join("final").exists());
}

#[test]
fn plan_presets() {
    let last = |args: &[&str]| stdout(&est(args)).lines().last().unwrap_or_default().to_string();
    assert_eq!(last(&["plan", "--preset", "practical-gpt2"]), "savings: 26.7%");
    assert_eq!(last(&["plan", "--preset", "practical-tinyllama"]), "savings: 25.0%");
    assert_eq!(last(&["plan", "--preset", "table-1"]), "savings: 41.7%");
    assert_eq!(last(&["plan", "--stages", "1000:1,1,1"]), "savings: 0.0%");
    let csv = stdout(&est(&["plan", "--preset", "table-1", "--csv"]));
    assert!(csv.starts_with("stage,steps,"));
    assert_eq!(est(&["plan", "--preset", "no-such"]).status.code(), Some(1));
}

#[test]
fn shipped_desk_configs_parse() {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["desk.cfg", "desk-dense.cfg"] {
        let o = est(&["plan", "--config", configs.join(name).to_str().unwrap()]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let text = stdout(&o);
        assert!(text.contains("schedule: 400:0.5,0.5,0.5; 1400:0.5,0.5,1; 3000:1,1,1"), "{text}");
        assert_eq!(text.lines().last(), Some("savings: 26.7%"));
        assert_eq!(text.contains("dense mode"), name == "desk-dense.cfg");
    }
}

#[test]
fn eval_and_hessian_trace_on_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "10:1,1,1", "");
    let out = dir.path().join("run");
    assert!(train(&config, &out, &[]).status.success());
    let ckpt = out.join("final");
    let summary = fs::read_to_string(out.join("summary")).unwrap();

    let o = est(&["eval", "--ckpt", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(value(&stdout(&o), "eval_loss"), value(&summary, "final_eval_loss"));

    let csv = dir.path().join("trace.csv");
    let o = est(&["hessian-trace", "--ckpt", ckpt.to_str().unwrap(), "--probes", "1", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(value(&text, "std_error"), "0");
    assert_eq!(value(&text, "n_probes"), "1");
    assert!(value(&text, "trace").parse::<f64>().unwrap().is_finite());
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 2);
}

#[test]
fn eval_of_memorised_corpus_is_near_zero() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("abc.txt");
    fs::write(&corpus, "abcdefghijklmnopqrstuvwxyz".repeat(200)).unwrap();
    let config = dir.path().join("abc.cfg");
    fs::write(
        &config,
        "[model]\nn_layers = 2\nn_heads = 4\nhead_dim = 8\nhidden = 32\nmlp_inner = 64\nseq_len = 16\n\n\
         [scheduler]\nstages = 300:1,1,1\n\n[train]\nbatch_size = 8\neval_batches = 4\n\n\
         [optimizer]\npeak_lr = 1e-2\nweight_decay = 0\n\n[lr_schedule]\nwarmup_steps = 10\n\n\
         [data]\ntrain = abc.txt\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    assert!(train(&config, &out, &[]).status.success());
    let o = est(&["eval", "--ckpt", out.join("final").to_str().unwrap(), "--data", corpus.to_str().unwrap()]);
    let loss: f64 = value(&stdout(&o), "eval_loss").parse().unwrap();
    assert!(loss < 0.1, "{loss}");
}

#[test]
fn curves_with_one_and_two_logs() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "20:0.5,0.5,0.5; 40:0.5,0.5,1; 60:1,1,1", "");
    let est_run = dir.path().join("est");
    assert!(train(&config, &est_run, &[]).status.success());
    let dense_cfg = dir.path().join("dense.cfg");
    fs::write(&dense_cfg, fs::read_to_string(&config).unwrap().replace("eval_batches = 2", "eval_batches = 2\nmode = dense")).unwrap();
    let dense_run = dir.path().join("dense");
    assert!(train(&dense_cfg, &dense_run, &[]).status.success());

    let a = est_run.join("loss.csv");
    let b = dense_run.join("loss.csv");
    let one = dir.path().join("one.csv");
    let o = est(&["curves", "--log", a.to_str().unwrap(), "--out", one.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&one).unwrap();
    assert_eq!(text.lines().next(), Some("kind,log,step,stage,pre_mean,post_mean,drop,window,level,slope"));
    assert_eq!(text.lines().filter(|l| l.starts_with("transition,")).count(), 2);
    assert_eq!(text.lines().filter(|l| l.starts_with("slope,")).count(), 0);

    let two = dir.path().join("two.csv");
    let o = est(&[
        "curves", "--log", a.to_str().unwrap(), "--log2", b.to_str().unwrap(), "--out", two.to_str().unwrap(),
        "--level", "5.0", "--slope-window", "10",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&two).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("slope,")).count(), 2);

    let o = est(&["curves", "--log", "/nonexistent.csv", "--out", two.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
