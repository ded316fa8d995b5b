use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mgca(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgca"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "users=30\nnews=80\ntrain_impressions=40\ntest_impressions=15\n";
const MODEL: &str = "train_dir=data/train\ntest_dir=data/test\nd_w=16\nd_e=8\nd=8\nl=8\nm=5\nlambda1=2\nlambda2=2\n\
                     text_heads=2\nbatch=16\nepochs=1\nlr=0.003\n";

fn with_data(dir: &Path) {
    fs::write(dir.join("synth.txt"), SMALL).unwrap();
    let o = mgca(&["synth", "--config", "synth.txt", "--out", "data"], dir);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn synth_is_deterministic_and_honours_topic_count() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("synth.txt"), format!("{SMALL}topics=3\n")).unwrap();
    let a = mgca(&["synth", "--config", "synth.txt", "--out", "a", "--seed", "4"], dir.path());
    let b = mgca(&["synth", "--config", "synth.txt", "--out", "b", "--seed", "4"], dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("topics=3"), "{}", stdout(&a));
    assert_eq!(stdout(&a), stdout(&b));
    for f in ["train/news.tsv", "train/behaviors.tsv", "test/behaviors.tsv", "triples.tsv"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_train_dir_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.txt"), "epochs=1\n").unwrap();
    let o = mgca(&["train", "--config", "run.txt", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train_dir"), "{}", stderr(&o));
}

#[test]
fn unknown_key_and_variant_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.txt"), "learning_rate=1\n").unwrap();
    let o = mgca(&["train", "--config", "bad.txt", "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));

    with_data(dir.path());
    fs::write(dir.path().join("run.txt"), MODEL).unwrap();
    let o = mgca(&["ablate", "--config", "run.txt", "--variants", "full,nope"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope"), "{}", stderr(&o));
}

#[test]
fn sweep_rejects_indivisible_heads_before_training() {
    let dir = tempfile::tempdir().unwrap();
    with_data(dir.path());
    fs::write(dir.path().join("run.txt"), MODEL).unwrap();
    let o = mgca(&["sweep", "--config", "run.txt", "--param", "lambda1", "--values", "2,3"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stdout(&o).is_empty());
}

#[test]
fn train_then_eval_prints_four_metrics() {
    let dir = tempfile::tempdir().unwrap();
    with_data(dir.path());
    fs::write(dir.path().join("run.txt"), MODEL).unwrap();
    let o = mgca(&["train", "--config", "run.txt", "--out", "run"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("run/history.txt").exists());

    let o = mgca(&["eval", "--checkpoint", "run/checkpoint", "--data", "data/test"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let keys: Vec<&str> = out.split_whitespace().map(|kv| kv.split('=').next().unwrap()).collect();
    assert_eq!(keys, ["auc", "mrr", "ndcg5", "ndcg10"]);
    for kv in out.split_whitespace() {
        let v: f64 = kv.split('=').nth(1).unwrap().parse().unwrap();
        assert!((0.0..=1.0).contains(&v), "{kv}");
    }
}

#[test]
fn gradcheck_fails_on_corrupted_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let ok = mgca(&["gradcheck", "--samples", "4"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    let bad = mgca(&["gradcheck", "--samples", "4", "--corrupt-gradient"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stdout(&bad).contains("passed=false"));
}
