use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sscse(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sscse"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_one_line_error(o: &Output, kind: &str) {
    assert!(!o.status.success());
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with(&format!("error:{kind}:")), "{err}");
}

fn setup(dir: &Path) {
    let o = sscse(
        dir,
        &[
            "make-synth-corpus",
            "--out",
            "data/corpus.txt",
            "--n",
            "60",
            "--seed",
            "1",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = sscse(
        dir,
        &[
            "make-synth-sts",
            "--corpus",
            "data/corpus.txt",
            "--out",
            "data/synth.tsv",
            "--n-pairs",
            "40",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    fs::write(
        dir.join("run.cfg"),
        "corpus = data/corpus.txt\nsts.synth = data/synth.tsv\nd_model = 16\nn_heads = 2\n\
         d_ff = 32\nn_layers = 1\nmax_seq_len = 16\nbatch_size = 8\nsteps = 12\n\
         eval_every = 6\ntemperature = 0.3\noutput_dir = out\n",
    )
    .unwrap();
}

#[test]
fn train_eval_embed_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);

    let o = sscse(dir, &["train", "--config", "run.cfg", "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("steps=12 "));
    for f in [
        "checkpoint.sscse",
        "checkpoint_step6.sscse",
        "vocab.txt",
        "train_log.csv",
        "eval.json",
        "eval.csv",
        "run.json",
    ] {
        assert!(dir.join("out").join(f).is_file(), "missing {f}");
    }
    let log = fs::read_to_string(dir.join("out/train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,loss,mean_rate"));
    assert_eq!(log.lines().count(), 13);

    let eval = |out: &str| {
        let o = sscse(
            dir,
            &[
                "eval",
                "--checkpoint",
                "out/checkpoint.sscse",
                "--config",
                "run.cfg",
                "--output-dir",
                out,
            ],
        );
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(dir.join(out).join("eval.json")).unwrap()
    };
    let first = eval("e1");
    assert_eq!(first, eval("e2"));
    // same numbers as the report written at the end of training
    assert_eq!(
        fs::read_to_string(dir.join("out/eval.csv")).unwrap(),
        fs::read_to_string(dir.join("e1/eval.csv")).unwrap()
    );

    fs::write(dir.join("s.txt"), "the cat runs\nquiet river\n").unwrap();
    let o = sscse(
        dir,
        &[
            "embed",
            "--checkpoint",
            "out/checkpoint.sscse",
            "--input",
            "s.txt",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = stdout(&o);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].split(',').count(), 17);
    assert!(rows[1].starts_with("the cat runs,"));
}

#[test]
fn corrupted_checkpoint_leaves_no_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    fs::write(dir.join("bad.sscse"), b"XSCSE\x01\x00\x00\x00").unwrap();
    fs::write(dir.join("vocab.txt"), "cat\n").unwrap();
    let o = sscse(
        dir,
        &[
            "eval",
            "--checkpoint",
            "bad.sscse",
            "--sts",
            "synth=data/synth.tsv",
            "--output-dir",
            "rep",
        ],
    );
    assert_one_line_error(&o, "checkpoint");
    assert!(!dir.join("rep").exists());
}

#[test]
fn usage_and_config_errors_are_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_one_line_error(&sscse(dir, &["frobnicate"]), "usage");
    assert_eq!(sscse(dir, &["frobnicate"]).status.code(), Some(2));

    fs::write(dir.join("typo.cfg"), "learning_rate = 0.1\n").unwrap();
    let o = sscse(dir, &["train", "--config", "typo.cfg"]);
    assert_one_line_error(&o, "config");
    assert!(stderr(&o).contains("learning_rate"));

    fs::write(dir.join("missing.cfg"), "corpus = nowhere.txt\n").unwrap();
    assert_one_line_error(&sscse(dir, &["train", "--config", "missing.cfg"]), "config");
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let o = sscse(dir, &["gradcheck"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("pass ")));

    let o = sscse(dir, &["gradcheck", "--corrupt-gelu", "1.5"]);
    assert_one_line_error(&o, "contract");
    assert!(stderr(&o).contains("worst parameter"));
}

#[test]
fn ablate_single_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let o = sscse(
        dir,
        &[
            "ablate",
            "--config",
            "run.cfg",
            "--methods",
            "fixed",
            "--seeds",
            "4",
            "--output-dir",
            "abl",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.join("abl/ablation.csv")).unwrap();
    assert_eq!(csv, stdout(&o));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    let f: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(f[0], "fixed");
    assert_eq!(f[1], f[3], "avg equals max for one seed");
    assert!(dir.join("abl/fixed_seed4/checkpoint.sscse").is_file());
}
