use std::path::Path;
use std::process::{Command, Output};

use pwiser::cli::KEYS;
use pwiser::data::{load_tsv, LabelPolicy};
use pwiser::metrics::{evaluate, EvalReport};
use pwiser::models::Model;
use pwiser::trainer::EVAL_CHUNK;

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwiser"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], cwd: &Path) -> (i32, String) {
    let out = run(args, cwd);
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

const SMALL: [&str; 5] = [
    "data.vocab_size=101",
    "model.embed_dim=8",
    "model.num_experts=2",
    "train.epochs=2",
    "train.batch_size=512",
];

fn train_args<'a>(run_dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "--run-dir",
        run_dir,
        "train",
        "data.train_path=data/train.tsv",
        "data.valid_path=data/valid.tsv",
    ];
    args.extend(SMALL);
    args.extend(extra);
    args
}

fn synth(cwd: &Path, dir: &str, noise: &str) {
    ok(
        &[
            "synth-gen",
            "--rows",
            "4000",
            "--seed",
            "5",
            "--noise-rate",
            noise,
            "--out-dir",
            dir,
        ],
        cwd,
    );
}

#[test]
fn zero_noise_files_equal_clean_files() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "d", "0");
    for split in ["train", "valid"] {
        let noisy = std::fs::read(tmp.path().join(format!("d/{split}.tsv"))).unwrap();
        let clean = std::fs::read(tmp.path().join(format!("d/{split}_clean.tsv"))).unwrap();
        assert_eq!(noisy, clean);
    }
    synth(tmp.path(), "n", "0.2");
    // noise never changes the clean copy
    assert_eq!(
        std::fs::read(tmp.path().join("n/train_clean.tsv")).unwrap(),
        std::fs::read(tmp.path().join("d/train_clean.tsv")).unwrap()
    );
    assert_ne!(
        std::fs::read(tmp.path().join("n/train.tsv")).unwrap(),
        std::fs::read(tmp.path().join("n/train_clean.tsv")).unwrap()
    );
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    synth(cwd, "data", "0.1");
    ok(&train_args("run", &["model.arch=mmoe"]), cwd);
    let run_dir = cwd.join("run");
    for f in [
        "config.txt",
        "history_steps.tsv",
        "history_epochs.tsv",
        "model.ckpt",
        "report.txt",
        "report.tsv",
        "MANIFEST",
    ] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let config = std::fs::read_to_string(run_dir.join("config.txt")).unwrap();
    for key in KEYS {
        assert!(
            config.contains(&format!("{} = ", key.key))
                || config.contains(&format!("{}=", key.key)),
            "{} not in config",
            key.key
        );
    }
    let epochs = std::fs::read_to_string(run_dir.join("history_epochs.tsv")).unwrap();
    assert_eq!(epochs.lines().count(), 3);

    // the same model evaluated in memory
    let model = Model::load(&run_dir.join("model.ckpt")).unwrap();
    let valid = load_tsv(&cwd.join("data/valid.tsv"), &[], LabelPolicy::Coerce, 101)
        .unwrap()
        .dataset;
    let in_memory: EvalReport = evaluate(&model, &valid, EVAL_CHUNK).unwrap();
    let train_report = std::fs::read_to_string(run_dir.join("report.txt")).unwrap();
    assert_eq!(train_report, in_memory.to_kv());

    let stdout = ok(
        &[
            "--run-dir",
            "ev",
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--data",
            "data/valid.tsv",
        ],
        cwd,
    );
    assert!(stdout.contains(&in_memory.to_kv()));
    assert_eq!(
        std::fs::read_to_string(cwd.join("ev/report.txt")).unwrap(),
        in_memory.to_kv()
    );
}

#[test]
fn dnn_report_has_no_ctcvr_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "data", "0.1");
    let stdout = ok(&train_args("run", &["model.arch=dnn"]), tmp.path());
    assert!(stdout.contains("auc_ctr="));
    assert!(!stdout.contains("auc_ctcvr"));
}

#[test]
fn unknown_key_exits_2_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let (status, stderr) = code(&["train", "model.no_such_key=3"], tmp.path());
    assert_eq!(status, 2);
    assert!(stderr.contains("model.no_such_key"), "{stderr}");
    let (status, _) = code(
        &["train", "loss.lambda=-1", "data.train_path=x"],
        tmp.path(),
    );
    assert_eq!(status, 2);
}

#[test]
fn help_lists_every_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["train", "--help"], tmp.path());
    for key in KEYS {
        assert!(out.contains(key.key), "{} missing from help", key.key);
    }
}

#[test]
fn single_class_eval_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    synth(cwd, "data", "0.1");
    ok(&train_args("run", &["model.arch=dnn"]), cwd);
    let rows: String = (0..20)
        .map(|i| format!("0\t0\tv{}\tv1\tv2\tv3\tv4\tv5\n", i % 3))
        .collect();
    let header = "y_ctr\ty_cvr\tf0\tf1\tf2\tf3\tf4\tf5\n";
    std::fs::write(cwd.join("neg.tsv"), format!("{header}{rows}")).unwrap();
    let (status, stderr) = code(
        &[
            "--run-dir",
            "ev",
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--data",
            "neg.tsv",
        ],
        cwd,
    );
    assert_eq!(status, 2, "{stderr}");
    assert!(stderr.contains("AUC"), "{stderr}");
}

#[test]
fn missing_input_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let (status, _) = code(&["train", "data.train_path=nope.tsv"], tmp.path());
    assert_eq!(status, 4);
}

#[test]
fn exploding_run_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "data", "0.1");
    let (status, stderr) = code(&train_args("run", &["train.lr=1e300"]), tmp.path());
    assert_eq!(status, 3, "{stderr}");
    assert!(stderr.contains("non-finite"));
}

#[test]
fn gridsearch_has_one_row_per_cell_and_matches_train() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    synth(cwd, "data", "0.1");
    let mut grid = vec![
        "--run-dir",
        "grid",
        "gridsearch",
        "--lambda",
        "0,0.1",
        "--m1",
        "0.3",
        "--m2",
        "0.1,0.3",
    ];
    grid.extend([
        "data.train_path=data/train.tsv",
        "data.valid_path=data/valid.tsv",
        "model.arch=shared_bottom",
    ]);
    grid.extend(SMALL);
    ok(&grid, cwd);
    let table = std::fs::read_to_string(cwd.join("grid/grid.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    let default_row = rows
        .iter()
        .find(|r| r.split('\t').skip(1).take(3).collect::<Vec<_>>() == ["0.1", "0.3", "0.3"])
        .expect("default cell present");

    ok(&train_args("run", &["model.arch=shared_bottom"]), cwd);
    let report = std::fs::read_to_string(cwd.join("run/report.tsv")).unwrap();
    let header: Vec<&str> = report.lines().next().unwrap().split('\t').collect();
    let values: Vec<&str> = report.lines().nth(1).unwrap().split('\t').collect();
    let auc = values[header.iter().position(|h| *h == "auc_ctr").unwrap()];
    let grid_auc: f64 = default_row.split('\t').nth(4).unwrap().parse().unwrap();
    assert!(
        (grid_auc - auc.parse::<f64>().unwrap()).abs() < 5e-4,
        "{grid_auc} vs {auc}"
    );
}

#[test]
fn bench_loss_kernels_agree() {
    let tmp = tempfile::tempdir().unwrap();
    ok(
        &[
            "--run-dir",
            "b",
            "bench-loss",
            "--sizes",
            "64,512",
            "--reps",
            "1",
        ],
        tmp.path(),
    );
    let table = std::fs::read_to_string(tmp.path().join("b/bench_loss.tsv")).unwrap();
    let header: Vec<&str> = table.lines().next().unwrap().split('\t').collect();
    let col = header.iter().position(|h| *h == "max_deviation").unwrap();
    for line in table.lines().skip(1) {
        let dev: f64 = line.split('\t').nth(col).unwrap().parse().unwrap();
        assert!(dev <= 1e-9);
    }
}

#[test]
fn stats_counts_canonical_files() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(
        tmp.path().join("a.tsv"),
        "y_ctr\ty_cvr\tf\n1\t1\tx\n1\t0\ty\n0\t0\tz\n0\t1\tw\n",
    )
    .unwrap();
    let out = ok(&["stats", "a.tsv"], tmp.path());
    assert!(out.contains("violations=1"), "{out}");
}
