use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dvqa_mini::net::checkpoint::Checkpoint;
use dvqa_mini::net::{build_teacher, QualityNetConfig};
use dvqa_mini::Geometry;

const TINY: &str = "\
# small corpus and network
patch_height = 8
patch_width = 8
conv_widths = 4,6
head_width = 5
train_sources = 12
val_sources = 4
test_sources = 4
pairs_per_source = 6
eval_sources = 6
eval_frame_height = 16
eval_frame_width = 16
batch_size = 8
teacher_epochs = 2
sparse_epochs = 2
distill_epochs = 2
";

fn cli(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dvqa-mini"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cli(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    ok(dir.path(), &["--config", "tiny.cfg", "gen-data"]);
    dir
}

#[test]
fn full_workflow_writes_every_artifact() {
    let dir = setup();
    let d = dir.path();
    let c = ["--config", "tiny.cfg"];
    ok(d, &[&c[..], &["train-teacher"]].concat());
    let sparse = ok(d, &[&c[..], &["sparsify", "--teacher", "run/teacher.ckpt", "--lambda", "0.5"]].concat());
    assert!(sparse.contains("global"));
    let echo = fs::read_to_string(d.join("run/config.txt")).unwrap();
    assert!(echo.contains("lambda = 0.5"), "{echo}");
    assert!(echo.contains("patch_height = 8"));
    let prune = ok(d, &[&c[..], &["prune", "--sparse", "run/sparse.ckpt", "--plan", "run/plan.txt"]].concat());
    assert!(prune.contains("retained"));
    ok(
        d,
        &[&c[..], &["distill", "--teacher", "run/teacher.ckpt", "--student", "run/student.ckpt", "--freeze-check"]]
            .concat(),
    );
    let table = ok(d, &[&c[..], &["eval", "run/teacher.ckpt", "student=run/distilled.ckpt"]].concat());
    assert!(table.contains("srocc retained"));
    assert!(table.contains("student"));
    let csv = ok(d, &[&c[..], &["eval", "run/teacher.ckpt", "run/distilled.ckpt", "--format", "csv"]].concat());
    assert!(csv.starts_with("model,dataset,items,srocc"));
    assert!(csv.contains("dataset,srocc_reference,srocc_candidate,f_statistic,p_value,verdict"));

    for f in [
        "data/manifest.txt",
        "data/config.txt",
        "run/config.txt",
        "run/teacher_log.csv",
        "run/sparse_density.txt",
        "run/sparse_log.csv",
        "run/plan.txt",
        "run/distilled_log.csv",
        "run/eval_report.csv",
        "run/eval_report.txt",
    ] {
        assert!(d.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["--config", "tiny.cfg", "--set", "teacher_epochs=3", "train-teacher", "--out", "run/straight.ckpt"]);
    ok(d, &["--config", "tiny.cfg", "train-teacher", "--out", "run/first.ckpt"]);
    ok(
        d,
        &[
            "--config",
            "tiny.cfg",
            "--set",
            "teacher_epochs=3",
            "train-teacher",
            "--resume",
            "run/first.ckpt",
            "--out",
            "run/resumed.ckpt",
        ],
    );
    let a = Checkpoint::read(d.join("run/straight.ckpt")).unwrap();
    let b = Checkpoint::read(d.join("run/resumed.ckpt")).unwrap();
    assert_eq!(b.meta_u64("epoch"), Some(3));
    assert_eq!(a.params, b.params);
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(code(&cli(d, &["no-such-command"])), 1);
    assert_eq!(code(&cli(d, &["--set", "nope=1", "gen-data"])), 1);
    let out = cli(d, &["--set", "batch_size=zero", "gen-data"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
    fs::write(d.join("dup.cfg"), "seed = 1\nseed = 2\n").unwrap();
    assert_eq!(code(&cli(d, &["--config", "dup.cfg", "gen-data"])), 1);
    assert_eq!(code(&cli(d, &["--help"])), 0);
}

#[test]
fn data_errors_exit_with_two() {
    let dir = setup();
    let d = dir.path();
    let c = ["--config", "tiny.cfg"];
    ok(d, &[&c[..], &["train-teacher"]].concat());

    let out = cli(d, &[&c[..], &["eval", "run/teacher.ckpt", "run/missing.ckpt"]].concat());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.ckpt"));

    // A student-shaped model is refused by sparsify.
    let (spec, params) = build_teacher::<f32>(&QualityNetConfig {
        patch: Geometry::new(1, 8, 8),
        conv_widths: vec![2, 3],
        head_width: 2,
        ..Default::default()
    })
    .unwrap();
    Checkpoint::new(spec, params).write(d.join("run/thin.ckpt")).unwrap();
    let out = cli(d, &[&c[..], &["sparsify", "--teacher", "run/thin.ckpt"]].concat());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("teacher-shaped"));

    // Distillation across geometries aborts.
    let (spec, params) = build_teacher::<f32>(&QualityNetConfig {
        patch: Geometry::new(1, 16, 16),
        conv_widths: vec![4, 6],
        head_width: 5,
        ..Default::default()
    })
    .unwrap();
    Checkpoint::new(spec, params).write(d.join("run/wide.ckpt")).unwrap();
    let out = cli(d, &[&c[..], &["distill", "--teacher", "run/teacher.ckpt", "--student", "run/wide.ckpt"]].concat());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("geometry"));

    // Corrupt corpus file.
    let train = d.join("data/train.pairs");
    let bytes = fs::read(&train).unwrap();
    fs::write(&train, &bytes[..bytes.len() - 10]).unwrap();
    assert_eq!(code(&cli(d, &[&c[..], &["train-teacher"]].concat())), 2);
}

#[test]
fn divergence_exits_with_three() {
    let dir = setup();
    let out = cli(dir.path(), &["--config", "tiny.cfg", "--set", "teacher_lr=1e30", "train-teacher"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("numerical"));
}
