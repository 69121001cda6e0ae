use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use otter::cli::RunManifest;
use otter::numerics::Matrix;
use otter::synthdata::{save_embeddings, SynthDataset};
use otter::trainer::{Checkpoint, EncoderState, Method, PairBatch, TeacherState, TrainConfig};

fn otter(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_otter"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn otter")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = otter(dir, args);
    assert!(
        out.status.success(),
        "otter {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .unwrap();
    r.records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

fn small_data(dir: &Path) {
    ok(
        dir,
        &[
            "gen-data",
            "--concepts",
            "8",
            "--per-concept",
            "32",
            "--swap",
            "0.1",
            "--seed",
            "1",
            "--out",
            "d.bin",
            "--holdout-out",
            "test.bin",
            "--holdout-per-concept",
            "8",
        ],
    );
}

#[test]
fn gen_data_writes_file_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(
        t.path(),
        &[
            "gen-data",
            "--concepts",
            "8",
            "--per-concept",
            "128",
            "--swap",
            "0.3",
            "--seed",
            "1",
            "--out",
            "d.bin",
        ],
    );
    assert!(stderr(&out).contains("1024 pairs"));
    let data = otter::synthdata::load_embeddings(&t.path().join("d.bin")).unwrap();
    assert_eq!(data.len(), 1024);
    let m = RunManifest::load(&t.path().join("d.bin.manifest.json")).unwrap();
    assert_eq!(m.command, "gen-data");
    assert!(m.artifacts.contains_key("d.bin"));
}

#[test]
fn usage_errors_exit_1() {
    let t = tempfile::tempdir().unwrap();
    let o = otter(t.path(), &["gen-data", "--concepts", "8"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--out"));

    let o = otter(t.path(), &["gen-data", "--swap", "1.5", "--out", "d.bin"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--swap"));

    let o = otter(t.path(), &["train", "--data", "missing.bin", "--out", "r"]);
    assert_eq!(o.status.code(), Some(1));

    let o = otter(
        t.path(),
        &[
            "train", "--data", "d.bin", "--method", "bogus", "--out", "r",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn help_lists_defaults() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(t.path(), &["train", "--help"]);
    let help = String::from_utf8_lossy(&o.stdout);
    assert!(help.contains("[default: 0.15]"));
    assert!(help.contains("[default: otter]"));
}

#[test]
fn train_eval_and_replay() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    small_data(dir);
    let o = ok(
        dir,
        &[
            "train", "--method", "otter", "--data", "d.bin", "--epochs", "3", "--out", "run",
        ],
    );
    assert!(stderr(&o).contains("alpha 0.5, lambda 0.15, iters 5, gamma 1/1, eta 100, ema on"));
    let ck = Checkpoint::load(&dir.join("run/checkpoint.json")).unwrap();
    assert_eq!(ck.config.method, Method::Otter);
    assert_eq!(ck.steps, 3 * (256 / 64));
    let log = read_csv(&dir.join("run/train_log.csv"));
    assert_eq!(log.len(), 1 + ck.steps);

    let o = ok(
        dir,
        &[
            "train", "--method", "ls", "--data", "d.bin", "--epochs", "1", "--out", "ls",
        ],
    );
    assert!(stderr(&o).contains("alpha 0.9"));
    let o = ok(
        dir,
        &[
            "train", "--method", "kd", "--no-ema", "--data", "d.bin", "--epochs", "1", "--out",
            "kd",
        ],
    );
    assert!(stderr(&o).contains("ema off"));

    ok(
        dir,
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.json",
            "--data",
            "test.bin",
            "--k",
            "1,3,8",
            "--out",
            "ev",
        ],
    );
    let rows = read_csv(&dir.join("ev/eval_report.csv"));
    let rates: Vec<f64> = rows[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(rates.len(), 3);
    assert!(rates.iter().all(|r| (0.0..=1.0).contains(r)));
    assert!(rates.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(rates[2], 1.0);

    let o = otter(
        dir,
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.json",
            "--data",
            "test.bin",
            "--k",
            "9",
            "--out",
            "ev2",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("exceeds the number of classes"));

    // Default K list drops values above the class count.
    ok(
        dir,
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.json",
            "--data",
            "test.bin",
            "--out",
            "ev3",
        ],
    );
    assert_eq!(read_csv(&dir.join("ev3/eval_report.csv")).len(), 3);

    for (manifest, target) in [
        ("run/manifest.json", "run_again"),
        ("ev/manifest.json", "ev_again"),
    ] {
        let o = ok(dir, &["replay", "--manifest", manifest, "--out", target]);
        assert!(stderr(&o).contains("replay identical"), "{}", stderr(&o));
    }
    assert_eq!(
        fs::read(dir.join("run/checkpoint.json")).unwrap(),
        fs::read(dir.join("run_again/checkpoint.json")).unwrap()
    );
}

#[test]
fn replay_detects_changed_inputs() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    small_data(dir);
    ok(
        dir,
        &["train", "--data", "d.bin", "--epochs", "1", "--out", "run"],
    );
    ok(
        dir,
        &[
            "gen-data",
            "--concepts",
            "8",
            "--per-concept",
            "32",
            "--seed",
            "2",
            "--out",
            "d.bin",
        ],
    );
    let o = otter(
        dir,
        &[
            "replay",
            "--manifest",
            "run/manifest.json",
            "--out",
            "again",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("changed"));
}

#[test]
fn eval_rejects_dimension_mismatch() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    small_data(dir);
    ok(
        dir,
        &["train", "--data", "d.bin", "--epochs", "1", "--out", "run"],
    );
    ok(dir, &["gen-data", "--d-img", "12", "--out", "other.bin"]);
    let o = otter(
        dir,
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.json",
            "--data",
            "other.bin",
            "--out",
            "ev",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("dimension mismatch"), "{}", stderr(&o));
}

#[test]
fn text_variant_trains() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    ok(dir, &["gen-data", "--per-concept", "16", "--out", "d.csv"]);
    ok(
        dir,
        &["train", "--data", "d.csv", "--epochs", "1", "--out", "run"],
    );
    ok(
        dir,
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.json",
            "--data",
            "d.csv",
            "--k",
            "1",
            "--out",
            "ev",
        ],
    );
}

#[test]
fn sweep_tables_and_replay() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    fs::write(
        dir.join("iters.toml"),
        "seeds = [0, 1]\n[synth]\nn_concepts = 4\nsamples_per_concept = 32\nholdout_per_concept = 8\n\
         [base]\nepochs = 2\n[grid]\nsinkhorn_iters = [0, 2, 4, 6]\n",
    )
    .unwrap();
    ok(dir, &["sweep", "--sweep", "iters.toml", "--out", "sw"]);
    let rows = read_csv(&dir.join("sw/sweep.csv"));
    assert_eq!(
        rows[0],
        [
            "sinkhorn_iters",
            "n_seeds",
            "n_failed",
            "fh_at_1_mean",
            "final_loss_mean"
        ]
    );
    assert_eq!(rows.len(), 5);
    for r in &rows[1..] {
        let fh: f64 = r[3].parse().unwrap();
        assert!((0.0..=1.0).contains(&fh));
    }
    assert_eq!(read_csv(&dir.join("sw/sweep_runs.csv")).len(), 1 + 8);

    let o = ok(
        dir,
        &["replay", "--manifest", "sw/manifest.json", "--out", "sw2"],
    );
    assert!(stderr(&o).contains("replay identical: 2 artifacts"));

    fs::write(
        dir.join("dup.toml"),
        "[synth]\nn_concepts = 4\nsamples_per_concept = 16\n[base]\nepochs = 1\n\
         [[run]]\nalpha = 0.5\n[[run]]\nalpha = 0.5\n",
    )
    .unwrap();
    let o = ok(dir, &["sweep", "--sweep", "dup.toml", "--out", "dup"]);
    assert!(stderr(&o).contains("duplicate"));
    assert_eq!(read_csv(&dir.join("dup/sweep.csv")).len(), 2);

    fs::write(dir.join("empty.toml"), "").unwrap();
    let o = otter(dir, &["sweep", "--sweep", "empty.toml", "--out", "e"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_records_failed_runs_and_continues() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    // A batch larger than the dataset leaves no full batch: that run fails.
    fs::write(
        dir.join("s.toml"),
        "[synth]\nn_concepts = 4\nsamples_per_concept = 16\n[base]\nepochs = 1\n[grid]\nbatch_size = [16, 128]\n",
    )
    .unwrap();
    ok(dir, &["sweep", "--sweep", "s.toml", "--out", "sw"]);
    let rows = read_csv(&dir.join("sw/sweep_runs.csv"));
    assert_eq!(rows[1][2], "ok");
    assert_eq!(rows[2][2], "failed");
}

fn write_model(dir: &Path, name: &str, n: usize, log_inv_temp: f64) -> PathBuf {
    let eye = Matrix::identity(n);
    let student = EncoderState {
        w_image: eye.clone(),
        w_text: eye,
        log_inv_temp,
    };
    let ck = Checkpoint {
        format: Checkpoint::FORMAT.into(),
        version: Checkpoint::VERSION,
        config: TrainConfig {
            d_emb: n,
            ..TrainConfig::for_method(Method::Infonce)
        },
        teacher: TeacherState::from_student(&student, 0.999),
        student,
        steps: 0,
    };
    let path = dir.join(name);
    ck.save(&path).unwrap();
    path
}

#[test]
fn noise_stats_limits() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    // One concept per sample, one-hot features: the identity encoder at a
    // sharp temperature is a perfect matcher.
    let n = 16;
    let pairs = PairBatch::new(Matrix::identity(n), Matrix::identity(n)).unwrap();
    let data = SynthDataset {
        pairs,
        concept_of_image: Some((0..n).collect()),
        concept_of_caption: Some((0..n).collect()),
        class_prototypes_text: Some(Matrix::identity(n)),
        class_prototypes_image: Some(Matrix::identity(n)),
        attributes: None,
    };
    save_embeddings(&dir.join("onehot.bin"), &data).unwrap();
    write_model(dir, "sharp.json", n, 1000f64.ln());
    write_model(dir, "flat.json", n, -60.0);

    ok(
        dir,
        &[
            "noise-stats",
            "--checkpoint",
            "sharp.json",
            "--data",
            "onehot.bin",
            "--batch-sizes",
            "8",
            "--n-batches",
            "20",
            "--out",
            "sharp",
        ],
    );
    let rows = read_csv(&dir.join("sharp/noise_stats.csv"));
    let paired: f64 = rows[1][2].parse().unwrap();
    let unpaired: f64 = rows[1][3].parse().unwrap();
    assert!(paired > 1.0 - 1e-12 && unpaired < 1e-12);

    ok(
        dir,
        &[
            "noise-stats",
            "--checkpoint",
            "flat.json",
            "--data",
            "onehot.bin",
            "--batch-sizes",
            "2",
            "--n-batches",
            "10",
            "--out",
            "flat",
        ],
    );
    let rows = read_csv(&dir.join("flat/noise_stats.csv"));
    let paired: f64 = rows[1][2].parse().unwrap();
    let unpaired: f64 = rows[1][3].parse().unwrap();
    assert!((paired - 0.5).abs() < 1e-12 && (unpaired - 0.5).abs() < 1e-12);
    assert_eq!(
        read_csv(&dir.join("flat/noise_stats_batches.csv")).len(),
        11
    );
}

#[test]
fn compose_bench_reports_baseline() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    ok(
        dir,
        &[
            "gen-data",
            "--attributes",
            "--per-concept",
            "32",
            "--out",
            "attr.bin",
        ],
    );
    ok(
        dir,
        &[
            "train", "--data", "attr.bin", "--epochs", "2", "--out", "run",
        ],
    );
    ok(
        dir,
        &[
            "compose-bench",
            "--checkpoint",
            "run/checkpoint.json",
            "--data",
            "attr.bin",
            "--n-queries",
            "100",
            "--out",
            "cb",
        ],
    );
    let rows = read_csv(&dir.join("cb/compose.csv"));
    assert_eq!(rows[1][0], "model");
    assert_eq!(rows[2][0], "random_baseline");
    for r in &rows[1..] {
        for v in &r[1..4] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let o = otter(
        dir,
        &[
            "compose-bench",
            "--checkpoint",
            "run/checkpoint.json",
            "--data",
            "attr.bin",
            "--min-common",
            "1000",
            "--out",
            "cb2",
        ],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(
        stderr(&o).contains("shares at least 1000"),
        "{}",
        stderr(&o)
    );
}

#[test]
fn sinkhorn_command() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    fs::write(dir.join("s.csv"), "2,0\n0,2\n").unwrap();
    ok(
        dir,
        &[
            "sinkhorn", "--matrix", "s.csv", "--iters", "0", "--out", "plan.csv",
        ],
    );
    let rows = read_csv(&dir.join("plan.csv"));
    let p: f64 = rows[0][0].parse().unwrap();
    assert!((p - 0.9999983804058307769).abs() < 1e-15);

    ok(
        dir,
        &[
            "sinkhorn", "--matrix", "s.csv", "--tol", "1e-12", "--out", "conv.csv",
        ],
    );
    assert!(dir.join("conv.csv.manifest.json").exists());

    fs::write(dir.join("bad.csv"), "1,2,3\n4,5,6\n").unwrap();
    let o = otter(dir, &["sinkhorn", "--matrix", "bad.csv", "--out", "p.csv"]);
    assert_eq!(o.status.code(), Some(1));
}
