//! Integration tests driving the `starglow` binary end to end at micro
//! scale: per-command contracts, error formatting, and byte-identical
//! reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use starglow_core::config::RunConfig;
use starglow_core::corrupt::CorruptionSpec;
use starglow_core::dataio::{crop, load_png, save_png};
use starglow_core::denoiser::DenoiserConfig;
use starglow_core::schedule::ScheduleConfig;
use starglow_core::trainer::{PhaseConfig, TrainConfig};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_starglow")
}

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(dir)
        .env_remove("STARGLOW_OUT_ROOT")
        .output()
        .expect("spawning starglow")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).to_string()
}

/// Assert failure with the single-line `error: ` contract; returns stderr.
fn fails(out: &Output) -> String {
    assert!(!out.status.success(), "command unexpectedly succeeded");
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    let last = stderr.lines().last().unwrap_or_default();
    assert!(last.starts_with("error: "), "stderr not in error-line format: {stderr}");
    stderr
}

/// A training configuration small enough for sub-second runs.
fn micro_config(seed: u64) -> RunConfig {
    RunConfig {
        schedule: ScheduleConfig { t_max: 6, beta_start: 1e-3, beta_end: 0.3 },
        denoiser: DenoiserConfig::minimal(),
        train: TrainConfig {
            phases: vec![
                PhaseConfig { patch_size: 8, batch_size: 2, epochs: 2 },
                PhaseConfig { patch_size: 16, batch_size: 2, epochs: 2 },
            ],
            lr_start: 1e-4,
            lr_end: 1e-6,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            corruption: CorruptionSpec::preset("paper").unwrap(),
            horizontal_flip: true,
            seed,
        },
    }
}

fn write_micro_config(dir: &Path, seed: u64) -> PathBuf {
    let path = dir.join("micro.json");
    fs::write(&path, micro_config(seed).to_json_pretty()).unwrap();
    path
}

fn gen_dataset(dir: &Path, out: &str, pairs: usize, size: usize, seed: u64) -> PathBuf {
    let out_dir = dir.join(out);
    ok(&run(
        dir,
        &[
            "gen-data",
            "--pairs",
            &pairs.to_string(),
            "--size",
            &size.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
    ));
    out_dir
}

fn train_micro(dir: &Path, data: &Path, out: &str, config: &Path, extra: &[&str]) -> PathBuf {
    let out_dir = dir.join(out);
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
    ];
    args.extend_from_slice(extra);
    ok(&run(dir, &args));
    out_dir
}

#[test]
fn gen_data_writes_dataset_and_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen_dataset(tmp.path(), "a", 3, 24, 7);
    let b = gen_dataset(tmp.path(), "b", 3, 24, 7);

    let manifest = a.join("manifest.jsonl");
    assert!(manifest.is_file());
    assert_eq!(fs::read_dir(a.join("input")).unwrap().count(), 3);
    assert!(a.join("gen-config.json").is_file());

    // Data artifacts are byte-identical even across different directories.
    for rel in ["manifest.jsonl", "input/pair-0000.png", "reference/pair-0002.png"] {
        let left = fs::read(a.join(rel)).unwrap();
        let right = fs::read(b.join(rel)).unwrap();
        assert_eq!(left, right, "{rel} differs between identical runs");
    }

    // The resolved config records the output path, so compare it by
    // re-running the identical command into the same directory.
    let before = fs::read(a.join("gen-config.json")).unwrap();
    gen_dataset(tmp.path(), "a", 3, 24, 7);
    assert_eq!(before, fs::read(a.join("gen-config.json")).unwrap());
}

#[test]
fn gen_data_reports_manifest_path_and_pair_count() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let stdout = ok(&run(
        tmp.path(),
        &["gen-data", "--pairs", "2", "--size", "24", "--seed", "1", "--out", out.to_str().unwrap()],
    ));
    assert!(stdout.contains("wrote 2 pairs"), "{stdout}");
    assert!(stdout.contains("manifest.jsonl"), "{stdout}");
}

#[test]
fn gen_data_rejects_zero_pairs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let stderr =
        fails(&run(tmp.path(), &["gen-data", "--pairs", "0", "--out", out.to_str().unwrap()]));
    assert!(stderr.contains("--pairs"), "{stderr}");
}

#[test]
fn out_root_env_var_only_changes_default_output_location() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("custom-root");
    let out = Command::new(bin())
        .args(["gen-data", "--pairs", "1", "--size", "24", "--seed", "3"])
        .current_dir(tmp.path())
        .env("STARGLOW_OUT_ROOT", &root)
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("dataset").join("manifest.jsonl").is_file());
}

#[test]
fn train_writes_artifacts_and_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_dataset(tmp.path(), "data", 4, 24, 7);
    let config = write_micro_config(tmp.path(), 9);

    let t1 = train_micro(tmp.path(), &data, "t1", &config, &[]);
    for artifact in
        ["run-config.json", "phase-1.ckpt", "phase-2.ckpt", "loss-phase-1.csv", "loss-phase-2.csv"]
    {
        assert!(t1.join(artifact).is_file(), "missing {artifact}");
    }
    let csv = fs::read_to_string(t1.join("loss-phase-1.csv")).unwrap();
    assert!(csv.starts_with("step,phase,lr,loss\n"), "unexpected CSV schema: {csv}");

    let t2 = train_micro(tmp.path(), &data, "t2", &config, &[]);
    for artifact in ["phase-1.ckpt", "phase-2.ckpt", "loss-phase-1.csv", "loss-phase-2.csv"] {
        assert_eq!(
            fs::read(t1.join(artifact)).unwrap(),
            fs::read(t2.join(artifact)).unwrap(),
            "{artifact} differs between identical runs"
        );
    }
}

#[test]
fn train_staged_resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_dataset(tmp.path(), "data", 3, 24, 8);
    let config = write_micro_config(tmp.path(), 5);

    let full = train_micro(tmp.path(), &data, "full", &config, &[]);
    let staged = train_micro(tmp.path(), &data, "staged", &config, &["--max-phases", "1"]);
    assert!(staged.join("phase-1.ckpt").is_file());
    assert!(!staged.join("phase-2.ckpt").exists());

    let stdout = ok(&run(
        tmp.path(),
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            staged.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--resume",
        ],
    ));
    assert!(stdout.contains("resuming after phase 1"), "{stdout}");
    assert_eq!(
        fs::read(full.join("phase-2.ckpt")).unwrap(),
        fs::read(staged.join("phase-2.ckpt")).unwrap(),
        "resumed checkpoint must equal the uninterrupted run's"
    );

    // Resuming a finished run is a no-op, not an error.
    let stdout = ok(&run(
        tmp.path(),
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            staged.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--resume",
        ],
    ));
    assert!(stdout.contains("nothing to do"), "{stdout}");
}

#[test]
fn train_errors_cleanly_on_missing_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_micro_config(tmp.path(), 5);
    let stderr = fails(&run(
        tmp.path(),
        &[
            "train",
            "--data",
            tmp.path().join("nope").to_str().unwrap(),
            "--out",
            tmp.path().join("out").to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
        ],
    ));
    assert!(stderr.contains("nope"), "{stderr}");
}

#[test]
fn train_rejects_resume_with_mismatched_architecture() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_dataset(tmp.path(), "data", 3, 24, 8);
    let config = write_micro_config(tmp.path(), 5);
    let out = train_micro(tmp.path(), &data, "run", &config, &["--max-phases", "1"]);

    let mut other = micro_config(5);
    other.denoiser.base_channels = 4;
    let other_path = tmp.path().join("other.json");
    fs::write(&other_path, other.to_json_pretty()).unwrap();

    let stderr = fails(&run(
        tmp.path(),
        &[
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--config",
            other_path.to_str().unwrap(),
            "--resume",
        ],
    ));
    assert!(stderr.contains("different network configuration"), "{stderr}");
}

/// Shared fixture for the sampling tests: a micro checkpoint plus a dataset.
fn trained_fixture(tmp: &Path) -> (PathBuf, PathBuf) {
    let data = gen_dataset(tmp, "data", 3, 24, 8);
    let config = write_micro_config(tmp, 5);
    let ckpt_dir = train_micro(tmp, &data, "train", &config, &[]);
    (data, ckpt_dir)
}

#[test]
fn enhance_preserves_dimensions_and_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt_dir) = trained_fixture(tmp.path());

    // An input whose sides are not multiples of 8 exercises pad + crop, and
    // a 24x24 input exercises sampling above the largest training patch.
    let odd_dir = tmp.path().join("odd");
    fs::create_dir_all(&odd_dir).unwrap();
    let src = load_png(&data.join("input/pair-0000.png")).unwrap();
    save_png(&odd_dir.join("odd.png"), &crop(&src, 0, 0, 20, 12)).unwrap();
    fs::write(odd_dir.join("notes.txt"), "not an image").unwrap();

    let run_enhance = |out: &str| -> PathBuf {
        let out_dir = tmp.path().join(out);
        let output = run(
            tmp.path(),
            &[
                "enhance",
                "--checkpoint",
                ckpt_dir.to_str().unwrap(),
                "--input",
                odd_dir.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--seed",
                "3",
            ],
        );
        ok(&output);
        let stderr = String::from_utf8_lossy(&output.stderr).to_string();
        assert!(stderr.contains("warning: skipping non-PNG"), "{stderr}");
        assert!(stderr.contains("notes.txt"), "{stderr}");
        out_dir
    };

    let e1 = run_enhance("e1");
    let enhanced = load_png(&e1.join("odd.png")).unwrap();
    assert_eq!(enhanced.shape(), (20, 12, 3), "output must keep input dimensions");
    assert!(e1.join("enhance-config.json").is_file());

    let e2 = run_enhance("e2");
    assert_eq!(
        fs::read(e1.join("odd.png")).unwrap(),
        fs::read(e2.join("odd.png")).unwrap(),
        "same seed must give identical bytes"
    );
}

#[test]
fn enhance_accepts_inputs_larger_than_training_patches() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, ckpt_dir) = trained_fixture(tmp.path());
    let out_dir = tmp.path().join("single");
    ok(&run(
        tmp.path(),
        &[
            "enhance",
            "--checkpoint",
            ckpt_dir.join("phase-2.ckpt").to_str().unwrap(),
            "--input",
            data.join("input/pair-0001.png").to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ],
    ));
    let enhanced = load_png(&out_dir.join("pair-0001.png")).unwrap();
    assert_eq!(enhanced.shape(), (24, 24, 3));
}

#[test]
fn enhance_rejects_non_png_file_input() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, ckpt_dir) = trained_fixture(tmp.path());
    let text = tmp.path().join("input.txt");
    fs::write(&text, "hello").unwrap();
    let stderr = fails(&run(
        tmp.path(),
        &[
            "enhance",
            "--checkpoint",
            ckpt_dir.to_str().unwrap(),
            "--input",
            text.to_str().unwrap(),
            "--out",
            tmp.path().join("x").to_str().unwrap(),
        ],
    ));
    assert!(stderr.contains("not a PNG"), "{stderr}");
}

#[test]
fn eval_of_references_against_themselves_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_dataset(tmp.path(), "data", 3, 24, 4);
    let refs = data.join("reference");
    let out = tmp.path().join("eval");
    let stdout = ok(&run(
        tmp.path(),
        &[
            "eval",
            "--enhanced",
            refs.to_str().unwrap(),
            "--reference",
            refs.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    assert!(stdout.contains("mean"), "{stdout}");

    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("pair_id,psnr_db,ssim\n"), "schema changed: {csv}");
    let mean_line = csv.lines().last().unwrap();
    let fields: Vec<&str> = mean_line.split(',').collect();
    assert_eq!(fields[0], "mean");
    let mean_psnr: f64 = fields[1].parse().unwrap();
    let mean_ssim: f64 = fields[2].parse().unwrap();
    assert_eq!(mean_psnr, 100.0, "identical images must hit the PSNR report cap");
    assert!((mean_ssim - 1.0).abs() < 1e-12);
}

#[test]
fn eval_manifest_mode_scores_inputs_against_references() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_dataset(tmp.path(), "data", 2, 24, 4);
    let out = tmp.path().join("eval");
    ok(&run(
        tmp.path(),
        &[
            "eval",
            "--manifest",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ],
    ));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mean_line = csv.lines().last().unwrap();
    let mean_psnr: f64 = mean_line.split(',').nth(1).unwrap().parse().unwrap();
    assert!(mean_psnr.is_finite() && mean_psnr < 100.0, "baseline PSNR implausible: {mean_psnr}");
}

#[test]
fn eval_requires_a_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let stderr = fails(&run(tmp.path(), &["eval"]));
    assert!(stderr.contains("--enhanced") || stderr.contains("--ablation"), "{stderr}");
}

#[test]
fn ablation_trains_and_reports_all_four_arms() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen_dataset(tmp.path(), "data", 3, 24, 8);
    let held = gen_dataset(tmp.path(), "held", 1, 24, 21);
    let config = write_micro_config(tmp.path(), 5);
    let out = tmp.path().join("abl");
    let stdout = ok(&run(
        tmp.path(),
        &[
            "eval",
            "--ablation",
            "--data",
            data.to_str().unwrap(),
            "--eval-data",
            held.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--max-phases",
            "1",
            "--out",
            out.to_str().unwrap(),
        ],
    ));

    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "corruption,mean_psnr_db,mean_ssim");
    let arms: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(arms, ["none", "paper-noise", "paper-blur", "paper-cutout"]);
    for arm in &arms {
        assert!(out.join(format!("arm-{arm}")).join("phase-1.ckpt").is_file());
        assert!(out.join(format!("arm-{arm}")).join("metrics.csv").is_file());
        assert!(stdout.contains(arm), "table row for {arm} missing:\n{stdout}");
    }
}
