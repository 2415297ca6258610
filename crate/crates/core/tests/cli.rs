use std::fs;
use std::path::{Path, PathBuf};

use nerf_id::cli::{self, RunManifest, EXIT_NUMERICAL, EXIT_OK, EXIT_USER};
use nerf_id::scenes::{save_dataset, SceneKind};
use nerf_id::trainer::RunConfig;

fn nerf_id(args: &[&str]) -> i32 {
    cli::run(std::iter::once("nerf-id").chain(args.iter().copied()))
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn train_micro(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("run");
    let mut args = vec!["train", "--preset", "micro", "--out", s(&out)];
    args.extend_from_slice(extra);
    assert_eq!(nerf_id(&args), EXIT_OK);
    out
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

#[test]
fn train_writes_manifest_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_micro(dir.path(), &["--seed", "3"]);
    let manifest: RunManifest = toml::from_str(&fs::read_to_string(out.join("run.toml")).unwrap()).unwrap();
    assert_eq!(manifest.command, "train");
    assert_eq!(manifest.seed, 3);
    assert!(manifest.finished.is_some());
    assert!(manifest.version.starts_with(env!("CARGO_PKG_VERSION")));
    assert_eq!(manifest.config.train.seed, 3);
    for p in &manifest.outputs {
        assert!(p.is_file(), "{}", p.display());
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(nerf_id::trainer::METRICS_HEADER));
    let rows: Vec<&str> = lines.collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.split(',').count() == 8));
    assert!(rows.last().unwrap().split(',').nth(7).is_some_and(|v| !v.is_empty()), "final row carries a validation PSNR");
    let manifests = fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name() == "run.toml").count();
    assert_eq!(manifests, 1);
}

#[test]
fn existing_output_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_micro(dir.path(), &[]);
    assert_eq!(nerf_id(&["train", "--preset", "micro", "--out", s(&out)]), EXIT_USER);
    assert_eq!(nerf_id(&["train", "--preset", "micro", "--out", s(&out), "--force"]), EXIT_OK);

    let foreign = dir.path().join("foreign");
    fs::create_dir(&foreign).unwrap();
    fs::write(foreign.join("keep.txt"), "x").unwrap();
    assert_eq!(nerf_id(&["train", "--preset", "micro", "--out", s(&foreign), "--force"]), EXIT_USER);
    assert!(foreign.join("keep.txt").exists());
}

#[test]
fn user_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(nerf_id(&["train", "--preset", "micro", "--bogus", "--out", s(&out)]), EXIT_USER);
    assert_eq!(nerf_id(&["frobnicate"]), EXIT_USER);
    assert_eq!(nerf_id(&["train", "--preset", "nope", "--out", s(&out)]), EXIT_USER);
    assert_eq!(nerf_id(&["train", "--preset", "micro", "--proposer", "nope", "--out", s(&out)]), EXIT_USER);
    let missing = dir.path().join("missing.ckpt");
    assert_eq!(nerf_id(&["render", "--checkpoint", s(&missing), "--out", s(&out)]), EXIT_USER);
    assert_eq!(nerf_id(&["--help"]), EXIT_OK);
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    let out = dir.path().join("x");
    assert_eq!(nerf_id(&["train", "--config", s(&cfg), "--out", s(&out)]), EXIT_USER);
    let args = <cli::Cli as clap::Parser>::try_parse_from(["nerf-id", "train", "--config", s(&cfg), "--out", s(&out)]).unwrap();
    let cli::Command::Train(train) = args.command else { unreachable!() };
    let err = cli::resolve_config(&train).unwrap_err().to_string();
    assert!(err.contains("learning_rate"), "{err}");
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::micro();
    cfg.train.lr_peak = 1e30;
    cfg.train.warmup_steps = 1;
    let path = dir.path().join("run.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    let out = dir.path().join("x");
    assert_eq!(nerf_id(&["train", "--config", s(&path), "--out", s(&out)]), EXIT_NUMERICAL);
}

#[test]
fn render_reports_kept_fractions_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_micro(dir.path(), &[]);
    let ckpt = run.join("model.ckpt");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(nerf_id(&["render", "--checkpoint", s(&ckpt), "--out", s(&a)]), EXIT_OK);
    assert_eq!(nerf_id(&["render", "--checkpoint", s(&ckpt), "--out", s(&b)]), EXIT_OK);
    assert_eq!(nerf_id(&["render", "--checkpoint", s(&ckpt), "--out", s(&c), "--threshold", "1.0"]), EXIT_OK);
    let img = "test/r_000.ppm";
    assert_eq!(fs::read(a.join(img)).unwrap(), fs::read(b.join(img)).unwrap());
    let full = read_csv(&a.join("render.csv"));
    assert_eq!(full[0][1].parse::<f64>().unwrap(), 1.0);
    let cfg = RunConfig::micro();
    let per_ray = 1.0 / (cfg.model.n_coarse + cfg.model.n_fine) as f64;
    let pruned = read_csv(&c.join("render.csv"));
    assert!((pruned[0][1].parse::<f64>().unwrap() - per_ray).abs() < 1e-6);
    assert!(c.join(img).is_file() && c.join("run.toml").is_file());
}

#[test]
fn eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_micro(dir.path(), &[]);
    let ckpt = run.join("model.ckpt");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(nerf_id(&["eval", "--checkpoint", s(&ckpt), "--split", "val", "--out", s(&a)]), EXIT_OK);
    assert_eq!(nerf_id(&["eval", "--checkpoint", s(&ckpt), "--split", "val", "--out", s(&b)]), EXIT_OK);
    let text = fs::read_to_string(a.join("eval.csv")).unwrap();
    assert_eq!(text, fs::read_to_string(b.join("eval.csv")).unwrap());
    assert!(text.starts_with("image,psnr,ssim\n"));
    assert!(text.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn sixty_four_bit_runs_reproduce_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(nerf_id(&["train", "--preset", "micro", "--precision", "f64", "--out", s(out)]), EXIT_OK);
    }
    for f in ["metrics.csv", "model.ckpt", "state.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (ea, eb) = (dir.path().join("ea"), dir.path().join("eb"));
    assert_eq!(nerf_id(&["eval", "--checkpoint", s(&a.join("model.ckpt")), "--out", s(&ea)]), EXIT_OK);
    assert_eq!(nerf_id(&["eval", "--checkpoint", s(&b.join("model.ckpt")), "--out", s(&eb)]), EXIT_OK);
    assert_eq!(fs::read(ea.join("eval.csv")).unwrap(), fs::read(eb.join("eval.csv")).unwrap());
}

#[test]
fn sweep_rows_start_unpruned_and_shrink() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_micro(dir.path(), &[]);
    let out = dir.path().join("sweep");
    let ckpt = run.join("model.ckpt");
    assert_eq!(
        nerf_id(&["sweep", "--checkpoint", s(&ckpt), "--thresholds", "0,0.2,0.5,0.8,1", "--out", s(&out)]),
        EXIT_OK
    );
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(text.starts_with("threshold,kept_fraction,relative_time,psnr,ssim"));
    let rows = read_csv(&out.join("sweep.csv"));
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][1].parse::<f64>().unwrap(), 1.0);
    assert_eq!(rows[0][2].parse::<f64>().unwrap(), 1.0);
    let kept: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(kept.windows(2).all(|w| w[1] <= w[0]), "{kept:?}");
    let svg = fs::read_to_string(out.join("sweep.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
}

#[test]
fn sweep_without_importance_head_is_a_user_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_micro(dir.path(), &["--proposer", "heuristic"]);
    let out = dir.path().join("sweep");
    assert_eq!(nerf_id(&["sweep", "--checkpoint", s(&run.join("model.ckpt")), "--out", s(&out)]), EXIT_USER);
}

#[test]
fn posed_image_runs_and_empty_splits() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = RunConfig::micro().scene.dataset().unwrap();
    data.test.clear();
    let data_dir = dir.path().join("data");
    save_dataset(&data, &data_dir).unwrap();
    let mut cfg = RunConfig::micro();
    cfg.scene.kind = SceneKind::PosedImages;
    cfg.scene.data_dir = Some(data_dir);
    let path = dir.path().join("posed.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    let out = dir.path().join("run");
    assert_eq!(nerf_id(&["train", "--config", s(&path), "--steps", "10", "--out", s(&out)]), EXIT_OK);
    let ckpt = out.join("model.ckpt");
    assert_eq!(nerf_id(&["eval", "--checkpoint", s(&ckpt), "--split", "val"]), EXIT_OK);
    assert_eq!(nerf_id(&["eval", "--checkpoint", s(&ckpt), "--split", "test"]), EXIT_USER);
}

#[test]
fn overfit_single_view_exceeds_thirty_db_on_train() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/overfit.toml");
    let out = dir.path().join("run");
    assert_eq!(nerf_id(&["train", "--config", s(&cfg), "--out", s(&out)]), EXIT_OK);
    let eval = dir.path().join("eval");
    let ckpt = out.join("model.ckpt");
    assert_eq!(nerf_id(&["eval", "--checkpoint", s(&ckpt), "--split", "train", "--out", s(&eval)]), EXIT_OK);
    let rows = read_csv(&eval.join("eval.csv"));
    let mean: f64 = rows.last().unwrap()[1].parse().unwrap();
    assert!(mean > 30.0, "train psnr {mean}");
}
