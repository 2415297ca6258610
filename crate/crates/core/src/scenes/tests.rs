use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::metrics::psnr;
use crate::render::two_pass_render;

fn seeded(cfg: &SceneConfig, seed: u64) -> Dataset {
    SceneConfig { seed, ..cfg.clone() }.dataset().unwrap()
}

fn small_config() -> SceneConfig {
    SceneConfig { height: 16, width: 16, focal: 22.5, n_train: 2, n_val: 1, n_test: 1, ..SceneConfig::default() }
}

#[test]
fn generation_is_deterministic() {
    let cfg = small_config();
    let a = seeded(&cfg, 5);
    let b = seeded(&cfg, 5);
    assert_eq!(a, b);
    let c = seeded(&cfg, 6);
    assert_ne!(a.train[0].camera, c.train[0].camera);
}

#[test]
fn desk_preset_counts_and_foreground() {
    let cfg = SceneConfig::default();
    assert_eq!((cfg.n_train, cfg.n_val, cfg.n_test, cfg.height, cfg.width), (20, 4, 8, 64, 64));
    let data = SceneConfig { n_train: 3, n_val: 1, n_test: 1, ..cfg.clone() }.dataset().unwrap();
    for v in data.train.iter().chain(&data.val).chain(&data.test) {
        assert_eq!((v.image.width(), v.image.height()), (64, 64));
        assert!(foreground_fraction(&v.image, cfg.background.rgb()) >= MIN_FOREGROUND);
    }
}

#[test]
fn config_validation() {
    let ok = SceneConfig::default();
    assert!(ok.validate().is_ok());
    assert!(SceneConfig { near: 6.0, far: 2.0, ..ok.clone() }.validate().is_err());
    assert!(SceneConfig { height: 7, ..ok.clone() }.validate().is_err());
    assert!(SceneConfig { n_val: 0, ..ok.clone() }.validate().is_err());
    assert!(SceneConfig { kind: SceneKind::PosedImages, ..ok.clone() }.validate().is_err());
    let err = toml::from_str::<SceneConfig>("nope = 1").unwrap_err();
    assert!(err.to_string().contains("nope"));
}

#[test]
fn save_load_round_trip() {
    let cfg = small_config();
    let data = seeded(&cfg, 2);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    let back = load_posed_images(dir.path()).unwrap();
    for split in Split::ALL {
        let (a, b) = (data.split(split), back.split(split));
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.camera, y.camera);
            assert_eq!((x.near, x.far), (y.near, y.far));
            for (p, q) in x.image.data().iter().zip(y.image.data()) {
                assert!((p - q).abs() <= 1.0 / 255.0);
            }
        }
    }
}

#[test]
fn empty_directory_has_no_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_posed_images(dir.path()), Err(Error::NoManifest(_))));
}

#[test]
fn missing_image_is_named() {
    let data = seeded(&small_config(), 2);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("val/r_000.ppm")).unwrap();
    match load_posed_images(dir.path()) {
        Err(Error::MissingFile(p)) => assert!(p.ends_with("val/r_000.ppm")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_manifest_reports_line() {
    let data = seeded(&small_config(), 2);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    let path = dir.path().join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[3] = lines[3].replacen(' ', " x", 2);
    std::fs::write(&path, lines.join("\n")).unwrap();
    match load_posed_images(dir.path()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
        other => panic!("{other:?}"),
    }
}

#[test]
fn unlisted_image_is_a_count_mismatch() {
    let data = seeded(&small_config(), 2);
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&data, dir.path()).unwrap();
    data.test[0].image.write_ppm(&dir.path().join("test/extra.ppm")).unwrap();
    assert!(load_posed_images(dir.path()).is_err());
}

#[test]
fn oracle_field_with_96_samples_reaches_35_db() {
    let cfg = SceneConfig::default();
    let scene = cfg.analytic_scene().unwrap();
    let bg = cfg.background.rgb();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..2 {
        let cam = random_camera(&cfg, &mut rng).unwrap();
        let truth = render_image(&cam, cfg.near, cfg.far, |r| scene.oracle_render(r, cfg.n_quad, bg)).unwrap();
        let approx = render_image(&cam, cfg.near, cfg.far, |r| {
            let span = r.span();
            Ok(two_pass_render(32, 64, bg, |t| {
                let (s, c) = scene.oracle_field(r.at(t), bg);
                (s * span, c)
            })?
            .color)
        })
        .unwrap();
        let p = psnr(&truth, &approx).unwrap();
        assert!(p > 35.0, "psnr {p}");
    }
}
