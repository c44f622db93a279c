use std::path::Path;
use std::process::{Command, Output};

use histobof::harness::Report;

fn histobof(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_histobof"))
        .args(args)
        .env_remove("HISTOBOF_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, n: usize) {
    let o = histobof(&[
        "synth",
        "--n",
        &n.to_string(),
        "--size",
        "512",
        "--seed",
        "3",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn help_lists_flags_and_protocol_defaults() {
    let grid = stdout(&histobof(&["grid", "--help"]));
    for needle in [
        "--config",
        "--only",
        "--seed",
        "--repetitions",
        "[default: 32]",
        "[default: 512]",
        "[default: 256]",
        "[default: 0.75]",
        "[default: 0.8]",
    ] {
        assert!(grid.contains(needle), "grid --help lacks {needle}");
    }
    let features = stdout(&histobof(&["features", "--help"]));
    for needle in [
        "--dump-patches",
        "--extractor",
        "[default: 512]",
        "[default: 256]",
        "[default: 0.75]",
    ] {
        assert!(features.contains(needle), "features --help lacks {needle}");
    }
    for cmd in ["synth", "codebook", "report", "losses-check"] {
        let o = histobof(&[cmd, "--help"]);
        assert!(o.status.success());
        assert!(stdout(&o).contains("--"), "{cmd}");
    }
    assert!(stdout(&histobof(&["--help"])).contains("--jobs"));
}

#[test]
fn synth_writes_four_images_per_index_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), 1);
    synth(b.path(), 1);
    let manifest = histobof::manifest::load_manifest(&a.path().join("manifest.csv")).unwrap();
    assert_eq!(manifest.len(), 4);
    for r in &manifest {
        let first = std::fs::read(a.path().join(&r.image_path)).unwrap();
        let second = std::fs::read(b.path().join(&r.image_path)).unwrap();
        assert_eq!(first, second, "{}", r.wsi_id);
    }
}

#[test]
fn features_store_and_patch_dump() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    let store = dir.path().join("store.tsv");
    let dump = dir.path().join("patches");
    let o = histobof(&[
        "features",
        "--manifest",
        dir.path().join("manifest.csv").to_str().unwrap(),
        "--out",
        store.to_str().unwrap(),
        "--n-patches",
        "6",
        "--dump-patches",
        dump.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let store = histobof::features::import_features(&store).unwrap();
    assert_eq!(store.dimension(), 120);
    assert_eq!(store.wsi_count(), 4);
    assert_eq!(store.len(), 24);
    let index = std::fs::read_to_string(dump.join("patches.csv")).unwrap();
    assert_eq!(index.lines().count(), 1 + 24);
    let pngs = std::fs::read_dir(&dump)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 24);
}

#[test]
fn blank_slide_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 1);
    image::RgbImage::from_pixel(512, 512, image::Rgb([255, 255, 255]))
        .save(dir.path().join("images/blank.png"))
        .unwrap();
    let manifest = dir.path().join("manifest.csv");
    let mut text = std::fs::read_to_string(&manifest).unwrap();
    text.push_str("blank_slide_7,images/blank.png,paraffin,papillary\n");
    std::fs::write(&manifest, text).unwrap();
    let o = histobof(&[
        "features",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("s.tsv").to_str().unwrap(),
        "--n-patches",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("blank_slide_7"), "{}", stderr(&o));
}

/// Corpus with paraffin, frozen and a translated copy of the frozen slides,
/// plus a 16-patch store; returns the config file path.
fn grid_fixture(dir: &Path) -> std::path::PathBuf {
    synth(dir, 5);
    let manifest = dir.join("manifest.csv");
    let mut text = std::fs::read_to_string(&manifest).unwrap();
    let extra: String = text
        .lines()
        .filter(|l| l.contains(",frozen,"))
        .map(|l| {
            l.replacen("frozen_", "translated_", 1)
                .replace(",frozen,", ",translated,")
                + "\n"
        })
        .collect();
    text.push_str(&extra);
    std::fs::write(&manifest, text).unwrap();
    let o = histobof(&[
        "features",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.join("store.tsv").to_str().unwrap(),
        "--n-patches",
        "16",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let config = dir.join("run.cfg");
    std::fs::write(
        &config,
        "# test run\nmanifest = manifest.csv\nfeature_store = store.tsv\noutput_dir = out\nn_patches = 16\nrepetitions = 1\nbase_seed = 9\n",
    )
    .unwrap();
    config
}

#[test]
fn grid_full_and_filtered_reports() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_fixture(dir.path());
    let cfg = config.to_str().unwrap();

    let o = histobof(&["grid", "--config", cfg]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = Report::load(&dir.path().join("out/results.json")).unwrap();
    assert_eq!(report.records.len(), 72);
    let resolved = report.run_config.expect("embedded config");
    assert_eq!(resolved["experiment"]["base_seed"], 9);
    assert_eq!(resolved["experiment"]["n_patches"], 16);
    let csv = std::fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 13);

    let only = dir.path().join("only");
    let o = histobof(&[
        "grid",
        "--config",
        cfg,
        "--only",
        "modality=paraffin,k=32,aug=aug1,clf=rbf",
        "--out",
        only.to_str().unwrap(),
        "--seed",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = Report::load(&only.join("results.json")).unwrap();
    assert_eq!(report.records.len(), 1);
    assert_eq!(report.records[0].config.base_seed, 4);

    let o = histobof(&["report", "--results", only.join("results.json").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("paraffin_rbf"));
}

#[test]
fn seed_environment_variable_and_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_fixture(dir.path());
    let out = dir.path().join("env");
    let run = |seed_env: &str, extra: &[&str]| {
        let mut args = vec![
            "grid",
            "--config",
            config.to_str().unwrap(),
            "--only",
            "modality=frozen,k=16,aug=none,clf=linear",
            "--out",
            out.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        Command::new(env!("CARGO_BIN_EXE_histobof"))
            .args(&args)
            .env("HISTOBOF_SEED", seed_env)
            .output()
            .unwrap()
    };
    let o = run("77", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        Report::load(&out.join("results.json")).unwrap().records[0]
            .config
            .base_seed,
        77
    );
    let o = run("77", &["--seed", "5"]);
    assert!(o.status.success());
    assert_eq!(
        Report::load(&out.join("results.json")).unwrap().records[0]
            .config
            .base_seed,
        5
    );
    assert_eq!(run("not-a-seed", &[]).status.code(), Some(2));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = grid_fixture(dir.path());
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    };
    let cases = [
        write(
            "unknown.cfg",
            "manifest = manifest.csv\nfeature_store = store.tsv\nbogus = 1\n",
        ),
        write("missing.cfg", "manifest = nowhere.csv\nfeature_store = store.tsv\n"),
        write(
            "both.cfg",
            "manifest = manifest.csv\nfeature_store = store.tsv\nraw_images = true\n",
        ),
        write(
            "reps.cfg",
            "manifest = manifest.csv\nfeature_store = store.tsv\nrepetitions = 0\n",
        ),
    ];
    for c in &cases {
        let o = histobof(&["grid", "--config", c.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{}: {}", c.display(), stderr(&o));
    }
    let o = histobof(&["grid", "--config", config.to_str().unwrap(), "--only", "k=abc"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(histobof(&["grid", "--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn codebook_command_writes_centroids() {
    let dir = tempfile::tempdir().unwrap();
    grid_fixture(dir.path());
    let out = dir.path().join("codebook.json");
    let o = histobof(&[
        "codebook",
        "--feature-store",
        dir.path().join("store.tsv").to_str().unwrap(),
        "--manifest",
        dir.path().join("manifest.csv").to_str().unwrap(),
        "--modality",
        "paraffin",
        "--k",
        "16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let codebook = histobof::Codebook::from_json(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!((codebook.k, codebook.dimension), (16, 120));
}

#[test]
fn losses_check_passes() {
    let o = histobof(&["losses-check"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("max relative gradient error"));
}
