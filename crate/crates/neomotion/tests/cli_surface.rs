//! Exercises the compiled binary: argument handling, exit codes, config
//! validation, and the cheap stages' on-disk artifacts. Training-heavy paths
//! are covered by the acceptance suite.

use std::path::Path;
use std::process::{Command, Output};

use neomotion::cyclegan::{build_generator, GeneratorSpec};
use neomotion::phantom::{write_manifest, CohortEntry, Split};
use neomotion::volumeio::{self, Volume};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_neomotion"));
    c.env_remove("NEOMOTION_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary spawns")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Tiny but valid config: 3 phantoms, 2 slices each.
fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.cfg");
    std::fs::write(
        &path,
        "phantom.nx=32\nphantom.ny=32\nphantom.nz=2\n\
         cohort.train_clean=1\ncohort.train_motion=1\ncohort.test=1\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&[])), 2);
    assert_eq!(code(&run(&["no-such-command"])), 2);
    assert_eq!(code(&run(&["phantom"])), 2); // --config is required
}

#[test]
fn help_and_version_exit_0() {
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["phantom", "corrupt", "train-cyclegan", "train-segnet", "correct", "add-motion", "segment", "evaluate", "experiment"] {
        assert!(text.contains(sub), "help lists {sub}");
    }
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn missing_config_file_exits_3() {
    let out = run(&["phantom", "--config", "/nonexistent/x.cfg", "--out", "/tmp/unused"]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("missing input"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p.to_str().unwrap().to_string()
    };

    let unknown = write("unknown.cfg", "cyclegan.lamda=10\n");
    let out = run(&["phantom", "--config", &unknown, "--out", "/tmp/unused"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("cyclegan.lamda"));

    let badval = write("badval.cfg", "segnet.epochs=many\n");
    assert_eq!(code(&run(&["phantom", "--config", &badval, "--out", "/tmp/unused"])), 2);

    // No out= in the file and no --out flag.
    let noout = write("noout.cfg", "seed=1\n");
    assert_eq!(code(&run(&["phantom", "--config", &noout])), 2);

    let ok = write("ok.cfg", "");
    let out = bin()
        .args(["phantom", "--config", &ok, "--out", dir.path().join("o").to_str().unwrap()])
        .env("NEOMOTION_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "bad NEOMOTION_THREADS is a config error");
}

#[test]
fn missing_upstream_artifacts_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("tree");

    // No cohort yet: every downstream stage wants the manifest.
    for stage in ["corrupt", "train-cyclegan", "train-segnet", "correct", "add-motion", "segment", "evaluate"] {
        let out = run(&[stage, "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert_eq!(code(&out), 3, "{stage} without a cohort");
        assert!(stderr(&out).contains("manifest.txt"), "{stage} names the missing file");
    }
}

#[test]
fn phantom_and_corrupt_stages_populate_the_tree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let tree = dir.path().join("tree");
    let tree_s = tree.to_str().unwrap();

    assert_eq!(code(&run(&["phantom", "--config", &cfg, "--out", tree_s])), 0);
    let manifest = tree.join("cohort/manifest.txt");
    let text = std::fs::read_to_string(&manifest).unwrap();
    assert!(text.starts_with("# config="), "manifest carries provenance");
    assert_eq!(text.lines().filter(|l| !l.starts_with('#')).count(), 3);

    assert_eq!(code(&run(&["corrupt", "--config", &cfg, "--out", tree_s])), 0);
    let corrupted = tree.join("corrupted/test/phantom_002_image.nbv");
    let v = volumeio::load_volume(&corrupted).unwrap();
    assert_eq!(v.dims(), (32, 32, 2));
    assert!(v.data().iter().all(|t| (0.0..=1.0).contains(t)), "corrupted volumes are clamped");

    // Re-running either stage reproduces identical bytes.
    let before = std::fs::read(&corrupted).unwrap();
    assert_eq!(code(&run(&["corrupt", "--config", &cfg, "--out", tree_s])), 0);
    assert_eq!(std::fs::read(&corrupted).unwrap(), before);

    // The seed flag overrides the config and changes the phantoms.
    let m_before = std::fs::read(&manifest).unwrap();
    assert_eq!(code(&run(&["phantom", "--config", &cfg, "--out", tree_s, "--seed", "99"])), 0);
    assert_ne!(std::fs::read(&manifest).unwrap(), m_before);
}

#[test]
fn shape_errors_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let tree = dir.path().join("tree");

    // Hand-built tree: a manifest naming one test volume whose in-plane dims
    // the generator cannot process (18 is not divisible by 4).
    std::fs::create_dir_all(tree.join("cohort")).unwrap();
    std::fs::create_dir_all(tree.join("corrupted/test")).unwrap();
    std::fs::create_dir_all(tree.join("models")).unwrap();
    let entry = CohortEntry {
        split: Split::Test,
        seed: 0,
        volume_path: "t.nbv".into(),
        labels_path: "t_labels.nbv".into(),
    };
    write_manifest(&[entry], &tree.join("cohort/manifest.txt"), "# test tree").unwrap();
    let odd = Volume::new((18, 18, 2), (1.0, 1.0, 1.0), vec![0.5; 18 * 18 * 2]).unwrap();
    volumeio::save_volume(&odd, tree.join("corrupted/test/t.nbv")).unwrap();
    build_generator(&GeneratorSpec::desk(), 7).save(&tree.join("models/mc.nbc")).unwrap();

    let out = run(&["correct", "--config", &cfg, "--out", tree.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("divisible"));
}
