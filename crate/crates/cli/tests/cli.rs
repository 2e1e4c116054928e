use std::path::Path;
use std::process::{Command, Output};

use maae_core::config::RunConfig;

fn maae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maae"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("spawn maae")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const TINY: &str = "\
# two small classes, one epoch
data.num_classes = 2
data.train_per_class = 4
data.test_normal_per_class = 2
data.test_anomalous_per_class = 2
batch_size = 4
epochs = 1
run.dir = run
";

#[test]
fn unknown_config_key_exits_1_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), "epochs = 3\nmodel.depth = 7\n").unwrap();
    let o = maae(dir.path(), &["config", "--config", "c.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.depth"), "{}", stderr(&o));
}

#[test]
fn unknown_override_and_bad_value_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = maae(dir.path(), &["config", "--set", "nope=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope"));
    let o = maae(dir.path(), &["config", "--set", "epochs=many"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epochs"));
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(maae(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(maae(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(maae(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = maae(dir.path(), &["eval", "--set", "data.path=missing"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn presets_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (file, blocks) in [("paper.cfg", "18"), ("desk.cfg", "4")] {
        let path = root.join(file);
        let o = maae(&root, &["config", "--config", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{file}: {}", stderr(&o));
        assert!(stdout(&o).contains(&format!("model.num_blocks = {blocks}")));
    }
    let mut paper = RunConfig::from_file(&root.join("paper.cfg")).unwrap();
    assert_eq!(paper.data_path.take(), Some("mvtec_anomaly_detection".into()));
    paper.run_dir = RunConfig::paper().run_dir;
    assert_eq!(paper, RunConfig::paper());
    assert_eq!(RunConfig::from_file(&root.join("desk.cfg")).unwrap(), RunConfig::desk());
}

#[test]
fn synth_train_eval_heatmap_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), TINY).unwrap();
    let run = |args: &[&str]| {
        let o = maae(dir.path(), args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        stdout(&o)
    };
    run(&["synth", "--config", "c.cfg"]);
    assert!(dir.path().join("run/data/manifest.tsv").is_file());
    run(&["train", "--config", "c.cfg"]);
    let ckpt = dir.path().join("run/checkpoints/unified");
    assert!(ckpt.join("epoch_001.maac").is_file());
    let log = std::fs::read_to_string(ckpt.join("loss.csv")).unwrap();
    assert!(log.starts_with("step,L_e,L_ANG,norm_W\n"));
    assert_eq!(log.lines().count(), 3);

    let report = run(&["eval", "--config", "c.cfg"]);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "class\timage_auroc\tpixel_auroc");
    assert!(lines[1].starts_with("class_0\t") && lines[2].starts_with("class_1\t"));
    assert!(lines[3].starts_with("average\t"));

    run(&["heatmap", "--config", "c.cfg"]);
    let maps: Vec<_> = std::fs::read_dir(dir.path().join("run/heatmaps")).unwrap().collect();
    assert_eq!(maps.len(), 8);
    let first = std::fs::read(maps[0].as_ref().unwrap().path()).unwrap();
    assert!(first.starts_with(b"P5\n64 64\n255\n"));
    assert_eq!(first.len(), "P5\n64 64\n255\n".len() + 64 * 64);
}

#[test]
fn extracted_features_train_to_the_same_model() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), TINY).unwrap();
    let run = |args: &[&str]| {
        let o = maae(dir.path(), args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    };
    run(&["synth", "--config", "c.cfg"]);
    run(&["extract", "--config", "c.cfg"]);
    assert!(dir.path().join("run/features/manifest.tsv").is_file());
    run(&["train", "--config", "c.cfg"]);
    run(&[
        "train",
        "--config",
        "c.cfg",
        "--set",
        "data.path=run/features/manifest.tsv",
        "--set",
        "run.dir=feat",
    ]);
    let a = std::fs::read(dir.path().join("run/checkpoints/unified/epoch_001.maac")).unwrap();
    let b = std::fs::read(dir.path().join("feat/checkpoints/unified/epoch_001.maac")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn ablate_prints_the_six_grid_rows() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.cfg"), TINY).unwrap();
    assert_eq!(maae(dir.path(), &["synth", "--config", "c.cfg"]).status.code(), Some(0));
    let o = maae(dir.path(), &["ablate", "--config", "c.cfg"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let flags: Vec<String> = out
        .lines()
        .skip(1)
        .map(|l| l.split('\t').take(3).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(
        flags,
        [
            "false,false,false",
            "false,false,true",
            "true,false,false",
            "true,true,false",
            "true,false,true",
            "true,true,true"
        ]
    );
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = maae(dir.path(), &["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().skip(1).all(|l| l.ends_with("\tpass")));
    assert!(out.contains("composite wrt W"));
}
