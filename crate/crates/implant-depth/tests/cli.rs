use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use implant_depth::volume_io::read_patient;

const SMALL: &str = r#"
[data]
count = 3

[idpnet.train]
epochs = 1
lr_drop_epochs = []

[idpnet.model]
widths_3d = [2, 2]
widths_2d = [2, 2]
decoder_widths = [2, 2, 2]
head_hidden = 2
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_implant-depth")).current_dir(dir).env("RUST_LOG", "warn").args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn errors_carry_a_category_and_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("typo.toml"), "[idpnet.train]\nepoch = 3\n").unwrap();
    fs::write(d.join("bad.toml"), "[data]\ntrain_fraction = 2.0\n").unwrap();

    let o = run(d, &["--config", "typo.toml", "show-config"]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).starts_with("error[format]: ") && stderr(&o).contains("idpnet.train.epoch"), "{}", stderr(&o));

    let o = run(d, &["--config", "bad.toml", "show-config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[config]: "));

    let o = run(d, &["--config", "missing.toml", "show-config"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[io]: "));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn show_config_prints_a_loadable_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["--seed", "9", "show-config"]);
    assert!(o.status.success());
    fs::write(dir.path().join("shown.toml"), &o.stdout).unwrap();
    let again = run(dir.path(), &["--config", "shown.toml", "show-config"]);
    assert_eq!(again.stdout, o.stdout);
    assert!(String::from_utf8_lossy(&o.stdout).contains("split_seed = 9"));
}

#[test]
fn generate_train_and_predict_with_the_annotated_position() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("small.toml"), SMALL).unwrap();

    let o = run(d, &["--config", "small.toml", "--out", "data", "generate-data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(d, &["--config", "small.toml", "--out", "idp", "train-idpnet", "--data", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["train.jsonl", "training_curve.svg", "config.toml", "final/state.toml"] {
        assert!(d.join("idp").join(f).is_file(), "{f}");
    }

    let patient = d.join("data/phantom-00001");
    let o = run(d, &["--out", "pred", "predict", "--patient", patient.to_str().unwrap(), "--idpnet", "idp/final", "--oracle-position"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let p: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("pred/prediction.json")).unwrap()).unwrap();
    let rec = read_patient(&patient).unwrap();
    assert_eq!(p["oracle_position"], true);
    assert_eq!(p["id"], rec.id.as_str());
    let (row, col) = (p["position"][0].as_f64().unwrap(), p["position"][1].as_f64().unwrap());
    assert_eq!((row, col), rec.annotation.axial_position);
    // The interval is reported in whole-volume slices and lies inside the volume.
    let (s, e) = (p["interval"]["start"].as_f64().unwrap(), p["interval"]["end"].as_f64().unwrap());
    assert!(0.0 <= s && s <= e && e <= rec.volume.depth() as f64, "{s}..{e}");
    for f in ["crown.png", "depth.png"] {
        assert!(d.join("pred").join(f).is_file());
    }

    let o = run(d, &["--config", "small.toml", "--out", "ev", "eval", "--data", "data", "--idpnet", "idp/final", "--oracle-position", "--all"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("ev/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["patients"], 3);

    let o = run(d, &["--out", "pred", "predict", "--patient", "data/nobody", "--idpnet", "idp/final", "--oracle-position"]);
    assert_eq!(o.status.code(), Some(3));

    // A detector checkpoint where a depth network is expected.
    let o = run(d, &["--out", "pred", "predict", "--patient", "data/phantom-00001", "--idpnet", "idp/final", "--ird", "idp/final"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}
