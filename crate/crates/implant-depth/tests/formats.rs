use std::fs;
use std::path::Path;

use implant_depth::checkpoint::Checkpoint;
use implant_depth::config::ExperimentConfig;
use implant_depth::container::{read_arrays, write_arrays};
use implant_depth::core::phantom::{generate_phantom, PhantomConfig};
use implant_depth::core::Tensor;
use implant_depth::volume_io::{read_dataset, read_patient, write_patient, META_FILE, VOLUME_FILE};
use implant_depth::HarnessError;
use proptest::prelude::*;

fn replace_line(path: &Path, key: &str, with: Option<&str>) {
    let text = fs::read_to_string(path).unwrap();
    let out: Vec<String> = text
        .lines()
        .filter_map(|l| if l.starts_with(&format!("{key}=")) { with.map(str::to_string) } else { Some(l.to_string()) })
        .collect();
    fs::write(path, out.join("\n")).unwrap();
}

#[test]
fn volume_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for seed in [0, 7] {
        let rec = generate_phantom(&PhantomConfig::desk(), seed).unwrap();
        let p = dir.path().join(&rec.id);
        write_patient(&p, &rec).unwrap();
        let back = read_patient(&p).unwrap();
        assert_eq!(back, rec);
        assert!(back.volume.voxels().iter().zip(rec.volume.voxels()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
    let all = read_dataset(dir.path()).unwrap();
    assert_eq!(all.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["phantom-00000", "phantom-00007"]);
}

#[test]
fn broken_metadata_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let rec = generate_phantom(&PhantomConfig::desk(), 1).unwrap();
    write_patient(dir.path(), &rec).unwrap();
    let meta = dir.path().join(META_FILE);

    replace_line(&meta, "start", None);
    match read_patient(dir.path()) {
        Err(HarnessError::Field { field, .. }) => assert_eq!(field, "start"),
        other => panic!("{other:?}"),
    }
    replace_line(&meta, "end", Some("start=abc"));
    match read_patient(dir.path()) {
        Err(HarnessError::Field { field, message, .. }) => assert!(field == "start" && message.contains("abc")),
        other => panic!("{other:?}"),
    }
    replace_line(&meta, "version", Some("version=9"));
    assert!(matches!(read_patient(dir.path()), Err(HarnessError::Version { found: 9, .. })));
}

#[test]
fn truncated_volume_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    write_patient(dir.path(), &generate_phantom(&PhantomConfig::desk(), 2).unwrap()).unwrap();
    let raw = dir.path().join(VOLUME_FILE);
    let bytes = fs::read(&raw).unwrap();
    fs::write(&raw, &bytes[..bytes.len() - 4]).unwrap();
    let e = read_patient(dir.path()).unwrap_err();
    assert_eq!((e.category(), e.exit_code()), ("format", 4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn arrays_round_trip(shapes in proptest::collection::vec(proptest::collection::vec(1usize..5, 0..4), 1..5), seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let arrays: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let n: usize = s.iter().product();
                let data = (0..n).map(|j| f64::from_bits(seed.wrapping_add((i * 97 + j) as u64) | 0x3ff0_0000_0000_0000) - 1.5).collect();
                (format!("layer{i}.weight"), Tensor::new(s, data).unwrap())
            })
            .collect();
        write_arrays(dir.path(), "w", &arrays).unwrap();
        let back = read_arrays(dir.path(), "w").unwrap();
        prop_assert_eq!(back.len(), arrays.len());
        for ((n1, t1), (n2, t2)) in arrays.iter().zip(&back) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            prop_assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn corrupt_arrays_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let arrays = vec![("a".to_string(), Tensor::new(&[2, 3], vec![1.0; 6]).unwrap())];
    write_arrays(dir.path(), "w", &arrays).unwrap();
    let bin = dir.path().join("w.bin");
    let bytes = fs::read(&bin).unwrap();
    fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert_eq!(read_arrays(dir.path(), "w").unwrap_err().category(), "format");

    write_arrays(dir.path(), "w", &arrays).unwrap();
    let man = dir.path().join("w.manifest");
    let text = fs::read_to_string(&man).unwrap().replacen("arrays-version=1", "arrays-version=2", 1);
    fs::write(&man, text).unwrap();
    assert_eq!(read_arrays(dir.path(), "w").unwrap_err().category(), "version");
}

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let cfg = ExperimentConfig::default().with_seed(17);
    let back = ExperimentConfig::from_toml_str(&cfg.to_toml(), Path::new("cfg.toml")).unwrap();
    assert_eq!(back, cfg);

    let partial = ExperimentConfig::from_toml_str("[idpnet.train]\nepochs = 3\nlr_drop_epochs = [2]\n", Path::new("p.toml")).unwrap();
    assert_eq!((partial.idpnet.train.epochs, partial.idpnet.train.lr_drop_epochs.clone()), (3, vec![2]));
    assert_eq!(partial.ird, ExperimentConfig::default().ird);

    let e = ExperimentConfig::from_toml_str("[idpnet.train]\nepoch = 3\n", Path::new("typo.toml")).unwrap_err();
    assert!(e.to_string().contains("idpnet.train.epoch"), "{e}");
    assert_eq!(e.category(), "format");

    let e = ExperimentConfig::from_toml_str("[data]\ntrain_fraction = 1.5\n", Path::new("bad.toml")).unwrap_err();
    assert_eq!((e.category(), e.exit_code()), ("config", 2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let e = Checkpoint::load(&dir.path().join("nothing")).unwrap_err();
    assert_eq!((e.category(), e.exit_code()), ("io", 3));
}
