use std::collections::BTreeMap;

use nofrost::objectives::MethodKind;
use nofrost_harness::config::{apply_override, DatasetKind};
use nofrost_harness::datasets::{load_dataset, subset, DATA_DIR_ENV};
use nofrost_harness::{ExperimentConfig, HarnessError};

#[test]
fn toml_round_trip_keeps_identity() {
    let mut c = ExperimentConfig::synthetic("rt", MethodKind::Trades);
    c.eval.corruptions = vec![toml::from_str("kind = \"contrast\"\nseverity = 2").unwrap()];
    let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
    assert_eq!(back, c);
    assert_eq!(back.config_hash(), c.config_hash());
    let mut moved = c.clone();
    moved.output_dir = "elsewhere".into();
    assert_eq!(moved.config_hash(), c.config_hash());
    let mut changed = c.clone();
    changed.train.lr0 = 0.01;
    assert_ne!(changed.config_hash(), c.config_hash());
}

#[test]
fn minimal_file_and_overrides() {
    let text = "name = \"m\"\ndataset = \"synthetic_moons_images\"\noutput_dir = \"runs\"\n";
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, text).unwrap();
    let c = ExperimentConfig::load(&p, &["train.method=nofrost".into(), "model.norm=nf".into(), "seed=4".into()]).unwrap();
    assert_eq!(c.train.method, MethodKind::Nofrost);
    assert_eq!(c.seed, 4);
    assert_eq!(c.train_config().unwrap().seed, 4);
}

#[test]
fn invalid_configs_are_config_errors() {
    let base = ExperimentConfig::synthetic("ok", MethodKind::Sat);
    for bad in [
        "name=../x",
        "train.method=bogus",
        "model.norm=mbn",
        "subset_fraction=0",
        "train.lr0=-1",
        "train.unknown_field=1",
        "train.attack.eps=-3",
    ] {
        let err = base.with_overrides(&[bad.to_string()]).unwrap_err();
        assert!(err.is_config(), "{bad}: {err}");
    }
    // NoFrost with BN is rejected, SAT with NF is allowed.
    assert!(base.with_overrides(&["train.method=nofrost".into(), "model.norm=bn".into()]).is_err());
    assert!(base.with_overrides(&["model.norm=nf".into()]).is_ok());
}

#[test]
fn override_syntax() {
    let mut v: toml::Value = toml::from_str("a = 1").unwrap();
    assert!(apply_override(&mut v, "noequals").is_err());
    assert!(apply_override(&mut v, "a..b=1").is_err());
    assert!(apply_override(&mut v, "a.b=1").is_err());
    apply_override(&mut v, "c.d=[1, 2]").unwrap();
    assert_eq!(v["c"]["d"].as_array().unwrap().len(), 2);
}

#[test]
fn stratified_subset_is_within_one_per_class() {
    let mut c = ExperimentConfig::synthetic("s", MethodKind::St);
    c.data.train_size = 403;
    c.data.test_size = 101;
    let full = load_dataset(&c).unwrap();
    for fraction in [0.1, 0.25, 0.5, 0.77] {
        let counts = |d: &nofrost::data::Dataset| -> BTreeMap<usize, usize> {
            let mut m = BTreeMap::new();
            for &y in &d.labels {
                *m.entry(y).or_default() += 1;
            }
            m
        };
        let s = subset(full.clone(), fraction, 9).unwrap();
        for (whole, part) in [(&full.train, &s.train), (&full.test, &s.test)] {
            let (cw, cp) = (counts(whole), counts(part));
            for (k, n) in cw {
                let want = fraction * n as f64;
                let got = *cp.get(&k).unwrap_or(&0) as f64;
                assert!((got - want).abs() <= 1.0, "class {k}: {got} vs {want}");
            }
        }
        assert_eq!(s.train, subset(full.clone(), fraction, 9).unwrap().train);
    }
    c.subset_fraction = 0.25;
    let s = load_dataset(&c).unwrap();
    assert!((s.train.len() as f64 - 0.25 * 403.0).abs() <= 4.0);
}

#[test]
fn missing_real_dataset_explains_how_to_fetch() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [DatasetKind::Mnist, DatasetKind::FashionMnist, DatasetKind::Cifar10] {
        let mut c = ExperimentConfig::synthetic("d", MethodKind::St);
        c.dataset = kind;
        c.data.data_dir = Some(dir.path().to_path_buf());
        match load_dataset(&c) {
            Err(HarnessError::Data(msg)) => {
                assert!(msg.contains("not found") && msg.contains(DATA_DIR_ENV), "{msg}");
            }
            other => panic!("{kind:?}: {:?}", other.map(|_| ())),
        }
    }
}
