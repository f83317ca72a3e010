use std::path::PathBuf;

use nofrost_harness::plot::{plot_files, render, PlotKind, Table};
use nofrost_harness::HarnessError;

fn table(headers: &[&str], rows: &[&[&str]]) -> Table {
    Table {
        headers: headers.iter().map(|s| s.to_string()).collect(),
        rows: rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
    }
}

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against the stored file; `NOFROST_UPDATE_GOLDEN=1` rewrites it.
fn check_golden(name: &str, svg: &str) {
    let p = golden(name);
    if std::env::var_os("NOFROST_UPDATE_GOLDEN").is_some() {
        std::fs::write(&p, svg).unwrap();
    }
    let want = std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    assert_eq!(svg, want, "{name} differs from the golden file");
}

fn tradeoff() -> Table {
    table(
        &["series", "clean_acc", "robust_acc"],
        &[&["sat", "88.0", "74.1"], &["trades", "86.25", "75.0"], &["nofrost", "87.5", "71.0"]],
    )
}

#[test]
fn tradeoff_golden() {
    check_golden("tradeoff.svg", &render(PlotKind::Tradeoff, &[tradeoff()], None).unwrap());
}

#[test]
fn interpolation_golden() {
    let t = table(
        &["strategy", "gamma", "clean_acc", "robust_acc"],
        &[&["all", "0", "99", "1"], &["all", "0.5", "97", "40"], &["all", "1", "90", "79"], &["logits", "0", "99", "1"], &["logits", "1", "90", "79"]],
    );
    check_golden("interpolation.svg", &render(PlotKind::Interpolation, &[t], Some("gamma sweep")).unwrap());
}

#[test]
fn rendering_is_deterministic_and_uses_a_star_for_nofrost() {
    let a = render(PlotKind::Tradeoff, &[tradeoff()], None).unwrap();
    assert_eq!(a, render(PlotKind::Tradeoff, &[tradeoff()], None).unwrap());
    assert!(a.starts_with("<svg"));
    assert!(a.contains("<path d=\"M"), "star marker");
}

#[test]
fn empty_and_single_point_inputs_render() {
    for kind in PlotKind::ALL {
        let headers: Vec<&str> = kind.columns().to_vec();
        let empty = table(&headers, &[]);
        let svg = render(kind, &[empty], None).unwrap();
        assert!(svg.contains("</svg>"), "{kind:?}");
        assert!(!svg.contains("NaN"), "{kind:?}");
        let one: Vec<&str> = headers.iter().enumerate().map(|(i, _)| if i == 0 { "only" } else { "0.5" }).collect();
        let svg = render(kind, &[table(&headers, &[&one])], None).unwrap();
        assert!(!svg.contains("NaN") && !svg.contains("inf"), "{kind:?}");
    }
}

#[test]
fn missing_column_names_it() {
    let t = table(&["series", "clean_acc"], &[&["a", "1"]]);
    match render(PlotKind::Tradeoff, &[t], None) {
        Err(HarnessError::Schema(msg)) => assert!(msg.contains("robust_acc"), "{msg}"),
        other => panic!("{other:?}"),
    }
    let bad = table(&["series", "clean_acc", "robust_acc"], &[&["a", "x", "1"]]);
    assert!(matches!(render(PlotKind::Tradeoff, &[bad], None), Err(HarnessError::Schema(_))));
}

#[test]
fn files_with_extra_columns_and_filters() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    std::fs::write(&a, "series,eps,robust_acc,extra\ns1,2,80,x\ns1,8,60,x\ns2,2,70,y\n").unwrap();
    let out = dir.path().join("o.svg");
    plot_files(PlotKind::EpsSweep, &[&a], Some(("extra", "x")), Some("t"), &out).unwrap();
    let svg = std::fs::read_to_string(&out).unwrap();
    assert!(svg.contains("s1") && !svg.contains(">s2<"));
    assert!(plot_files(PlotKind::EpsSweep, &[&a], Some(("nope", "x")), None, &out).is_err());
}
