//! Renders each plot kind from small hand-written CSVs.
//!
//!     cargo run --release -p nofrost-harness --example plot_results [out_dir]

use std::path::PathBuf;

use nofrost_harness::plot::{render, PlotKind, Table};

fn table(headers: &[&str], rows: &[&[&str]]) -> Table {
    Table {
        headers: headers.iter().map(|s| s.to_string()).collect(),
        rows: rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
    }
}

fn main() -> nofrost_harness::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&out)?;
    let plots = [
        (
            PlotKind::Tradeoff,
            table(
                &["series", "clean_acc", "robust_acc"],
                &[&["sat", "88.0", "74.1"], &["trades", "86.2", "75.0"], &["nofrost", "87.5", "71.0"]],
            ),
        ),
        (
            PlotKind::EpsSweep,
            table(
                &["series", "eps", "robust_acc"],
                &[&["sat", "2", "85"], &["sat", "8", "74"], &["sat", "16", "52"], &["nofrost", "2", "84"], &["nofrost", "8", "71"], &["nofrost", "16", "49"]],
            ),
        ),
        (
            PlotKind::Scatter,
            table(
                &["source", "mean", "var"],
                &[&["clean", "0.1", "1.2"], &["clean", "-0.3", "0.8"], &["adv", "0.05", "0.6"], &["adv", "-0.1", "0.5"]],
            ),
        ),
        (
            PlotKind::Histogram,
            table(&["series", "value"], &[&["a", "0.1"], &["a", "0.15"], &["a", "0.4"], &["b", "0.3"], &["b", "0.35"]]),
        ),
        (
            PlotKind::Interpolation,
            table(
                &["strategy", "gamma", "clean_acc", "robust_acc"],
                &[&["all", "0", "99", "1"], &["all", "0.5", "97", "40"], &["all", "1", "90", "79"]],
            ),
        ),
    ];
    for (kind, t) in plots {
        let path = out.join(format!("{}.svg", kind.name()));
        std::fs::write(&path, render(kind, &[t], None)?)?;
        println!("{}", path.display());
    }
    Ok(())
}
