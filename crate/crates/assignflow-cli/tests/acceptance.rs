//! End-to-end reproducibility check for the command-line binary: identical
//! run configurations must produce byte-identical artifacts.

use std::fs;
use std::path::Path;
use std::process::Command;

fn run(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_assignflow"))
        .args(args)
        .status()
        .expect("binary runs");
    assert!(status.success(), "assignflow {args:?} exited with {status}");
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("reading {name}: {e}"))
}

#[test]
fn criterion_9_reproducible_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut checked = Vec::new();
    for (tag, args) in [
        ("signal1d/rkmk32", vec!["--scenario", "signal1d", "--integrator", "rkmk32"]),
        ("colorquant/expint", vec!["--scenario", "colorquant", "--integrator", "expint", "--m", "5", "--T", "20"]),
        ("vertex31/linear-rk4", vec!["--scenario", "vertex31", "--integrator", "linear-rk4", "--tau", "0.01"]),
    ] {
        let out_a = tmp.path().join(format!("{}-a", tag.replace('/', "-")));
        let out_b = tmp.path().join(format!("{}-b", tag.replace('/', "-")));
        for out in [&out_a, &out_b] {
            let mut full = vec!["run"];
            full.extend_from_slice(&args);
            full.extend_from_slice(&["--out", out.to_str().unwrap()]);
            run(&full);
        }
        for artifact in ["labels.csv", "trace.csv"] {
            let a = read(&out_a, artifact);
            let b = read(&out_b, artifact);
            assert!(
                a == b,
                "acceptance 9 reproducibility: FAIL - {tag} {artifact} differs between runs"
            );
        }
        checked.push(tag);
    }
    println!(
        "acceptance 9 reproducibility: PASS - byte-identical labels.csv and trace.csv \
         across repeated runs of {}",
        checked.join(", ")
    );
}
