//! Runs `fsmp selftest` twice with the same seed: every criterion must pass
//! and the written files must be byte-identical (criterion 12).

use std::fs;
use std::process::Command;

use tempfile::TempDir;

#[test]
fn selftest_passes_and_is_deterministic() {
    let dirs = [TempDir::new().unwrap(), TempDir::new().unwrap()];
    let mut stdout = Vec::new();
    for d in &dirs {
        let out = Command::new(env!("CARGO_BIN_EXE_fsmp"))
            .args(["--seed", "20240601", "--out", d.path().to_str().unwrap(), "selftest"])
            .output()
            .unwrap();
        stdout.push(String::from_utf8(out.stdout).unwrap());
        assert_eq!(out.status.code(), Some(0), "{}", stdout.last().unwrap());
    }
    for line in stdout[0].lines().filter(|l| l.starts_with("criterion")) {
        println!("{line}");
    }
    assert_eq!(stdout[0].lines().filter(|l| l.contains(" PASS ")).count(), 12);
    for name in ["selftest.txt", "selftest.json"] {
        let a = fs::read(dirs[0].path().join(name)).unwrap();
        let b = fs::read(dirs[1].path().join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between runs");
    }
    println!("criterion 12 (binary rerun): selftest.txt and selftest.json byte-identical");
}
