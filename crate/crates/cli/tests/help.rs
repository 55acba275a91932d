//! `--help` output is pinned to files under tests/golden.
//!
//! Regenerate after an intentional change with `LATMAP_BLESS=1 cargo test -p latmap-cli --test help`.

use std::path::PathBuf;
use std::process::Command;

const COMMANDS: [&str; 9] = [
    "",
    "build",
    "pretrain",
    "replay",
    "query",
    "token",
    "export",
    "synth",
    "gradcheck",
];

fn help_text(sub: &str) -> String {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_latmap"));
    if !sub.is_empty() {
        cmd.arg(sub);
    }
    let out = cmd.arg("--help").output().unwrap();
    assert!(out.status.success(), "{sub} --help exited with {}", out.status);
    String::from_utf8(out.stdout).unwrap()
}

fn golden_path(sub: &str) -> PathBuf {
    let name = if sub.is_empty() { "latmap" } else { sub };
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("tests/golden/{name}.help.txt"))
}

#[test]
fn help_matches_golden_files() {
    let bless = std::env::var_os("LATMAP_BLESS").is_some();
    let mut stale = Vec::new();
    for sub in COMMANDS {
        let got = help_text(sub);
        let path = golden_path(sub);
        if bless {
            std::fs::write(&path, &got).unwrap();
            continue;
        }
        let want = std::fs::read_to_string(&path).unwrap_or_default();
        if got != want {
            stale.push(format!("{}:\n{got}", path.display()));
        }
    }
    assert!(stale.is_empty(), "help output changed:\n{}", stale.join("\n"));
}

#[test]
fn every_long_flag_is_described() {
    for sub in COMMANDS {
        let text = help_text(sub);
        for line in text.lines().map(str::trim_start).filter(|l| l.starts_with('-')) {
            let rest = line.split("  ").skip(1).find(|s| !s.trim().is_empty());
            assert!(rest.is_some(), "`{sub}` flag without a description: {line}");
        }
    }
}

#[test]
fn help_and_version_exit_zero() {
    let bin = env!("CARGO_BIN_EXE_latmap");
    for args in [&["-h"][..], &["--version"], &["help", "build"]] {
        let out = Command::new(bin).args(args).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(!out.stdout.is_empty());
    }
}
