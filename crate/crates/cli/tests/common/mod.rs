//! Fixture builds and runtime discovery shared by the CLI test targets.

#![allow(dead_code, unused_macros, unused_imports)]

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn have_toolchain() -> bool {
    ["gcc", "make"]
        .iter()
        .all(|tool| Command::new(tool).arg("--version").output().is_ok_and(|o| o.status.success()))
}

/// Every fixture variant, built once per test binary with the fixtures'
/// own Makefile. `None` when gcc or make is missing.
pub fn build_dir() -> Option<&'static Path> {
    static DIR: OnceLock<Option<PathBuf>> = OnceLock::new();
    DIR.get_or_init(|| {
        if !have_toolchain() {
            return None;
        }
        let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("fixtures");
        let status = Command::new("make")
            .arg("-s")
            .arg("-C")
            .arg(fixtures_dir())
            .arg(format!("OUT={}", out.display()))
            .status()
            .expect("make");
        assert!(status.success(), "fixture build failed");
        Some(out)
    })
    .as_deref()
}

/// `<build>/<fixture>`, the prefix bench expects.
pub fn fixture(name: &str) -> Option<PathBuf> {
    build_dir().map(|d| d.join(name))
}

pub fn variant(name: &str, mode: &str) -> Option<PathBuf> {
    build_dir().map(|d| d.join(format!("{name}.{mode}")))
}

/// The cdylib built for this test run, newest first.
pub fn runtime_library() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    let deps = exe.parent().unwrap();
    [deps.join("libscalpel_rt.so"), deps.parent().unwrap().join("libscalpel_rt.so")]
        .into_iter()
        .filter(|p| p.is_file())
        .max_by_key(|p| p.metadata().and_then(|m| m.modified()).ok())
        .expect("libscalpel_rt.so not built")
}

pub fn single_event_config(functions: &[&str], event: &str) -> String {
    let mut s = format!("BINARY=fixture\nNO_FUNCTIONS={}\n", functions.len());
    for f in functions {
        s.push_str(&format!(
            "[FUNCTION]\nFUNC_NAME={f}\nNO_EVENTS=1\n[EVENT]\nID={event}\nNO_SUBEVENTS=0\n[/EVENT]\n[/FUNCTION]\n"
        ));
    }
    s
}

macro_rules! require_toolchain {
    () => {
        match common::build_dir() {
            Some(_) => {}
            None => {
                eprintln!("gcc or make unavailable; skipped");
                return;
            }
        }
    };
}
pub(crate) use require_toolchain;
