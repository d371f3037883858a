use std::path::PathBuf;
use std::process::Command;

/// Compiles a C program against the generated header and static library.
#[test]
fn header_compiles_and_links() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap();
    let lib = profile_dir.join("libnoisebench_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler available; skipping");
        return;
    }
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let out = tempfile::tempdir().unwrap();
    let bin = out.path().join("smoke");
    let status = Command::new("cc")
        .arg(crate_dir.join("tests/smoke.c"))
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "compiling the C smoke test failed");
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success(), "C smoke test exited with {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), env!("CARGO_PKG_VERSION"));
}
