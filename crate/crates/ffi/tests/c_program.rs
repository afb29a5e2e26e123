//! Compiles a C program against the generated header and the static library.

use std::path::{Path, PathBuf};
use std::process::Command;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use transnet::{checkpoint, Architecture, TransNetModel, TransformationSet};

fn target_dir() -> PathBuf {
    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_and_runs() {
    let lib = target_dir().join("libtransnet_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lm", "-lpthread", "-ldl"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");

    let arch = Architecture {
        in_channels: 2,
        input_size: 6,
        layers: Architecture::parse_layers("3p,4").unwrap(),
        num_classes: 3,
    };
    let params = arch.init_params(2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let model = TransNetModel::new(params, TransformationSet::rotations(2)).unwrap();
    let ckpt = dir.path().join("m.tnet");
    checkpoint::save(&model, &ckpt).unwrap();

    let out = Command::new(&exe).arg(&ckpt).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{}{}", stdout, String::from_utf8_lossy(&out.stderr));
    assert!(stdout.contains("heads=2 classes=3 channels=2"), "{}", stdout);
    assert!(stdout.contains("score=0.866025"), "{}", stdout);
}
