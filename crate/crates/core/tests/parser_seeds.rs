//! Every fuzz corpus seed goes through the same checks as its fuzz target.

use std::path::PathBuf;
use tpdm_core::audio::{read_wav_bytes, to_mono};
use tpdm_core::config::RunConfig;
use tpdm_core::dataset::Manifest;
use tpdm_core::training::Checkpoint;
use tpdm_core::vq::LoudnessCodebook;

fn seeds(target: &str) -> Vec<(String, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn wav_seeds() {
    let mut accepted = 0;
    for (name, bytes) in seeds("wav") {
        if let Ok(clip) = read_wav_bytes(&bytes) {
            to_mono(&clip).unwrap_or_else(|e| panic!("{name}: {e}"));
            accepted += 1;
        }
    }
    assert_eq!(accepted, 3);
}

#[test]
fn codebook_seeds() {
    for (name, bytes) in seeds("codebook") {
        let cb = LoudnessCodebook::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(LoudnessCodebook::from_json(&cb.to_json()).unwrap().to_json(), cb.to_json());
    }
}

#[test]
fn checkpoint_seeds() {
    let mut accepted = 0;
    for (_, bytes) in seeds("checkpoint") {
        if let Ok(ckpt) = Checkpoint::from_bytes(&bytes) {
            assert_eq!(Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap().to_bytes(), ckpt.to_bytes());
            accepted += 1;
        }
    }
    assert_eq!(accepted, 1);
}

#[test]
fn manifest_seeds() {
    for (name, bytes) in seeds("manifest") {
        let m = Manifest::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        Manifest::from_json(&m.to_json()).unwrap();
    }
}

#[test]
fn run_config_seeds() {
    for (name, bytes) in seeds("run_config") {
        let cfg = RunConfig::from_json(std::str::from_utf8(&bytes).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }
}
