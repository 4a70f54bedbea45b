//! Embeds a content hash of the workspace sources so every run manifest can
//! state exactly which code produced it, without relying on a VCS checkout
//! at runtime.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

fn collect_sources(dir: &Path, files: &mut Vec<PathBuf>) {
    let Ok(entries) = fs::read_dir(dir) else {
        return;
    };
    for entry in entries.flatten() {
        let path = entry.path();
        if path.is_dir() {
            collect_sources(&path, files);
        } else if path.extension().is_some_and(|e| e == "rs" || e == "toml") {
            files.push(path);
        }
    }
}

fn main() {
    let manifest_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let mut files = Vec::new();
    collect_sources(&manifest_dir.join("src"), &mut files);
    collect_sources(&manifest_dir.join("../core/src"), &mut files);
    files.push(manifest_dir.join("Cargo.toml"));
    files.push(manifest_dir.join("../core/Cargo.toml"));
    files.sort();

    let mut hasher = Sha256::new();
    for file in &files {
        let bytes = fs::read(file).unwrap_or_default();
        // Hash the file name (not the absolute path) so the id is stable
        // across checkout locations, plus a length delimiter and the bytes.
        if let Some(name) = file.file_name() {
            hasher.update(name.to_string_lossy().as_bytes());
        }
        hasher.update(u64::to_le_bytes(bytes.len() as u64));
        hasher.update(&bytes);
        println!("cargo:rerun-if-changed={}", file.display());
    }
    let digest = hasher.finalize();
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    println!("cargo:rustc-env=STARGLOW_CODE_HASH={hex}");
}
