//! Path helpers. Artifacts store paths relative to a base directory so that a
//! run directory can be moved or copied without changing any artifact bytes.

use std::path::{Component, Path, PathBuf};

/// Lexically normalizes an absolute version of `p` (no symlink resolution).
pub fn normalize(p: &Path) -> PathBuf {
    let abs = std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf());
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    out
}

/// `target` expressed relative to `from_dir`, using `..` where needed.
/// Falls back to the absolute target when the two share no root.
pub fn relative_path(from_dir: &Path, target: &Path) -> PathBuf {
    let from = normalize(from_dir);
    let to = normalize(target);
    let (fc, tc): (Vec<_>, Vec<_>) = (from.components().collect(), to.components().collect());
    let common = fc.iter().zip(&tc).take_while(|(a, b)| a == b).count();
    if common == 0 {
        return to;
    }
    let mut out = PathBuf::new();
    for _ in common..fc.len() {
        out.push("..");
    }
    for c in &tc[common..] {
        out.push(c);
    }
    if out.as_os_str().is_empty() {
        out.push(".");
    }
    out
}

/// Joins a stored path onto its base; absolute paths are returned unchanged.
pub fn resolve(base: &Path, stored: &str) -> PathBuf {
    base.join(stored)
}

/// Slash-separated string form used inside artifacts.
pub fn to_portable(p: &Path) -> String {
    p.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect::<Vec<_>>().join("/").replacen("//", "/", 1)
}
