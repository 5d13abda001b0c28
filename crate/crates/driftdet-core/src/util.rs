//! Small shared helpers.

use std::path::{Component, Path, PathBuf};

/// splitmix64 over packed indices; used to derive independent RNG streams.
pub fn mix64(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Relative path from `from_dir` to `to`, by longest common prefix. Inputs
/// are normalized lexically (no filesystem access), so `..` components in the
/// inputs are not resolved.
pub fn relative_path(from_dir: &Path, to: &Path) -> PathBuf {
    let from: Vec<Component> = from_dir.components().collect();
    let to_c: Vec<Component> = to.components().collect();
    let mut common = 0;
    while common < from.len() && common < to_c.len() && from[common] == to_c[common] {
        common += 1;
    }
    let mut rel = PathBuf::new();
    for _ in common..from.len() {
        rel.push("..");
    }
    for c in &to_c[common..] {
        rel.push(c.as_os_str());
    }
    if rel.as_os_str().is_empty() {
        rel.push(".");
    }
    rel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_path_cases() {
        assert_eq!(
            relative_path(Path::new("/a/b/labels"), Path::new("/a/b/data/x.png")),
            PathBuf::from("../data/x.png")
        );
        assert_eq!(
            relative_path(Path::new("/a/b"), Path::new("/a/b/x.png")),
            PathBuf::from("x.png")
        );
    }

    #[test]
    fn mix64_distinct_streams() {
        assert_ne!(mix64(1, 0, 0), mix64(1, 1, 0));
        assert_ne!(mix64(1, 0, 0), mix64(2, 0, 0));
        assert_eq!(mix64(7, 3, 2), mix64(7, 3, 2));
    }
}
