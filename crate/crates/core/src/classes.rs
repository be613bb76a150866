//! The 150-class ADE20K scene-parsing taxonomy.

use std::sync::OnceLock;

pub const NUM_CLASSES: usize = 150;

/// Label value used for pixels that carry no class.
pub const UNLABELED: u8 = 255;

const TABLE: &str = include_str!("../data/ade20k_classes.txt");

fn names() -> &'static [&'static str] {
    static NAMES: OnceLock<Vec<&'static str>> = OnceLock::new();
    NAMES.get_or_init(|| {
        TABLE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect()
    })
}

/// Name of class `index`, or `None` past the end of the table.
pub fn class_name(index: usize) -> Option<&'static str> {
    names().get(index).copied()
}

pub fn class_index(name: &str) -> Option<usize> {
    names().iter().position(|n| *n == name)
}
