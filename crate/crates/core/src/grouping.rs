//! Pairwise "which place looks safer?" records and safe/unsafe grouping.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::{self, ParseMode, Parsed};

pub const COMPARISON_LOG_SCHEMA: &str = "streetgaze.comparisons/1";

/// Wins (or losses) needed to place an image in the safe (or unsafe) group.
pub const DEFAULT_GROUP_THRESHOLD: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn flipped(self) -> Self {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComparisonRecord {
    pub pair_id: String,
    #[serde(rename = "left")]
    pub left_image: String,
    #[serde(rename = "right")]
    pub right_image: String,
    pub chosen: Side,
    pub session_id: String,
    pub t_ms: u64,
}

impl ComparisonRecord {
    pub fn winner(&self) -> &str {
        match self.chosen {
            Side::Left => &self.left_image,
            Side::Right => &self.right_image,
        }
    }

    pub fn loser(&self) -> &str {
        match self.chosen {
            Side::Left => &self.right_image,
            Side::Right => &self.left_image,
        }
    }

    /// The same judgement with the two images swapped on screen.
    pub fn mirrored(&self) -> Self {
        Self {
            left_image: self.right_image.clone(),
            right_image: self.left_image.clone(),
            chosen: self.chosen.flipped(),
            ..self.clone()
        }
    }
}

pub fn parse_comparison_log<R: BufRead>(
    reader: R,
    mode: ParseMode,
) -> Result<Parsed<ComparisonRecord>> {
    jsonl::read_records(reader, COMPARISON_LOG_SCHEMA, mode, |r: ComparisonRecord| {
        if r.left_image == r.right_image {
            Err(format!("pair {} shows image {} on both sides", r.pair_id, r.left_image))
        } else {
            Ok(r)
        }
    })
}

pub fn write_comparison_log<'a, W: Write>(
    mut w: W,
    records: impl IntoIterator<Item = &'a ComparisonRecord>,
) -> std::io::Result<()> {
    jsonl::write_header(&mut w, COMPARISON_LOG_SCHEMA)?;
    for r in records {
        jsonl::write_record(&mut w, r)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Safe,
    Unsafe,
    Ambiguous,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Safe => "safe",
            Group::Unsafe => "unsafe",
            Group::Ambiguous => "ambiguous",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupLabel {
    pub image_id: String,
    pub group: Group,
    pub wins: u32,
    pub losses: u32,
}

/// Classifies an image from its win/loss tally.
///
/// Safe needs `wins >= threshold` with `losses < threshold`; unsafe is the
/// mirror. Everything else, including images that were rarely shown, is
/// ambiguous.
pub fn classify(wins: u32, losses: u32, threshold: u32) -> Group {
    match (wins >= threshold, losses >= threshold) {
        (true, false) => Group::Safe,
        (false, true) => Group::Unsafe,
        _ => Group::Ambiguous,
    }
}

/// One label per image that appears in any record, ordered by image id.
pub fn group_images(records: &[ComparisonRecord], threshold: u32) -> Vec<GroupLabel> {
    let mut tally: BTreeMap<&str, (u32, u32)> = BTreeMap::new();
    for r in records {
        tally.entry(r.winner()).or_default().0 += 1;
        tally.entry(r.loser()).or_default().1 += 1;
    }
    tally
        .into_iter()
        .map(|(image_id, (wins, losses))| GroupLabel {
            image_id: image_id.to_string(),
            group: classify(wins, losses, threshold),
            wins,
            losses,
        })
        .collect()
}

pub fn write_group_table<W: Write>(mut w: W, labels: &[GroupLabel]) -> std::io::Result<()> {
    writeln!(w, "image_id,group,wins,losses")?;
    for l in labels {
        writeln!(w, "{},{},{},{}", l.image_id, l.group.as_str(), l.wins, l.losses)?;
    }
    Ok(())
}

/// Reads a table written by [`write_group_table`].
pub fn read_group_table(text: &str) -> Result<Vec<GroupLabel>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "image_id,group,wins,losses" => {}
        _ => return Err(Error::Validation("group table header must be image_id,group,wins,losses".into())),
    }
    lines
        .map(|(n, line)| {
            let bad = || Error::Validation(format!("group table line {}: `{line}`", n + 1));
            let f: Vec<&str> = line.trim().split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let group = match f[1] {
                "safe" => Group::Safe,
                "unsafe" => Group::Unsafe,
                "ambiguous" => Group::Ambiguous,
                _ => return Err(bad()),
            };
            Ok(GroupLabel {
                image_id: f[0].to_string(),
                group,
                wins: f[2].parse().map_err(|_| bad())?,
                losses: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
