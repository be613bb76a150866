//! Selecting a balanced stimulus set from two model safety scores.
//!
//! For each model, an image's standing is described by two counts over the
//! population: how many scores are strictly below it, and how many are at or
//! below it. With `n` images:
//!
//! * **high** – strictly-below count `>= 0.8 n` for both models;
//! * **low** – at-or-below count `<= 0.2 n` for both models;
//! * **medium** – strictly-below `>= 0.4 n` and at-or-below `<= 0.6 n` for both.
//!
//! Tied scores therefore land in a band only if the whole tie group fits in
//! it. Only order comparisons are used, so the strata are invariant under any
//! strictly increasing transform of the scores.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::substream;

pub const SCORE_MIN: f64 = 1.0;
pub const SCORE_MAX: f64 = 9.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreModel {
    Global,
    Sweden,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyScore {
    pub image_id: String,
    pub score: f64,
    pub source_model: ScoreModel,
}

/// Both model scores for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualScore {
    pub image_id: String,
    pub global: f64,
    pub sweden: f64,
}

impl DualScore {
    /// Joins per-model score lists by image id. Every image needs exactly one
    /// score from each model.
    pub fn join(scores: &[SafetyScore]) -> Result<Vec<DualScore>> {
        use std::collections::BTreeMap;
        let mut by_image: BTreeMap<&str, (Option<f64>, Option<f64>)> = BTreeMap::new();
        for s in scores {
            let slot = by_image.entry(&s.image_id).or_default();
            let target = match s.source_model {
                ScoreModel::Global => &mut slot.0,
                ScoreModel::Sweden => &mut slot.1,
            };
            if target.replace(s.score).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate {:?} score for {}",
                    s.source_model, s.image_id
                )));
            }
        }
        by_image
            .into_iter()
            .map(|(id, pair)| match pair {
                (Some(global), Some(sweden)) => Ok(DualScore {
                    image_id: id.to_string(),
                    global,
                    sweden,
                }),
                _ => Err(Error::Validation(format!("image {id} lacks a score from both models"))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    High,
    Medium,
    Low,
}

impl Stratum {
    pub fn as_str(self) -> &'static str {
        match self {
            Stratum::High => "high",
            Stratum::Medium => "medium",
            Stratum::Low => "low",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Standing {
    below: usize,
    at_or_below: usize,
}

fn standings(values: &[f64]) -> Vec<Standing> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    values
        .iter()
        .map(|v| Standing {
            below: sorted.partition_point(|s| s.total_cmp(v).is_lt()),
            at_or_below: sorted.partition_point(|s| s.total_cmp(v).is_le()),
        })
        .collect()
}

fn band(s: Standing, n: usize) -> Option<Stratum> {
    // Exact integer forms of 0.8n, 0.2n, 0.4n and 0.6n.
    if s.below * 5 >= 4 * n {
        Some(Stratum::High)
    } else if s.at_or_below * 5 <= n {
        Some(Stratum::Low)
    } else if s.below * 5 >= 2 * n && s.at_or_below * 5 <= 3 * n {
        Some(Stratum::Medium)
    } else {
        None
    }
}

/// Qualifying pools (before sampling), each sorted by image id.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct StrataPools {
    pub high: Vec<String>,
    pub medium: Vec<String>,
    pub low: Vec<String>,
}

impl StrataPools {
    pub fn get(&self, stratum: Stratum) -> &[String] {
        match stratum {
            Stratum::High => &self.high,
            Stratum::Medium => &self.medium,
            Stratum::Low => &self.low,
        }
    }
}

fn validate(scores: &[DualScore], model_range: bool) -> Result<()> {
    let mut ids = BTreeSet::new();
    for s in scores {
        for v in [s.global, s.sweden] {
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "score for {} is not finite",
                    s.image_id
                )));
            }
            if model_range && !(SCORE_MIN..=SCORE_MAX).contains(&v) {
                return Err(Error::Validation(format!(
                    "score {v} for {} outside [1, 9]",
                    s.image_id
                )));
            }
        }
        if !ids.insert(&s.image_id) {
            return Err(Error::Validation(format!("duplicate image {}", s.image_id)));
        }
    }
    Ok(())
}

/// Images whose standing falls in the same band under both models. Any
/// finite scores are accepted here, since only their order matters.
pub fn strata_pools(scores: &[DualScore]) -> Result<StrataPools> {
    validate(scores, false)?;
    let n = scores.len();
    let global = standings(&scores.iter().map(|s| s.global).collect::<Vec<_>>());
    let sweden = standings(&scores.iter().map(|s| s.sweden).collect::<Vec<_>>());
    let mut pools = StrataPools::default();
    for (i, s) in scores.iter().enumerate() {
        let (g, w) = (band(global[i], n), band(sweden[i], n));
        if let Some(stratum) = g.filter(|_| g == w) {
            let pool = match stratum {
                Stratum::High => &mut pools.high,
                Stratum::Medium => &mut pools.medium,
                Stratum::Low => &mut pools.low,
            };
            pool.push(s.image_id.clone());
        }
    }
    pools.high.sort();
    pools.medium.sort();
    pools.low.sort();
    Ok(pools)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stratification {
    pub pools: StrataPools,
    /// `per_stratum` sampled images per stratum, sorted by image id.
    pub high: Vec<String>,
    pub medium: Vec<String>,
    pub low: Vec<String>,
}

impl Stratification {
    pub fn selected(&self) -> impl Iterator<Item = (Stratum, &str)> {
        self.high
            .iter()
            .map(|id| (Stratum::High, id.as_str()))
            .chain(self.medium.iter().map(|id| (Stratum::Medium, id.as_str())))
            .chain(self.low.iter().map(|id| (Stratum::Low, id.as_str())))
    }
}

/// Samples `per_stratum` images uniformly at random from each pool.
pub fn stratify_by_score(
    scores: &[DualScore],
    per_stratum: usize,
    seed: u64,
) -> Result<Stratification> {
    if per_stratum == 0 {
        return Err(invalid("per_stratum must be at least 1"));
    }
    validate(scores, true)?;
    let pools = strata_pools(scores)?;
    let draw = |stratum: Stratum| -> Result<Vec<String>> {
        let pool = pools.get(stratum);
        if pool.len() < per_stratum {
            return Err(Error::StratumUnderflow {
                stratum: stratum.as_str(),
                available: pool.len(),
                requested: per_stratum,
            });
        }
        let mut rng = substream(seed, &format!("stratify/{}", stratum.as_str()));
        let mut picked: Vec<String> = index::sample(&mut rng, pool.len(), per_stratum)
            .into_iter()
            .map(|i| pool[i].clone())
            .collect();
        picked.sort();
        Ok(picked)
    };
    let high = draw(Stratum::High)?;
    let medium = draw(Stratum::Medium)?;
    let low = draw(Stratum::Low)?;
    Ok(Stratification {
        pools,
        high,
        medium,
        low,
    })
}

/// Reads `image_id,global,sweden` CSV rows (header required).
pub fn parse_score_table(text: &str) -> Result<Vec<DualScore>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == "image_id,global,sweden" => {}
        _ => {
            return Err(Error::Validation(
                "score table must start with header `image_id,global,sweden`".into(),
            ))
        }
    }
    lines
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Validation(format!("line {}: {e}", i + 1)))
            };
            match fields.as_slice() {
                [id, g, w] => Ok(DualScore {
                    image_id: id.to_string(),
                    global: parse(g)?,
                    sweden: parse(w)?,
                }),
                _ => Err(Error::Validation(format!("line {}: expected 3 fields", i + 1))),
            }
        })
        .collect()
}

/// Writes the image manifest `image_id,stratum` for the selected images.
pub fn write_manifest<W: Write>(mut w: W, s: &Stratification) -> std::io::Result<()> {
    writeln!(w, "image_id,stratum")?;
    for (stratum, id) in s.selected() {
        writeln!(w, "{id},{}", stratum.as_str())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pairs: &[(f64, f64)]) -> Vec<DualScore> {
        pairs
            .iter()
            .enumerate()
            .map(|(i, &(g, s))| DualScore {
                image_id: format!("img{i:04}"),
                global: g,
                sweden: s,
            })
            .collect()
    }

    #[test]
    fn identical_scores_underflow() {
        let s = scores(&vec![(5.0, 5.0); 50]);
        let err = stratify_by_score(&s, 1, 1).unwrap_err();
        assert!(matches!(err, Error::StratumUnderflow { stratum: "high", .. }), "{err}");
    }

    #[test]
    fn balanced_three_hundred() {
        // 1500 images whose two scores agree in rank: each pool holds 300.
        let s = scores(
            &(0..1500)
                .map(|i| {
                    let v = 1.0 + 8.0 * i as f64 / 1500.0;
                    (v, v * 0.5 + 2.0)
                })
                .collect::<Vec<_>>(),
        );
        let out = stratify_by_score(&s, 100, 9).unwrap();
        assert_eq!(out.pools.high.len(), 300);
        assert_eq!(out.pools.low.len(), 300);
        assert_eq!(out.pools.medium.len(), 300);
        assert_eq!(out.selected().count(), 300);
        let unique: BTreeSet<&str> = out.selected().map(|(_, id)| id).collect();
        assert_eq!(unique.len(), 300);
        // Same seed, same sample; another seed, another sample.
        assert_eq!(stratify_by_score(&s, 100, 9).unwrap(), out);
        assert_ne!(stratify_by_score(&s, 100, 10).unwrap().high, out.high);
    }

    #[test]
    fn rejects_out_of_range_and_duplicates() {
        assert!(matches!(
            stratify_by_score(&scores(&[(0.5, 3.0)]), 1, 1),
            Err(Error::Validation(_))
        ));
        // Pools only compare scores, so any finite value is accepted there.
        assert!(strata_pools(&scores(&[(0.5, 300.0)])).is_ok());
        assert!(strata_pools(&scores(&[(f64::NAN, 3.0)])).is_err());
        let mut s = scores(&[(2.0, 3.0), (4.0, 4.0)]);
        s[1].image_id = s[0].image_id.clone();
        assert!(strata_pools(&s).is_err());
        assert!(stratify_by_score(&scores(&[(2.0, 3.0)]), 0, 1).is_err());
    }

    #[test]
    fn join_per_model_scores() {
        let raw = vec![
            SafetyScore { image_id: "a".into(), score: 2.0, source_model: ScoreModel::Global },
            SafetyScore { image_id: "a".into(), score: 3.0, source_model: ScoreModel::Sweden },
            SafetyScore { image_id: "b".into(), score: 4.0, source_model: ScoreModel::Global },
        ];
        assert!(DualScore::join(&raw).is_err());
        let joined = DualScore::join(&raw[..2]).unwrap();
        assert_eq!(joined, vec![DualScore { image_id: "a".into(), global: 2.0, sweden: 3.0 }]);
    }

    #[test]
    fn score_table_parsing() {
        let t = "image_id,global,sweden\na,1.5,2\nb,9,9\n";
        let s = parse_score_table(t).unwrap();
        assert_eq!(s.len(), 2);
        assert!(parse_score_table("a,1,2\n").is_err());
        assert!(parse_score_table("image_id,global,sweden\na,x,2\n").is_err());
    }
}
