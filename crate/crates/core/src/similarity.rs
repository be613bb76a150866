//! Agreement between human attention and saliency heatmaps from CAM methods.
//!
//! Scene level: RMS difference of the two hue maps after scaling hue to
//! `[0, 1]`, plus externally computed LPIPS scores. Element level: cosine of
//! the two adjusted-MoH object vectors.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::heatmap::{HueMap, HUE_MAX};
use crate::jsonl::{self, ParseMode};
use crate::segmentation::{MetricKind, ObjectVector};

pub const LPIPS_SCHEMA: &str = "streetgaze.lpips/1";

/// The seven CAM variants, ordered by name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CamMethod {
    AblationCAM,
    EigenCAM,
    GradCAM,
    GradCAMPlusPlus,
    HiResCAM,
    ScoreCAM,
    XGradCAM,
}

impl CamMethod {
    pub const ALL: [CamMethod; 7] = [
        CamMethod::AblationCAM,
        CamMethod::EigenCAM,
        CamMethod::GradCAM,
        CamMethod::GradCAMPlusPlus,
        CamMethod::HiResCAM,
        CamMethod::ScoreCAM,
        CamMethod::XGradCAM,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CamMethod::AblationCAM => "AblationCAM",
            CamMethod::EigenCAM => "EigenCAM",
            CamMethod::GradCAM => "GradCAM",
            CamMethod::GradCAMPlusPlus => "GradCAMPlusPlus",
            CamMethod::HiResCAM => "HiResCAM",
            CamMethod::ScoreCAM => "ScoreCAM",
            CamMethod::XGradCAM => "XGradCAM",
        }
    }
}

impl fmt::Display for CamMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CamMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CamMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Validation(format!("unknown CAM method `{s}`")))
    }
}

/// A human heatmap and one method's heatmap for the same image.
#[derive(Debug, Clone)]
pub struct HeatmapPair<'a> {
    pub image_id: &'a str,
    pub method: CamMethod,
    pub human: &'a HueMap,
    pub machine: &'a HueMap,
}

impl HeatmapPair<'_> {
    pub fn l2_rms(&self) -> Result<f64> {
        l2_rms(self.human, self.machine)
    }
}

/// `sqrt(mean((h_a/150 - h_b/150)^2))`; 0 for identical maps, 1 for maximally
/// separated ones.
pub fn l2_rms(a: &HueMap, b: &HueMap) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(invalid(format!(
            "heatmap dimensions differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let n = a.cells().len();
    if n == 0 {
        return Err(invalid("heatmaps are empty"));
    }
    let sum_sq: f64 = a
        .cells()
        .as_slice()
        .iter()
        .zip(b.cells().as_slice())
        .map(|(x, y)| {
            let d = (x - y) / HUE_MAX;
            d * d
        })
        .sum();
    Ok((sum_sq / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElementCosine {
    pub value: f64,
    /// Set when either vector is all zero; `value` is then 0.
    pub zero_vector: bool,
}

/// Cosine of two adjusted-MoH vectors, missing entries read as zero.
pub fn cosine_element(human: &ObjectVector, machine: &ObjectVector) -> Result<ElementCosine> {
    for v in [human, machine] {
        if v.kind != MetricKind::MohAdjusted {
            return Err(invalid(format!("expected MoH_adjusted vectors, got {}", v.kind)));
        }
    }
    if human.values.len() != machine.values.len() {
        return Err(invalid("object vectors have different lengths"));
    }
    Ok(cosine(&human.dense(), &machine.dense()))
}

pub(crate) fn cosine(u: &[f64], v: &[f64]) -> ElementCosine {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|b| b * b).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return ElementCosine {
            value: 0.0,
            zero_vector: true,
        };
    }
    ElementCosine {
        value: (dot / (nu * nv)).clamp(-1.0, 1.0),
        zero_vector: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpipsRecord {
    pub image_id: String,
    pub method: CamMethod,
    pub lpips: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct LpipsTable {
    pub scores: BTreeMap<(String, CamMethod), f64>,
    /// `(image, method)` combinations absent from the file, for every image
    /// that the file mentions at all.
    pub missing: Vec<(String, CamMethod)>,
}

impl LpipsTable {
    pub fn get(&self, image_id: &str, method: CamMethod) -> Option<f64> {
        self.scores.get(&(image_id.to_string(), method)).copied()
    }
}

/// Reads a sidecar LPIPS score file. Any malformed line fails the read;
/// scores must lie in `[0, 1]` and appear at most once per pair.
pub fn ingest_lpips<R: BufRead>(reader: R) -> Result<LpipsTable> {
    let parsed = jsonl::read_records(reader, LPIPS_SCHEMA, ParseMode::Strict, |r: LpipsRecord| {
        Ok::<_, String>(r)
    })?;
    let mut table = LpipsTable::default();
    for r in parsed.records {
        if !(0.0..=1.0).contains(&r.lpips) {
            return Err(Error::Validation(format!(
                "LPIPS {} for ({}, {}) outside [0, 1]",
                r.lpips, r.image_id, r.method
            )));
        }
        let key = (r.image_id, r.method);
        if table.scores.contains_key(&key) {
            return Err(Error::Validation(format!(
                "duplicate LPIPS score for ({}, {})",
                key.0, key.1
            )));
        }
        table.scores.insert(key, r.lpips);
    }
    let images: BTreeSet<&String> = table.scores.keys().map(|(id, _)| id).collect();
    table.missing = images
        .into_iter()
        .flat_map(|id| CamMethod::ALL.into_iter().map(move |m| (id.clone(), m)))
        .filter(|k| !table.scores.contains_key(k))
        .collect();
    Ok(table)
}

pub fn write_lpips<W: Write>(mut w: W, table: &LpipsTable) -> std::io::Result<()> {
    jsonl::write_header(&mut w, LPIPS_SCHEMA)?;
    for ((image_id, method), &lpips) in &table.scores {
        jsonl::write_record(
            &mut w,
            &LpipsRecord {
                image_id: image_id.clone(),
                method: *method,
                lpips,
            },
        )?;
    }
    Ok(())
}

/// Scores of one method on one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMethodScore {
    pub image_id: String,
    pub method: CamMethod,
    pub l2: f64,
    pub lpips: Option<f64>,
    pub cosine: f64,
}

/// Per-method means. `l2` and `lpips` are lower-is-better, `cosine` is
/// higher-is-better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub method: CamMethod,
    pub l2: f64,
    pub lpips: Option<f64>,
    pub cosine: f64,
    pub images: usize,
}

/// The two best methods for one column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoldSet {
    pub members: Vec<CamMethod>,
    /// The cut between second and third place fell inside a tie and was
    /// settled by method name.
    pub tied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// One entry per method, in method-name order.
    pub means: Vec<MethodScore>,
    /// Input rows sorted by image id, then method.
    pub per_image: Vec<ImageMethodScore>,
    pub bold_l2: BoldSet,
    /// `None` when no LPIPS scores were available.
    pub bold_lpips: Option<BoldSet>,
    pub bold_cosine: BoldSet,
}

const BOLD_COUNT: usize = 2;

fn bold(mut ranked: Vec<(CamMethod, f64)>, higher_is_better: bool) -> BoldSet {
    ranked.sort_by(|a, b| {
        let ord = a.1.total_cmp(&b.1);
        let ord = if higher_is_better { ord.reverse() } else { ord };
        ord.then(a.0.cmp(&b.0))
    });
    let tied = ranked.len() > BOLD_COUNT && ranked[BOLD_COUNT - 1].1 == ranked[BOLD_COUNT].1;
    BoldSet {
        members: ranked.iter().take(BOLD_COUNT).map(|r| r.0).collect(),
        tied,
    }
}

/// Averages per-image scores per method (unweighted) and picks the top two
/// methods in each column.
pub fn rank_methods(rows: &[ImageMethodScore]) -> Result<SimilarityReport> {
    let mut per_image = rows.to_vec();
    per_image.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(a.method.cmp(&b.method)));
    if per_image
        .windows(2)
        .any(|w| w[0].image_id == w[1].image_id && w[0].method == w[1].method)
    {
        return Err(invalid("duplicate (image, method) score rows"));
    }

    let mut methods_by_image: BTreeMap<&str, BTreeSet<CamMethod>> = BTreeMap::new();
    for r in &per_image {
        methods_by_image.entry(&r.image_id).or_default().insert(r.method);
    }
    if !methods_by_image
        .values()
        .any(|m| m.len() == CamMethod::ALL.len())
    {
        return Err(Error::InsufficientData(
            "no image has scores for all seven methods".into(),
        ));
    }

    let means: Vec<MethodScore> = CamMethod::ALL
        .into_iter()
        .map(|method| {
            let rows: Vec<&ImageMethodScore> =
                per_image.iter().filter(|r| r.method == method).collect();
            let n = rows.len() as f64;
            let lpips: Vec<f64> = rows.iter().filter_map(|r| r.lpips).collect();
            MethodScore {
                method,
                l2: rows.iter().map(|r| r.l2).sum::<f64>() / n,
                lpips: (!lpips.is_empty()).then(|| lpips.iter().sum::<f64>() / lpips.len() as f64),
                cosine: rows.iter().map(|r| r.cosine).sum::<f64>() / n,
                images: rows.len(),
            }
        })
        .collect();

    let bold_l2 = bold(means.iter().map(|m| (m.method, m.l2)).collect(), false);
    let bold_cosine = bold(means.iter().map(|m| (m.method, m.cosine)).collect(), true);
    let lpips_ranked: Vec<(CamMethod, f64)> = means
        .iter()
        .filter_map(|m| m.lpips.map(|v| (m.method, v)))
        .collect();
    let bold_lpips = (!lpips_ranked.is_empty()).then(|| bold(lpips_ranked, false));

    Ok(SimilarityReport {
        means,
        per_image,
        bold_l2,
        bold_lpips,
        bold_cosine,
    })
}

impl SimilarityReport {
    /// Plain-text table with the columns Model Name, Loss, LPIPS Score and
    /// Cosine Similarity. Bold entries are wrapped in `**`.
    pub fn render_table(&self) -> String {
        let cell = |value: Option<f64>, set: Option<&BoldSet>, method: CamMethod| match value {
            None => "n/a".to_string(),
            Some(v) if set.is_some_and(|s| s.members.contains(&method)) => format!("**{v:.4}**"),
            Some(v) => format!("{v:.4}"),
        };
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} | {:<10} | {:<11} | {:<17}",
            "Model Name", "Loss", "LPIPS Score", "Cosine Similarity"
        );
        let _ = writeln!(out, "{}", "-".repeat(63));
        for m in &self.means {
            let _ = writeln!(
                out,
                "{:<16} | {:<10} | {:<11} | {:<17}",
                m.method.name(),
                cell(Some(m.l2), Some(&self.bold_l2), m.method),
                cell(m.lpips, self.bold_lpips.as_ref(), m.method),
                cell(Some(m.cosine), Some(&self.bold_cosine), m.method),
            );
        }
        let ties: Vec<&str> = [
            ("Loss", Some(&self.bold_l2)),
            ("LPIPS Score", self.bold_lpips.as_ref()),
            ("Cosine Similarity", Some(&self.bold_cosine)),
        ]
        .into_iter()
        .filter(|(_, s)| s.is_some_and(|s| s.tied))
        .map(|(name, _)| name)
        .collect();
        if !ties.is_empty() {
            let _ = writeln!(out, "tied top-2 cut (settled by method name): {}", ties.join(", "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classes::NUM_CLASSES;
    use crate::grid::Grid;

    fn hue(values: Vec<f64>, w: usize, h: usize) -> HueMap {
        HueMap::from_grid(Grid::from_vec(w, h, values).unwrap()).unwrap()
    }

    fn moh_vec(values: &[(usize, f64)]) -> ObjectVector {
        let mut v = vec![None; NUM_CLASSES];
        for &(c, x) in values {
            v[c] = Some(x);
        }
        ObjectVector {
            kind: MetricKind::MohAdjusted,
            values: v,
        }
    }

    #[test]
    fn l2_identity_and_extremes() {
        let a = hue(vec![10.0, 20.0, 30.0, 40.0], 2, 2);
        assert_eq!(l2_rms(&a, &a).unwrap(), 0.0);
        let lo = hue(vec![0.0; 4], 2, 2);
        let hi = hue(vec![150.0; 4], 2, 2);
        assert_eq!(l2_rms(&lo, &hi).unwrap(), 1.0);
        assert!(l2_rms(&lo, &hue(vec![0.0; 6], 3, 2)).is_err());
    }

    #[test]
    fn l2_matches_direct_sum() {
        let a: Vec<f64> = (0..16).map(|i| (i * 9) as f64).collect();
        let b: Vec<f64> = (0..16).map(|i| ((i * 37) % 151) as f64).collect();
        let mut acc = 0.0;
        for i in 0..16 {
            acc += ((a[i] - b[i]) / 150.0).powi(2);
        }
        let expected = (acc / 16.0).sqrt();
        let got = l2_rms(&hue(a, 4, 4), &hue(b, 4, 4)).unwrap();
        assert!((got - expected).abs() < 1e-15);
    }

    #[test]
    fn cosine_basic_cases() {
        let u = moh_vec(&[(1, 10.0), (4, 3.0)]);
        assert!((cosine_element(&u, &u).unwrap().value - 1.0).abs() < 1e-15);
        let v = moh_vec(&[(2, 5.0)]);
        assert_eq!(cosine_element(&u, &v).unwrap().value, 0.0);
        let zero = moh_vec(&[]);
        let c = cosine_element(&u, &zero).unwrap();
        assert!(c.zero_vector);
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn cosine_rejects_other_kinds() {
        let mut u = moh_vec(&[(1, 1.0)]);
        u.kind = MetricKind::Mor;
        assert!(cosine_element(&u, &moh_vec(&[(1, 1.0)])).is_err());
    }

    #[test]
    fn cosine_matches_dot_norm_oracle() {
        let mut s = 11u64;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            (s >> 40) as f64 / (1u64 << 24) as f64 * 150.0
        };
        let a: Vec<f64> = (0..NUM_CLASSES).map(|_| next()).collect();
        let b: Vec<f64> = (0..NUM_CLASSES).map(|_| next()).collect();
        let dot: f64 = (0..NUM_CLASSES).map(|i| a[i] * b[i]).sum();
        let na = (0..NUM_CLASSES).map(|i| a[i] * a[i]).sum::<f64>().sqrt();
        let nb = (0..NUM_CLASSES).map(|i| b[i] * b[i]).sum::<f64>().sqrt();
        let va = moh_vec(&a.iter().copied().enumerate().collect::<Vec<_>>());
        let vb = moh_vec(&b.iter().copied().enumerate().collect::<Vec<_>>());
        let got = cosine_element(&va, &vb).unwrap().value;
        assert!((got - dot / (na * nb)).abs() < 1e-12);
    }

    fn lpips_text(skip: Option<(usize, CamMethod)>) -> String {
        let mut text = String::new();
        for img in 0..2 {
            for m in CamMethod::ALL {
                if skip == Some((img, m)) {
                    continue;
                }
                text.push_str(&format!(
                    "{{\"image_id\":\"img{img}\",\"method\":\"{m}\",\"lpips\":0.{img}{}}}\n",
                    m as u8 + 1
                ));
            }
        }
        text
    }

    #[test]
    fn lpips_full_and_missing() {
        let t = ingest_lpips(lpips_text(None).as_bytes()).unwrap();
        assert_eq!(t.scores.len(), 14);
        assert!(t.missing.is_empty());

        let t = ingest_lpips(lpips_text(Some((1, CamMethod::HiResCAM))).as_bytes()).unwrap();
        assert_eq!(t.scores.len(), 13);
        assert_eq!(t.missing, vec![("img1".to_string(), CamMethod::HiResCAM)]);
        assert_eq!(t.get("img1", CamMethod::HiResCAM), None);
    }

    #[test]
    fn lpips_round_trip() {
        let t = ingest_lpips(lpips_text(None).as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_lpips(&mut buf, &t).unwrap();
        assert_eq!(ingest_lpips(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn lpips_errors() {
        let bad_range = r#"{"image_id":"a","method":"EigenCAM","lpips":1.5}"#;
        assert!(matches!(ingest_lpips(bad_range.as_bytes()), Err(Error::Validation(_))));
        let bad_method = r#"{"image_id":"a","method":"FooCAM","lpips":0.5}"#;
        assert!(matches!(ingest_lpips(bad_method.as_bytes()), Err(Error::Parse { .. })));
        assert!(matches!(ingest_lpips("{not json".as_bytes()), Err(Error::Parse { .. })));
        let dup = format!("{bad}\n{bad}", bad = r#"{"image_id":"a","method":"EigenCAM","lpips":0.5}"#);
        assert!(matches!(ingest_lpips(dup.as_bytes()), Err(Error::Validation(_))));
    }

    fn rows(image: &str, f: impl Fn(CamMethod) -> (f64, Option<f64>, f64)) -> Vec<ImageMethodScore> {
        CamMethod::ALL
            .into_iter()
            .map(|m| {
                let (l2, lpips, cosine) = f(m);
                ImageMethodScore {
                    image_id: image.into(),
                    method: m,
                    l2,
                    lpips,
                    cosine,
                }
            })
            .collect()
    }

    #[test]
    fn dominant_method_is_bold_everywhere() {
        let r = rows("a", |m| {
            if m == CamMethod::HiResCAM {
                (0.1, Some(0.1), 0.9)
            } else {
                (0.5 + m as u8 as f64 * 0.01, Some(0.6), 0.2)
            }
        });
        let rep = rank_methods(&r).unwrap();
        assert!(rep.bold_l2.members.contains(&CamMethod::HiResCAM));
        assert!(rep.bold_lpips.as_ref().unwrap().members.contains(&CamMethod::HiResCAM));
        assert!(rep.bold_cosine.members.contains(&CamMethod::HiResCAM));
    }

    #[test]
    fn identical_scores_tie_break_by_name() {
        let rep = rank_methods(&rows("a", |_| (0.3, None, 0.1))).unwrap();
        let expected = vec![CamMethod::AblationCAM, CamMethod::EigenCAM];
        assert_eq!(rep.bold_l2.members, expected);
        assert_eq!(rep.bold_cosine.members, expected);
        assert!(rep.bold_l2.tied && rep.bold_cosine.tied);
        assert!(rep.bold_lpips.is_none());
        assert!(rep.render_table().contains("n/a"));
        assert!(rep.render_table().contains("tied"));
    }

    #[test]
    fn incomplete_rows_are_insufficient() {
        let mut r = rows("a", |_| (0.3, None, 0.1));
        r.pop();
        assert!(matches!(rank_methods(&r), Err(Error::InsufficientData(_))));
        assert!(matches!(rank_methods(&[]), Err(Error::InsufficientData(_))));
        let mut dup = rows("a", |_| (0.3, None, 0.1));
        dup.push(dup[0].clone());
        assert!(rank_methods(&dup).is_err());
    }

    #[test]
    fn means_are_unweighted_over_images() {
        let mut r = rows("a", |_| (0.2, Some(0.4), 0.5));
        r.extend(rows("b", |_| (0.4, None, 0.7)));
        let rep = rank_methods(&r).unwrap();
        for m in &rep.means {
            assert!((m.l2 - 0.3).abs() < 1e-15);
            assert_eq!(m.lpips, Some(0.4));
            assert!((m.cosine - 0.6).abs() < 1e-15);
            assert_eq!(m.images, 2);
        }
    }

    #[test]
    fn method_names_parse() {
        for m in CamMethod::ALL {
            assert_eq!(m.name().parse::<CamMethod>().unwrap(), m);
        }
        assert!("GradCAM++".parse::<CamMethod>().is_err());
    }
}
