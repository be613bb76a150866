//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use streetgaze::commands::cmd_run;
use streetgaze::manifest::PipelineManifest;
use streetgaze::pipeline::read_metric_tables;
use streetgaze::simulate::{simulate, SimulationConfig};
use streetgaze_core::grouping::{classify, DEFAULT_GROUP_THRESHOLD};
use streetgaze_core::rng::{indexed_substream, StreamRng};
use streetgaze_core::similarity::ImageMethodScore;
use streetgaze_core::stratify::strata_pools;
use streetgaze_core::{
    cdf_normalize, cosine_element, group_images, hue_encode, l2_rms, mean_over_images, mor, morh,
    rank_methods, stratify_by_score, top_k, AttentionAccumulator, AttentionHeatmap, CamMethod,
    ComparisonRecord, DualScore, Grid, Group, HueMap, MetricKind, ObjectVector, SegmentationMap,
    Side, Stratum, NUM_CLASSES, UNLABELED,
};
use streetgaze_service::{
    Demographics, FaultPoint, ManualClock, ServiceError, StudyConfig, SurveyService,
};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:.2?}, limit {limit:?}"))?;
    Ok(took)
}

fn random_hue(rng: &mut impl Rng, w: usize, h: usize) -> HueMap {
    HueMap::from_grid(Grid::from_fn(w, h, |_, _| rng.random_range(0.0..=150.0))).unwrap()
}

fn morh_degeneracy() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for i in 0..50 {
        let mut rng = indexed_substream(1, "acceptance/morh", i);
        let (w, h) = (rng.random_range(8..48), rng.random_range(8..48));
        let classes = rng.random_range(1..=20);
        let palette: Vec<u8> = (0..classes).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect();
        let labels = Grid::from_fn(w, h, |_, _| palette[rng.random_range(0..palette.len())]);
        let seg = SegmentationMap::new(labels).unwrap();
        let hue = random_hue(&mut rng, w, h);
        let r = mor(&seg).map_err(|e| e.to_string())?;
        let rh = morh(&seg, &hue, 150.0).map_err(|e| e.to_string())?;
        for (a, b) in r.dense().iter().zip(rh.dense()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    let took = within(start, Duration::from_secs(5))?;
    Ok(format!("50 fixtures, max deviation {worst:e}, {took:.2?}"))
}

fn ranks_of(values: &[f64]) -> Vec<f64> {
    let acc = AttentionAccumulator::from_grid(Grid::from_vec(64, 64, values.to_vec()).unwrap()).unwrap();
    cdf_normalize(&acc).cells().as_slice().to_vec()
}

fn cdf_contract() -> Outcome {
    let start = Instant::now();
    let mut rng = indexed_substream(2, "acceptance/cdf", 0);
    let mut values: Vec<f64> = Vec::with_capacity(4096);
    let mut seen = BTreeSet::new();
    while values.len() < 4096 {
        let v: f64 = rng.random_range(0.0..10.0);
        if seen.insert(v.to_bits()) {
            values.push(v);
        }
    }
    let out = ranks_of(&values);
    let mut sorted = out.clone();
    sorted.sort_by(f64::total_cmp);
    let exact = sorted.iter().enumerate().all(|(k, &a)| a == (k + 1) as f64 / 4096.0);
    ensure(exact, || "sorted outputs are not exactly k/4096".into())?;
    for (name, f) in [("2x+1", (|x: f64| 2.0 * x + 1.0) as fn(f64) -> f64), ("x^3", |x: f64| x * x * x)] {
        let mapped: Vec<f64> = values.iter().map(|&x| f(x)).collect();
        ensure(ranks_of(&mapped) == out, || format!("ranks change under {name}"))?;
    }
    let took = within(start, Duration::from_secs(1))?;
    Ok(format!("4096 distinct cells, invariant under 2x+1 and x^3, {took:.2?}"))
}

fn hue_endpoints() -> Outcome {
    let encode = |a: f64| {
        let h = AttentionHeatmap::from_grid(Grid::from_vec(1, 1, vec![a]).unwrap()).unwrap();
        *hue_encode(&h).cells().get(0, 0)
    };
    ensure(encode(1.0) == 0.0, || format!("a=1 gives {}", encode(1.0)))?;
    ensure(encode(0.0) == 150.0, || format!("a=0 gives {}", encode(0.0)))?;
    let grid: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
    let h = AttentionHeatmap::from_grid(Grid::from_vec(1000, 1, grid).unwrap()).unwrap();
    let hues = hue_encode(&h).cells().as_slice().to_vec();
    ensure(hues.windows(2).all(|w| w[1] < w[0]), || "not strictly decreasing".into())?;
    Ok("a=1 -> 0, a=0 -> 150, strictly monotone on 1000 points".into())
}

fn mor_conservation() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let mut rng = indexed_substream(3, "acceptance/mor", i);
        let (w, h) = (rng.random_range(1..64), rng.random_range(1..64));
        let p_unlabeled: f64 = rng.random_range(0.0..0.5);
        let labels = Grid::from_fn(w, h, |_, _| {
            if rng.random_bool(p_unlabeled) {
                UNLABELED
            } else {
                rng.random_range(0..NUM_CLASSES as u8)
            }
        });
        let seg = SegmentationMap::new(labels).unwrap();
        let total: f64 = mor(&seg).map_err(|e| e.to_string())?.dense().iter().sum::<f64>() + seg.unlabeled_fraction();
        worst = worst.max((total - 1.0).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("100 fixtures, max deviation {worst:e}"))
}

fn grouping_truth_table() -> Outcome {
    let t = DEFAULT_GROUP_THRESHOLD;
    ensure(t == 3, || format!("default threshold is {t}"))?;
    let table = [
        ((3, 0), Group::Safe),
        ((0, 3), Group::Unsafe),
        ((4, 4), Group::Ambiguous),
        ((2, 2), Group::Ambiguous),
    ];
    let mut records = Vec::new();
    for (i, ((wins, losses), _)) in table.iter().enumerate() {
        let id = format!("x{i}");
        let mut n = 0;
        let mut push = |won: bool| {
            n += 1;
            records.push(ComparisonRecord {
                pair_id: format!("{id}-{n:02}"),
                left_image: id.clone(),
                right_image: format!("filler{i}-{n}"),
                chosen: if won { Side::Left } else { Side::Right },
                session_id: "s".into(),
                t_ms: n,
            });
        };
        (0..*wins).for_each(|_| push(true));
        (0..*losses).for_each(|_| push(false));
    }
    let labels: BTreeMap<String, Group> = group_images(&records, t).into_iter().map(|l| (l.image_id, l.group)).collect();
    for (i, ((wins, losses), expected)) in table.iter().enumerate() {
        let got = labels[&format!("x{i}")];
        ensure(got == *expected && classify(*wins, *losses, t) == *expected, || {
            format!("({wins},{losses}) gave {got:?}, expected {expected:?}")
        })?;
    }
    Ok("(3,0) safe, (0,3) unsafe, (4,4) ambiguous, (2,2) ambiguous".into())
}

fn similarity_bounds() -> Outcome {
    let mut worst_tri = f64::NEG_INFINITY;
    for i in 0..200 {
        let mut rng = indexed_substream(4, "acceptance/l2", i);
        let (w, h) = (rng.random_range(1..24), rng.random_range(1..24));
        let [x, y, z] = [0, 1, 2].map(|_| random_hue(&mut rng, w, h));
        let d = |a: &HueMap, b: &HueMap| l2_rms(a, b).unwrap();
        ensure(d(&x, &x) == 0.0, || "l2(x,x) != 0".into())?;
        for v in [d(&x, &y), d(&y, &z), d(&x, &z)] {
            ensure((0.0..=1.0).contains(&v), || format!("l2 {v} outside [0,1]"))?;
        }
        ensure((d(&x, &y) - d(&y, &x)).abs() <= 1e-9, || "asymmetric".into())?;
        let excess = d(&x, &z) - (d(&x, &y) + d(&y, &z));
        worst_tri = worst_tri.max(excess);
        ensure(excess <= 1e-9, || format!("triangle violated by {excess:e}"))?;
    }
    let mut worst_cos = 0.0f64;
    for i in 0..200 {
        let mut rng = indexed_substream(4, "acceptance/cos", i);
        let mk = |rng: &mut StreamRng, scale: f64| -> Vec<Option<f64>> {
            (0..NUM_CLASSES)
                .map(|_| rng.random_bool(0.3).then(|| scale * rng.random_range(0.0..150.0)))
                .collect()
        };
        let u = mk(&mut rng, 1.0);
        let v = mk(&mut rng, 1.0);
        let vec_of = |vals: Vec<Option<f64>>| ObjectVector {
            kind: MetricKind::MohAdjusted,
            values: vals,
        };
        let scaled = |vals: &[Option<f64>], k: f64| vals.iter().map(|x| x.map(|x| k * x)).collect::<Vec<_>>();
        let base = cosine_element(&vec_of(u.clone()), &vec_of(v.clone())).unwrap().value;
        let s = cosine_element(&vec_of(scaled(&u, 3.0)), &vec_of(scaled(&v, 7.0))).unwrap().value;
        worst_cos = worst_cos.max((base - s).abs());
    }
    ensure(worst_cos <= 1e-12, || format!("cosine scale deviation {worst_cos:e}"))?;
    Ok(format!(
        "200 triples, max triangle excess {worst_tri:e}; cosine(3u,7v) deviation {worst_cos:e}"
    ))
}

fn table_one_bold_sets() -> Outcome {
    use CamMethod::*;
    let published = [
        (AblationCAM, 0.4232, 0.5855, 0.0132),
        (EigenCAM, 0.3512, 0.5478, 0.0143),
        (GradCAM, 0.4357, 0.5896, 0.0130),
        (GradCAMPlusPlus, 0.4998, 0.5891, 0.0100),
        (HiResCAM, 0.4386, 0.5688, 0.0127),
        (ScoreCAM, 0.4631, 0.5806, 0.0100),
        (XGradCAM, 0.3285, 0.5739, 0.0161),
    ];
    let rows: Vec<ImageMethodScore> = published
        .iter()
        .map(|&(method, l2, lpips, cosine)| ImageMethodScore {
            image_id: "means".into(),
            method,
            l2,
            lpips: Some(lpips),
            cosine,
        })
        .collect();
    let report = rank_methods(&rows).map_err(|e| e.to_string())?;
    let set = |v: &[CamMethod]| v.iter().copied().collect::<BTreeSet<_>>();
    let lpips = report.bold_lpips.as_ref().ok_or("no LPIPS bold set")?;
    let checks = [
        ("loss", set(&report.bold_l2.members), set(&[XGradCAM, EigenCAM])),
        ("LPIPS", set(&lpips.members), set(&[EigenCAM, HiResCAM])),
        ("cosine", set(&report.bold_cosine.members), set(&[XGradCAM, EigenCAM])),
    ];
    for (name, got, want) in checks {
        ensure(got == want, || format!("{name} bold set {got:?}, expected {want:?}"))?;
    }
    Ok("loss {XGradCAM, EigenCAM}, LPIPS {EigenCAM, HiResCAM}, cosine {XGradCAM, EigenCAM}".into())
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/sim.toml");
    let cfg = SimulationConfig::load(&fixture).map_err(|e| e.to_string())?;
    ensure(cfg.images == 8 && cfg.participants == 5, || "fixture is not 8 images x 5 participants".into())?;
    ensure(cfg.bias_classes().unwrap().contains_key(&20), || "fixture has no class-20 bias".into())?;
    let mut bundles = Vec::new();
    let mut manifests = Vec::new();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let summary = simulate(&cfg, dir.path()).map_err(|e| e.to_string())?;
        let m = PipelineManifest::load(&summary.manifest).map_err(|e| e.to_string())?;
        cmd_run(&m).map_err(|e| e.to_string())?;
        bundles.push(files_under(dir.path()));
        manifests.push(m);
    }
    ensure(bundles[0] == bundles[1], || {
        let differing: Vec<_> = bundles[0]
            .iter()
            .filter(|(k, v)| bundles[1].get(*k) != Some(v))
            .map(|(k, _)| k.display().to_string())
            .collect();
        format!("bundles differ: {differing:?}")
    })?;
    let tables = read_metric_tables(&manifests[0]).map_err(|e| e.to_string())?;
    let (_, moh_rows) = tables
        .iter()
        .find(|(k, _)| *k == MetricKind::MohAdjusted)
        .ok_or("no MoH table")?;
    let vectors: Vec<ObjectVector> = moh_rows.iter().map(|(_, v)| v.clone()).collect();
    let top = top_k(&mean_over_images(&vectors).map_err(|e| e.to_string())?, 10);
    ensure(top.first().map(|o| o.class_index) == Some(20), || {
        format!("top of MoH is {:?}", top.first().map(|o| o.class_name))
    })?;
    let took = within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{} files byte-identical across two runs; class 20 ({}) ranks first, {took:.2?}",
        bundles[0].len(),
        top[0].class_name
    ))
}

fn service_durability_and_balance() -> Outcome {
    let start = Instant::now();
    let images = |n: usize, seed: u64| {
        StudyConfig::from_ids((0..n).map(|i| (format!("img{i:03}"), Stratum::Medium)), seed).unwrap()
    };
    let demo = || Demographics {
        age_band: "25-34".into(),
        gender: None,
    };

    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::at(0));
    let mut acked = Vec::new();
    let mut in_flight = None;
    {
        let mut svc = SurveyService::open(images(40, 9), dir.path(), 16, clock.clone()).map_err(|e| e.to_string())?;
        'outer: for s in 0..6 {
            let sid = svc.create_session(demo()).map_err(|e| e.to_string())?.session_id;
            for k in 0..10 {
                let pair = svc.next_pair(&sid).map_err(|e| e.to_string())?;
                if s == 4 && k == 3 {
                    svc.set_fault(FaultPoint::AfterAppend);
                    in_flight = Some(pair.pair_id.clone());
                    match svc.record_choice(&sid, &pair.pair_id, Side::Left) {
                        Err(ServiceError::Crashed) => break 'outer,
                        other => return Err(format!("expected a crash, got {other:?}")),
                    }
                }
                acked.push(svc.record_choice(&sid, &pair.pair_id, Side::Right).map_err(|e| e.to_string())?);
                clock.advance(1000);
            }
        }
    }
    let svc = SurveyService::open(images(40, 9), dir.path(), 16, clock).map_err(|e| e.to_string())?;
    let stored: BTreeMap<&str, &ComparisonRecord> =
        svc.state().choices.values().map(|c| (c.pair_id.as_str(), c)).collect();
    let lost = acked.iter().filter(|r| stored.get(r.pair_id.as_str()) != Some(r)).count();
    ensure(lost == 0, || format!("{lost} acknowledged choices lost"))?;
    let appended = in_flight.as_deref().is_some_and(|p| stored.contains_key(p));

    let mut svc = SurveyService::in_memory(images(300, 11), Arc::new(ManualClock::at(0)));
    for _ in 0..127 {
        let sid = svc.create_session(demo()).map_err(|e| e.to_string())?.session_id;
        for _ in 0..10 {
            let pair = svc.next_pair(&sid).map_err(|e| e.to_string())?;
            svc.record_choice(&sid, &pair.pair_id, Side::Left).map_err(|e| e.to_string())?;
        }
    }
    let stats = svc.exposure_stats();
    let spread = stats.max - stats.min;
    ensure(spread <= 2, || format!("exposure spread {spread}"))?;
    let took = within(start, Duration::from_secs(30))?;
    Ok(format!(
        "{} acknowledged choices survive the crash (in-flight choice {}); 127x10 over 300 images spread {spread}, {took:.2?}",
        acked.len(),
        if appended { "recovered" } else { "absent" }
    ))
}

/// Membership by percentile rank, computed from sorted score lists.
fn oracle_band(sorted: &[f64], x: f64) -> Option<Stratum> {
    let n = sorted.len() as f64;
    let below = sorted.partition_point(|&v| v < x) as f64 / n;
    let at_or_below = sorted.partition_point(|&v| v <= x) as f64 / n;
    if below >= 0.8 {
        Some(Stratum::High)
    } else if at_or_below <= 0.2 {
        Some(Stratum::Low)
    } else if below >= 0.4 && at_or_below <= 0.6 {
        Some(Stratum::Medium)
    } else {
        None
    }
}

fn oracle_pools(scores: &[DualScore]) -> BTreeMap<Stratum, Vec<String>> {
    let sorted = |f: fn(&DualScore) -> f64| {
        let mut v: Vec<f64> = scores.iter().map(f).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let (g, s) = (sorted(|d| d.global), sorted(|d| d.sweden));
    let mut pools: BTreeMap<Stratum, Vec<String>> = BTreeMap::new();
    for d in scores {
        let a = oracle_band(&g, d.global);
        if let Some(stratum) = a.filter(|_| a == oracle_band(&s, d.sweden)) {
            pools.entry(stratum).or_default().push(d.image_id.clone());
        }
    }
    pools.values_mut().for_each(|v| v.sort());
    pools
}

fn stratification() -> Outcome {
    let mut rng = indexed_substream(5, "acceptance/stratify", 0);
    let scores: Vec<DualScore> = (0..1000)
        .map(|i| {
            let global: f64 = rng.random_range(1.0..9.0);
            let sweden = (global + rng.random_range(-1.0..1.0)).clamp(1.0, 9.0);
            let round = |x: f64| if i % 3 == 0 { (x * 10.0).round() / 10.0 } else { x };
            DualScore {
                image_id: format!("img{i:04}"),
                global: round(global),
                sweden: round(sweden),
            }
        })
        .collect();
    let oracle = oracle_pools(&scores);
    let per_stratum = 20;
    let s = stratify_by_score(&scores, per_stratum, 17).map_err(|e| e.to_string())?;
    for stratum in [Stratum::High, Stratum::Medium, Stratum::Low] {
        let mut got = s.pools.get(stratum).to_vec();
        got.sort();
        let want = oracle.get(&stratum).cloned().unwrap_or_default();
        ensure(got == want, || format!("{stratum:?} pool: {} vs oracle {}", got.len(), want.len()))?;
    }
    for (stratum, picked) in [(Stratum::High, &s.high), (Stratum::Medium, &s.medium), (Stratum::Low, &s.low)] {
        ensure(picked.len() == per_stratum, || format!("{stratum:?} sample size {}", picked.len()))?;
        ensure(picked.iter().all(|id| oracle[&stratum].contains(id)), || format!("{stratum:?} sample outside pool"))?;
    }

    let cube = |f: &dyn Fn(f64) -> f64| -> Vec<DualScore> {
        scores
            .iter()
            .map(|d| DualScore {
                image_id: d.image_id.clone(),
                global: f(d.global),
                sweden: f(d.sweden),
            })
            .collect()
    };
    let cubed = strata_pools(&cube(&|x| x * x * x)).map_err(|e| e.to_string())?;
    ensure(cubed == s.pools, || "pools change under x^3".into())?;
    ensure(oracle_pools(&cube(&|x| x * x * x)) == oracle, || "oracle changes under x^3".into())?;
    let squashed = stratify_by_score(&cube(&|x| 1.0 + (x - 1.0).powi(3) / 64.0), per_stratum, 17).map_err(|e| e.to_string())?;
    ensure(squashed == s, || "selection changes under a monotone rescaling".into())?;
    Ok(format!(
        "1000 dual scores: pools high {}, medium {}, low {} match the oracle; invariant under x^3",
        s.pools.high.len(),
        s.pools.medium.len(),
        s.pools.low.len()
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("MoRH degeneracy at threshold 150", morh_degeneracy),
        ("CDF normalization contract", cdf_contract),
        ("hue endpoints and monotonicity", hue_endpoints),
        ("MoR conservation", mor_conservation),
        ("grouping truth table", grouping_truth_table),
        ("similarity bounds and metric properties", similarity_bounds),
        ("published method means give the expected bold sets", table_one_bold_sets),
        ("end-to-end determinism and class-20 bias", end_to_end),
        ("service durability and exposure balance", service_durability_and_balance),
        ("stratification against a percentile oracle", stratification),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    let _ = panic::take_hook();
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
