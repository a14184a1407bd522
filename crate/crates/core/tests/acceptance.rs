//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! The end-to-end experiment trains two 30-epoch models twice, so this target
//! takes several minutes in release-level optimization.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use grounding::evaluation::{
    average_precision, iou, pointing_game, random_baseline, segmentation_map, PointingResult, SegmentationResult,
    Threshold, TieBreak, IOU_THRESHOLDS,
};
use grounding::gradsuite::{format_table, full_suite, TOLERANCE};
use grounding::losses::{loss_pc, loss_sib};
use grounding::model::Model;
use grounding::parse::{build_grounding_tree, parse_sexpr, GroundingOptions};
use grounding::raster::BinaryMask;
use grounding::scenes::{generate_scenes, read_dataset, write_dataset, SceneSample, SceneSpec};
use grounding::training::{train, Ablation, TrainConfig, TrainOutputs, TrainingSet};
use grounding::Tensor;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let rows = match full_suite(100, 1) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    print!("{}", format_table(&rows));
    let worst = rows.iter().map(|r| r.max_error).fold(0.0, f64::max);
    let ok = rows.iter().all(|r| r.passed() && r.trials >= 100) && secs <= 120.0;
    verdict(ok, format!("{} checks x 100 trials, worst rel err {worst:.2e} (limit {TOLERANCE:e}), {secs:.1}s", rows.len()))
}

// Straight per-pixel loops, independent of the tape.
fn pc_reference(parent: &[f64], children: &[Vec<f64>], count: usize) -> f64 {
    let mut s = 0.0;
    for p in 0..parent.len() {
        let mut m = f64::NEG_INFINITY;
        for c in children {
            m = m.max(c[p]);
        }
        s += (parent[p] - m) * (parent[p] - m);
    }
    s / count as f64
}

fn sib_reference(sets: &[Vec<Vec<f64>>], count: usize) -> f64 {
    let mut s = 0.0;
    for set in sets.iter().filter(|s| s.len() > 1) {
        for p in 0..set[0].len() {
            let sum: f64 = set.iter().map(|m| m[p]).sum();
            if sum == 0.0 {
                continue;
            }
            let max = set.iter().map(|m| m[p]).fold(f64::NEG_INFINITY, f64::max);
            let w = sum / set.len() as f64;
            s += w * (max.ln() - sum.ln());
        }
    }
    -s / count as f64
}

fn random_mask(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..64).map(|_| if rng.gen_bool(0.05) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect()
}

fn tensor(v: &[f64]) -> Tensor {
    Tensor::new(vec![8, 8], v.to_vec()).unwrap()
}

fn loss_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let count = rng.gen_range(1..4);
        let parent = random_mask(&mut rng);
        let children: Vec<Vec<f64>> = (0..rng.gen_range(1..5)).map(|_| random_mask(&mut rng)).collect();
        let ct: Vec<Tensor> = children.iter().map(|c| tensor(c)).collect();
        let got = loss_pc(&tensor(&parent), &ct.iter().collect::<Vec<_>>(), count).unwrap();
        worst = worst.max((got - pc_reference(&parent, &children, count)).abs());

        let sets: Vec<Vec<Vec<f64>>> = (0..rng.gen_range(1..4))
            .map(|_| (0..rng.gen_range(1..5)).map(|_| random_mask(&mut rng)).collect())
            .collect();
        let st: Vec<Vec<Tensor>> = sets.iter().map(|s| s.iter().map(|m| tensor(m)).collect()).collect();
        let refs: Vec<Vec<&Tensor>> = st.iter().map(|s| s.iter().collect()).collect();
        let got = loss_sib(&refs, count).unwrap();
        worst = worst.max((got - sib_reference(&sets, count)).abs());
    }

    let (a, b) = (random_mask(&mut rng), random_mask(&mut rng));
    let union: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect();
    let pc_zero = loss_pc(&tensor(&union), &[&tensor(&a), &tensor(&b)], 1).unwrap();
    let single = tensor(&a);
    let sib_zero = loss_sib(&[vec![&single], vec![&single]], 2).unwrap();
    let ok = worst <= 1e-10 && pc_zero == 0.0 && sib_zero == 0.0;
    verdict(ok, format!("1000 instances, max |vectorized - scalar| {worst:.1e}; zero cases {pc_zero}, {sib_zero}"))
}

const CAPTION: &str = "(S (NP (NP (DT A) (JJ grey) (NN cat)) (VP (VBG staring) (PP (IN at) \
    (NP (NP (DT a) (NN hand)) (PP (IN with) (NP (DT a) (NN donut)))))) (PP (IN on) (NP (PRP it)))))";

fn constraint_fixture() -> Verdict {
    let tree = parse_sexpr(CAPTION).unwrap();
    let g = build_grounding_tree(tree, &GroundingOptions::default());
    let text = |i: usize| g.phrase_text(i).unwrap().to_lowercase();

    let pc = g.pc_pairs().iter().any(|p| {
        text(p.parent) == "a hand with a donut"
            && p.children.iter().map(|&c| text(c)).collect::<Vec<_>>() == ["a hand", "with a donut"]
    });
    let sib = g.sibling_sets().iter().any(|s| {
        let m: Vec<String> = s.members.iter().map(|&c| text(c)).collect();
        m.len() == 2 && m[0] == "a grey cat" && m[1].starts_with("staring")
    });
    let src = g.source();
    let leaves = src.leaves();
    let mut bad = Vec::new();
    for &v in g.valid_nodes() {
        let (s, e) = g.span(v);
        let has_noun = leaves[s..e].iter().any(|&l| src.nodes()[l].label.starts_with("NN"));
        let t = text(v);
        if !has_noun || ["with", "on it", "on", "it", "at"].contains(&t.as_str()) {
            bad.push(t);
        }
    }
    let ok = pc && sib && bad.is_empty();
    verdict(ok, format!("pc-pair found: {pc}, sibling set found: {sib}, invalid nodes accepted: {bad:?}"))
}

fn evaluation_exactness() -> Verdict {
    let preds = [(0.9, 0.6), (0.7, 0.45), (0.5, 0.2)];
    let aps: Vec<f64> = IOU_THRESHOLDS.iter().map(|&t| average_precision(&preds, t)).collect();
    let mut cats = BTreeMap::new();
    cats.insert("hand".to_string(), Some(preds.to_vec()));
    let seg = SegmentationResult::from_predictions(&cats, &IOU_THRESHOLDS);
    let acc = PointingResult::from_counts(244, 756).accuracy();
    let bm = |bits: [u8; 4]| BinaryMask::new(2, 2, bits.iter().map(|&b| b == 1).collect()).unwrap();
    let (full, left, right) = (bm([1, 1, 1, 1]), bm([1, 0, 1, 0]), bm([0, 1, 0, 1]));
    let ious = [iou(&full, &full).unwrap(), iou(&left, &right).unwrap(), iou(&left, &full).unwrap()];
    let ok = aps == [1.0, 1.0, 1.0] && seg.avg_map == 1.0 && acc == 0.244 && ious == [1.0, 0.0, 0.5];
    verdict(ok, format!("AP@0.3/0.4/0.5 {aps:?}, mAP {}, 244/1000 -> {acc}, IOU {ious:?}", seg.avg_map))
}

struct RunResult {
    baseline: f64,
    accuracy: BTreeMap<Ablation, f64>,
    model_bytes: BTreeMap<Ablation, Vec<u8>>,
    metrics: BTreeMap<Ablation, String>,
    full_model: Option<Model>,
    test: Vec<SceneSample>,
    secs: f64,
}

/// Generate, write and reload the data, then train and evaluate both ablations.
fn experiment(dir: &Path) -> grounding::Result<RunResult> {
    let start = Instant::now();
    let spec = SceneSpec { image_size: 80, ..Default::default() };
    write_dataset(&generate_scenes(7, 0..500, &spec)?, &dir.join("train"))?;
    write_dataset(&generate_scenes(7, 500..600, &spec)?, &dir.join("test"))?;
    let train_scenes = read_dataset(&dir.join("train"))?;
    let test = read_dataset(&dir.join("test"))?;

    let mut r = RunResult {
        baseline: random_baseline(&test),
        accuracy: BTreeMap::new(),
        model_bytes: BTreeMap::new(),
        metrics: BTreeMap::new(),
        full_model: None,
        test: Vec::new(),
        secs: 0.0,
    };
    for ablation in [Ablation::Full, Ablation::Disc] {
        let mut config = TrainConfig { epochs: 30, ablation, ..Default::default() };
        config.hyper.lambda_pc = 0.01;
        config.hyper.lambda_sib = 0.0001;
        config.hyper.seed = 7;
        let set = TrainingSet::from_scenes(&train_scenes, ablation, &GroundingOptions::default())?;
        let path = dir.join(format!("{ablation}.grnd"));
        train(&config, &set, &TrainOutputs { model: Some(path.clone()), ..Default::default() }, None)?;
        let model = Model::load(&path)?;
        let pointing = pointing_game(&model, &test, TieBreak::Lowest)?;
        let seg = segmentation_map(&model, &test, &IOU_THRESHOLDS, Threshold::Midpoint)?;
        r.accuracy.insert(ablation, pointing.accuracy());
        r.metrics.insert(ablation, format!("{}{}", pointing.to_json(), seg.to_json()));
        r.model_bytes.insert(ablation, fs::read(&path).map_err(|e| grounding::Error::Invalid(e.to_string()))?);
        if ablation == Ablation::Full {
            r.full_model = Some(model);
        }
    }
    r.test = test;
    r.secs = start.elapsed().as_secs_f64();
    Ok(r)
}

fn end_to_end(r: &RunResult) -> Verdict {
    let (full, disc) = (r.accuracy[&Ablation::Full], r.accuracy[&Ablation::Disc]);
    let a = full >= 0.80;
    let b = full - disc >= 0.03;
    let c = full > r.baseline && disc > r.baseline;
    let d = r.secs <= 900.0;
    verdict(
        a && b && c && d,
        format!(
            "full {full:.3} (>= 0.80: {a}), disc {disc:.3} (gap {:+.3}, >= 0.03: {b}), random {:.3} (both above: {c}), {:.0}s (<= 900: {d})",
            full - disc,
            r.baseline,
            r.secs
        ),
    )
}

fn determinism(a: &RunResult, b: &RunResult) -> Verdict {
    let models = a.model_bytes == b.model_bytes;
    let metrics = a.metrics == b.metrics;
    verdict(models && metrics, format!("model files identical: {models}, JSON metrics identical: {metrics}"))
}

/// Mean of `values` over the grid cells an object covers.
fn region_mean(values: &Tensor, region: &BinaryMask) -> f64 {
    let (sum, n) = values
        .data()
        .iter()
        .zip(region.bits())
        .filter(|(_, &b)| b)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    sum / n.max(1) as f64
}

fn mask_distinctness(model: &Model, test: &[SceneSample]) -> Verdict {
    let delta = model.config().delta;
    let (mut wins, mut total) = (0, 0);
    for s in &test[..20] {
        let prepared = model.prepare_image(&s.image).unwrap();
        let regions: Vec<BinaryMask> = s.objects.iter().map(|o| o.mask.max_pool(delta).unwrap()).collect();
        for (i, o) in s.objects.iter().enumerate() {
            let mask = prepared.mask(&model.encode_phrase(&o.phrase()).unwrap()).unwrap();
            let own = region_mean(mask.values(), &regions[i]);
            let other = (0..s.objects.len())
                .filter(|&j| j != i)
                .map(|j| region_mean(mask.values(), &regions[j]))
                .fold(f64::NEG_INFINITY, f64::max);
            wins += (own > other) as usize;
            total += 1;
        }
    }
    let frac = wins as f64 / total as f64;
    verdict(frac >= 0.85, format!("{wins}/{total} phrase masks favour their own object ({frac:.3}, need >= 0.85)"))
}

fn main() {
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    results.push((1, "gradient suite", gradient_suite()));
    results.push((2, "loss oracles", loss_oracles()));
    results.push((3, "constraint extraction fixture", constraint_fixture()));

    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<grounding::Result<RunResult>> = dirs.iter().map(|d| experiment(d.path())).collect();
    match (&runs[0], &runs[1]) {
        (Ok(a), Ok(b)) => {
            results.push((4, "end-to-end synthetic experiment", end_to_end(a)));
            results.push((5, "evaluation harness exactness", evaluation_exactness()));
            results.push((6, "determinism", determinism(a, b)));
            results.push((7, "mask distinctness", mask_distinctness(a.full_model.as_ref().unwrap(), &a.test)));
        }
        (a, b) => {
            let err = a.as_ref().err().or(b.as_ref().err()).map(|e| e.to_string()).unwrap_or_default();
            results.push((4, "end-to-end synthetic experiment", verdict(false, format!("run failed: {err}"))));
            results.push((5, "evaluation harness exactness", evaluation_exactness()));
            results.push((6, "determinism", verdict(false, "run failed")));
            results.push((7, "mask distinctness", verdict(false, "run failed")));
        }
    }
    results.sort_by_key(|r| r.0);

    println!();
    for (id, name, v) in &results {
        println!("criterion {id} [{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if results.iter().any(|r| !r.2.pass) {
        std::process::exit(1);
    }
}
