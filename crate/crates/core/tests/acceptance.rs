//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Set `EATR_ACCEPTANCE=1,4,7` to run a subset and `EATR_ACCEPTANCE_STRICT=1`
//! to exit non-zero when a criterion fails.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use eatr_core::assignment::{hungarian, CostMatrix};
use eatr_core::autograd::Graph;
use eatr_core::data::{load_all, synthesize, write_feature_matrix, GroundingSample, SyntheticConfig};
use eatr_core::event_reasoning::event_reasoning;
use eatr_core::geometry::{generalized_temporal_iou, MomentSpan};
use eatr_core::metrics::{default_map_thresholds, mean_ap, recall1_at_iou, RankedPredictions};
use eatr_core::model::{predict, ModelConfig, ModelState, QuerySource};
use eatr_core::pseudo_events::{
    boundary_indices, boundary_scores, extract_events, pseudo_boundaries, TsMatrix, CONTRASTIVE_KERNEL,
};
use eatr_core::tensor::Matrix;
use eatr_core::training::{sample_objective, train, EpochRecord, Profile, TrainConfig, TrainOptions};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Criterion = (usize, &'static str, fn(&mut DeskRuns) -> Outcome);

fn main() {
    let selected: Option<Vec<usize>> = std::env::var("EATR_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| selected.as_ref().is_none_or(|s| s.contains(&n));

    let criteria: [Criterion; 10] = [
        (1, "matcher optimality", |_| matcher_optimality()),
        (2, "geometry properties", |_| geometry_properties()),
        (3, "pseudo-event fixture", |_| pseudo_event_fixture()),
        (4, "gradient correctness", |_| gradient_correctness()),
        (5, "slot equivariance", |_| slot_equivariance()),
        (6, "metrics oracle", |_| metrics_oracle()),
        (7, "synthetic convergence", synthetic_convergence),
        (8, "ablation direction", ablation_direction),
        (9, "convergence speed", convergence_speed),
        (10, "real-feature ingestion", |_| real_feature_ingestion()),
    ];

    let mut runs = DeskRuns::default();
    let (mut ran, mut failed) = (0, 0);
    for (n, name, check) in criteria {
        if !wanted(n) {
            continue;
        }
        ran += 1;
        let started = Instant::now();
        let outcome = check(&mut runs);
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!outcome.pass);
        println!(
            "criterion {n:>2} {verdict} {name}: {} ({:.1}s)",
            outcome.detail,
            started.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 && std::env::var("EATR_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. Matcher optimality

/// Minimum over all injective maps of the smaller side into the larger one,
/// summed in row order.
fn brute_force_min(cost: &CostMatrix) -> f64 {
    let (r, c) = (cost.rows(), cost.cols());
    let k = r.min(c);
    let larger = r.max(c);
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(k);
    let mut used = vec![false; larger];
    fn recurse(cost: &CostMatrix, k: usize, chosen: &mut Vec<usize>, used: &mut [bool], best: &mut f64) {
        if chosen.len() == k {
            let mut pairs: Vec<(usize, usize)> = if cost.rows() <= cost.cols() {
                chosen.iter().enumerate().map(|(i, &j)| (i, j)).collect()
            } else {
                chosen.iter().enumerate().map(|(i, &j)| (j, i)).collect()
            };
            pairs.sort_unstable();
            let total: f64 = pairs.iter().map(|&(a, b)| cost.get(a, b)).sum();
            if total < *best {
                *best = total;
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                chosen.push(j);
                recurse(cost, k, chosen, used, best);
                chosen.pop();
                used[j] = false;
            }
        }
    }
    recurse(cost, k, &mut chosen, &mut used, &mut best);
    best
}

fn matcher_optimality() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked = 0;
    for rows in 1..=6 {
        for cols in 1..=6 {
            for trial in 0..1000 {
                // Half of the matrices use small integers, which produce ties.
                let cost = if trial % 2 == 0 {
                    CostMatrix::from_fn(rows, cols, |_, _| rng.random_range(-5.0..5.0))
                } else {
                    CostMatrix::from_fn(rows, cols, |_, _| rng.random_range(0..4) as f64)
                };
                let got = match hungarian(&cost) {
                    Ok(a) => a,
                    Err(e) => return Outcome::new(false, format!("{rows}x{cols}: {e}")),
                };
                let want = brute_force_min(&cost);
                let mut rows_seen = vec![false; rows];
                let mut cols_seen = vec![false; cols];
                for &(r, c) in &got.pairs {
                    if rows_seen[r] || cols_seen[c] {
                        return Outcome::new(false, format!("{rows}x{cols}: pairs not one-to-one"));
                    }
                    rows_seen[r] = true;
                    cols_seen[c] = true;
                }
                if got.pairs.len() != rows.min(cols) || got.total_cost != want {
                    return Outcome::new(
                        false,
                        format!("{rows}x{cols}: total {} vs brute force {want}", got.total_cost),
                    );
                }
                checked += 1;
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        secs < 10.0,
        format!("{checked} matrices over 36 shapes equal brute force exactly in {secs:.2}s (limit 10s)"),
    )
}

// ---------------------------------------------------------------------------
// 2. Geometry

fn geometry_properties() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let random_span = |rng: &mut ChaCha8Rng| loop {
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (s, e) = (a.min(b), a.max(b));
        if e - s > 1e-6 {
            return MomentSpan::from_interval(s, e).expect("valid interval");
        }
    };
    for i in 0..10_000 {
        let (a, b) = (random_span(&mut rng), random_span(&mut rng));
        let ab = generalized_temporal_iou(&a, &b);
        let ba = generalized_temporal_iou(&b, &a);
        let ok = ab.giou <= ab.iou
            && ab.giou > -1.0
            && ab.giou <= 1.0
            && (ab.giou - ba.giou).abs() <= 1e-9
            && (ab.iou - ba.iou).abs() <= 1e-9;
        if !ok {
            return Outcome::new(false, format!("pair {i}: {a:?} {b:?} gives {ab:?} / {ba:?}"));
        }
    }
    let examples = [
        ((0.5, 0.2), (0.5, 0.2), 1.0, 1.0),
        ((0.1, 0.2), (0.9, 0.2), 0.0, -0.6),
        ((0.4, 0.4), (0.6, 0.4), 1.0 / 3.0, 1.0 / 3.0),
    ];
    for (a, b, iou, giou) in examples {
        let a = MomentSpan::new(a.0, a.1).expect("valid");
        let b = MomentSpan::new(b.0, b.1).expect("valid");
        let o = generalized_temporal_iou(&a, &b);
        if (o.iou - iou).abs() > 1e-9 || (o.giou - giou).abs() > 1e-9 {
            return Outcome::new(false, format!("worked example {a:?} {b:?}: {o:?}"));
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        secs < 5.0,
        format!("10000 random pairs and 3 worked examples hold in {secs:.2}s (limit 5s)"),
    )
}

// ---------------------------------------------------------------------------
// 3. Pseudo events

fn planted_recovery(noise_sigma: f64, tolerance: usize) -> (usize, usize) {
    let samples = synthesize(&SyntheticConfig {
        num_samples: 100,
        noise_sigma,
        seed: 3,
        ..Default::default()
    })
    .expect("valid generator config");
    let mut recovered = 0;
    for s in &samples {
        let planted = &s.meta.as_ref().expect("synthetic meta").event_starts[1..];
        let found = pseudo_boundaries(s.video.tokens()).expect("non-degenerate features");
        let close =
            found.len() == planted.len() && found.iter().zip(planted).all(|(&f, &p)| f.abs_diff(p) <= tolerance);
        recovered += usize::from(close);
    }
    (recovered, samples.len())
}

fn pseudo_event_fixture() -> Outcome {
    let started = Instant::now();
    let label = |i: usize| i / 5;
    let tsm = TsMatrix::from_matrix(Matrix::from_fn(
        10,
        10,
        |i, j| {
            if label(i) == label(j) {
                1.0
            } else {
                0.0
            }
        },
    ));
    let scores = match boundary_scores(&tsm) {
        Ok(b) => b,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let naive: Vec<f64> = (0..10)
        .map(|c| {
            if c < 2 || c + 2 >= 10 {
                return 0.0;
            }
            let mut total = 0.0;
            for (a, row) in CONTRASTIVE_KERNEL.iter().enumerate() {
                for (b, k) in row.iter().enumerate() {
                    total += k * tsm.get(c + a - 2, c + b - 2);
                }
            }
            total
        })
        .collect();
    // Windows centred on 2 and 7 lie entirely inside one block.
    let fixture_ok = scores.scores[4] == 8.0
        && scores.scores[5] == 8.0
        && scores.scores[2] == 0.0
        && scores.scores[7] == 0.0
        && scores.scores == naive;
    if !fixture_ok {
        return Outcome::new(false, format!("fixture scores {:?}, oracle {naive:?}", scores.scores));
    }
    let events = extract_events(&scores, 10);
    let expected = [(0.25, 0.5), (0.75, 0.5)];
    let events_ok = events.len() == 2
        && events
            .iter()
            .zip(expected)
            .all(|(e, (c, w))| (e.center() - c).abs() < 1e-12 && (e.width() - w).abs() < 1e-12);
    if !events_ok || boundary_indices(&scores) != vec![5] {
        return Outcome::new(false, format!("fixture events {events:?}"));
    }
    let (exact, n) = planted_recovery(0.0, 0);
    let (near, m) = planted_recovery(0.05, 1);
    let secs = started.elapsed().as_secs_f64();
    let pass = exact == n && near * 100 >= 95 * m && secs < 30.0;
    Outcome::new(
        pass,
        format!(
            "fixture scores and events match; zero noise {exact}/{n} exact; sigma 0.05 {near}/{m} within 1 frame (need 95%); {secs:.1}s (limit 30s)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. Gradient check

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        video_dim: 8,
        sentence_dim: 8,
        hidden: 8,
        heads: 2,
        layers: 2,
        num_queries: 3,
        slot_iterations: 2,
        ffn_multiplier: 2,
        ..Default::default()
    }
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let config = TrainConfig {
        model: tiny_model_config(),
        ..TrainConfig::default()
    };
    let sample = synthesize(&SyntheticConfig {
        num_samples: 1,
        video_len: 12,
        sentence_len: 4,
        feature_dim: 8,
        num_events: (2, 3),
        seed: 11,
        ..Default::default()
    })
    .expect("valid generator config")
    .remove(0);
    let model = ModelState::<f64>::new(config.model.clone(), 3).expect("valid model");
    let base = sample_objective(&model, &sample, &config, 9).expect("finite objective");
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut groups = 0;
    for (id, name, value) in model.params.iter() {
        let analytic = base.grads.get(id);
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        for i in 0..value.len() {
            let mut plus = model.clone();
            plus.params.get_mut(id).data_mut()[i] += h;
            let mut minus = model.clone();
            minus.params.get_mut(id).data_mut()[i] -= h;
            let lp = sample_objective(&plus, &sample, &config, 9).expect("finite").loss;
            let lm = sample_objective(&minus, &sample, &config, 9).expect("finite").loss;
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
        // Groups whose gradient vanishes are compared in absolute terms.
        let scale = na.sqrt().max(nn.sqrt());
        let err = if scale < 1e-7 { diff.sqrt() } else { diff.sqrt() / scale };
        if err > worst.0 {
            worst = (err, name.to_string());
        }
        groups += 1;
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome::new(
        worst.0 <= 1e-4 && secs < 120.0,
        format!(
            "{groups} parameter groups, worst relative error {:.2e} in {} (limit 1e-4); {secs:.1}s (limit 120s)",
            worst.0, worst.1
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Slot equivariance

fn slot_equivariance() -> Outcome {
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
        let config = ModelConfig {
            video_dim: 16,
            sentence_dim: 16,
            hidden: 16,
            heads: 2,
            layers: 1,
            num_queries: 5,
            slot_iterations: 3,
            ..Default::default()
        };
        let model = ModelState::<f64>::new(config.clone(), trial).expect("valid model");
        let QuerySource::Events(params) = model.layout.queries else {
            return Outcome::new(false, "event reasoning disabled");
        };
        let mut perm: Vec<usize> = (0..5).collect();
        for i in (1..5).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut permuted = model.clone();
        *permuted.params.get_mut(params.slots) = model.params.get(params.slots).select_rows(&perm);
        let len = rng.random_range(8..20);
        let video = Matrix::<f64>::from_fn(len, 16, |_, _| rng.random::<f64>() - 0.5);
        let mask = vec![true; len];
        let run = |m: &ModelState<f64>| {
            let mut g = Graph::new(&m.params);
            let v = g.input(video.clone());
            let q = event_reasoning(&mut g, &params, v, &mask, config.slot_iterations);
            (g.value(q.content).clone(), g.value(q.positions).clone())
        };
        let (c0, p0) = run(&model);
        let (c1, p1) = run(&permuted);
        for (a, b) in [(c0.select_rows(&perm), c1), (p0.select_rows(&perm), p1)] {
            let d = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            worst = worst.max(d);
        }
    }
    Outcome::new(
        worst <= 1e-6,
        format!("100 trials, N=5, K=3; max deviation {worst:.2e} (limit 1e-6)"),
    )
}

// ---------------------------------------------------------------------------
// 6. Metrics

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact rational `num / den`.
#[derive(Clone, Copy)]
struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    fn new(num: u64, den: u64) -> Self {
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    fn add(self, other: Ratio) -> Ratio {
        Ratio::new(self.num * other.den + other.num * self.den, self.den * other.den)
    }

    fn mul(self, other: Ratio) -> Ratio {
        Ratio::new(self.num * other.num, self.den * other.den)
    }

    fn max(self, other: Ratio) -> Ratio {
        if self.num * other.den >= other.num * self.den {
            self
        } else {
            other
        }
    }

    fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// AP from the precision–recall curve, recomputing the greedy matching of
/// every ranked prefix from scratch and integrating in exact rationals.
fn reference_ap(preds: &[RankedPredictions], gts: &[Vec<MomentSpan>], threshold: f64) -> f64 {
    let total: u64 = gts.iter().map(|g| g.len() as u64).sum();
    let mut ranked: Vec<(usize, usize, f64)> = Vec::new();
    for (s, p) in preds.iter().enumerate() {
        for (k, (_, conf)) in p.0.iter().enumerate() {
            ranked.push((s, k, *conf));
        }
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2));
    let true_positives = |prefix: usize| -> u64 {
        let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for &(s, k, _) in &ranked[..prefix] {
            let span = &preds[s].0[k].0;
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts[s].iter().enumerate() {
                let iou = generalized_temporal_iou(span, gt).iou;
                if !taken[s][g] && iou >= threshold && best.is_none_or(|b| iou > b.1) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[s][g] = true;
                tp += 1;
            }
        }
        tp
    };
    let n = ranked.len();
    let points: Vec<(u64, Ratio)> = (1..=n)
        .map(|k| {
            let tp = true_positives(k);
            (tp, Ratio::new(tp, k as u64))
        })
        .collect();
    let mut ap = Ratio::new(0, 1);
    let mut previous_tp = 0;
    for k in 0..n {
        let (tp, _) = points[k];
        if tp > previous_tp {
            let envelope = points[k..].iter().fold(Ratio::new(0, 1), |m, p| m.max(p.1));
            ap = ap.add(envelope.mul(Ratio::new(tp - previous_tp, total)));
        }
        previous_tp = tp;
    }
    ap.value()
}

fn metrics_oracle() -> Outcome {
    let grid: Vec<MomentSpan> = [(0.0, 0.4), (0.2, 0.6), (0.3, 0.5), (0.5, 1.0), (0.6, 0.9), (0.0, 1.0)]
        .iter()
        .map(|&(s, e)| MomentSpan::from_interval(s, e).expect("valid"))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let thresholds = default_map_thresholds();
    let mut cases = 0;
    let mut worst = 0.0f64;
    for samples in 1..=4 {
        for per_sample in 1..=4 {
            for _ in 0..50 {
                let total = samples * per_sample;
                let mut confidences: Vec<f64> = (0..total).map(|i| (i + 1) as f64 / (total + 1) as f64).collect();
                for i in (1..total).rev() {
                    confidences.swap(i, rng.random_range(0..=i));
                }
                let mut preds = Vec::new();
                let mut gts = Vec::new();
                for s in 0..samples {
                    let list = (0..per_sample)
                        .map(|k| (grid[rng.random_range(0..grid.len())], confidences[s * per_sample + k]))
                        .collect();
                    preds.push(RankedPredictions::new(list));
                    let count = rng.random_range(1..=2);
                    gts.push(
                        (0..count)
                            .map(|_| grid[rng.random_range(0..grid.len())])
                            .collect::<Vec<_>>(),
                    );
                }
                let got = mean_ap(&preds, &gts, &thresholds);
                for (t, ap) in &got.per_threshold {
                    let want = reference_ap(&preds, &gts, *t);
                    worst = worst.max((ap - want).abs());
                }
                cases += 1;
            }
        }
    }
    let gt = MomentSpan::from_interval(0.35, 0.65).expect("valid");
    let single = |list: Vec<(MomentSpan, f64)>| vec![RankedPredictions::new(list)];
    let perfect = mean_ap(&single(vec![(gt, 0.9)]), &[vec![gt]], &thresholds).mean;
    let miss = MomentSpan::from_interval(0.8, 0.9).expect("valid");
    let lower = mean_ap(&single(vec![(miss, 0.9), (gt, 0.5)]), &[vec![gt]], &[0.5]).mean;
    let pred = MomentSpan::from_interval(0.4, 0.6).expect("valid");
    let r1 = recall1_at_iou(&single(vec![(pred, 1.0)]), &[vec![gt]], 0.5);
    let iou = generalized_temporal_iou(&pred, &gt).iou;
    // The rational oracle and the floating implementation may differ in the
    // last bits of the division by the number of ground truths.
    let pass = worst <= 1e-12 && perfect == 1.0 && lower == 0.5 && r1 == 1.0 && (iou - 2.0 / 3.0).abs() < 1e-9;
    Outcome::new(
        pass,
        format!(
            "{cases} enumerated cases, max |AP - oracle| {worst:.1e}; perfect AP {perfect}; lower-ranked match AP {lower}; R1@0.5 example IoU {iou:.3} hit {r1}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 7-9. Desk-profile training runs

const DESK_TRAIN: usize = 2000;
const DESK_VAL: usize = 200;
const SPEED_TARGET: f64 = 0.80;
const SEEDS: [u64; 3] = [7, 8, 9];

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug)]
enum Variant {
    Full,
    NoEventLoss,
    Baseline,
}

impl Variant {
    fn config(self, seed: u64) -> TrainConfig {
        let mut config = TrainConfig::for_profile(Profile::Desk);
        config.seed = seed;
        match self {
            Variant::Full => config,
            Variant::NoEventLoss => TrainConfig {
                event_loss: false,
                ..config
            },
            Variant::Baseline => config.baseline(),
        }
    }
}

struct DeskData {
    train: Vec<GroundingSample>,
    val: Vec<GroundingSample>,
}

#[derive(Default)]
struct DeskRuns {
    data: Option<DeskData>,
    /// Epoch histories keyed by variant and seed.
    histories: BTreeMap<(Variant, u64), (Vec<EpochRecord>, f64)>,
}

impl DeskRuns {
    fn data(&mut self) -> &DeskData {
        self.data.get_or_insert_with(|| {
            let make = |num_samples, seed, start_index| {
                synthesize(&SyntheticConfig {
                    num_samples,
                    seed,
                    start_index,
                    ..Default::default()
                })
                .expect("valid generator config")
            };
            DeskData {
                train: make(DESK_TRAIN, 1, 0),
                val: make(DESK_VAL, 2, DESK_TRAIN as u64),
            }
        })
    }

    /// Full 30-epoch run, cached.
    fn history(&mut self, variant: Variant, seed: u64) -> (Vec<EpochRecord>, f64) {
        if let Some(h) = self.histories.get(&(variant, seed)) {
            return h.clone();
        }
        let config = variant.config(seed);
        let data = self.data();
        let started = Instant::now();
        let summary = train(
            &config,
            &data.train,
            &data.val,
            TrainOptions {
                on_epoch: Some(Box::new(move |r: &EpochRecord| {
                    println!(
                        "  {variant:?} seed {seed} epoch {:>2}: loss {:.3} R1@0.5 {:.3} R1@0.7 {:.3} mAP {:.3}",
                        r.epoch, r.train_loss, r.report.r1_05, r.report.r1_07, r.report.map_avg
                    );
                    true
                })),
                ..Default::default()
            },
        )
        .expect("desk training run");
        let result = (summary.history, started.elapsed().as_secs_f64());
        self.histories.insert((variant, seed), result.clone());
        result
    }
}

fn best_by_map(history: &[EpochRecord]) -> Option<&EpochRecord> {
    history.iter().fold(None, |best: Option<&EpochRecord>, r| match best {
        Some(b) if b.report.map_avg >= r.report.map_avg => Some(b),
        _ => Some(r),
    })
}

fn synthetic_convergence(runs: &mut DeskRuns) -> Outcome {
    let (history, secs) = runs.history(Variant::Full, 7);
    let Some(best) = best_by_map(&history) else {
        return Outcome::new(false, "no epochs ran");
    };
    let r = best.report;
    let pass = r.r1_05 >= 0.90 && r.r1_07 >= 0.75 && secs <= 15.0 * 60.0;
    Outcome::new(
        pass,
        format!(
            "selected epoch {}: R1@0.5 {:.3} (need 0.90), R1@0.7 {:.3} (need 0.75), mAP {:.3}; {:.0}s on {} threads (limit 900s)",
            best.epoch,
            r.r1_05,
            r.r1_07,
            r.map_avg,
            secs,
            rayon::current_num_threads()
        ),
    )
}

fn ablation_direction(runs: &mut DeskRuns) -> Outcome {
    let mut r1 = BTreeMap::new();
    for variant in [Variant::Full, Variant::NoEventLoss, Variant::Baseline] {
        let (history, _) = runs.history(variant, 7);
        r1.insert(variant, best_by_map(&history).map_or(0.0, |r| r.report.r1_05));
    }
    let (full, no_event, base) = (r1[&Variant::Full], r1[&Variant::NoEventLoss], r1[&Variant::Baseline]);
    Outcome::new(
        full > base && full > no_event,
        format!("R1@0.5 full {full:.3}, without event loss {no_event:.3}, input-agnostic baseline {base:.3}"),
    )
}

/// First epoch whose validation R1@0.5 reaches the target; runs that never
/// reach it count as one past the budget.
fn epochs_to_target(history: &[EpochRecord], budget: usize) -> usize {
    history
        .iter()
        .find(|r| r.report.r1_05 >= SPEED_TARGET)
        .map_or(budget + 1, |r| r.epoch)
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}

fn convergence_speed(runs: &mut DeskRuns) -> Outcome {
    let budget = TrainConfig::for_profile(Profile::Desk).epochs;
    let mut per_variant = BTreeMap::new();
    for variant in [Variant::Full, Variant::Baseline] {
        let epochs: Vec<usize> = SEEDS
            .iter()
            .map(|&seed| epochs_to_target(&runs.history(variant, seed).0, budget))
            .collect();
        per_variant.insert(variant, epochs);
    }
    let full = median(per_variant[&Variant::Full].clone());
    let base = median(per_variant[&Variant::Baseline].clone());
    let show = |e: &Vec<usize>| {
        e.iter()
            .map(|&n| if n > budget { "never".to_string() } else { n.to_string() })
            .collect::<Vec<_>>()
            .join("/")
    };
    Outcome::new(
        full < base,
        format!(
            "epochs to R1@0.5 {SPEED_TARGET}: full {} (median {}), baseline {} (median {})",
            show(&per_variant[&Variant::Full]),
            full,
            show(&per_variant[&Variant::Baseline]),
            base
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Real-feature ingestion

const NON_REPRODUCIBILITY: &str = "benchmark-scale numbers (for example R1@0.5 on QVHighlights) need SlowFast/CLIP/I3D features and the original datasets and are not reproduced here";

fn real_feature_ingestion() -> Outcome {
    let dir = tempfile::tempdir().expect("temporary directory");
    let (video_dim, sentence_dim) = (2816, 512);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut expected = Vec::new();
    let mut lines = Vec::new();
    std::fs::create_dir_all(dir.path().join("vid")).expect("feature directory");
    std::fs::create_dir_all(dir.path().join("txt")).expect("feature directory");
    for (qid, (frames, tokens, duration, window)) in [
        (75, 22, 150.0, [30.0, 52.0]),
        (40, 9, 80.0, [0.0, 14.0]),
        (64, 31, 128.0, [100.0, 128.0]),
    ]
    .into_iter()
    .enumerate()
    {
        let video = Matrix::<f32>::from_fn(frames, video_dim, |_, _| rng.random::<f32>() * 2.0 - 1.0);
        let sentence = Matrix::<f32>::from_fn(tokens, sentence_dim, |_, _| rng.random::<f32>() * 2.0 - 1.0);
        let vid = format!("clip_{qid}");
        write_feature_matrix(dir.path().join(format!("vid/{vid}.eatf")), &video).expect("write features");
        write_feature_matrix(dir.path().join(format!("txt/{qid}.eatf")), &sentence).expect("write features");
        lines.push(
            serde_json::json!({
                "qid": qid,
                "vid": vid,
                "duration": duration,
                "relevant_windows": [window],
                "video_feature_ref": format!("vid/{vid}.eatf"),
                "sentence_feature_ref": format!("txt/{qid}.eatf"),
            })
            .to_string(),
        );
        expected.push((video, sentence, window[0] / duration, window[1] / duration));
    }
    let annotations = dir.path().join("annotations.jsonl");
    std::fs::write(&annotations, lines.join("\n") + "\n").expect("write annotations");

    let loaded = match load_all(&annotations) {
        Ok(l) => l,
        Err(e) => return Outcome::new(false, format!("load failed: {e}")),
    };
    let mut ok = loaded.len() == expected.len();
    for (s, (video, sentence, start, end)) in loaded.iter().zip(&expected) {
        let (a, b) = s.gt_moments[0].interval();
        ok &= s.video.tokens() == video && s.sentence.tokens() == sentence;
        ok &= (a - start).abs() <= 1e-9 && (b - end).abs() <= 1e-9;
    }
    let model = ModelState::<f32>::new(
        ModelConfig {
            video_dim,
            sentence_dim,
            hidden: 16,
            heads: 2,
            layers: 1,
            num_queries: 3,
            ..Default::default()
        },
        0,
    )
    .expect("valid model");
    for s in &loaded {
        ok &= predict(&model, &s.video, &s.sentence).is_ok_and(|p| p.len() == 3);
    }
    Outcome::new(
        ok,
        format!(
            "{} external records ({video_dim}-d video, {sentence_dim}-d text) round-trip bit-exactly and run through the model; {NON_REPRODUCIBILITY}",
            loaded.len()
        ),
    )
}
