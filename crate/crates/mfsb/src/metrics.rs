//! Seen/unseen evaluation: calibration-bias sweep, harmonic mean, and the
//! area under the seen–unseen accuracy curve.
//!
//! A single scalar bias is added to every *seen* candidate's score before
//! the argmax. Sweeping it from −∞ (predictions forced unseen) to +∞
//! (forced seen) traces the trade-off curve; the report carries the best
//! seen accuracy, best unseen accuracy, best harmonic mean along the curve,
//! and the trapezoidal area under unseen-vs-seen accuracy.

use crate::error::{Error, Result};
use crate::model::{EvalScores, SampleScores};
use crate::space::World;

/// One sweep entry: the bias and the accuracies it produces.
#[derive(Copy, Clone, Debug)]
pub struct CurvePoint {
    pub bias: f64,
    pub seen: f64,
    pub unseen: f64,
}

/// Sweep summary for one world.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub world: World,
    /// Best accuracy on samples whose true pair is seen.
    pub seen_acc: f64,
    /// Best accuracy on samples whose true pair is unseen.
    pub unseen_acc: f64,
    /// Best harmonic mean of (seen, unseen) along the curve.
    pub harmonic_mean: f64,
    /// Trapezoidal area under unseen-vs-seen accuracy.
    pub auc: f64,
    pub curve: Vec<CurvePoint>,
    /// Attribute-head accuracy, absent when the head is inactive.
    pub attr_acc: Option<f64>,
    /// Object-head accuracy, absent when the head is inactive.
    pub obj_acc: Option<f64>,
}

/// Harmonic mean with the 0/0 convention.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Ratio → percentage with two decimals, the format of every emitted table.
pub fn pct(ratio: f64) -> String {
    format!("{:.2}", ratio * 100.0)
}

fn argmax_biased(sample: &SampleScores, seen: &[bool], bias: f64) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (i, &raw) in sample.pair_scores.iter().enumerate() {
        let score = if seen[i] { raw + bias } else { raw };
        if score > best_score {
            best_score = score;
            best = i;
        }
    }
    best
}

fn argmax_restricted(sample: &SampleScores, seen: &[bool], want_seen: bool) -> usize {
    let mut best: Option<usize> = None;
    for (i, &score) in sample.pair_scores.iter().enumerate() {
        if seen[i] != want_seen {
            continue;
        }
        if best.is_none_or(|b| score > sample.pair_scores[b]) {
            best = Some(i);
        }
    }
    // No candidate on the requested side: fall back to the plain argmax.
    best.unwrap_or_else(|| argmax_biased(sample, seen, 0.0))
}

fn predict_one(scores: &EvalScores, sample: &SampleScores, bias: f64) -> usize {
    if bias == f64::INFINITY {
        argmax_restricted(sample, &scores.seen, true)
    } else if bias == f64::NEG_INFINITY {
        argmax_restricted(sample, &scores.seen, false)
    } else {
        argmax_biased(sample, &scores.seen, bias)
    }
}

/// Predicted pair per sample at one bias. Ties go to the lowest pair id
/// (candidates are sorted, so the first best position wins).
pub fn predict_pairs(scores: &EvalScores, bias: f64) -> Result<Vec<usize>> {
    if scores.candidates.is_empty() {
        return Err(Error::Config("candidate set is empty".into()));
    }
    Ok(scores
        .samples
        .iter()
        .map(|s| scores.candidates[predict_one(scores, s, bias)])
        .collect())
}

/// (seen accuracy, unseen accuracy) at one bias.
fn accuracies_at(scores: &EvalScores, bias: f64) -> Result<(f64, f64)> {
    let mut counts = [[0usize; 2]; 2]; // [seen?][hit?]
    for sample in &scores.samples {
        let truth_pos = scores
            .candidates
            .binary_search(&sample.pair)
            .map_err(|_| Error::Metric(format!("true pair {} missing from candidates", sample.pair)))?;
        let hit = predict_one(scores, sample, bias) == truth_pos;
        counts[scores.seen[truth_pos] as usize][hit as usize] += 1;
    }
    let ratio = |row: [usize; 2]| {
        let total = row[0] + row[1];
        if total == 0 {
            0.0
        } else {
            row[1] as f64 / total as f64
        }
    };
    Ok((ratio(counts[1]), ratio(counts[0])))
}

/// Sweep `n_points` biases across ±(the largest seen/unseen score gap),
/// plus the two infinite endpoints. Seen accuracy is nondecreasing and
/// unseen accuracy nonincreasing along the result.
pub fn bias_sweep(scores: &EvalScores, n_points: usize) -> Result<Vec<CurvePoint>> {
    if n_points < 3 {
        return Err(Error::Metric(format!("bias sweep needs at least 3 points, got {n_points}")));
    }
    let truth_seen = |sample: &SampleScores| -> Result<bool> {
        let pos = scores
            .candidates
            .binary_search(&sample.pair)
            .map_err(|_| Error::Metric(format!("true pair {} missing from candidates", sample.pair)))?;
        Ok(scores.seen[pos])
    };
    let mut has = [false, false];
    for sample in &scores.samples {
        has[truth_seen(sample)? as usize] = true;
    }
    if !(has[0] && has[1]) {
        return Err(Error::Metric(
            "bias sweep needs both seen and unseen samples in the eval set".into(),
        ));
    }

    // Largest per-sample gap between the best seen and best unseen score.
    let mut delta: f64 = 0.0;
    for sample in &scores.samples {
        let best = |want_seen: bool| {
            sample
                .pair_scores
                .iter()
                .zip(&scores.seen)
                .filter(|(_, s)| **s == want_seen)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max)
        };
        let (s, u) = (best(true), best(false));
        if s.is_finite() && u.is_finite() {
            delta = delta.max((s - u).abs());
        }
    }

    let mut biases = vec![f64::NEG_INFINITY];
    for i in 0..n_points {
        let t = i as f64 / (n_points - 1) as f64;
        biases.push(-delta + 2.0 * delta * t);
    }
    biases.push(f64::INFINITY);

    let mut curve = Vec::with_capacity(biases.len());
    for bias in biases {
        let (seen, unseen) = accuracies_at(scores, bias)?;
        curve.push(CurvePoint { bias, seen, unseen });
    }
    for w in curve.windows(2) {
        if w[1].seen < w[0].seen - 1e-12 || w[1].unseen > w[0].unseen + 1e-12 {
            return Err(Error::Metric(format!(
                "non-monotone sweep: ({}, {}) then ({}, {})",
                w[0].seen, w[0].unseen, w[1].seen, w[1].unseen
            )));
        }
    }
    Ok(curve)
}

/// Trapezoidal area under unseen-vs-seen accuracy, after sorting by seen
/// accuracy and dropping duplicate points.
fn area_under(curve: &[CurvePoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.seen, p.unseen)).collect();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracies"));
    pts.dedup();
    let mut area = 0.0;
    for w in pts.windows(2) {
        area += (w[1].0 - w[0].0) * 0.5 * (w[0].1 + w[1].1);
    }
    area
}

/// Reduce a sweep curve to the report scalars.
pub fn summarize(world: World, curve: Vec<CurvePoint>) -> Result<EvalReport> {
    if curve.is_empty() {
        return Err(Error::Metric("cannot summarize an empty curve".into()));
    }
    let mut seen_acc: f64 = 0.0;
    let mut unseen_acc: f64 = 0.0;
    let mut hm: f64 = 0.0;
    for p in &curve {
        seen_acc = seen_acc.max(p.seen);
        unseen_acc = unseen_acc.max(p.unseen);
        hm = hm.max(harmonic_mean(p.seen, p.unseen));
    }
    let auc = area_under(&curve);
    Ok(EvalReport {
        world,
        seen_acc,
        unseen_acc,
        harmonic_mean: hm,
        auc,
        curve,
        attr_acc: None,
        obj_acc: None,
    })
}

/// Accuracy of the attribute and object heads; a head that is inactive is
/// reported absent, never as zero.
pub fn evaluate_primitives(scores: &EvalScores) -> (Option<f64>, Option<f64>) {
    let rate = |pick: &dyn Fn(&SampleScores) -> Option<(usize, usize)>| {
        let mut hit = 0usize;
        let mut total = 0usize;
        for sample in &scores.samples {
            if let Some((pred, truth)) = pick(sample) {
                total += 1;
                hit += (pred == truth) as usize;
            }
        }
        if total == 0 {
            None
        } else {
            Some(hit as f64 / total as f64)
        }
    };
    (
        rate(&|s| s.attr_pred.map(|p| (p, s.state))),
        rate(&|s| s.obj_pred.map(|p| (p, s.object))),
    )
}

/// Full evaluation of one score set: sweep, summary, and primitive heads.
pub fn evaluate(world: World, scores: &EvalScores, n_points: usize) -> Result<EvalReport> {
    let curve = bias_sweep(scores, n_points)?;
    let mut report = summarize(world, curve)?;
    let (attr, obj) = evaluate_primitives(scores);
    report.attr_acc = attr;
    report.obj_acc = obj;
    Ok(report)
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "method,world,S,U,HM,AUC";

    /// One row of the fixed-column report CSV, percentages to two decimals.
    pub fn csv_row(&self, method: &str) -> String {
        format!(
            "{},{},{},{},{},{}",
            csv_quote(method),
            self.world.label(),
            pct(self.seen_acc),
            pct(self.unseen_acc),
            pct(self.harmonic_mean),
            pct(self.auc)
        )
    }
}

/// Quote a CSV field if it contains a comma or quote.
pub fn csv_quote(field: &str) -> String {
    if field.contains(',') || field.contains('"') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SampleScores;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // ── Independent oracle ──────────────────────────────────────────────
    /// Riemann-sum area under the piecewise-linear interpolation of
    /// unseen-vs-seen accuracy, at `resolution` sample points.
    fn riemann_auc_oracle(curve: &[CurvePoint], resolution: usize) -> f64 {
        let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.seen, p.unseen)).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        pts.dedup();
        if pts.len() < 2 {
            return 0.0;
        }
        let (s0, s1) = (pts[0].0, pts[pts.len() - 1].0);
        if s1 == s0 {
            return 0.0;
        }
        let interp = |s: f64| -> f64 {
            let i = pts.partition_point(|p| p.0 <= s).min(pts.len() - 1).max(1);
            let (a, b) = (pts[i - 1], pts[i]);
            if b.0 == a.0 {
                a.1
            } else {
                a.1 + (b.1 - a.1) * (s - a.0) / (b.0 - a.0)
            }
        };
        let step = (s1 - s0) / resolution as f64;
        (0..resolution).map(|i| interp(s0 + (i as f64 + 0.5) * step) * step).sum()
    }

    /// Synthetic score set: 4 candidates (pairs 0..4), first two seen.
    /// Each sample's score vector is given directly.
    fn scores_from(rows: &[(usize, Vec<f64>)]) -> EvalScores {
        EvalScores {
            candidates: vec![0, 1, 2, 3],
            seen: vec![true, true, false, false],
            samples: rows
                .iter()
                .map(|(pair, scores)| SampleScores {
                    sample_id: *pair,
                    pair: *pair,
                    state: 0,
                    object: 0,
                    pair_scores: scores.clone(),
                    attr_pred: None,
                    obj_pred: None,
                })
                .collect(),
        }
    }

    #[test]
    fn plain_argmax_at_zero_bias_and_restricted_argmax_at_the_endpoints() {
        let scores = scores_from(&[
            (0, vec![0.9, 0.1, 0.5, 0.2]), // seen sample, correctly ranked
            (2, vec![0.4, 0.1, 0.8, 0.6]), // unseen sample, correctly ranked
        ]);
        assert_eq!(predict_pairs(&scores, 0.0).unwrap(), vec![0, 2]);
        // +∞ forces the best seen candidate; −∞ the best unseen.
        assert_eq!(predict_pairs(&scores, f64::INFINITY).unwrap(), vec![0, 0]);
        assert_eq!(predict_pairs(&scores, f64::NEG_INFINITY).unwrap(), vec![2, 2]);
        // A finite bias shifts only seen candidates.
        assert_eq!(predict_pairs(&scores, 0.45).unwrap(), vec![0, 0]);
    }

    #[test]
    fn ties_resolve_to_the_lowest_pair_id() {
        let scores = scores_from(&[(1, vec![0.5, 0.5, 0.5, 0.5])]);
        assert_eq!(predict_pairs(&scores, 0.0).unwrap(), vec![0]);
        assert_eq!(predict_pairs(&scores, f64::NEG_INFINITY).unwrap(), vec![2]);
    }

    #[test]
    fn sweep_has_n_plus_two_points_with_extreme_endpoints() {
        let scores = scores_from(&[
            (0, vec![0.9, 0.1, 0.5, 0.2]),
            (1, vec![0.2, 0.7, 0.3, 0.1]),
            (2, vec![0.4, 0.1, 0.8, 0.6]),
            (3, vec![0.1, 0.2, 0.3, 0.9]),
        ]);
        let curve = bias_sweep(&scores, 3).unwrap();
        assert_eq!(curve.len(), 5);
        let first = curve.first().unwrap();
        let last = curve.last().unwrap();
        assert_eq!(first.bias, f64::NEG_INFINITY);
        assert_eq!(last.bias, f64::INFINITY);
        // Forced-unseen zeroes seen accuracy and maximizes unseen accuracy.
        assert_eq!(first.seen, 0.0);
        assert_eq!(last.unseen, 0.0);
        let max_seen = curve.iter().map(|p| p.seen).fold(0.0, f64::max);
        let max_unseen = curve.iter().map(|p| p.unseen).fold(0.0, f64::max);
        assert_eq!(last.seen, max_seen);
        assert_eq!(first.unseen, max_unseen);
        for w in curve.windows(2) {
            assert!(w[1].seen >= w[0].seen && w[1].unseen <= w[0].unseen);
        }
    }

    #[test]
    fn degenerate_sweeps_are_rejected() {
        let all_seen = scores_from(&[(0, vec![0.9, 0.1, 0.5, 0.2])]);
        assert!(matches!(bias_sweep(&all_seen, 3), Err(Error::Metric(_))));
        let ok = scores_from(&[(0, vec![0.9, 0.1, 0.5, 0.2]), (2, vec![0.1, 0.1, 0.9, 0.2])]);
        assert!(matches!(bias_sweep(&ok, 2), Err(Error::Metric(_))));
        assert!(bias_sweep(&ok, 3).is_ok());
    }

    #[test]
    fn summarize_handles_flat_and_zero_curves() {
        let flat: Vec<CurvePoint> = (0..4)
            .map(|i| CurvePoint { bias: i as f64, seen: 0.5, unseen: 0.5 })
            .collect();
        let report = summarize(World::Open, flat).unwrap();
        assert_eq!(report.harmonic_mean, 0.5);
        assert_eq!(report.auc, 0.0, "a single point spans no seen range");

        let dead: Vec<CurvePoint> = (0..4)
            .map(|i| CurvePoint { bias: i as f64, seen: 0.0, unseen: 0.2 * i as f64 })
            .collect();
        let report = summarize(World::Open, dead).unwrap();
        assert_eq!(report.harmonic_mean, 0.0);
        assert_eq!(report.auc, 0.0);
    }

    fn random_monotone_curve(rng: &mut ChaCha8Rng, n: usize) -> Vec<CurvePoint> {
        let mut seen = 0.0;
        let mut unseen: f64 = rng.random_range(0.3..1.0);
        let mut out = Vec::new();
        for i in 0..n {
            out.push(CurvePoint { bias: i as f64, seen, unseen });
            seen = (seen + rng.random_range(0.0..0.3)).min(1.0);
            unseen = (unseen - rng.random_range(0.0..0.3)).max(0.0);
        }
        out
    }

    #[test]
    fn trapezoid_auc_matches_the_riemann_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let curve = random_monotone_curve(&mut rng, 7);
            let report = summarize(World::Open, curve.clone()).unwrap();
            let oracle = riemann_auc_oracle(&curve, 100_000);
            assert!(
                (report.auc - oracle).abs() < 1e-3,
                "trapezoid {} vs oracle {}",
                report.auc,
                oracle
            );
            assert!(report.auc <= report.seen_acc * report.unseen_acc + 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn harmonic_mean_properties(s in 0.0f64..=1.0, u in 0.0f64..=1.0) {
            prop_assert!((harmonic_mean(s, s) - s).abs() < 1e-12);
            prop_assert_eq!(harmonic_mean(s, 0.0), 0.0);
            prop_assert_eq!(harmonic_mean(0.0, u), 0.0);
            let hm = harmonic_mean(s, u);
            prop_assert!(hm <= s.max(u) + 1e-12);
            prop_assert!((0.0..=1.0).contains(&hm));
        }

        #[test]
        fn auc_ignores_duplicates_and_ordering(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let curve = random_monotone_curve(&mut rng, 6);
            let base = summarize(World::Open, curve.clone()).unwrap().auc;
            let mut shuffled = curve.clone();
            shuffled.reverse();
            shuffled.extend(curve.iter().copied());
            let doubled = summarize(World::Open, shuffled).unwrap().auc;
            prop_assert!((base - doubled).abs() < 1e-12);
        }
    }

    #[test]
    fn primitive_heads_report_absent_when_inactive_and_exact_when_perfect() {
        let mut scores = scores_from(&[(0, vec![1.0, 0.0, 0.0, 0.0])]);
        assert_eq!(evaluate_primitives(&scores), (None, None));

        scores.samples[0].attr_pred = Some(scores.samples[0].state);
        scores.samples[0].obj_pred = Some(scores.samples[0].object + 1);
        let (attr, obj) = evaluate_primitives(&scores);
        assert_eq!(attr, Some(1.0));
        assert_eq!(obj, Some(0.0));
    }

    #[test]
    fn uniform_primitive_predictions_hover_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n_states = 8;
        let samples: Vec<SampleScores> = (0..1000)
            .map(|i| SampleScores {
                sample_id: i,
                pair: 0,
                state: rng.random_range(0..n_states),
                object: 0,
                pair_scores: vec![1.0],
                attr_pred: Some(rng.random_range(0..n_states)),
                obj_pred: None,
            })
            .collect();
        let scores = EvalScores { candidates: vec![0], seen: vec![true], samples };
        let (attr, obj) = evaluate_primitives(&scores);
        assert_eq!(obj, None);
        let p = 1.0 / n_states as f64;
        let sigma = (p * (1.0 - p) / 1000.0).sqrt();
        let acc = attr.unwrap();
        assert!(
            (acc - p).abs() < 3.0 * sigma,
            "accuracy {acc} outside the ±3σ band around {p}"
        );
    }

    #[test]
    fn report_rows_format_ratios_as_two_decimal_percentages() {
        let report = EvalReport {
            world: World::Open,
            seen_acc: 0.4933,
            unseen_acc: 0.1901,
            harmonic_mean: 0.2035,
            auc: 0.0733,
            curve: Vec::new(),
            attr_acc: None,
            obj_acc: None,
        };
        assert_eq!(EvalReport::CSV_HEADER, "method,world,S,U,HM,AUC");
        assert_eq!(report.csv_row("full model"), "full model,open,49.33,19.01,20.35,7.33");
        assert_eq!(
            report.csv_row("1. Intra, 2. Inter"),
            "\"1. Intra, 2. Inter\",open,49.33,19.01,20.35,7.33"
        );
    }
}
