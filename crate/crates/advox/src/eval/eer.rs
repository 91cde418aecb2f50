//! Equal error rate over verification score lists.
//!
//! The detection trade-off of a score-thresholded verifier is a step
//! function; the reported rate is the crossing of the false-accept and
//! false-reject curves, linearly interpolated between the two adjacent
//! operating points that bracket it. An exhaustive threshold sweep at
//! score midpoints ([`eer_threshold_sweep`]) produces the same
//! operating points and serves as the reference implementation.

/// Detection operating points as the accept threshold sweeps upward
/// through the pooled scores: `(false_accept, false_reject)` pairs,
/// starting at `(1, 0)` and ending at `(0, 1)`. A trial is accepted
/// when its score is at or above the threshold.
fn operating_points(targets: &[f64], nontargets: &[f64]) -> Vec<(f64, f64)> {
    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;
    let mut pooled: Vec<(f64, bool)> = targets
        .iter()
        .map(|&s| (s, true))
        .chain(nontargets.iter().map(|&s| (s, false)))
        .collect();
    pooled.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    let mut points = Vec::with_capacity(pooled.len() + 1);
    points.push((1.0, 0.0));
    let mut missed = 0usize;
    let mut rejected = 0usize;
    let mut i = 0;
    while i < pooled.len() {
        let v = pooled[i].0;
        while i < pooled.len() && pooled[i].0 == v {
            if pooled[i].1 {
                missed += 1;
            } else {
                rejected += 1;
            }
            i += 1;
        }
        points.push(((nn - rejected as f64) / nn, missed as f64 / nt));
    }
    points
}

/// Crossing of the false-accept and false-reject traces along the
/// operating-point polyline, as a percentage capped at chance level.
fn crossing_pct(points: &[(f64, f64)]) -> f64 {
    for w in points.windows(2) {
        let (fa0, fr0) = w[0];
        let (fa1, fr1) = w[1];
        if fr1 >= fa1 {
            // First point where rejects catch up with accepts. The
            // previous point still has fa > fr, so the denominator is
            // positive unless the segment starts on the diagonal.
            let d0 = fa0 - fr0;
            let d1 = fr1 - fa1;
            let t = if d0 + d1 > 0.0 { d0 / (d0 + d1) } else { 0.0 };
            let rate = fa0 + t * (fa1 - fa0);
            // A detector worse than chance reports chance level; the
            // score ordering, not the threshold, is what failed.
            return 100.0 * rate.min(0.5);
        }
    }
    unreachable!("the final operating point is (0, 1)")
}

/// Equal error rate in percent, in `[0, 50]`.
///
/// Both lists must be nonempty and finite; those are caller bugs, not
/// runtime conditions, so they panic.
pub fn eer(targets: &[f64], nontargets: &[f64]) -> f64 {
    assert!(
        !targets.is_empty() && !nontargets.is_empty(),
        "equal error rate needs scores on both sides"
    );
    assert!(
        targets.iter().chain(nontargets).all(|s| s.is_finite()),
        "scores must be finite"
    );
    crossing_pct(&operating_points(targets, nontargets))
}

/// Reference implementation: enumerate every decision threshold at the
/// midpoints between adjacent distinct pooled scores (plus one below
/// and one above everything), count errors at each, and interpolate the
/// same crossing. Quadratic in the number of trials; used to check the
/// sweep-based [`eer`] on random score sets.
pub fn eer_threshold_sweep(targets: &[f64], nontargets: &[f64]) -> f64 {
    assert!(
        !targets.is_empty() && !nontargets.is_empty(),
        "equal error rate needs scores on both sides"
    );
    let nt = targets.len() as f64;
    let nn = nontargets.len() as f64;
    let mut distinct: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    distinct.dedup();

    let mut thresholds = Vec::with_capacity(distinct.len() + 1);
    thresholds.push(distinct[0] - 1.0);
    for w in distinct.windows(2) {
        thresholds.push(0.5 * (w[0] + w[1]));
    }
    thresholds.push(distinct[distinct.len() - 1] + 1.0);

    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&th| {
            let accepts = nontargets.iter().filter(|&&s| s >= th).count();
            let misses = targets.iter().filter(|&&s| s < th).count();
            (accepts as f64 / nn, misses as f64 / nt)
        })
        .collect();
    crossing_pct(&points)
}
