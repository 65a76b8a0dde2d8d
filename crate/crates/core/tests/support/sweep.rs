//! Brute-force EER reference: counts FAR and miss directly at every
//! candidate threshold instead of walking a sorted DET curve.

/// (threshold, far, miss) at thresholds below every score, at each midpoint
/// between adjacent distinct sorted scores, and above every score.
pub fn sweep_points(scores: &[f64], is_target: &[bool]) -> Vec<(f64, f64, f64)> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![distinct[0] - 1.0];
    thresholds.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    thresholds.push(f64::INFINITY);
    let nt = is_target.iter().filter(|&&t| t).count() as f64;
    let nn = is_target.len() as f64 - nt;
    thresholds
        .into_iter()
        .map(|th| {
            let mut fa = 0usize;
            let mut miss = 0usize;
            for (&s, &t) in scores.iter().zip(is_target) {
                match (t, s >= th) {
                    (false, true) => fa += 1,
                    (true, false) => miss += 1,
                    _ => {}
                }
            }
            (th, fa as f64 / nn, miss as f64 / nt)
        })
        .collect()
}

/// EER from the sweep: the lowest-threshold argmin of |far − miss|, linearly
/// interpolated toward the neighbour on the other side of the crossing.
pub fn sweep_eer(scores: &[f64], is_target: &[bool]) -> f64 {
    let pts = sweep_points(scores, is_target);
    let d: Vec<f64> = pts.iter().map(|p| p.1 - p.2).collect();
    let mut k = 0;
    for i in 1..d.len() {
        if d[i].abs() < d[k].abs() {
            k = i;
        }
    }
    let interp = |a: usize, b: usize| {
        let (da, db) = (d[a], d[b]);
        let alpha = if da == db { 0.0 } else { da / (da - db) };
        pts[a].1 + alpha * (pts[b].1 - pts[a].1)
    };
    if d[k] == 0.0 {
        pts[k].1
    } else if d[k] > 0.0 {
        interp(k, k + 1)
    } else {
        interp(k - 1, k)
    }
}
