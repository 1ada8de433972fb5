/// Histogram-based outlier score on point values.
///
/// Equal-width bins over `[min, max]`; the score of a point is
/// `ln(max_count / count(bin))`, so the tallest bin scores 0.
pub fn hbos_scores(values: &[f64], bins: usize) -> Vec<f64> {
    let bins = bins.max(1);
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let width = (max - min) / bins as f64;
    if !(width > 0.0) {
        return vec![0.0; values.len()];
    }
    let bin_of = |v: f64| (((v - min) / width) as usize).min(bins - 1);
    let mut counts = vec![0usize; bins];
    for &v in values {
        counts[bin_of(v)] += 1;
    }
    let tallest = *counts.iter().max().unwrap_or(&1) as f64;
    values
        .iter()
        .map(|&v| (tallest / counts[bin_of(v)] as f64).ln())
        .collect()
}
