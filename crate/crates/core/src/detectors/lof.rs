/// Local outlier factor with `k` nearest neighbors (Euclidean).
///
/// Neighbor ties are broken by index. Exact duplicates would give an
/// infinite local reachability density, so a small floor is added to the
/// mean reachability distance; a fully duplicated set scores 1 everywhere.
pub fn lof_scores(points: &[&[f64]], k: usize) -> Vec<f64> {
    let n = points.len();
    if n < 2 {
        return vec![1.0; n];
    }
    let k = k.clamp(1, n - 1);
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();

    let mut neighbors: Vec<Vec<(f64, usize)>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut d: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(points[i], points[j]), j)).collect();
        d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(k);
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        neighbors.push(d);
    }
    let k_distance: Vec<f64> = neighbors.iter().map(|nb| nb[k - 1].0).collect();
    let lrd: Vec<f64> = neighbors
        .iter()
        .map(|nb| {
            let reach = nb.iter().map(|&(d, j)| d.max(k_distance[j])).sum::<f64>() / k as f64;
            1.0 / (reach + 1e-10)
        })
        .collect();
    neighbors
        .iter()
        .enumerate()
        .map(|(i, nb)| nb.iter().map(|&(_, j)| lrd[j]).sum::<f64>() / (k as f64 * lrd[i]))
        .collect()
}
