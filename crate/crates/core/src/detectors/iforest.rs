use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Expected path length of an unsuccessful BST search over `n` points.
pub fn average_path_length(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        2 => 1.0,
        _ => {
            let n = n as f64;
            2.0 * ((n - 1.0).ln() + EULER_GAMMA) - 2.0 * (n - 1.0) / n
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Leaf { size: usize },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn build(data: &[&[f64]], sample: &[usize], height_limit: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = Tree { nodes: Vec::new() };
        tree.grow(data, sample.to_vec(), 0, height_limit, rng);
        tree
    }

    fn grow(&mut self, data: &[&[f64]], idx: Vec<usize>, depth: usize, limit: usize, rng: &mut ChaCha8Rng) -> usize {
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { size: idx.len() });
        if depth >= limit || idx.len() <= 1 {
            return slot;
        }
        let dim = data[idx[0]].len();
        // only attributes that still vary inside this node can split it
        let spans: Vec<(usize, f64, f64)> = (0..dim)
            .filter_map(|f| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(data[i][f]), hi.max(data[i][f]))
                });
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if spans.is_empty() {
            return slot;
        }
        let (feature, lo, hi) = spans[rng.random_range(0..spans.len())];
        let threshold = rng.random_range(lo..hi);
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| data[i][feature] < threshold);
        let left = self.grow(data, l, depth + 1, limit, rng);
        let right = self.grow(data, r, depth + 1, limit, rng);
        self.nodes[slot] = Node::Split { feature, threshold, left, right };
        slot
    }

    fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                Node::Leaf { size } => return depth + average_path_length(size),
                Node::Split { feature, threshold, left, right } => {
                    node = if x[feature] < threshold { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }
}

/// Isolation forest over fixed-dimension points.
#[derive(Debug, Clone)]
pub struct IsolationForest {
    trees: Vec<Tree>,
    sample_size: usize,
}

impl IsolationForest {
    pub fn fit(data: &[&[f64]], n_trees: usize, subsample: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sample_size = subsample.min(data.len()).max(1);
        let height_limit = (sample_size as f64).log2().ceil() as usize;
        let trees = (0..n_trees.max(1))
            .map(|_| {
                let sample = index::sample(&mut rng, data.len(), sample_size).into_vec();
                Tree::build(data, &sample, height_limit, &mut rng)
            })
            .collect();
        Self { trees, sample_size }
    }

    /// Anomaly score `2^(-E[h(x)] / c(psi))` in (0, 1].
    pub fn score(&self, x: &[f64]) -> f64 {
        let c = average_path_length(self.sample_size);
        if c == 0.0 {
            return 0.5;
        }
        let mean = self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64;
        2f64.powf(-mean / c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c_of_small_n() {
        assert_eq!(average_path_length(1), 0.0);
        assert_eq!(average_path_length(2), 1.0);
        // 2 (ln 2 + gamma) - 4/3
        let expected = 2.0 * (2f64.ln() + EULER_GAMMA) - 4.0 / 3.0;
        assert!((average_path_length(3) - expected).abs() < 1e-15);
    }

    #[test]
    fn isolated_point_scores_highest() {
        let mut pts: Vec<Vec<f64>> = (0..200)
            .map(|i| vec![((i * 31) % 17) as f64 * 0.01, ((i * 13) % 19) as f64 * 0.01])
            .collect();
        pts.push(vec![5.0, 5.0]);
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let forest = IsolationForest::fit(&refs, 100, 256, 3);
        let scores: Vec<f64> = refs.iter().map(|p| forest.score(p)).collect();
        let outlier = scores[200];
        assert!(scores[..200].iter().all(|&s| s < outlier));
        assert!(outlier > 0.6);
    }
}
