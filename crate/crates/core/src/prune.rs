//! Per-epoch dynamic pruning.
//!
//! Both strategies drop each low-loss sample (running mean below the global
//! mean) with probability `r`. PA additionally groups the high-loss samples
//! into buckets keyed by SimHash code and equi-depth loss bin and prunes
//! every multi-sample bucket the same way. Survivors of a pruning draw carry
//! a `1/(1-r)` rescale factor so the expected loss matches the full set.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("LSH needs 1..=64 bits, got {0}")]
    Bits(usize),
    #[error("vector {index} has dimension {got}, expected {expected}")]
    Dimension { index: usize, expected: usize, got: usize },
    #[error("pruning ratio must lie in [0, 1), got {0}")]
    Ratio(f64),
    #[error("bin count must be at least 1")]
    Bins,
    #[error("sample {0} is not part of this epoch's plan")]
    NotInPlan(usize),
    #[error("ledger covers {ledger} samples but the index covers {index}")]
    SizeMismatch { ledger: usize, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneStrategy {
    #[default]
    None,
    InfoBatch,
    Pa,
}

/// Running mean loss per sample. Unseen samples read as `+inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossLedger {
    sums: Vec<f64>,
    counts: Vec<u32>,
}

impl LossLedger {
    pub fn new(n: usize) -> Self {
        Self {
            sums: vec![0.0; n],
            counts: vec![0; n],
        }
    }

    /// Ledger with a single observation per sample.
    pub fn from_losses(losses: &[f64]) -> Self {
        Self {
            sums: losses.to_vec(),
            counts: vec![1; losses.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    pub fn record(&mut self, sample: usize, loss: f64) {
        self.sums[sample] += loss;
        self.counts[sample] += 1;
    }

    pub fn mean(&self, sample: usize) -> f64 {
        match self.counts[sample] {
            0 => f64::INFINITY,
            c => self.sums[sample] / c as f64,
        }
    }

    pub fn count(&self, sample: usize) -> u32 {
        self.counts[sample]
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.mean(i)).collect()
    }

    /// Mean of the per-sample means; `+inf` while any sample is unseen.
    pub fn global_mean(&self) -> f64 {
        if self.is_empty() {
            return f64::INFINITY;
        }
        self.means().iter().sum::<f64>() / self.len() as f64
    }

    /// Every sample has at least one observation.
    pub fn is_warm(&self) -> bool {
        self.counts.iter().all(|&c| c > 0)
    }
}

/// Single-table SimHash over random Gaussian hyperplanes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LshIndex {
    pub bits: usize,
    pub hyperplanes: Vec<Vec<f64>>,
    pub codes: Vec<u64>,
}

impl LshIndex {
    pub fn build(samples: &[Vec<f64>], bits: usize, seed: u64) -> Result<Self, PruneError> {
        if !(1..=64).contains(&bits) {
            return Err(PruneError::Bits(bits));
        }
        let dim = samples.first().map_or(0, Vec::len);
        if let Some((index, v)) = samples.iter().enumerate().find(|(_, v)| v.len() != dim) {
            return Err(PruneError::Dimension {
                index,
                expected: dim,
                got: v.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hyperplanes: Vec<Vec<f64>> = (0..bits)
            .map(|_| {
                let mut h: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    h.iter_mut().for_each(|x| *x /= norm);
                }
                h
            })
            .collect();
        let mut index = Self {
            bits,
            hyperplanes,
            codes: Vec::new(),
        };
        index.codes = samples.iter().map(|v| index.code(v)).collect();
        Ok(index)
    }

    /// Bit `k` is set when `<x, h_k> >= 0`.
    pub fn code(&self, x: &[f64]) -> u64 {
        self.hyperplanes.iter().enumerate().fold(0u64, |acc, (k, h)| {
            let dot: f64 = h.iter().zip(x).map(|(a, b)| a * b).sum();
            if dot >= 0.0 {
                acc | (1 << k)
            } else {
                acc
            }
        })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruneStats {
    pub epoch: usize,
    pub n_total: usize,
    pub n_kept: usize,
    pub n_pruned_low: usize,
    pub n_pruned_bucket: usize,
    pub n_buckets_multi: usize,
}

/// Which samples train this epoch and with what loss weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    /// Kept sample ids in ascending order.
    pub kept: Vec<usize>,
    /// Rescale factor per sample id; `None` when pruned.
    pub factors: Vec<Option<f64>>,
    /// `(code, bin)` bucket of each high-loss sample under PA.
    pub buckets: Vec<Option<(u64, usize)>>,
    pub stats: PruneStats,
}

impl EpochPlan {
    fn from_factors(epoch: usize, factors: Vec<Option<f64>>, buckets: Vec<Option<(u64, usize)>>) -> Self {
        let kept: Vec<usize> = (0..factors.len()).filter(|&i| factors[i].is_some()).collect();
        Self {
            stats: PruneStats {
                epoch,
                n_total: factors.len(),
                n_kept: kept.len(),
                ..PruneStats::default()
            },
            kept,
            factors,
            buckets,
        }
    }

    pub fn factor(&self, sample: usize) -> Option<f64> {
        self.factors.get(sample).copied().flatten()
    }

    /// Expected `sum_kept factor * loss` equals `sum loss`; this is the
    /// realised value for one draw.
    pub fn rescaled_total(&self, losses: &[f64]) -> f64 {
        self.kept.iter().map(|&i| self.factors[i].unwrap_or(0.0) * losses[i]).sum()
    }
}

/// No pruning: every sample kept with factor 1.
pub fn plan_full(n: usize, epoch: usize) -> EpochPlan {
    EpochPlan::from_factors(epoch, vec![Some(1.0); n], vec![None; n])
}

fn check_ratio(r: f64) -> Result<(), PruneError> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(PruneError::Ratio(r))
    }
}

/// Separate streams so PA's low-loss draws match InfoBatch's for one seed.
fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut low = ChaCha8Rng::seed_from_u64(seed);
    low.set_stream(0);
    let mut bucket = ChaCha8Rng::seed_from_u64(seed);
    bucket.set_stream(1);
    (low, bucket)
}

/// Low-loss pass shared by both strategies. Returns factors with high-loss
/// samples kept at 1 and the number pruned.
fn prune_low(ledger: &LossLedger, r: f64, rng: &mut ChaCha8Rng) -> (Vec<Option<f64>>, usize) {
    let global = ledger.global_mean();
    let keep_factor = 1.0 / (1.0 - r);
    let mut pruned = 0;
    let factors = (0..ledger.len())
        .map(|i| {
            if ledger.mean(i) < global {
                if rng.random::<f64>() < r {
                    pruned += 1;
                    None
                } else {
                    Some(keep_factor)
                }
            } else {
                Some(1.0)
            }
        })
        .collect();
    (factors, pruned)
}

/// A ledger with unseen samples has no statistics yet; both planners then
/// keep everything.
pub fn plan_infobatch(ledger: &LossLedger, r: f64, epoch: usize, seed: u64) -> Result<EpochPlan, PruneError> {
    check_ratio(r)?;
    if !ledger.is_warm() {
        return Ok(plan_full(ledger.len(), epoch));
    }
    let (mut low_rng, _) = streams(seed);
    let (factors, pruned) = prune_low(ledger, r, &mut low_rng);
    let mut plan = EpochPlan::from_factors(epoch, factors, vec![None; ledger.len()]);
    plan.stats.n_pruned_low = pruned;
    Ok(plan)
}

/// Equi-depth bin per sample of `means` (already sorted ascending):
/// sizes differ by at most one with the remainder on the first bins, then
/// runs of equal values are pulled into the lowest bin they touch.
pub fn equi_depth_bins(sorted_means: &[f64], p: usize) -> Vec<usize> {
    let n = sorted_means.len();
    let (base, extra) = (n / p, n % p);
    let mut bins = Vec::with_capacity(n);
    for b in 0..p {
        let size = base + usize::from(b < extra);
        bins.extend(std::iter::repeat_n(b, size));
    }
    for k in 1..n {
        if sorted_means[k] == sorted_means[k - 1] {
            bins[k] = bins[k - 1];
        }
    }
    bins
}

pub fn plan_pa(
    ledger: &LossLedger,
    lsh: &LshIndex,
    r: f64,
    p: usize,
    epoch: usize,
    seed: u64,
) -> Result<EpochPlan, PruneError> {
    check_ratio(r)?;
    if p == 0 {
        return Err(PruneError::Bins);
    }
    if lsh.len() != ledger.len() {
        return Err(PruneError::SizeMismatch {
            ledger: ledger.len(),
            index: lsh.len(),
        });
    }
    if !ledger.is_warm() {
        return Ok(plan_full(ledger.len(), epoch));
    }
    let (mut low_rng, mut bucket_rng) = streams(seed);
    let (mut factors, pruned_low) = prune_low(ledger, r, &mut low_rng);

    let global = ledger.global_mean();
    let mut high: Vec<(f64, usize)> = (0..ledger.len())
        .map(|i| (ledger.mean(i), i))
        .filter(|&(m, _)| m >= global)
        .collect();
    high.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let sorted: Vec<f64> = high.iter().map(|h| h.0).collect();
    let bins = equi_depth_bins(&sorted, p);

    let mut buckets = vec![None; ledger.len()];
    let mut sizes: HashMap<(u64, usize), usize> = HashMap::new();
    for (&(_, i), &bin) in high.iter().zip(&bins) {
        let key = (lsh.codes[i], bin);
        buckets[i] = Some(key);
        *sizes.entry(key).or_default() += 1;
    }

    let keep_factor = 1.0 / (1.0 - r);
    let mut pruned_bucket = 0;
    for i in 0..ledger.len() {
        let Some(key) = buckets[i] else { continue };
        if sizes[&key] > 1 {
            if bucket_rng.random::<f64>() < r {
                factors[i] = None;
                pruned_bucket += 1;
            } else {
                factors[i] = Some(keep_factor);
            }
        }
    }
    let n_multi = sizes.values().filter(|&&s| s > 1).count();
    let mut plan = EpochPlan::from_factors(epoch, factors, buckets);
    plan.stats.n_pruned_low = pruned_low;
    plan.stats.n_pruned_bucket = pruned_bucket;
    plan.stats.n_buckets_multi = n_multi;
    Ok(plan)
}

/// Multiplies each `(sample, loss)` by its plan factor.
pub fn apply_plan(plan: &EpochPlan, batch: &[(usize, f64)]) -> Result<Vec<f64>, PruneError> {
    batch
        .iter()
        .map(|&(i, loss)| plan.factor(i).map(|f| f * loss).ok_or(PruneError::NotInPlan(i)))
        .collect()
}

/// Pruning runs only while `epoch < total_epochs * (1 - anneal)`.
pub fn anneal_gate(epoch: usize, total_epochs: usize, anneal: f64) -> bool {
    (epoch as f64) < total_epochs as f64 * (1.0 - anneal)
}
