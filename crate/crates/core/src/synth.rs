//! Seeded synthetic corpora with known per-family detector strengths.
//!
//! * `Spikes`: white noise with isolated large spikes.
//! * `MotifBreak`: a noisy periodic motif with some periods replaced by a
//!   different shape of the same amplitude.
//! * `Drift`: a smooth random walk with short local bends.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::LabeledSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Spikes,
    MotifBreak,
    Drift,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Spikes, Family::MotifBreak, Family::Drift];

    pub fn dataset_name(self) -> &'static str {
        match self {
            Family::Spikes => "SpikeNoise",
            Family::MotifBreak => "PeriodicMotif",
            Family::Drift => "SmoothDrift",
        }
    }

    fn description(self) -> &'static str {
        match self {
            Family::Spikes => "sensor noise with sudden isolated spikes",
            Family::MotifBreak => "a repeating cycle where some cycles change shape",
            Family::Drift => "a slowly wandering level with brief local bends",
        }
    }

    fn prefix(self) -> &'static str {
        match self {
            Family::Spikes => "spk",
            Family::MotifBreak => "mot",
            Family::Drift => "dft",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Series per family.
    pub per_family: usize,
    pub length: usize,
    /// Period of the motif family.
    pub period: usize,
    pub families: Vec<Family>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            per_family: 10,
            length: 512,
            period: 32,
            families: Family::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// Series are interleaved by family: `spk-000, mot-000, dft-000, spk-001, ...`.
pub fn generate(config: &SynthConfig) -> Vec<LabeledSeries> {
    let mut out = Vec::with_capacity(config.per_family * config.families.len());
    for k in 0..config.per_family {
        for (f, &family) in config.families.iter().enumerate() {
            let stream = (k * config.families.len() + f) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(stream);
            let (values, labels) = match family {
                Family::Spikes => spikes(config.length, &mut rng),
                Family::MotifBreak => motif_break(config.length, config.period, &mut rng),
                Family::Drift => drift(config.length, &mut rng),
            };
            let mut s = LabeledSeries::new(format!("{}-{k:03}", family.prefix()), values, labels);
            s.dataset_name = family.dataset_name().to_string();
            s.domain_text = family.description().to_string();
            out.push(s);
        }
    }
    out
}

/// Family of a series generated by [`generate`], from its id prefix.
pub fn family_of(series_id: &str) -> Option<Family> {
    Family::ALL.into_iter().find(|f| series_id.starts_with(f.prefix()))
}

/// Anomaly positions spaced at least `gap` apart, away from the edges.
fn positions(n: usize, count: usize, width: usize, gap: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let lo = gap;
    let hi = n.saturating_sub(gap + width);
    let mut picked: Vec<usize> = Vec::new();
    let mut tries = 0;
    while picked.len() < count && tries < 1000 && hi > lo {
        tries += 1;
        let p = rng.random_range(lo..hi);
        if picked.iter().all(|&q| p.abs_diff(q) >= gap + width) {
            picked.push(p);
        }
    }
    picked.sort_unstable();
    picked
}

fn spikes(n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let noise = Normal::new(0.0, 1.0).expect("valid normal");
    let mut values: Vec<f64> = (0..n).map(|_| noise.sample(rng)).collect();
    let mut labels = vec![0u8; n];
    let count = rng.random_range(3..=5);
    for p in positions(n, count, 1, 40, rng) {
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        values[p] += sign * rng.random_range(7.0..10.0);
        labels[p] = 1;
    }
    (values, labels)
}

fn motif(phase: f64) -> f64 {
    let x = phase.rem_euclid(1.0);
    (2.0 * std::f64::consts::PI * x).sin() + 0.5 * (4.0 * std::f64::consts::PI * x).sin()
}

fn motif_break(n: usize, period: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let offset = rng.random_range(0..period);
    // slow amplitude swell and level trend: normal behaviour that only a
    // shape-based detector ignores
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let slope = rng.random_range(-4.0..4.0) / n as f64;
    let envelope = |t: usize| 1.0 + 0.6 * (std::f64::consts::TAU * t as f64 / (0.8 * n as f64) + phi).sin();
    let mut shape: Vec<f64> = (0..n).map(|t| motif((t + offset) as f64 / period as f64)).collect();
    let mut labels = vec![0u8; n];
    for p in positions(n, 1, period, 2 * period, rng) {
        // align to a cycle start so the replacement joins smoothly
        let start = p - (p + offset) % period;
        for t in start..(start + period).min(n) {
            let x = (t + offset) as f64 / period as f64;
            shape[t] = 1.2 * (std::f64::consts::TAU * x).sin();
            labels[t] = 1;
        }
    }
    let values = shape
        .iter()
        .enumerate()
        .map(|(t, v)| envelope(t) * v + slope * t as f64 + noise.sample(rng))
        .collect();
    (values, labels)
}

fn drift(n: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let step = Normal::new(0.0, 0.05).expect("valid normal");
    let jitter = Normal::new(0.0, 0.01).expect("valid normal");
    let mut velocity = 0.0;
    let mut level = 0.0;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        velocity = 0.98 * velocity + step.sample(rng);
        level += velocity;
        values.push(level + jitter.sample(rng));
    }
    let mut labels = vec![0u8; n];
    let width = 6;
    let count = rng.random_range(2..=4);
    for p in positions(n, count, width, 40, rng) {
        let height = rng.random_range(0.6..1.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
        for k in 0..width {
            // triangular bend
            let frac = 1.0 - ((k as f64 + 0.5) - width as f64 / 2.0).abs() / (width as f64 / 2.0);
            values[p + k] += height * frac;
            labels[p + k] = 1;
        }
    }
    (values, labels)
}
