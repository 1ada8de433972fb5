use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, init_model, PipelineError, TrainConfig};
use crate::data::WindowSample;
use crate::embed::TextEmbedder;
use crate::losses::{ce_loss, combine, infonce_loss, loss_weights, pisl_loss, soft_label, LossBreakdown};
use crate::model::{Gradients, Head, ModelError, SelectorModel, Sgd, Upstream};
use crate::prune::{
    anneal_gate, plan_full, plan_infobatch, plan_pa, EpochPlan, LossLedger, LshIndex, PruneStats, PruneStrategy,
};

const TAG_PLAN: u64 = 2;
const TAG_SHUFFLE: u64 = 3;
const TAG_LSH: u64 = 4;

/// A labeled window ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub window_id: String,
    pub values: Vec<f64>,
    pub hard_label: usize,
    pub soft: Vec<f64>,
    pub text: Vec<f64>,
}

/// Keeps windows with a label; embeds each distinct metadata text once.
pub fn prepare_samples(
    windows: &[WindowSample],
    config: &TrainConfig,
    embedder: &dyn TextEmbedder,
) -> Result<Vec<TrainSample>, PipelineError> {
    let mut cache: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut out = Vec::new();
    for w in windows {
        let (Some(label), Some(perf)) = (w.hard_label, &w.performance) else {
            continue;
        };
        if w.values.len() != config.window {
            return Err(PipelineError::Config(format!(
                "window {} has length {}, config window is {}",
                w.window_id(),
                w.values.len(),
                config.window
            )));
        }
        let text = match cache.get(w.metadata_text.as_str()) {
            Some(v) => v.clone(),
            None => {
                let v = embedder.embed(&w.metadata_text)?;
                cache.insert(&w.metadata_text, v.clone());
                v
            }
        };
        out.push(TrainSample {
            window_id: w.window_id(),
            values: w.values.clone(),
            hard_label: label,
            soft: soft_label(perf, config.t_soft).probs,
            text,
        });
    }
    if out.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainEvent {
    Batch {
        epoch: usize,
        batch: usize,
        size: usize,
        loss: LossBreakdown,
        grad_norm: f64,
        wall_ms: f64,
        samples_per_sec: f64,
    },
    Epoch {
        epoch: usize,
        batches: usize,
        /// Sample-weighted mean of the batch losses.
        loss: LossBreakdown,
        pruning_active: bool,
        prune: PruneStats,
        /// Batches where the alignment term was skipped (fewer than 2 pairs).
        mki_skipped: usize,
        /// Probabilities clamped before the log.
        clamped: usize,
        wall_ms: f64,
        samples_per_sec: f64,
    },
}

impl TrainEvent {
    pub fn epoch(&self) -> usize {
        match self {
            TrainEvent::Batch { epoch, .. } | TrainEvent::Epoch { epoch, .. } => *epoch,
        }
    }

    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Self {
        let mut e = self.clone();
        match &mut e {
            TrainEvent::Batch {
                wall_ms,
                samples_per_sec,
                ..
            }
            | TrainEvent::Epoch {
                wall_ms,
                samples_per_sec,
                ..
            } => {
                *wall_ms = 0.0;
                *samples_per_sec = 0.0;
            }
        }
        e
    }

    pub fn to_ndjson(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }
}

pub trait TrainObserver {
    fn on_event(&mut self, _event: &TrainEvent) {}
    /// Called with the parameters at the end of every epoch.
    fn on_checkpoint(&mut self, _epoch: usize, _model: &SelectorModel) {}
    /// Polled before every batch.
    fn cancelled(&self) -> bool {
        false
    }
}

pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// Events collected in memory.
impl TrainObserver for Vec<TrainEvent> {
    fn on_event(&mut self, event: &TrainEvent) {
        self.push(event.clone());
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutput {
    pub loss: LossBreakdown,
    /// Unscaled per-sample objective, in batch order, for the loss ledger.
    pub per_sample: Vec<f64>,
    pub mki_skipped: bool,
    pub clamped: usize,
}

/// Loss of one batch and, when `grads` is given, its gradient.
///
/// The objective is `(1/B) sum_i f_i [(1-a) ce_i + a pisl_i] + l * nce`,
/// where `f_i` are the plan factors and `nce` is the factor-weighted
/// symmetric InfoNCE over the batch.
pub fn batch_loss(
    model: &SelectorModel,
    samples: &[TrainSample],
    ids: &[usize],
    factors: &[f64],
    config: &TrainConfig,
    mut grads: Option<&mut Gradients>,
) -> Result<BatchOutput, PipelineError> {
    let flags = config.flags.loss_flags();
    let (w_ce, w_pisl, w_mki) = loss_weights(config.alpha, config.lambda, flags);
    let b = ids.len() as f64;
    let mki_wanted = w_mki != 0.0;
    let mki_on = mki_wanted && ids.len() >= 2;

    let mut forwards = Vec::with_capacity(ids.len());
    let mut class_grads = Vec::with_capacity(ids.len());
    let mut per_sample = Vec::with_capacity(ids.len());
    let (mut ce_sum, mut pisl_sum, mut clamped) = (0.0, 0.0, 0);
    for (&id, &f) in ids.iter().zip(factors) {
        let s = &samples[id];
        let fwd = model.forward(&s.values)?;
        let ce = ce_loss(&fwd.probs, s.hard_label);
        clamped += usize::from(ce.clamped);
        let mut g: Vec<f64> = ce.grad_logits.iter().map(|x| x * w_ce * f / b).collect();
        let mut sample_total = w_ce * ce.loss;
        ce_sum += f * ce.loss;
        if flags.pisl {
            let soft = crate::losses::SoftLabel { probs: s.soft.clone() };
            let pisl = pisl_loss(&fwd.probs, &soft);
            clamped += usize::from(pisl.clamped);
            pisl_sum += f * pisl.loss;
            if w_pisl != 0.0 {
                g.iter_mut()
                    .zip(&pisl.grad_logits)
                    .for_each(|(a, p)| *a += p * w_pisl * f / b);
                sample_total += w_pisl * pisl.loss;
            }
        }
        per_sample.push(sample_total);
        class_grads.push(g);
        forwards.push(fwd);
    }

    let mut mki = 0.0;
    let mut feature_grads: Vec<Option<Vec<f64>>> = vec![None; ids.len()];
    if mki_on {
        let series_proj = forwards
            .iter()
            .map(|f| model.project(Head::Series, &f.features))
            .collect::<Result<Vec<_>, _>>()?;
        let text_proj = ids
            .iter()
            .map(|&id| model.project(Head::Text, &samples[id].text))
            .collect::<Result<Vec<_>, _>>()?;
        let u: Vec<Vec<f64>> = series_proj.iter().map(|p| p.output.clone()).collect();
        let v: Vec<Vec<f64>> = text_proj.iter().map(|p| p.output.clone()).collect();
        let nce = infonce_loss(&u, &v, config.tau_nce, Some(factors))?;
        mki = nce.loss;
        for (k, pair) in nce.per_pair.iter().enumerate() {
            per_sample[k] += w_mki * pair;
        }
        if let Some(grads) = grads.as_deref_mut() {
            for k in 0..ids.len() {
                let du: Vec<f64> = nce.grad_series[k].iter().map(|g| g * w_mki).collect();
                let dv: Vec<f64> = nce.grad_text[k].iter().map(|g| g * w_mki).collect();
                feature_grads[k] = Some(model.project_backward(Head::Series, &series_proj[k], &du, grads));
                model.project_backward(Head::Text, &text_proj[k], &dv, grads);
            }
        }
    }

    if let Some(grads) = grads {
        for ((fwd, g), df) in forwards.iter().zip(class_grads).zip(feature_grads) {
            model.backward(
                fwd,
                &Upstream {
                    logits: g,
                    features: df,
                },
                grads,
            )?;
        }
    }
    let loss = combine(ce_sum / b, pisl_sum / b, mki, config.alpha, config.lambda, flags);
    Ok(BatchOutput {
        loss,
        per_sample,
        mki_skipped: mki_wanted && !mki_on,
        clamped,
    })
}

/// Vectors hashed for PA buckets: the window, plus its text embedding when
/// the alignment term is on.
fn lsh_vectors(samples: &[TrainSample], config: &TrainConfig) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let mut v = s.values.clone();
            if config.flags.mki {
                v.extend_from_slice(&s.text);
            }
            v
        })
        .collect()
}

/// The epoch's plan under the configured strategy and anneal gate.
pub fn plan_epoch(
    config: &TrainConfig,
    ledger: &LossLedger,
    lsh: Option<&LshIndex>,
    epoch: usize,
) -> Result<(EpochPlan, bool), PipelineError> {
    let n = ledger.len();
    let strategy = config.flags.pruning;
    let active = strategy != PruneStrategy::None && anneal_gate(epoch, config.epochs, config.anneal_fraction);
    let seed = derive_seed(config.seed, TAG_PLAN, epoch as u64);
    let plan = match (active, strategy, lsh) {
        (true, PruneStrategy::InfoBatch, _) => plan_infobatch(ledger, config.prune_ratio, epoch, seed)?,
        (true, PruneStrategy::Pa, Some(lsh)) => {
            plan_pa(ledger, lsh, config.prune_ratio, config.bins, epoch, seed)?
        }
        _ => plan_full(n, epoch),
    };
    Ok((plan, active))
}

/// Kept samples in the epoch's seeded order, cut into batches.
pub fn epoch_schedule(config: &TrainConfig, plan: &EpochPlan, epoch: usize) -> Vec<Vec<usize>> {
    let mut order = plan.kept.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, TAG_SHUFFLE, epoch as u64)));
    order.chunks(config.batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SelectorModel,
    pub ledger: LossLedger,
    /// Kept-sample count per epoch.
    pub kept_per_epoch: Vec<usize>,
}

fn fault(epoch: usize, batch: usize, message: impl Into<String>, last_good: &SelectorModel) -> PipelineError {
    PipelineError::NumericFault {
        epoch,
        batch,
        message: message.into(),
        last_good: Box::new(last_good.clone()),
    }
}

/// Mini-batch SGD over `samples` with the configured losses and pruning.
pub fn train(
    samples: &[TrainSample],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome, PipelineError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(PipelineError::EmptyTrainingSet);
    }
    if let Some(s) = samples.iter().find(|s| s.text.len() != config.text_dim) {
        return Err(PipelineError::Config(format!(
            "text embedding of {} has dim {}, expected {}",
            s.window_id,
            s.text.len(),
            config.text_dim
        )));
    }
    let mut model = init_model(config)?;
    let sgd = Sgd {
        learning_rate: config.learning_rate,
        clip_bound: config.clip_bound,
        momentum: config.momentum,
    };
    let lsh = match config.flags.pruning {
        PruneStrategy::Pa => Some(LshIndex::build(
            &lsh_vectors(samples, config),
            config.lsh_bits,
            derive_seed(config.seed, TAG_LSH, 0),
        )?),
        _ => None,
    };
    let mut ledger = LossLedger::new(samples.len());
    let mut last_good = model.clone();
    let mut kept_per_epoch = Vec::with_capacity(config.epochs);
    let start = Instant::now();

    for epoch in 0..config.epochs {
        let epoch_start = Instant::now();
        let (plan, active) = plan_epoch(config, &ledger, lsh.as_ref(), epoch)?;
        kept_per_epoch.push(plan.kept.len());
        let batches = epoch_schedule(config, &plan, epoch);
        let mut sums = LossBreakdown::default();
        let mut seen = 0usize;
        let (mut mki_skipped, mut clamped) = (0, 0);

        for (b, ids) in batches.iter().enumerate() {
            if observer.cancelled() {
                return Err(PipelineError::Cancelled { epoch });
            }
            let batch_start = Instant::now();
            let factors: Vec<f64> = ids
                .iter()
                .map(|&i| plan.factor(i).ok_or(crate::prune::PruneError::NotInPlan(i)))
                .collect::<Result<_, _>>()?;
            let mut grads = model.zero_grads();
            let out = match batch_loss(&model, samples, ids, &factors, config, Some(&mut grads)) {
                Ok(out) => out,
                Err(PipelineError::Model(ModelError::NumericFault(m))) => return Err(fault(epoch, b, m, &last_good)),
                Err(e) => return Err(e),
            };
            if !out.loss.total.is_finite() {
                return Err(fault(epoch, b, "non-finite loss", &last_good));
            }
            let step = match sgd.step(&mut model, &mut grads) {
                Ok(step) => step,
                Err(ModelError::NumericFault(m)) => return Err(fault(epoch, b, m, &last_good)),
                Err(e) => return Err(e.into()),
            };
            if !model.params.is_finite() {
                return Err(fault(epoch, b, "non-finite parameters after step", &last_good));
            }
            for (&id, &l) in ids.iter().zip(&out.per_sample) {
                ledger.record(id, l);
            }
            let n = ids.len() as f64;
            sums.ce += out.loss.ce * n;
            sums.pisl += out.loss.pisl * n;
            sums.mki += out.loss.mki * n;
            sums.total += out.loss.total * n;
            seen += ids.len();
            mki_skipped += usize::from(out.mki_skipped);
            clamped += out.clamped;
            let secs = batch_start.elapsed().as_secs_f64();
            observer.on_event(&TrainEvent::Batch {
                epoch,
                batch: b,
                size: ids.len(),
                loss: out.loss,
                grad_norm: step.grad_norm,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
                samples_per_sec: if secs > 0.0 { n / secs } else { 0.0 },
            });
        }

        let denom = seen.max(1) as f64;
        let secs = epoch_start.elapsed().as_secs_f64();
        observer.on_event(&TrainEvent::Epoch {
            epoch,
            batches: batches.len(),
            loss: LossBreakdown {
                ce: sums.ce / denom,
                pisl: sums.pisl / denom,
                mki: sums.mki / denom,
                total: sums.total / denom,
            },
            pruning_active: active,
            prune: plan.stats,
            mki_skipped,
            clamped,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            samples_per_sec: if secs > 0.0 { seen as f64 / secs } else { 0.0 },
        });
        last_good = model.clone();
        observer.on_checkpoint(epoch, &model);
    }
    Ok(TrainOutcome {
        model,
        ledger,
        kept_per_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::FeatureHashEmbedder;
    use crate::metrics::PerformanceVector;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            window: 8,
            mlp_hidden: vec![12],
            proj_hidden: 8,
            proj_dim: 4,
            text_dim: 6,
            batch_size: 4,
            epochs: 3,
            learning_rate: 0.1,
            ..TrainConfig::default()
        }
    }

    fn samples(config: &TrainConfig) -> Vec<TrainSample> {
        let embedder = FeatureHashEmbedder::new(config.text_dim);
        let windows: Vec<WindowSample> = (0..10)
            .map(|k| {
                let label = k % 2;
                let values = (0..8)
                    .map(|t| if label == 0 { (t as f64).sin() } else { (t as f64 * 2.0).cos() } + k as f64 * 0.01)
                    .collect();
                let mut perf = vec![0.1; 6];
                perf[label] = 0.9;
                WindowSample {
                    series_id: format!("s{k}"),
                    offset: 0,
                    values,
                    hard_label: Some(label),
                    performance: Some(PerformanceVector::new(perf)),
                    metadata_text: format!("dataset {}", label),
                }
            })
            .collect();
        prepare_samples(&windows, config, &embedder).unwrap()
    }

    #[test]
    fn alpha_zero_matches_plain_ce_bitwise() {
        let mut a = tiny_config();
        a.alpha = 0.0;
        let mut b = a.clone();
        b.flags.pisl = true;
        let s = samples(&a);
        let ma = train(&s, &a, &mut NullObserver).unwrap().model;
        let mb = train(&s, &b, &mut NullObserver).unwrap().model;
        assert_eq!(ma.params, mb.params);
    }

    #[test]
    fn cancellation_stops_training() {
        struct Stop;
        impl TrainObserver for Stop {
            fn cancelled(&self) -> bool {
                true
            }
        }
        let c = tiny_config();
        let err = train(&samples(&c), &c, &mut Stop).unwrap_err();
        assert!(matches!(err, PipelineError::Cancelled { epoch: 0 }));
    }

    #[test]
    fn events_are_ordered_and_deterministic() {
        let mut c = tiny_config();
        c.flags = super::super::TrainFlags {
            pisl: true,
            mki: true,
            pruning: PruneStrategy::Pa,
        };
        let s = samples(&c);
        let mut e1: Vec<TrainEvent> = Vec::new();
        let mut e2: Vec<TrainEvent> = Vec::new();
        train(&s, &c, &mut e1).unwrap();
        train(&s, &c, &mut e2).unwrap();
        let strip = |v: &[TrainEvent]| v.iter().map(TrainEvent::without_timing).collect::<Vec<_>>();
        assert_eq!(strip(&e1), strip(&e2));
        let mut last = (0, 0);
        for e in &e1 {
            if let TrainEvent::Batch { epoch, batch, .. } = e {
                assert!((*epoch, *batch) >= last);
                last = (*epoch, *batch);
            }
        }
        assert_eq!(e1.iter().filter(|e| matches!(e, TrainEvent::Epoch { .. })).count(), 3);
    }

    #[test]
    fn singleton_batch_skips_alignment() {
        let mut c = tiny_config();
        c.flags.mki = true;
        let s = samples(&c);
        let m = init_model(&c).unwrap();
        let out = batch_loss(&m, &s, &[0], &[1.0], &c, None).unwrap();
        assert!(out.mki_skipped);
        assert_eq!(out.loss.mki, 0.0);
    }
}
