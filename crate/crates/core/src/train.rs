//! Probe training over frozen features.
//!
//! A training sample is one (video, query) pair: the query is the track's first
//! visible frame and the sample carries the correlation map of every frame with
//! its ground truth. A batch of `batch_size` samples contributes all of their
//! frames to the masked loss.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::io::annotations::VideoAnnotation;
use crate::io::manifest::DatasetVideo;
use crate::metrics::{EvalMode, MetricsReport, Pooling};
use crate::optim::{adamw_step, OptimConfig, OptimState, Schedule};
use crate::predict::{evaluate, first_visible_query, predict_probe};
use crate::probe::{
    item_loss_and_grad, loss_scales, probe_init, probe_loss, ProbeConfig, ProbeParams, ProbeSample,
};
use crate::rng::SeededRng;
use crate::tensor::{Grid, Point};
use crate::tracker::{correlation_volume, FeatureVideo};

const SHUFFLE_STREAM: u64 = 0x5f_0001;

/// Correlation maps of one query against every frame, with per-frame targets.
#[derive(Clone, Debug)]
pub struct ProbeExample {
    pub maps: Vec<Grid<f64>>,
    /// Ground truth in grid units.
    pub gt: Vec<Point<f64>>,
    pub occluded: Vec<bool>,
}

impl ProbeExample {
    pub fn samples(&self) -> impl Iterator<Item = ProbeSample<'_, f64>> {
        self.maps
            .iter()
            .zip(&self.gt)
            .zip(&self.occluded)
            .map(|((map, &gt), &occluded)| ProbeSample { map, gt, occluded })
    }
}

/// One example per annotated track, in dataset order.
pub fn probe_examples(videos: &[DatasetVideo]) -> Result<Vec<ProbeExample>> {
    let mut out = Vec::new();
    for v in videos {
        out.extend(video_examples(&v.video.cast::<f64>(), &v.annotation)?);
    }
    Ok(out)
}

/// Examples of one video's tracks.
pub fn video_examples(video: &FeatureVideo<f64>, annotation: &VideoAnnotation) -> Result<Vec<ProbeExample>> {
    let geom = video.geometry();
    annotation
        .tracks
        .iter()
        .map(|track| {
            let q = first_visible_query(video, track)?;
            Ok(ProbeExample {
                maps: correlation_volume(video, &q)?,
                gt: (0..track.points.len()).map(|t| geom.to_grid(track.point(t))).collect(),
                occluded: track.visible.iter().map(|&v| !v).collect(),
            })
        })
        .collect()
}

/// Validation summary stored in the history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub delta_avg: f64,
    pub aj: Option<f64>,
    pub oa: Option<f64>,
}

impl From<&MetricsReport> for ValMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self {
            delta_avg: r.delta_avg,
            aj: r.aj,
            oa: r.oa,
        }
    }
}

/// Epoch 0 describes the model before the first update; its `train_loss` is
/// the full training-set loss. Later epochs record the mean minibatch loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub steps: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val: Option<ValMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Full training-set loss at initialization and after the last epoch.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainHistory {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Shuffled index batches for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub(crate) fn shuffle_rng(seed: u64) -> SeededRng {
    SeededRng::derived(seed, SHUFFLE_STREAM)
}

/// Masked loss over every frame of every example.
pub fn dataset_probe_loss(
    examples: &[ProbeExample],
    params: &ProbeParams<f64>,
    config: &ProbeConfig,
) -> Result<f64> {
    let samples: Vec<_> = examples.iter().flat_map(ProbeExample::samples).collect();
    probe_loss(&samples, params, config)
}

/// Loss and gradient of one batch of examples.
pub fn batch_probe_grad(
    batch: &[&ProbeExample],
    params: &ProbeParams<f64>,
    config: &ProbeConfig,
) -> Result<(f64, ProbeParams<f64>)> {
    let (ps, os) = loss_scales(batch.iter().flat_map(|e| e.occluded.iter().copied()), config);
    let mut grad = ProbeParams::zeros();
    let mut loss = 0.0;
    for e in batch {
        for s in e.samples() {
            loss += item_loss_and_grad(&s, params, config, ps, os, &mut grad, false)?.loss;
        }
    }
    Ok((loss, grad))
}

pub(crate) fn validate_inputs(train: &[DatasetVideo], optim: &OptimConfig, probe: &ProbeConfig) -> Result<()> {
    optim.validate()?;
    probe.validate()?;
    if train.iter().all(|v| v.annotation.tracks.is_empty()) {
        return invalid("training set has no tracks");
    }
    Ok(())
}

pub(crate) fn val_metrics(
    val: &[DatasetVideo],
    params: &ProbeParams<f64>,
    config: &ProbeConfig,
) -> Result<Option<ValMetrics>> {
    if val.is_empty() {
        return Ok(None);
    }
    let pred = predict_probe(val, params, config)?;
    let report = evaluate(val, &pred, EvalMode::Full, Pooling::Frame)?;
    Ok(Some((&report).into()))
}

/// Train the probe heads from `probe_init(optim.seed)`.
pub fn train_probe(
    train: &[DatasetVideo],
    val: &[DatasetVideo],
    optim: &OptimConfig,
    probe: &ProbeConfig,
) -> Result<(ProbeParams<f64>, TrainHistory)> {
    train_probe_from(probe_init(optim.seed), train, val, optim, probe)
}

pub fn train_probe_from(
    init: ProbeParams<f64>,
    train: &[DatasetVideo],
    val: &[DatasetVideo],
    optim: &OptimConfig,
    probe: &ProbeConfig,
) -> Result<(ProbeParams<f64>, TrainHistory)> {
    validate_inputs(train, optim, probe)?;
    let examples = probe_examples(train)?;
    let schedule = optim.schedule(examples.len())?;
    let mut params = init;
    let mut flat = params.to_flat();
    let mut state = OptimState::new(flat.len());
    let mut rng = shuffle_rng(optim.seed);

    let initial_loss = dataset_probe_loss(&examples, &params, probe)?;
    let mut records = vec![EpochRecord {
        epoch: 0,
        train_loss: initial_loss,
        lr: schedule.lr_at(0),
        steps: 0,
        val: val_metrics(val, &params, probe)?,
    }];
    for epoch in 1..=optim.epochs {
        let batches = epoch_batches(examples.len(), optim.batch_size, &mut rng);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for idx in &batches {
            let batch: Vec<&ProbeExample> = idx.iter().map(|&i| &examples[i]).collect();
            let (loss, grad) = batch_probe_grad(&batch, &params, probe)?;
            lr = step_lr(&schedule, &state);
            adamw_step(&mut flat, &grad.to_flat(), &mut state, lr, optim)?;
            params.set_flat(&flat)?;
            loss_sum += loss;
        }
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            lr,
            steps: state.step,
            val: val_metrics(val, &params, probe)?,
        });
    }
    let final_loss = dataset_probe_loss(&examples, &params, probe)?;
    Ok((
        params,
        TrainHistory {
            records,
            initial_loss,
            final_loss,
        },
    ))
}

/// The k-th update (1-based) uses `lr_at(k)`, so the first update is not a no-op
/// and the last lands on the end of the schedule.
pub(crate) fn step_lr(schedule: &Schedule, state: &OptimState) -> f64 {
    schedule.lr_at(state.step as usize + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_generate, SyntheticConfig};

    fn data(num_videos: usize, seed: u64) -> Vec<DatasetVideo> {
        let cfg = SyntheticConfig {
            num_videos,
            frames: 4,
            tracks: 2,
            grid_h: 8,
            grid_w: 8,
            feature_dim: 8,
            subcell: true,
            noise: 0.3,
            occlusion_rate: 0.3,
            seed,
            ..Default::default()
        };
        synth_generate(&cfg).unwrap().dataset_videos()
    }

    #[test]
    fn overfits_a_single_example() {
        let mut videos = data(1, 3);
        videos[0].annotation.tracks.truncate(1);
        let optim = OptimConfig {
            batch_size: 1,
            epochs: 20,
            ..OptimConfig::probing()
        };
        // one example per epoch: repeat it so 20 epochs have enough updates
        let repeated: Vec<_> = std::iter::repeat_n(videos[0].clone(), 8).collect();
        let (_, hist) = train_probe(&repeated, &[], &optim, &ProbeConfig::default()).unwrap();
        assert!(
            hist.final_loss < 0.5 * hist.initial_loss,
            "{} -> {}",
            hist.initial_loss,
            hist.final_loss
        );
        assert_eq!(hist.records.len(), 21);
        assert_eq!(hist.records[20].steps, 160);
    }

    #[test]
    fn same_seed_same_parameters() {
        let videos = data(3, 1);
        let optim = OptimConfig {
            batch_size: 2,
            epochs: 2,
            seed: 9,
            ..OptimConfig::probing()
        };
        let (a, ha) = train_probe(&videos[..2], &videos[2..], &optim, &ProbeConfig::default()).unwrap();
        let (b, hb) = train_probe(&videos[..2], &videos[2..], &optim, &ProbeConfig::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha.to_jsonl(), hb.to_jsonl());
        assert!(ha.records[1].val.is_some());
        assert_eq!(ha.to_jsonl().lines().count(), 3);
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let videos = data(2, 2);
        let optim = OptimConfig {
            lr_peak: 0.0,
            weight_decay: 0.0,
            epochs: 3,
            batch_size: 3,
            ..OptimConfig::probing()
        };
        let (p, _) = train_probe(&videos, &[], &optim, &ProbeConfig::default()).unwrap();
        assert_eq!(p, probe_init::<f64>(optim.seed));
    }

    #[test]
    fn empty_training_set_is_rejected() {
        assert!(train_probe(&[], &[], &OptimConfig::probing(), &ProbeConfig::default()).is_err());
    }
}
