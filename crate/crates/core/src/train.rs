//! Pieces shared by both training loops: minibatches, shuffling, evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Result, SidError};
use crate::math::{smooth_onehot_rows, Mat};
use crate::network::{pipeline_forward, PipelineParams};
use crate::report::{BeliefTrajectory, TrainConfig};

/// Inputs with their smoothed one-hot targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Mat,
    pub labels: Vec<usize>,
    pub targets: Mat,
}

impl Batch {
    pub fn new(x: Mat, labels: Vec<usize>, m: usize, smoothing: f64) -> Result<Self> {
        if x.rows() != labels.len() || labels.is_empty() {
            return Err(SidError::dim(format!(
                "batch of {} rows with {} labels",
                x.rows(),
                labels.len()
            )));
        }
        let targets = smooth_onehot_rows(&labels, m, smoothing)?;
        Ok(Batch { x, labels, targets })
    }

    pub fn from_dataset(ds: &Dataset, idx: &[usize], smoothing: f64) -> Result<Self> {
        let labels = idx.iter().map(|&i| ds.labels[i]).collect();
        Batch::new(ds.features.select_rows(idx), labels, ds.m, smoothing)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Minibatch order for every epoch, fixed by the seed.
pub(crate) struct BatchPlan {
    rng: ChaCha8Rng,
    n: usize,
    batch_size: usize,
}

impl BatchPlan {
    pub(crate) fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        BatchPlan {
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            n,
            batch_size,
        }
    }

    pub(crate) fn steps_per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch_size)
    }

    pub(crate) fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        idx.shuffle(&mut self.rng);
        idx.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

pub(crate) fn check_datasets(train: &Dataset, test: &Dataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(SidError::input("train and test sets must be nonempty"));
    }
    if train.m != test.m || train.dim() != test.dim() {
        return Err(SidError::dim(format!(
            "train has {} classes / {} features, test has {} / {}",
            train.m,
            train.dim(),
            test.m,
            test.dim()
        )));
    }
    Ok(())
}

pub fn accuracy(params: &PipelineParams, ds: &Dataset) -> Result<f64> {
    let out = pipeline_forward(&ds.features, params)?;
    let correct = out
        .predictions
        .iter()
        .zip(&ds.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// The first `probe_size` samples of `ds` as a batch.
pub fn probe_batch(ds: &Dataset, probe_size: usize, smoothing: f64) -> Result<Option<Batch>> {
    let n = probe_size.min(ds.len());
    if n == 0 {
        return Ok(None);
    }
    let idx: Vec<usize> = (0..n).collect();
    Batch::from_dataset(ds, &idx, smoothing).map(Some)
}

pub fn belief_trajectories(
    params: &PipelineParams,
    probe: &Batch,
) -> Result<Vec<BeliefTrajectory>> {
    let out = pipeline_forward(&probe.x, params)?;
    Ok(probe
        .labels
        .iter()
        .enumerate()
        .map(|(i, &y)| BeliefTrajectory {
            label: y,
            true_class_prob: out.beliefs.iter().map(|b| b.get(i, y)).collect(),
        })
        .collect())
}

pub(crate) fn millis(d: std::time::Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;

    #[test]
    fn plan_covers_every_sample_once_per_epoch() {
        let mut plan = BatchPlan::new(10, 4, 3);
        assert_eq!(plan.steps_per_epoch(), 3);
        let a = plan.next_epoch();
        assert_eq!(a.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_ne!(a, plan.next_epoch());
    }

    #[test]
    fn batch_targets_are_smoothed() {
        let ds = make_blobs(6, 3, 2, 1.0, 0).unwrap();
        let b = Batch::from_dataset(&ds, &[0, 4], 0.1).unwrap();
        assert_eq!(b.labels, vec![0, 1]);
        assert!((b.targets.get(0, 0) - (0.9 + 0.1 / 3.0)).abs() < 1e-15);
        assert!(Batch::new(Mat::zeros(2, 2), vec![0], 2, 0.1).is_err());
    }
}
