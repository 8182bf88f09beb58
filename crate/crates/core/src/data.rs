//! Turning event streams into model inputs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_events, rand_augment, AugmentConfig};
use crate::event_io::EventStream;
use crate::histogram::{preprocess, ChannelLayout, EventHistogram};
use crate::{derive_seed, rng_from_seed};

/// Channel layout and spatial size of the tensors fed to a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub layout: ChannelLayout,
    pub size: (usize, usize),
}

/// A pool of event streams, optionally labeled.
#[derive(Debug, Clone, Default)]
pub struct HistogramSource {
    pub streams: Vec<EventStream>,
    pub labels: Vec<usize>,
}

impl HistogramSource {
    pub fn unlabeled(streams: Vec<EventStream>) -> Self {
        HistogramSource { streams, labels: Vec::new() }
    }

    pub fn labeled(streams: Vec<EventStream>, labels: Vec<usize>) -> Self {
        assert_eq!(streams.len(), labels.len());
        HistogramSource { streams, labels }
    }

    /// The samples at `ids`, in that order. Labels follow when present.
    pub fn subset(&self, ids: &[usize]) -> Self {
        HistogramSource {
            streams: ids.iter().map(|&i| self.streams[i].clone()).collect(),
            labels: if self.labels.is_empty() { Vec::new() } else { ids.iter().map(|&i| self.labels[i]).collect() },
        }
    }

    pub fn len(&self) -> usize {
        self.streams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.streams.is_empty()
    }

    pub fn epoch_order<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order
    }

    /// Sample indices of batch `step`: consecutive positions of a stream of
    /// epochs, each epoch a fresh permutation keyed by `(seed, epoch)`.
    pub fn batch_indices(&self, seed: u64, step: usize, batch_size: usize) -> Vec<usize> {
        let n = self.len();
        if n == 0 {
            return Vec::new();
        }
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (step * batch_size..(step + 1) * batch_size)
            .map(|pos| {
                let epoch = pos / n;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut rng = rng_from_seed(derive_seed(seed, 2, epoch as u64));
                    cached = Some((epoch, self.epoch_order(&mut rng)));
                }
                cached.as_ref().unwrap().1[pos % n]
            })
            .collect()
    }

    /// Augmented training input: event-level transforms, preprocessing, then
    /// RandAugment on the normalized histogram.
    pub fn train_input<R: Rng + ?Sized>(&self, i: usize, spec: &InputSpec, aug: &AugmentConfig, rng: &mut R) -> EventHistogram {
        let events = augment_events(&self.streams[i], aug, rng);
        let hist = preprocess(&events, aug.n_max, spec.layout, Some(spec.size));
        rand_augment(&hist, aug.randaugment_ops, aug.randaugment_magnitude, rng)
    }

    /// Deterministic input: the first `n_max` events, no augmentation.
    pub fn eval_input(&self, i: usize, spec: &InputSpec, n_max: usize) -> EventHistogram {
        preprocess(&self.streams[i], n_max, spec.layout, Some(spec.size))
    }

    pub fn eval_inputs(&self, spec: &InputSpec, n_max: usize) -> Vec<EventHistogram> {
        (0..self.len()).map(|i| self.eval_input(i, spec, n_max)).collect()
    }
}
