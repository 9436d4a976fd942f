use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::error::{Error, Result};
use crate::loss::one_hot;
use crate::nn::{HeadMode, Targets, CLASS_BACKGROUND, CLASS_DRIVABLE, CLASS_LANE, SINGLE_HEAD_CLASSES};
use crate::tensor::{Element, Tensor};

/// Stacked images with one-hot targets per head.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T: Element> {
    pub ids: Vec<String>,
    /// `[N, 3, H, W]`.
    pub images: Tensor<T>,
    pub targets: Targets<T>,
}

/// Single-head labels: lane over drivable over background.
pub fn single_head_labels(sample: &Sample) -> Vec<u8> {
    sample
        .da
        .data()
        .iter()
        .zip(sample.lane.data())
        .map(|(&d, &l)| match (d, l) {
            (_, 1) => CLASS_LANE,
            (1, _) => CLASS_DRIVABLE,
            _ => CLASS_BACKGROUND,
        })
        .collect()
}

pub fn make_batch<T: Element>(samples: &[&Sample], head_mode: HeadMode) -> Result<Batch<T>> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (w, h) = (first.width(), first.height());
    if let Some(s) = samples.iter().find(|s| (s.width(), s.height()) != (w, h)) {
        return Err(Error::Dataset {
            id: s.id.clone(),
            detail: format!("size {}x{} differs from batch size {w}x{h}", s.width(), s.height()),
        });
    }
    let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.cast()).collect();
    let targets = match head_mode {
        HeadMode::TwoHeads => {
            let da: Vec<&[u8]> = samples.iter().map(|s| s.da.data()).collect();
            let lane: Vec<&[u8]> = samples.iter().map(|s| s.lane.data()).collect();
            Targets::Two {
                da: one_hot(&da, 2, h, w)?,
                lane: one_hot(&lane, 2, h, w)?,
            }
        }
        HeadMode::SingleHead => {
            let labels: Vec<Vec<u8>> = samples.iter().map(|s| single_head_labels(s)).collect();
            let refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
            Targets::Single(one_hot(&refs, SINGLE_HEAD_CLASSES, h, w)?)
        }
    };
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        images: Tensor::stack(&images)?,
        targets,
    })
}

/// Permutation of `0..len` for `epoch`, fixed by `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Batches of one epoch in shuffled order; the last batch may be partial.
pub fn batch_iter<'a, T: Element>(
    samples: &'a [Sample],
    batch_size: usize,
    seed: u64,
    epoch: usize,
    head_mode: HeadMode,
) -> Result<impl Iterator<Item = Result<Batch<T>>> + 'a> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be ≥ 1"));
    }
    let order = epoch_order(samples.len(), seed, epoch);
    let groups: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(groups.into_iter().map(move |g| {
        let refs: Vec<&Sample> = g.iter().map(|&i| &samples[i]).collect();
        make_batch(&refs, head_mode)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    #[test]
    fn batches_partition_each_epoch() {
        let samples = synth_generate(7, 1, 16, 16).unwrap();
        let batches: Vec<Batch<f32>> = batch_iter(&samples, 3, 5, 0, HeadMode::TwoHeads)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(batches.iter().map(|b| b.ids.len()).collect::<Vec<_>>(), vec![3, 3, 1]);
        let mut ids: Vec<String> = batches.iter().flat_map(|b| b.ids.clone()).collect();
        ids.sort();
        assert_eq!(ids, samples.iter().map(|s| s.id.clone()).collect::<Vec<_>>());
        assert_eq!(batches[0].images.shape(), &[3, 3, 16, 16]);
    }

    #[test]
    fn order_fixed_by_seed_and_epoch() {
        assert_eq!(epoch_order(20, 3, 4), epoch_order(20, 3, 4));
        assert_ne!(epoch_order(20, 3, 4), epoch_order(20, 3, 5));
    }

    #[test]
    fn oversized_batch_is_single() {
        let samples = synth_generate(4, 1, 16, 16).unwrap();
        let n = batch_iter::<f32>(&samples, 10, 0, 0, HeadMode::SingleHead).unwrap().count();
        assert_eq!(n, 1);
        assert!(batch_iter::<f32>(&samples, 0, 0, 0, HeadMode::SingleHead).is_err());
    }

    #[test]
    fn lane_wins_in_single_head_labels() {
        let s = &synth_generate(1, 2, 32, 32).unwrap()[0];
        let labels = single_head_labels(s);
        for (i, &l) in labels.iter().enumerate() {
            let expected = if s.lane.data()[i] == 1 { 2 } else { s.da.data()[i] };
            assert_eq!(l, expected);
        }
    }
}
