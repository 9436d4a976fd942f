use proptest::prelude::*;
use twinlite::loss::{focal_loss, head_loss, one_hot, soft_counts, tversky_loss, LossConfig};
use twinlite::metrics::{argmax_mask, ConfusionAccumulator};
use twinlite::tensor::softmax_channels;
use twinlite::Tensor;

/// A batch of per-pixel distributions `[n, c, hw, 1]` and matching class maps.
fn problem(max_c: usize) -> impl Strategy<Value = (Tensor<f64>, Vec<Vec<u8>>, usize)> {
    (1usize..=2, 2usize..=max_c, 1usize..=12).prop_flat_map(|(n, c, hw)| {
        (
            prop::collection::vec(0.01f64..1.0, n * c * hw),
            prop::collection::vec(prop::collection::vec(0..c as u8, hw), n),
        )
            .prop_map(move |(raw, labels)| {
                let mut data = raw.clone();
                for b in 0..n {
                    for p in 0..hw {
                        let total: f64 = (0..c).map(|k| raw[(b * c + k) * hw + p]).sum();
                        for k in 0..c {
                            data[(b * c + k) * hw + p] /= total;
                        }
                    }
                }
                (Tensor::new(vec![n, c, hw, 1], data).unwrap(), labels, c)
            })
    })
}

fn target(labels: &[Vec<u8>], c: usize) -> Tensor<f64> {
    let refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
    one_hot(&refs, c, labels[0].len(), 1).unwrap()
}

fn true_probs(probs: &Tensor<f64>, labels: &[Vec<u8>], c: usize) -> Vec<f64> {
    let hw = labels[0].len();
    labels
        .iter()
        .enumerate()
        .flat_map(|(b, lab)| lab.iter().enumerate().map(move |(p, &k)| (b, p, k)))
        .map(|(b, p, k)| probs.data()[(b * c + k as usize) * hw + p])
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn focal_with_zero_gamma_is_cross_entropy((probs, labels, c) in problem(4)) {
        let t = target(&labels, c);
        let q = true_probs(&probs, &labels, c);
        let ce = -q.iter().map(|p| p.ln()).sum::<f64>() / q.len() as f64;
        prop_assert!((focal_loss(&probs, &t, 0.0).unwrap() - ce).abs() < 1e-12);
    }

    #[test]
    fn focal_is_nonnegative_and_falls_with_gamma((probs, labels, c) in problem(4), g in 0.0f64..5.0, dg in 0.0f64..2.0) {
        let t = target(&labels, c);
        let lo = focal_loss(&probs, &t, g).unwrap();
        let hi = focal_loss(&probs, &t, g + dg).unwrap();
        prop_assert!(lo >= 0.0);
        prop_assert!(hi <= lo + 1e-15);
    }

    #[test]
    fn raising_the_true_class_probability_never_raises_focal((probs, labels, c) in problem(3), g in 0.0f64..4.0, share in 0.0f64..1.0) {
        let t = target(&labels, c);
        let hw = labels[0].len();
        let k = labels[0][0] as usize;
        let mut up = probs.clone();
        // Move a share of the other classes' mass at pixel 0 onto the true class.
        let mut moved = 0.0;
        for ch in (0..c).filter(|&ch| ch != k) {
            let v = &mut up.data_mut()[ch * hw];
            moved += *v * share;
            *v *= 1.0 - share;
        }
        up.data_mut()[k * hw] += moved;
        prop_assert!(focal_loss(&up, &t, g).unwrap() <= focal_loss(&probs, &t, g).unwrap() + 1e-15);
    }

    #[test]
    fn tversky_with_equal_weights_is_soft_dice((probs, labels, c) in problem(4), smooth in 0.1f64..2.0) {
        let t = target(&labels, c);
        let counts = soft_counts(&probs, &t).unwrap();
        let dice_loss: f64 = (0..c)
            .map(|k| 1.0 - (2.0 * counts.tp[k] + 2.0 * smooth) / (2.0 * counts.tp[k] + counts.fn_[k] + counts.fp[k] + 2.0 * smooth))
            .sum();
        prop_assert!((tversky_loss(&probs, &t, 0.5, 0.5, smooth).unwrap() - dice_loss).abs() < 1e-12);
    }

    #[test]
    fn tversky_lies_between_zero_and_class_count(
        (probs, labels, c) in problem(4), alpha in 0.0f64..1.0, beta in 0.0f64..1.0, smooth in 0.1f64..2.0,
    ) {
        let l = tversky_loss(&probs, &target(&labels, c), alpha, beta, smooth).unwrap();
        prop_assert!((0.0..=c as f64).contains(&l));
    }

    #[test]
    fn head_loss_is_nonnegative((probs, labels, c) in problem(4)) {
        prop_assert!(head_loss(&probs, &target(&labels, c), &LossConfig::default()).unwrap() >= 0.0);
    }

    #[test]
    fn streaming_counts_match_brute_force(
        c in 2usize..=4,
        pairs in prop::collection::vec(prop::collection::vec((0u8..4, 0u8..4), 0..40), 1..6),
    ) {
        let pairs: Vec<Vec<(u8, u8)>> =
            pairs.into_iter().map(|v| v.into_iter().map(|(p, g)| (p % c as u8, g % c as u8)).collect()).collect();
        let mut streaming = ConfusionAccumulator::new(c).unwrap();
        let mut merged = ConfusionAccumulator::new(c).unwrap();
        for chunk in &pairs {
            let (pred, gt): (Vec<u8>, Vec<u8>) = chunk.iter().copied().unzip();
            streaming.update(&pred, &gt).unwrap();
            let mut part = ConfusionAccumulator::new(c).unwrap();
            part.update(&pred, &gt).unwrap();
            merged.merge(&part).unwrap();
        }
        prop_assert_eq!(&streaming, &merged);
        let all: Vec<(u8, u8)> = pairs.concat();
        prop_assert_eq!(streaming.total(), all.len() as u64);
        for k in 0..c as u8 {
            let tp = all.iter().filter(|&&(p, g)| p == k && g == k).count() as u64;
            let fp = all.iter().filter(|&&(p, g)| p == k && g != k).count() as u64;
            let fn_ = all.iter().filter(|&&(p, g)| p != k && g == k).count() as u64;
            let kk = k as usize;
            prop_assert_eq!((streaming.tp(kk), streaming.fp(kk), streaming.fn_(kk)), (tp, fp, fn_));
            prop_assert_eq!(streaming.tn(kk), all.len() as u64 - tp - fp - fn_);
            let iou = streaming.iou(kk).unwrap();
            prop_assert!((0.0..=1.0).contains(&iou));
            if tp + fp + fn_ > 0 {
                prop_assert!((iou - tp as f64 / (tp + fp + fn_) as f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn argmax_is_unchanged_by_softmax(n in 1usize..=2, c in 2usize..=4, hw in 1usize..=9, v in prop::collection::vec(-5.0f64..5.0, 72)) {
        let logits = Tensor::new(vec![n, c, hw, 1], v[..n * c * hw].to_vec()).unwrap();
        let probs = softmax_channels(&logits).unwrap();
        prop_assert_eq!(argmax_mask(&logits).unwrap(), argmax_mask(&probs).unwrap());
    }
}
