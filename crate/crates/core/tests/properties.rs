use std::path::Path;

use odformer_core::data::{parse_manifest, resize_mask_nearest, synth_fundus, Mask, SynthGeometry};
use odformer_core::nn::{softmax, window_merge, window_partition};
use odformer_core::train::{metrics, ConfusionCounts};
use odformer_core::{Checkpoint, Tape, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(-10.0f64..10.0, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn small_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..4)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reshape_round_trip(t in small_shape().prop_flat_map(tensor)) {
        let shape = t.shape().to_vec();
        let flat = t.clone().reshape(&[t.len()]).unwrap();
        prop_assert_eq!(flat.data(), t.data());
        prop_assert_eq!(flat.reshape(&shape).unwrap(), t);
    }

    #[test]
    fn concat_then_slice(a in 1usize..4, b in 1usize..4, rest in 1usize..4, seed in any::<u64>()) {
        let mut s = seed;
        let mut next = move || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (s >> 11) as f64 / (1u64 << 53) as f64 };
        let x = Tensor::from_fn(&[2, a, rest], |_| next()).unwrap();
        let y = Tensor::from_fn(&[2, b, rest], |_| next()).unwrap();
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let c = tape.concat(&[xv, yv], 1).unwrap();
        prop_assert_eq!(tape.shape(c), &[2, a + b, rest]);
        let xs = tape.slice(c, 1, 0, a).unwrap();
        let ys = tape.slice(c, 1, a, b).unwrap();
        prop_assert_eq!(tape.value(xs), &x);
        prop_assert_eq!(tape.value(ys), &y);
    }

    #[test]
    fn window_round_trip(n in 1usize..3, c in 1usize..4, m in 1usize..4, gh in 1usize..4, gw in 1usize..4) {
        let (h, w) = (m * gh, m * gw);
        let x = Tensor::from_fn(&[n, c, h, w], |i| i as f64).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let tokens = window_partition(&mut tape, xv, m).unwrap();
        prop_assert_eq!(tape.shape(tokens), &[n * gh * gw, m * m, c]);
        let back = window_merge(&mut tape, tokens, n, h, w).unwrap();
        prop_assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn softmax_rows_sum_to_one(t in (1usize..5, 1usize..9).prop_flat_map(|(r, c)| tensor(vec![r, c])), scale in 0.1f64..50.0) {
        let mut tape = Tape::new();
        let scaled = Tensor::from_fn(t.shape(), |i| t.data()[i] * scale).unwrap();
        let v = tape.constant(scaled);
        let p = softmax(&mut tape, v, 1).unwrap();
        let cols = t.shape()[1];
        for row in tape.value(p).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn metrics_bounded_and_ordered(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..200)) {
        let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let mut c = ConfusionCounts::new(3);
        c.update(&pred, &truth).unwrap();
        for k in 0..3 {
            prop_assert_eq!(c.tp[k] + c.fp[k] + c.fn_[k] + c.tn[k], pred.len() as u64);
            let m = metrics(&c, k).unwrap();
            for v in [m.iou, m.fsc, m.acc].into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let (Some(iou), Some(fsc)) = (m.iou, m.fsc) {
                prop_assert!(iou <= fsc + 1e-15);
            }
            prop_assert_eq!(m.iou.is_none(), c.tp[k] + c.fp[k] + c.fn_[k] == 0);
        }
    }

    #[test]
    fn confusion_is_additive(pairs in prop::collection::vec((0usize..2, 0usize..2), 2..100), cut in 0usize..100) {
        let cut = cut % pairs.len();
        let (pred, truth): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let mut whole = ConfusionCounts::new(2);
        whole.update(&pred, &truth).unwrap();
        let mut a = ConfusionCounts::new(2);
        a.update(&pred[..cut], &truth[..cut]).unwrap();
        let mut b = ConfusionCounts::new(2);
        b.update(&pred[cut..], &truth[cut..]).unwrap();
        a += &b;
        prop_assert_eq!(a, whole);
    }

    #[test]
    fn manifest_order_does_not_change_entries(perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
        let line = |i: usize| format!(
            r#"{{"image":"img{i}.ppm","mask":"img{i}_mask.pgm","split":"{}","id":"s{i}"}}"#,
            if i.is_multiple_of(3) { "val" } else { "train" }
        );
        let ordered = parse_manifest(&(0..6).map(line).collect::<Vec<_>>().join("\n")).unwrap();
        let shuffled = parse_manifest(&perm.iter().map(|&i| line(i)).collect::<Vec<_>>().join("\n")).unwrap();
        let key = |e: &odformer_core::data::ManifestEntry| (e.id.clone(), e.split, e.image.clone(), e.mask.clone());
        let mut a: Vec<_> = ordered.iter().map(key).collect();
        let mut b: Vec<_> = shuffled.iter().map(key).collect();
        a.sort();
        b.sort();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn nearest_resize_keeps_label_set(h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20, bits in any::<u64>()) {
        let mask = Mask::new(h, w, (0..h * w).map(|i| ((bits >> (i % 64)) & 1) as u8).collect()).unwrap();
        let out = resize_mask_nearest(&mask, oh, ow).unwrap();
        prop_assert_eq!((out.height, out.width), (oh, ow));
        let labels = mask.classes();
        prop_assert!(out.data.iter().all(|&v| labels.contains(&(v as usize))));
        if (oh, ow) == (h, w) {
            prop_assert_eq!(out, mask);
        }
    }

    #[test]
    fn checkpoint_rejects_truncation(cut in 0usize..64) {
        let mut ck = Checkpoint::new();
        ck.push("w", &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let bytes = ck.encode();
        let cut = cut % bytes.len();
        prop_assert!(Checkpoint::decode(&bytes[..cut], Path::new("t")).is_err());
    }
}

#[test]
fn synthetic_masks_are_plausible() {
    let side = 64;
    for seed in 0..1000 {
        let s = synth_fundus(seed, side).unwrap();
        let g = SynthGeometry::from_seed(seed, side).unwrap();
        let area = s.mask.count(1) as f64 / (side * side) as f64;
        assert!((0.005..=0.13).contains(&area), "seed {seed}: area fraction {area}");
        for y in 0..side {
            for x in 0..side {
                if s.mask.at(y, x) == 1 {
                    assert!(
                        g.in_fov(x as f64 + 0.5, y as f64 + 0.5),
                        "seed {seed}: disc pixel ({x}, {y}) outside the field of view"
                    );
                }
            }
        }
    }
}
