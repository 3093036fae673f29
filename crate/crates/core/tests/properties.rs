use memflow_core::io::Mask;
use memflow_core::losses::temporal_contrastive_loss;
use memflow_core::metrics::{contour_f, dice, jaccard};
use memflow_core::{MemoryBank, Provenance, Tape, Tensor};
use proptest::prelude::*;

fn vector(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0..10.0f64, len)
}

fn nonzero(len: usize) -> impl Strategy<Value = Vec<f64>> {
    vector(len).prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

fn mask(w: usize, h: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(any::<bool>(), w * h).prop_map(move |d| Mask::new(w, h, d).unwrap())
}

fn l_tc(vs: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<_> = vs.iter().map(|v| tape.constant(Tensor::vector(v).unwrap())).collect();
    let l = temporal_contrastive_loss(&mut tape, &vars, 1e-8).unwrap();
    tape.value(l).item().unwrap()
}

proptest! {
    #[test]
    fn softmax_columns_sum_to_one(logits in vector(12), scale in 0.1..50.0f64) {
        let mut tape = Tape::new();
        let data = logits.iter().map(|x| x * scale).collect();
        let x = tape.constant(Tensor::new(vec![3, 4], data).unwrap());
        let s = tape.softmax(x, 0).unwrap();
        let d = tape.data(s);
        for q in 0..4 {
            let sum: f64 = (0..3).map(|p| d[p * 4 + q]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!((0..3).all(|p| (0.0..=1.0).contains(&d[p * 4 + q])));
        }
    }

    #[test]
    fn cosine_is_bounded(a in nonzero(6), b in nonzero(6)) {
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(Tensor::vector(&a).unwrap()), tape.constant(Tensor::vector(&b).unwrap()));
        let s = tape.cosine_sim(va, vb).unwrap();
        let s = tape.value(s).item().unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        let self_sim = tape.cosine_sim(va, va).unwrap();
        prop_assert_eq!(tape.value(self_sim).item().unwrap(), 1.0);
    }

    #[test]
    fn contrastive_loss_is_nonnegative(vs in prop::collection::vec(nonzero(5), 0..6)) {
        let l = l_tc(&vs);
        prop_assert!(l >= 0.0 && l.is_finite());
        if vs.len() < 3 {
            prop_assert_eq!(l, 0.0);
        }
    }

    #[test]
    fn identical_values_cost_nothing(v in nonzero(8), n in 3usize..6) {
        prop_assert_eq!(l_tc(&vec![v; n]), 0.0);
    }

    #[test]
    fn readout_is_convex(
        keys in prop::collection::vec(vector(2 * 6), 1..4),
        vals in prop::collection::vec(vector(3 * 6), 3),
        query in vector(2 * 6),
    ) {
        let mut bank = MemoryBank::unbounded();
        for (i, k) in keys.iter().enumerate() {
            let key = Tensor::new(vec![1, 2, 2, 3], k.clone()).unwrap();
            let value = Tensor::new(vec![1, 3, 2, 3], vals[i % 3].clone()).unwrap();
            bank.write(i, &key, &value, Provenance::Predicted).unwrap();
        }
        let aff = bank.affinity(&Tensor::new(vec![2, 6], query).unwrap()).unwrap();
        let r = bank.readout(&aff).unwrap();
        for c in 0..3 {
            let all: Vec<f64> = (0..keys.len()).flat_map(|i| vals[i % 3][c * 6..c * 6 + 6].to_vec()).collect();
            let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for q in 0..6 {
                let x = r.data()[c * 6 + q];
                prop_assert!(x >= lo - 1e-9 && x <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn overlap_metrics_are_symmetric_and_ordered(a in mask(7, 5), b in mask(7, 5)) {
        let j = jaccard(&a, &b).unwrap();
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(j, jaccard(&b, &a).unwrap());
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&j) && j <= d);
        prop_assert_eq!(contour_f(&a, &b, 1.0).unwrap(), contour_f(&b, &a, 1.0).unwrap());
        prop_assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn fixing_a_wrong_pixel_never_hurts(pred in mask(6, 6), gt in mask(6, 6), pick in 0usize..36) {
        let wrong: Vec<usize> = (0..36).filter(|&i| pred.data[i] != gt.data[i]).collect();
        prop_assume!(!wrong.is_empty());
        let i = wrong[pick % wrong.len()];
        let mut better = pred.clone();
        better.data[i] = gt.data[i];
        prop_assert!(jaccard(&better, &gt).unwrap() >= jaccard(&pred, &gt).unwrap());
        prop_assert!(dice(&better, &gt).unwrap() >= dice(&pred, &gt).unwrap());
    }
}
