use mitobench_core::datasets::DatasetId;
use mitobench_core::metrics::{accumulate, MetricAccumulator, IOU_EPSILON};
use mitobench_core::Exec;
use ndarray::Array2;
use proptest::prelude::*;

fn rasters() -> impl Strategy<Value = Vec<(Array2<u8>, Array2<u8>)>> {
    prop::collection::vec(
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            let n = h * w;
            (
                prop::collection::vec(0u8..3, n).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap()),
                prop::collection::vec(0u8..3, n).prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap()),
            )
        }),
        1..20,
    )
}

fn brute_force(pairs: &[(Array2<u8>, Array2<u8>)]) -> f64 {
    let mut inter = 0u64;
    let mut union = 0u64;
    for (p, g) in pairs {
        for (a, b) in p.iter().zip(g.iter()) {
            if *a > 0 && *b > 0 {
                inter += 1;
            }
            if *a > 0 || *b > 0 {
                union += 1;
            }
        }
    }
    inter as f64 / (union as f64 + IOU_EPSILON)
}

proptest! {
    #[test]
    fn streaming_matches_one_shot(pairs in rasters(), cut in 0usize..20, rev in any::<bool>()) {
        let cut = cut.min(pairs.len());
        let (head, tail) = pairs.split_at(cut);
        let mut chunks = vec![head.to_vec(), tail.to_vec()];
        if rev {
            chunks.reverse();
        }
        let mut total = MetricAccumulator::new(DatasetId::Lucchi);
        for chunk in &chunks {
            let mut part = MetricAccumulator::new(DatasetId::Lucchi);
            for (p, g) in chunk {
                part.update(p.view(), g.view()).unwrap();
            }
            total = total.merge(&part).unwrap();
        }
        prop_assert!((total.finalize() - brute_force(&pairs)).abs() <= 1e-12);
        prop_assert!(total.intersection_px <= total.union_px);
        let par = accumulate(DatasetId::Lucchi, &pairs, Exec::default()).unwrap();
        prop_assert_eq!(par, total);
    }

    #[test]
    fn merge_associative(a in (0u64..1000, 0u64..1000), b in (0u64..1000, 0u64..1000), c in (0u64..1000, 0u64..1000)) {
        let acc = |(i, u): (u64, u64)| MetricAccumulator { dataset_id: DatasetId::Vnc, intersection_px: i, union_px: u };
        let left = acc(a).merge(&acc(b)).unwrap().merge(&acc(c)).unwrap();
        let right = acc(a).merge(&acc(b).merge(&acc(c)).unwrap()).unwrap();
        prop_assert_eq!(left, right);
    }
}
