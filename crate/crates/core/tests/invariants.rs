use std::path::Path;

use mfd_core::bfp::{self, FeaturePyramid, Level};
use mfd_core::boxes::BBox;
use mfd_core::data::{
    compute_stats, parse_voc_str, split_dataset, to_voc_xml, ImageRecord, LabeledBox, SynthConfig,
};
use mfd_core::fom::{self, OffsetGrid, Roi};
use mfd_core::tensor::{Graph, Tensor};
use proptest::prelude::*;

const NAMES: [&str; 4] = ["a", "b", "c", "d"];

fn arb_record() -> impl Strategy<Value = ImageRecord> {
    let obj = (0..4usize, 0..150u32, 0..100u32, 1..150u32, 1..120u32).prop_map(|(c, x, y, w, h)| {
        let (x, y) = (x as f64, y as f64);
        LabeledBox {
            name: NAMES[c].into(),
            bbox: BBox::new(x, y, (x + w as f64).min(200.0), (y + h as f64).min(150.0)),
        }
    });
    (prop::collection::vec(obj, 0..6), 0..1000u32).prop_map(|(objects, id)| ImageRecord {
        image: format!("im{id}.png").into(),
        width: 200,
        height: 150,
        objects,
    })
}

proptest! {
    #[test]
    fn stats_totals_agree(records in prop::collection::vec(arb_record(), 1..30)) {
        let s = compute_stats(&records).unwrap();
        let hist_total: usize = s.objects_per_image.iter().map(|(k, n)| k * n).sum();
        let hist_images: usize = s.objects_per_image.values().sum();
        let b = s.size_buckets;
        prop_assert_eq!(hist_total, s.num_objects);
        prop_assert_eq!(hist_images, s.num_images);
        prop_assert_eq!(b.small + b.medium + b.large, s.num_objects);
        prop_assert_eq!(s.objects_per_category.values().sum::<usize>(), s.num_objects);
        for (name, n) in &s.images_per_category {
            prop_assert!(*n <= s.num_images && *n <= s.objects_per_category[name]);
        }
    }

    #[test]
    fn split_is_floor_per_category_and_disjoint(
        sizes in prop::collection::vec(2..50usize, 1..4),
        seed in any::<u64>(),
    ) {
        let records: Vec<ImageRecord> = sizes
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |i| ImageRecord {
                image: format!("{c}_{i}.png").into(),
                width: 10,
                height: 10,
                objects: vec![LabeledBox { name: NAMES[c].into(), bbox: BBox::new(0.0, 0.0, 4.0, 4.0) }],
            }))
            .collect();
        let s = split_dataset(&records, 0.8, seed);
        for (c, &n) in sizes.iter().enumerate() {
            let in_train = s.train.iter().filter(|&&i| records[i].objects[0].name == NAMES[c]).count();
            prop_assert_eq!(in_train, n * 4 / 5);
        }
        prop_assert!(s.train.iter().all(|i| s.test.binary_search(i).is_err()));
        prop_assert_eq!(s.train.len() + s.test.len(), records.len());
        prop_assert_eq!(s, split_dataset(&records, 0.8, seed));
    }

    #[test]
    fn voc_round_trip(record in arb_record()) {
        let (back, warnings) = parse_voc_str(&to_voc_xml(&record), Path::new("x.xml")).unwrap();
        prop_assert!(warnings.is_empty());
        prop_assert_eq!(back, record);
    }

    #[test]
    fn synthetic_boxes_stay_on_the_canvas(seed in 0..50u64, side in 64..160usize) {
        let cfg = SynthConfig {
            seed,
            train_images: 3,
            test_images: 1,
            width: side,
            height: side,
            min_size: 12,
            max_size: side / 2,
            ..SynthConfig::default()
        };
        let corpus = mfd_core::data::generate_synthetic(&cfg).unwrap();
        for s in corpus.train.iter().chain(&corpus.test) {
            for o in &s.record.objects {
                let b = o.bbox;
                prop_assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= side as f64 && b.y2 <= side as f64);
                prop_assert!(b.x2 > b.x1 && b.y2 > b.y1);
            }
        }
    }

    #[test]
    fn graph_offset_scaling_matches_the_grid(
        rois in prop::collection::vec((0.0..10.0f64, 0.0..10.0f64, 1.0..8.0f64, 1.0..8.0f64), 1..4),
        alpha in 0.0..0.5f64,
        seed in any::<u64>(),
    ) {
        let k = 2;
        let rois: Vec<Roi> = rois.into_iter().map(|(x, y, w, h)| Roi::new(0, x, y, x + w, y + h).unwrap()).collect();
        let normalized = Tensor::from_fn([rois.len(), 2 * k * k, 1, 1], |[r, m, _, _]| {
            (((seed ^ (r * 31 + m) as u64).wrapping_mul(0x9e3779b97f4a7c15) >> 40) as f64 / (1u64 << 24) as f64) - 0.5
        });
        let mut g = Graph::new();
        let v = g.constant(normalized.clone());
        let scaled = fom::scale_offsets(&mut g, v, &rois, alpha).unwrap();
        let got = g.value(scaled).data();
        for (r, roi) in rois.iter().enumerate() {
            let row = &normalized.data()[r * 2 * k * k..(r + 1) * 2 * k * k];
            let pairs: Vec<(f64, f64)> = row.chunks(2).map(|p| (p[0], p[1])).collect();
            let grid = OffsetGrid::from_normalized(pairs, roi, alpha).unwrap();
            prop_assert!(grid.consistency_error(roi) == 0.0);
            for (j, &(sx, sy)) in grid.scaled.iter().enumerate() {
                let base = r * 2 * k * k + 2 * j;
                prop_assert!((got[base] - sx).abs() <= 1e-12 && (got[base + 1] - sy).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn balanced_map_has_the_reference_shape(c in 1..4usize, finest in 6..20usize) {
        let mut g = Graph::new();
        let levels = (0..4)
            .map(|i| Level {
                index: i + 2,
                stride: 4 << i,
                map: g.constant(Tensor::full([1, c, (finest >> i).max(1), (finest >> i).max(1)], i as f64)),
            })
            .collect();
        let p = FeaturePyramid::new(levels);
        let b = bfp::integrate(&mut g, &p, bfp::REFERENCE_LEVEL).unwrap();
        let reference = p.level(bfp::REFERENCE_LEVEL).unwrap().map;
        prop_assert_eq!(g.value(b.b_mix).shape(), g.value(reference).shape());
        let out = bfp::rescatter(&mut g, &p, b.b_mix).unwrap();
        prop_assert_eq!(out.shapes(&g), p.shapes(&g));
    }
}

#[test]
fn forward_replay_is_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 3, 9, 7], |[n, c, h, w]| ((n * 7 + c * 5 + h * 3 + w) as f64).sin()));
        let w = g.param(Tensor::from_fn([4, 3, 3, 3], |[o, i, h, w]| ((o + 2 * i + 3 * h + 5 * w) as f64).cos() * 0.3));
        let b = g.param(Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]));
        let y = g.conv2d(x, w, b, 2, 1).unwrap();
        let y = g.relu(y);
        let y = g.resize_bilinear(y, 11, 6).unwrap();
        g.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
