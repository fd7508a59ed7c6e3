use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ImageRecord;

/// Record indices of each side, ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Groups images by the category of their first object, shuffles each group
/// with `seed` and sends `floor(n·train_fraction)` of it to train. Groups
/// with fewer than two images go to train entirely. Images without objects
/// form their own group.
pub fn split_dataset(records: &[ImageRecord], train_fraction: f64, seed: u64) -> Split {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = r.objects.first().map_or("", |o| o.name.as_str());
        groups.entry(key).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = Split::default();
    for (category, mut members) in groups {
        if members.len() < 2 {
            log::warn!(
                "category {:?} has {} image(s); keeping all of them in train",
                category,
                members.len()
            );
            split.train.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        let n_train = (members.len() as f64 * train_fraction).floor() as usize;
        split.train.extend(&members[..n_train]);
        split.test.extend(&members[n_train..]);
    }
    split.train.sort_unstable();
    split.test.sort_unstable();
    split
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::data::LabeledBox;

    fn records(counts: &[(&str, usize)]) -> Vec<ImageRecord> {
        counts
            .iter()
            .flat_map(|&(name, n)| {
                (0..n).map(move |i| ImageRecord {
                    image: format!("{name}_{i}.png").into(),
                    width: 10,
                    height: 10,
                    objects: vec![LabeledBox {
                        name: name.into(),
                        bbox: BBox::new(0.0, 0.0, 5.0, 5.0),
                    }],
                })
            })
            .collect()
    }

    #[test]
    fn ten_images_split_eight_two() {
        let s = split_dataset(&records(&[("a", 10)]), 0.8, 1);
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        assert_eq!(s, split_dataset(&records(&[("a", 10)]), 0.8, 1));
    }

    #[test]
    fn floor_per_category_and_disjoint() {
        for n in 2..=50 {
            let recs = records(&[("a", n), ("b", n + 3)]);
            let s = split_dataset(&recs, 0.8, n as u64);
            let train_a = s.train.iter().filter(|&&i| i < n).count();
            assert_eq!(train_a, (n as f64 * 0.8).floor() as usize, "n = {n}");
            let train_b = s.train.len() - train_a;
            assert_eq!(train_b, ((n + 3) as f64 * 0.8).floor() as usize);
            assert!(s.train.iter().all(|i| !s.test.contains(i)));
            assert_eq!(s.train.len() + s.test.len(), recs.len());
        }
    }

    #[test]
    fn singleton_category_stays_in_train() {
        let s = split_dataset(&records(&[("solo", 1)]), 0.8, 0);
        assert_eq!((s.train, s.test), (vec![0], vec![]));
    }
}
