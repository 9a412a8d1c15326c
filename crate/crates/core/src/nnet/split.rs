use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthgen::{splitmix64, DatasetManifest};
use crate::types::{AnomalyClass, NUM_CLASSES};

/// Per-class train counts summing to `round(fraction · n)`: floors first,
/// then the largest fractional remainders (lowest class on ties) get the
/// leftover samples. Every nonempty class keeps at least one sample on
/// each side.
fn train_counts(counts: &[usize; NUM_CLASSES], fraction: f64) -> [usize; NUM_CLASSES] {
    let total: usize = counts.iter().sum();
    let target = (total as f64 * fraction).round() as usize;
    let exact: Vec<f64> = counts.iter().map(|&n| n as f64 * fraction).collect();
    let mut out = [0usize; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        out[c] = exact[c].floor() as usize;
    }
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut assigned: usize = out.iter().sum();
    for &c in order.iter().cycle().take(NUM_CLASSES * 2) {
        if assigned >= target {
            break;
        }
        if out[c] < counts[c] && (out[c] as f64) < exact[c].ceil() {
            out[c] += 1;
            assigned += 1;
        }
    }
    for c in 0..NUM_CLASSES {
        if counts[c] >= 2 {
            out[c] = out[c].clamp(1, counts[c] - 1);
        }
    }
    out
}

/// Stratified, seeded train/test split. Both outputs keep manifest order.
pub fn split_train_test(
    manifest: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} must lie in (0,1)")));
    }
    let counts = crate::synthgen::tally(&manifest.samples);
    if let Some(c) = counts.iter().position(|&n| n == 1) {
        return Err(Error::invalid(format!(
            "class {} has a single sample and cannot be split",
            AnomalyClass::ALL[c]
        )));
    }
    let n_train = train_counts(&counts, fraction);
    let mut is_train = vec![false; manifest.len()];
    for class in AnomalyClass::ALL {
        let mut idx: Vec<usize> = manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (class.index() as u64 + 1).wrapping_mul(0x53_504C_4954)));
        idx.shuffle(&mut rng);
        for &i in &idx[..n_train[class.index()]] {
            is_train[i] = true;
        }
    }
    let pick = |want: bool| {
        DatasetManifest::from_samples(
            manifest
                .samples
                .iter()
                .zip(&is_train)
                .filter(|(_, &t)| t == want)
                .map(|(s, _)| s.clone())
                .collect(),
            manifest.seed,
            manifest.generator_version.clone(),
        )
    };
    Ok((pick(true), pick(false)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{class_counts_for, default_class_fractions, Sample};
    use crate::types::{BoundingBox, CycleState};

    fn manifest(counts: &[usize; 5]) -> DatasetManifest {
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let i = samples.len();
                samples.push(Sample {
                    image_path: format!("{i}.pgm"),
                    label: AnomalyClass::ALL[c],
                    cycle_index: i as u64 / 2 + 1,
                    state: CycleState::new(4).unwrap(),
                    timestamp_ms: i as u64,
                    truth_box: BoundingBox::new(0, 0, 1, 1).unwrap(),
                    provenance: None,
                });
            }
        }
        DatasetManifest::from_samples(samples, 0, "t")
    }

    #[test]
    fn default_fractions_split_exactly() {
        let counts = class_counts_for(1000, &default_class_fractions());
        let m = manifest(&counts);
        let (train, test) = split_train_test(&m, 0.8, 5).unwrap();
        assert_eq!(train.len(), 800);
        assert_eq!(test.len(), 200);
        for c in 0..5 {
            let share = train.class_counts[c] as f64;
            assert!((share - 0.8 * counts[c] as f64).abs() <= 1.0, "class {c}: {share}");
            assert_eq!(train.class_counts[c] + test.class_counts[c], counts[c]);
        }
    }

    #[test]
    fn two_per_class_half_split() {
        let (train, test) = split_train_test(&manifest(&[2; 5]), 0.5, 1).unwrap();
        assert_eq!(train.class_counts, [1; 5]);
        assert_eq!(test.class_counts, [1; 5]);
    }

    #[test]
    fn deterministic_and_disjoint() {
        let m = manifest(&[30, 5, 6, 7, 8]);
        let a = split_train_test(&m, 0.8, 42).unwrap();
        let b = split_train_test(&m, 0.8, 42).unwrap();
        assert_eq!(a, b);
        let c = split_train_test(&m, 0.8, 43).unwrap();
        assert_ne!(a.0, c.0);
        for s in &a.0.samples {
            assert!(!a.1.samples.contains(s));
        }
    }

    #[test]
    fn singleton_class_rejected() {
        assert!(split_train_test(&manifest(&[5, 1, 2, 2, 2]), 0.8, 0).is_err());
        assert!(split_train_test(&manifest(&[5, 2, 2, 2, 2]), 1.0, 0).is_err());
    }
}
