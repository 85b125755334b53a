//! Relation co-occurrence statistics.
//!
//! `M[c, c']` is the probability that predicate category `c` appears in an
//! image given that `c'` appears, counted once per image: duplicated
//! relations inside one image contribute a single observation, which keeps
//! the long-tailed frequency bias out of the prior. Predicate 0 marks
//! "no relationship" and is excluded from counting.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::datamodel::{Dataset, NON_RELATIONSHIP};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceMatrix {
    size: usize,
    /// Row-major `m[c * size + c'] = P(c | c')`.
    m: Vec<f64>,
}

impl CooccurrenceMatrix {
    pub fn identity(size: usize) -> Self {
        let mut m = vec![0.0; size * size];
        for c in 0..size {
            m[c * size + c] = 1.0;
        }
        CooccurrenceMatrix { size, m }
    }

    pub fn from_rows(size: usize, m: Vec<f64>) -> Result<Self> {
        if m.len() != size * size {
            return Err(Error::Data(format!(
                "co-occurrence matrix needs {} entries, got {}",
                size * size,
                m.len()
            )));
        }
        if m.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data(
                "co-occurrence entries must lie in [0, 1]".into(),
            ));
        }
        Ok(CooccurrenceMatrix { size, m })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// P(category `c` present | category `c_prime` present).
    pub fn prob(&self, c: usize, c_prime: usize) -> f64 {
        self.m[c * self.size + c_prime]
    }

    /// Sum over rows for a fixed conditioned-on column: `sum_c M[c, c']`.
    pub fn column_sum(&self, c_prime: usize) -> f64 {
        (0..self.size).map(|c| self.prob(c, c_prime)).sum()
    }

    /// Sum over columns for a fixed row: `sum_c' M[c, c']`.
    pub fn row_sum(&self, c: usize) -> f64 {
        (0..self.size).map(|c_prime| self.prob(c, c_prime)).sum()
    }
}

/// Count the presence-conditional matrix over a corpus.
pub fn build_cooccurrence(dataset: &Dataset) -> Result<CooccurrenceMatrix> {
    if dataset.images.is_empty() {
        return Err(Error::Data("cannot build prior from an empty dataset".into()));
    }
    let size = dataset.meta.num_predicates;
    let mut presence = vec![0u64; size];
    let mut copresence = vec![0u64; size * size];

    for image in &dataset.images {
        // collapse duplicates: each predicate type counts once per image
        let present: BTreeSet<usize> = image
            .relations
            .iter()
            .map(|r| r.predicate)
            .filter(|&p| p != NON_RELATIONSHIP)
            .collect();
        for &c in &present {
            presence[c] += 1;
        }
        for &c in &present {
            for &c2 in &present {
                copresence[c * size + c2] += 1;
            }
        }
    }

    let mut m = vec![0.0; size * size];
    for c in 0..size {
        for c_prime in 0..size {
            if presence[c_prime] == 0 {
                continue; // never-observed column stays zero
            }
            m[c * size + c_prime] = copresence[c * size + c_prime] as f64
                / presence[c_prime] as f64;
        }
    }
    // diagonal is certain for every observed category (already 1 by the
    // counting identity, set explicitly for clarity)
    for c in 0..size {
        if presence[c] > 0 {
            m[c * size + c] = 1.0;
        }
    }
    CooccurrenceMatrix::from_rows(size, m)
}

/// CSV layout: a header row of category indices, then one row per
/// conditioned-on category `c'` whose columns are `M[c, c']` for each `c`.
pub fn to_csv(matrix: &CooccurrenceMatrix) -> String {
    let size = matrix.size();
    let mut out = String::new();
    let header: Vec<String> = (0..size).map(|c| c.to_string()).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for c_prime in 0..size {
        let row: Vec<String> = (0..size)
            .map(|c| format!("{}", matrix.prob(c, c_prime)))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn from_csv(text: &str) -> Result<CooccurrenceMatrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty prior CSV".into()))?;
    let size = header.split(',').count();
    let mut m = vec![0.0; size * size];
    let mut rows = 0;
    for (c_prime, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != size {
            return Err(Error::Data(format!(
                "prior CSV row {} has {} cells, expected {}",
                c_prime + 2,
                cells.len(),
                size
            )));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Data(format!("prior CSV row {} cell {c} is not a number", c_prime + 2))
            })?;
            m[c * size + c_prime] = v;
        }
        rows += 1;
    }
    if rows != size {
        return Err(Error::Data(format!(
            "prior CSV has {rows} data rows, expected {size}"
        )));
    }
    CooccurrenceMatrix::from_rows(size, m)
}

pub fn save_csv(matrix: &CooccurrenceMatrix, path: &Path) -> Result<()> {
    fs::write(path, to_csv(matrix)).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_csv(path: &Path) -> Result<CooccurrenceMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    from_csv(&text)
}

/// Empirical predicate distribution per (subject class, object class) pair,
/// add-one smoothed over real predicates. Comparison baseline only.
#[derive(Debug, Clone)]
pub struct FrequencyBaseline {
    num_object_classes: usize,
    num_predicates: usize,
    counts: Vec<u64>,
}

impl FrequencyBaseline {
    /// Distribution over all predicates; index 0 is always zero.
    pub fn distribution(&self, c_s: usize, c_o: usize) -> Vec<f64> {
        let base = (c_s * self.num_object_classes + c_o) * self.num_predicates;
        let real = self.num_predicates - 1;
        let total: u64 = (1..self.num_predicates).map(|p| self.counts[base + p]).sum();
        let denom = total as f64 + real as f64;
        let mut dist = vec![0.0; self.num_predicates];
        for p in 1..self.num_predicates {
            dist[p] = (self.counts[base + p] as f64 + 1.0) / denom;
        }
        dist
    }
}

pub fn frequency_baseline(dataset: &Dataset) -> Result<FrequencyBaseline> {
    if dataset.images.is_empty() {
        return Err(Error::Data(
            "cannot build frequency baseline from an empty dataset".into(),
        ));
    }
    let num_object_classes = dataset.meta.num_object_classes;
    let num_predicates = dataset.meta.num_predicates;
    let mut counts = vec![0u64; num_object_classes * num_object_classes * num_predicates];
    for image in &dataset.images {
        for rel in &image.relations {
            if rel.predicate == NON_RELATIONSHIP {
                continue;
            }
            let c_s = image.objects[rel.subj].class;
            let c_o = image.objects[rel.obj].class;
            counts[(c_s * num_object_classes + c_o) * num_predicates + rel.predicate] += 1;
        }
    }
    Ok(FrequencyBaseline {
        num_object_classes,
        num_predicates,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{DatasetMeta, ObjectAnnotation, RelationAnnotation, SceneAnnotation};

    // predicates: 1 = on, 2 = wearing, 3 = riding
    fn corpus(images: Vec<Vec<usize>>) -> Dataset {
        let scenes = images
            .into_iter()
            .enumerate()
            .map(|(i, predicates)| SceneAnnotation {
                id: format!("img_{i}"),
                width: 100,
                height: 100,
                objects: vec![
                    ObjectAnnotation {
                        bbox: [0.0, 0.0, 10.0, 10.0],
                        class: 0,
                    },
                    ObjectAnnotation {
                        bbox: [20.0, 0.0, 30.0, 10.0],
                        class: 1,
                    },
                    ObjectAnnotation {
                        bbox: [40.0, 0.0, 50.0, 10.0],
                        class: 2,
                    },
                    ObjectAnnotation {
                        bbox: [60.0, 0.0, 70.0, 10.0],
                        class: 3,
                    },
                ],
                relations: predicates
                    .into_iter()
                    .enumerate()
                    .map(|(k, p)| RelationAnnotation {
                        subj: k % 3,
                        obj: 3,
                        predicate: p,
                    })
                    .collect(),
            })
            .collect();
        Dataset {
            meta: DatasetMeta {
                num_object_classes: 4,
                num_predicates: 4,
                generator: None,
            },
            images: scenes,
        }
    }

    /// The three-image hand corpus shared with the acceptance suite:
    /// I1 = {on, on, wearing}, I2 = {on}, I3 = {on, wearing, riding}.
    pub(crate) fn hand_corpus() -> Dataset {
        corpus(vec![vec![1, 1, 2], vec![1], vec![1, 2, 3]])
    }

    #[test]
    fn hand_corpus_matches_enumeration() {
        let m = build_cooccurrence(&hand_corpus()).unwrap();
        assert_eq!(m.prob(1, 2), 1.0); // P(on | wearing) = 2/2
        assert!((m.prob(2, 1) - 2.0 / 3.0).abs() < 1e-12); // P(wearing | on)
        assert_eq!(m.prob(3, 2), 0.5); // P(riding | wearing) = 1/2
        assert_eq!(m.prob(2, 3), 1.0); // P(wearing | riding) = 1/1
        for c in 1..4 {
            assert_eq!(m.prob(c, c), 1.0);
        }
        // predicate 0 never observed: its column and row stay zero
        assert_eq!(m.prob(0, 0), 0.0);
        assert_eq!(m.column_sum(0), 0.0);
    }

    #[test]
    fn duplicates_inside_one_image_do_not_change_the_matrix() {
        let a = build_cooccurrence(&corpus(vec![vec![1, 2], vec![3]])).unwrap();
        let b = build_cooccurrence(&corpus(vec![vec![1, 1, 1, 1, 1, 2, 2], vec![3, 3]])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_image_pair_is_mutually_certain() {
        let m = build_cooccurrence(&corpus(vec![vec![1, 2]])).unwrap();
        assert_eq!(m.prob(1, 2), 1.0);
        assert_eq!(m.prob(2, 1), 1.0);
    }

    #[test]
    fn integer_identity_before_division() {
        // M[c, c'] * presence(c') must reproduce the copresence count exactly
        let data = corpus(vec![vec![1, 2], vec![1], vec![2, 3], vec![1, 3]]);
        let m = build_cooccurrence(&data).unwrap();
        let presence = [0u64, 3, 2, 2]; // by hand
        let copresence_1_2 = 1u64; // images containing both on and wearing
        let reconstructed = m.prob(1, 2) * presence[2] as f64;
        assert_eq!(reconstructed, copresence_1_2 as f64);
    }

    #[test]
    fn csv_round_trip_preserves_matrix() {
        let m = build_cooccurrence(&hand_corpus()).unwrap();
        let parsed = from_csv(&to_csv(&m)).unwrap();
        assert_eq!(m, parsed);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let empty = Dataset {
            meta: DatasetMeta {
                num_object_classes: 2,
                num_predicates: 3,
                generator: None,
            },
            images: vec![],
        };
        assert!(build_cooccurrence(&empty).is_err());
    }

    #[test]
    fn baseline_argmax_follows_observed_pair() {
        let data = corpus(vec![vec![2]]);
        let baseline = frequency_baseline(&data).unwrap();
        let dist = baseline.distribution(0, 3);
        let argmax = (1..4).max_by(|&a, &b| dist[a].partial_cmp(&dist[b]).unwrap()).unwrap();
        assert_eq!(argmax, 2);
    }

    #[test]
    fn baseline_unseen_pair_is_uniform() {
        let data = corpus(vec![vec![2]]);
        let baseline = frequency_baseline(&data).unwrap();
        let dist = baseline.distribution(3, 0);
        assert!((dist[1] - dist[2]).abs() < 1e-12);
        assert!((dist[2] - dist[3]).abs() < 1e-12);
        assert_eq!(dist[0], 0.0);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
