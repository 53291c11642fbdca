//! Synthetic labelled corpora for tests and smoke runs. Each class gets its
//! own random mean direction per stream, added to every token row, so the
//! pooled attention outputs are linearly separable.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{EmbeddingTriple, IntensityLevel, MemeRecord, Split, TargetCategory};
use crate::tcrnet::Task;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub tokens: usize,
    pub dim: usize,
    /// Decides which label is balanced and drives the class shift.
    pub task: Task,
    pub shift: f32,
    pub noise: f32,
    pub seed: u64,
    pub split: Split,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            samples: 32,
            tokens: 8,
            dim: 16,
            task: Task::DarkHumor,
            shift: 1.0,
            noise: 1.0,
            seed: 0,
            split: Split::Train,
        }
    }
}

/// Records named `syn-0000`, … with classes assigned round-robin. For the
/// target and intensity tasks every record is dark.
pub fn synthetic_corpus(spec: &SyntheticSpec) -> Vec<(MemeRecord, EmbeddingTriple)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = spec.task.num_classes();
    let means: Vec<[Array1<f32>; 3]> = (0..classes)
        .map(|_| std::array::from_fn(|_| Array1::from_shape_fn(spec.dim, |_| rng.random_range(-1.0f32..1.0) * spec.shift)))
        .collect();
    (0..spec.samples)
        .map(|i| {
            let class = i % classes;
            let id = format!("syn-{i:04}");
            let target = TargetCategory::from_index(i % 6).expect("six targets");
            let level = IntensityLevel::from_index(i % 3).expect("three levels");
            let record = match spec.task {
                Task::DarkHumor if class == 0 => MemeRecord::non_dark(&id, spec.split),
                Task::DarkHumor => MemeRecord::dark(&id, spec.split, target, level),
                Task::Target => {
                    MemeRecord::dark(&id, spec.split, TargetCategory::from_index(class).expect("class"), level)
                }
                Task::Intensity => {
                    MemeRecord::dark(&id, spec.split, target, IntensityLevel::from_index(class).expect("class"))
                }
            };
            let mut stream = |k: usize| {
                let mut m = Array2::from_shape_fn((spec.tokens, spec.dim), |_| rng.random_range(-1.0f32..1.0) * spec.noise);
                m += &means[class][k];
                m
            };
            let triple = EmbeddingTriple {
                text: stream(0),
                reasoning: stream(1),
                image: stream(2),
            };
            (record, triple)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_are_balanced_and_consistent() {
        for task in Task::ALL {
            let corpus = synthetic_corpus(&SyntheticSpec { samples: 12, task, ..SyntheticSpec::default() });
            let mut counts = vec![0; task.num_classes()];
            for (r, t) in &corpus {
                r.validate().unwrap();
                t.validate().unwrap();
                counts[task.label(r).unwrap()] += 1;
            }
            assert!(counts.iter().all(|&c| c == 12 / task.num_classes()), "{task}: {counts:?}");
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let spec = SyntheticSpec::default();
        assert_eq!(synthetic_corpus(&spec), synthetic_corpus(&spec));
    }
}
