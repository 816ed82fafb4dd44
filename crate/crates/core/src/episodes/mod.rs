//! Datasets, class-disjoint meta-splits and K-way N-shot episode sampling.

mod imagedir;
mod synth;

pub use imagedir::{export_image_dir, load_image_dir, read_manifest, write_manifest, Normalizer};
pub use synth::{synth_generate, Difficulty, SynthKind, SynthSpec};

use std::collections::BTreeSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numcore::{NumError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum EpisodeError {
    #[error("class {0} appears in more than one split")]
    Overlap(String),
    #[error("class {0} is not in the dataset")]
    MissingClass(String),
    #[error("split has {have} classes, episode needs {need}")]
    TooFewClasses { have: usize, need: usize },
    #[error("class {class} has {have} examples, episode needs {need}")]
    TooFewExamples {
        class: String,
        have: usize,
        need: usize,
    },
    #[error("invalid episode spec: {0}")]
    InvalidSpec(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("image {path}: {msg}")]
    Image { path: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Num(#[from] NumError),
}

/// One example with a dataset-wide provenance id.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub uid: u64,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassSet {
    pub id: usize,
    pub name: String,
    pub examples: Vec<Sample>,
}

/// Labeled examples grouped by class. Every example has shape `input_shape`
/// (`[C, H, W]` for images, `[D]` for feature vectors).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_shape: Vec<usize>,
    pub classes: Vec<ClassSet>,
}

impl Dataset {
    pub fn new(input_shape: Vec<usize>, classes: Vec<ClassSet>) -> Result<Self, EpisodeError> {
        let numel: usize = input_shape.iter().product();
        if input_shape.is_empty() || numel == 0 {
            return Err(EpisodeError::Dataset(format!(
                "invalid input shape {input_shape:?}"
            )));
        }
        let mut ids = BTreeSet::new();
        let mut uids = BTreeSet::new();
        for c in &classes {
            if !ids.insert(c.id) {
                return Err(EpisodeError::Dataset(format!(
                    "duplicate class id {}",
                    c.id
                )));
            }
            for s in &c.examples {
                if s.data.len() != numel {
                    return Err(EpisodeError::Dataset(format!(
                        "example {} of class {} has {} values, expected {numel}",
                        s.uid,
                        c.name,
                        s.data.len()
                    )));
                }
                if !uids.insert(s.uid) {
                    return Err(EpisodeError::Dataset(format!(
                        "duplicate example uid {}",
                        s.uid
                    )));
                }
            }
        }
        Ok(Self {
            input_shape,
            classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn num_examples(&self) -> usize {
        self.classes.iter().map(|c| c.examples.len()).sum()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn class(&self, id: usize) -> Option<&ClassSet> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn uids(&self) -> BTreeSet<u64> {
        self.classes
            .iter()
            .flat_map(|c| c.examples.iter().map(|s| s.uid))
            .collect()
    }

    fn subset(&self, ids: &[usize]) -> Dataset {
        Dataset {
            input_shape: self.input_shape.clone(),
            classes: ids
                .iter()
                .filter_map(|&id| self.class(id).cloned())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Partitions `dataset` by class id. Lists must be pairwise disjoint and
/// name existing classes; an empty list yields an empty split.
pub fn make_splits(
    dataset: &Dataset,
    train: &[usize],
    val: &[usize],
    test: &[usize],
) -> Result<Splits, EpisodeError> {
    let mut seen = BTreeSet::new();
    for &id in train.iter().chain(val).chain(test) {
        let name = dataset
            .class(id)
            .map(|c| c.name.clone())
            .ok_or_else(|| EpisodeError::MissingClass(id.to_string()))?;
        if !seen.insert(id) {
            return Err(EpisodeError::Overlap(name));
        }
    }
    Ok(Splits {
        train: dataset.subset(train),
        val: dataset.subset(val),
        test: dataset.subset(test),
    })
}

/// Same as [`make_splits`] with class names instead of ids.
pub fn make_splits_by_name(
    dataset: &Dataset,
    train: &[String],
    val: &[String],
    test: &[String],
) -> Result<Splits, EpisodeError> {
    let lookup = |names: &[String]| -> Result<Vec<usize>, EpisodeError> {
        names
            .iter()
            .map(|n| {
                dataset
                    .classes
                    .iter()
                    .find(|c| &c.name == n)
                    .map(|c| c.id)
                    .ok_or_else(|| EpisodeError::MissingClass(n.clone()))
            })
            .collect()
    };
    make_splits(dataset, &lookup(train)?, &lookup(val)?, &lookup(test)?)
}

/// Splits the classes in order into consecutive blocks of the given sizes.
pub fn split_sequential(
    dataset: &Dataset,
    n_train: usize,
    n_val: usize,
    n_test: usize,
) -> Result<Splits, EpisodeError> {
    let ids = dataset.class_ids();
    if n_train + n_val + n_test > ids.len() {
        return Err(EpisodeError::TooFewClasses {
            have: ids.len(),
            need: n_train + n_val + n_test,
        });
    }
    make_splits(
        dataset,
        &ids[..n_train],
        &ids[n_train..n_train + n_val],
        &ids[n_train + n_val..n_train + n_val + n_test],
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub query: usize,
}

impl EpisodeSpec {
    pub fn new(way: usize, shot: usize, query: usize) -> Result<Self, EpisodeError> {
        let spec = Self { way, shot, query };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.way < 2 {
            return Err(EpisodeError::InvalidSpec(format!(
                "way must be at least 2, got {}",
                self.way
            )));
        }
        if self.shot < 1 {
            return Err(EpisodeError::InvalidSpec("shot must be at least 1".into()));
        }
        if self.query < 1 {
            return Err(EpisodeError::InvalidSpec("query must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `[K*N, ...input_shape]`, grouped by relabeled class.
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    /// `[K*Q, ...input_shape]`.
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    /// `classes[k]` is the dataset class id relabeled to `k`.
    pub classes: Vec<usize>,
    pub support_uids: Vec<u64>,
    pub query_uids: Vec<u64>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }
}

/// Uniform choice of `way` classes, then `shot + query` distinct examples
/// per class, all without replacement.
pub fn sample_episode<R: Rng + ?Sized>(
    split: &Dataset,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode, EpisodeError> {
    spec.validate()?;
    if split.num_classes() < spec.way {
        return Err(EpisodeError::TooFewClasses {
            have: split.num_classes(),
            need: spec.way,
        });
    }
    let need = spec.shot + spec.query;
    for c in &split.classes {
        if c.examples.len() < need {
            return Err(EpisodeError::TooFewExamples {
                class: c.name.clone(),
                have: c.examples.len(),
                need,
            });
        }
    }
    let chosen = index::sample(rng, split.num_classes(), spec.way).into_vec();
    let numel: usize = split.input_shape.iter().product();
    let mut sx = Vec::with_capacity(spec.way * spec.shot * numel);
    let mut qx = Vec::with_capacity(spec.way * spec.query * numel);
    let (mut sy, mut qy, mut su, mut qu) = (vec![], vec![], vec![], vec![]);
    let mut classes = vec![];
    for (k, &ci) in chosen.iter().enumerate() {
        let class = &split.classes[ci];
        classes.push(class.id);
        let picks = index::sample(rng, class.examples.len(), need).into_vec();
        for (j, &e) in picks.iter().enumerate() {
            let s = &class.examples[e];
            if j < spec.shot {
                sx.extend_from_slice(&s.data);
                sy.push(k);
                su.push(s.uid);
            } else {
                qx.extend_from_slice(&s.data);
                qy.push(k);
                qu.push(s.uid);
            }
        }
    }
    let shape = |n: usize| {
        let mut s = vec![n];
        s.extend_from_slice(&split.input_shape);
        s
    };
    Ok(Episode {
        support_x: Tensor::new(&shape(sy.len()), sx)?,
        support_y: sy,
        query_x: Tensor::new(&shape(qy.len()), qx)?,
        query_y: qy,
        classes,
        support_uids: su,
        query_uids: qu,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SplitTag {
    Train = 1,
    Val = 2,
    Test = 3,
    Init = 4,
}

/// Independent stream per `(master_seed, split, index)`.
pub fn episode_rng(master_seed: u64, tag: SplitTag, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(((tag as u64) << 48) ^ index);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per: usize) -> Dataset {
        let cs = (0..classes)
            .map(|c| ClassSet {
                id: c,
                name: format!("c{c:02}"),
                examples: (0..per)
                    .map(|i| Sample {
                        uid: (c * per + i) as u64,
                        data: vec![c as f64, i as f64],
                    })
                    .collect(),
            })
            .collect();
        Dataset::new(vec![2], cs).unwrap()
    }

    #[test]
    fn split_sizes_64_16_20() {
        let d = toy(100, 1);
        let s = split_sequential(&d, 64, 16, 20).unwrap();
        assert_eq!(
            (
                s.train.num_classes(),
                s.val.num_classes(),
                s.test.num_classes()
            ),
            (64, 16, 20)
        );
    }

    #[test]
    fn overlapping_lists_rejected() {
        let d = toy(5, 1);
        assert!(matches!(
            make_splits(&d, &[0, 1], &[1], &[2]),
            Err(EpisodeError::Overlap(_))
        ));
        assert!(matches!(
            make_splits(&d, &[0], &[], &[9]),
            Err(EpisodeError::MissingClass(_))
        ));
        let s = make_splits(&d, &[0, 1], &[], &[2]).unwrap();
        assert_eq!(s.val.num_classes(), 0);
    }

    #[test]
    fn episode_sizes_and_relabeling() {
        let d = toy(20, 20);
        let spec = EpisodeSpec::new(5, 1, 15).unwrap();
        let ep = sample_episode(&d, &spec, &mut episode_rng(1, SplitTag::Train, 0)).unwrap();
        assert_eq!(ep.support_y.len(), 5);
        assert_eq!(ep.query_y.len(), 75);
        assert_eq!(ep.support_x.shape(), &[5, 2]);
        let labels: BTreeSet<usize> = ep.support_y.iter().copied().collect();
        assert_eq!(labels, (0..5).collect());
        // row data carries the original class id in column 0
        for (n, &y) in ep.query_y.iter().enumerate() {
            assert_eq!(ep.query_x.data()[n * 2] as usize, ep.classes[y]);
        }
    }

    #[test]
    fn same_stream_same_episode() {
        let d = toy(10, 8);
        let spec = EpisodeSpec::new(3, 2, 2).unwrap();
        let a = sample_episode(&d, &spec, &mut episode_rng(5, SplitTag::Val, 3)).unwrap();
        let b = sample_episode(&d, &spec, &mut episode_rng(5, SplitTag::Val, 3)).unwrap();
        let c = sample_episode(&d, &spec, &mut episode_rng(5, SplitTag::Val, 4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn insufficient_data_errors() {
        let d = toy(4, 3);
        let mut rng = episode_rng(0, SplitTag::Train, 0);
        assert!(matches!(
            sample_episode(&d, &EpisodeSpec::new(5, 1, 1).unwrap(), &mut rng),
            Err(EpisodeError::TooFewClasses { .. })
        ));
        assert!(matches!(
            sample_episode(&d, &EpisodeSpec::new(2, 2, 2).unwrap(), &mut rng),
            Err(EpisodeError::TooFewExamples { .. })
        ));
        assert!(EpisodeSpec::new(1, 1, 1).is_err());
    }
}
