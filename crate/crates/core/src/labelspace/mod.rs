//! Verb/object vocabularies, composition tables and dataset splits.

mod builder;
mod check;

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use builder::{build_label_space, build_sthcom_split, SplitConfig};
pub use check::{check_split, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceSplit {
    Train,
    Test,
}

/// One annotated video as read from an annotation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    #[serde(rename = "verb")]
    pub verb_name: String,
    #[serde(rename = "object")]
    pub object_name: String,
    #[serde(rename = "split")]
    pub source_split: SourceSplit,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawLabelSpace")]
pub struct LabelSpace {
    verbs: Vec<String>,
    objects: Vec<String>,
    compositions: Vec<(usize, usize)>,
    #[serde(skip)]
    lookup: HashMap<(usize, usize), usize>,
}

#[derive(Deserialize)]
struct RawLabelSpace {
    verbs: Vec<String>,
    objects: Vec<String>,
    compositions: Vec<(usize, usize)>,
}

impl TryFrom<RawLabelSpace> for LabelSpace {
    type Error = Error;

    fn try_from(raw: RawLabelSpace) -> Result<Self> {
        LabelSpace::new(raw.verbs, raw.objects, raw.compositions)
    }
}

impl LabelSpace {
    pub fn new(verbs: Vec<String>, objects: Vec<String>, compositions: Vec<(usize, usize)>) -> Result<Self> {
        fn unique(names: &[String], kind: &str) -> Result<()> {
            let mut seen = BTreeSet::new();
            for n in names {
                if n.is_empty() {
                    return Err(Error::InvalidInput(format!("empty {kind} name")));
                }
                if !seen.insert(n) {
                    return Err(Error::InvalidInput(format!("duplicate {kind} `{n}`")));
                }
            }
            Ok(())
        }
        unique(&verbs, "verb")?;
        unique(&objects, "object")?;
        let mut lookup = HashMap::with_capacity(compositions.len());
        for (i, &(v, o)) in compositions.iter().enumerate() {
            if v >= verbs.len() || o >= objects.len() {
                return Err(Error::InvalidInput(format!("composition ({v}, {o}) out of range")));
            }
            if lookup.insert((v, o), i).is_some() {
                return Err(Error::InvalidInput(format!("duplicate composition ({v}, {o})")));
            }
        }
        Ok(Self {
            verbs,
            objects,
            compositions,
            lookup,
        })
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn compositions(&self) -> &[(usize, usize)] {
        &self.compositions
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_compositions(&self) -> usize {
        self.compositions.len()
    }

    pub fn composition(&self, index: usize) -> (usize, usize) {
        self.compositions[index]
    }

    pub fn composition_index(&self, verb: usize, object: usize) -> Option<usize> {
        self.lookup.get(&(verb, object)).copied()
    }

    pub fn verb_index(&self, name: &str) -> Option<usize> {
        self.verbs.iter().position(|v| v == name)
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.objects.iter().position(|o| o == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub composition: usize,
}

/// Composition sets and sample lists of the train/val/test partitions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_compositions: BTreeSet<usize>,
    pub val_compositions: BTreeSet<usize>,
    pub test_compositions: BTreeSet<usize>,
    pub train_samples: Vec<Sample>,
    pub val_samples: Vec<Sample>,
    pub test_samples: Vec<Sample>,
}

impl SplitSpec {
    /// Split whose composition sets are exactly those occurring in the
    /// sample lists.
    pub fn from_samples(train: Vec<Sample>, val: Vec<Sample>, test: Vec<Sample>) -> Self {
        let comps = |s: &[Sample]| s.iter().map(|x| x.composition).collect::<BTreeSet<_>>();
        Self {
            train_compositions: comps(&train),
            val_compositions: comps(&val),
            test_compositions: comps(&test),
            train_samples: train,
            val_samples: val,
            test_samples: test,
        }
    }

    pub fn compositions(&self, split: Split) -> &BTreeSet<usize> {
        match split {
            Split::Train => &self.train_compositions,
            Split::Val => &self.val_compositions,
            Split::Test => &self.test_compositions,
        }
    }

    pub fn samples(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train_samples,
            Split::Val => &self.val_samples,
            Split::Test => &self.test_samples,
        }
    }

    pub fn feasible_compositions(&self) -> BTreeSet<usize> {
        self.train_compositions
            .iter()
            .chain(&self.val_compositions)
            .chain(&self.test_compositions)
            .copied()
            .collect()
    }

    pub fn is_seen(&self, composition: usize) -> bool {
        self.train_compositions.contains(&composition)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Train,
    Feasible,
}

/// Boolean membership vector over all compositions of `space`.
pub fn composition_mask(space: &LabelSpace, split: &SplitSpec, which: MaskKind) -> Vec<bool> {
    let set = match which {
        MaskKind::Train => split.train_compositions.clone(),
        MaskKind::Feasible => split.feasible_compositions(),
    };
    (0..space.num_compositions()).map(|i| set.contains(&i)).collect()
}

/// Vocabularies and split in one serializable document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDocument {
    #[serde(flatten)]
    pub space: LabelSpace,
    #[serde(flatten)]
    pub split: SplitSpec,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn rejects_bad_compositions() {
        assert!(LabelSpace::new(names(&["a"]), names(&["x"]), vec![(1, 0)]).is_err());
        assert!(LabelSpace::new(names(&["a"]), names(&["x"]), vec![(0, 0), (0, 0)]).is_err());
        assert!(LabelSpace::new(names(&["a", "a"]), names(&["x"]), vec![]).is_err());
    }

    #[test]
    fn masks() {
        // 5 train + 3 unseen test compositions over a 3x3 grid
        let space = LabelSpace::new(
            names(&["a", "b", "c"]),
            names(&["x", "y", "z"]),
            (0..3).flat_map(|v| (0..3).map(move |o| (v, o))).collect(),
        )
        .unwrap();
        let s = |c: usize| Sample {
            sample_id: format!("{c}"),
            composition: c,
        };
        let split = SplitSpec::from_samples(
            vec![s(0), s(1), s(2), s(3), s(4)],
            vec![],
            vec![s(0), s(5), s(6), s(7)],
        );
        let train = composition_mask(&space, &split, MaskKind::Train);
        let feasible = composition_mask(&space, &split, MaskKind::Feasible);
        assert_eq!(train.iter().filter(|&&b| b).count(), 5);
        assert_eq!(feasible.iter().filter(|&&b| b).count(), 8);
        assert!(train.iter().zip(&feasible).all(|(t, f)| !t || *f));
    }

    #[test]
    fn document_round_trip() {
        let space = LabelSpace::new(names(&["open"]), names(&["box"]), vec![(0, 0)]).unwrap();
        let split = SplitSpec::from_samples(
            vec![Sample {
                sample_id: "1".into(),
                composition: 0,
            }],
            vec![],
            vec![],
        );
        let doc = SplitDocument { space, split };
        let json = serde_json::to_string(&doc).unwrap();
        let back: SplitDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.space.composition_index(0, 0), Some(0));
    }
}
