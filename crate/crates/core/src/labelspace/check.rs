use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use super::{LabelSpace, Split, SplitSpec};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownComposition { split: Split, composition: usize },
    SampleOutsideSet { split: Split, sample_id: String },
    DuplicateSample(String),
    TooFewSamples { split: Split, composition: usize, count: usize },
    UnseenVerb { split: Split, verb: usize },
    UnseenObject { split: Split, object: usize },
    NoSeenComposition(Split),
    NoUnseenComposition(Split),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownComposition { split, composition } => {
                write!(f, "{split:?}: composition {composition} not in label space")
            }
            Violation::SampleOutsideSet { split, sample_id } => {
                write!(f, "{split:?}: sample {sample_id} labelled outside the composition set")
            }
            Violation::DuplicateSample(id) => write!(f, "sample {id} appears more than once"),
            Violation::TooFewSamples {
                split,
                composition,
                count,
            } => write!(f, "{split:?}: composition {composition} has {count} samples"),
            Violation::UnseenVerb { split, verb } => write!(f, "{split:?}: verb {verb} never seen in train"),
            Violation::UnseenObject { split, object } => {
                write!(f, "{split:?}: object {object} never seen in train")
            }
            Violation::NoSeenComposition(s) => write!(f, "{s:?}: no seen composition"),
            Violation::NoUnseenComposition(s) => write!(f, "{s:?}: no unseen composition"),
        }
    }
}

/// Lists every broken split invariant; an empty result means the split is
/// valid.
pub fn check_split(space: &LabelSpace, split: &SplitSpec, min_samples: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for which in [Split::Train, Split::Val, Split::Test] {
        let set = split.compositions(which);
        for &c in set {
            if c >= space.num_compositions() {
                out.push(Violation::UnknownComposition {
                    split: which,
                    composition: c,
                });
            }
        }
        let mut counts: BTreeMap<usize, usize> = set.iter().map(|&c| (c, 0)).collect();
        for s in split.samples(which) {
            if !ids.insert(s.sample_id.as_str()) {
                out.push(Violation::DuplicateSample(s.sample_id.clone()));
            }
            match counts.get_mut(&s.composition) {
                Some(n) => *n += 1,
                None => out.push(Violation::SampleOutsideSet {
                    split: which,
                    sample_id: s.sample_id.clone(),
                }),
            }
        }
        for (composition, count) in counts {
            if count < min_samples {
                out.push(Violation::TooFewSamples {
                    split: which,
                    composition,
                    count,
                });
            }
        }
    }

    let valid = |c: &&usize| **c < space.num_compositions();
    let train_verbs: BTreeSet<usize> = split.train_compositions.iter().filter(valid).map(|&c| space.composition(c).0).collect();
    let train_objects: BTreeSet<usize> = split.train_compositions.iter().filter(valid).map(|&c| space.composition(c).1).collect();
    for which in [Split::Val, Split::Test] {
        let set = split.compositions(which);
        for &c in set.iter().filter(valid) {
            let (v, o) = space.composition(c);
            if !train_verbs.contains(&v) {
                out.push(Violation::UnseenVerb { split: which, verb: v });
            }
            if !train_objects.contains(&o) {
                out.push(Violation::UnseenObject { split: which, object: o });
            }
        }
        if !set.iter().any(|c| split.train_compositions.contains(c)) {
            out.push(Violation::NoSeenComposition(which));
        }
        if set.iter().all(|c| split.train_compositions.contains(c)) {
            out.push(Violation::NoUnseenComposition(which));
        }
    }
    out.sort_by_key(|v| format!("{v}"));
    out.dedup();
    out
}
