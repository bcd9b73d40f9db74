use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{check_split, AnnotationRecord, LabelSpace, Sample, SourceSplit, SplitSpec};
use crate::error::{Error, Result};

/// Sorted vocabularies and every distinct (verb, object) pair observed.
pub fn build_label_space(records: &[AnnotationRecord]) -> Result<LabelSpace> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no annotation records".into()));
    }
    for r in records {
        if r.verb_name.is_empty() || r.object_name.is_empty() {
            return Err(Error::InvalidInput(format!("record {} has an empty label", r.sample_id)));
        }
    }
    let verbs: Vec<String> = records.iter().map(|r| r.verb_name.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let objects: Vec<String> = records.iter().map(|r| r.object_name.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let pairs: BTreeSet<(usize, usize)> = records
        .iter()
        .map(|r| {
            let v = verbs.binary_search(&r.verb_name).expect("verb present");
            let o = objects.binary_search(&r.object_name).expect("object present");
            (v, o)
        })
        .collect();
    LabelSpace::new(verbs, objects, pairs.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitConfig {
    pub seed: u64,
    pub min_samples: usize,
    /// Fraction of train (and of test) compositions picked for interchange.
    pub select_fraction: f64,
    /// Fraction of each picked composition's samples moved across.
    pub interchange_fraction: f64,
    /// Val : test sample ratio.
    pub val_test_ratio: (u32, u32),
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            min_samples: 5,
            select_fraction: 1.0 / 3.0,
            interchange_fraction: 0.5,
            val_test_ratio: (3, 4),
        }
    }
}

impl SplitConfig {
    fn validate(&self) -> Result<()> {
        let frac = |x: f64| (0.0..=1.0).contains(&x);
        if !frac(self.select_fraction) || !frac(self.interchange_fraction) {
            return Err(Error::InvalidConfig("fractions must lie in [0, 1]".into()));
        }
        if self.val_test_ratio.0 == 0 || self.val_test_ratio.1 == 0 {
            return Err(Error::InvalidConfig("val/test ratio terms must be positive".into()));
        }
        if self.min_samples == 0 {
            return Err(Error::InvalidConfig("min_samples must be positive".into()));
        }
        Ok(())
    }
}

type Key = (String, String);

/// Builds seen/unseen train, val and test splits from annotations carrying
/// an initial train/test membership.
///
/// 1. Repeatedly drop (split, composition) groups with fewer than
///    `min_samples` samples and test samples whose verb or object is absent
///    from train, until nothing changes.
/// 2. Pick `select_fraction` of the train compositions and of the test
///    compositions and move `interchange_fraction` of each picked
///    composition's samples to the other side. Only compositions where both
///    halves keep `min_samples` samples are eligible.
/// 3. Assign whole test-pool compositions to val or test, greedily tracking
///    the val/test sample ratio, separately for seen and unseen ones.
pub fn build_sthcom_split(records: &[AnnotationRecord], config: &SplitConfig) -> Result<(LabelSpace, SplitSpec)> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no annotation records".into()));
    }
    let mut ids = HashSet::new();
    for r in records {
        if !ids.insert(r.sample_id.as_str()) {
            return Err(Error::InvalidInput(format!("duplicate sample id {}", r.sample_id)));
        }
    }

    let alive = clean(records, config.min_samples);
    let survivors: Vec<&AnnotationRecord> = records.iter().zip(&alive).filter(|(_, a)| **a).map(|(r, _)| r).collect();
    for side in [SourceSplit::Train, SourceSplit::Test] {
        if !survivors.iter().any(|r| r.source_split == side) {
            return Err(Error::ConstructionFailed {
                stage: "cleaning",
                reason: format!("no {side:?} samples survive"),
            });
        }
    }
    let owned: Vec<AnnotationRecord> = survivors.iter().map(|r| (*r).clone()).collect();
    let space = build_label_space(&owned)?;
    let comp_of = |r: &AnnotationRecord| {
        let v = space.verb_index(&r.verb_name).expect("verb");
        let o = space.object_index(&r.object_name).expect("object");
        space.composition_index(v, o).expect("composition")
    };

    let mut train: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    let mut test: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for r in &owned {
        let side = match r.source_split {
            SourceSplit::Train => &mut train,
            SourceSplit::Test => &mut test,
        };
        side.entry(comp_of(r)).or_default().push(r.sample_id.clone());
    }
    for ids in train.values_mut().chain(test.values_mut()) {
        ids.sort();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let from_train = select(&train, config, &mut rng);
    let mut from_test = select(&test, config, &mut rng);
    // Val and test each need an unseen composition; stop interchange from
    // consuming the last two.
    let is_unseen = |c: &usize| !train.contains_key(c);
    let mut spare = test.keys().filter(|c| is_unseen(c) && !from_test.contains(c)).count();
    while spare < 2 {
        match from_test.iter().rposition(is_unseen) {
            Some(i) => {
                from_test.remove(i);
                spare += 1;
            }
            None => break,
        }
    }
    if from_train.is_empty() && from_test.is_empty() {
        return Err(Error::ConstructionFailed {
            stage: "interchange",
            reason: "no composition has enough samples to be shared across splits".into(),
        });
    }
    for c in from_train {
        let moved = split_off(train.get_mut(&c).expect("selected"), config, &mut rng);
        test.entry(c).or_default().extend(moved);
    }
    for c in from_test {
        let moved = split_off(test.get_mut(&c).expect("selected"), config, &mut rng);
        train.entry(c).or_default().extend(moved);
    }

    let seen: Vec<usize> = test.keys().copied().filter(|c| train.contains_key(c)).collect();
    let unseen: Vec<usize> = test.keys().copied().filter(|c| !train.contains_key(c)).collect();
    let ratio = config.val_test_ratio;
    let (val_seen, test_seen) = divide(&seen, &test, ratio, "seen")?;
    let (val_unseen, test_unseen) = divide(&unseen, &test, ratio, "unseen")?;

    let samples = |groups: &BTreeMap<usize, Vec<String>>, comps: &mut dyn Iterator<Item = usize>| {
        let mut out: Vec<Sample> = comps
            .flat_map(|c| {
                groups[&c].iter().map(move |id| Sample {
                    sample_id: id.clone(),
                    composition: c,
                })
            })
            .collect();
        out.sort();
        out
    };
    let train_samples = samples(&train, &mut train.keys().copied());
    let val_samples = samples(&test, &mut val_seen.iter().chain(&val_unseen).copied());
    let test_samples = samples(&test, &mut test_seen.iter().chain(&test_unseen).copied());
    let split = SplitSpec::from_samples(train_samples, val_samples, test_samples);

    let violations = check_split(&space, &split, config.min_samples);
    if let Some(v) = violations.first() {
        return Err(Error::ConstructionFailed {
            stage: "validation",
            reason: v.to_string(),
        });
    }
    Ok((space, split))
}

/// Fixed-point cleaning; returns a keep flag per record.
fn clean(records: &[AnnotationRecord], min_samples: usize) -> Vec<bool> {
    let mut alive = vec![true; records.len()];
    loop {
        let mut changed = false;
        let mut counts: BTreeMap<(SourceSplit, Key), usize> = BTreeMap::new();
        for (r, _) in records.iter().zip(&alive).filter(|(_, a)| **a) {
            *counts.entry((r.source_split, key(r))).or_default() += 1;
        }
        for (r, a) in records.iter().zip(alive.iter_mut()) {
            if *a && counts[&(r.source_split, key(r))] < min_samples {
                *a = false;
                changed = true;
            }
        }
        let train_verbs: HashSet<&str> = live_train(records, &alive).map(|r| r.verb_name.as_str()).collect();
        let train_objects: HashSet<&str> = live_train(records, &alive).map(|r| r.object_name.as_str()).collect();
        let orphaned: Vec<usize> = (0..records.len())
            .filter(|&i| {
                let r = &records[i];
                alive[i]
                    && r.source_split == SourceSplit::Test
                    && (!train_verbs.contains(r.verb_name.as_str()) || !train_objects.contains(r.object_name.as_str()))
            })
            .collect();
        changed |= !orphaned.is_empty();
        for i in orphaned {
            alive[i] = false;
        }
        if !changed {
            return alive;
        }
    }
}

fn live_train<'a>(records: &'a [AnnotationRecord], alive: &'a [bool]) -> impl Iterator<Item = &'a AnnotationRecord> {
    records
        .iter()
        .zip(alive)
        .filter(|(r, a)| **a && r.source_split == SourceSplit::Train)
        .map(|(r, _)| r)
}

fn key(r: &AnnotationRecord) -> Key {
    (r.verb_name.clone(), r.object_name.clone())
}

fn moved_count(n: usize, config: &SplitConfig) -> usize {
    (n as f64 * config.interchange_fraction).floor() as usize
}

fn select(groups: &BTreeMap<usize, Vec<String>>, config: &SplitConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let target = (groups.len() as f64 * config.select_fraction).round() as usize;
    let mut eligible: Vec<usize> = groups
        .iter()
        .filter(|(_, ids)| {
            let moved = moved_count(ids.len(), config);
            moved >= config.min_samples && ids.len() - moved >= config.min_samples
        })
        .map(|(&c, _)| c)
        .collect();
    eligible.shuffle(rng);
    eligible.truncate(target);
    eligible.sort_unstable();
    eligible
}

fn split_off(ids: &mut Vec<String>, config: &SplitConfig, rng: &mut ChaCha8Rng) -> Vec<String> {
    let moved = moved_count(ids.len(), config);
    ids.shuffle(rng);
    let out = ids.split_off(ids.len() - moved);
    ids.sort();
    out
}

/// Greedy val/test assignment of whole compositions, largest first.
fn divide(
    comps: &[usize],
    groups: &BTreeMap<usize, Vec<String>>,
    (rv, rt): (u32, u32),
    kind: &str,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if comps.len() < 2 {
        return Err(Error::ConstructionFailed {
            stage: "val_test_division",
            reason: format!("need at least two {kind} test-pool compositions, found {}", comps.len()),
        });
    }
    let share = rv as f64 / (rv + rt) as f64;
    let mut order = comps.to_vec();
    order.sort_by_key(|c| (std::cmp::Reverse(groups[c].len()), *c));
    let (mut val, mut test) = (Vec::new(), Vec::new());
    let (mut nv, mut total) = (0usize, 0usize);
    for c in order {
        let n = groups[&c].len();
        let target = share * (total + n) as f64;
        let dev_val = ((nv + n) as f64 - target).abs();
        let dev_test = (nv as f64 - target).abs();
        if dev_val < dev_test {
            val.push(c);
            nv += n;
        } else {
            test.push(c);
        }
        total += n;
    }
    let smallest = |v: &mut Vec<usize>| {
        let pos = (0..v.len()).min_by_key(|&i| (groups[&v[i]].len(), v[i])).expect("non-empty");
        v.remove(pos)
    };
    if val.is_empty() {
        let c = smallest(&mut test);
        val.push(c);
    } else if test.is_empty() {
        let c = smallest(&mut val);
        test.push(c);
    }
    val.sort_unstable();
    test.sort_unstable();
    Ok((val, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, v: &str, o: &str, split: SourceSplit) -> AnnotationRecord {
        AnnotationRecord {
            sample_id: id.into(),
            verb_name: v.into(),
            object_name: o.into(),
            source_split: split,
        }
    }

    #[test]
    fn label_space_from_two_records() {
        let recs = vec![
            rec("1", "open", "box", SourceSplit::Train),
            rec("2", "close", "box", SourceSplit::Train),
        ];
        let s = build_label_space(&recs).unwrap();
        assert_eq!((s.num_verbs(), s.num_objects(), s.num_compositions()), (2, 1, 2));
        assert_eq!(s.verbs(), ["close", "open"]);
    }

    #[test]
    fn duplicate_pairs_collapse() {
        let recs = vec![
            rec("1", "open", "box", SourceSplit::Train),
            rec("2", "open", "box", SourceSplit::Test),
        ];
        assert_eq!(build_label_space(&recs).unwrap().num_compositions(), 1);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(build_label_space(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            build_sthcom_split(&[], &SplitConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn cleaning_drops_small_groups_and_orphans() {
        let mut recs = Vec::new();
        for i in 0..3 {
            recs.push(rec(&format!("a{i}"), "push", "cup", SourceSplit::Train));
        }
        for i in 0..6 {
            recs.push(rec(&format!("b{i}"), "pull", "pen", SourceSplit::Train));
            recs.push(rec(&format!("c{i}"), "push", "pen", SourceSplit::Test));
            // object "cup" disappears from train once push/cup is dropped
            recs.push(rec(&format!("d{i}"), "pull", "cup", SourceSplit::Test));
        }
        let alive = clean(&recs, 5);
        let kept: Vec<&str> = recs.iter().zip(&alive).filter(|(_, a)| **a).map(|(r, _)| r.sample_id.as_str()).collect();
        // push/cup has 3 samples; once it goes, neither "push" nor "cup"
        // remains in train and both test groups follow
        assert!(kept.iter().all(|id| id.starts_with('b')));
        assert_eq!(kept.len(), 6);
    }

    #[test]
    fn too_small_input_fails_with_stage() {
        let recs = vec![rec("1", "open", "box", SourceSplit::Train)];
        let err = build_sthcom_split(&recs, &SplitConfig::default()).unwrap_err();
        assert!(matches!(err, Error::ConstructionFailed { stage: "cleaning", .. }));
    }

    #[test]
    fn greedy_division_tracks_ratio() {
        let groups: BTreeMap<usize, Vec<String>> = (0..7).map(|c| (c, vec![String::new(); 10])).collect();
        let comps: Vec<usize> = (0..7).collect();
        let (val, test) = divide(&comps, &groups, (3, 4), "x").unwrap();
        assert_eq!((val.len(), test.len()), (3, 4));
    }
}
