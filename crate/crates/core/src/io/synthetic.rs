//! Synthetic compositional videos.
//!
//! Objects are static spatial patterns; verbs are temporal trajectories.
//! Every verb plays the same multiset of (amplitude, horizontal shift)
//! frames in a verb-specific order, so any order-invariant summary of a
//! video is identical across verbs and only temporal structure identifies
//! the verb. `domain_variation` adds a composition-specific perturbation to
//! the object pattern; `noise` adds i.i.d. pixel noise per sample.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureRecord, FeatureSet};
use crate::error::{Error, Result};
use crate::labelspace::{check_split, LabelSpace, Sample, SplitSpec};
use crate::model::VideoShape;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_verbs: usize,
    pub num_objects: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples_per_composition: usize,
    pub unseen_compositions: usize,
    /// pixel noise standard deviation
    pub noise: f64,
    /// strength of the verb-conditioned object perturbation
    pub domain_variation: f64,
    pub min_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_verbs: 6,
            num_objects: 6,
            frames: 6,
            height: 16,
            width: 16,
            channels: 3,
            samples_per_composition: 20,
            unseen_compositions: 12,
            noise: 0.1,
            domain_variation: 0.2,
            min_samples: 5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn shape(&self) -> VideoShape {
        VideoShape {
            frames: self.frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [self.num_verbs, self.num_objects, self.frames, self.height, self.width, self.channels, self.samples_per_composition];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig("synthetic dimensions must be positive".into()));
        }
        if !(self.noise >= 0.0) || !(self.domain_variation >= 0.0) {
            return Err(Error::InvalidConfig("noise and domain variation must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub space: LabelSpace,
    pub split: SplitSpec,
    /// Sample ids in `split` are decimal indices into `features.records`.
    pub features: FeatureSet,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let (nv, no) = (spec.num_verbs, spec.num_objects);
    let verbs: Vec<String> = (0..nv).map(|i| format!("verb{i:02}")).collect();
    let objects: Vec<String> = (0..no).map(|i| format!("object{i:02}")).collect();
    let pairs: Vec<(usize, usize)> = (0..nv).flat_map(|v| (0..no).map(move |o| (v, o))).collect();
    let space = LabelSpace::new(verbs, objects, pairs.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unseen = choose_unseen(nv, no, spec.unseen_compositions, &mut rng)?;

    let shape = spec.shape();
    let frame_len = shape.frame_len();
    let patterns: Vec<Vec<f64>> = (0..no).map(|_| gaussian(frame_len, &mut rng)).collect();
    let perturbations: Vec<Vec<f64>> = (0..nv * no).map(|_| gaussian(frame_len, &mut rng)).collect();
    let orders = verb_orders(nv, spec.frames, &mut rng);
    let amplitudes: Vec<f64> = (0..spec.frames)
        .map(|i| 0.4 + if spec.frames > 1 { i as f64 / (spec.frames - 1) as f64 } else { 0.0 })
        .collect();
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;

    let n = spec.samples_per_composition;
    let mut records = Vec::with_capacity(pairs.len() * n);
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (c, &(v, o)) in pairs.iter().enumerate() {
        let appearance: Vec<f64> = patterns[o]
            .iter()
            .zip(&perturbations[v * no + o])
            .map(|(u, p)| u + spec.domain_variation * p)
            .collect();
        let clean = render(&appearance, &orders[v], &amplitudes, shape);
        let is_unseen = unseen.contains(&c);
        for k in 0..n {
            let id = records.len();
            let values = clean
                .iter()
                .map(|&x| (if spec.noise > 0.0 { x + noise.sample(&mut rng) } else { x }) as f32)
                .collect();
            records.push(FeatureRecord {
                verb: v as u32,
                object: o as u32,
                values,
            });
            let sample = Sample {
                sample_id: id.to_string(),
                composition: c,
            };
            let bucket = if is_unseen {
                if k < n / 2 { &mut val } else { &mut test }
            } else if k < n / 2 {
                &mut train
            } else if k < n / 2 + n / 4 {
                &mut val
            } else {
                &mut test
            };
            bucket.push(sample);
        }
    }
    let split = SplitSpec::from_samples(train, val, test);
    if let Some(v) = check_split(&space, &split, spec.min_samples).first() {
        return Err(Error::ConstructionFailed {
            stage: "synthetic_split",
            reason: v.to_string(),
        });
    }
    Ok(SyntheticDataset {
        space,
        split,
        features: FeatureSet { shape, records },
    })
}

fn gaussian(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Picks `count` held-out compositions while every verb and object keeps at
/// least one seen composition, spreading the holdout evenly when possible.
fn choose_unseen(nv: usize, no: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<BTreeSet<usize>> {
    let infeasible = || Error::ConstructionFailed {
        stage: "synthetic_holdout",
        reason: format!("cannot hold out {count} of {nv}x{no} compositions and keep every component seen"),
    };
    if count + nv.max(no) > nv * no {
        return Err(infeasible());
    }
    let mut order: Vec<usize> = (0..nv * no).collect();
    order.shuffle(rng);
    let caps = [count.div_ceil(nv), count.div_ceil(no)];
    for capped in [true, false] {
        let mut unseen = BTreeSet::new();
        let mut verb_seen = vec![no; nv];
        let mut obj_seen = vec![nv; no];
        for &c in &order {
            if unseen.len() == count {
                break;
            }
            let (v, o) = (c / no, c % no);
            let (vu, ou) = (no - verb_seen[v], nv - obj_seen[o]);
            if verb_seen[v] <= 1 || obj_seen[o] <= 1 || (capped && (vu >= caps[0] || ou >= caps[1])) {
                continue;
            }
            unseen.insert(c);
            verb_seen[v] -= 1;
            obj_seen[o] -= 1;
        }
        if unseen.len() == count {
            return Ok(unseen);
        }
    }
    Err(infeasible())
}

/// One frame ordering per verb. Orders are drawn at random and kept when
/// their ordered adjacent-frame transitions overlap least with orders
/// already chosen.
fn verb_orders(nv: usize, frames: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let transitions = |p: &[usize]| p.windows(2).map(|w| (w[0], w[1])).collect::<BTreeSet<_>>();
    let mut chosen: Vec<Vec<usize>> = Vec::with_capacity(nv);
    while chosen.len() < nv {
        let mut best: Option<(usize, Vec<usize>)> = None;
        for _ in 0..64 {
            let mut p: Vec<usize> = (0..frames).collect();
            p.shuffle(rng);
            if chosen.contains(&p) && frames > 3 {
                continue;
            }
            let t = transitions(&p);
            let overlap = chosen.iter().map(|q| transitions(q).intersection(&t).count()).max().unwrap_or(0);
            if best.as_ref().is_none_or(|(o, _)| overlap < *o) {
                best = Some((overlap, p));
            }
        }
        chosen.push(best.map(|(_, p)| p).unwrap_or_else(|| (0..frames).collect()));
    }
    chosen
}

/// Frame `t` shows the appearance scaled by `amplitudes[order[t]]` and
/// rolled right by `order[t]` pixels.
fn render(appearance: &[f64], order: &[usize], amplitudes: &[f64], shape: VideoShape) -> Vec<f64> {
    let (h, w, c) = (shape.height, shape.width, shape.channels);
    let mut out = Vec::with_capacity(shape.len());
    for &step in order {
        let amp = amplitudes[step];
        for y in 0..h {
            for x in 0..w {
                let src = (x + w - step % w) % w;
                for ch in 0..c {
                    out.push(amp * appearance[(y * w + src) * c + ch]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labelspace::Split;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_verbs: 2,
            num_objects: 2,
            frames: 4,
            height: 4,
            width: 4,
            channels: 1,
            unseen_compositions: 1,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn noiseless_samples_of_a_composition_coincide() {
        let spec = SyntheticSpec {
            noise: 0.0,
            domain_variation: 0.0,
            ..small(3)
        };
        let data = generate_synthetic(&spec).unwrap();
        let n = spec.samples_per_composition;
        for c in 0..4 {
            let first = &data.features.records[c * n].values;
            for k in 1..n {
                assert_eq!(&data.features.records[c * n + k].values, first);
            }
        }
    }

    #[test]
    fn single_holdout_keeps_components_seen() {
        let data = generate_synthetic(&small(1)).unwrap();
        let train = data.split.compositions(Split::Train);
        assert_eq!(train.len(), 3);
        let verbs: BTreeSet<usize> = train.iter().map(|&c| data.space.composition(c).0).collect();
        let objects: BTreeSet<usize> = train.iter().map(|&c| data.space.composition(c).1).collect();
        assert_eq!(verbs.len(), 2);
        assert_eq!(objects.len(), 2);
    }

    #[test]
    fn infeasible_holdout() {
        let spec = SyntheticSpec {
            unseen_compositions: 3,
            ..small(0)
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::ConstructionFailed { .. })));
    }

    #[test]
    fn temporal_mean_is_verb_independent() {
        let spec = SyntheticSpec {
            noise: 0.0,
            domain_variation: 0.0,
            ..small(5)
        };
        let data = generate_synthetic(&spec).unwrap();
        let n = spec.samples_per_composition;
        let shape = spec.shape();
        let mean = |r: &FeatureRecord| -> Vec<f64> {
            let fl = shape.frame_len();
            (0..fl).map(|i| (0..shape.frames).map(|t| r.values[t * fl + i] as f64).sum::<f64>()).collect()
        };
        // (verb0, object0) and (verb1, object0)
        let a = mean(&data.features.records[0]);
        let b = mean(&data.features.records[2 * n]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
        assert_ne!(data.features.records[0].values, data.features.records[2 * n].values);
    }
}
