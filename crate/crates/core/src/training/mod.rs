//! Objectives and the training loop.
//!
//! A vanilla run minimizes `L_com + alpha L_comp`. An enhanced run draws,
//! per batch, whether to apply CutMix. Mixed batches minimize
//! `L_com + alpha L_comp + beta L_ind + gamma L_new` on mixed labels; plain
//! batches minimize `L_com + alpha L_comp + beta L_ind + gamma L_con`.

mod config;
mod cutmix;
mod losses;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::io::{write_atomic, FeatureSet};
use crate::labelspace::{composition_mask, LabelSpace, MaskKind, SplitSpec};
use crate::model::{BoundModel, C2CModel, InferenceMode, ModelConfig, VideoShape};
use crate::numerics::{Adam, Graph, Tensor, Var};

pub use config::TrainConfig;
pub use cutmix::{cutmix, paste, sample_crop, CutMixRecord};
pub use losses::{
    component_loss, composition_loss, condition_loss, empirical_conditionals, independence_loss, novel_loss,
    ComponentLoss, EmpiricalConditionals, IndependenceTerms, CONDITION_EPS,
};

/// Per-term loss values of one batch, or their means over an epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    pub verb: f64,
    pub object: f64,
    pub comp: f64,
    pub com: f64,
    pub sup_verb: Option<f64>,
    pub sup_obj: Option<f64>,
    pub ind: Option<f64>,
    pub con: Option<f64>,
    pub new: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub const COLUMNS: [&'static str; 10] = ["verb", "object", "comp", "com", "sup_verb", "sup_obj", "ind", "con", "new", "total"];

    fn values(&self) -> [Option<f64>; 10] {
        [
            Some(self.verb),
            Some(self.object),
            Some(self.comp),
            Some(self.com),
            self.sup_verb,
            self.sup_obj,
            self.ind,
            self.con,
            self.new,
            Some(self.total),
        ]
    }

    /// Term-wise mean; optional terms average over the reports that have them.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let opt = |f: fn(&LossReport) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = reports.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            verb: sum(|r| r.verb),
            object: sum(|r| r.object),
            comp: sum(|r| r.comp),
            com: sum(|r| r.com),
            sup_verb: opt(|r| r.sup_verb),
            sup_obj: opt(|r| r.sup_obj),
            ind: opt(|r| r.ind),
            con: opt(|r| r.con),
            new: opt(|r| r.new),
            total: sum(|r| r.total),
        }
    }
}

/// Graph handles of every loss term computed for one batch.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub component: ComponentLoss,
    pub com: Var,
    pub ind: Option<IndependenceTerms>,
    pub con: Option<Var>,
    pub new: Option<Var>,
}

impl LossTerms {
    pub fn report(&self, g: &Graph, total: Var) -> LossReport {
        let v = |x: Var| g.value(x).item();
        LossReport {
            verb: v(self.component.verb),
            object: v(self.component.object),
            comp: v(self.component.total),
            com: v(self.com),
            sup_verb: self.ind.map(|t| v(t.sup_verb)),
            sup_obj: self.ind.map(|t| v(t.sup_object)),
            ind: self.ind.map(|t| v(t.total)),
            con: self.con.map(v),
            new: self.new.map(v),
            total: v(total),
        }
    }
}

/// Weighted objective of the active branch.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, config: &TrainConfig, cutmix_applied: bool) -> Result<Var> {
    let comp = g.scale(terms.component.total, config.alpha);
    let base = g.add(terms.com, comp)?;
    if !config.enhanced {
        return Ok(base);
    }
    let missing = |name: &str| Error::InvalidState(format!("{name} was not computed for this batch"));
    let ind = terms.ind.ok_or_else(|| missing("L_ind"))?;
    let last = if cutmix_applied {
        terms.new.ok_or_else(|| missing("L_new"))?
    } else {
        terms.con.ok_or_else(|| missing("L_con"))?
    };
    let ind = g.scale(ind.total, config.beta);
    let last = g.scale(last, config.gamma);
    let partial = g.add(base, ind)?;
    g.add(partial, last)
}

/// Label-space facts every batch objective needs.
#[derive(Debug, Clone)]
pub struct LossContext {
    space: LabelSpace,
    train_mask: Vec<bool>,
    observed: EmpiricalConditionals,
    grid: Vec<(usize, usize)>,
}

impl LossContext {
    pub fn new(space: &LabelSpace, split: &SplitSpec) -> Result<Self> {
        let (nv, no) = (space.num_verbs(), space.num_objects());
        Ok(Self {
            space: space.clone(),
            train_mask: composition_mask(space, split, MaskKind::Train),
            observed: empirical_conditionals(space, &split.train_samples)?,
            grid: (0..nv).flat_map(|v| (0..no).map(move |o| (v, o))).collect(),
        })
    }

    pub fn observed(&self) -> &EmpiricalConditionals {
        &self.observed
    }
}

/// Labels of a CutMix batch's pasted-in partners.
#[derive(Debug, Clone, PartialEq)]
pub struct MixInfo {
    pub partners: Vec<(usize, usize)>,
    pub lambdas: Vec<f64>,
}

/// One batch ready for the objective. `videos` already contains any pasted
/// regions.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub videos: Tensor,
    pub frames: usize,
    /// `(verb, object)` per sample
    pub labels: Vec<(usize, usize)>,
    pub mix: Option<MixInfo>,
}

/// Forward pass, every active loss term and the weighted total.
pub fn batch_objective(
    g: &mut Graph,
    model: &BoundModel,
    input: &BatchInput,
    ctx: &LossContext,
    config: &TrainConfig,
) -> Result<(Var, LossTerms)> {
    let space = &ctx.space;
    let (nv, no, na) = (space.num_verbs(), space.num_objects(), space.num_compositions());
    let b = input.labels.len();
    let videos = g.constant(input.videos.clone());
    let out = model.forward(g, videos, input.frames)?;
    if out.batch != b {
        return Err(Error::Shape(format!("{} labels for a batch of {}", b, out.batch)));
    }

    let mut verb_w = vec![0.0; b * nv];
    let mut object_w = vec![0.0; b * no];
    let mut com_w = vec![0.0; b * na];
    let mut add = |r: usize, (v, o): (usize, usize), w: f64| -> Result<()> {
        let c = space
            .composition_index(v, o)
            .filter(|&c| ctx.train_mask[c])
            .ok_or_else(|| Error::InvalidInput(format!("label ({v}, {o}) is not a training composition")))?;
        verb_w[r * nv + v] += w;
        object_w[r * no + o] += w;
        com_w[r * na + c] += w;
        Ok(())
    };
    for (r, &label) in input.labels.iter().enumerate() {
        match &input.mix {
            None => add(r, label, 1.0)?,
            Some(mix) => {
                let lambda = mix.lambdas[r];
                add(r, label, 1.0 - lambda)?;
                add(r, mix.partners[r], lambda)?;
            }
        }
    }
    let verb_w = Tensor::matrix(b, nv, verb_w)?;
    let object_w = Tensor::matrix(b, no, object_w)?;

    let grid = out.compose(g, &ctx.grid, InferenceMode::Full)?;
    let cols: Vec<usize> = (0..b)
        .flat_map(|r| space.compositions().iter().map(move |&(v, o)| r * nv * no + v * no + o))
        .collect();
    let scores = g.gather(grid, cols, vec![b, na])?;
    let com = composition_loss(g, scores, Tensor::matrix(b, na, com_w)?, &ctx.train_mask, config.tau)?;
    let component = component_loss(g, out.verb_scores, out.object_scores, verb_w.clone(), object_w.clone(), config.tau)?;

    let mut terms = LossTerms {
        component,
        com,
        ind: None,
        con: None,
        new: None,
    };
    if config.enhanced {
        terms.ind = Some(independence_loss(g, &out.features, &verb_w, &object_w, config.rho)?);
        match &input.mix {
            Some(mix) => {
                terms.new = Some(novel_loss(g, grid, space, &ctx.train_mask, &input.labels, &mix.partners, config.tau)?)
            }
            None => terms.con = Some(condition_loss(g, &out, &ctx.observed)?),
        }
    }
    let total = total_loss(g, &terms, config, input.mix.is_some())?;
    Ok((total, terms))
}

/// Replaces every sample's video with a CutMix of itself and a partner from
/// a random permutation of the batch.
pub fn mix_batch(
    videos: &Tensor,
    labels: &[(usize, usize)],
    shape: VideoShape,
    rng: &mut impl Rng,
) -> Result<(Tensor, MixInfo, Vec<CutMixRecord>)> {
    let b = labels.len();
    if videos.len() != b * shape.len() {
        return Err(Error::Shape(format!("batch of {} values for {b} videos of {shape:?}", videos.len())));
    }
    let mut partners: Vec<usize> = (0..b).collect();
    partners.shuffle(rng);
    let mut data = videos.data().to_vec();
    let mut records = Vec::with_capacity(b);
    let len = shape.len();
    for (i, &j) in partners.iter().enumerate() {
        let crop = sample_crop(shape, j, rng);
        paste(&mut data[i * len..(i + 1) * len], &videos.data()[j * len..(j + 1) * len], &crop, shape)?;
        records.push(crop);
    }
    let info = MixInfo {
        partners: partners.iter().map(|&j| labels[j]).collect(),
        lambdas: records.iter().map(|r| r.lambda).collect(),
    };
    Ok((Tensor::new(videos.shape().to_vec(), data)?, info, records))
}

/// Mean losses of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub batches: usize,
    pub cutmix_batches: usize,
    pub losses: LossReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: C2CModel,
    pub history: Vec<EpochSummary>,
}

pub fn train(features: &FeatureSet, space: &LabelSpace, split: &SplitSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(features, space, split, config, |_| {})
}

/// Trains a fresh model. The model is initialized from `config.seed`; batch
/// order, CutMix draws and crops come from a separate stream of the same
/// seed. Batches smaller than 2 are skipped.
pub fn train_with_progress(
    features: &FeatureSet,
    space: &LabelSpace,
    split: &SplitSpec,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<TrainOutcome> {
    config.validate()?;
    let ctx = LossContext::new(space, split)?;
    let records = features.resolve(space, &split.train_samples)?;
    let labels: Vec<(usize, usize)> = split.train_samples.iter().map(|s| space.composition(s.composition)).collect();
    let shape = features.shape;
    let mut model = C2CModel::new(
        ModelConfig {
            hidden_dim: config.hidden_dim,
            channels: config.channels,
            ..ModelConfig::new(shape.frame_len(), space.num_verbs(), space.num_objects())
        },
        config.seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(config.learning_rate)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..records.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        let mut cutmix_batches = 0;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let idx: Vec<usize> = chunk.iter().map(|&i| records[i]).collect();
            let batch_labels: Vec<(usize, usize)> = chunk.iter().map(|&i| labels[i]).collect();
            let videos = features.batch(&idx)?;
            let mixed = config.enhanced && rng.random_bool(config.cutmix_prob);
            let input = if mixed {
                cutmix_batches += 1;
                let (videos, mix, _) = mix_batch(&videos, &batch_labels, shape, &mut rng)?;
                BatchInput {
                    videos,
                    frames: shape.frames,
                    labels: batch_labels,
                    mix: Some(mix),
                }
            } else {
                BatchInput {
                    videos,
                    frames: shape.frames,
                    labels: batch_labels,
                    mix: None,
                }
            };

            let diverged = |model: &C2CModel| Error::Diverged {
                epoch,
                batch: batch_no,
                last_good: Box::new(model.clone()),
            };
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let (total, terms) = match batch_objective(&mut g, &bound, &input, &ctx, config) {
                Err(Error::Numerical(_)) => return Err(diverged(&model)),
                other => other?,
            };
            let report = terms.report(&g, total);
            if !report.total.is_finite() {
                return Err(diverged(&model));
            }
            let grads = g.backward(total);
            let grads: Vec<Tensor> = bound
                .vars()
                .iter()
                .zip(model.tensors())
                .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
                .collect();
            if grads.iter().any(|t| !t.is_finite()) {
                return Err(diverged(&model));
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            let mut params: Vec<&mut Tensor> = model.tensors_mut().iter_mut().collect();
            adam.step(&mut params, &grad_refs)?;
            reports.push(report);
        }
        let summary = EpochSummary {
            epoch,
            batches: reports.len(),
            cutmix_batches,
            losses: LossReport::mean(&reports),
        };
        on_epoch(&summary);
        history.push(summary);
    }
    Ok(TrainOutcome { model, history })
}

/// CSV with one row per epoch and one column per loss term; absent terms
/// are empty cells.
pub fn history_csv(history: &[EpochSummary]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["epoch", "batches", "cutmix_batches"];
    header.extend(LossReport::COLUMNS);
    w.write_record(&header)?;
    for h in history {
        let mut row = vec![h.epoch.to_string(), h.batches.to_string(), h.cutmix_batches.to_string()];
        row.extend(h.losses.values().iter().map(|v| v.map(|x| format!("{x:?}")).unwrap_or_default()));
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn write_history(path: &Path, history: &[EpochSummary]) -> Result<()> {
    write_atomic(path, &history_csv(history)?)
}

#[cfg(test)]
mod tests;
