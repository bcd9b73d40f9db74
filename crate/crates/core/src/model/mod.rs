//! Encoders, component prototypes and the component-to-composition head.
//!
//! A video batch enters as `[B*T, H*W*C_in]` (one flattened frame per row).
//! The general encoder maps each frame to `D` channels; a static encoder
//! (temporal mean, two fully connected layers) and a dynamic encoder (two
//! kernel-3 temporal convolutions, temporal mean) produce the `C`-channel
//! object and verb features. Component scores are cosine similarities with
//! learnable prototypes. Conditional scores fuse a visual reference with
//! one component's prototype and compare the result with the other
//! component's prototypes.

mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{conv1d_temporal, cosine_similarity, linear};
use crate::numerics::{Graph, Tensor, Var};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Layout of one video: `T x H x W x C_in`, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl VideoShape {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn len(&self) -> usize {
        self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub frame_len: usize,
    pub hidden_dim: usize,
    pub channels: usize,
    pub num_verbs: usize,
    pub num_objects: usize,
    /// Reuse the main static/dynamic encoders as the conditional scorer's
    /// visual references instead of separate copies.
    pub share_reference: bool,
}

impl ModelConfig {
    pub fn new(frame_len: usize, num_verbs: usize, num_objects: usize) -> Self {
        Self {
            frame_len,
            hidden_dim: 64,
            channels: 32,
            num_verbs,
            num_objects,
            share_reference: false,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.hidden_dim == 0 || self.channels == 0 || self.num_verbs == 0 || self.num_objects == 0 {
            return Err(Error::InvalidConfig(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// How composition scores are derived from component and conditional scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// `s_v * s_o`
    Independent,
    /// `s_v + s_o`
    KnowledgeAgnostic,
    /// `s_v * S(o|v)`
    DynamicOnly,
    /// `s_o * S(v|o)`
    StaticOnly,
    /// mean of the dynamic and static paths
    Full,
}

impl InferenceMode {
    pub const ALL: [InferenceMode; 5] = [
        InferenceMode::Independent,
        InferenceMode::KnowledgeAgnostic,
        InferenceMode::DynamicOnly,
        InferenceMode::StaticOnly,
        InferenceMode::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InferenceMode::Independent => "independent",
            InferenceMode::KnowledgeAgnostic => "knowledge_agnostic",
            InferenceMode::DynamicOnly => "dynamic_only",
            InferenceMode::StaticOnly => "static_only",
            InferenceMode::Full => "full",
        }
    }
}

impl std::str::FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InferenceMode::ALL
            .into_iter()
            .find(|m| m.name() == s.replace('-', "_"))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown inference mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct C2CModel {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

fn param_shapes(c: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, ch) = (c.hidden_dim, c.channels);
    let mut out = vec![
        ("general.weight".to_string(), vec![c.frame_len, d]),
        ("general.bias".to_string(), vec![1, d]),
    ];
    let mut encoders = vec![""];
    if !c.share_reference {
        encoders.push("reference.");
    }
    for prefix in encoders {
        out.extend([
            (format!("{prefix}static.fc1.weight"), vec![d, ch]),
            (format!("{prefix}static.fc1.bias"), vec![1, ch]),
            (format!("{prefix}static.fc2.weight"), vec![ch, ch]),
            (format!("{prefix}static.fc2.bias"), vec![1, ch]),
            (format!("{prefix}dynamic.conv1.weight"), vec![3 * d, ch]),
            (format!("{prefix}dynamic.conv1.bias"), vec![1, ch]),
            (format!("{prefix}dynamic.conv2.weight"), vec![3 * ch, ch]),
            (format!("{prefix}dynamic.conv2.bias"), vec![1, ch]),
        ]);
    }
    out.extend([
        ("prototypes.verb".to_string(), vec![c.num_verbs, ch]),
        ("prototypes.object".to_string(), vec![c.num_objects, ch]),
        ("fuser.dynamic.weight".to_string(), vec![2 * ch, ch]),
        ("fuser.dynamic.bias".to_string(), vec![1, ch]),
        ("fuser.static.weight".to_string(), vec![2 * ch, ch]),
        ("fuser.static.bias".to_string(), vec![1, ch]),
    ]);
    out
}

impl C2CModel {
    /// Glorot-uniform weights, zero biases, unit-norm random prototypes.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_shapes(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.starts_with("prototypes.") {
                let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                normalize_rows(&mut v, shape[1]);
                v
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            names.push(name);
            tensors.push(Tensor::new(shape, data)?);
        }
        Ok(Self { config, names, tensors })
    }

    pub(crate) fn from_parts(config: ModelConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != names.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                names.len()
            )));
        }
        let mut ordered = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let i = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::InvalidInput(format!("missing parameter `{name}`")))?;
            if tensors[i].shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    tensors[i].shape()
                )));
            }
            ordered.push(tensors[i].clone());
        }
        Ok(Self {
            config,
            names: expected.into_iter().map(|(n, _)| n).collect(),
            tensors: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Replaces prototype rows with external word vectors where available.
    ///
    /// `lookup` returns a vector for a component name; vectors must have
    /// `channels` entries. Imported rows are unit-normalized.
    pub fn seed_prototypes(
        &mut self,
        verbs: &[String],
        objects: &[String],
        lookup: impl Fn(&str) -> Option<Vec<f64>>,
    ) -> Result<usize> {
        let ch = self.config.channels;
        let mut imported = 0;
        for (param, names) in [("prototypes.verb", verbs), ("prototypes.object", objects)] {
            let table = self.get_mut(param).expect("prototype table");
            if table.rows() != names.len() {
                return Err(Error::Shape(format!("{param}: {} rows for {} names", table.rows(), names.len())));
            }
            for (r, name) in names.iter().enumerate() {
                if let Some(mut v) = lookup(name) {
                    if v.len() != ch {
                        return Err(Error::Shape(format!("embedding for `{name}` has {} dims, expected {ch}", v.len())));
                    }
                    normalize_rows(&mut v, ch);
                    table.data_mut()[r * ch..(r + 1) * ch].copy_from_slice(&v);
                    imported += 1;
                }
            }
        }
        Ok(imported)
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            config: self.config,
            names: self.names.clone(),
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundModel {
        BoundModel {
            config: self.config,
            names: self.names.clone(),
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Wraps leaves already on a graph, one per parameter in [`names`](Self::names) order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        if vars.len() != self.names.len() {
            return Err(Error::Shape(format!("{} vars for {} parameters", vars.len(), self.names.len())));
        }
        Ok(BoundModel {
            config: self.config,
            names: self.names.clone(),
            vars: vars.to_vec(),
        })
    }

    /// Features of one `T x H x W x C_in` video.
    pub fn encode(&self, video: &Tensor) -> Result<EncodedVideo> {
        let shape = video.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("video must be rank 4, got {shape:?}")));
        }
        let frames = shape[0];
        let frame_len = shape[1] * shape[2] * shape[3];
        if frame_len != self.config.frame_len {
            return Err(Error::Shape(format!("frame has {frame_len} values, model expects {}", self.config.frame_len)));
        }
        let mut g = Graph::new();
        let m = self.bind_frozen(&mut g);
        let x = g.constant(Tensor::matrix(frames, frame_len, video.data().to_vec())?);
        let f = m.encode(&mut g, x, frames)?;
        Ok(EncodedVideo {
            frame_features: g.value(f.frame_features).clone(),
            pooled: g.value(f.pooled).clone(),
            verb_feature: g.value(f.verb_feature).clone(),
            object_feature: g.value(f.object_feature).clone(),
        })
    }

    /// Component and conditional scores for each video of a batch given as
    /// `[B*T, frame_len]`.
    pub fn score_batch(&self, videos: &Tensor, frames: usize) -> Result<Vec<ScoreBundle>> {
        let mut g = Graph::new();
        let m = self.bind_frozen(&mut g);
        let x = g.constant(videos.clone());
        let out = m.forward(&mut g, x, frames)?;
        Ok(out.bundles(&g))
    }
}

fn normalize_rows(v: &mut [f64], cols: usize) {
    for row in v.chunks_mut(cols) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncodedVideo {
    /// `[T, D]`
    pub frame_features: Tensor,
    /// `[1, D]`
    pub pooled: Tensor,
    /// `[1, C]`
    pub verb_feature: Tensor,
    /// `[1, C]`
    pub object_feature: Tensor,
}

/// Parameters of a [`C2CModel`] registered on a graph.
#[derive(Debug, Clone)]
pub struct BoundModel {
    config: ModelConfig,
    names: Vec<String>,
    vars: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct Features {
    /// `[B*T, D]`
    pub frame_features: Var,
    /// `[B, D]`
    pub pooled: Var,
    /// `[B, C]`
    pub verb_feature: Var,
    /// `[B, C]`
    pub object_feature: Var,
}

/// Graph handles for one forward pass over a batch of `batch` videos.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutputs {
    pub batch: usize,
    pub features: Features,
    /// `[B, N_v]`
    pub verb_scores: Var,
    /// `[B, N_o]`
    pub object_scores: Var,
    /// `[B*N_v, N_o]`; row `b*N_v + l` holds `S(o | v_l)` for sample `b`.
    pub object_given_verb: Var,
    /// `[B*N_o, N_v]`; row `b*N_o + k` holds `S(v | o_k)` for sample `b`.
    pub verb_given_object: Var,
}

impl BoundModel {
    pub fn var(&self, name: &str) -> Var {
        let i = self.names.iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter `{name}`"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn static_encoder(&self, g: &mut Graph, frame_features: Var, frames: usize, prefix: &str) -> Result<Var> {
        let pooled = g.group_mean(frame_features, frames)?;
        let h = linear(g, pooled, self.var(&format!("{prefix}static.fc1.weight")), self.var(&format!("{prefix}static.fc1.bias")))?;
        let h = g.relu(h);
        linear(g, h, self.var(&format!("{prefix}static.fc2.weight")), self.var(&format!("{prefix}static.fc2.bias")))
    }

    fn dynamic_encoder(&self, g: &mut Graph, frame_features: Var, frames: usize, prefix: &str) -> Result<Var> {
        let w1 = self.var(&format!("{prefix}dynamic.conv1.weight"));
        let b1 = self.var(&format!("{prefix}dynamic.conv1.bias"));
        let h = conv1d_temporal(g, frame_features, w1, b1, frames)?;
        let h = g.relu(h);
        let w2 = self.var(&format!("{prefix}dynamic.conv2.weight"));
        let b2 = self.var(&format!("{prefix}dynamic.conv2.bias"));
        let h = conv1d_temporal(g, h, w2, b2, frames)?;
        g.group_mean(h, frames)
    }

    /// General, static and dynamic features of `[B*T, frame_len]` input.
    pub fn encode(&self, g: &mut Graph, videos: Var, frames: usize) -> Result<Features> {
        if frames < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 frames, got {frames}")));
        }
        let rows = g.value(videos).rows();
        if !rows.is_multiple_of(frames) {
            return Err(Error::Shape(format!("{rows} frame rows are not a multiple of {frames}")));
        }
        let h = linear(g, videos, self.var("general.weight"), self.var("general.bias"))?;
        let frame_features = g.relu(h);
        let pooled = g.group_mean(frame_features, frames)?;
        let object_feature = self.static_encoder(g, frame_features, frames, "")?;
        let verb_feature = self.dynamic_encoder(g, frame_features, frames, "")?;
        Ok(Features {
            frame_features,
            pooled,
            verb_feature,
            object_feature,
        })
    }

    /// Encoders, component scores and both conditional score tables.
    pub fn forward(&self, g: &mut Graph, videos: Var, frames: usize) -> Result<ForwardOutputs> {
        let features = self.encode(g, videos, frames)?;
        let batch = g.value(features.pooled).rows();
        let verbs = self.var("prototypes.verb");
        let objects = self.var("prototypes.object");
        let verb_scores = cosine_similarity(g, features.verb_feature, verbs)?;
        let object_scores = cosine_similarity(g, features.object_feature, objects)?;

        let prefix = if self.config.share_reference { "" } else { "reference." };
        let static_ref = if self.config.share_reference {
            features.object_feature
        } else {
            self.static_encoder(g, features.frame_features, frames, prefix)?
        };
        let dynamic_ref = if self.config.share_reference {
            features.verb_feature
        } else {
            self.dynamic_encoder(g, features.frame_features, frames, prefix)?
        };
        let object_given_verb = self.conditional(g, static_ref, verbs, objects, "fuser.dynamic")?;
        let verb_given_object = self.conditional(g, dynamic_ref, objects, verbs, "fuser.static")?;
        Ok(ForwardOutputs {
            batch,
            features,
            verb_scores,
            object_scores,
            object_given_verb,
            verb_given_object,
        })
    }

    /// `(cos(fuse([reference_b, condition_l]), target_k) + 1) / 2` for every
    /// sample `b`, condition prototype `l` and target prototype `k`.
    fn conditional(&self, g: &mut Graph, reference: Var, condition: Var, target: Var, fuser: &str) -> Result<Var> {
        let pairs = g.pair_rows(reference, condition)?;
        let fused = linear(g, pairs, self.var(&format!("{fuser}.weight")), self.var(&format!("{fuser}.bias")))?;
        let cos = cosine_similarity(g, fused, target)?;
        let half = g.scale(cos, 0.5);
        Ok(g.add_scalar(half, 0.5))
    }
}

impl ForwardOutputs {
    /// Composition scores `[B, compositions.len()]` under `mode`.
    pub fn compose(&self, g: &mut Graph, compositions: &[(usize, usize)], mode: InferenceMode) -> Result<Var> {
        let (nv, no) = (g.value(self.verb_scores).cols(), g.value(self.object_scores).cols());
        if let Some(&(v, o)) = compositions.iter().find(|&&(v, o)| v >= nv || o >= no) {
            return Err(Error::InvalidInput(format!("composition ({v}, {o}) out of range")));
        }
        let b = self.batch;
        let na = compositions.len();
        let shape = vec![b, na];
        let idx = |f: &dyn Fn(usize, usize, usize) -> usize| -> Vec<usize> {
            (0..b).flat_map(|s| compositions.iter().map(move |&(v, o)| f(s, v, o))).collect()
        };
        let sv = g.gather(self.verb_scores, idx(&|s, v, _| s * nv + v), shape.clone())?;
        let so = g.gather(self.object_scores, idx(&|s, _, o| s * no + o), shape.clone())?;
        match mode {
            InferenceMode::Independent => g.mul(sv, so),
            InferenceMode::KnowledgeAgnostic => g.add(sv, so),
            InferenceMode::DynamicOnly | InferenceMode::StaticOnly | InferenceMode::Full => {
                let dynamic = {
                    let cond = g.gather(self.object_given_verb, idx(&|s, v, o| (s * nv + v) * no + o), shape.clone())?;
                    g.mul(sv, cond)?
                };
                if mode == InferenceMode::DynamicOnly {
                    return Ok(dynamic);
                }
                let stat = {
                    let cond = g.gather(self.verb_given_object, idx(&|s, v, o| (s * no + o) * nv + v), shape.clone())?;
                    g.mul(so, cond)?
                };
                if mode == InferenceMode::StaticOnly {
                    return Ok(stat);
                }
                let sum = g.add(dynamic, stat)?;
                Ok(g.scale(sum, 0.5))
            }
        }
    }

    /// Per-sample score values.
    pub fn bundles(&self, g: &Graph) -> Vec<ScoreBundle> {
        let sv = g.value(self.verb_scores);
        let so = g.value(self.object_scores);
        let (nv, no) = (sv.cols(), so.cols());
        let ogv = g.value(self.object_given_verb);
        let vgo = g.value(self.verb_given_object);
        (0..self.batch)
            .map(|b| ScoreBundle {
                verb: sv.row(b).to_vec(),
                object: so.row(b).to_vec(),
                object_given_verb: (0..nv).map(|l| ogv.row(b * nv + l).to_vec()).collect(),
                verb_given_object: (0..no).map(|k| vgo.row(b * no + k).to_vec()).collect(),
            })
            .collect()
    }
}

/// Scores of a single video.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBundle {
    /// `s_v`, length `N_v`
    pub verb: Vec<f64>,
    /// `s_o`, length `N_o`
    pub object: Vec<f64>,
    /// `S(o|v)`, `N_v x N_o`
    pub object_given_verb: Vec<Vec<f64>>,
    /// `S(v|o)`, `N_o x N_v`
    pub verb_given_object: Vec<Vec<f64>>,
}

/// Cosine similarities of two feature vectors with every prototype row.
pub fn component_scores(verb_feature: &[f64], object_feature: &[f64], verb_prototypes: &Tensor, object_prototypes: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let cos_rows = |f: &[f64], table: &Tensor| -> Result<Vec<f64>> {
        if table.cols() != f.len() {
            return Err(Error::Shape(format!("feature has {} dims, prototypes {}", f.len(), table.cols())));
        }
        let fn_ = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        if fn_ == 0.0 {
            return Err(Error::Numerical("zero-norm feature".into()));
        }
        (0..table.rows())
            .map(|r| {
                let row = table.row(r);
                let rn = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                if rn == 0.0 {
                    return Err(Error::Numerical(format!("prototype row {r} has zero norm")));
                }
                Ok(row.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / (rn * fn_))
            })
            .collect()
    };
    Ok((cos_rows(verb_feature, verb_prototypes)?, cos_rows(object_feature, object_prototypes)?))
}

/// Composition scores of one bundle.
pub fn compose_scores(bundle: &ScoreBundle, compositions: &[(usize, usize)], mode: InferenceMode) -> Result<Vec<f64>> {
    compositions
        .iter()
        .map(|&(v, o)| {
            if v >= bundle.verb.len() || o >= bundle.object.len() {
                return Err(Error::InvalidInput(format!("composition ({v}, {o}) out of range")));
            }
            let (sv, so) = (bundle.verb[v], bundle.object[o]);
            let dynamic = || sv * bundle.object_given_verb[v][o];
            let stat = || so * bundle.verb_given_object[o][v];
            Ok(match mode {
                InferenceMode::Independent => sv * so,
                InferenceMode::KnowledgeAgnostic => sv + so,
                InferenceMode::DynamicOnly => dynamic(),
                InferenceMode::StaticOnly => stat(),
                InferenceMode::Full => 0.5 * (dynamic() + stat()),
            })
        })
        .collect()
}
