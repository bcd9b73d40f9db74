use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::io::{generate_synthetic, SyntheticDataset, SyntheticSpec};
use crate::model::{Features, ForwardOutputs};
use crate::numerics::ops::one_hot;

fn tiny() -> SyntheticDataset {
    generate_synthetic(&SyntheticSpec {
        num_verbs: 3,
        num_objects: 3,
        frames: 4,
        height: 4,
        width: 4,
        channels: 1,
        unseen_compositions: 2,
        seed: 11,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 8,
        hidden_dim: 8,
        channels: 6,
        ..TrainConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// A batch of 4 training samples with the model bound on a fresh graph.
fn objective(data: &SyntheticDataset, config: &TrainConfig, mix: Option<MixInfo>) -> (Graph, Var, LossTerms) {
    let ctx = LossContext::new(&data.space, &data.split).unwrap();
    let model = C2CModel::new(
        ModelConfig {
            hidden_dim: config.hidden_dim,
            channels: config.channels,
            ..ModelConfig::new(data.features.shape.frame_len(), 3, 3)
        },
        5,
    )
    .unwrap();
    let samples: Vec<_> = data.split.train_samples.iter().step_by(7).take(4).cloned().collect();
    let idx = data.features.resolve(&data.space, &samples).unwrap();
    let input = BatchInput {
        videos: data.features.batch(&idx).unwrap(),
        frames: data.features.shape.frames,
        labels: samples.iter().map(|s| data.space.composition(s.composition)).collect(),
        mix,
    };
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let (total, terms) = batch_objective(&mut g, &bound, &input, &ctx, config).unwrap();
    (g, total, terms)
}

fn labels_of(data: &SyntheticDataset) -> Vec<(usize, usize)> {
    data.split
        .train_samples
        .iter()
        .step_by(7)
        .take(4)
        .map(|s| data.space.composition(s.composition))
        .collect()
}

#[test]
fn zero_weights_leave_composition_loss() {
    let data = tiny();
    let config = TrainConfig {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        ..tiny_config()
    };
    let (g, total, terms) = objective(&data, &config, None);
    assert_eq!(g.value(total).item(), g.value(terms.com).item());
}

#[test]
fn branches_differ_by_gamma_terms_at_zero_lambda() {
    let data = tiny();
    let config = tiny_config();
    let labels = labels_of(&data);
    let mix = MixInfo {
        partners: labels.iter().rev().copied().collect(),
        lambdas: vec![0.0; 4],
    };
    let (gp, tp, plain) = objective(&data, &config, None);
    let (gm, tm, mixed) = objective(&data, &config, Some(mix));
    let v = |g: &Graph, x: Var| g.value(x).item();
    assert!((v(&gp, plain.com) - v(&gm, mixed.com)).abs() < 1e-12);
    assert!((v(&gp, plain.component.total) - v(&gm, mixed.component.total)).abs() < 1e-12);
    let diff = v(&gm, tm) - v(&gp, tp);
    let expect = config.gamma * (v(&gm, mixed.new.unwrap()) - v(&gp, plain.con.unwrap()));
    assert!((diff - expect).abs() < 1e-10, "{diff} vs {expect}");
}

#[test]
fn self_mix_doubles_composition_loss() {
    let data = tiny();
    let labels = labels_of(&data);
    let mix = MixInfo {
        partners: labels.clone(),
        lambdas: vec![0.4; 4],
    };
    let (g, _, terms) = objective(&data, &tiny_config(), Some(mix));
    let new = g.value(terms.new.unwrap()).item();
    let com = g.value(terms.com).item();
    assert!((new - 2.0 * com).abs() < 1e-12);
}

#[test]
fn mixed_terms_are_convex_combinations() {
    let data = tiny();
    let config = tiny_config();
    let labels = labels_of(&data);
    let partners: Vec<(usize, usize)> = labels.iter().rev().copied().collect();
    let lambda = 0.3;
    let (gm, _, mixed) = objective(
        &data,
        &config,
        Some(MixInfo {
            partners: partners.clone(),
            lambdas: vec![lambda; 4],
        }),
    );
    // The same logits with each label set on its own.
    let (ga, _, a) = objective(&data, &config, None);
    let (gb, _, b) = objective(
        &data,
        &config,
        Some(MixInfo {
            partners: partners.clone(),
            lambdas: vec![1.0; 4],
        }),
    );
    let v = |g: &Graph, x: Var| g.value(x).item();
    let com = (1.0 - lambda) * v(&ga, a.com) + lambda * v(&gb, b.com);
    let comp = (1.0 - lambda) * v(&ga, a.component.total) + lambda * v(&gb, b.component.total);
    assert!((v(&gm, mixed.com) - com).abs() < 1e-10);
    assert!((v(&gm, mixed.component.total) - comp).abs() < 1e-10);
}

fn fake_outputs(g: &mut Graph, ogv: Tensor, vgo: Tensor, batch: usize) -> ForwardOutputs {
    let z = g.constant(Tensor::zeros(&[batch, 1]));
    ForwardOutputs {
        batch,
        features: Features {
            frame_features: z,
            pooled: z,
            verb_feature: z,
            object_feature: z,
        },
        verb_scores: z,
        object_scores: z,
        object_given_verb: g.constant(ogv),
        verb_given_object: g.constant(vgo),
    }
}

/// Direct double loop over conditions and targets.
fn condition_oracle(table: &Tensor, batch: usize, observed: &Tensor) -> f64 {
    let (n, m) = (observed.rows(), observed.cols());
    let mut loss = 0.0;
    for i in 0..n {
        let mean: Vec<f64> = (0..m)
            .map(|k| (0..batch).map(|b| table.at(b * n + i, k)).sum::<f64>() / batch as f64)
            .collect();
        let s: f64 = mean.iter().sum::<f64>() + CONDITION_EPS;
        for k in 0..m {
            let p = observed.at(i, k);
            if p > 0.0 {
                loss -= p * (mean[k] / s).ln();
            }
        }
    }
    loss / n as f64
}

fn observed_3x2() -> EmpiricalConditionals {
    EmpiricalConditionals {
        object_given_verb: Tensor::from_rows(&[vec![0.75, 0.25], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap(),
        verb_given_object: Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.2, 0.8, 0.0]]).unwrap(),
    }
}

#[test]
fn condition_loss_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let observed = observed_3x2();
    for _ in 0..20 {
        let batch = rng.random_range(1..5);
        let ogv = random(&mut rng, batch * 3, 2, 0.01, 1.0);
        let vgo = random(&mut rng, batch * 2, 3, 0.01, 1.0);
        let expect = condition_oracle(&ogv, batch, &observed.object_given_verb)
            + condition_oracle(&vgo, batch, &observed.verb_given_object);
        let mut g = Graph::new();
        let out = fake_outputs(&mut g, ogv, vgo, batch);
        let l = condition_loss(&mut g, &out, &observed).unwrap();
        assert!((g.value(l).item() - expect).abs() < 1e-10);
    }
}

#[test]
fn condition_loss_at_target_is_entropy() {
    let observed = observed_3x2();
    let entropy = |t: &Tensor| -> f64 {
        let h: f64 = t.data().iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum();
        h / t.rows() as f64
    };
    let expect = entropy(&observed.object_given_verb) + entropy(&observed.verb_given_object);
    let mut g = Graph::new();
    // Unobserved rows get arbitrary positive scores; they are skipped.
    let mut ogv = observed.object_given_verb.clone();
    ogv.data_mut()[4] = 0.3;
    ogv.data_mut()[5] = 0.6;
    let out = fake_outputs(&mut g, ogv, observed.verb_given_object.clone(), 1);
    let l = condition_loss(&mut g, &out, &observed).unwrap();
    assert!((g.value(l).item() - expect).abs() < 1e-7);
}

#[test]
fn independence_rho_zero_and_batch_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let mk = |g: &mut Graph, rng: &mut ChaCha8Rng, n| g.constant(random(rng, n, 4, -1.0, 1.0));
    let f = Features {
        frame_features: mk(&mut g, &mut rng, 6),
        pooled: mk(&mut g, &mut rng, 6),
        verb_feature: mk(&mut g, &mut rng, 6),
        object_feature: mk(&mut g, &mut rng, 6),
    };
    let y = one_hot(&[0, 1, 2, 0, 1, 2], 3).unwrap();
    let t = independence_loss(&mut g, &f, &y, &y, 0.0).unwrap();
    assert_eq!(g.value(t.specific).item(), 0.0);
    let one = Features {
        frame_features: mk(&mut g, &mut rng, 1),
        pooled: mk(&mut g, &mut rng, 1),
        verb_feature: mk(&mut g, &mut rng, 1),
        object_feature: mk(&mut g, &mut rng, 1),
    };
    let y1 = one_hot(&[0], 3).unwrap();
    assert!(matches!(independence_loss(&mut g, &one, &y1, &y1, 0.5), Err(Error::InvalidInput(_))));
}

#[test]
fn copied_features_without_label_signal_score_near_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let n = 64;
    let mut g = Graph::new();
    let fx = g.constant(random(&mut rng, n, 5, -1.0, 1.0));
    let fo = g.constant(random(&mut rng, n, 5, -1.0, 1.0));
    let f = Features {
        frame_features: fx,
        pooled: fx,
        verb_feature: fx,
        object_feature: fo,
    };
    // Labels drawn independently of the features.
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let y = one_hot(&labels, 4).unwrap();
    let t = independence_loss(&mut g, &f, &y, &y, 0.5).unwrap();
    let sup = g.value(t.sup_verb).item();
    assert!(sup > 0.85 && sup <= 1.0 + 1e-12, "{sup}");
}

#[test]
fn missing_term_is_invalid_state() {
    let data = tiny();
    let (mut g, _, mut terms) = objective(&data, &tiny_config(), None);
    terms.con = None;
    assert!(matches!(total_loss(&mut g, &terms, &tiny_config(), false), Err(Error::InvalidState(_))));
    assert!(matches!(total_loss(&mut g, &terms, &tiny_config(), true), Err(Error::InvalidState(_))));
    let vanilla = TrainConfig::vanilla();
    assert!(total_loss(&mut g, &terms, &vanilla, true).is_ok());
}

#[test]
fn same_seed_same_history() {
    let data = tiny();
    let a = train(&data.features, &data.space, &data.split, &tiny_config()).unwrap();
    let b = train(&data.features, &data.space, &data.split, &tiny_config()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    assert_eq!(history_csv(&a.history).unwrap(), history_csv(&b.history).unwrap());
}

#[test]
fn zero_probability_never_mixes() {
    let data = tiny();
    let config = TrainConfig {
        cutmix_prob: 0.0,
        ..tiny_config()
    };
    let out = train(&data.features, &data.space, &data.split, &config).unwrap();
    assert!(out.history.iter().all(|h| h.cutmix_batches == 0 && h.losses.new.is_none()));
    assert!(out.history.iter().all(|h| h.losses.con.is_some()));
}

#[test]
fn enhanced_with_gamma_zero_and_no_mixing_adds_only_independence() {
    let data = tiny();
    let config = TrainConfig {
        gamma: 0.0,
        cutmix_prob: 0.0,
        ..tiny_config()
    };
    let (g, total, terms) = objective(&data, &config, None);
    let v = |x: Var| g.value(x).item();
    let vanilla = v(terms.com) + config.alpha * v(terms.component.total);
    assert!((v(total) - (vanilla + config.beta * v(terms.ind.unwrap().total))).abs() < 1e-12);
}

#[test]
fn non_finite_input_diverges_with_last_good_model() {
    let mut data = tiny();
    let first = data.split.train_samples[0].sample_id.parse::<usize>().unwrap();
    data.features.records[first].values.iter_mut().for_each(|v| *v = f32::NAN);
    match train(&data.features, &data.space, &data.split, &tiny_config()) {
        Err(Error::Diverged { last_good, .. }) => assert!(last_good.tensors().iter().all(|t| t.is_finite())),
        other => panic!("{other:?}"),
    }
}

#[test]
fn history_csv_layout() {
    let data = tiny();
    let out = train(&data.features, &data.space, &data.split, &tiny_config()).unwrap();
    let text = String::from_utf8(history_csv(&out.history).unwrap()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + tiny_config().epochs);
    assert_eq!(lines[0], "epoch,batches,cutmix_batches,verb,object,comp,com,sup_verb,sup_obj,ind,con,new,total");
}

#[test]
fn mix_batch_pastes_partner_regions() {
    let data = tiny();
    let samples = &data.split.train_samples[..4];
    let idx = data.features.resolve(&data.space, samples).unwrap();
    let videos = data.features.batch(&idx).unwrap();
    let labels: Vec<(usize, usize)> = samples.iter().map(|s| data.space.composition(s.composition)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mixed, info, records) = mix_batch(&videos, &labels, data.features.shape, &mut rng).unwrap();
    let len = data.features.shape.len();
    for (i, r) in records.iter().enumerate() {
        let mut expect = videos.data()[i * len..(i + 1) * len].to_vec();
        paste(&mut expect, &videos.data()[r.partner_index * len..(r.partner_index + 1) * len], r, data.features.shape)
            .unwrap();
        assert_eq!(&mixed.data()[i * len..(i + 1) * len], expect.as_slice());
        assert_eq!(info.partners[i], labels[r.partner_index]);
        assert_eq!(info.lambdas[i], r.lambda);
    }
}
