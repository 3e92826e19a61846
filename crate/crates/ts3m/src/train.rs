use crate::loss::{loss_nsp_on_tape, loss_th_on_tape, DistanceWeight};
use crate::model::{Dropout, Ts3m};
use crate::{Ts3mError, Ts3mParams};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use umami_numerics::{NumericsError, Tape, Tensor};
use umami_topics::TopicGraph;

/// One labeled instruction/response pair, already token-embedded.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub id: String,
    /// Instruction token sequence, n×d_m.
    pub instruction: Tensor,
    /// Response token sequence, m×d_m; pair-coherence training needs it.
    pub response: Tensor,
    pub topic: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Base learning rate of the cosine schedule.
    pub lr: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Dropout applied after each LeakyReLU during training only.
    pub dropout: f64,
    pub max_sequence_tokens: usize,
    /// Weight on the pair-coherence loss.
    pub lambda1: f64,
    /// The topic-loss weight ramps linearly from start to end over training.
    pub lambda2_start: f64,
    pub lambda2_end: f64,
    pub seed: u64,
    #[serde(default)]
    pub distance_weight: DistanceWeight,
    /// Stop once training topic accuracy reaches this value.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            lr_min: 0.0,
            epochs: 10,
            batch_size: 32,
            dropout: 0.1,
            max_sequence_tokens: 1500,
            lambda1: 1.0,
            lambda2_start: 0.1,
            lambda2_end: 1.0,
            seed: 0,
            distance_weight: DistanceWeight::ExpNeg,
            target_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Ts3mError> {
        if self.lambda1 < 0.0 || self.lambda2_start < 0.0 || self.lambda2_end < 0.0 {
            return Err(Ts3mError::InvalidConfig(
                "loss weights must be nonnegative".into(),
            ));
        }
        if self.lambda1 + self.lambda2_start.max(self.lambda2_end) <= 0.0 {
            return Err(Ts3mError::InvalidConfig(
                "at least one loss weight must be positive".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Ts3mError::InvalidConfig(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Ts3mError::InvalidConfig(
                "dropout must lie in [0, 1)".into(),
            ));
        }
        if self.lr <= 0.0 || self.lr_min < 0.0 {
            return Err(Ts3mError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_nsp: f64,
    pub l_th: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<TrainLogRecord>,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub final_accuracy: f64,
}

impl TrainOutcome {
    /// Write the log as line-delimited JSON records.
    pub fn write_log(&self, path: &std::path::Path) -> Result<(), Ts3mError> {
        let mut file = std::fs::File::create(path)?;
        for record in &self.log {
            let line = serde_json::to_string(record).expect("log record serializes");
            writeln!(file, "{line}")?;
        }
        Ok(())
    }
}

struct Adam {
    m: BTreeMap<&'static str, Vec<f64>>,
    v: BTreeMap<&'static str, Vec<f64>>,
    t: usize,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new() -> Self {
        Adam {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Ts3mParams, grads: &BTreeMap<&'static str, Vec<f64>>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        for (name, tensor) in params.named_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name)
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name)
                .or_insert_with(|| vec![0.0; grad.len()]);
            let data = tensor.data_mut();
            for i in 0..grad.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * grad[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
            }
        }
    }
}

fn cosine_lr(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let progress = if total_steps <= 1 {
        0.0
    } else {
        step as f64 / (total_steps - 1) as f64
    };
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn lambda2_at(cfg: &TrainConfig, step: usize, total_steps: usize) -> f64 {
    let progress = if total_steps <= 1 {
        1.0
    } else {
        step as f64 / (total_steps - 1) as f64
    };
    cfg.lambda2_start + (cfg.lambda2_end - cfg.lambda2_start) * progress
}

/// Stack two sequences along the token axis.
fn vcat(a: &Tensor, b: &Tensor) -> Result<Tensor, Ts3mError> {
    if a.cols() != b.cols() {
        return Err(Ts3mError::Numerics(NumericsError::Dimension {
            op: "pair_concat",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }));
    }
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Ok(Tensor::new(vec![a.rows() + b.rows(), a.cols()], data)?)
}

fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

struct BatchResult {
    l_nsp: f64,
    l_th: f64,
    l_total: f64,
    grads: BTreeMap<&'static str, Vec<f64>>,
}

/// Forward + backward over one minibatch on a single tape.
fn batch_pass(
    model: &Ts3m,
    data: &[TrainExample],
    batch: &[usize],
    by_topic: &HashMap<&str, Vec<usize>>,
    graph: &TopicGraph,
    cfg: &TrainConfig,
    lambda2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BatchResult, Ts3mError> {
    let mut tape = Tape::new();
    let ids = model.register_params(&mut tape, true);
    let mut nsp_terms = Vec::with_capacity(batch.len());
    let mut th_terms = Vec::with_capacity(batch.len());

    for &i in batch {
        let ex = &data[i];
        // topic pass over the instruction
        let input = tape.constant(ex.instruction.clone());
        let graph_ids = {
            let mut dropout = Dropout::On {
                rng,
                p: cfg.dropout,
            };
            model.build_indicator(&mut tape, &ids, input, &mut dropout)?
        };
        let true_idx = model.label_index(&ex.topic)?;
        let pred_idx = argmax(tape.value(graph_ids.k).data());
        let d = graph.distance(&ex.topic, &model.labels[pred_idx])?;
        let factor = cfg.distance_weight.factor(d);
        th_terms.push(loss_th_on_tape(&mut tape, graph_ids.k, true_idx, factor)?);

        // pair-coherence pass over [instruction; response]
        let positive = rng.gen_bool(0.5);
        let (response, label) = if positive {
            (&ex.response, true)
        } else {
            let peers: Vec<usize> = by_topic[ex.topic.as_str()]
                .iter()
                .copied()
                .filter(|&j| j != i)
                .collect();
            if peers.is_empty() {
                (&ex.response, true)
            } else {
                let j = peers[rng.gen_range(0..peers.len())];
                (&data[j].response, false)
            }
        };
        let pair = vcat(&ex.instruction, response)?;
        let pair_input = tape.constant(pair);
        let pair_graph = {
            let mut dropout = Dropout::On {
                rng,
                p: cfg.dropout,
            };
            model.build_indicator(&mut tape, &ids, pair_input, &mut dropout)?
        };
        let y_hat = model.nsp_head(&mut tape, &ids, pair_graph.fused)?;
        nsp_terms.push(loss_nsp_on_tape(&mut tape, y_hat, label)?);
    }

    let inv_b = 1.0 / batch.len() as f64;
    let mut nsp_sum = nsp_terms[0];
    for &t in &nsp_terms[1..] {
        nsp_sum = tape.add(nsp_sum, t)?;
    }
    let mut th_sum = th_terms[0];
    for &t in &th_terms[1..] {
        th_sum = tape.add(th_sum, t)?;
    }
    let nsp_mean = tape.scale(nsp_sum, inv_b)?;
    let th_mean = tape.scale(th_sum, inv_b)?;
    let weighted_nsp = tape.scale(nsp_mean, cfg.lambda1)?;
    let weighted_th = tape.scale(th_mean, lambda2)?;
    let total = tape.add(weighted_nsp, weighted_th)?;

    tape.backward(total)?;
    let grads = ids
        .named()
        .into_iter()
        .map(|(name, id)| {
            let g = tape
                .grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.value(id).len()]);
            (name, g)
        })
        .collect();
    Ok(BatchResult {
        l_nsp: tape.value(nsp_mean).scalar_value(),
        l_th: tape.value(th_mean).scalar_value(),
        l_total: tape.value(total).scalar_value(),
        grads,
    })
}

/// Fraction of examples whose predicted topic matches the label.
pub fn topic_accuracy(model: &Ts3m, data: &[TrainExample]) -> Result<f64, Ts3mError> {
    if data.is_empty() {
        return Err(Ts3mError::EmptyInput("accuracy dataset".into()));
    }
    let mut correct = 0usize;
    for ex in data {
        if model.indicator(&ex.instruction)?.predicted_topic == ex.topic {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Minimize λ1·L_pair + λ2·L_topic with Adam under a cosine learning-rate
/// schedule. λ2 ramps linearly across training. Deterministic given
/// `cfg.seed`; aborts with a diagnostic if the loss leaves the finite range.
pub fn train(
    model: &mut Ts3m,
    data: &[TrainExample],
    graph: &TopicGraph,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, Ts3mError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Ts3mError::EmptyInput("training dataset".into()));
    }
    for ex in data {
        model.label_index(&ex.topic)?;
        if ex.instruction.rows() > cfg.max_sequence_tokens
            || ex.response.rows() > cfg.max_sequence_tokens
        {
            return Err(Ts3mError::SequenceTooLong {
                got: ex.instruction.rows().max(ex.response.rows()),
                max: cfg.max_sequence_tokens,
            });
        }
    }
    model.max_tokens = cfg.max_sequence_tokens.max(model.max_tokens);

    let mut by_topic: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, ex) in data.iter().enumerate() {
        by_topic.entry(ex.topic.as_str()).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batches_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let mut adam = Adam::new();
    let mut log: Vec<TrainLogRecord> = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(cfg, step, total_steps);
            let lambda2 = lambda2_at(cfg, step, total_steps);
            let result = match batch_pass(model, data, batch, &by_topic, graph, cfg, lambda2, &mut rng)
            {
                Ok(r) => r,
                Err(Ts3mError::Numerics(NumericsError::NonFinite { op })) => {
                    return Err(Ts3mError::Diverged {
                        step,
                        detail: format!("non-finite value in {op}"),
                    });
                }
                Err(e) => return Err(e),
            };
            if !result.l_total.is_finite() {
                return Err(Ts3mError::Diverged {
                    step,
                    detail: "loss left the finite range".into(),
                });
            }
            adam.step(&mut model.params, &result.grads, lr);
            log.push(TrainLogRecord {
                step,
                epoch,
                l_nsp: result.l_nsp,
                l_th: result.l_th,
                l_total: result.l_total,
                lr,
            });
            step += 1;
        }
        epochs_run = epoch + 1;
        if let Some(target) = cfg.target_accuracy {
            if topic_accuracy(model, data)? >= target {
                break;
            }
        }
    }

    let final_loss = log.last().map(|r| r.l_total).unwrap_or(f64::NAN);
    let final_accuracy = topic_accuracy(model, data)?;
    Ok(TrainOutcome {
        log,
        epochs_run,
        final_loss,
        final_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Dims;

    fn flat_graph() -> TopicGraph {
        TopicGraph::from_json(
            r#"{"root": {"id": "r", "name": "root", "children": [
                {"id": "t0", "name": "T0"}, {"id": "t1", "name": "T1"},
                {"id": "t2", "name": "T2"}]},
              "label_set": ["t0", "t1", "t2"]}"#,
        )
        .unwrap()
    }

    fn model() -> Ts3m {
        let dims = Dims::new(6, 8, 8, 8, 4, 3);
        Ts3m::new(dims, vec!["t0".into(), "t1".into(), "t2".into()], 7).unwrap()
    }

    /// Separable synthetic set: topic i concentrates mass on coordinate 2i.
    fn synthetic(count: usize, seed: u64) -> Vec<TrainExample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let topic = i % 3;
                let n = rng.gen_range(3..=6);
                let mk = |rows: usize, rng: &mut ChaCha8Rng| {
                    let data: Vec<f64> = (0..rows * 6)
                        .map(|j| {
                            let col = j % 6;
                            let base = if col == 2 * topic { 1.0 } else { 0.0 };
                            base + rng.gen_range(-0.05..0.05)
                        })
                        .collect();
                    Tensor::new(vec![rows, 6], data).unwrap()
                };
                TrainExample {
                    id: format!("s{i}"),
                    instruction: mk(n, &mut rng),
                    response: mk(3, &mut rng),
                    topic: format!("t{topic}"),
                }
            })
            .collect()
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut m = model();
        let err = train(&mut m, &[], &flat_graph(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Ts3mError::EmptyInput(_)));
    }

    #[test]
    fn same_seed_gives_identical_final_loss() {
        let data = synthetic(24, 3);
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 3,
            batch_size: 8,
            seed: 11,
            ..Default::default()
        };
        let mut m1 = model();
        let mut m2 = model();
        let o1 = train(&mut m1, &data, &flat_graph(), &cfg).unwrap();
        let o2 = train(&mut m2, &data, &flat_graph(), &cfg).unwrap();
        assert_eq!(o1.final_loss.to_bits(), o2.final_loss.to_bits());
    }

    #[test]
    fn zero_lambda2_contributes_no_topic_gradient() {
        let data = synthetic(8, 5);
        let m = model();
        let graph = flat_graph();
        let by_topic: HashMap<&str, Vec<usize>> = {
            let mut map: HashMap<&str, Vec<usize>> = HashMap::new();
            for (i, ex) in data.iter().enumerate() {
                map.entry(ex.topic.as_str()).or_default().push(i);
            }
            map
        };
        let batch: Vec<usize> = (0..data.len()).collect();
        let cfg = TrainConfig {
            dropout: 0.0,
            ..Default::default()
        };
        let run = |weight: DistanceWeight| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let cfg = TrainConfig {
                distance_weight: weight,
                ..cfg.clone()
            };
            batch_pass(&m, &data, &batch, &by_topic, &graph, &cfg, 0.0, &mut rng).unwrap()
        };
        // changing the distance weighting changes the topic-loss VALUE but,
        // at λ2 = 0, must not move a single gradient bit
        let exp_neg = run(DistanceWeight::ExpNeg);
        let one_plus = run(DistanceWeight::OnePlusD);
        assert_ne!(exp_neg.l_th, one_plus.l_th);
        for (name, g) in &exp_neg.grads {
            assert_eq!(g, &one_plus.grads[name], "gradient of {name} moved");
        }
        assert_eq!(exp_neg.l_total, cfg.lambda1 * exp_neg.l_nsp);
    }

    #[test]
    fn separable_synthetic_set_trains_to_high_accuracy() {
        let data = synthetic(60, 13);
        let mut m = model();
        let cfg = TrainConfig {
            lr: 5e-3,
            epochs: 40,
            batch_size: 16,
            dropout: 0.1,
            seed: 4,
            target_accuracy: Some(0.95),
            ..Default::default()
        };
        let outcome = train(&mut m, &data, &flat_graph(), &cfg).unwrap();
        assert!(
            outcome.final_accuracy >= 0.95,
            "accuracy {} after {} epochs",
            outcome.final_accuracy,
            outcome.epochs_run
        );
    }

    #[test]
    fn huge_learning_rate_diverges_with_diagnostic() {
        let data = synthetic(16, 1);
        let mut m = model();
        let cfg = TrainConfig {
            lr: 1e14,
            epochs: 10,
            batch_size: 8,
            seed: 2,
            ..Default::default()
        };
        match train(&mut m, &data, &flat_graph(), &cfg) {
            Err(Ts3mError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn log_records_carry_schedule_values() {
        let data = synthetic(12, 8);
        let mut m = model();
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 2,
            batch_size: 6,
            seed: 1,
            ..Default::default()
        };
        let outcome = train(&mut m, &data, &flat_graph(), &cfg).unwrap();
        assert_eq!(outcome.log.len(), 4);
        assert!(outcome.log[0].lr > outcome.log[3].lr);
        assert!(outcome.log.iter().all(|r| r.l_total.is_finite()));
    }
}
