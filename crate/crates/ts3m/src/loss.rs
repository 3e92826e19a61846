use crate::Ts3mError;
use serde::{Deserialize, Serialize};
use umami_numerics::{Tape, ValueId};
use umami_topics::TopicGraph;

/// Clamp bounds for predicted probabilities inside the binary cross-entropy.
pub const NSP_CLAMP: f64 = 1e-7;
/// Floor for the topic probability inside the cross-entropy log.
pub const TH_PROB_FLOOR: f64 = 1e-12;

/// How the taxonomy distance between true and predicted topics scales the
/// topic cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceWeight {
    /// e^{−d}: the printed form. Note it shrinks the penalty for
    /// graph-distant mispredictions; kept as the default for fidelity.
    #[default]
    ExpNeg,
    /// (1 + d): opt-in alternative that grows the penalty with distance.
    OnePlusD,
}

impl DistanceWeight {
    pub fn factor(&self, d: usize) -> f64 {
        match self {
            DistanceWeight::ExpNeg => (-(d as f64)).exp(),
            DistanceWeight::OnePlusD => 1.0 + d as f64,
        }
    }
}

/// Binary cross-entropy −[y·ln ŷ + (1−y)·ln(1−ŷ)] with ŷ clamped into
/// [1e-7, 1−1e-7].
pub fn loss_nsp(y_hat: f64, y: bool) -> f64 {
    let p = y_hat.clamp(NSP_CLAMP, 1.0 - NSP_CLAMP);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Same BCE as a differentiable tape node; `y_hat` must be a scalar value.
pub fn loss_nsp_on_tape(tape: &mut Tape, y_hat: ValueId, y: bool) -> Result<ValueId, Ts3mError> {
    let p = tape.clamp(y_hat, NSP_CLAMP, 1.0 - NSP_CLAMP)?;
    let term = if y {
        tape.log(p)?
    } else {
        let neg = tape.scale(p, -1.0)?;
        let one_minus = tape.add_const(neg, 1.0)?;
        tape.log(one_minus)?
    };
    Ok(tape.scale(term, -1.0)?)
}

/// Topic-hierarchy loss on raw logits: softmax, then the one-hot
/// cross-entropy −ln k̂_T scaled by the distance factor between the true
/// topic and the argmax prediction.
pub fn loss_th(
    logits: &[f64],
    labels: &[String],
    true_topic: &str,
    graph: &TopicGraph,
    weight: DistanceWeight,
) -> Result<f64, Ts3mError> {
    let true_idx = labels
        .iter()
        .position(|l| l == true_topic)
        .ok_or_else(|| Ts3mError::UnknownLabel(true_topic.to_string()))?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let p_true = (exps[true_idx] / sum).max(TH_PROB_FLOOR);
    let pred_idx = logits
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0;
    let d = graph.distance(true_topic, &labels[pred_idx])?;
    Ok(weight.factor(d) * -p_true.ln())
}

/// Differentiable topic loss for a 1×P logit row already on the tape.
/// The distance factor is a constant of the current prediction; gradients
/// flow through the cross-entropy only.
pub fn loss_th_on_tape(
    tape: &mut Tape,
    k: ValueId,
    true_idx: usize,
    factor: f64,
) -> Result<ValueId, Ts3mError> {
    let probs = tape.softmax_rows(k)?;
    let p_true = tape.select(probs, 0, true_idx)?;
    let floored = tape.clamp(p_true, TH_PROB_FLOOR, 1.0)?;
    let logp = tape.log(floored)?;
    Ok(tape.scale(logp, -factor)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use umami_topics::TopicGraph;

    fn labels() -> Vec<String> {
        vec!["a".into(), "b".into(), "c".into()]
    }

    fn graph() -> TopicGraph {
        TopicGraph::from_json(
            r#"{"root": {"id": "r", "name": "root", "children": [
                {"id": "a", "name": "A"}, {"id": "b", "name": "B"}, {"id": "c", "name": "C"}]},
              "label_set": ["a", "b", "c"]}"#,
        )
        .unwrap()
    }

    #[test]
    fn nsp_matching_prediction_is_near_zero() {
        assert!(loss_nsp(1.0, true) <= 1e-6);
        assert!(loss_nsp(0.0, false) <= 1e-6);
    }

    #[test]
    fn nsp_half_is_ln_two() {
        assert!((loss_nsp(0.5, true) - 0.6931471805599453).abs() < 1e-12);
        assert!((loss_nsp(0.5, false) - 0.6931471805599453).abs() < 1e-12);
    }

    #[test]
    fn nsp_point_nine_positive() {
        assert!((loss_nsp(0.9, true) - 0.10536051565782628).abs() < 1e-9);
    }

    #[test]
    fn th_correct_prediction_uses_unit_factor() {
        // logits favor "a", true topic "a": factor e^0 = 1, loss = CE
        let logits = [2.0, 0.0, -1.0];
        let loss = loss_th(&logits, &labels(), "a", &graph(), DistanceWeight::ExpNeg).unwrap();
        let max = 2.0f64;
        let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
        let ce = -((2.0f64 - max).exp() / sum).ln();
        assert!((loss - ce).abs() < 1e-12);
    }

    #[test]
    fn th_perfect_one_hot_prediction_approaches_zero() {
        let loss =
            loss_th(&[60.0, 0.0, 0.0], &labels(), "a", &graph(), DistanceWeight::ExpNeg).unwrap();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn th_sibling_misprediction_scales_by_exp_minus_two() {
        // prediction "b", true "a": siblings at distance 2
        let logits = [0.0, 3.0, -1.0];
        let loss = loss_th(&logits, &labels(), "a", &graph(), DistanceWeight::ExpNeg).unwrap();
        let max = 3.0f64;
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let ce = -(exps[0] / sum).ln();
        assert!((loss - 0.1353352832366127 * ce).abs() < 1e-12);
    }

    #[test]
    fn th_factor_is_unit_iff_prediction_correct_and_in_unit_interval() {
        for d in 0..6 {
            let f = DistanceWeight::ExpNeg.factor(d);
            assert!(f > 0.0 && f <= 1.0);
            assert_eq!(f == 1.0, d == 0);
        }
    }

    #[test]
    fn th_unknown_topic_errors() {
        assert!(loss_th(&[0.0; 3], &labels(), "ghost", &graph(), DistanceWeight::ExpNeg).is_err());
    }

    #[test]
    fn one_plus_d_alternative_grows_with_distance() {
        assert_eq!(DistanceWeight::OnePlusD.factor(0), 1.0);
        assert_eq!(DistanceWeight::OnePlusD.factor(2), 3.0);
    }
}
