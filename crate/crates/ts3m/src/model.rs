use crate::{Dims, Ts3mError, Ts3mParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use umami_numerics::{Padding, Tape, Tensor, ValueId};

/// Default cap on input sequence length.
pub const DEFAULT_MAX_TOKENS: usize = 1500;

/// The 1×P topic routing token produced by the indicator encoder.
#[derive(Debug, Clone)]
pub struct TopicIndicator {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted_index: usize,
    pub predicted_topic: String,
}

impl TopicIndicator {
    pub fn from_logits(logits: Vec<f64>, labels: &[String]) -> Self {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let probabilities: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        let predicted_index = logits
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
        TopicIndicator {
            logits,
            probabilities,
            predicted_index,
            predicted_topic: labels[predicted_index].clone(),
        }
    }
}

/// Tape handles for every parameter of one forward construction.
pub struct ParamIds {
    pub w1: ValueId,
    pub b1: ValueId,
    pub conv1: ValueId,
    pub conv2: ValueId,
    pub wt: ValueId,
    pub bt: ValueId,
    pub convt: ValueId,
    pub a_diag: ValueId,
    pub b_in: ValueId,
    pub c_out: ValueId,
    pub d_skip: ValueId,
    pub delta_raw: ValueId,
    pub proj_content: ValueId,
    pub proj_topic: ValueId,
    pub w_g1: ValueId,
    pub w_g2: ValueId,
    pub w_o: ValueId,
    pub b_o: ValueId,
    pub upsample: ValueId,
    pub w_nsp: ValueId,
    pub b_nsp: ValueId,
}

impl ParamIds {
    /// Rebuild from ids laid out in [`Ts3mParams::named`] order; used by
    /// gradient checks that control parameter registration themselves.
    pub fn from_ordered(ids: &[ValueId]) -> Self {
        assert_eq!(ids.len(), 21, "expected one id per parameter");
        ParamIds {
            w1: ids[0],
            b1: ids[1],
            conv1: ids[2],
            conv2: ids[3],
            wt: ids[4],
            bt: ids[5],
            convt: ids[6],
            a_diag: ids[7],
            b_in: ids[8],
            c_out: ids[9],
            d_skip: ids[10],
            delta_raw: ids[11],
            proj_content: ids[12],
            proj_topic: ids[13],
            w_g1: ids[14],
            w_g2: ids[15],
            w_o: ids[16],
            b_o: ids[17],
            upsample: ids[18],
            w_nsp: ids[19],
            b_nsp: ids[20],
        }
    }

    pub fn named(&self) -> Vec<(&'static str, ValueId)> {
        vec![
            ("w1", self.w1),
            ("b1", self.b1),
            ("conv1", self.conv1),
            ("conv2", self.conv2),
            ("wt", self.wt),
            ("bt", self.bt),
            ("convt", self.convt),
            ("a_diag", self.a_diag),
            ("b_in", self.b_in),
            ("c_out", self.c_out),
            ("d_skip", self.d_skip),
            ("delta_raw", self.delta_raw),
            ("proj_content", self.proj_content),
            ("proj_topic", self.proj_topic),
            ("w_g1", self.w_g1),
            ("w_g2", self.w_g2),
            ("w_o", self.w_o),
            ("b_o", self.b_o),
            ("upsample", self.upsample),
            ("w_nsp", self.w_nsp),
            ("b_nsp", self.b_nsp),
        ]
    }
}

/// Intermediate handles of one indicator construction, exposed so tests can
/// inspect branch outputs and kink margins.
pub struct IndicatorGraph {
    /// Content branch output, n'×d_c.
    pub content: ValueId,
    /// Topic branch scan output aligned to the content rows, n'×d_c.
    pub topic_aligned: ValueId,
    /// Fused gated sequence, n'×d_s.
    pub fused: ValueId,
    /// Topic indicator logits, 1×P.
    pub k: ValueId,
}

/// Per-activation dropout control for training-time graphs.
pub enum Dropout<'r> {
    Off,
    On { rng: &'r mut ChaCha8Rng, p: f64 },
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: ValueId) -> Result<ValueId, Ts3mError> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::On { rng, p } => {
                let keep = 1.0 - *p;
                let len = tape.value(x).len();
                let mask: Vec<f64> = (0..len)
                    .map(|_| {
                        if rng.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                Ok(tape.dropout_mask(x, mask)?)
            }
        }
    }
}

/// The assembled network: dims, parameters, and the topic label set.
#[derive(Debug, Clone)]
pub struct Ts3m {
    pub dims: Dims,
    pub params: Ts3mParams,
    pub labels: Vec<String>,
    pub max_tokens: usize,
    pub leaky_slope: f64,
}

impl Ts3m {
    pub fn new(dims: Dims, labels: Vec<String>, seed: u64) -> Result<Self, Ts3mError> {
        dims.validate()?;
        if labels.len() != dims.p {
            return Err(Ts3mError::InvalidDims(format!(
                "label set has {} entries but p = {}",
                labels.len(),
                dims.p
            )));
        }
        let params = Ts3mParams::init(&dims, seed);
        Ok(Ts3m {
            dims,
            params,
            labels,
            max_tokens: DEFAULT_MAX_TOKENS,
            leaky_slope: 0.01,
        })
    }

    pub fn with_params(mut self, params: Ts3mParams) -> Self {
        self.params = params;
        self
    }

    pub fn label_index(&self, topic: &str) -> Result<usize, Ts3mError> {
        self.labels
            .iter()
            .position(|l| l == topic)
            .ok_or_else(|| Ts3mError::UnknownLabel(topic.to_string()))
    }

    /// Put every parameter on the tape; trainable parameters are tracked
    /// leaves, frozen ones constants.
    pub fn register_params(&self, tape: &mut Tape, trainable: bool) -> ParamIds {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.input(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let p = &self.params;
        ParamIds {
            w1: reg(&p.w1),
            b1: reg(&p.b1),
            conv1: reg(&p.conv1),
            conv2: reg(&p.conv2),
            wt: reg(&p.wt),
            bt: reg(&p.bt),
            convt: reg(&p.convt),
            a_diag: reg(&p.a_diag),
            b_in: reg(&p.b_in),
            c_out: reg(&p.c_out),
            d_skip: reg(&p.d_skip),
            delta_raw: reg(&p.delta_raw),
            proj_content: reg(&p.proj_content),
            proj_topic: reg(&p.proj_topic),
            w_g1: reg(&p.w_g1),
            w_g2: reg(&p.w_g2),
            w_o: reg(&p.w_o),
            b_o: reg(&p.b_o),
            upsample: reg(&p.upsample),
            w_nsp: reg(&p.w_nsp),
            b_nsp: reg(&p.b_nsp),
        }
    }

    fn check_input(&self, t_i: &Tensor) -> Result<(), Ts3mError> {
        if t_i.shape().len() != 2 || t_i.cols() != self.dims.d_m {
            return Err(Ts3mError::InvalidDims(format!(
                "input shape {:?} does not match d_m = {}",
                t_i.shape(),
                self.dims.d_m
            )));
        }
        if t_i.rows() == 0 {
            return Err(Ts3mError::EmptyInput("token sequence".into()));
        }
        if t_i.rows() > self.max_tokens {
            return Err(Ts3mError::SequenceTooLong {
                got: t_i.rows(),
                max: self.max_tokens,
            });
        }
        Ok(())
    }

    /// Content branch: linear stem, same-padded conv, then a stride-2 conv
    /// that downsamples the token axis. Inputs shorter than the kernel are
    /// zero-padded on the right so degenerate lengths stay defined.
    pub fn content_branch(
        &self,
        tape: &mut Tape,
        ids: &ParamIds,
        t_i: ValueId,
        dropout: &mut Dropout,
    ) -> Result<ValueId, Ts3mError> {
        let x_l = tape.matmul_affine(t_i, ids.w1, ids.b1)?;
        let c1 = tape.conv1d(x_l, ids.conv1, 1, Padding::Same)?;
        let r1 = tape.leaky_relu(c1, self.leaky_slope)?;
        let r1 = dropout.apply(tape, r1)?;
        let k = self.dims.conv_k;
        let n = tape.value(r1).rows();
        let padded = if n < k {
            let zeros = tape.constant(Tensor::zeros(vec![k - n, self.dims.d_c]));
            tape.concat_rows(&[r1, zeros])?
        } else {
            r1
        };
        let c2 = tape.conv1d(padded, ids.conv2, 2, Padding::None)?;
        let r2 = tape.leaky_relu(c2, self.leaky_slope)?;
        Ok(dropout.apply(tape, r2)?)
    }

    /// Topic-state branch: its own projection+conv stem (same hyperparameters
    /// as the content stem's first stage, separate weights) feeding the
    /// discretized state scan.
    pub fn topic_branch(
        &self,
        tape: &mut Tape,
        ids: &ParamIds,
        t_i: ValueId,
        dropout: &mut Dropout,
    ) -> Result<ValueId, Ts3mError> {
        let x_t = tape.matmul_affine(t_i, ids.wt, ids.bt)?;
        let ct = tape.conv1d(x_t, ids.convt, 1, Padding::Same)?;
        let rt = tape.leaky_relu(ct, self.leaky_slope)?;
        let rt = dropout.apply(tape, rt)?;
        // softplus keeps Δ positive; the floor stops extreme updates from
        // underflowing it to exactly zero
        let sp = tape.softplus(ids.delta_raw)?;
        let delta = tape.add_const(sp, 1e-9)?;
        Ok(tape.ssm_scan(rt, ids.a_diag, ids.b_in, ids.c_out, ids.d_skip, delta)?)
    }

    /// Row indices that align the n-row topic branch with the n'-row strided
    /// content branch: the last input position each stride-2 window covers.
    pub fn alignment_indices(&self, n: usize) -> Vec<usize> {
        let k = self.dims.conv_k;
        let n_padded = n.max(k);
        let n_out = (n_padded - k) / 2 + 1;
        (0..n_out).map(|t| (t * 2 + k - 1).min(n - 1)).collect()
    }

    /// State-space gating: T_s = σ(X·W_G1 + Y·W_G2) row-wise, for equal-shape
    /// branch representations.
    pub fn gate_fuse(
        &self,
        tape: &mut Tape,
        ids: &ParamIds,
        x: ValueId,
        y: ValueId,
    ) -> Result<ValueId, Ts3mError> {
        if tape.value(x).shape() != tape.value(y).shape() {
            return Err(Ts3mError::Numerics(umami_numerics::NumericsError::Dimension {
                op: "gate_fuse",
                left: tape.value(x).shape().to_vec(),
                right: tape.value(y).shape().to_vec(),
            }));
        }
        let gx = tape.matmul(x, ids.w_g1)?;
        let gy = tape.matmul(y, ids.w_g2)?;
        let sum = tape.add(gx, gy)?;
        Ok(tape.sigmoid(sum)?)
    }

    /// Indicator encoder: K = GMP(T_s·W_o + b_o), a 1×P logit row.
    pub fn encode_indicator_graph(
        &self,
        tape: &mut Tape,
        ids: &ParamIds,
        t_s: ValueId,
    ) -> Result<ValueId, Ts3mError> {
        let h = tape.matmul_affine(t_s, ids.w_o, ids.b_o)?;
        Ok(tape.global_max_pool(h)?)
    }

    /// Pooled pair-coherence probability: σ(GMP(T_s)·w + b), a scalar.
    pub fn nsp_head(
        &self,
        tape: &mut Tape,
        ids: &ParamIds,
        t_s: ValueId,
    ) -> Result<ValueId, Ts3mError> {
        let pooled = tape.global_max_pool(t_s)?;
        let z = tape.matmul_affine(pooled, ids.w_nsp, ids.b_nsp)?;
        let s = tape.sigmoid(z)?;
        Ok(tape.select(s, 0, 0)?)
    }

    /// Build both branches, align, project, gate, and encode the indicator.
    pub fn build_indicator(
        &self,
        tape: &mut Tape,
        ids: &ParamIds,
        t_i: ValueId,
        dropout: &mut Dropout,
    ) -> Result<IndicatorGraph, Ts3mError> {
        let n = tape.value(t_i).rows();
        let content = self.content_branch(tape, ids, t_i, dropout)?;
        let topic = self.topic_branch(tape, ids, t_i, dropout)?;
        let aligned = tape.gather_rows(topic, self.alignment_indices(n))?;
        let x_proj = tape.matmul(content, ids.proj_content)?;
        let y_proj = tape.matmul(aligned, ids.proj_topic)?;
        let fused = self.gate_fuse(tape, ids, x_proj, y_proj)?;
        let k = self.encode_indicator_graph(tape, ids, fused)?;
        Ok(IndicatorGraph {
            content,
            topic_aligned: aligned,
            fused,
            k,
        })
    }

    /// Inference: topic indicator plus the (n+1)×d_m sequence with the
    /// upsampled topic token prepended.
    pub fn forward(&self, t_i: &Tensor) -> Result<(TopicIndicator, Tensor), Ts3mError> {
        self.check_input(t_i)?;
        let mut tape = Tape::new();
        let ids = self.register_params(&mut tape, false);
        let input = tape.constant(t_i.clone());
        let graph = self.build_indicator(&mut tape, &ids, input, &mut Dropout::Off)?;
        let probs = tape.softmax_rows(graph.k)?;
        let token = tape.matmul(probs, ids.upsample)?;
        let augmented = tape.concat_rows(&[token, input])?;
        let indicator =
            TopicIndicator::from_logits(tape.value(graph.k).data().to_vec(), &self.labels);
        Ok((indicator, tape.value(augmented).clone()))
    }

    /// Inference returning only the topic indicator.
    pub fn indicator(&self, t_i: &Tensor) -> Result<TopicIndicator, Ts3mError> {
        self.check_input(t_i)?;
        let mut tape = Tape::new();
        let ids = self.register_params(&mut tape, false);
        let input = tape.constant(t_i.clone());
        let graph = self.build_indicator(&mut tape, &ids, input, &mut Dropout::Off)?;
        Ok(TopicIndicator::from_logits(
            tape.value(graph.k).data().to_vec(),
            &self.labels,
        ))
    }
}
