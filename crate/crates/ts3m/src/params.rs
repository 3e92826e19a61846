use crate::{Dims, Ts3mError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use umami_numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "ts3m-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// All learnable tensors of the network.
#[derive(Debug, Clone)]
pub struct Ts3mParams {
    /// Content stem: d_m → d_l.
    pub w1: Tensor,
    pub b1: Tensor,
    /// Content convolutions (k × c_in × c_out).
    pub conv1: Tensor,
    pub conv2: Tensor,
    /// Topic stem: d_m → d_l projection and its conv, separate weights.
    pub wt: Tensor,
    pub bt: Tensor,
    pub convt: Tensor,
    /// State scan: diagonal transition, input map, readout, feedthrough.
    pub a_diag: Tensor,
    pub b_in: Tensor,
    pub c_out: Tensor,
    pub d_skip: Tensor,
    /// Raw per-channel timescale; softplus keeps the effective Δ positive.
    pub delta_raw: Tensor,
    /// Branch projections into the fused width.
    pub proj_content: Tensor,
    pub proj_topic: Tensor,
    /// Gate weights.
    pub w_g1: Tensor,
    pub w_g2: Tensor,
    /// Indicator encoder.
    pub w_o: Tensor,
    pub b_o: Tensor,
    /// Upsample matrix mapping topic probabilities to an embedding row.
    pub upsample: Tensor,
    /// Pair-coherence (NSP) readout over the pooled fused sequence.
    pub w_nsp: Tensor,
    pub b_nsp: Tensor,
}

fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("positive dims")
}

impl Ts3mParams {
    /// Seeded initialization. The scan's diagonal starts strictly negative
    /// so the discretized transition stays inside the unit interval.
    pub fn init(dims: &Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = dims.conv_k;
        let (d_m, d_l, d_c, d_s, d_state, p) =
            (dims.d_m, dims.d_l, dims.d_c, dims.d_s, dims.d_state, dims.p);
        let a_data: Vec<f64> = (0..d_state).map(|i| -(1.0 + i as f64)).collect();
        // softplus(-2.25) ≈ 0.1, a gentle initial timescale
        let delta_data = vec![-2.25; d_state];
        Ts3mParams {
            w1: glorot(&mut rng, vec![d_m, d_l], d_m, d_l),
            b1: Tensor::zeros(vec![d_l]),
            conv1: glorot(&mut rng, vec![k, d_l, d_c], k * d_l, d_c),
            conv2: glorot(&mut rng, vec![k, d_c, d_c], k * d_c, d_c),
            wt: glorot(&mut rng, vec![d_m, d_l], d_m, d_l),
            bt: Tensor::zeros(vec![d_l]),
            convt: glorot(&mut rng, vec![k, d_l, d_c], k * d_l, d_c),
            a_diag: Tensor::new(vec![d_state], a_data).expect("positive dims"),
            b_in: glorot(&mut rng, vec![d_state, d_c], d_c, d_state),
            c_out: glorot(&mut rng, vec![d_c, d_state], d_state, d_c),
            d_skip: glorot(&mut rng, vec![d_c, d_c], d_c, d_c),
            delta_raw: Tensor::new(vec![d_state], delta_data).expect("positive dims"),
            proj_content: glorot(&mut rng, vec![d_c, d_s], d_c, d_s),
            proj_topic: glorot(&mut rng, vec![d_c, d_s], d_c, d_s),
            w_g1: glorot(&mut rng, vec![d_s, d_s], d_s, d_s),
            w_g2: glorot(&mut rng, vec![d_s, d_s], d_s, d_s),
            w_o: glorot(&mut rng, vec![d_s, p], d_s, p),
            b_o: Tensor::zeros(vec![p]),
            upsample: glorot(&mut rng, vec![p, d_m], p, d_m),
            w_nsp: glorot(&mut rng, vec![d_s, 1], d_s, 1),
            b_nsp: Tensor::zeros(vec![1]),
        }
    }

    /// Stable (name, tensor) listing used by the optimizer and checkpoints.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("wt", &self.wt),
            ("bt", &self.bt),
            ("convt", &self.convt),
            ("a_diag", &self.a_diag),
            ("b_in", &self.b_in),
            ("c_out", &self.c_out),
            ("d_skip", &self.d_skip),
            ("delta_raw", &self.delta_raw),
            ("proj_content", &self.proj_content),
            ("proj_topic", &self.proj_topic),
            ("w_g1", &self.w_g1),
            ("w_g2", &self.w_g2),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("upsample", &self.upsample),
            ("w_nsp", &self.w_nsp),
            ("b_nsp", &self.b_nsp),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("conv1", &mut self.conv1),
            ("conv2", &mut self.conv2),
            ("wt", &mut self.wt),
            ("bt", &mut self.bt),
            ("convt", &mut self.convt),
            ("a_diag", &mut self.a_diag),
            ("b_in", &mut self.b_in),
            ("c_out", &mut self.c_out),
            ("d_skip", &mut self.d_skip),
            ("delta_raw", &mut self.delta_raw),
            ("proj_content", &mut self.proj_content),
            ("proj_topic", &mut self.proj_topic),
            ("w_g1", &mut self.w_g1),
            ("w_g2", &mut self.w_g2),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("upsample", &mut self.upsample),
            ("w_nsp", &mut self.w_nsp),
            ("b_nsp", &mut self.b_nsp),
        ]
    }
}

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk checkpoint: versioned header, dims, labels, named parameter blobs.
#[derive(Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: Dims,
    pub labels: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    params: BTreeMap<String, TensorBlob>,
}

impl Checkpoint {
    pub fn capture(
        dims: &Dims,
        labels: &[String],
        params: &Ts3mParams,
        config_hash: Option<String>,
    ) -> Self {
        let blobs = params
            .named()
            .into_iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    TensorBlob {
                        shape: t.shape().to_vec(),
                        data: t.data().to_vec(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dims: *dims,
            labels: labels.to_vec(),
            config_hash,
            params: blobs,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), Ts3mError> {
        let json = serde_json::to_string(self)
            .map_err(|e| Ts3mError::Checkpoint(format!("serialize: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, Ts3mError> {
        let raw = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&raw).map_err(|e| Ts3mError::Checkpoint(format!("parse: {e}")))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Ts3mError::Checkpoint(format!(
                "unexpected format '{}'",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Ts3mError::Checkpoint(format!(
                "unsupported version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    /// Rebuild parameters, validating every blob against the recorded dims.
    pub fn restore(&self) -> Result<Ts3mParams, Ts3mError> {
        let mut params = Ts3mParams::init(&self.dims, 0);
        for (name, tensor) in params.named_mut() {
            let blob = self
                .params
                .get(name)
                .ok_or_else(|| Ts3mError::Checkpoint(format!("missing parameter '{name}'")))?;
            if blob.shape != tensor.shape() {
                return Err(Ts3mError::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    blob.shape,
                    tensor.shape()
                )));
            }
            *tensor = Tensor::new(blob.shape.clone(), blob.data.clone())
                .map_err(|e| Ts3mError::Checkpoint(format!("parameter '{name}': {e}")))?;
        }
        Ok(params)
    }
}
