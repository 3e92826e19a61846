use crate::Ts3mError;
use serde::{Deserialize, Serialize};

/// Static dimensions of the network. The per-input token count `n` is not
/// part of this struct; it varies per sequence up to the configured limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// Token embedding width of the input sequence.
    pub d_m: usize,
    /// Projected width after the initial linear map.
    pub d_l: usize,
    /// Convolution channel width (also the state-scan in/out width).
    pub d_c: usize,
    /// Fused width the two branches are projected to before gating.
    pub d_s: usize,
    /// Latent state channels of the scan.
    pub d_state: usize,
    /// Topic label count.
    pub p: usize,
    /// Convolution kernel width.
    pub conv_k: usize,
}

impl Dims {
    pub fn new(d_m: usize, d_l: usize, d_c: usize, d_s: usize, d_state: usize, p: usize) -> Self {
        Dims {
            d_m,
            d_l,
            d_c,
            d_s,
            d_state,
            p,
            conv_k: 3,
        }
    }

    pub fn validate(&self) -> Result<(), Ts3mError> {
        let fields = [
            ("d_m", self.d_m),
            ("d_l", self.d_l),
            ("d_c", self.d_c),
            ("d_s", self.d_s),
            ("d_state", self.d_state),
            ("p", self.p),
            ("conv_k", self.conv_k),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Ts3mError::InvalidDims(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}
