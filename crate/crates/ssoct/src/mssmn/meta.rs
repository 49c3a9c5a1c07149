//! Weight-prediction modules.
//!
//! The restoration module maps the factor pair (l_hat, m_hat) to one k x k
//! kernel per feature channel; the upscaling module maps each position
//! vector (frac_w, frac_h, l_hat) to a full k x k x f_c kernel. Both are
//! single-hidden-layer relu networks whose outputs are consumed as
//! convolution weights, so their parameters receive gradients through the
//! convolutions they parameterize.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{ParamSet, Tape, Tensor, Var};

use super::extractor::{register_dense, DenseIdx};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetaConfig {
    /// Hidden width of the restoration predictor (input 2).
    pub phi_r_hidden: usize,
    /// Hidden width of the upscaling predictor (input 3).
    pub phi_u_hidden: usize,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig { phi_r_hidden: 64, phi_u_hidden: 256 }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct MetaIdx {
    phi_r_fc1: DenseIdx,
    phi_r_fc2: DenseIdx,
    phi_u_fc1: DenseIdx,
    phi_u_fc2: DenseIdx,
    pub out_bias: usize,
}

impl MetaIdx {
    pub fn register(
        cfg: &MetaConfig,
        k: usize,
        f_c: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let out = k * k * f_c;
        // The output heads are shrunk by the contraction length k^2 * f_c:
        // their outputs act as convolution kernels summed over that many
        // taps, so fan-in scaling alone would put the initial network
        // output far outside [0, 1].
        let head_bound = |hidden: usize| (6.0 / hidden as f64).sqrt() / out as f64;
        let phi_r_fc1 = register_dense(params, "meta.phi_r.fc1", cfg.phi_r_hidden, 2, rng);
        let phi_r_fc2_w = params.register_uniform_bounded(
            "meta.phi_r.fc2.w",
            vec![out, cfg.phi_r_hidden],
            head_bound(cfg.phi_r_hidden),
            rng,
        );
        let phi_r_fc2_b = params.register_zeros("meta.phi_r.fc2.b", vec![out]);
        let phi_u_fc1 = register_dense(params, "meta.phi_u.fc1", cfg.phi_u_hidden, 3, rng);
        let phi_u_fc2_w = params.register_uniform_bounded(
            "meta.phi_u.fc2.w",
            vec![out, cfg.phi_u_hidden],
            head_bound(cfg.phi_u_hidden),
            rng,
        );
        let phi_u_fc2_b = params.register_zeros("meta.phi_u.fc2.b", vec![out]);
        let out_bias = params.register_zeros("meta.out_bias", vec![1]);
        MetaIdx {
            phi_r_fc1,
            phi_r_fc2: DenseIdx { w: phi_r_fc2_w, b: phi_r_fc2_b },
            phi_u_fc1,
            phi_u_fc2: DenseIdx { w: phi_u_fc2_w, b: phi_u_fc2_b },
            out_bias,
        }
    }

    fn two_layer(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        fc1: DenseIdx,
        fc2: DenseIdx,
        input: Var,
    ) -> Result<Var> {
        let w1 = tape.param(params, fc1.w);
        let b1 = tape.param(params, fc1.b);
        let mut h = tape.dense(input, w1, b1)?;
        h = tape.relu(h);
        let w2 = tape.param(params, fc2.w);
        let b2 = tape.param(params, fc2.b);
        tape.dense(h, w2, b2)
    }

    /// Restoration kernels for the factor pair, reshaped to `f_c x k x k`
    /// (one depthwise kernel per channel, channel-major).
    pub fn predict_restoration(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        k: usize,
        f_c: usize,
        l_hat: f64,
        m_hat: f64,
    ) -> Result<Var> {
        let input = tape.constant(Tensor::new(vec![1, 2], vec![l_hat, m_hat])?);
        let flat = self.two_layer(tape, params, self.phi_r_fc1, self.phi_r_fc2, input)?;
        tape.reshape(flat, vec![f_c, k, k])
    }

    /// Upscaling kernel bank: one row of length `k * k * f_c` per distinct
    /// position vector (rows of `v`).
    pub fn kernel_bank(&self, tape: &mut Tape, params: &ParamSet, v: Tensor) -> Result<Var> {
        let input = tape.constant(v);
        self.two_layer(tape, params, self.phi_u_fc1, self.phi_u_fc2, input)
    }
}
