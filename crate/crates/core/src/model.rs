//! The full network: encoder, the two parallel processors, fusion and
//! decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gsa::{gsa_forward, Gsa, GsaError};
use crate::lsdmp::{encode, lsdmp_forward, Encoder, GraphInputs, Lsdmp};
use crate::tensor::{BoundParams, Mlp, ModelParams, ParamId, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Hidden layers per MLP.
    pub mlp_hidden_layers: usize,
    pub lsdmp_layers: usize,
    pub smoothing_steps: usize,
    pub gsa_blocks: usize,
    /// Geodesic embedding width `k`.
    pub embed_dim: usize,
    pub standardize_embedding: bool,
    /// Fixed acceleration unit of the decoder output, m/s^2.
    pub accel_unit: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            mlp_hidden_layers: 2,
            lsdmp_layers: 15,
            smoothing_steps: 3,
            gsa_blocks: 4,
            embed_dim: 8,
            standardize_embedding: false,
            accel_unit: 9.81,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden_dim == 0 {
            return Err("model.hidden_dim must be >= 1".into());
        }
        if self.lsdmp_layers == 0 {
            return Err("model.lsdmp_layers must be >= 1".into());
        }
        if self.embed_dim == 0 {
            return Err("model.embed_dim must be >= 1".into());
        }
        if !(self.accel_unit > 0.0 && self.accel_unit.is_finite()) {
            return Err("model.accel_unit must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub encoder: Encoder,
    pub lsdmp: Lsdmp,
    pub gsa: Gsa,
    pub fusion: Mlp,
    pub decoder: Mlp,
    pub decoder_scale: ParamId,
}

/// Intermediate handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Garment rows of the short-range branch.
    pub lsdmp: Var,
    pub gsa: Var,
    pub fused: Var,
    /// `n_garment x 3`, m/s^2.
    pub accel: Var,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, TensorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        let h = config.hidden_dim;
        let hl = config.mlp_hidden_layers;
        let encoder = Encoder::new(&mut params, &mut rng, h, hl)?;
        let lsdmp = Lsdmp::new(&mut params, &mut rng, h, hl, config.lsdmp_layers, config.smoothing_steps)?;
        let gsa = Gsa::new(&mut params, &mut rng, h, config.embed_dim, config.gsa_blocks)?;
        let fusion = Mlp::new(&mut params, &mut rng, "fusion", 2 * h, h, hl, h, false)?;
        let decoder = Mlp::new(&mut params, &mut rng, "decoder", h, h, hl, 3, false)?;
        let decoder_scale = params.register("decoder.scale", Tensor::scalar(1.0))?;
        Ok(Self {
            config,
            params,
            encoder,
            lsdmp,
            gsa,
            fusion,
            decoder,
            decoder_scale,
        })
    }

    /// Zeroes the decoder's last layer so every predicted acceleration is 0.
    pub fn zero_decoder_output(&mut self) {
        self.decoder.zero_output_layer(&mut self.params);
    }

    /// `embed` is the `n_garment x k` geodesic embedding.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inputs: &GraphInputs,
        embed: Var,
    ) -> Result<ForwardOutput, GsaError> {
        let lg = encode(tape, bound, &self.encoder, inputs)?;
        let garment = inputs.index.garment_rows();
        let short = lsdmp_forward(tape, bound, &self.lsdmp, &lg)?;
        let short_g = tape.gather_rows(short.vertex_feats, garment.clone())?;
        let enc_g = tape.gather_rows(lg.vertex_feats, garment)?;
        let long = gsa_forward(tape, bound, &self.gsa, enc_g, embed)?;
        let cat = tape.concat(&[short_g, long])?;
        let fused = self.fusion.apply(tape, bound, cat)?;
        let raw = self.decoder.apply(tape, bound, fused)?;
        let mut accel = tape.mul_scalar(raw, bound.var(self.decoder_scale))?;
        if self.config.accel_unit != 1.0 {
            accel = tape.scale(accel, self.config.accel_unit);
        }
        Ok(ForwardOutput {
            lsdmp: short_g,
            gsa: long,
            fused,
            accel,
        })
    }
}
