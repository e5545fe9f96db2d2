use rand::Rng;

use super::{BoundParams, ModelParams, ParamId, Result, Tape, Tensor, TensorError, Var};

/// Linear -> ReLU stack with a final linear layer and an optional LayerNorm
/// (learnable gain and bias) on the output.
#[derive(Debug, Clone)]
pub struct Mlp {
    prefix: String,
    in_width: usize,
    out_width: usize,
    layers: Vec<(ParamId, ParamId)>,
    norm: Option<(ParamId, ParamId)>,
}

impl Mlp {
    /// Registers parameters `{prefix}.l{i}.w`, `{prefix}.l{i}.b` and, when
    /// normalized, `{prefix}.ln.gain` / `{prefix}.ln.bias`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ModelParams,
        rng: &mut R,
        prefix: &str,
        in_width: usize,
        hidden: usize,
        hidden_layers: usize,
        out_width: usize,
        layer_norm: bool,
    ) -> Result<Self> {
        let mut widths = vec![in_width];
        widths.extend(std::iter::repeat(hidden).take(hidden_layers));
        widths.push(out_width);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, w) in widths.windows(2).enumerate() {
            let wid = params.register_kaiming(format!("{prefix}.l{i}.w"), w[0], w[1], rng)?;
            let bid = params.register(format!("{prefix}.l{i}.b"), Tensor::zeros(&[1, w[1]]))?;
            layers.push((wid, bid));
        }
        let norm = if layer_norm {
            Some((
                params.register(format!("{prefix}.ln.gain"), Tensor::full(&[1, out_width], 1.0))?,
                params.register(format!("{prefix}.ln.bias"), Tensor::zeros(&[1, out_width]))?,
            ))
        } else {
            None
        };
        Ok(Self {
            prefix: prefix.to_string(),
            in_width,
            out_width,
            layers,
            norm,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Output LayerNorm gain and bias, when present.
    pub fn norm(&self) -> Option<(ParamId, ParamId)> {
        self.norm
    }

    /// Zeroes the weights and bias of the final linear layer.
    pub fn zero_output_layer(&self, params: &mut ModelParams) {
        let (w, b) = *self.layers.last().expect("mlp has at least one layer");
        params.get_mut(w).data_mut().fill(0.0);
        params.get_mut(b).data_mut().fill(0.0);
    }

    pub fn apply(&self, tape: &mut Tape, bound: &BoundParams, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.in_width {
            return Err(TensorError::Invalid {
                op: "mlp_apply",
                msg: format!(
                    "`{}` expects input width {}, got {width}",
                    self.prefix, self.in_width
                ),
            });
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, bound.var(*w))?;
            h = tape.add_row(h, bound.var(*b))?;
            if i < last {
                h = tape.relu(h);
            }
        }
        if let Some((gain, bias)) = self.norm {
            h = tape.layer_norm(h);
            h = tape.mul_row(h, bound.var(gain))?;
            h = tape.add_row(h, bound.var(bias))?;
        }
        Ok(h)
    }
}
