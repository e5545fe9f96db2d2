//! Long-range processor: single-head linear attention over garment vertices,
//! with per-vertex geodesic embeddings appended to the query and key inputs.

use rand::Rng;

use crate::tensor::{BoundParams, ModelParams, ParamId, Tape, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum GsaError {
    #[error(
        "embedding `{embedding}` has {embed_rows} rows but mesh `{mesh}` has {mesh_rows} vertices; \
         run `preprocess` on this mesh"
    )]
    RowMismatch {
        mesh: String,
        embedding: String,
        mesh_rows: usize,
        embed_rows: usize,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Appends the embedding to the vertex features along the feature axis.
pub fn gsa_inject(
    tape: &mut Tape,
    feats: Var,
    embed: Var,
    mesh: &str,
    embedding: &str,
) -> Result<Var, GsaError> {
    let (nf, ne) = (tape.value(feats).rows(), tape.value(embed).rows());
    if nf != ne {
        return Err(GsaError::RowMismatch {
            mesh: mesh.to_string(),
            embedding: embedding.to_string(),
            mesh_rows: nf,
            embed_rows: ne,
        });
    }
    Ok(tape.concat(&[feats, embed])?)
}

/// `elu(x) + 1`, strictly positive.
fn feature_map(tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
    let e = tape.elu(x);
    let ones = Tensor::full(tape.shape(e), 1.0);
    tape.add_const(e, &ones)
}

/// `out_i = phi(q_i) S / (phi(q_i) . z)` with `S = sum_j phi(k_j) v_j^T` and
/// `z = sum_j phi(k_j)`.
pub fn linear_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var, TensorError> {
    let fq = feature_map(tape, q)?;
    let fk = feature_map(tape, k)?;
    let fkt = tape.transpose(fk)?;
    let s = tape.matmul(fkt, v)?;
    let num = tape.matmul(fq, s)?;
    let z = tape.sum_rows(fk);
    let zt = tape.transpose(z)?;
    let den = tape.matmul(fq, zt)?;
    tape.div_col(num, den)
}

/// Parameters of one attention block.
#[derive(Debug, Clone)]
pub struct GsaBlock {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm_gain: ParamId,
    pub norm_bias: ParamId,
}

impl GsaBlock {
    pub fn new<R: Rng>(
        params: &mut ModelParams,
        rng: &mut R,
        prefix: &str,
        hidden: usize,
        embed_dim: usize,
    ) -> Result<Self, TensorError> {
        Ok(Self {
            wq: params.register_kaiming(format!("{prefix}.wq"), hidden + embed_dim, hidden, rng)?,
            wk: params.register_kaiming(format!("{prefix}.wk"), hidden + embed_dim, hidden, rng)?,
            wv: params.register_kaiming(format!("{prefix}.wv"), hidden, hidden, rng)?,
            wo: params.register_kaiming(format!("{prefix}.wo"), hidden, hidden, rng)?,
            norm_gain: params.register(format!("{prefix}.norm.gain"), Tensor::full(&[1, hidden], 1.0))?,
            norm_bias: params.register(format!("{prefix}.norm.bias"), Tensor::zeros(&[1, hidden]))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Gsa {
    pub blocks: Vec<GsaBlock>,
    pub embed_dim: usize,
}

impl Gsa {
    pub fn new<R: Rng>(
        params: &mut ModelParams,
        rng: &mut R,
        hidden: usize,
        embed_dim: usize,
        n_blocks: usize,
    ) -> Result<Self, TensorError> {
        let blocks = (0..n_blocks)
            .map(|i| GsaBlock::new(params, rng, &format!("gsa.block{i}"), hidden, embed_dim))
            .collect::<Result<_, _>>()?;
        Ok(Self { blocks, embed_dim })
    }
}

/// Pre-norm, inject, project, attend, project out, residual.
pub fn gsa_block(
    tape: &mut Tape,
    bound: &BoundParams,
    block: &GsaBlock,
    feats: Var,
    embed: Var,
) -> Result<Var, GsaError> {
    let ln = tape.layer_norm(feats);
    let ln = tape.mul_row(ln, bound.var(block.norm_gain))?;
    let ln = tape.add_row(ln, bound.var(block.norm_bias))?;
    let qk_in = gsa_inject(tape, ln, embed, "garment", "embedding")?;
    let q = tape.matmul(qk_in, bound.var(block.wq))?;
    let k = tape.matmul(qk_in, bound.var(block.wk))?;
    let v = tape.matmul(ln, bound.var(block.wv))?;
    let a = linear_attention(tape, q, k, v)?;
    let o = tape.matmul(a, bound.var(block.wo))?;
    Ok(tape.add(o, feats)?)
}

/// Runs the blocks in sequence over garment vertex features. With no
/// blocks the features pass through unchanged.
pub fn gsa_forward(
    tape: &mut Tape,
    bound: &BoundParams,
    gsa: &Gsa,
    feats: Var,
    embed: Var,
) -> Result<Var, GsaError> {
    let mut x = feats;
    for b in &gsa.blocks {
        x = gsa_block(tape, bound, b, x, embed)?;
    }
    Ok(x)
}

/// Rescales each embedding column to zero mean and unit variance.
pub fn standardize_columns(embed: &Tensor) -> Tensor {
    let (n, k) = (embed.rows(), embed.cols());
    let mut out = embed.clone();
    if n == 0 {
        return out;
    }
    for c in 0..k {
        let mean = (0..n).map(|i| embed.row(i)[c]).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (embed.row(i)[c] - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for i in 0..n {
            out.data_mut()[i * k + c] = (embed.row(i)[c] - mean) * inv;
        }
    }
    out
}
