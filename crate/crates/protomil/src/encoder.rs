//! Per-modality spatial contextualization: linear projection, square-grid
//! padding, a positional convolution sandwiched between two self-attention
//! layers, and a weighted residual blend of local and contextualized
//! features.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tape::{Graph, NodeId, TapeError};
use crate::tensor::{Real, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Kernel sizes of the pyramid positional encoding convolutions.
pub const PPEG_KERNELS: [usize; 3] = [7, 5, 3];

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerParams<T: Real> {
    pub norm1_gain: Tensor<T>,
    pub norm1_bias: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub norm2_gain: Tensor<T>,
    pub norm2_bias: Tensor<T>,
    pub w_ff: Tensor<T>,
    pub b_ff: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialLayers<T: Real> {
    pub layer1: AttentionLayerParams<T>,
    pub layer2: AttentionLayerParams<T>,
    /// One depthwise filter bank per kernel size, D×k².
    pub ppeg_kernels: Vec<Tensor<T>>,
    pub cls_token: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialEncoderParams<T: Real> {
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    /// None disables the transformer/PPEG path (spatial-blend ablation):
    /// encode returns LayerNorm(project(M)).
    pub spatial: Option<SpatialLayers<T>>,
    pub blend_alpha: f64,
    /// Supplement form normalizes T before blending; switch off for the
    /// main-text variant.
    pub blend_normalize_t: bool,
    pub n_heads: usize,
    pub dropout_p: f64,
}

fn uniform_fan_in<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols).map(|_| T::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::from_vec(rows, cols, data)
}

impl<T: Real> AttentionLayerParams<T> {
    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionLayerParams {
            norm1_gain: Tensor::full(1, d, T::one()),
            norm1_bias: Tensor::zeros(1, d),
            w_q: uniform_fan_in(rng, d, d, d),
            w_k: uniform_fan_in(rng, d, d, d),
            w_v: uniform_fan_in(rng, d, d, d),
            w_o: uniform_fan_in(rng, d, d, d),
            norm2_gain: Tensor::full(1, d, T::one()),
            norm2_bias: Tensor::zeros(1, d),
            w_ff: uniform_fan_in(rng, d, d, d),
            b_ff: Tensor::zeros(1, d),
        }
    }

    fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.norm1_gain"), &self.norm1_gain);
        f(format!("{prefix}.norm1_bias"), &self.norm1_bias);
        f(format!("{prefix}.w_q"), &self.w_q);
        f(format!("{prefix}.w_k"), &self.w_k);
        f(format!("{prefix}.w_v"), &self.w_v);
        f(format!("{prefix}.w_o"), &self.w_o);
        f(format!("{prefix}.norm2_gain"), &self.norm2_gain);
        f(format!("{prefix}.norm2_bias"), &self.norm2_bias);
        f(format!("{prefix}.w_ff"), &self.w_ff);
        f(format!("{prefix}.b_ff"), &self.b_ff);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.norm1_gain"), &mut self.norm1_gain);
        f(format!("{prefix}.norm1_bias"), &mut self.norm1_bias);
        f(format!("{prefix}.w_q"), &mut self.w_q);
        f(format!("{prefix}.w_k"), &mut self.w_k);
        f(format!("{prefix}.w_v"), &mut self.w_v);
        f(format!("{prefix}.w_o"), &mut self.w_o);
        f(format!("{prefix}.norm2_gain"), &mut self.norm2_gain);
        f(format!("{prefix}.norm2_bias"), &mut self.norm2_bias);
        f(format!("{prefix}.w_ff"), &mut self.w_ff);
        f(format!("{prefix}.b_ff"), &mut self.b_ff);
    }
}

impl<T: Real> SpatialEncoderParams<T> {
    pub fn init(
        d_input: usize,
        d: usize,
        n_heads: usize,
        blend_alpha: f64,
        blend_normalize_t: bool,
        dropout_p: f64,
        with_spatial: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(d % n_heads == 0, "latent dim {d} not divisible by {n_heads} heads");
        let spatial = with_spatial.then(|| SpatialLayers {
            layer1: AttentionLayerParams::init(d, rng),
            layer2: AttentionLayerParams::init(d, rng),
            ppeg_kernels: PPEG_KERNELS
                .iter()
                .map(|&k| uniform_fan_in(rng, d, k * k, k * k))
                .collect(),
            cls_token: Tensor::zeros(1, d),
        });
        SpatialEncoderParams {
            proj_w: uniform_fan_in(rng, d_input, d, d_input),
            proj_b: Tensor::zeros(1, d),
            spatial,
            blend_alpha,
            blend_normalize_t,
            n_heads,
            dropout_p,
        }
    }

    pub fn d_input(&self) -> usize {
        self.proj_w.rows()
    }

    pub fn d(&self) -> usize {
        self.proj_w.cols()
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.proj_w"), &self.proj_w);
        f(format!("{prefix}.proj_b"), &self.proj_b);
        if let Some(sp) = &self.spatial {
            sp.layer1.for_each(&format!("{prefix}.layer1"), f);
            sp.layer2.for_each(&format!("{prefix}.layer2"), f);
            for (i, k) in sp.ppeg_kernels.iter().enumerate() {
                f(format!("{prefix}.ppeg_k{}", PPEG_KERNELS[i]), k);
            }
            f(format!("{prefix}.cls"), &sp.cls_token);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.proj_w"), &mut self.proj_w);
        f(format!("{prefix}.proj_b"), &mut self.proj_b);
        if let Some(sp) = &mut self.spatial {
            sp.layer1.for_each_mut(&format!("{prefix}.layer1"), f);
            sp.layer2.for_each_mut(&format!("{prefix}.layer2"), f);
            for (i, k) in sp.ppeg_kernels.iter_mut().enumerate() {
                f(format!("{prefix}.ppeg_k{}", PPEG_KERNELS[i]), k);
            }
            f(format!("{prefix}.cls"), &mut sp.cls_token);
        }
    }

    /// Register every tensor on the graph (visit order) and return the bound
    /// view. `trainable` decides param vs constant leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool, ids: &mut Vec<NodeId>) -> Result<BoundEncoder, TapeError> {
        let start = ids.len();
        let mut err = None;
        self.for_each("enc", &mut |_, t| {
            if err.is_some() {
                return;
            }
            let r = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
            match r {
                Ok(id) => ids.push(id),
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(BoundEncoder::from_ids(self, &ids[start..]))
    }
}

#[derive(Debug, Clone)]
pub struct BoundAttentionLayer {
    pub norm1_gain: NodeId,
    pub norm1_bias: NodeId,
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
    pub norm2_gain: NodeId,
    pub norm2_bias: NodeId,
    pub w_ff: NodeId,
    pub b_ff: NodeId,
}

#[derive(Debug, Clone)]
pub struct BoundSpatial {
    pub layer1: BoundAttentionLayer,
    pub layer2: BoundAttentionLayer,
    pub ppeg_kernels: Vec<NodeId>,
    pub cls_token: NodeId,
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub proj_w: NodeId,
    pub proj_b: NodeId,
    pub spatial: Option<BoundSpatial>,
    pub blend_alpha: f64,
    pub blend_normalize_t: bool,
    pub n_heads: usize,
    pub dropout_p: f64,
}

struct IdCursor<'a> {
    ids: &'a [NodeId],
    at: usize,
}

impl<'a> IdCursor<'a> {
    fn next(&mut self) -> NodeId {
        let id = self.ids[self.at];
        self.at += 1;
        id
    }
}

fn attn_from_ids(c: &mut IdCursor) -> BoundAttentionLayer {
    BoundAttentionLayer {
        norm1_gain: c.next(),
        norm1_bias: c.next(),
        w_q: c.next(),
        w_k: c.next(),
        w_v: c.next(),
        w_o: c.next(),
        norm2_gain: c.next(),
        norm2_bias: c.next(),
        w_ff: c.next(),
        b_ff: c.next(),
    }
}

impl BoundEncoder {
    /// `ids` must follow the `for_each` visit order of `params`.
    pub fn from_ids<T: Real>(params: &SpatialEncoderParams<T>, ids: &[NodeId]) -> Self {
        let mut c = IdCursor { ids, at: 0 };
        let proj_w = c.next();
        let proj_b = c.next();
        let spatial = params.spatial.as_ref().map(|sp| {
            let layer1 = attn_from_ids(&mut c);
            let layer2 = attn_from_ids(&mut c);
            let ppeg_kernels = (0..sp.ppeg_kernels.len()).map(|_| c.next()).collect();
            BoundSpatial { layer1, layer2, ppeg_kernels, cls_token: c.next() }
        });
        assert_eq!(c.at, ids.len(), "id count mismatch in encoder binding");
        BoundEncoder {
            proj_w,
            proj_b,
            spatial,
            blend_alpha: params.blend_alpha,
            blend_normalize_t: params.blend_normalize_t,
            n_heads: params.n_heads,
            dropout_p: params.dropout_p,
        }
    }
}

/// H = dropout(relu(M·W + b)); dropout only fires in train-mode graphs.
pub fn project<T: Real>(g: &mut Graph<T>, enc: &BoundEncoder, m: NodeId) -> Result<NodeId, TapeError> {
    let lin = g.matmul(m, enc.proj_w)?;
    let lin = g.add_row(lin, enc.proj_b)?;
    let act = g.relu(lin)?;
    g.dropout(act, enc.dropout_p)
}

/// Pad a length-n sequence to the closest enclosing square grid by repeating
/// initial rows (cycling when the deficit exceeds n).
pub fn grid_pad_indices(n: usize) -> (Vec<usize>, usize) {
    assert!(n >= 1);
    let s = (n as f64).sqrt().ceil() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.extend((0..s * s - n).map(|i| i % n));
    (idx, s)
}

pub fn grid_pad<T: Real>(g: &mut Graph<T>, h: NodeId) -> Result<(NodeId, usize), TapeError> {
    let n = g.value(h).rows();
    let (idx, s) = grid_pad_indices(n);
    Ok((g.gather_rows(h, &idx)?, s))
}

/// Class token passes through; grid tokens get the identity plus the sum of
/// the depthwise convolutions at every kernel size.
pub fn ppeg<T: Real>(
    g: &mut Graph<T>,
    kernels: &[NodeId],
    z: NodeId,
    s: usize,
) -> Result<NodeId, TapeError> {
    let len = g.value(z).rows();
    if len != 1 + s * s {
        return Err(TapeError::Invalid {
            op: "ppeg",
            msg: format!("sequence length {len} != 1 + {s}x{s}"),
        });
    }
    let cls = g.gather_rows(z, &[0])?;
    let grid_idx: Vec<usize> = (1..len).collect();
    let grid = g.gather_rows(z, &grid_idx)?;
    let mut acc = grid;
    for (i, &w) in kernels.iter().enumerate() {
        let k = PPEG_KERNELS[i];
        let conv = g.depthwise_conv2d(grid, w, s, k)?;
        acc = g.add(acc, conv)?;
    }
    g.concat_rows(&[cls, acc])
}

fn affine_layer_norm<T: Real>(
    g: &mut Graph<T>,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
) -> Result<NodeId, TapeError> {
    let n = g.layer_norm_rows(x, T::from_f64(LAYER_NORM_EPS))?;
    let n = g.mul_row(n, gain)?;
    g.add_row(n, bias)
}

/// Pre-norm transformer layer: multi-head exact softmax attention, then a
/// single D→D feed-forward with gelu, both residual.
pub fn transformer_layer<T: Real>(
    g: &mut Graph<T>,
    lp: &BoundAttentionLayer,
    z: NodeId,
    n_heads: usize,
) -> Result<NodeId, TapeError> {
    let d = g.value(z).cols();
    let dh = d / n_heads;
    let a_in = affine_layer_norm(g, z, lp.norm1_gain, lp.norm1_bias)?;
    let q = g.matmul(a_in, lp.w_q)?;
    let k = g.matmul(a_in, lp.w_k)?;
    let v = g.matmul(a_in, lp.w_v)?;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.mul_scalar(logits, scale)?;
        let attn = g.softmax_rows(logits)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let concat = g.concat_cols(&heads)?;
    let o = g.matmul(concat, lp.w_o)?;
    let z = g.add(z, o)?;

    let f_in = affine_layer_norm(g, z, lp.norm2_gain, lp.norm2_bias)?;
    let f = g.matmul(f_in, lp.w_ff)?;
    let f = g.add_row(f, lp.b_ff)?;
    let f = g.gelu(f)?;
    g.add(z, f)
}

/// Full spatial encoding of one modality's bag. `grid_xy` orders the tokens
/// row-major by (y, x) before the grid ops; the output keeps the original
/// instance order and shape N×D.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    enc: &BoundEncoder,
    m: NodeId,
    grid_xy: &[(i64, i64)],
) -> Result<NodeId, TapeError> {
    let n = g.value(m).rows();
    if grid_xy.len() != n {
        return Err(TapeError::Invalid {
            op: "encode",
            msg: format!("{} coordinates for {n} instances", grid_xy.len()),
        });
    }
    let h = project(g, enc, m)?;
    let lnh = g.layer_norm_rows(h, T::from_f64(LAYER_NORM_EPS))?;
    let Some(spatial) = &enc.spatial else {
        return Ok(lnh);
    };

    let mut perm: Vec<usize> = (0..n).collect();
    perm.sort_by_key(|&i| (grid_xy[i].1, grid_xy[i].0));
    let mut inv_perm = vec![0usize; n];
    for (pos, &i) in perm.iter().enumerate() {
        inv_perm[i] = pos;
    }

    let hs = g.gather_rows(h, &perm)?;
    let (padded, s) = grid_pad(g, hs)?;
    let z0 = g.concat_rows(&[spatial.cls_token, padded])?;
    let z1 = transformer_layer(g, &spatial.layer1, z0, enc.n_heads)?;
    let zp = ppeg(g, &spatial.ppeg_kernels, z1, s)?;
    let z2 = transformer_layer(g, &spatial.layer2, zp, enc.n_heads)?;
    let keep: Vec<usize> = (1..=n).collect();
    let t_sorted = g.gather_rows(z2, &keep)?;
    let t = g.gather_rows(t_sorted, &inv_perm)?;

    let alpha = T::from_f64(enc.blend_alpha);
    let t_branch = if enc.blend_normalize_t {
        g.layer_norm_rows(t, T::from_f64(LAYER_NORM_EPS))?
    } else {
        t
    };
    let left = g.mul_scalar(lnh, T::one() - alpha)?;
    let right = g.mul_scalar(t_branch, alpha)?;
    g.add(left, right)
}
