//! Residual block definitions and their S/f decomposition.
//!
//! Each block's forward pass is `f(S(x), t) + x`. The split point is part of
//! the block definition: S is the prefix that can be cached and reused across
//! sampling iterations, f is the suffix that is always recomputed so that
//! time conditioning stays current. For the DiT blocks the modulation
//! parameters gamma/beta live inside S (captured at the keyframe) and only
//! the output scaling alpha(t) is recomputed in f.

use rand::Rng;

use crate::tensor::nn::{cross_attention, linear, mlp, self_attention};
use crate::tensor::Tensor;
use crate::Result;

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockKind {
    Resnet,
    SpatialTransformer,
    DitAttention,
    DitFeedforward,
}

impl BlockKind {
    pub fn is_transformer(&self) -> bool {
        !matches!(self, BlockKind::Resnet)
    }
}

pub enum ResidualBlock {
    Resnet(ResnetBlock),
    SpatialTransformer(SpatialTransformerBlock),
    DitAttention(DitBlock),
    DitFeedforward(DitBlock),
}

impl ResidualBlock {
    pub fn kind(&self) -> BlockKind {
        match self {
            ResidualBlock::Resnet(_) => BlockKind::Resnet,
            ResidualBlock::SpatialTransformer(_) => BlockKind::SpatialTransformer,
            ResidualBlock::DitAttention(_) => BlockKind::DitAttention,
            ResidualBlock::DitFeedforward(_) => BlockKind::DitFeedforward,
        }
    }

    /// The cacheable prefix. For the U-Net blocks this takes no time input;
    /// the DiT blocks fold their gamma/beta modulation (computed from the
    /// time embedding) into S.
    pub fn s_forward(&self, x: &Tensor, temb: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        match self {
            ResidualBlock::Resnet(b) => b.s_forward(x),
            ResidualBlock::SpatialTransformer(b) => b.s_forward(x, ctx),
            ResidualBlock::DitAttention(b) => b.s_forward(x, temb, true),
            ResidualBlock::DitFeedforward(b) => b.s_forward(x, temb, false),
        }
    }

    /// The recomputed suffix, without the final residual add.
    pub fn f_branch(&self, s_out: &Tensor, temb: &Tensor) -> Result<Tensor> {
        match self {
            ResidualBlock::Resnet(b) => b.f_branch(s_out, temb),
            ResidualBlock::SpatialTransformer(_) => Ok(s_out.clone()),
            ResidualBlock::DitAttention(b) | ResidualBlock::DitFeedforward(b) => {
                b.f_branch(s_out, temb)
            }
        }
    }

    /// Full forward: f(S(x), t) + x. Composed from the split, so the split
    /// identity holds by construction.
    pub fn forward(&self, x: &Tensor, temb: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let s = self.s_forward(x, temb, ctx)?;
        self.f_branch(&s, temb)?.add(x)
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            ResidualBlock::Resnet(b) => b.visit_params_mut(prefix, f),
            ResidualBlock::SpatialTransformer(b) => b.visit_params_mut(prefix, f),
            ResidualBlock::DitAttention(b) | ResidualBlock::DitFeedforward(b) => {
                b.visit_params_mut(prefix, f)
            }
        }
    }
}

pub(crate) fn init_normal(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| crate::data::normal(rng) * scale).collect();
    Tensor::from_vec(shape.to_vec(), data)
}

fn ones(n: usize) -> Tensor {
    Tensor::full(&[n], 1.0)
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(&[n])
}

/// `[c, h, w]` -> `[h*w, c]` token layout.
fn to_tokens(x: &Tensor) -> Result<Tensor> {
    let s = x.shape().to_vec();
    x.reshape(vec![s[0], s[1] * s[2]])?.transpose()
}

fn from_tokens(t: &Tensor, c: usize, h: usize, w: usize) -> Result<Tensor> {
    t.transpose()?.reshape(vec![c, h, w])
}

// GroupNorm -> Conv, then (in f) time bias -> GroupNorm -> Conv.
pub struct ResnetBlock {
    groups: usize,
    gn1_g: Tensor,
    gn1_b: Tensor,
    conv1_k: Tensor,
    conv1_b: Tensor,
    t_w: Tensor,
    t_b: Tensor,
    gn2_g: Tensor,
    gn2_b: Tensor,
    conv2_k: Tensor,
    conv2_b: Tensor,
}

impl ResnetBlock {
    pub fn new(channels: usize, temb_dim: usize, groups: usize, rng: &mut impl Rng) -> Self {
        let kscale = 1.0 / ((channels * 9) as f64).sqrt();
        ResnetBlock {
            groups,
            gn1_g: ones(channels),
            gn1_b: zeros(channels),
            conv1_k: init_normal(rng, &[channels, channels, 3, 3], kscale),
            conv1_b: zeros(channels),
            t_w: init_normal(rng, &[temb_dim, channels], 1.0 / (temb_dim as f64).sqrt()),
            t_b: zeros(channels),
            gn2_g: ones(channels),
            gn2_b: zeros(channels),
            conv2_k: init_normal(rng, &[channels, channels, 3, 3], kscale),
            conv2_b: zeros(channels),
        }
    }

    fn s_forward(&self, x: &Tensor) -> Result<Tensor> {
        x.groupnorm(self.groups, &self.gn1_g, &self.gn1_b, NORM_EPS)?
            .conv2d(&self.conv1_k)?
            .add_channel_bias(&self.conv1_b)
    }

    fn f_branch(&self, s_out: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let c = self.t_b.len();
        let tbias = linear(temb, &self.t_w, &self.t_b)?.reshape(vec![c])?;
        s_out
            .add_channel_bias(&tbias)?
            .groupnorm(self.groups, &self.gn2_g, &self.gn2_b, NORM_EPS)?
            .conv2d(&self.conv2_k)?
            .add_channel_bias(&self.conv2_b)
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (name, t) in [
            ("gn1_g", &mut self.gn1_g),
            ("gn1_b", &mut self.gn1_b),
            ("conv1_k", &mut self.conv1_k),
            ("conv1_b", &mut self.conv1_b),
            ("t_w", &mut self.t_w),
            ("t_b", &mut self.t_b),
            ("gn2_g", &mut self.gn2_g),
            ("gn2_b", &mut self.gn2_b),
            ("conv2_k", &mut self.conv2_k),
            ("conv2_b", &mut self.conv2_b),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }
}

// No time input anywhere: S is everything before the final residual add.
pub struct SpatialTransformerBlock {
    groups: usize,
    gn_g: Tensor,
    gn_b: Tensor,
    in_w: Tensor,
    in_b: Tensor,
    ln1_g: Tensor,
    ln1_b: Tensor,
    sa_q: Tensor,
    sa_k: Tensor,
    sa_v: Tensor,
    sa_o: Tensor,
    ln2_g: Tensor,
    ln2_b: Tensor,
    ca_q: Tensor,
    ca_k: Tensor,
    ca_v: Tensor,
    ca_o: Tensor,
    ln3_g: Tensor,
    ln3_b: Tensor,
    mlp_w1: Tensor,
    mlp_b1: Tensor,
    mlp_w2: Tensor,
    mlp_b2: Tensor,
    out_w: Tensor,
    out_b: Tensor,
}

impl SpatialTransformerBlock {
    pub fn new(channels: usize, ctx_dim: usize, groups: usize, rng: &mut impl Rng) -> Self {
        let c = channels;
        let s = 1.0 / (c as f64).sqrt();
        let sc = 1.0 / (ctx_dim as f64).sqrt();
        let hidden = 4 * c;
        SpatialTransformerBlock {
            groups,
            gn_g: ones(c),
            gn_b: zeros(c),
            in_w: init_normal(rng, &[c, c], s),
            in_b: zeros(c),
            ln1_g: ones(c),
            ln1_b: zeros(c),
            sa_q: init_normal(rng, &[c, c], s),
            sa_k: init_normal(rng, &[c, c], s),
            sa_v: init_normal(rng, &[c, c], s),
            sa_o: init_normal(rng, &[c, c], s),
            ln2_g: ones(c),
            ln2_b: zeros(c),
            ca_q: init_normal(rng, &[c, c], s),
            ca_k: init_normal(rng, &[ctx_dim, c], sc),
            ca_v: init_normal(rng, &[ctx_dim, c], sc),
            ca_o: init_normal(rng, &[c, c], s),
            ln3_g: ones(c),
            ln3_b: zeros(c),
            mlp_w1: init_normal(rng, &[c, hidden], s),
            mlp_b1: zeros(hidden),
            mlp_w2: init_normal(rng, &[hidden, c], 1.0 / (hidden as f64).sqrt()),
            mlp_b2: zeros(c),
            out_w: init_normal(rng, &[c, c], s),
            out_b: zeros(c),
        }
    }

    fn s_forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let gn = x.groupnorm(self.groups, &self.gn_g, &self.gn_b, NORM_EPS)?;
        let x1 = linear(&to_tokens(&gn)?, &self.in_w, &self.in_b)?;
        let x2 = x1.layernorm(&self.ln1_g, &self.ln1_b, NORM_EPS)?;
        let x2 = self_attention(&x2, &self.sa_q, &self.sa_k, &self.sa_v, &self.sa_o)?.add(&x1)?;
        let x3 = x2.layernorm(&self.ln2_g, &self.ln2_b, NORM_EPS)?;
        let x3 = cross_attention(&x3, ctx, &self.ca_q, &self.ca_k, &self.ca_v, &self.ca_o)?
            .add(&x2)?;
        let x4 = x3.layernorm(&self.ln3_g, &self.ln3_b, NORM_EPS)?;
        let x4 = mlp(&x4, &self.mlp_w1, &self.mlp_b1, &self.mlp_w2, &self.mlp_b2)?.add(&x3)?;
        let x4 = linear(&x4, &self.out_w, &self.out_b)?;
        from_tokens(&x4, c, h, w)
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (name, t) in [
            ("gn_g", &mut self.gn_g),
            ("gn_b", &mut self.gn_b),
            ("in_w", &mut self.in_w),
            ("in_b", &mut self.in_b),
            ("ln1_g", &mut self.ln1_g),
            ("ln1_b", &mut self.ln1_b),
            ("sa_q", &mut self.sa_q),
            ("sa_k", &mut self.sa_k),
            ("sa_v", &mut self.sa_v),
            ("sa_o", &mut self.sa_o),
            ("ln2_g", &mut self.ln2_g),
            ("ln2_b", &mut self.ln2_b),
            ("ca_q", &mut self.ca_q),
            ("ca_k", &mut self.ca_k),
            ("ca_v", &mut self.ca_v),
            ("ca_o", &mut self.ca_o),
            ("ln3_g", &mut self.ln3_g),
            ("ln3_b", &mut self.ln3_b),
            ("mlp_w1", &mut self.mlp_w1),
            ("mlp_b1", &mut self.mlp_b1),
            ("mlp_w2", &mut self.mlp_w2),
            ("mlp_b2", &mut self.mlp_b2),
            ("out_w", &mut self.out_w),
            ("out_b", &mut self.out_b),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
    }
}

// adaLN block over token layout: S = LayerNorm -> gamma/beta modulation ->
// attention (or MLP); f re-applies only the alpha(t) scaling.
pub struct DitBlock {
    mod_g_w: Tensor,
    mod_g_b: Tensor,
    mod_b_w: Tensor,
    mod_b_b: Tensor,
    mod_a_w: Tensor,
    mod_a_b: Tensor,
    // attention weights when this is an attention block
    sa_q: Option<(Tensor, Tensor, Tensor, Tensor)>,
    // mlp weights when this is a feed-forward block
    ff: Option<(Tensor, Tensor, Tensor, Tensor)>,
}

impl DitBlock {
    pub fn attention(dim: usize, temb_dim: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        DitBlock {
            sa_q: Some((
                init_normal(rng, &[dim, dim], s),
                init_normal(rng, &[dim, dim], s),
                init_normal(rng, &[dim, dim], s),
                init_normal(rng, &[dim, dim], s),
            )),
            ff: None,
            ..Self::modulation(dim, temb_dim, rng)
        }
    }

    pub fn feedforward(dim: usize, temb_dim: usize, rng: &mut impl Rng) -> Self {
        let hidden = 4 * dim;
        DitBlock {
            sa_q: None,
            ff: Some((
                init_normal(rng, &[dim, hidden], 1.0 / (dim as f64).sqrt()),
                zeros(hidden),
                init_normal(rng, &[hidden, dim], 1.0 / (hidden as f64).sqrt()),
                zeros(dim),
            )),
            ..Self::modulation(dim, temb_dim, rng)
        }
    }

    fn modulation(dim: usize, temb_dim: usize, rng: &mut impl Rng) -> Self {
        let st = 1.0 / (temb_dim as f64).sqrt();
        DitBlock {
            mod_g_w: init_normal(rng, &[temb_dim, dim], st),
            // gamma bias starts at 1 so the modulation is near-identity
            mod_g_b: ones(dim),
            mod_b_w: init_normal(rng, &[temb_dim, dim], st),
            mod_b_b: zeros(dim),
            // adaLN-Zero: alpha starts at exactly 0, the block starts as identity
            mod_a_w: Tensor::zeros(&[temb_dim, dim]),
            mod_a_b: zeros(dim),
            sa_q: None,
            ff: None,
        }
    }

    fn s_forward(&self, x: &Tensor, temb: &Tensor, attention: bool) -> Result<Tensor> {
        let d = x.shape()[1];
        let gamma = linear(temb, &self.mod_g_w, &self.mod_g_b)?.reshape(vec![d])?;
        let beta = linear(temb, &self.mod_b_w, &self.mod_b_b)?.reshape(vec![d])?;
        let x1 = x
            .layernorm(&ones(d), &zeros(d), NORM_EPS)?
            .mul_row_vec(&gamma)?
            .add_row_bias(&beta)?;
        if attention {
            let (q, k, v, o) = self.sa_q.as_ref().expect("attention block has weights");
            self_attention(&x1, q, k, v, o)
        } else {
            let (w1, b1, w2, b2) = self.ff.as_ref().expect("feed-forward block has weights");
            mlp(&x1, w1, b1, w2, b2)
        }
    }

    fn f_branch(&self, s_out: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let d = s_out.shape()[1];
        let alpha = linear(temb, &self.mod_a_w, &self.mod_a_b)?.reshape(vec![d])?;
        s_out.mul_row_vec(&alpha)
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (name, t) in [
            ("mod_g_w", &mut self.mod_g_w),
            ("mod_g_b", &mut self.mod_g_b),
            ("mod_b_w", &mut self.mod_b_w),
            ("mod_b_b", &mut self.mod_b_b),
            ("mod_a_w", &mut self.mod_a_w),
            ("mod_a_b", &mut self.mod_a_b),
        ] {
            f(format!("{prefix}.{name}"), t);
        }
        if let Some((q, k, v, o)) = &mut self.sa_q {
            f(format!("{prefix}.sa_q"), q);
            f(format!("{prefix}.sa_k"), k);
            f(format!("{prefix}.sa_v"), v);
            f(format!("{prefix}.sa_o"), o);
        }
        if let Some((w1, b1, w2, b2)) = &mut self.ff {
            f(format!("{prefix}.ff_w1"), w1);
            f(format!("{prefix}.ff_b1"), b1);
            f(format!("{prefix}.ff_w2"), w2);
            f(format!("{prefix}.ff_b2"), b2);
        }
    }
}
