//! Toy score networks: a small U-Net and a small DiT, both operating on
//! `[c, h, w]` inputs of arbitrary extent.

use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::blocks::{init_normal, BlockKind, DitBlock, ResidualBlock, ResnetBlock, SpatialTransformerBlock};
use super::{BlockPolicy, StepCost};
use crate::tensor::nn::linear;
use crate::tensor::{Tape, Tensor};
use crate::{io, Error, Result};

const TIME_EMBED_IN: usize = 64;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    ToyUnet,
    ToyDit,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Arch> {
        match s {
            "toy_unet" => Ok(Arch::ToyUnet),
            "toy_dit" => Ok(Arch::ToyDit),
            other => Err(Error::config(format!("unknown architecture tag: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub arch: Arch,
    pub width: usize,
    pub depth: usize,
    pub data_shape: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

enum Head {
    Unet {
        in_k: Tensor,
        in_b: Tensor,
        out_k: Tensor,
        out_b: Tensor,
    },
    Dit {
        emb_w: Tensor,
        emb_b: Tensor,
        pos: Tensor,
        fin_g: Tensor,
        fin_b: Tensor,
        fin_w: Tensor,
        fin_bias: Tensor,
    },
}

pub struct ScoreNetwork {
    cfg: NetworkConfig,
    t_w1: Tensor,
    t_b1: Tensor,
    t_w2: Tensor,
    t_b2: Tensor,
    /// One embedding row per class plus a trailing null row for the
    /// unconditional branch.
    class_embed: Tensor,
    head: Head,
    blocks: Vec<ResidualBlock>,
}

impl ScoreNetwork {
    /// Build a randomly initialized toy network.
    pub fn build(cfg: NetworkConfig) -> Result<ScoreNetwork> {
        if cfg.data_shape.len() != 3 {
            return Err(Error::config("data_shape must be [c, h, w]"));
        }
        if cfg.width == 0 || cfg.depth == 0 {
            return Err(Error::config("width and depth must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = cfg.width;
        let (c, hh, ww) = (cfg.data_shape[0], cfg.data_shape[1], cfg.data_shape[2]);
        let groups = if w % 4 == 0 { 4 } else { 1 };

        let t_w1 = init_normal(&mut rng, &[TIME_EMBED_IN, w], 1.0 / (TIME_EMBED_IN as f64).sqrt());
        let t_b1 = Tensor::zeros(&[w]);
        let t_w2 = init_normal(&mut rng, &[w, w], 1.0 / (w as f64).sqrt());
        let t_b2 = Tensor::zeros(&[w]);
        let class_embed = init_normal(&mut rng, &[cfg.num_classes + 1, w], 0.2);

        let (head, blocks) = match cfg.arch {
            Arch::ToyUnet => {
                let head = Head::Unet {
                    in_k: init_normal(&mut rng, &[w, c, 3, 3], 1.0 / ((c * 9) as f64).sqrt()),
                    in_b: Tensor::zeros(&[w]),
                    out_k: init_normal(&mut rng, &[c, w, 3, 3], 1.0 / ((w * 9) as f64).sqrt()),
                    out_b: Tensor::zeros(&[c]),
                };
                let blocks = (0..cfg.depth)
                    .map(|i| {
                        if i % 2 == 0 {
                            ResidualBlock::Resnet(ResnetBlock::new(w, w, groups, &mut rng))
                        } else {
                            ResidualBlock::SpatialTransformer(SpatialTransformerBlock::new(
                                w, w, groups, &mut rng,
                            ))
                        }
                    })
                    .collect();
                (head, blocks)
            }
            Arch::ToyDit => {
                let tokens = hh * ww;
                let head = Head::Dit {
                    emb_w: init_normal(&mut rng, &[c, w], 1.0 / (c as f64).sqrt()),
                    emb_b: Tensor::zeros(&[w]),
                    pos: init_normal(&mut rng, &[tokens, w], 0.02),
                    fin_g: Tensor::full(&[w], 1.0),
                    fin_b: Tensor::zeros(&[w]),
                    fin_w: init_normal(&mut rng, &[w, c], 1.0 / (w as f64).sqrt()),
                    fin_bias: Tensor::zeros(&[c]),
                };
                let blocks = (0..cfg.depth)
                    .map(|i| {
                        if i % 2 == 0 {
                            ResidualBlock::DitAttention(DitBlock::attention(w, w, &mut rng))
                        } else {
                            ResidualBlock::DitFeedforward(DitBlock::feedforward(w, w, &mut rng))
                        }
                    })
                    .collect();
                (head, blocks)
            }
        };
        Ok(ScoreNetwork { cfg, t_w1, t_b1, t_w2, t_b2, class_embed, head, blocks })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn data_shape(&self) -> &[usize] {
        &self.cfg.data_shape
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_kinds(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(|b| b.kind()).collect()
    }

    pub fn block(&self, i: usize) -> &ResidualBlock {
        &self.blocks[i]
    }

    /// Time embedding: 64-dim sinusoid through a 2-layer MLP.
    pub fn time_embedding(&self, t: usize) -> Result<Tensor> {
        let sin = sinusoidal(t, TIME_EMBED_IN);
        let h = linear(&sin, &self.t_w1, &self.t_b1)?.silu();
        linear(&h, &self.t_w2, &self.t_b2)
    }

    fn context(&self, cond: Option<usize>) -> Result<Tensor> {
        let idx = match cond {
            Some(c) if c >= self.cfg.num_classes => {
                return Err(Error::config(format!(
                    "class {c} out of range (num_classes = {})",
                    self.cfg.num_classes
                )))
            }
            Some(c) => c,
            None => self.cfg.num_classes,
        };
        self.class_embed.row(idx)
    }

    /// Predict the noise epsilon(x_t, t, c). `policy` intercepts every
    /// block's S computation; `cost` accumulates operation counts.
    pub fn forward(
        &self,
        x: &Tensor,
        t: usize,
        cond: Option<usize>,
        policy: &mut dyn BlockPolicy,
        cost: &mut StepCost,
    ) -> Result<Tensor> {
        if x.shape() != self.cfg.data_shape {
            return Err(Error::shape(format!(
                "network expects {:?}, got {:?}",
                self.cfg.data_shape,
                x.shape()
            )));
        }
        cost.network_evals += 1;
        let temb = self.time_embedding(t)?;
        let ctx = self.context(cond)?;
        let (c, hh, ww) = (self.cfg.data_shape[0], self.cfg.data_shape[1], self.cfg.data_shape[2]);
        match &self.head {
            Head::Unet { in_k, in_b, out_k, out_b } => {
                let mut h = x.conv2d(in_k)?.add_channel_bias(in_b)?;
                for (i, block) in self.blocks.iter().enumerate() {
                    let s = policy.s_value(
                        i,
                        &mut || block.s_forward(&h, &temb, &ctx),
                        cost,
                    )?;
                    let fb = block.f_branch(&s, &temb)?;
                    policy.observe_block(i, &fb);
                    h = fb.add(&h)?;
                }
                h.conv2d(out_k)?.add_channel_bias(out_b)
            }
            Head::Dit { emb_w, emb_b, pos, fin_g, fin_b, fin_w, fin_bias } => {
                let temb = temb.add(&ctx)?;
                let tokens = x.reshape(vec![c, hh * ww])?.transpose()?;
                let mut h = linear(&tokens, emb_w, emb_b)?.add(pos)?;
                for (i, block) in self.blocks.iter().enumerate() {
                    let s = policy.s_value(
                        i,
                        &mut || block.s_forward(&h, &temb, &ctx),
                        cost,
                    )?;
                    let fb = block.f_branch(&s, &temb)?;
                    policy.observe_block(i, &fb);
                    h = fb.add(&h)?;
                }
                let out = linear(&h.layernorm(fin_g, fin_b, NORM_EPS)?, fin_w, fin_bias)?;
                out.transpose()?.reshape(vec![c, hh, ww])
            }
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("time.w1".into(), &mut self.t_w1);
        f("time.b1".into(), &mut self.t_b1);
        f("time.w2".into(), &mut self.t_w2);
        f("time.b2".into(), &mut self.t_b2);
        f("class_embed".into(), &mut self.class_embed);
        match &mut self.head {
            Head::Unet { in_k, in_b, out_k, out_b } => {
                f("head.in_k".into(), in_k);
                f("head.in_b".into(), in_b);
                f("head.out_k".into(), out_k);
                f("head.out_b".into(), out_b);
            }
            Head::Dit { emb_w, emb_b, pos, fin_g, fin_b, fin_w, fin_bias } => {
                f("head.emb_w".into(), emb_w);
                f("head.emb_b".into(), emb_b);
                f("head.pos".into(), pos);
                f("head.fin_g".into(), fin_g);
                f("head.fin_b".into(), fin_b);
                f("head.fin_w".into(), fin_w);
                f("head.fin_bias".into(), fin_bias);
            }
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_params_mut(&format!("block{i}"), f);
        }
    }

    pub fn num_params(&mut self) -> usize {
        let mut n = 0;
        self.visit_params_mut(&mut |_, t| n += t.len());
        n
    }

    /// Register every parameter on a tape (for training).
    pub fn attach(&mut self, tape: &Rc<Tape>) {
        self.visit_params_mut(&mut |_, t| *t = tape.watch(t));
    }

    /// Remove tape participation from every parameter.
    pub fn detach(&mut self) {
        self.visit_params_mut(&mut |_, t| *t = t.detached());
    }

    /// Save as a checkpoint directory: one tensor dump per parameter plus a
    /// net.toml manifest.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest =
            toml::to_string(&self.cfg).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("net.toml"), manifest)?;
        let mut res = Ok(());
        self.visit_params_mut(&mut |name, t| {
            if res.is_ok() {
                res = io::write_tensor(dir, &name, t);
            }
        });
        res
    }

    pub fn load(dir: &Path) -> Result<ScoreNetwork> {
        let text = std::fs::read_to_string(dir.join("net.toml"))?;
        let cfg: NetworkConfig = toml::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let mut net = ScoreNetwork::build(cfg)?;
        let mut res = Ok(());
        net.visit_params_mut(&mut |name, t| {
            if res.is_ok() {
                match io::read_tensor(dir, &name) {
                    Ok(loaded) => {
                        if loaded.shape() == t.shape() {
                            *t = loaded;
                        } else {
                            res = Err(Error::Format(format!(
                                "checkpoint param {name} has shape {:?}, expected {:?}",
                                loaded.shape(),
                                t.shape()
                            )));
                        }
                    }
                    Err(e) => res = Err(e),
                }
            }
        });
        res.map(|_| net)
    }
}

fn sinusoidal(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / (half as f64 - 1.0));
        data.push((t as f64 * freq).sin());
    }
    for i in 0..half {
        let freq = (10000f64).powf(-(i as f64) / (half as f64 - 1.0));
        data.push((t as f64 * freq).cos());
    }
    Tensor::from_vec(vec![1, dim], data)
}
