//! Time-conditioned U-Net ε_θ over latents `[n, D_z, F_z, S_z]`.
//!
//! The encoder is written against a name prefix so the adapter can run an
//! independent copy of it. Encoder level 1 is `conv_in` plus a residual
//! block at full resolution; every further level downsamples with a
//! stride-2 conv before its residual block. The bottleneck is one residual
//! block on the deepest features; each decoder level concatenates its skip,
//! runs a residual block and upsamples (nearest + conv) to the next level.

use ndcore::conv::same_padding;
use ndcore::layers::{Conv2d, GroupNorm, Linear};
use ndcore::{Float, ParameterTree, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_diffuse_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::seed;

pub const ENCODER_PREFIX: &str = "unet.enc";
pub const TIME_PREFIX: &str = "unet.time";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Latent channels D_z.
    pub in_channels: usize,
    /// One entry per level, strictly increasing.
    pub channels: Vec<usize>,
    pub time_dim: usize,
    pub kernel: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { in_channels: 4, channels: vec![32, 64, 128], time_dim: 64, kernel: 3 }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 {
            return Err(Error::Config("U-Net needs at least two levels".into()));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) || self.channels[0] == 0 {
            return Err(Error::Config(format!("channels {:?} must increase strictly", self.channels)));
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::Config(format!("time_dim {} must be even", self.time_dim)));
        }
        if self.in_channels == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config("in_channels must be positive and kernel odd".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }
}

/// Sinusoidal embedding: `[sin(t f_0), .., sin(t f_{h-1}), cos(t f_0), ..]`
/// with `h = dim / 2` and `f_k = 10000^(-k / h)`.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|k| 10000f64.powf(-(k as f64) / half as f64)).collect();
    Ok(freqs.iter().map(|f| (t * f).sin()).chain(freqs.iter().map(|f| (t * f).cos())).collect())
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(prefix: &str, cin: usize, cout: usize, temb_dim: usize, k: usize) -> Self {
        Self {
            norm1: GroupNorm::new(format!("{prefix}.norm1"), cin),
            conv1: Conv2d::new(format!("{prefix}.conv1"), cin, cout, k, 1),
            temb: Linear::new(format!("{prefix}.temb"), temb_dim, cout),
            norm2: GroupNorm::new(format!("{prefix}.norm2"), cout),
            conv2: Conv2d::new(format!("{prefix}.conv2"), cout, cout, k, 1),
            skip: (cin != cout).then(|| Conv2d::new(format!("{prefix}.skip"), cin, cout, 1, 1)),
        }
    }

    fn init<F: Float>(&self, tree: &mut ParameterTree<F>, rng: &mut impl Rng) -> Result<()> {
        self.norm1.init(tree)?;
        self.conv1.init(tree, rng)?;
        self.temb.init(tree, rng)?;
        self.norm2.init(tree)?;
        self.conv2.init(tree, rng)?;
        if let Some(s) = &self.skip {
            s.init(tree, rng)?;
        }
        Ok(())
    }

    /// `temb` is the already-activated time embedding `[n, temb_dim]`.
    fn apply<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.apply(tape, tree, x)?;
        let h = tape.silu(h);
        let h = self.conv1.apply(tape, tree, h)?;
        let tb = self.temb.apply(tape, tree, temb)?;
        let h = tape.add_channel_bias(h, tb)?;
        let h = self.norm2.apply(tape, tree, h)?;
        let h = tape.silu(h);
        let h = self.conv2.apply(tape, tree, h)?;
        let s = match &self.skip {
            Some(c) => c.apply(tape, tree, x)?,
            None => x,
        };
        Ok(tape.add(s, h)?)
    }

    /// Same layers under a different name prefix.
    fn renamed(&self, from: &str, to: &str) -> Self {
        let r = |n: &str| n.replacen(from, to, 1);
        let mut b = self.clone();
        b.norm1.name = r(&b.norm1.name);
        b.conv1.name = r(&b.conv1.name);
        b.temb.name = r(&b.temb.name);
        b.norm2.name = r(&b.norm2.name);
        b.conv2.name = r(&b.conv2.name);
        if let Some(s) = &mut b.skip {
            s.name = r(&s.name);
        }
        b
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    /// `conv_in` at level 0, stride-2 downsampling conv otherwise.
    conv: Conv2d,
    res: ResBlock,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    res: ResBlock,
    /// Nearest resize to the next shallower level, then this conv.
    up: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    cfg: UNetConfig,
    temb_dim: usize,
    time_fc1: Linear,
    time_fc2: Linear,
    encoder: Vec<EncoderLevel>,
    mid: ResBlock,
    decoder: Vec<DecoderLevel>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

impl UNet {
    pub fn new(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.kernel;
        let ch = &cfg.channels;
        let temb_dim = 2 * cfg.time_dim;
        let encoder = ch
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let p = format!("{ENCODER_PREFIX}.{i}");
                let conv = if i == 0 {
                    Conv2d::new(format!("{p}.conv"), cfg.in_channels, c, k, 1)
                } else {
                    Conv2d::new(format!("{p}.conv"), ch[i - 1], c, k, 2)
                };
                EncoderLevel { conv, res: ResBlock::new(&format!("{p}.res"), c, c, temb_dim, k) }
            })
            .collect();
        let last = *ch.last().expect("validated");
        let decoder = (0..ch.len())
            .map(|i| DecoderLevel {
                res: ResBlock::new(&format!("unet.dec.{i}.res"), 2 * ch[i], ch[i], temb_dim, k),
                up: (i > 0).then(|| Conv2d::new(format!("unet.dec.{i}.up"), ch[i], ch[i - 1], k, 1)),
            })
            .collect();
        Ok(Self {
            temb_dim,
            time_fc1: Linear::new(format!("{TIME_PREFIX}.fc1"), cfg.time_dim, temb_dim),
            time_fc2: Linear::new(format!("{TIME_PREFIX}.fc2"), temb_dim, temb_dim),
            encoder,
            mid: ResBlock::new("unet.mid.res", last, last, temb_dim, k),
            decoder,
            out_norm: GroupNorm::new("unet.out.norm", ch[0]),
            out_conv: Conv2d::new("unet.out.conv", ch[0], cfg.in_channels, k, 1),
            cfg,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn init<F: Float>(&self, seed: u64) -> Result<ParameterTree<F>> {
        let mut rng = seed::rng(seed, &[seed::label("unet")]);
        let mut tree = ParameterTree::new();
        self.time_fc1.init(&mut tree, &mut rng)?;
        self.time_fc2.init(&mut tree, &mut rng)?;
        for lvl in &self.encoder {
            lvl.conv.init(&mut tree, &mut rng)?;
            lvl.res.init(&mut tree, &mut rng)?;
        }
        self.mid.init(&mut tree, &mut rng)?;
        for lvl in &self.decoder {
            lvl.res.init(&mut tree, &mut rng)?;
            if let Some(u) = &lvl.up {
                u.init(&mut tree, &mut rng)?;
            }
        }
        self.out_norm.init(&mut tree)?;
        self.out_conv.init(&mut tree, &mut rng)?;
        Ok(tree)
    }

    /// `[c_i, F_i, S_i]` of every encoder level for latents `[_, F_z, S_z]`.
    pub fn feature_shapes(&self, fz: usize, sz: usize) -> Vec<[usize; 3]> {
        let (mut f, mut s) = (fz, sz);
        self.cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if i > 0 {
                    f = same_padding(f, self.cfg.kernel, 2).0;
                    s = same_padding(s, self.cfg.kernel, 2).0;
                }
                [c, f, s]
            })
            .collect()
    }

    /// MLP over the sinusoidal embedding, followed by SiLU: `[n, temb]`.
    pub fn time_embedding<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, t: &[usize]) -> Result<Var> {
        let d = self.cfg.time_dim;
        let mut raw = Vec::with_capacity(t.len() * d);
        for &ti in t {
            raw.extend(time_embed(ti as f64, d)?.into_iter().map(F::c));
        }
        let e = tape.input(Tensor::new(vec![t.len(), d], raw)?);
        let h = self.time_fc1.apply(tape, tree, e)?;
        let h = tape.silu(h);
        let h = self.time_fc2.apply(tape, tree, h)?;
        Ok(tape.silu(h))
    }

    pub fn temb_dim(&self) -> usize {
        self.temb_dim
    }

    /// Encoder levels E¹..E^I, reading parameters named `{prefix}.*` in
    /// place of `unet.enc.*`.
    pub fn encode<F: Float>(
        &self,
        tape: &mut Tape<F>,
        tree: &ParameterTree<F>,
        prefix: &str,
        x: Var,
        temb: Var,
    ) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for lvl in &self.encoder {
            let (conv, res) = if prefix == ENCODER_PREFIX {
                (lvl.conv.clone(), lvl.res.clone())
            } else {
                let mut c = lvl.conv.clone();
                c.name = c.name.replacen(ENCODER_PREFIX, prefix, 1);
                (c, lvl.res.renamed(ENCODER_PREFIX, prefix))
            };
            h = conv.apply(tape, tree, h)?;
            h = res.apply(tape, tree, h, temb)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Bottleneck and decoder over (possibly fused) encoder features.
    pub fn decode<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, feats: &[Var], temb: Var) -> Result<Var> {
        if feats.len() != self.encoder.len() {
            return Err(Error::Config(format!(
                "decoder needs {} feature levels, got {}",
                self.encoder.len(),
                feats.len()
            )));
        }
        let mut h = self.mid.apply(tape, tree, *feats.last().expect("non-empty"), temb)?;
        for i in (0..self.decoder.len()).rev() {
            let cat = tape.concat_channels(&[h, feats[i]])?;
            h = self.decoder[i].res.apply(tape, tree, cat, temb)?;
            if let Some(up) = &self.decoder[i].up {
                let s = tape.shape(feats[i - 1]).to_vec();
                h = tape.resize_nearest(h, (s[2], s[3]))?;
                h = up.apply(tape, tree, h)?;
            }
        }
        let h = self.out_norm.apply(tape, tree, h)?;
        let h = tape.silu(h);
        Ok(self.out_conv.apply(tape, tree, h)?)
    }

    /// ε̂ and the unfused encoder features.
    pub fn forward_vars<F: Float>(
        &self,
        tape: &mut Tape<F>,
        tree: &ParameterTree<F>,
        z_t: Var,
        t: &[usize],
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.shape(z_t), t.len())?;
        let temb = self.time_embedding(tape, tree, t)?;
        let feats = self.encode(tape, tree, ENCODER_PREFIX, z_t, temb)?;
        let eps = self.decode(tape, tree, &feats, temb)?;
        Ok((eps, feats))
    }

    /// Inference forward: ε̂ and encoder features as tensors.
    pub fn forward<F: Float>(
        &self,
        tree: &ParameterTree<F>,
        z_t: &Tensor<F>,
        t: &[usize],
    ) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
        let mut tape = Tape::no_grad();
        let z = tape.input(z_t.clone());
        let (eps, feats) = self.forward_vars(&mut tape, tree, z, t)?;
        let eps = tape.value(eps).clone();
        eps.ensure_finite("U-Net forward")?;
        Ok((eps, feats.iter().map(|&f| tape.value(f).clone()).collect()))
    }

    pub(crate) fn check_input(&self, shape: &[usize], n_t: usize) -> Result<()> {
        if shape.len() != 4 || shape[1] != self.cfg.in_channels || shape[0] != n_t {
            return Err(crate::error::shape_err(
                "U-Net input",
                &[n_t, self.cfg.in_channels, 0, 0],
                shape,
            ));
        }
        Ok(())
    }

    /// Names of the encoder parameters (`unet.enc.*`).
    pub fn encoder_names<'a, F: Float>(tree: &'a ParameterTree<F>) -> impl Iterator<Item = &'a str> {
        let p = format!("{ENCODER_PREFIX}.");
        tree.names().filter(move |n| n.starts_with(&p))
    }
}

/// Timesteps and noise of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseDraw<F> {
    pub t: Vec<usize>,
    pub eps: Tensor<F>,
}

/// t uniform on [1, T] per sample, ε standard normal, both from `seed`.
pub fn draw_noise<F: Float>(shape: &[usize], steps: usize, seed: u64) -> Result<NoiseDraw<F>> {
    if shape.first().copied().unwrap_or(0) == 0 {
        return Err(Error::Data("empty batch".into()));
    }
    let mut rng = seed::rng(seed, &[seed::label("noise")]);
    let t = (0..shape[0]).map(|_| rng.random_range(1..=steps)).collect();
    let eps = Tensor::randn(shape, &mut rng);
    Ok(NoiseDraw { t, eps })
}

/// `mean ‖ε − model(z_t, t)‖²` for the draw, recorded on `tape`.
pub fn denoising_loss_with<F: Float>(
    tape: &mut Tape<F>,
    z: &Tensor<F>,
    draw: &NoiseDraw<F>,
    schedule: &NoiseSchedule,
    model: impl FnOnce(&mut Tape<F>, Var, &[usize]) -> Result<Var>,
) -> Result<Var> {
    let z_t = forward_diffuse_batch(z, &draw.t, &draw.eps, schedule)?;
    let zv = tape.input(z_t);
    let pred = model(tape, zv, &draw.t)?;
    let target = tape.input(draw.eps.clone());
    Ok(tape.mse(pred, target)?)
}

/// Denoising score-matching loss of the U-Net on a latent batch.
pub fn denoising_loss<F: Float>(
    tape: &mut Tape<F>,
    unet: &UNet,
    tree: &ParameterTree<F>,
    z: &Tensor<F>,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Var> {
    let draw = draw_noise(z.shape(), schedule.steps(), seed)?;
    denoising_loss_with(tape, z, &draw, schedule, |tape, zv, t| Ok(unet.forward_vars(tape, tree, zv, t)?.0))
}
