//! Encoder/decoder between spectrogram grids `[n, 1, F_x, S_x]` and latents
//! `[n, D_z, F_z, S_z]`.
//!
//! Two variants share one interface. The analytic variant projects each
//! `ph × pw` patch onto the first `D_z` functions of an orthonormal 2D DCT
//! basis (frequency index outermost) and is exact on the span of those
//! functions. The conv variant is a small learned VAE with two stride-2
//! stages.

use ndcore::conv::same_padding;
use ndcore::layers::Conv2d;
use ndcore::{Float, ParameterTree, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::seed;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VaeVariant {
    Analytic,
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub variant: VaeVariant,
    pub freq_bins: usize,
    pub time_bins: usize,
    pub latent_channels: usize,
    /// Analytic variant: patch extent (frequency, time).
    pub patch: [usize; 2],
    /// Conv variant: width of the first stage; the second is twice that.
    pub hidden_channels: usize,
    pub beta_kl: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            variant: VaeVariant::Analytic,
            freq_bins: 64,
            time_bins: 56,
            latent_channels: 4,
            patch: [8, 4],
            hidden_channels: 32,
            beta_kl: 1e-3,
        }
    }
}

impl VaeConfig {
    /// `[D_z, F_z, S_z]`.
    pub fn latent_shape(&self) -> Result<[usize; 3]> {
        let dz = self.latent_channels;
        if dz == 0 || self.freq_bins == 0 || self.time_bins == 0 {
            return Err(Error::Config("VAE dims must be positive".into()));
        }
        match self.variant {
            VaeVariant::Analytic => {
                let [ph, pw] = self.patch;
                if ph == 0 || pw == 0 || self.freq_bins % ph != 0 || self.time_bins % pw != 0 {
                    return Err(Error::Config(format!(
                        "patch {ph}x{pw} does not tile a {}x{} grid",
                        self.freq_bins, self.time_bins
                    )));
                }
                if dz > ph * pw {
                    return Err(Error::Config(format!(
                        "{dz} latent channels exceed patch area {}",
                        ph * pw
                    )));
                }
                Ok([dz, self.freq_bins / ph, self.time_bins / pw])
            }
            VaeVariant::Conv => {
                let f = same_padding(same_padding(self.freq_bins, 3, 2).0, 3, 2).0;
                let s = same_padding(same_padding(self.time_bins, 3, 2).0, 3, 2).0;
                Ok([dz, f, s])
            }
        }
    }
}

/// Posterior mean and clamped log-variance, both latent-shaped.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorStats<F> {
    pub mean: Tensor<F>,
    pub logvar: Tensor<F>,
}

impl<F: Float> PosteriorStats<F> {
    /// mean + exp(logvar / 2) · η.
    pub fn sample(&self, eta: &Tensor<F>) -> Result<Tensor<F>> {
        let std = self.logvar.map(|lv| (lv * F::c(0.5)).exp());
        let noise = std.zip_map(eta, |s, e| s * e)?;
        Ok(self.mean.add(&noise)?)
    }
}

/// KL(N(μ, e^lv) ‖ N(0, 1)) summed over all elements.
pub fn kl_standard_normal(mean: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VaeLoss {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Squared reconstruction error plus `beta_kl` times the KL term. Both are
/// summed per sample and averaged over the batch.
pub fn vae_objective<F: Float>(
    x: &Tensor<F>,
    recon: &Tensor<F>,
    stats: &PosteriorStats<F>,
    beta_kl: f64,
) -> Result<VaeLoss> {
    if x.shape() != recon.shape() {
        return Err(shape_err("vae_objective", x.shape(), recon.shape()));
    }
    let n = x.dim(0).max(1) as f64;
    let sse = x.sub(recon)?.sq_norm().f64() / n;
    let m: Vec<f64> = stats.mean.data().iter().map(|v| v.f64()).collect();
    let lv: Vec<f64> = stats.logvar.data().iter().map(|v| v.f64()).collect();
    let kl = kl_standard_normal(&m, &lv) / n;
    let total = sse + beta_kl * kl;
    if !total.is_finite() {
        return Err(Error::Core(ndcore::NdError::NonFinite("VAE loss".into())));
    }
    Ok(VaeLoss { recon: sse, kl, total })
}

fn check_grid<F: Float>(x: &Tensor<F>, cfg: &VaeConfig) -> Result<usize> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != cfg.freq_bins || s[3] != cfg.time_bins {
        return Err(shape_err("spectrogram", &[s.first().copied().unwrap_or(1), 1, cfg.freq_bins, cfg.time_bins], s));
    }
    Ok(s[0])
}

fn check_latent<F: Float>(z: &Tensor<F>, latent: [usize; 3]) -> Result<usize> {
    let s = z.shape();
    if s.len() != 4 || s[1..] != latent {
        let n = s.first().copied().unwrap_or(1);
        return Err(shape_err("latent", &[n, latent[0], latent[1], latent[2]], s));
    }
    Ok(s[0])
}

#[derive(Clone, Debug)]
pub struct AnalyticVae {
    cfg: VaeConfig,
    latent: [usize; 3],
    /// `[D_z][ph * pw]`, rows orthonormal.
    basis: Vec<Vec<f64>>,
}

/// Orthonormal 1D DCT-II function `u` of length `p`, at sample `a`.
fn dct(p: usize, u: usize, a: usize) -> f64 {
    let c = if u == 0 { (1.0 / p as f64).sqrt() } else { (2.0 / p as f64).sqrt() };
    c * (std::f64::consts::PI * (2 * a + 1) as f64 * u as f64 / (2 * p) as f64).cos()
}

impl AnalyticVae {
    pub fn new(cfg: VaeConfig) -> Result<Self> {
        let latent = cfg.latent_shape()?;
        let [ph, pw] = cfg.patch;
        let basis = (0..cfg.latent_channels)
            .map(|k| {
                let (u, v) = (k / pw, k % pw);
                (0..ph * pw).map(|i| dct(ph, u, i / pw) * dct(pw, v, i % pw)).collect()
            })
            .collect();
        Ok(Self { cfg, latent, basis })
    }

    pub fn basis(&self) -> &[Vec<f64>] {
        &self.basis
    }

    pub fn encode_mean<F: Float>(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let n = check_grid(x, &self.cfg)?;
        let [dz, fz, sz] = self.latent;
        let [ph, pw] = self.cfg.patch;
        let (fx, sx) = (self.cfg.freq_bins, self.cfg.time_bins);
        let mut out = vec![F::zero(); n * dz * fz * sz];
        for b in 0..n {
            let grid = &x.data()[b * fx * sx..(b + 1) * fx * sx];
            for i in 0..fz {
                for j in 0..sz {
                    for (c, row) in self.basis.iter().enumerate() {
                        let mut acc = 0.0;
                        for a in 0..ph {
                            for q in 0..pw {
                                acc += row[a * pw + q] * grid[(i * ph + a) * sx + j * pw + q].f64();
                            }
                        }
                        out[((b * dz + c) * fz + i) * sz + j] = F::c(acc);
                    }
                }
            }
        }
        Ok(Tensor::new(vec![n, dz, fz, sz], out)?)
    }

    pub fn decode<F: Float>(&self, z: &Tensor<F>) -> Result<Tensor<F>> {
        let n = check_latent(z, self.latent)?;
        let [dz, fz, sz] = self.latent;
        let [ph, pw] = self.cfg.patch;
        let (fx, sx) = (self.cfg.freq_bins, self.cfg.time_bins);
        let mut out = vec![0.0f64; n * fx * sx];
        for b in 0..n {
            for (c, row) in self.basis.iter().enumerate() {
                for i in 0..fz {
                    for j in 0..sz {
                        let coef = z.data()[((b * dz + c) * fz + i) * sz + j].f64();
                        for a in 0..ph {
                            for q in 0..pw {
                                out[b * fx * sx + (i * ph + a) * sx + j * pw + q] += coef * row[a * pw + q];
                            }
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![n, 1, fx, sx], out.into_iter().map(F::c).collect())?)
    }

    /// Posterior with the log-variance pinned at the clamp floor.
    pub fn encode<F: Float>(&self, x: &Tensor<F>, seed: u64) -> Result<(PosteriorStats<F>, Tensor<F>)> {
        let mean = self.encode_mean(x)?;
        let logvar = Tensor::full(mean.shape(), F::c(LOGVAR_MIN));
        let stats = PosteriorStats { mean, logvar };
        let eta = Tensor::randn(stats.mean.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
        let z = stats.sample(&eta)?;
        Ok((stats, z))
    }
}

/// Learned VAE: two stride-2 conv stages down, nearest-resize + conv up.
#[derive(Clone, Debug)]
pub struct ConvVae {
    cfg: VaeConfig,
    latent: [usize; 3],
    /// Spatial size after the first stage, target of the first upsample.
    mid: (usize, usize),
    enc: [Conv2d; 3],
    head_mean: Conv2d,
    head_logvar: Conv2d,
    dec: [Conv2d; 4],
}

/// Tape handles of one VAE loss evaluation.
pub struct VaeLossVars {
    pub total: Var,
    pub recon: Var,
    pub kl: Var,
    pub mean: Var,
    pub logvar: Var,
    pub output: Var,
}

impl ConvVae {
    pub fn new(cfg: VaeConfig) -> Result<Self> {
        if cfg.variant != VaeVariant::Conv {
            return Err(Error::Config("ConvVae needs the conv variant".into()));
        }
        let latent = cfg.latent_shape()?;
        let c = cfg.hidden_channels;
        if c == 0 {
            return Err(Error::Config("hidden_channels must be positive".into()));
        }
        let dz = cfg.latent_channels;
        let mid = (same_padding(cfg.freq_bins, 3, 2).0, same_padding(cfg.time_bins, 3, 2).0);
        Ok(Self {
            latent,
            mid,
            enc: [
                Conv2d::new("vae.enc.0", 1, c, 3, 1),
                Conv2d::new("vae.enc.1", c, 2 * c, 3, 2),
                Conv2d::new("vae.enc.2", 2 * c, 2 * c, 3, 2),
            ],
            head_mean: Conv2d::new("vae.enc.mean", 2 * c, dz, 1, 1),
            head_logvar: Conv2d::new("vae.enc.logvar", 2 * c, dz, 1, 1),
            dec: [
                Conv2d::new("vae.dec.0", dz, 2 * c, 3, 1),
                Conv2d::new("vae.dec.1", 2 * c, c, 3, 1),
                Conv2d::new("vae.dec.2", c, c, 3, 1),
                Conv2d::new("vae.dec.3", c, 1, 3, 1),
            ],
            cfg,
        })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.cfg
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.latent
    }

    pub fn init<F: Float>(&self, seed: u64) -> Result<ParameterTree<F>> {
        let mut rng = seed::rng(seed, &[seed::label("vae")]);
        let mut tree = ParameterTree::new();
        for l in self.enc.iter().chain([&self.head_mean, &self.head_logvar]).chain(&self.dec) {
            l.init(&mut tree, &mut rng)?;
        }
        Ok(tree)
    }

    /// Posterior mean and clamped log-variance for `x: [n, 1, F_x, S_x]`.
    pub fn encode_vars<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for l in &self.enc {
            h = l.apply(tape, tree, h)?;
            h = tape.silu(h);
        }
        let mean = self.head_mean.apply(tape, tree, h)?;
        let lv = self.head_logvar.apply(tape, tree, h)?;
        let lv = tape.clamp(lv, F::c(LOGVAR_MIN), F::c(LOGVAR_MAX));
        Ok((mean, lv))
    }

    pub fn decode_var<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, z: Var) -> Result<Var> {
        let mut h = self.dec[0].apply(tape, tree, z)?;
        h = tape.silu(h);
        h = tape.resize_nearest(h, self.mid)?;
        h = self.dec[1].apply(tape, tree, h)?;
        h = tape.silu(h);
        h = tape.resize_nearest(h, (self.cfg.freq_bins, self.cfg.time_bins))?;
        h = self.dec[2].apply(tape, tree, h)?;
        h = tape.silu(h);
        Ok(self.dec[3].apply(tape, tree, h)?)
    }

    /// Records the loss with reparameterization noise `eta` (latent-shaped).
    pub fn loss_vars<F: Float>(
        &self,
        tape: &mut Tape<F>,
        tree: &ParameterTree<F>,
        x: &Tensor<F>,
        eta: &Tensor<F>,
    ) -> Result<VaeLossVars> {
        let n = check_grid(x, &self.cfg)?;
        let xv = tape.input(x.clone());
        let (mean, logvar) = self.encode_vars(tape, tree, xv)?;
        tape.value(mean).expect_shape("VAE noise", eta.shape())?;
        let half = tape.scale(logvar, F::c(0.5));
        let std = tape.exp(half);
        let e = tape.input(eta.clone());
        let noise = tape.mul(std, e)?;
        let z = tape.add(mean, noise)?;
        let output = self.decode_var(tape, tree, z)?;
        let mse = tape.mse(output, xv)?;
        let recon = tape.scale(mse, F::c(x.len() as f64 / n as f64));
        // 0.5 Σ (μ² + e^lv − lv − 1), summed per sample, averaged over n
        let m2 = tape.mul(mean, mean)?;
        let ev = tape.exp(logvar);
        let a = tape.add(m2, ev)?;
        let b = tape.sub(a, logvar)?;
        let c = tape.add_scalar(b, -F::one());
        let s = tape.sum(c);
        let kl = tape.scale(s, F::c(0.5 / n as f64));
        let wkl = tape.scale(kl, F::c(self.cfg.beta_kl));
        let total = tape.add(recon, wkl)?;
        Ok(VaeLossVars { total, recon, kl, mean, logvar, output })
    }

    pub fn encode_stats<F: Float>(&self, tree: &ParameterTree<F>, x: &Tensor<F>) -> Result<PosteriorStats<F>> {
        check_grid(x, &self.cfg)?;
        let mut tape = Tape::no_grad();
        let xv = tape.input(x.clone());
        let (m, lv) = self.encode_vars(&mut tape, tree, xv)?;
        let stats = PosteriorStats { mean: tape.value(m).clone(), logvar: tape.value(lv).clone() };
        stats.mean.ensure_finite("VAE encoder")?;
        Ok(stats)
    }

    pub fn decode<F: Float>(&self, tree: &ParameterTree<F>, z: &Tensor<F>) -> Result<Tensor<F>> {
        check_latent(z, self.latent)?;
        let mut tape = Tape::no_grad();
        let zv = tape.input(z.clone());
        let out = self.decode_var(&mut tape, tree, zv)?;
        let out = tape.value(out).clone();
        out.ensure_finite("VAE decoder")?;
        Ok(out)
    }
}

/// Either variant behind one encode/decode interface (32-bit).
#[derive(Clone, Debug)]
pub enum Vae {
    Analytic(AnalyticVae),
    Conv { model: ConvVae, params: ParameterTree<f32> },
}

impl Vae {
    /// The analytic variant, or a freshly initialized conv variant.
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self> {
        Ok(match cfg.variant {
            VaeVariant::Analytic => Vae::Analytic(AnalyticVae::new(cfg)?),
            VaeVariant::Conv => {
                let model = ConvVae::new(cfg)?;
                let params = model.init(seed)?;
                Vae::Conv { model, params }
            }
        })
    }

    pub fn config(&self) -> &VaeConfig {
        match self {
            Vae::Analytic(a) => &a.cfg,
            Vae::Conv { model, .. } => model.config(),
        }
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        match self {
            Vae::Analytic(a) => a.latent,
            Vae::Conv { model, .. } => model.latent_shape(),
        }
    }

    pub fn params(&self) -> Option<&ParameterTree<f32>> {
        match self {
            Vae::Analytic(_) => None,
            Vae::Conv { params, .. } => Some(params),
        }
    }

    /// (posterior, mean + exp(logvar / 2) · η) with η drawn from `seed`.
    pub fn encode(&self, x: &Tensor<f32>, seed: u64) -> Result<(PosteriorStats<f32>, Tensor<f32>)> {
        match self {
            Vae::Analytic(a) => a.encode(x, seed),
            Vae::Conv { model, params } => {
                let stats = model.encode_stats(params, x)?;
                let eta = Tensor::randn(stats.mean.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
                let z = stats.sample(&eta)?;
                Ok((stats, z))
            }
        }
    }

    pub fn encode_mean(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Vae::Analytic(a) => a.encode_mean(x),
            Vae::Conv { model, params } => Ok(model.encode_stats(params, x)?.mean),
        }
    }

    pub fn decode(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        match self {
            Vae::Analytic(a) => a.decode(z),
            Vae::Conv { model, params } => model.decode(params, z),
        }
    }

    /// Loss of one batch with noise drawn from `seed`.
    pub fn loss(&self, x: &Tensor<f32>, seed: u64) -> Result<VaeLoss> {
        let (stats, z) = self.encode(x, seed)?;
        let recon = self.decode(&z)?;
        vae_objective(x, &recon, &stats, self.config().beta_kl)
    }
}

/// `‖x̂ − x‖ / ‖x‖` over a whole batch.
pub fn relative_reconstruction_error(x: &Tensor<f32>, recon: &Tensor<f32>) -> Result<f64> {
    let d = x.sub(recon)?.sq_norm() as f64;
    Ok((d / (x.sq_norm() as f64).max(f64::MIN_POSITIVE)).sqrt())
}

/// Per-channel affine standardization of latents, fitted on training data
/// so diffusion sees roughly zero-mean, unit-variance channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LatentNorm {
    pub fn identity(channels: usize) -> Self {
        Self { shift: vec![0.0; channels], scale: vec![1.0; channels] }
    }

    /// Mean and std per channel of `z: [n, c, h, w]`. Channels with
    /// std below 1e-8 keep scale 1.
    pub fn fit(z: &Tensor<f32>) -> Result<Self> {
        if z.rank() != 4 {
            return Err(shape_err("LatentNorm::fit", &[0, 0, 0, 0], z.shape()));
        }
        let (n, c, hw) = (z.dim(0), z.dim(1), z.dim(2) * z.dim(3));
        let mut shift = vec![0.0; c];
        let mut scale = vec![1.0; c];
        for ch in 0..c {
            let vals = || (0..n).flat_map(move |b| z.data()[(b * c + ch) * hw..][..hw].iter().map(|v| *v as f64));
            let count = (n * hw) as f64;
            let mean = vals().sum::<f64>() / count;
            let var = vals().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
            shift[ch] = mean;
            if var.sqrt() > 1e-8 {
                scale[ch] = var.sqrt();
            }
        }
        Ok(Self { shift, scale })
    }

    fn map(&self, z: &Tensor<f32>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<f32>> {
        if z.rank() != 4 || z.dim(1) != self.shift.len() {
            return Err(shape_err("LatentNorm", &[0, self.shift.len(), 0, 0], z.shape()));
        }
        let (c, hw) = (z.dim(1), z.dim(2) * z.dim(3));
        let mut out = z.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *v = f(*v as f64, self.shift[ch], self.scale[ch]) as f32;
        }
        Ok(out)
    }

    pub fn normalize(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.map(z, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.map(z, |v, m, s| v * s + m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndcore::gradcheck::check_parameter_gradients;
    use proptest::prelude::*;

    fn analytic(f: usize, s: usize, patch: [usize; 2], dz: usize) -> AnalyticVae {
        AnalyticVae::new(VaeConfig {
            freq_bins: f,
            time_bins: s,
            patch,
            latent_channels: dz,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn latent_shapes_follow_config() {
        let cfg = VaeConfig { freq_bins: 64, time_bins: 64, patch: [8, 8], latent_channels: 4, ..Default::default() };
        assert_eq!(cfg.latent_shape().unwrap(), [4, 8, 8]);
        assert_eq!(VaeConfig::default().latent_shape().unwrap(), [4, 8, 14]);
        let conv = VaeConfig { variant: VaeVariant::Conv, ..Default::default() };
        assert_eq!(conv.latent_shape().unwrap(), [4, 16, 14]);
        let bad = VaeConfig { patch: [7, 4], ..Default::default() };
        assert!(bad.latent_shape().is_err());
    }

    #[test]
    fn dct_basis_is_orthonormal() {
        let vae = analytic(16, 16, [4, 4], 16);
        for (i, a) in vae.basis().iter().enumerate() {
            for (j, b) in vae.basis().iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_rank_patch_round_trip_is_exact() {
        let vae = analytic(8, 12, [2, 2], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[3, 1, 8, 12], &mut rng).map(|v| v.abs());
        let back = vae.decode(&vae.encode_mean(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-5);
    }

    #[test]
    fn band_mean_signals_survive_default_patch() {
        // constant over each 8-bin block, arbitrary in time: inside the span
        let vae = AnalyticVae::new(VaeConfig::default()).unwrap();
        let x = Tensor::<f32>::from_fn(&[2, 1, 64, 56], |i| {
            let (f, s) = ((i / 56) % 64, i % 56);
            ((f / 8) as f32 * 0.7 + (s as f32 * 0.37).sin()).abs()
        });
        let back = vae.decode(&vae.encode_mean(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() < 1e-5);
    }

    #[test]
    fn zero_latent_decodes_to_zero() {
        let vae = AnalyticVae::new(VaeConfig::default()).unwrap();
        let out = vae.decode(&Tensor::<f32>::zeros(&[1, 4, 8, 14])).unwrap();
        assert_eq!(out.max_abs(), 0.0);

        let cfg = VaeConfig { variant: VaeVariant::Conv, freq_bins: 8, time_bins: 8, hidden_channels: 4, ..Default::default() };
        let conv = ConvVae::new(cfg).unwrap();
        let mut tree = conv.init::<f32>(3).unwrap();
        let names: Vec<String> = tree.names().filter(|n| n.ends_with(".bias")).map(String::from).collect();
        for n in names {
            let shape = tree.tensor(&n).unwrap().shape().to_vec();
            tree.set_tensor(&n, Tensor::zeros(&shape)).unwrap();
        }
        let out = conv.decode(&tree, &Tensor::zeros(&[2, 4, 2, 2])).unwrap();
        assert_eq!(out.shape(), &[2, 1, 8, 8]);
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn floor_logvar_sample_stays_near_mean() {
        let vae = AnalyticVae::new(VaeConfig::default()).unwrap();
        let x = Tensor::<f32>::from_fn(&[2, 1, 64, 56], |i| 1.0 + ((i * 7) % 13) as f32 * 0.1);
        let (stats, z) = vae.encode(&x, 9).unwrap();
        assert!(stats.logvar.data().iter().all(|&v| v == LOGVAR_MIN as f32));
        let rms = |t: &Tensor<f32>| (t.sq_norm() as f64 / t.len() as f64).sqrt();
        let diff = rms(&z.sub(&stats.mean).unwrap());
        assert!(diff <= 1e-2 * rms(&stats.mean) + 1e-3, "{diff}");
        let (_, z2) = vae.encode(&x, 9).unwrap();
        assert_eq!(z, z2);
        let (_, z3) = vae.encode(&x, 10).unwrap();
        assert_ne!(z, z3);
    }

    #[test]
    fn wrong_dims_rejected() {
        let vae = AnalyticVae::new(VaeConfig::default()).unwrap();
        assert!(vae.encode_mean(&Tensor::<f32>::zeros(&[1, 1, 64, 55])).is_err());
        assert!(vae.decode(&Tensor::<f32>::zeros(&[1, 3, 8, 14])).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        assert_eq!(kl_standard_normal(&[0.0; 5], &[0.0; 5]), 0.0);
        assert!((kl_standard_normal(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        let x = Tensor::<f64>::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let stats = PosteriorStats { mean: Tensor::zeros(&[2, 1, 1, 1]), logvar: Tensor::zeros(&[2, 1, 1, 1]) };
        let l = vae_objective(&x, &x, &stats, 1e-3).unwrap();
        assert_eq!((l.recon, l.kl, l.total), (0.0, 0.0, 0.0));
    }

    #[test]
    fn conv_vae_loss_matches_formula_and_gradients() {
        let cfg = VaeConfig {
            variant: VaeVariant::Conv,
            freq_bins: 6,
            time_bins: 5,
            latent_channels: 2,
            hidden_channels: 8,
            beta_kl: 0.1,
            ..Default::default()
        };
        let vae = ConvVae::new(cfg).unwrap();
        assert_eq!(vae.latent_shape(), [2, 2, 2]);
        for seed in 0..5 {
            let tree = vae.init::<f64>(seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = Tensor::<f64>::randn(&[2, 1, 6, 5], &mut rng);
            let eta = Tensor::<f64>::randn(&[2, 2, 2, 2], &mut rng);
            let mut tape = Tape::new();
            let v = vae.loss_vars(&mut tape, &tree, &x, &eta).unwrap();
            let stats = PosteriorStats { mean: tape.value(v.mean).clone(), logvar: tape.value(v.logvar).clone() };
            let recon = tape.value(v.output).clone();
            let direct = vae_objective(&x, &recon, &stats, 0.1).unwrap();
            assert!((tape.value(v.total).data()[0] - direct.total).abs() < 1e-12);
            assert!((tape.value(v.kl).data()[0] - direct.kl).abs() < 1e-12);

            let grads = tape.backward(v.total).unwrap();
            let loss = |t: &ParameterTree<f64>| {
                let mut tape = Tape::new();
                let v = vae.loss_vars(&mut tape, t, &x, &eta).expect("loss");
                Ok(tape.value(v.total).data()[0])
            };
            let errs = check_parameter_gradients(&tree, &grads.param_grads(), loss, 1e-4, 24, seed).unwrap();
            for (name, e) in errs {
                assert!(e < 1e-3, "seed {seed} {name}: {e:e}");
            }
        }
    }

    #[test]
    fn latent_norm_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::<f32>::randn(&[10, 3, 2, 4], &mut rng).map(|v| v * 3.0 + 1.5);
        let norm = LatentNorm::fit(&z).unwrap();
        let n = norm.normalize(&z).unwrap();
        let again = LatentNorm::fit(&n).unwrap();
        for (m, s) in again.shift.iter().zip(&again.scale) {
            assert!(m.abs() < 1e-5 && (s - 1.0).abs() < 1e-5);
        }
        assert!(norm.denormalize(&n).unwrap().max_abs_diff(&z).unwrap() < 1e-5);
    }

    proptest! {
        #[test]
        fn analytic_encode_decode_is_linear_bijection(seed in 0u64..500, a in -3.0f32..3.0) {
            let vae = analytic(8, 8, [2, 4], 8);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::randn(&[2, 1, 8, 8], &mut rng);
            let y = Tensor::<f32>::randn(&[2, 1, 8, 8], &mut rng);
            let zx = vae.encode_mean(&x).unwrap();
            prop_assert!(vae.decode(&zx).unwrap().max_abs_diff(&x).unwrap() < 1e-5);
            let combo = x.scale(a).add(&y).unwrap();
            let lin = zx.scale(a).add(&vae.encode_mean(&y).unwrap()).unwrap();
            prop_assert!(vae.encode_mean(&combo).unwrap().max_abs_diff(&lin).unwrap() < 1e-5);
            let z = Tensor::<f32>::randn(&[2, 8, 4, 2], &mut rng);
            prop_assert!(vae.encode_mean(&vae.decode(&z).unwrap()).unwrap().max_abs_diff(&z).unwrap() < 1e-5);
        }

        #[test]
        fn kl_is_non_negative(m in prop::collection::vec(-5.0f64..5.0, 1..20), lv in prop::collection::vec(-10.0f64..10.0, 20)) {
            let lv = &lv[..m.len()];
            prop_assert!(kl_standard_normal(&m, lv) >= 0.0);
        }

        #[test]
        fn conv_decode_shape_contract(f in 3usize..12, s in 3usize..12, seed in 0u64..20) {
            let cfg = VaeConfig { variant: VaeVariant::Conv, freq_bins: f, time_bins: s, hidden_channels: 4, ..Default::default() };
            let vae = ConvVae::new(cfg).unwrap();
            let tree = vae.init::<f32>(seed).unwrap();
            let [dz, fz, sz] = vae.latent_shape();
            let z = Tensor::<f32>::randn(&[1, dz, fz, sz], &mut ChaCha8Rng::seed_from_u64(seed));
            let out = vae.decode(&tree, &z).unwrap();
            prop_assert_eq!(out.shape(), &[1, 1, f, s]);
        }
    }
}
