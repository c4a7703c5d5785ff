//! Conditioning adapter: projector P, subject layer L, a trainable copy of
//! the U-Net encoder, and zero-initialized 1×1 convolutions that inject its
//! features into the frozen U-Net.
//!
//! Adapter parameters φ live in their own tree under `ctrl.*`; θ stays under
//! `unet.*`. The time MLP is read from θ and shared by both encoders.
//!
//! Fused features `E^i + c_i(C^i)` replace the encoder features everywhere
//! downstream: the bottleneck input and every decoder skip.

use ndcore::layers::{Conv1d, Conv2d};
use ndcore::{Float, ParameterTree, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{denoising_loss_with, draw_noise, UNet, ENCODER_PREFIX};
use crate::diffusion::NoiseSchedule;
use crate::error::{shape_err, Error, Result};
use crate::seed;

pub const ADAPTER_ENCODER_PREFIX: &str = "ctrl.enc";
pub const SUBJECT_WEIGHT: &str = "ctrl.subject.weight";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProjectorConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernel: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { channels: vec![32, 64, 128, 256], strides: vec![5, 2, 2, 2], kernel: 3 }
    }
}

impl ProjectorConfig {
    pub fn downsample_factor(&self) -> usize {
        self.strides.iter().product()
    }

    /// Temporal length after the strided stack.
    pub fn output_len(&self, len: usize) -> usize {
        self.strides.iter().fold(len, |l, &s| l.div_ceil(s))
    }
}

/// Strided 1D conv stack over time, SiLU between stages, then a pointwise
/// head to `D_z · F_z` channels reshaped to `[D_z, F_z, S_z]`.
#[derive(Clone, Debug)]
pub struct Projector {
    stages: Vec<Conv1d>,
    head: Conv1d,
    in_channels: usize,
    in_len: usize,
    latent: [usize; 3],
}

impl Projector {
    /// Fails when the stack cannot produce exactly `S_z` steps.
    pub fn new(prefix: &str, cfg: &ProjectorConfig, in_channels: usize, in_len: usize, latent: [usize; 3]) -> Result<Self> {
        if cfg.channels.len() != cfg.strides.len() || cfg.channels.is_empty() {
            return Err(Error::Config("projector needs one stride per stage".into()));
        }
        if cfg.strides.contains(&0) || cfg.channels.contains(&0) || cfg.kernel == 0 || in_channels == 0 {
            return Err(Error::Config("projector extents must be positive".into()));
        }
        let out = cfg.output_len(in_len);
        let [dz, fz, sz] = latent;
        if out != sz {
            return Err(Error::Config(format!(
                "projector maps {in_len} steps to {out} with strides {:?}, latent needs S_z = {sz}",
                cfg.strides
            )));
        }
        let mut cin = in_channels;
        let stages = cfg
            .channels
            .iter()
            .zip(&cfg.strides)
            .enumerate()
            .map(|(i, (&c, &s))| {
                let l = Conv1d::new(format!("{prefix}.{i}"), cin, c, cfg.kernel, s);
                cin = c;
                l
            })
            .collect();
        Ok(Self {
            stages,
            head: Conv1d::new(format!("{prefix}.head"), cin, dz * fz, 1, 1),
            in_channels,
            in_len,
            latent,
        })
    }

    pub fn init<F: Float>(&self, tree: &mut ParameterTree<F>, rng: &mut impl Rng) -> Result<()> {
        for s in &self.stages {
            s.init(tree, rng)?;
        }
        Ok(self.head.init(tree, rng)?)
    }

    pub fn layers(&self) -> impl Iterator<Item = &Conv1d> {
        self.stages.iter().chain(std::iter::once(&self.head))
    }

    /// `y: [n, F_y, S_y]` to `[n, D_z, F_z, S_z]`.
    pub fn apply<F: Float>(&self, tape: &mut Tape<F>, tree: &ParameterTree<F>, y: Var) -> Result<Var> {
        let s = tape.shape(y).to_vec();
        if s.len() != 3 || s[1] != self.in_channels || s[2] != self.in_len {
            return Err(shape_err("projector input", &[s.first().copied().unwrap_or(1), self.in_channels, self.in_len], &s));
        }
        let mut h = y;
        for st in &self.stages {
            h = st.apply(tape, tree, h)?;
            h = tape.silu(h);
        }
        let h = self.head.apply(tape, tree, h)?;
        let [dz, fz, sz] = self.latent;
        Ok(tape.reshape(h, &[s[0], dz, fz, sz])?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub projector: ProjectorConfig,
    /// Number of per-subject mixing matrices; `None` disables the layer.
    pub subject_count: Option<usize>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { projector: ProjectorConfig::default(), subject_count: None }
    }
}

/// Adapter structure bound to a donor U-Net and data dimensions.
#[derive(Clone, Debug)]
pub struct ControlNet {
    unet: UNet,
    projector: Projector,
    c_in: Conv2d,
    zero_convs: Vec<Conv2d>,
    subject_count: Option<usize>,
    eeg_channels: usize,
    latent: [usize; 3],
}

impl ControlNet {
    pub fn new(unet: &UNet, cfg: &AdapterConfig, eeg_channels: usize, eeg_len: usize, latent: [usize; 3]) -> Result<Self> {
        let dz = unet.config().in_channels;
        if latent[0] != dz {
            return Err(Error::Config(format!("latent has {} channels, U-Net expects {dz}", latent[0])));
        }
        if cfg.subject_count == Some(0) {
            return Err(Error::Config("subject layer needs at least one subject".into()));
        }
        Ok(Self {
            projector: Projector::new("ctrl.proj", &cfg.projector, eeg_channels, eeg_len, latent)?,
            c_in: Conv2d::new("ctrl.c_in", dz, dz, 1, 1),
            zero_convs: unet
                .config()
                .channels
                .iter()
                .enumerate()
                .map(|(i, &c)| Conv2d::new(format!("ctrl.zero.{i}"), c, c, 1, 1))
                .collect(),
            unet: unet.clone(),
            subject_count: cfg.subject_count,
            eeg_channels,
            latent,
        })
    }

    pub fn unet(&self) -> &UNet {
        &self.unet
    }

    pub fn projector(&self) -> &Projector {
        &self.projector
    }

    pub fn zero_convs(&self) -> &[Conv2d] {
        &self.zero_convs
    }

    pub fn c_in(&self) -> &Conv2d {
        &self.c_in
    }

    pub fn subject_count(&self) -> Option<usize> {
        self.subject_count
    }

    /// φ: encoder copy bit-equal to the donor, zero `c_in` and `c_i`, seeded
    /// projector, identity subject matrices. All entries trainable.
    pub fn init_from<F: Float>(&self, theta: &ParameterTree<F>, seed: u64) -> Result<ParameterTree<F>> {
        let mut phi = theta.remap_prefix(&format!("{ENCODER_PREFIX}."), &format!("{ADAPTER_ENCODER_PREFIX}."));
        if phi.is_empty() {
            return Err(Error::Config("donor tree has no encoder parameters".into()));
        }
        phi.set_trainable(true);
        // shape check against the structure this adapter expects
        let fresh = self.unet.init::<F>(0)?;
        for name in UNet::encoder_names(&fresh) {
            let copy = name.replacen(ENCODER_PREFIX, ADAPTER_ENCODER_PREFIX, 1);
            let want = fresh.tensor(name)?.shape();
            let got = phi.tensor(&copy).map_err(|_| Error::Config(format!("donor lacks `{name}`")))?.shape();
            if want != got {
                return Err(shape_err("donor encoder", want, got));
            }
        }
        self.c_in.init_zero(&mut phi)?;
        for z in &self.zero_convs {
            z.init_zero(&mut phi)?;
        }
        let mut rng = seed::rng(seed, &[seed::label("projector")]);
        self.projector.init(&mut phi, &mut rng)?;
        if let Some(s) = self.subject_count {
            let c = self.eeg_channels;
            let eye = Tensor::from_fn(&[s, c, c], |i| if (i / c) % c == i % c { F::one() } else { F::zero() });
            phi.insert(SUBJECT_WEIGHT, eye, true)?;
        }
        Ok(phi)
    }

    /// y' = W_s · y per sample; identity when the layer is disabled.
    pub fn subject_layer<F: Float>(&self, tape: &mut Tape<F>, phi: &ParameterTree<F>, y: Var, subjects: &[usize]) -> Result<Var> {
        match self.subject_count {
            None => Ok(y),
            Some(count) => {
                if let Some(s) = subjects.iter().find(|&&s| s >= count) {
                    return Err(Error::Data(format!("unknown subject id {s} (have {count})")));
                }
                let w = tape.param(phi, SUBJECT_WEIGHT)?;
                Ok(tape.channel_mix(y, w, subjects)?)
            }
        }
    }

    /// C^1..C^I of the adapter encoder on `c_in(z_t) + P(L(y))`.
    #[allow(clippy::too_many_arguments)]
    pub fn adapter_features<F: Float>(
        &self,
        tape: &mut Tape<F>,
        phi: &ParameterTree<F>,
        z_t: Var,
        y: Var,
        subjects: &[usize],
        temb: Var,
    ) -> Result<Vec<Var>> {
        let y = self.subject_layer(tape, phi, y, subjects)?;
        let p = self.projector.apply(tape, phi, y)?;
        let c = self.c_in.apply(tape, phi, z_t)?;
        let a = tape.add(c, p)?;
        self.unet.encode(tape, phi, ADAPTER_ENCODER_PREFIX, a, temb)
    }

    /// ε̂ of the fused model.
    #[allow(clippy::too_many_arguments)]
    pub fn fused_vars<F: Float>(
        &self,
        tape: &mut Tape<F>,
        theta: &ParameterTree<F>,
        phi: &ParameterTree<F>,
        z_t: Var,
        y: Var,
        subjects: &[usize],
        t: &[usize],
    ) -> Result<Var> {
        self.unet.check_input(tape.shape(z_t), t.len())?;
        if subjects.len() != t.len() {
            return Err(Error::Data("one subject id per sample required".into()));
        }
        let temb = self.unet.time_embedding(tape, theta, t)?;
        let feats = self.unet.encode(tape, theta, ENCODER_PREFIX, z_t, temb)?;
        let ctrl = self.adapter_features(tape, phi, z_t, y, subjects, temb)?;
        let mut fused = Vec::with_capacity(feats.len());
        for ((e, c), zc) in feats.iter().zip(&ctrl).zip(&self.zero_convs) {
            let r = zc.apply(tape, phi, *c)?;
            fused.push(tape.add(*e, r)?);
        }
        self.unet.decode(tape, theta, &fused, temb)
    }

    /// Inference version of [`Self::fused_vars`].
    pub fn fused_forward<F: Float>(
        &self,
        theta: &ParameterTree<F>,
        phi: &ParameterTree<F>,
        z_t: &Tensor<F>,
        y: &Tensor<F>,
        subjects: &[usize],
        t: &[usize],
    ) -> Result<Tensor<F>> {
        let mut tape = Tape::no_grad();
        let z = tape.input(z_t.clone());
        let yv = tape.input(y.clone());
        let eps = self.fused_vars(&mut tape, theta, phi, z, yv, subjects, t)?;
        let out = tape.value(eps).clone();
        out.ensure_finite("fused forward")?;
        Ok(out)
    }

    /// Adapter features as tensors (inference).
    pub fn adapter_forward<F: Float>(
        &self,
        theta: &ParameterTree<F>,
        phi: &ParameterTree<F>,
        z_t: &Tensor<F>,
        y: &Tensor<F>,
        subjects: &[usize],
        t: &[usize],
    ) -> Result<Vec<Tensor<F>>> {
        let mut tape = Tape::no_grad();
        let z = tape.input(z_t.clone());
        let yv = tape.input(y.clone());
        let temb = self.unet.time_embedding(&mut tape, theta, t)?;
        let feats = self.adapter_features(&mut tape, phi, z, yv, subjects, temb)?;
        Ok(feats.iter().map(|&f| tape.value(f).clone()).collect())
    }

    /// Denoising loss of the fused model. With the same seed the (t, ε)
    /// draw equals that of the unconditional loss.
    #[allow(clippy::too_many_arguments)]
    pub fn adapter_loss<F: Float>(
        &self,
        tape: &mut Tape<F>,
        theta: &ParameterTree<F>,
        phi: &ParameterTree<F>,
        z: &Tensor<F>,
        y: &Tensor<F>,
        subjects: &[usize],
        schedule: &NoiseSchedule,
        seed: u64,
    ) -> Result<Var> {
        if y.rank() == 0 || y.dim(0) != z.dim(0) {
            return Err(shape_err("adapter batch", z.shape(), y.shape()));
        }
        let draw = draw_noise(z.shape(), schedule.steps(), seed)?;
        let yv = tape.input(y.clone());
        denoising_loss_with(tape, z, &draw, schedule, |tape, zv, t| {
            self.fused_vars(tape, theta, phi, zv, yv, subjects, t)
        })
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        self.latent
    }
}
