//! Conditional perturbation generator.
//!
//! A mapping network turns a one-hot target class into a unit-norm latent vector. The image is
//! encoded (two stride-2 stages), the latent is broadcast over the encoded grid and concatenated
//! as extra channels, and the fused map runs through residual blocks and a two-stage upsampling
//! decoder. The decoder output is squashed into the ℓ∞ ball by one of three projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::nn::{ops, Conv2d, Layer, Linear, Sequential, Tape};
use crate::tensor::{Real, Tensor};

/// How the raw decoder output becomes a bounded perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingMode {
    /// `eps * tanh(f)`
    None,
    /// `eps * (W * tanh(f))`, identical at training and test time.
    Adaptive,
    /// Train with `clip(f, -eps, eps)`, test with `W * clip(f, -eps, eps)`.
    Posthoc,
}

impl std::str::FromStr for SmoothingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "adaptive" => Ok(Self::Adaptive),
            "posthoc" => Ok(Self::Posthoc),
            other => Err(Error::Parameter(format!(
                "smoothing mode must be none|adaptive|posthoc, got {other}"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub epsilon: f64,
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub smoothing_mode: SmoothingMode,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
    /// Size of the one-hot class encoding (classes of the attacked model).
    pub num_classes: usize,
    pub image_channels: usize,
    pub mapping_hidden: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            epsilon: 16.0 / 255.0,
            base_channels: 12,
            residual_blocks: 4,
            smoothing_mode: SmoothingMode::Adaptive,
            kernel_size: 3,
            kernel_sigma: 1.0,
            num_classes: 10,
            image_channels: 3,
            mapping_hidden: 64,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            errs.push(format!("epsilon must be in (0,1), got {}", self.epsilon));
        }
        if self.kernel_size % 2 == 0 {
            errs.push(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !(self.kernel_sigma > 0.0) {
            errs.push(format!("kernel_sigma must be positive, got {}", self.kernel_sigma));
        }
        for (name, v) in [
            ("latent_dim", self.latent_dim),
            ("base_channels", self.base_channels),
            ("residual_blocks", self.residual_blocks),
            ("num_classes", self.num_classes),
            ("image_channels", self.image_channels),
            ("mapping_hidden", self.mapping_hidden),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Parameter(errs.join("; ")))
        }
    }
}

/// Bounded perturbation in pixel units.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationField<T> {
    pub values: Tensor<T>,
    pub epsilon: f64,
}

impl<T: Real> PerturbationField<T> {
    pub fn linf(&self) -> f64 {
        self.values.abs_max().as_f64()
    }
}

/// Unit-norm conditioning vectors, one row per batch element.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetLatent<T> {
    pub values: Tensor<T>,
}

/// Normalised `size x size` Gaussian with entries `∝ exp(-(i²+j²)/(2σ²))` about the centre.
pub fn gaussian_kernel<T: Real>(size: usize, sigma: f64) -> Result<Tensor<T>> {
    if size % 2 == 0 || size == 0 {
        return Err(Error::Parameter(format!("kernel size must be odd, got {size}")));
    }
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("kernel sigma must be positive, got {sigma}")));
    }
    let r = (size / 2) as f64;
    let raw: Vec<f64> = (0..size * size)
        .map(|idx| {
            let (i, j) = ((idx / size) as f64 - r, (idx % size) as f64 - r);
            (-(i * i + j * j) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    Tensor::from_vec(&[size, size], raw.into_iter().map(|v| T::from_f64(v / total)).collect())
}

/// Broadcasts each latent over the spatial grid and appends it after the feature channels.
pub fn fuse_condition<T: Real>(features: &Tensor<T>, latents: &Tensor<T>) -> Result<Tensor<T>> {
    if features.shape().len() != 4 || latents.shape().len() != 2 {
        return Err(Error::Input(format!(
            "fuse expects [B,N,H,W] and [B,M], got {:?} and {:?}",
            features.shape(),
            latents.shape()
        )));
    }
    let (b, n, h, w) = (features.dim(0), features.dim(1), features.dim(2), features.dim(3));
    if latents.dim(0) != b {
        return Err(Error::Input(format!(
            "batch mismatch: {b} feature maps, {} latents",
            latents.dim(0)
        )));
    }
    let m = latents.dim(1);
    let plane = h * w;
    let mut out = Tensor::zeros(&[b, n + m, h, w]);
    for i in 0..b {
        let dst = out.item_mut(i);
        dst[..n * plane].copy_from_slice(features.item(i));
        for (c, &v) in latents.item(i).iter().enumerate() {
            dst[(n + c) * plane..(n + c + 1) * plane].fill(v);
        }
    }
    Ok(out)
}

/// `eps * tanh(raw)`.
pub fn smooth_project<T: Real>(raw: &Tensor<T>, epsilon: f64) -> PerturbationField<T> {
    let e = T::from_f64(epsilon);
    PerturbationField {
        values: raw.map(|v| e * v.tanh()),
        epsilon,
    }
}

/// `eps * (kernel * tanh(raw))` per channel with zero same-padding.
pub fn adaptive_smooth_project<T: Real>(raw: &Tensor<T>, epsilon: f64, kernel: &Tensor<T>) -> PerturbationField<T> {
    let e = T::from_f64(epsilon);
    let t = raw.map(|v| v.tanh());
    PerturbationField {
        values: ops::depthwise_filter(&t, kernel).map(|v| e * v),
        epsilon,
    }
}

/// Hard-clip projection; the smoothed variant is the test-time path.
pub fn posthoc_smooth_project<T: Real>(
    raw: &Tensor<T>,
    epsilon: f64,
    kernel: &Tensor<T>,
    phase: Phase,
) -> PerturbationField<T> {
    let e = T::from_f64(epsilon);
    let clipped = raw.map(|v| v.max(-e).min(e));
    let values = match phase {
        Phase::Train => clipped,
        Phase::Eval => ops::depthwise_filter(&clipped, kernel),
    };
    PerturbationField { values, epsilon }
}

/// Mapping network plus encoder/body/decoder.
#[derive(Clone, Debug)]
pub struct Generator<T> {
    pub config: GeneratorConfig,
    pub mapping: Sequential<T>,
    pub encoder: Sequential<T>,
    pub body: Sequential<T>,
    kernel: Tensor<T>,
}

/// Everything the generator backward pass needs.
pub struct GeneratorTape<T> {
    mapping: Tape<T>,
    encoder: Tape<T>,
    body: Tape<T>,
    latent_raw: Tensor<T>,
    latent: Tensor<T>,
    feature_channels: usize,
    raw: Tensor<T>,
    /// tanh(raw) for the tanh-based projections.
    squashed: Option<Tensor<T>>,
    /// 1 where `x + δ` lies strictly inside [0,1].
    inside: Vec<bool>,
    phase: Phase,
}

pub struct GeneratorOutput<T> {
    pub adversarial: Tensor<T>,
    pub delta: PerturbationField<T>,
}

impl<T: Real> Generator<T> {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let b = config.base_channels;
        let c_in = config.image_channels;
        let m = config.latent_dim;
        let mapping = Sequential::new(vec![
            Layer::Linear(Linear::new(config.num_classes, config.mapping_hidden, rng)),
            Layer::Relu,
            Layer::Linear(Linear::new(config.mapping_hidden, m, rng)),
        ]);
        let encoder = Sequential::new(vec![
            Layer::Conv(Conv2d::new(c_in, b, 3, 2, 1, rng)),
            Layer::Relu,
            Layer::Conv(Conv2d::new(b, 2 * b, 3, 2, 1, rng)),
            Layer::Relu,
        ]);
        let mut layers = vec![Layer::Conv(Conv2d::new(2 * b + m, 2 * b, 3, 1, 1, rng)), Layer::Relu];
        for _ in 0..config.residual_blocks {
            let mut second = Conv2d::new(2 * b, 2 * b, 3, 1, 1, rng);
            second.weight.scale(T::from_f64(0.1));
            layers.push(Layer::Residual(Sequential::new(vec![
                Layer::Conv(Conv2d::new(2 * b, 2 * b, 3, 1, 1, rng)),
                Layer::Relu,
                Layer::Conv(second),
            ])));
        }
        layers.extend([
            Layer::Upsample2,
            Layer::Conv(Conv2d::new(2 * b, b, 3, 1, 1, rng)),
            Layer::Relu,
            Layer::Upsample2,
            // zero-initialised so training starts from δ = 0
            Layer::Conv(Conv2d::zeroed(b, c_in, 3, 1, 1)),
        ]);
        let kernel = gaussian_kernel(config.kernel_size, config.kernel_sigma)?;
        Ok(Self {
            config,
            mapping,
            encoder,
            body: Sequential::new(layers),
            kernel,
        })
    }

    pub fn kernel(&self) -> &Tensor<T> {
        &self.kernel
    }

    fn one_hot(&self, class_ids: &[usize]) -> Result<Tensor<T>> {
        let k = self.config.num_classes;
        let mut t = Tensor::zeros(&[class_ids.len(), k]);
        for (i, &c) in class_ids.iter().enumerate() {
            if c >= k {
                return Err(Error::Input(format!(
                    "class id {c} outside [0, {k}) of the mapping network"
                )));
            }
            t.item_mut(i)[c] = T::one();
        }
        Ok(t)
    }

    /// One unit-norm latent row per class id.
    pub fn map_target(&self, class_ids: &[usize]) -> Result<TargetLatent<T>> {
        let (raw, _) = self.mapping.forward(&self.one_hot(class_ids)?);
        Ok(TargetLatent {
            values: ops::normalize_rows(&raw),
        })
    }

    pub fn generate(&self, x: &Tensor<T>, class_ids: &[usize], phase: Phase) -> Result<GeneratorOutput<T>> {
        self.check_input(x, class_ids)?;
        let latent = ops::normalize_rows(&self.mapping.infer(&self.one_hot(class_ids)?));
        let features = self.encoder.infer(x);
        let raw = self.body.infer(&fuse_condition(&features, &latent)?);
        let eps = self.config.epsilon;
        let delta = match self.config.smoothing_mode {
            SmoothingMode::None => smooth_project(&raw, eps),
            SmoothingMode::Adaptive => adaptive_smooth_project(&raw, eps, &self.kernel),
            SmoothingMode::Posthoc => posthoc_smooth_project(&raw, eps, &self.kernel, phase),
        };
        let (adversarial, _) = apply_perturbation(x, &delta.values);
        Ok(GeneratorOutput { adversarial, delta })
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        class_ids: &[usize],
        phase: Phase,
    ) -> Result<(GeneratorOutput<T>, GeneratorTape<T>)> {
        self.check_input(x, class_ids)?;
        let (latent_raw, mapping_tape) = self.mapping.forward(&self.one_hot(class_ids)?);
        let latent = ops::normalize_rows(&latent_raw);
        let (features, encoder_tape) = self.encoder.forward(x);
        let feature_channels = features.dim(1);
        let fused = fuse_condition(&features, &latent)?;
        let (raw, body_tape) = self.body.forward(&fused);
        let eps = self.config.epsilon;
        let (delta, squashed) = match self.config.smoothing_mode {
            SmoothingMode::None => {
                let t = raw.map(|v| v.tanh());
                (smooth_project(&raw, eps), Some(t))
            }
            SmoothingMode::Adaptive => {
                let t = raw.map(|v| v.tanh());
                (adaptive_smooth_project(&raw, eps, &self.kernel), Some(t))
            }
            SmoothingMode::Posthoc => (posthoc_smooth_project(&raw, eps, &self.kernel, phase), None),
        };
        let (adversarial, inside) = apply_perturbation(x, &delta.values);
        let tape = GeneratorTape {
            mapping: mapping_tape,
            encoder: encoder_tape,
            body: body_tape,
            latent_raw,
            latent,
            feature_channels,
            raw,
            squashed,
            inside,
            phase,
        };
        Ok((GeneratorOutput { adversarial, delta }, tape))
    }

    fn check_input(&self, x: &Tensor<T>, class_ids: &[usize]) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.image_channels {
            return Err(Error::Input(format!(
                "generator expects [B,{},H,W], got {s:?}",
                self.config.image_channels
            )));
        }
        if s[2] % 4 != 0 || s[3] % 4 != 0 {
            return Err(Error::Input(format!(
                "image height and width must be multiples of 4, got {}x{}",
                s[2], s[3]
            )));
        }
        if s[0] != class_ids.len() {
            return Err(Error::Input(format!(
                "{} images but {} class ids",
                s[0],
                class_ids.len()
            )));
        }
        Ok(())
    }

    /// Back-propagates the gradient of a loss with respect to the adversarial images into
    /// parameter gradients aligned with [`Self::params`].
    pub fn backward(&self, tape: &GeneratorTape<T>, d_adv: &Tensor<T>, grads: &mut [Tensor<T>]) {
        let eps = T::from_f64(self.config.epsilon);
        let d_delta = Tensor::from_fn(
            d_adv.shape(),
            |i| {
                if tape.inside[i] {
                    d_adv.data()[i]
                } else {
                    T::zero()
                }
            },
        );
        let d_raw = match self.config.smoothing_mode {
            SmoothingMode::None => {
                let t = tape.squashed.as_ref().expect("tanh cached");
                d_delta.zip_map(t, |g, tv| g * eps * (T::one() - tv * tv))
            }
            SmoothingMode::Adaptive => {
                let t = tape.squashed.as_ref().expect("tanh cached");
                let dt = ops::depthwise_filter_adjoint(&d_delta, &self.kernel);
                dt.zip_map(t, |g, tv| g * eps * (T::one() - tv * tv))
            }
            SmoothingMode::Posthoc => {
                let d = match tape.phase {
                    Phase::Train => d_delta,
                    Phase::Eval => ops::depthwise_filter_adjoint(&d_delta, &self.kernel),
                };
                d.zip_map(&tape.raw, |g, r| if r.abs() < eps { g } else { T::zero() })
            }
        };
        let (nm, ne) = (self.mapping.param_count(), self.encoder.param_count());
        let (g_map, rest) = grads.split_at_mut(nm);
        let (g_enc, g_body) = rest.split_at_mut(ne);
        let d_fused = self
            .body
            .backward(&tape.body, d_raw, Some(g_body), true)
            .expect("fused gradient");
        let (b, h, w) = (d_fused.dim(0), d_fused.dim(2), d_fused.dim(3));
        let n = tape.feature_channels;
        let m = self.config.latent_dim;
        let plane = h * w;
        let mut d_features = Tensor::zeros(&[b, n, h, w]);
        let mut d_latent = Tensor::zeros(&[b, m]);
        for i in 0..b {
            let src = d_fused.item(i);
            d_features.item_mut(i).copy_from_slice(&src[..n * plane]);
            for (c, dl) in d_latent.item_mut(i).iter_mut().enumerate() {
                *dl = src[(n + c) * plane..(n + c + 1) * plane]
                    .iter()
                    .fold(T::zero(), |a, &v| a + v);
            }
        }
        self.encoder.backward(&tape.encoder, d_features, Some(g_enc), false);
        let d_latent_raw = ops::normalize_rows_backward(&tape.latent_raw, &tape.latent, &d_latent);
        self.mapping.backward(&tape.mapping, d_latent_raw, Some(g_map), false);
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.mapping.params();
        p.extend(self.encoder.params());
        p.extend(self.body.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.mapping.params_mut();
        p.extend(self.encoder.params_mut());
        p.extend(self.body.params_mut());
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut n = self.mapping.param_names("mapping.");
        n.extend(self.encoder.param_names("encoder."));
        n.extend(self.body.param_names("body."));
        n
    }

    pub fn fingerprint(&self) -> String {
        crate::nn::params_fingerprint(&self.params())
    }

    pub fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params().into_iter().map(|p| Tensor::zeros(p.shape())).collect()
    }

    pub fn cast<U: Real>(&self) -> Generator<U> {
        Generator {
            config: self.config.clone(),
            mapping: self.mapping.cast(),
            encoder: self.encoder.cast(),
            body: self.body.cast(),
            kernel: self.kernel.cast(),
        }
    }
}

impl Generator<f32> {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({ "config": self.config });
        Checkpoint::new("generator", meta, self.param_names(), &self.params()).save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind("generator")?;
        let config: GeneratorConfig = serde_json::from_value(ck.meta["config"].clone())?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut g = Self::new(config, &mut rng)?;
        let names = g.param_names();
        ck.load_into(&names, g.params_mut())?;
        Ok(g)
    }
}

/// `clamp(x + δ, 0, 1)` plus the mask of pixels not touched by the clamp.
pub fn apply_perturbation<T: Real>(x: &Tensor<T>, delta: &Tensor<T>) -> (Tensor<T>, Vec<bool>) {
    let mut inside = Vec::with_capacity(x.len());
    let adv = Tensor::from_fn(x.shape(), |i| {
        let v = x.data()[i] + delta.data()[i];
        if v <= T::zero() {
            inside.push(false);
            T::zero()
        } else if v >= T::one() {
            inside.push(false);
            T::one()
        } else {
            inside.push(true);
            v
        }
    });
    (adv, inside)
}
