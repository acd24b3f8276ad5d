//! Instance-specific iterative attacks: BIM, MIM, DIM, TI-DIM, SI-DIM and Logit.
//!
//! Every method is one configuration of the same momentum loop:
//!
//! ```text
//! g_{t+1} = μ·g_t + ∇ / ‖∇‖₁
//! x_{t+1} = Π_{ε-ball ∩ [0,1]}(x_t − α·sign(g_{t+1}))
//! ```
//!
//! where `∇` may be averaged over scale copies (SI), taken through a random resize-and-pad
//! (DI) and smoothed by a fixed kernel (TI).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss;
use crate::nn::ops;
use crate::tensor::Tensor;
use crate::zoo::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bim,
    Mim,
    Dim,
    TiDim,
    SiDim,
    Logit,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Bim,
        Method::Mim,
        Method::Dim,
        Method::TiDim,
        Method::SiDim,
        Method::Logit,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Bim => "bim",
            Method::Mim => "mim",
            Method::Dim => "dim",
            Method::TiDim => "ti-dim",
            Method::SiDim => "si-dim",
            Method::Logit => "logit",
        }
    }

    pub fn default_steps(self) -> usize {
        match self {
            Method::Bim | Method::Mim => 10,
            Method::Dim | Method::TiDim | Method::SiDim => 20,
            Method::Logit => 300,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown attack method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackLoss {
    CrossEntropy,
    Logit,
    EmbeddingDistance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterAttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub momentum: f64,
    /// Depthwise gradient kernel `[k, k]`.
    pub ti_kernel: Option<Tensor<f32>>,
    pub di_probability: f64,
    /// Number of scale copies `x / 2^i`; 0 and 1 both mean no scale averaging.
    pub si_copies: usize,
    pub loss: AttackLoss,
    pub seed: u64,
}

/// `max(1.25·ε/M, ε/16)`
pub fn default_step_size(epsilon: f64, steps: usize) -> f64 {
    (1.25 * epsilon / steps.max(1) as f64).max(epsilon / 16.0)
}

/// Gaussian of side `size` (σ = size/4), rescaled to ℓ1 norm `l1`.
pub fn ti_kernel(size: usize, l1: f64) -> Tensor<f32> {
    let c = (size as f64 - 1.0) / 2.0;
    let sigma = size as f64 / 4.0;
    let raw: Vec<f64> = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 - c, (i % size) as f64 - c);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    Tensor::from_vec(&[size, size], raw.iter().map(|v| (v * l1 / s) as f32).collect()).expect("square kernel")
}

impl IterAttackConfig {
    /// Conventional settings for a method: μ=1 except BIM, DI p=0.7, TI 5×5 with ‖W‖₁=5, SI 4 copies.
    pub fn preset(method: Method, epsilon: f64, steps: Option<usize>, seed: u64) -> Self {
        let steps = steps.unwrap_or_else(|| method.default_steps());
        let di = matches!(method, Method::Dim | Method::TiDim | Method::SiDim | Method::Logit);
        let ti = matches!(method, Method::TiDim | Method::Logit);
        Self {
            epsilon,
            step_size: default_step_size(epsilon, steps),
            steps,
            momentum: if method == Method::Bim { 0.0 } else { 1.0 },
            ti_kernel: ti.then(|| ti_kernel(5, 5.0)),
            di_probability: if di { 0.7 } else { 0.0 },
            si_copies: if method == Method::SiDim { 4 } else { 0 },
            loss: if method == Method::Logit {
                AttackLoss::Logit
            } else {
                AttackLoss::CrossEntropy
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            errs.push(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.step_size > 0.0) {
            errs.push(format!("step_size must be positive, got {}", self.step_size));
        }
        if self.steps == 0 {
            errs.push("steps must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.di_probability) {
            errs.push(format!(
                "di_probability must lie in [0, 1], got {}",
                self.di_probability
            ));
        }
        if let Some(k) = &self.ti_kernel {
            let s = k.shape();
            if s.len() != 2 || s[0] != s[1] || s[0] % 2 == 0 {
                errs.push(format!("ti_kernel must be square with odd side, got {s:?}"));
            }
            if k.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
                errs.push("ti_kernel entries must be finite and non-negative".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// What the attack descends on.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    /// Target class per image (cross-entropy or logit loss).
    Class(&'a [usize]),
    /// Reference embedding per image, `[B, D]`.
    Embedding(&'a Tensor<f32>),
}

/// Per-image gather map for the diverse-input transform; `None` pixels are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct DiMap {
    pub maps: Vec<Option<Vec<Option<u32>>>>,
}

/// With probability `p` per image: nearest-neighbour resize to a scale in [0.9, 1], then pad
/// at a random offset back to the original size. Returns the batch and the map used.
pub fn di_transform(x: &Tensor<f32>, probability: f64, rng: &mut impl Rng) -> (Tensor<f32>, DiMap) {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = x.clone();
    let mut maps = Vec::with_capacity(b);
    for i in 0..b {
        if probability <= 0.0 || rng.random::<f64>() >= probability {
            maps.push(None);
            continue;
        }
        let scale = rng.random_range(0.9..=1.0);
        let nh = ((h as f64 * scale).round() as usize).clamp(1, h);
        let nw = ((w as f64 * scale).round() as usize).clamp(1, w);
        let oy = rng.random_range(0..=h - nh);
        let ox = rng.random_range(0..=w - nw);
        let map: Vec<Option<u32>> = (0..h * w)
            .map(|p| {
                let (y, xx) = (p / w, p % w);
                if y < oy || y >= oy + nh || xx < ox || xx >= ox + nw {
                    return None;
                }
                let sy = ((y - oy) * h) / nh;
                let sx = ((xx - ox) * w) / nw;
                Some((sy * w + sx) as u32)
            })
            .collect();
        let src = x.item(i);
        let dst = out.item_mut(i);
        for ch in 0..c {
            for (p, m) in map.iter().enumerate() {
                dst[ch * h * w + p] = m.map_or(0.0, |s| src[ch * h * w + s as usize]);
            }
        }
        maps.push(Some(map));
    }
    (out, DiMap { maps })
}

fn di_backward(dy: &Tensor<f32>, map: &DiMap) -> Tensor<f32> {
    let (c, h, w) = (dy.dim(1), dy.dim(2), dy.dim(3));
    let mut dx = dy.clone();
    for (i, m) in map.maps.iter().enumerate() {
        let Some(m) = m else { continue };
        let g = dy.item(i).to_vec();
        let d = dx.item_mut(i);
        d.fill(0.0);
        for ch in 0..c {
            for (p, s) in m.iter().enumerate() {
                if let Some(s) = s {
                    d[ch * h * w + *s as usize] += g[ch * h * w + p];
                }
            }
        }
    }
    dx
}

/// Loss and input gradient for the batch.
pub fn objective_grad(
    model: &Network<f32>,
    x: &Tensor<f32>,
    objective: Objective<'_>,
    kind: AttackLoss,
) -> Result<(f64, Tensor<f32>)> {
    let (y, tape) = model.forward(x)?;
    let (l, dy) = match (objective, kind) {
        (Objective::Class(t), AttackLoss::CrossEntropy) => loss::cross_entropy(&y, t)?,
        (Objective::Class(t), AttackLoss::Logit) => loss::logit_loss(&y, t)?,
        (Objective::Embedding(r), AttackLoss::EmbeddingDistance) => loss::embedding_distance(&y, r)?,
        _ => {
            return Err(Error::Config(vec![format!(
                "attack loss {kind:?} does not match the objective"
            )]))
        }
    };
    Ok((l, model.input_grad(&tape, &dy)))
}

/// One momentum update; returns `sign(g_{t+1})` and `g_{t+1}`.
pub fn attack_step_direction(
    x_t: &Tensor<f32>,
    objective: Objective<'_>,
    model: &Network<f32>,
    cfg: &IterAttackConfig,
    momentum: &Tensor<f32>,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let copies = cfg.si_copies.max(1);
    let mut grad = Tensor::zeros(x_t.shape());
    for i in 0..copies {
        let s = 0.5f32.powi(i as i32);
        let scaled = if i == 0 { x_t.clone() } else { x_t.map(|v| v * s) };
        let (input, map) = di_transform(&scaled, cfg.di_probability, rng);
        let (_, g) = objective_grad(model, &input, objective, cfg.loss)?;
        let mut g = di_backward(&g, &map);
        g.scale(s / copies as f32);
        grad.add_assign(&g);
    }
    if !grad.all_finite() {
        return Err(Error::Numeric("non-finite attack gradient".into()));
    }
    if let Some(k) = &cfg.ti_kernel {
        grad = ops::depthwise_filter(&grad, k);
    }
    let mu = cfg.momentum as f32;
    let mut next = momentum.map(|v| v * mu);
    for i in 0..grad.dim(0) {
        let l1 = grad.item(i).iter().map(|v| v.abs() as f64).sum::<f64>().max(1e-12);
        let inv = (1.0 / l1) as f32;
        for (n, &g) in next.item_mut(i).iter_mut().zip(grad.item(i)) {
            *n += g * inv;
        }
    }
    let direction = next.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    });
    Ok((direction, next))
}

/// Projects `adv` into the ℓ∞ ball of radius ε around `x` and into `[0, 1]`.
pub fn project(adv: &mut Tensor<f32>, x: &Tensor<f32>, epsilon: f32) {
    for (a, &o) in adv.data_mut().iter_mut().zip(x.data()) {
        *a = a.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
    }
}

/// Runs `cfg.steps` targeted steps on the whole batch.
pub fn run_iterative_attack(
    x: &Tensor<f32>,
    objective: Objective<'_>,
    model: &Network<f32>,
    cfg: &IterAttackConfig,
) -> Result<Tensor<f32>> {
    cfg.validate()?;
    model.check_input(x)?;
    if x.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("attack input must lie in [0, 1]".into()));
    }
    let b = x.dim(0);
    match objective {
        Objective::Class(t) if t.len() != b => return Err(Error::Input(format!("{} targets for {b} images", t.len()))),
        Objective::Embedding(r) if r.shape().first() != Some(&b) => {
            return Err(Error::Input(format!("reference shape {:?} for {b} images", r.shape())))
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let alpha = cfg.step_size as f32;
    let eps = cfg.epsilon as f32;
    let mut adv = x.clone();
    let mut g = Tensor::zeros(x.shape());
    for _ in 0..cfg.steps {
        let (dir, next) = attack_step_direction(&adv, objective, model, cfg, &g, &mut rng)?;
        g = next;
        for (a, &d) in adv.data_mut().iter_mut().zip(dir.data()) {
            *a -= alpha * d;
        }
        project(&mut adv, x, eps);
    }
    Ok(adv)
}

/// Runs the attack over `x` in chunks of `chunk` images, one rng stream per chunk.
pub fn run_iterative_attack_chunked(
    x: &Tensor<f32>,
    targets: &[usize],
    model: &Network<f32>,
    cfg: &IterAttackConfig,
    chunk: usize,
) -> Result<Tensor<f32>> {
    let n = x.dim(0);
    let mut parts = Vec::new();
    for (ci, start) in (0..n).step_by(chunk.max(1)).enumerate() {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let sub = x.select(&idx);
        let t: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(ci as u64);
        parts.push(run_iterative_attack(&sub, Objective::Class(&t), model, &c)?);
    }
    Tensor::concat(&parts.iter().collect::<Vec<_>>())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_conventions() {
        let eps = 16.0 / 255.0;
        let mim = IterAttackConfig::preset(Method::Mim, eps, None, 0);
        assert_eq!((mim.steps, mim.momentum), (10, 1.0));
        assert!((mim.step_size - 1.25 * eps / 10.0).abs() < 1e-12);
        let logit = IterAttackConfig::preset(Method::Logit, eps, None, 0);
        assert_eq!(logit.steps, 300);
        assert!((logit.step_size - eps / 16.0).abs() < 1e-12);
        let k = ti_kernel(5, 5.0);
        assert!((k.sum() - 5.0).abs() < 1e-5);
        assert_eq!(IterAttackConfig::preset(Method::SiDim, eps, None, 0).si_copies, 4);
        assert_eq!("ti-dim".parse::<Method>().unwrap(), Method::TiDim);
    }

    #[test]
    fn di_transform_examples() {
        let x = Tensor::from_fn(&[3, 2, 8, 8], |i| i as f32 / 384.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, m) = di_transform(&x, 0.0, &mut rng);
        assert_eq!(y, x);
        assert!(m.maps.iter().all(Option::is_none));
        let (y1, _) = di_transform(&x, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let (y2, _) = di_transform(&x, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(y1.shape(), x.shape());
        assert_eq!(y1, y2);
    }

    #[test]
    fn di_backward_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[2, 1, 10, 10], |_| rng.random::<f32>());
        let dy = Tensor::from_fn(&[2, 1, 10, 10], |_| rng.random::<f32>());
        let (y, map) = di_transform(&x, 1.0, &mut rng);
        let dx = di_backward(&dy, &map);
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| (a * b) as f64).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| (a * b) as f64).sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }

    #[test]
    fn validation_lists_every_problem() {
        let mut cfg = IterAttackConfig::preset(Method::Mim, 1.5, Some(1), 0);
        cfg.steps = 0;
        cfg.di_probability = 2.0;
        let Err(Error::Config(errs)) = cfg.validate() else {
            panic!("expected config error")
        };
        assert_eq!(errs.len(), 3);
    }
}
