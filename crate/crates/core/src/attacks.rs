//! Gradient attacks: FGSM, BIM, PGD (all ∞-norm) and C&W-L2.
//!
//! Attacks see a model only through [`GradientProvider`], so a bare
//! [`Network`] and an ensemble are interchangeable. Success is always judged
//! by the provider's target model: for an ensemble, its original member.
//!
//! The `*_batch` entry points attack many samples at once and share one
//! provider call per iteration across all samples still in play. Reported
//! per-sample wall time is the batch time divided by the batch size.

use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LossGradient, LossKind, Network};
use crate::tensor::Tensor;

/// Iteration budget for BIM/PGD on MNIST-sized inputs.
pub const MNIST_ITERATIONS: usize = 40;
/// Iteration budget for BIM/PGD on larger color datasets.
pub const COLOR_ITERATIONS: usize = 20;
/// Keeps the tanh box map strictly inside `(0, 1)`.
const TANH_SMOOTHING: f32 = 0.999_999;

/// Anything that can supply loss gradients and a victim label.
pub trait GradientProvider {
    fn input_shape(&self) -> &[usize];
    fn num_classes(&self) -> usize;

    /// Number of networks evaluated per gradient query.
    fn model_count(&self) -> usize {
        1
    }

    fn input_len(&self) -> usize {
        self.input_shape().iter().product()
    }

    /// Per-sample gradients for `ys.len()` samples packed row-major in `xs`.
    fn loss_gradients(&self, xs: &[f32], ys: &[usize], loss: LossKind)
        -> Result<Vec<LossGradient>>;

    /// Labels assigned by the target model.
    fn target_labels(&self, xs: &[f32]) -> Result<Vec<usize>>;
}

pub(crate) fn check_batch(
    shape_len: usize,
    classes: usize,
    xs: &[f32],
    ys: Option<&[usize]>,
) -> Result<usize> {
    if shape_len == 0 || !xs.len().is_multiple_of(shape_len) {
        return Err(Error::ShapeMismatch {
            expected: vec![shape_len],
            got: vec![xs.len()],
        });
    }
    let batch = xs.len() / shape_len;
    if let Some(ys) = ys {
        if ys.len() != batch {
            return Err(Error::ShapeMismatch {
                expected: vec![batch],
                got: vec![ys.len()],
            });
        }
        if let Some(&label) = ys.iter().find(|&&y| y >= classes) {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: classes,
            });
        }
    }
    Ok(batch)
}

impl GradientProvider for Network {
    fn input_shape(&self) -> &[usize] {
        Network::input_shape(self)
    }

    fn num_classes(&self) -> usize {
        Network::num_classes(self)
    }

    fn loss_gradients(
        &self,
        xs: &[f32],
        ys: &[usize],
        loss: LossKind,
    ) -> Result<Vec<LossGradient>> {
        check_batch(self.input_len(), self.num_classes(), xs, Some(ys))?;
        Ok(self.input_gradient_flat(xs, ys, loss))
    }

    fn target_labels(&self, xs: &[f32]) -> Result<Vec<usize>> {
        let batch = check_batch(self.input_len(), self.num_classes(), xs, None)?;
        Ok(self.forward_flat(xs, batch).predictions())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackFamily {
    #[serde(rename = "FGSM")]
    Fgsm,
    #[serde(rename = "BIM")]
    Bim,
    #[serde(rename = "PGD")]
    Pgd,
    #[serde(rename = "CW")]
    Cw,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 4] = [Self::Fgsm, Self::Bim, Self::Pgd, Self::Cw];

    pub fn name(self) -> &'static str {
        match self {
            Self::Fgsm => "FGSM",
            Self::Bim => "BIM",
            Self::Pgd => "PGD",
            Self::Cw => "CW",
        }
    }

    /// Default parameter grid: ε for the ∞-norm attacks, `c` for C&W.
    pub fn default_grid(self) -> Vec<f32> {
        match self {
            Self::Cw => (7..=13).map(|c| c as f32).collect(),
            _ => vec![0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4],
        }
    }
}

impl std::fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown attack '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub epsilon: f32,
    pub step_size: f32,
    pub max_iter: usize,
    pub c: f32,
    pub learning_rate: f32,
    pub pixel_bounds: (f32, f32),
}

impl AttackConfig {
    fn base(family: AttackFamily) -> Self {
        Self {
            family,
            epsilon: 0.0,
            step_size: 0.0,
            max_iter: 1,
            c: 0.0,
            learning_rate: 0.0,
            pixel_bounds: (0.0, 1.0),
        }
    }

    pub fn fgsm(epsilon: f32) -> Self {
        Self {
            epsilon,
            step_size: epsilon,
            ..Self::base(AttackFamily::Fgsm)
        }
    }

    /// Step size `ε / 10`.
    pub fn bim(epsilon: f32, max_iter: usize) -> Self {
        Self {
            epsilon,
            step_size: epsilon / 10.0,
            max_iter,
            ..Self::base(AttackFamily::Bim)
        }
    }

    /// Step size `ε / 10` from a uniform random start in the ε-ball.
    pub fn pgd(epsilon: f32, max_iter: usize) -> Self {
        Self {
            family: AttackFamily::Pgd,
            ..Self::bim(epsilon, max_iter)
        }
    }

    /// Learning rate 0.1 over 100 iterations.
    pub fn cw(c: f32) -> Self {
        Self {
            c,
            learning_rate: 0.1,
            max_iter: 100,
            ..Self::base(AttackFamily::Cw)
        }
    }

    /// Standard configuration for `family` at grid value `param` on MNIST.
    pub fn for_family(family: AttackFamily, param: f32) -> Self {
        match family {
            AttackFamily::Fgsm => Self::fgsm(param),
            AttackFamily::Bim => Self::bim(param, MNIST_ITERATIONS),
            AttackFamily::Pgd => Self::pgd(param, MNIST_ITERATIONS),
            AttackFamily::Cw => Self::cw(param),
        }
    }

    /// The swept parameter: ε, or `c` for C&W.
    pub fn param(&self) -> f32 {
        match self.family {
            AttackFamily::Cw => self.c,
            _ => self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.pixel_bounds;
        let finite = [
            self.epsilon,
            self.step_size,
            self.c,
            self.learning_rate,
            lo,
            hi,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite || lo >= hi {
            return Err(Error::Config(format!("invalid attack config {self:?}")));
        }
        match self.family {
            AttackFamily::Fgsm | AttackFamily::Bim | AttackFamily::Pgd => {
                if self.epsilon < 0.0 || self.step_size < 0.0 {
                    return Err(Error::Config("epsilon and step size must be >= 0".into()));
                }
            }
            AttackFamily::Cw => {
                if self.c < 0.0 || self.learning_rate <= 0.0 {
                    return Err(Error::Config(
                        "C&W needs c >= 0 and learning rate > 0".into(),
                    ));
                }
            }
        }
        if self.family != AttackFamily::Fgsm && self.max_iter == 0 {
            return Err(Error::Config("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub adversarial: Tensor,
    pub success: bool,
    /// Gradient queries issued to the provider for this sample.
    pub queries: usize,
    pub wall_time: f64,
    pub l2_dist: f32,
    pub linf_dist: f32,
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn distances(a: &[f32], b: &[f32]) -> (f32, f32) {
    let mut l2 = 0.0f64;
    let mut linf = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        let d = (x - y).abs();
        l2 += f64::from(d) * f64::from(d);
        linf = linf.max(d);
    }
    (l2.sqrt() as f32, linf)
}

/// Per-sample seed for sample `index` of a batch seeded with `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gather(xs: &[f32], n: usize, idx: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        out.extend_from_slice(&xs[i * n..(i + 1) * n]);
    }
    out
}

fn finish(
    provider: &dyn GradientProvider,
    originals: &[f32],
    adv: Vec<f32>,
    ys: &[usize],
    queries: Vec<usize>,
    known: Vec<Option<bool>>,
    start: Instant,
) -> Result<Vec<AttackResult>> {
    let n = provider.input_len();
    let pending: Vec<usize> = (0..ys.len()).filter(|&i| known[i].is_none()).collect();
    let mut success: Vec<bool> = known.iter().map(|k| k.unwrap_or(false)).collect();
    if !pending.is_empty() {
        let labels = provider.target_labels(&gather(&adv, n, &pending))?;
        for (&i, label) in pending.iter().zip(labels) {
            success[i] = label != ys[i];
        }
    }
    let per_sample = start.elapsed().as_secs_f64() / ys.len().max(1) as f64;
    let shape = provider.input_shape().to_vec();
    Ok((0..ys.len())
        .map(|i| {
            let a = &adv[i * n..(i + 1) * n];
            let (l2_dist, linf_dist) = distances(a, &originals[i * n..(i + 1) * n]);
            AttackResult {
                adversarial: Tensor::new(shape.clone(), a.to_vec()).expect("input shape"),
                success: success[i],
                queries: queries[i],
                wall_time: per_sample,
                l2_dist,
                linf_dist,
            }
        })
        .collect())
}

/// Projects `v` into the ε-ball around `x` intersected with the pixel box.
fn project(v: f32, x: f32, eps: f32, (lo, hi): (f32, f32)) -> f32 {
    v.clamp(x - eps, x + eps).clamp(lo, hi)
}

pub fn fgsm_batch(
    provider: &dyn GradientProvider,
    xs: &[f32],
    ys: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    let start = Instant::now();
    let grads = provider.loss_gradients(xs, ys, LossKind::CrossEntropy)?;
    let n = provider.input_len();
    let mut adv = xs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..n {
            let x = xs[i * n + j];
            adv[i * n + j] = project(
                x + cfg.epsilon * sign(g.wrt_input.data()[j]),
                x,
                cfg.epsilon,
                cfg.pixel_bounds,
            );
        }
    }
    finish(
        provider,
        xs,
        adv,
        ys,
        vec![1; ys.len()],
        vec![None; ys.len()],
        start,
    )
}

fn iterative_batch(
    provider: &dyn GradientProvider,
    xs: &[f32],
    ys: &[usize],
    cfg: &AttackConfig,
    start_points: Vec<f32>,
) -> Result<Vec<AttackResult>> {
    let start = Instant::now();
    let n = provider.input_len();
    let mut adv = start_points;
    let mut queries = vec![0usize; ys.len()];
    let mut known: Vec<Option<bool>> = vec![None; ys.len()];
    let mut active: Vec<usize> = (0..ys.len()).collect();
    for _ in 0..cfg.max_iter {
        if active.is_empty() {
            break;
        }
        let batch_ys: Vec<usize> = active.iter().map(|&i| ys[i]).collect();
        let grads = provider.loss_gradients(
            &gather(&adv, n, &active),
            &batch_ys,
            LossKind::CrossEntropy,
        )?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, g) in active.iter().zip(&grads) {
            queries[i] += 1;
            if g.target_class != ys[i] {
                known[i] = Some(true);
                continue;
            }
            let mut moved = false;
            for j in 0..n {
                let k = i * n + j;
                let next = project(
                    adv[k] + cfg.step_size * sign(g.wrt_input.data()[j]),
                    xs[k],
                    cfg.epsilon,
                    cfg.pixel_bounds,
                );
                moved |= next != adv[k];
                adv[k] = next;
            }
            // An unchanged iterate repeats forever; stop querying it.
            if moved {
                still.push(i);
            }
        }
        active = still;
    }
    finish(provider, xs, adv, ys, queries, known, start)
}

pub fn bim_batch(
    provider: &dyn GradientProvider,
    xs: &[f32],
    ys: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    check_batch(provider.input_len(), provider.num_classes(), xs, Some(ys))?;
    iterative_batch(provider, xs, ys, cfg, xs.to_vec())
}

/// PGD with one random start per sample; `seeds[i]` drives sample `i`.
pub fn pgd_batch(
    provider: &dyn GradientProvider,
    xs: &[f32],
    ys: &[usize],
    cfg: &AttackConfig,
    seeds: &[u64],
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    check_batch(provider.input_len(), provider.num_classes(), xs, Some(ys))?;
    if seeds.len() != ys.len() {
        return Err(Error::Config("one seed per sample required".into()));
    }
    let n = provider.input_len();
    let mut starts = xs.to_vec();
    if cfg.epsilon > 0.0 {
        for (i, &seed) in seeds.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for k in i * n..(i + 1) * n {
                let u: f32 = rng.random_range(-cfg.epsilon..=cfg.epsilon);
                starts[k] = project(xs[k] + u, xs[k], cfg.epsilon, cfg.pixel_bounds);
            }
        }
    }
    iterative_batch(provider, xs, ys, cfg, starts)
}

fn to_box(w: f32, (lo, hi): (f32, f32)) -> f32 {
    lo + (hi - lo) * (TANH_SMOOTHING * w.tanh() + 1.0) / 2.0
}

fn from_box(x: f32, (lo, hi): (f32, f32)) -> f32 {
    let t = (2.0 * (x - lo) / (hi - lo) - 1.0) / TANH_SMOOTHING;
    t.clamp(-TANH_SMOOTHING, TANH_SMOOTHING).atanh()
}

/// C&W-L2 with fixed `c`: gradient descent on `‖x' − x‖² + c·f(x')` in
/// tanh space. Keeps the successful iterate closest to `x` in L2.
pub fn cw_batch(
    provider: &dyn GradientProvider,
    xs: &[f32],
    ys: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AttackResult>> {
    cfg.validate()?;
    check_batch(provider.input_len(), provider.num_classes(), xs, Some(ys))?;
    let start = Instant::now();
    let n = provider.input_len();
    let bounds = cfg.pixel_bounds;
    let loss = LossKind::CarliniWagner { kappa: 0.0 };
    let mut w: Vec<f32> = xs.iter().map(|&x| from_box(x, bounds)).collect();
    let mut cur: Vec<f32> = w.iter().map(|&v| to_box(v, bounds)).collect();
    let mut best: Vec<Option<(f32, Vec<f32>)>> = vec![None; ys.len()];
    let mut aborted = vec![false; ys.len()];
    let mut queries = vec![0usize; ys.len()];
    let mut active: Vec<usize> = (0..ys.len()).collect();

    for _ in 0..cfg.max_iter {
        if active.is_empty() {
            break;
        }
        let batch_ys: Vec<usize> = active.iter().map(|&i| ys[i]).collect();
        let grads = provider.loss_gradients(&gather(&cur, n, &active), &batch_ys, loss)?;
        let mut still = Vec::with_capacity(active.len());
        for (&i, g) in active.iter().zip(&grads) {
            queries[i] += 1;
            let range = i * n..(i + 1) * n;
            if !g.loss_value.is_finite() || !g.wrt_input.is_finite() {
                aborted[i] = true;
                continue;
            }
            if g.target_class != ys[i] {
                let (l2, _) = distances(&cur[range.clone()], &xs[range.clone()]);
                if best[i].as_ref().is_none_or(|(d, _)| l2 < *d) {
                    best[i] = Some((l2, cur[range.clone()].to_vec()));
                }
            }
            let scale = (bounds.1 - bounds.0) * TANH_SMOOTHING / 2.0;
            for (j, k) in range.enumerate() {
                let t = w[k].tanh();
                let dx = 2.0 * (cur[k] - xs[k]) + cfg.c * g.wrt_input.data()[j];
                w[k] -= cfg.learning_rate * dx * scale * (1.0 - t * t);
                cur[k] = to_box(w[k], bounds);
            }
            if cur[i * n..(i + 1) * n].iter().all(|v| v.is_finite()) {
                still.push(i);
            } else {
                aborted[i] = true;
            }
        }
        active = still;
    }

    // The last iterate has not been checked yet.
    let unchecked: Vec<usize> = active;
    if !unchecked.is_empty() {
        let labels = provider.target_labels(&gather(&cur, n, &unchecked))?;
        for (&i, label) in unchecked.iter().zip(labels) {
            let range = i * n..(i + 1) * n;
            if label != ys[i] {
                let (l2, _) = distances(&cur[range.clone()], &xs[range.clone()]);
                if best[i].as_ref().is_none_or(|(d, _)| l2 < *d) {
                    best[i] = Some((l2, cur[range].to_vec()));
                }
            }
        }
    }

    let mut adv = cur;
    let mut known = vec![Some(false); ys.len()];
    for i in 0..ys.len() {
        let range = i * n..(i + 1) * n;
        if aborted[i] {
            adv[range].copy_from_slice(&xs[i * n..(i + 1) * n]);
        } else if let Some((_, x)) = best[i].take() {
            adv[range].copy_from_slice(&x);
            known[i] = Some(true);
        }
    }
    finish(provider, xs, adv, ys, queries, known, start)
}

/// Runs the attack named by `cfg.family` on a batch.
pub fn attack_batch(
    provider: &dyn GradientProvider,
    xs: &[f32],
    ys: &[usize],
    cfg: &AttackConfig,
    seeds: &[u64],
) -> Result<Vec<AttackResult>> {
    match cfg.family {
        AttackFamily::Fgsm => fgsm_batch(provider, xs, ys, cfg),
        AttackFamily::Bim => bim_batch(provider, xs, ys, cfg),
        AttackFamily::Pgd => pgd_batch(provider, xs, ys, cfg, seeds),
        AttackFamily::Cw => cw_batch(provider, xs, ys, cfg),
    }
}

fn single(provider: &dyn GradientProvider, x: &Tensor) -> Result<()> {
    if x.shape() != provider.input_shape() {
        return Err(Error::ShapeMismatch {
            expected: provider.input_shape().to_vec(),
            got: x.shape().to_vec(),
        });
    }
    Ok(())
}

pub fn fgsm(
    provider: &dyn GradientProvider,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    single(provider, x)?;
    Ok(fgsm_batch(provider, x.data(), &[y], cfg)?.remove(0))
}

pub fn bim(
    provider: &dyn GradientProvider,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    single(provider, x)?;
    Ok(bim_batch(provider, x.data(), &[y], cfg)?.remove(0))
}

pub fn pgd(
    provider: &dyn GradientProvider,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackResult> {
    single(provider, x)?;
    Ok(pgd_batch(provider, x.data(), &[y], cfg, &[seed])?.remove(0))
}

/// C&W-L2. The seed is accepted for interface symmetry; the attack is deterministic.
pub fn cw_l2(
    provider: &dyn GradientProvider,
    x: &Tensor,
    y: usize,
    cfg: &AttackConfig,
    _seed: u64,
) -> Result<AttackResult> {
    single(provider, x)?;
    Ok(cw_batch(provider, x.data(), &[y], cfg)?.remove(0))
}
