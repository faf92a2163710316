//! Projected gradient ascent on the classification loss inside an
//! l_p ball intersected with the [0, 1] pixel box.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormOrder {
    L2,
    LInf,
}

impl fmt::Display for NormOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormOrder::L2 => "2",
            NormOrder::LInf => "inf",
        })
    }
}

impl std::str::FromStr for NormOrder {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "2" | "l2" => Ok(NormOrder::L2),
            "inf" | "linf" => Ok(NormOrder::LInf),
            other => Err(format!("unsupported norm order '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PgdInit {
    Zero,
    /// Uniform in the ball, then clipped to the pixel box.
    RandomInBall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReturnMode {
    /// The final iterate.
    LastIterate,
    /// Per sample, the highest-loss point among the clean input and all iterates.
    BestOf,
}

/// Attack configuration: norm order, radius, iteration count and step size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationBudget {
    pub p: NormOrder,
    pub epsilon: f64,
    pub iters: usize,
    pub step: f64,
    pub init: PgdInit,
    pub return_mode: ReturnMode,
}

pub const DEFAULT_ITERS: usize = 10;

impl PerturbationBudget {
    /// 10-iteration l2 PGD with step `2.5 * epsilon / iters`, random start, last iterate.
    pub fn l2(epsilon: f64) -> Self {
        Self::new(NormOrder::L2, epsilon, DEFAULT_ITERS)
    }

    pub fn new(p: NormOrder, epsilon: f64, iters: usize) -> Self {
        Self {
            p,
            epsilon,
            iters,
            step: 2.5 * epsilon / iters.max(1) as f64,
            init: PgdInit::RandomInBall,
            return_mode: ReturnMode::LastIterate,
        }
    }

    pub fn with_init(mut self, init: PgdInit) -> Self {
        self.init = init;
        self
    }

    pub fn with_return_mode(mut self, mode: ReturnMode) -> Self {
        self.return_mode = mode;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.iters == 0 {
            return Err(Error::config("PGD needs at least one iteration"));
        }
        if self.epsilon > 0.0 && !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::config(format!("PGD step must be positive, got {}", self.step)));
        }
        Ok(())
    }
}

pub fn norm<T: Scalar>(delta: &[T], p: NormOrder) -> f64 {
    match p {
        NormOrder::L2 => delta.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt(),
        NormOrder::LInf => delta.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max),
    }
}

/// Projects `delta` in place onto the l_p ball of radius `epsilon`.
/// Feasible points are left untouched.
pub fn project_slice<T: Scalar>(delta: &mut [T], p: NormOrder, epsilon: f64) {
    match p {
        NormOrder::L2 => {
            let n = norm(delta, p);
            if n > epsilon {
                let scale = T::from_f64(epsilon / n);
                for v in delta.iter_mut() {
                    *v = *v * scale;
                }
            }
        }
        NormOrder::LInf => {
            let e = T::from_f64(epsilon);
            for v in delta.iter_mut() {
                *v = v.max(-e).min(e);
            }
        }
    }
}

/// Projection of a whole tensor treated as one perturbation.
pub fn project_ball<T: Scalar>(delta: &Tensor<T>, p: NormOrder, epsilon: f64) -> Tensor<T> {
    let mut out = delta.clone();
    project_slice(out.values_mut(), p, epsilon);
    out
}

/// Per-sample cross-entropy of an `N x K` logits tensor.
pub fn per_sample_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Vec<f64> {
    let k = logits.dims()[1];
    logits
        .values()
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            lse - row[y].as_f64()
        })
        .collect()
}

fn random_start<T: Scalar>(dim: usize, budget: &PerturbationBudget, rng: &mut ChaCha8Rng) -> Vec<T> {
    match (budget.init, budget.p) {
        (PgdInit::Zero, _) => vec![T::zero(); dim],
        (PgdInit::RandomInBall, NormOrder::LInf) => (0..dim)
            .map(|_| T::from_f64(rng.random_range(-budget.epsilon..=budget.epsilon)))
            .collect(),
        (PgdInit::RandomInBall, NormOrder::L2) => {
            let dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            let u: f64 = rng.random();
            let radius = budget.epsilon * u.powf(1.0 / dim as f64);
            let scale = if n > 0.0 { radius / n } else { 0.0 };
            dir.iter().map(|v| T::from_f64(v * scale)).collect()
        }
    }
}

/// Sets `delta` so that `x + delta` lies in the pixel box.
fn clip_to_box<T: Scalar>(x: &[T], delta: &mut [T]) {
    for (d, &xi) in delta.iter_mut().zip(x) {
        let adv = (xi + *d).max(T::zero()).min(T::one());
        *d = adv - xi;
    }
}

fn check_batch<T: Scalar>(x: &Tensor<T>, labels: &[usize]) -> Result<()> {
    if x.dims()[0] != labels.len() {
        return Err(Error::config(format!(
            "batch of {} images with {} labels",
            x.dims()[0],
            labels.len()
        )));
    }
    if x.values().iter().any(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        return Err(Error::config("attack inputs must lie in [0, 1]"));
    }
    Ok(())
}

/// Crafts adversarial examples for a batch.
///
/// Each iteration computes the input gradient of the mean loss in eval mode,
/// takes a normalized ascent step per sample (l2: `step * g / |g|`, l_inf:
/// `step * sign(g)`), projects onto the ball and clips to the box. Samples
/// with an all-zero gradient keep their perturbation for that step.
pub fn pgd_perturb<T, C>(
    model: &C,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<Tensor<T>>
where
    T: Scalar,
    C: Classifier<T> + ?Sized,
{
    budget.validate()?;
    check_batch(x, labels)?;
    if budget.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let n = x.dims()[0];
    let dim = x.numel() / n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta: Vec<T> = Vec::with_capacity(x.numel());
    for _ in 0..n {
        delta.extend(random_start::<T>(dim, budget, &mut rng));
    }
    clip_to_box(x.values(), &mut delta);

    let best_of = budget.return_mode == ReturnMode::BestOf;
    let mut best: Option<(Vec<f64>, Vec<T>)> = None;
    if best_of {
        let clean = model_eval_losses(model, x, labels)?;
        best = Some((clean, vec![T::zero(); x.numel()]));
    }
    let step = T::from_f64(budget.step);

    for _ in 0..budget.iters {
        let adv = with_delta(x, &delta)?;
        let mut g = Graph::new();
        let xv = g.leaf_copy(&adv, true);
        let logits = model.logits(&mut g, xv)?;
        if let Some((best_loss, best_delta)) = best.as_mut() {
            let losses = per_sample_cross_entropy(g.value(logits), labels);
            keep_better(best_loss, best_delta, &losses, &delta, dim);
        }
        let loss = g.softmax_cross_entropy(logits, labels)?;
        let grads = g.backward(loss)?;
        // An input the loss does not reach has a zero gradient.
        let zeros;
        let grad = match grads.get(xv) {
            Some(g) => g,
            None => {
                zeros = vec![T::zero(); x.numel()];
                &zeros
            }
        };
        for ((d, gs), xs) in delta.chunks_mut(dim).zip(grad.chunks(dim)).zip(x.values().chunks(dim)) {
            match budget.p {
                NormOrder::L2 => {
                    let gn = norm(gs, NormOrder::L2);
                    if gn > 0.0 && gn.is_finite() {
                        let s = step / T::from_f64(gn);
                        for (dv, &gv) in d.iter_mut().zip(gs) {
                            *dv = *dv + s * gv;
                        }
                    }
                }
                NormOrder::LInf => {
                    for (dv, &gv) in d.iter_mut().zip(gs) {
                        if gv > T::zero() {
                            *dv = *dv + step;
                        } else if gv < T::zero() {
                            *dv = *dv - step;
                        }
                    }
                }
            }
            project_slice(d, budget.p, budget.epsilon);
            clip_to_box(xs, d);
        }
    }

    if let Some((mut best_loss, mut best_delta)) = best {
        let adv = with_delta(x, &delta)?;
        let losses = model_eval_losses(model, &adv, labels)?;
        keep_better(&mut best_loss, &mut best_delta, &losses, &delta, dim);
        delta = best_delta;
    }
    with_delta(x, &delta)
}

fn keep_better<T: Scalar>(best_loss: &mut [f64], best_delta: &mut [T], losses: &[f64], delta: &[T], dim: usize) {
    for (i, &l) in losses.iter().enumerate() {
        if l > best_loss[i] {
            best_loss[i] = l;
            best_delta[i * dim..(i + 1) * dim].copy_from_slice(&delta[i * dim..(i + 1) * dim]);
        }
    }
}

fn with_delta<T: Scalar>(x: &Tensor<T>, delta: &[T]) -> Result<Tensor<T>> {
    let values = x
        .values()
        .iter()
        .zip(delta)
        .map(|(&a, &d)| (a + d).max(T::zero()).min(T::one()))
        .collect();
    Ok(Tensor::new(x.dims().to_vec(), values)?)
}

fn model_eval_losses<T, C>(model: &C, x: &Tensor<T>, labels: &[usize]) -> Result<Vec<f64>>
where
    T: Scalar,
    C: Classifier<T> + ?Sized,
{
    let mut g = Graph::new();
    let xv = g.leaf_copy(x, false);
    let logits = model.logits(&mut g, xv)?;
    Ok(per_sample_cross_entropy(g.value(logits), labels))
}

/// Mean eval-mode loss at the crafted point `x + delta*`.
pub fn adversarial_loss<T, C>(
    model: &C,
    x: &Tensor<T>,
    labels: &[usize],
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<T>
where
    T: Scalar,
    C: Classifier<T> + ?Sized,
{
    let adv = pgd_perturb(model, x, labels, budget, seed)?;
    let mut g = Graph::new();
    let xv = g.leaf_copy(&adv, false);
    let logits = model.logits(&mut g, xv)?;
    let loss = g.softmax_cross_entropy(logits, labels)?;
    Ok(g.value(loss).values()[0])
}
