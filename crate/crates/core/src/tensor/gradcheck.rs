//! Central finite-difference check of autodiff gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Result, Scalar, Tensor, Var};

/// Coordinates beyond this count are checked on a seeded random subset.
pub const FULL_CHECK_LIMIT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// `max_i |autodiff_i - numeric_i| / max(|autodiff|_inf, |numeric|_inf)`.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub coords_checked: usize,
}

fn eval<T, F>(f: &mut F, x: Tensor<T>) -> Result<T>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.with_grad(false));
    let out = f(&mut g, xv)?;
    Ok(g.value(out).values()[0])
}

/// Compares the autodiff gradient of the scalar function `f` at `x` with
/// central differences of width `step`.
///
/// `f` receives a fresh graph and the leaf holding `x`, and must return a
/// scalar node. Errors are normalized by the larger infinity norm of the two
/// gradient estimates so that near-zero coordinates do not amplify rounding.
pub fn finite_diff_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<GradCheck>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    finite_diff_check_subset(f, x, step, FULL_CHECK_LIMIT, 0x5eed)
}

/// As [`finite_diff_check`], checking at most `max_coords` coordinates.
pub fn finite_diff_check_subset<T, F>(
    mut f: F,
    x: &Tensor<T>,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheck>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_grad(true));
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let zeros = vec![T::zero(); x.numel()];
    let analytic = grads.get(xv).unwrap_or(&zeros);

    let coords: Vec<usize> = if x.numel() <= max_coords {
        (0..x.numel()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, x.numel(), max_coords.max(50)).into_vec();
        idx.sort_unstable();
        idx
    };

    let h = T::from_f64(step);
    let mut numeric = Vec::with_capacity(coords.len());
    for &i in &coords {
        let mut plus = x.clone();
        plus.values_mut()[i] = plus.values()[i] + h;
        let mut minus = x.clone();
        minus.values_mut()[i] = minus.values()[i] - h;
        let fp = eval(&mut f, plus)?.as_f64();
        let fm = eval(&mut f, minus)?.as_f64();
        // Use the actually representable step.
        let width = (x.values()[i] + h).as_f64() - (x.values()[i] - h).as_f64();
        numeric.push((fp - fm) / width);
    }

    let scale_a = coords.iter().map(|&i| analytic[i].as_f64().abs()).fold(0.0, f64::max);
    let scale_n = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let scale = scale_a.max(scale_n);
    let mut worst = (0.0f64, coords.first().copied().unwrap_or(0));
    if scale > 0.0 {
        for (&i, &n) in coords.iter().zip(&numeric) {
            let err = (analytic[i].as_f64() - n).abs() / scale;
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
    }
    Ok(GradCheck {
        max_rel_err: worst.0,
        worst_index: worst.1,
        coords_checked: coords.len(),
    })
}
