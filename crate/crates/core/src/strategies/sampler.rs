use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Class-balanced sampling with replacement.
///
/// Sample `i` of class `c` is drawn with probability `1 / (K * n_c)`, so
/// every class carries total mass `1/K`. Draws pick a class uniformly and
/// then a member of that class uniformly, which realizes exactly these
/// probabilities.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    labels: Vec<usize>,
    members: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    pub fn new(labels: &[usize], num_classes: usize, seed: u64) -> Result<Self> {
        let mut members = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            let slot = members
                .get_mut(y)
                .ok_or_else(|| Error::config(format!("label {y} out of range for {num_classes} classes")))?;
            slot.push(i);
        }
        if let Some(c) = members.iter().position(Vec::is_empty) {
            return Err(Error::config(format!("class {c} has no training samples")));
        }
        Ok(Self {
            labels: labels.to_vec(),
            members,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    /// Probability of sample `i` as the exact fraction `(1, K * n_c)`.
    pub fn probability_ratio(&self, i: usize) -> (u64, u64) {
        let c = self.labels[i];
        (1, (self.members.len() * self.members[c].len()) as u64)
    }

    pub fn probabilities(&self) -> Vec<f64> {
        (0..self.labels.len())
            .map(|i| {
                let (num, den) = self.probability_ratio(i);
                num as f64 / den as f64
            })
            .collect()
    }

    pub fn next_index(&mut self) -> usize {
        let c = self.rng.random_range(0..self.members.len());
        let m = &self.members[c];
        m[self.rng.random_range(0..m.len())]
    }

    pub fn draw(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_index()).collect()
    }
}

pub fn make_balanced_sampler(labels: &[usize], num_classes: usize, seed: u64) -> Result<BalancedSampler> {
    BalancedSampler::new(labels, num_classes, seed)
}
