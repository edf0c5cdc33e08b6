//! Complementary channel masks.

use pact_core::Sinogram;
use rand::Rng;

use crate::error::{Result, TrainError};

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMask {
    pub keep: Vec<bool>,
    /// Fraction of channels dropped.
    pub masking_ratio: f64,
}

/// `round(n * (1 - r))`, ties away from zero.
pub fn kept_count(n: usize, masking_ratio: f64) -> usize {
    (n as f64 * (1.0 - masking_ratio)).round() as usize
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r) {
        return Err(TrainError::InvalidConfig(format!("masking ratio {r} outside [0, 1)")));
    }
    Ok(())
}

impl ChannelMask {
    pub fn all(n: usize) -> Self {
        Self {
            keep: vec![true; n],
            masking_ratio: 0.0,
        }
    }

    pub fn from_indices(n: usize, kept: &[usize]) -> Self {
        let mut keep = vec![false; n];
        for &i in kept {
            keep[i] = true;
        }
        Self {
            masking_ratio: 1.0 - kept.len() as f64 / n as f64,
            keep,
        }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            keep: self.keep.iter().map(|k| !k).collect(),
            masking_ratio: 1.0 - self.masking_ratio,
        }
    }

    /// `round(n * (1 - r))` channels chosen uniformly without replacement;
    /// `r = 0` keeps everything.
    pub fn random<R: Rng>(n: usize, masking_ratio: f64, rng: &mut R) -> Result<Self> {
        check_ratio(masking_ratio)?;
        let mut m = Self::random_kept(n, kept_count(n, masking_ratio), rng)?;
        m.masking_ratio = masking_ratio;
        Ok(m)
    }

    /// Exactly `k` channels chosen uniformly without replacement.
    pub fn random_kept<R: Rng>(n: usize, k: usize, rng: &mut R) -> Result<Self> {
        if k > n {
            return Err(TrainError::InvalidConfig(format!("cannot keep {k} of {n} channels")));
        }
        let idx = rand::seq::index::sample(rng, n, k);
        Ok(Self::from_indices(n, &idx.into_vec()))
    }
}

/// `(m1, m2 = NOT m1)`. Both sides must keep at least one channel.
pub fn sample_masks<R: Rng>(n: usize, masking_ratio: f64, rng: &mut R) -> Result<(ChannelMask, ChannelMask)> {
    check_ratio(masking_ratio)?;
    let k = kept_count(n, masking_ratio);
    if k == 0 || k >= n {
        return Err(TrainError::DegenerateMask { n, ratio: masking_ratio });
    }
    let m1 = ChannelMask::random(n, masking_ratio, rng)?;
    let m2 = m1.complement();
    Ok((m1, m2))
}

/// `k` evenly spaced channels: `floor(i * n / k)` for `i < k`.
pub fn even_channels(n: usize, k: usize) -> Result<ChannelMask> {
    if k == 0 || k > n {
        return Err(TrainError::InvalidConfig(format!("cannot pick {k} even channels out of {n}")));
    }
    let idx: Vec<usize> = (0..k).map(|i| i * n / k).collect();
    Ok(ChannelMask::from_indices(n, &idx))
}

/// Zeroes dropped channels; kept channels are copied unchanged.
pub fn apply_mask(y: &Sinogram, m: &ChannelMask) -> Result<Sinogram> {
    let n = y.geometry.n_elements;
    if m.keep.len() != n {
        return Err(TrainError::BadShape(format!("mask has {} channels, sinogram {n}", m.keep.len())));
    }
    let mut out = y.clone();
    for (e, &k) in m.keep.iter().enumerate() {
        if !k {
            out.channel_mut(e).fill(0.0);
        }
    }
    Ok(out)
}
