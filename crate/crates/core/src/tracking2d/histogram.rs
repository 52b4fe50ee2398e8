//! Foreground/background RGB histograms with 16x16x16 bins.

use crate::image::{ColorImage, Mask};
use serde::{Deserialize, Serialize};

pub const BINS_PER_CHANNEL: usize = 16;
pub const BIN_COUNT: usize = BINS_PER_CHANNEL * BINS_PER_CHANNEL * BINS_PER_CHANNEL;

/// Floor applied under the log so unseen colors stay finite.
const LOG_FLOOR: f64 = 1e-12;

#[inline]
pub fn color_bin(rgb: [u8; 3]) -> usize {
    let r = (rgb[0] >> 4) as usize;
    let g = (rgb[1] >> 4) as usize;
    let b = (rgb[2] >> 4) as usize;
    (r * BINS_PER_CHANNEL + g) * BINS_PER_CHANNEL + b
}

/// A normalized RGB histogram (sums to 1 after smoothing).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<f64>,
}

impl Histogram {
    pub fn uniform() -> Self {
        Self {
            bins: vec![1.0 / BIN_COUNT as f64; BIN_COUNT],
        }
    }

    /// Build from raw counts: occupancy is dilated by one bin in RGB space
    /// and every bin in the dilated support receives one extra count, then
    /// the whole histogram is normalized.
    pub fn from_counts(counts: &[u64]) -> Self {
        assert_eq!(counts.len(), BIN_COUNT);
        let mut support = vec![false; BIN_COUNT];
        for r in 0..BINS_PER_CHANNEL {
            for g in 0..BINS_PER_CHANNEL {
                for b in 0..BINS_PER_CHANNEL {
                    let i = (r * BINS_PER_CHANNEL + g) * BINS_PER_CHANNEL + b;
                    if counts[i] == 0 {
                        continue;
                    }
                    for dr in -1i64..=1 {
                        for dg in -1i64..=1 {
                            for db in -1i64..=1 {
                                let (nr, ng, nb) =
                                    (r as i64 + dr, g as i64 + dg, b as i64 + db);
                                if (0..BINS_PER_CHANNEL as i64).contains(&nr)
                                    && (0..BINS_PER_CHANNEL as i64).contains(&ng)
                                    && (0..BINS_PER_CHANNEL as i64).contains(&nb)
                                {
                                    support[(nr as usize * BINS_PER_CHANNEL + ng as usize)
                                        * BINS_PER_CHANNEL
                                        + nb as usize] = true;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut bins: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
        for (b, &s) in bins.iter_mut().zip(&support) {
            if s {
                *b += 1.0;
            }
        }
        let total: f64 = bins.iter().sum();
        if total > 0.0 {
            for b in &mut bins {
                *b /= total;
            }
        } else {
            return Self::uniform();
        }
        Self { bins }
    }

    pub fn from_pixels<'a>(pixels: impl Iterator<Item = [u8; 3]>) -> Self {
        let mut counts = vec![0u64; BIN_COUNT];
        for p in pixels {
            counts[color_bin(p)] += 1;
        }
        Self::from_counts(&counts)
    }

    pub fn sum(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn log_likelihood(&self, rgb: [u8; 3]) -> f64 {
        self.bins[color_bin(rgb)].max(LOG_FLOOR).ln()
    }

    /// Histogram intersection similarity in [0, 1].
    pub fn intersection(&self, other: &Histogram) -> f64 {
        self.bins
            .iter()
            .zip(&other.bins)
            .map(|(a, b)| a.min(*b))
            .sum()
    }

    /// Exponential blend toward `current`, renormalized. The alpha extremes
    /// reproduce the inputs exactly.
    pub fn blend(&mut self, current: &Histogram, alpha: f64) {
        if alpha == 0.0 {
            return;
        }
        if alpha == 1.0 {
            self.bins.clone_from(&current.bins);
            return;
        }
        for (b, c) in self.bins.iter_mut().zip(&current.bins) {
            *b = (1.0 - alpha) * *b + alpha * c;
        }
        let total = self.sum();
        if total > 0.0 {
            for b in &mut self.bins {
                *b /= total;
            }
        }
    }
}

/// Foreground and background appearance of one tracked object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppearanceModel {
    pub fg: Histogram,
    pub bg: Histogram,
}

impl AppearanceModel {
    /// Learn from an image given a foreground mask and a region of interest;
    /// background pixels are those in the roi but not in the foreground.
    pub fn learn(img: &ColorImage, fg_mask: &Mask, roi: &Mask) -> Self {
        let fg = Histogram::from_pixels(
            (0..img.width * img.height)
                .filter(|&i| fg_mask.data[i])
                .map(|i| px(img, i)),
        );
        let bg = Histogram::from_pixels(
            (0..img.width * img.height)
                .filter(|&i| roi.data[i] && !fg_mask.data[i])
                .map(|i| px(img, i)),
        );
        Self { fg, bg }
    }
}

#[inline]
fn px(img: &ColorImage, i: usize) -> [u8; 3] {
    [img.data[i * 3], img.data[i * 3 + 1], img.data[i * 3 + 2]]
}
