//! Patch feature extraction for the cosine feature loss.

use crate::geometry::GrayImage;

/// Produces one fixed-length descriptor per image patch. Implementations
/// must be deterministic: the same image yields the same features.
pub trait FeatureExtractor: Sync {
    fn patch_features(&self, image: &GrayImage) -> Vec<Vec<f64>>;
}

/// Gradient-orientation histograms on a fixed patch grid. Each patch yields
/// `bins` orientation buckets accumulated with gradient magnitude; untextured
/// patches produce the all-zero descriptor (the feature loss scores those as
/// a full mismatch).
#[derive(Clone, Debug)]
pub struct HogExtractor {
    pub grid: usize,
    pub bins: usize,
}

impl Default for HogExtractor {
    fn default() -> Self {
        HogExtractor { grid: 16, bins: 8 }
    }
}

impl FeatureExtractor for HogExtractor {
    fn patch_features(&self, image: &GrayImage) -> Vec<Vec<f64>> {
        let (w, h) = (image.width, image.height);
        let mut features = vec![vec![0.0; self.bins]; self.grid * self.grid];
        if w < 3 || h < 3 {
            return features;
        }
        for y in 1..h - 1 {
            // Patch index from pixel position; edge pixels fold into the
            // nearest patch so the partition covers the image exactly.
            let py = (y * self.grid / h).min(self.grid - 1);
            for x in 1..w - 1 {
                let px = (x * self.grid / w).min(self.grid - 1);
                let gx = 0.5 * (image.get(x + 1, y) - image.get(x - 1, y));
                let gy = 0.5 * (image.get(x, y + 1) - image.get(x, y - 1));
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let angle = gy.atan2(gx); // [-pi, pi]
                let frac = (angle + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
                let bin = ((frac * self.bins as f64) as usize).min(self.bins - 1);
                features[py * self.grid + px][bin] += mag;
            }
        }
        features
    }
}
