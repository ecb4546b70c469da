//! Otsu thresholding and tissue masks.

use crate::dataset::DatasetError;
use crate::imaging::ImageTensor;

/// Threshold maximizing the between-class variance `w0·w1·(μ0 − μ1)²`, with class 0
/// holding bins `≤ t`. Ties resolve to the smallest `t`.
pub fn otsu_threshold(histogram: &[u64; 256]) -> Result<u8, DatasetError> {
    Ok(otsu_scan(histogram)?.0)
}

/// Returns the threshold and its between-class variance.
pub(crate) fn otsu_scan(histogram: &[u64; 256]) -> Result<(u8, f64), DatasetError> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(DatasetError::EmptyHistogram);
    }
    let total_f = total as f64;
    let weighted_total: f64 = histogram.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();

    let mut best = (0u8, f64::NEG_INFINITY);
    let mut count0 = 0u64;
    let mut sum0 = 0.0;
    for (t, &c) in histogram.iter().enumerate() {
        count0 += c;
        sum0 += t as f64 * c as f64;
        let count1 = total - count0;
        let between = if count0 == 0 || count1 == 0 {
            0.0
        } else {
            let (w0, w1) = (count0 as f64 / total_f, count1 as f64 / total_f);
            let mu0 = sum0 / count0 as f64;
            let mu1 = (weighted_total - sum0) / count1 as f64;
            w0 * w1 * (mu0 - mu1) * (mu0 - mu1)
        };
        if between > best.1 {
            best = (t as u8, between);
        }
    }
    Ok(best)
}

/// Binary tissue map for an image.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueMask {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
    pub tissue_fraction: f64,
    /// `None` when the image has a single gray level and no threshold separates classes.
    pub threshold: Option<u8>,
}

impl TissueMask {
    pub fn at(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.width + x]
    }

    /// Fraction of tissue pixels inside a window.
    pub fn fraction_in(&self, y: usize, x: usize, height: usize, width: usize) -> f64 {
        let mut count = 0usize;
        for row in y..y + height {
            count += self.mask[row * self.width + x..row * self.width + x + width].iter().filter(|&&m| m).count();
        }
        count as f64 / (height * width) as f64
    }
}

/// Gray level 0..=255 from the unweighted channel mean.
pub fn gray_levels(image: &ImageTensor) -> Vec<u8> {
    let (h, w, c) = (image.height(), image.width(), image.channels());
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mean = (0..c).map(|ch| image.get(ch, y, x)).sum::<f64>() / c as f64;
            out.push((mean * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Tissue is the darker Otsu class (gray `≤` threshold). Single-level images give an
/// all-false mask.
pub fn tissue_mask(image: &ImageTensor) -> TissueMask {
    let gray = gray_levels(image);
    let mut hist = [0u64; 256];
    for &g in &gray {
        hist[g as usize] += 1;
    }
    let (t, between) = otsu_scan(&hist).expect("image has at least one pixel");
    let threshold = (between > 0.0).then_some(t);
    let mask: Vec<bool> = match threshold {
        Some(t) => gray.iter().map(|&g| g <= t).collect(),
        None => vec![false; gray.len()],
    };
    let tissue_fraction = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
    TissueMask { height: image.height(), width: image.width(), mask, tissue_fraction, threshold }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct evaluation of the between-class variance at every threshold.
    fn brute_force(hist: &[u64; 256]) -> u8 {
        let total: f64 = hist.iter().map(|&c| c as f64).sum();
        let mut best = (0u8, -1.0f64);
        for t in 0..256usize {
            let (mut n0, mut s0, mut n1, mut s1) = (0.0, 0.0, 0.0, 0.0);
            for (i, &c) in hist.iter().enumerate() {
                if i <= t {
                    n0 += c as f64;
                    s0 += (i as f64) * c as f64;
                } else {
                    n1 += c as f64;
                    s1 += (i as f64) * c as f64;
                }
            }
            let var =
                if n0 == 0.0 || n1 == 0.0 { 0.0 } else { (n0 / total) * (n1 / total) * (s0 / n0 - s1 / n1).powi(2) };
            if var > best.1 {
                best = (t as u8, var);
            }
        }
        best.0
    }

    #[test]
    fn two_spikes_pick_lower_spike() {
        let mut h = [0u64; 256];
        h[10] = 50;
        h[200] = 50;
        assert_eq!(brute_force(&h), 10);
        assert_eq!(otsu_threshold(&h).unwrap(), 10);
    }

    #[test]
    fn single_bin_returns_its_index() {
        let mut h = [0u64; 256];
        h[0] = 7;
        // σ² is identically zero, so the smallest maximizer is bin 0
        assert_eq!(otsu_threshold(&h).unwrap(), 0);
        let mut h = [0u64; 256];
        h[77] = 3;
        assert_eq!(otsu_threshold(&h).unwrap(), brute_force(&h));
    }

    #[test]
    fn two_gaussians_split_between_modes() {
        let mut h = [0u64; 256];
        for (i, v) in h.iter_mut().enumerate() {
            let x = i as f64;
            let g = |mu: f64| (-(x - mu).powi(2) / (2.0 * 15.0 * 15.0)).exp();
            *v = (10_000.0 * (g(60.0) + g(190.0))).round() as u64;
        }
        let t = otsu_threshold(&h).unwrap();
        assert_eq!(t, brute_force(&h));
        assert!(t > 60 && t < 190, "threshold {t}");
    }

    #[test]
    fn empty_histogram_errors() {
        assert!(matches!(otsu_threshold(&[0; 256]), Err(DatasetError::EmptyHistogram)));
    }

    proptest! {
        #[test]
        fn matches_brute_force(bins in proptest::collection::vec(0u64..50, 256), spike in 0usize..256) {
            let mut h = [0u64; 256];
            h.copy_from_slice(&bins);
            h[spike] += 1;
            prop_assert_eq!(otsu_threshold(&h).unwrap(), brute_force(&h));
        }
    }

    #[test]
    fn uniform_images_have_no_tissue() {
        for v in [1.0, 0.0, 0.5] {
            let img = ImageTensor::filled(3, 4, 4, v).unwrap();
            let m = tissue_mask(&img);
            assert_eq!(m.tissue_fraction, 0.0);
            assert!(m.mask.iter().all(|&b| !b));
            assert_eq!(m.threshold, None);
        }
    }

    #[test]
    fn half_black_half_white_is_half_tissue() {
        let (h, w) = (6, 8);
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in w / 2..w {
                    data[(c * h + y) * w + x] = 1.0;
                }
            }
        }
        let img = ImageTensor::new(3, h, w, data).unwrap();
        let m = tissue_mask(&img);
        let direct = (0..h * w).filter(|i| i % w < w / 2).count() as f64 / (h * w) as f64;
        assert_eq!(m.tissue_fraction, direct);
        assert_eq!(m.tissue_fraction, 0.5);
        assert!(m.at(0, 0) && !m.at(0, w - 1));
    }

    #[test]
    fn gray_is_unweighted_mean() {
        let img = ImageTensor::new(3, 1, 1, vec![0.0, 0.3, 0.9]).unwrap();
        assert_eq!(gray_levels(&img), vec![102]);
    }
}
