//! Image and depth quality metrics for run reports.

use crate::img::{Image, ImageRgb};
use crate::ingest::DepthSample;

/// Peak signal-to-noise ratio on [0,1] images, capped at 99 dB.
pub fn psnr(pred: &ImageRgb, target: &ImageRgb) -> f64 {
    assert_eq!(pred.shape(), target.shape());
    let mse: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.data().len() as f64;
    if mse <= 0.0 {
        return 99.0;
    }
    (10.0 * (1.0 / mse).log10()).min(99.0)
}

/// Depth MAE and RMSE over sparse samples whose silhouette passes the
/// filter threshold; NaN when no sample qualifies.
pub fn depth_mae_rmse(
    depth: &Image,
    samples: &[DepthSample],
    silhouette: &Image,
    s_filter: f64,
) -> (f64, f64) {
    let mut abs_sum = 0.0;
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for s in samples {
        if silhouette.at(s.u, s.v) >= s_filter {
            let e = depth.at(s.u, s.v) - s.depth;
            abs_sum += e.abs();
            sq_sum += e * e;
            count += 1;
        }
    }
    if count == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (abs_sum / count as f64, (sq_sum / count as f64).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn identical_images_hit_the_cap() {
        let img = ImageRgb::zeros(8, 8);
        assert_eq!(psnr(&img, &img), 99.0);
    }

    #[test]
    fn psnr_formula() {
        // MSE = 0.01 -> 20 dB.
        let a = ImageRgb::zeros(10, 10);
        let mut b = ImageRgb::zeros(10, 10);
        b.data_mut().iter_mut().for_each(|v| *v = 0.1);
        assert_abs_diff_eq!(psnr(&a, &b), 20.0, epsilon = 1e-12);
    }

    #[test]
    fn uniform_depth_offset() {
        let mut depth = Image::zeros(8, 8);
        let sil = Image::filled(8, 8, 1.0);
        let samples: Vec<DepthSample> = (0..5)
            .map(|i| DepthSample {
                u: i,
                v: i,
                depth: 3.0,
            })
            .collect();
        for s in &samples {
            *depth.at_mut(s.u, s.v) = 3.1;
        }
        let (mae, rmse) = depth_mae_rmse(&depth, &samples, &sil, 0.5);
        assert_abs_diff_eq!(mae, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(rmse, 0.1, epsilon = 1e-12);
    }
}
