//! Windowed SSIM (11x11 Gaussian, sigma 1.5) over the valid region, with an
//! analytic gradient w.r.t. the predicted image for the D-SSIM loss term.

use crate::error::{Error, Result};
use crate::img::{Image, ImageRgb};

pub const WINDOW: usize = 11;
const RADIUS: usize = WINDOW / 2;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
const C1: f64 = K1 * K1;
const C2: f64 = K2 * K2;

fn kernel() -> [f64; WINDOW] {
    let sigma = 1.5f64;
    let mut k = [0.0; WINDOW];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - RADIUS as f64;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-region blur: output is (w-2r) x (h-2r).
fn blur_valid(src: &Image) -> Image {
    let k = kernel();
    let (w, h) = (src.width(), src.height());
    let wo = w - 2 * RADIUS;
    let mut rows = Image::zeros(wo, h);
    for v in 0..h {
        for u in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * src.at(u + i, v);
            }
            *rows.at_mut(u, v) = acc;
        }
    }
    let ho = h - 2 * RADIUS;
    let mut out = Image::zeros(wo, ho);
    for v in 0..ho {
        for u in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * rows.at(u, v + i);
            }
            *out.at_mut(u, v) = acc;
        }
    }
    out
}

/// Adjoint of [`blur_valid`]: scatter valid-region gradients back to the
/// full image.
fn blur_adjoint(d: &Image, w: usize, h: usize) -> Image {
    let k = kernel();
    let (wo, ho) = (d.width(), d.height());
    let mut cols = Image::zeros(wo, h);
    for v in 0..ho {
        for u in 0..wo {
            let g = d.at(u, v);
            for (i, kv) in k.iter().enumerate() {
                *cols.at_mut(u, v + i) += kv * g;
            }
        }
    }
    let mut out = Image::zeros(w, h);
    for v in 0..h {
        for u in 0..wo {
            let g = cols.at(u, v);
            for (i, kv) in k.iter().enumerate() {
                *out.at_mut(u + i, v) += kv * g;
            }
        }
    }
    out
}

fn check_dims(pred: &ImageRgb, target: &ImageRgb) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::DimensionMismatch {
            expected: target.shape(),
            got: pred.shape(),
        });
    }
    if pred.width() < WINDOW || pred.height() < WINDOW {
        return Err(Error::DimensionMismatch {
            expected: (WINDOW, WINDOW),
            got: pred.shape(),
        });
    }
    Ok(())
}

fn channel(img: &ImageRgb, c: usize) -> Image {
    let mut out = Image::zeros(img.width(), img.height());
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = img.data()[3 * i + c];
    }
    out
}

struct ChannelSsim {
    mean: f64,
    // Retained maps for the backward pass.
    mu_x: Image,
    mu_y: Image,
    sig_x: Image,
    sig_y: Image,
    sig_xy: Image,
}

fn ssim_channel(x: &Image, y: &Image) -> ChannelSsim {
    let mu_x = blur_valid(x);
    let mu_y = blur_valid(y);
    let mut x2 = x.clone();
    for (v, s) in x2.data_mut().iter_mut().zip(x.data()) {
        *v = s * s;
    }
    let mut y2 = y.clone();
    for (v, s) in y2.data_mut().iter_mut().zip(y.data()) {
        *v = s * s;
    }
    let mut xy = x.clone();
    for (v, s) in xy.data_mut().iter_mut().zip(y.data()) {
        *v *= s;
    }
    let e_x2 = blur_valid(&x2);
    let e_y2 = blur_valid(&y2);
    let e_xy = blur_valid(&xy);
    let (wo, ho) = (mu_x.width(), mu_x.height());
    let mut sig_x = Image::zeros(wo, ho);
    let mut sig_y = Image::zeros(wo, ho);
    let mut sig_xy = Image::zeros(wo, ho);
    let mut sum = 0.0;
    for i in 0..wo * ho {
        let (mx, my) = (mu_x.data()[i], mu_y.data()[i]);
        let sx = e_x2.data()[i] - mx * mx;
        let sy = e_y2.data()[i] - my * my;
        let sxy = e_xy.data()[i] - mx * my;
        sig_x.data_mut()[i] = sx;
        sig_y.data_mut()[i] = sy;
        sig_xy.data_mut()[i] = sxy;
        let a1 = 2.0 * mx * my + C1;
        let a2 = 2.0 * sxy + C2;
        let b1 = mx * mx + my * my + C1;
        let b2 = sx + sy + C2;
        sum += (a1 * a2) / (b1 * b2);
    }
    ChannelSsim {
        mean: sum / (wo * ho) as f64,
        mu_x,
        mu_y,
        sig_x,
        sig_y,
        sig_xy,
    }
}

/// Mean SSIM over the three channels and all valid window positions.
pub fn ssim_index(pred: &ImageRgb, target: &ImageRgb) -> Result<f64> {
    check_dims(pred, target)?;
    let mut total = 0.0;
    for c in 0..3 {
        total += ssim_channel(&channel(pred, c), &channel(target, c)).mean;
    }
    Ok(total / 3.0)
}

/// SSIM index plus `d_upstream * d(ssim)/d(pred)`.
pub fn ssim_with_gradient(
    pred: &ImageRgb,
    target: &ImageRgb,
    d_upstream: f64,
) -> Result<(f64, ImageRgb)> {
    check_dims(pred, target)?;
    let (w, h) = (pred.width(), pred.height());
    let mut grad = ImageRgb::zeros(w, h);
    let mut total = 0.0;
    for c in 0..3 {
        let x = channel(pred, c);
        let y = channel(target, c);
        let s = ssim_channel(&x, &y);
        total += s.mean;
        let (wo, ho) = (s.mu_x.width(), s.mu_x.height());
        let d_s = d_upstream / (3.0 * (wo * ho) as f64);
        // Per-valid-pixel gradients w.r.t. the filtered statistics.
        let mut d_mu = Image::zeros(wo, ho);
        let mut d_ex2 = Image::zeros(wo, ho);
        let mut d_exy = Image::zeros(wo, ho);
        for i in 0..wo * ho {
            let mx = s.mu_x.data()[i];
            let my = s.mu_y.data()[i];
            let sx = s.sig_x.data()[i];
            let sy = s.sig_y.data()[i];
            let sxy = s.sig_xy.data()[i];
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * sxy + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = sx + sy + C2;
            let bb = b1 * b2;
            let ssim = a1 * a2 / bb;
            let d_a1 = d_s * a2 / bb;
            let d_a2 = d_s * a1 / bb;
            let d_b1 = -d_s * ssim / b1;
            let d_b2 = -d_s * ssim / b2;
            let d_sxy = 2.0 * d_a2;
            let d_sx = d_b2;
            // sigma_x² = E[x²] - mu_x²; sigma_xy = E[xy] - mu_x mu_y.
            let d_mux = 2.0 * my * d_a1 + 2.0 * mx * d_b1 - 2.0 * mx * d_sx - my * d_sxy;
            d_mu.data_mut()[i] = d_mux;
            d_ex2.data_mut()[i] = d_sx;
            d_exy.data_mut()[i] = d_sxy;
        }
        let back_mu = blur_adjoint(&d_mu, w, h);
        let back_ex2 = blur_adjoint(&d_ex2, w, h);
        let back_exy = blur_adjoint(&d_exy, w, h);
        for i in 0..w * h {
            let g = back_mu.data()[i]
                + 2.0 * x.data()[i] * back_ex2.data()[i]
                + y.data()[i] * back_exy.data()[i];
            grad.data_mut()[3 * i + c] += g;
        }
    }
    Ok((total / 3.0, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> ImageRgb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageRgb::zeros(w, h);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn identical_images_score_one() {
        let img = random_image(24, 20, 1);
        let s = ssim_index(&img, &img).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "ssim {s}");
    }

    /// Naive double-loop SSIM over every valid window position.
    fn oracle_ssim(pred: &ImageRgb, target: &ImageRgb) -> f64 {
        let k = kernel();
        let (w, h) = (pred.width(), pred.height());
        let mut total = 0.0;
        let mut count = 0usize;
        for c in 0..3 {
            for v0 in 0..h - 2 * RADIUS {
                for u0 in 0..w - 2 * RADIUS {
                    let (mut mx, mut my) = (0.0, 0.0);
                    let (mut ex2, mut ey2, mut exy) = (0.0, 0.0, 0.0);
                    for dv in 0..WINDOW {
                        for du in 0..WINDOW {
                            let wgt = k[du] * k[dv];
                            let a = pred.at(u0 + du, v0 + dv)[c];
                            let b = target.at(u0 + du, v0 + dv)[c];
                            mx += wgt * a;
                            my += wgt * b;
                            ex2 += wgt * a * a;
                            ey2 += wgt * b * b;
                            exy += wgt * a * b;
                        }
                    }
                    let sx = ex2 - mx * mx;
                    let sy = ey2 - my * my;
                    let sxy = exy - mx * my;
                    total += ((2.0 * mx * my + C1) * (2.0 * sxy + C2))
                        / ((mx * mx + my * my + C1) * (sx + sy + C2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn matches_naive_windowed_oracle() {
        let a = random_image(26, 22, 3);
        let b = random_image(26, 22, 4);
        let fast = ssim_index(&a, &b).unwrap();
        let slow = oracle_ssim(&a, &b);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut pred = random_image(16, 14, 7);
        let target = random_image(16, 14, 8);
        let (_, grad) = ssim_with_gradient(&pred, &target, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = 1e-5;
        for _ in 0..40 {
            let i = rng.gen_range(0..pred.data().len());
            let orig = pred.data()[i];
            pred.data_mut()[i] = orig + h;
            let lp = ssim_index(&pred, &target).unwrap();
            pred.data_mut()[i] = orig - h;
            let lm = ssim_index(&pred, &target).unwrap();
            pred.data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let a = grad.data()[i];
            assert!(
                (a - fd).abs() < 1e-6 * a.abs().max(fd.abs()).max(1.0),
                "param {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn too_small_image_is_rejected() {
        let a = random_image(8, 8, 1);
        assert!(matches!(
            ssim_index(&a, &a),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
