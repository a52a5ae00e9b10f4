//! Reconstruction quality metrics (MSE, PSNR, SSIM), sparsity counting, and
//! accumulated activation maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Default tolerance for counting nonzeros: hard thresholding produces exact
/// zeros, the tolerance guards float noise from the other operators.
pub const L0_TOLERANCE: f64 = 1e-8;

/// One tracked solver iteration. `psnr` is `f64::INFINITY` when `mse == 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRecord {
    pub iter: usize,
    pub mse: f64,
    pub l0: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub energy: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "iter,mse,l0,psnr,ssim,energy";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter, self.mse, self.l0, self.psnr, self.ssim, self.energy
        )
    }
}

/// Mean squared difference.
pub fn mse(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::shape(
            "mse",
            format!("dims {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    let n = a.len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Number of entries with `|value| > tol`.
pub fn l0_count(a: &Tensor4, tol: f64) -> usize {
    a.data().iter().filter(|v| v.abs() > tol).count()
}

/// Peak signal-to-noise ratio in dB for the given data range;
/// `f64::INFINITY` for identical inputs.
pub fn psnr(a: &Tensor4, b: &Tensor4, data_range: f64) -> Result<f64> {
    if data_range <= 0.0 {
        return Err(Error::Config("psnr data_range must be > 0".into()));
    }
    let e = mse(a, b)?;
    Ok(psnr_from_mse(e, data_range))
}

pub fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// Mean structural similarity over an 11x11 Gaussian window (sigma 1.5,
/// K1 = 0.01, K2 = 0.03), averaged across channels and batch entries. Windows
/// are evaluated at fully-interior positions only.
pub fn ssim(a: &Tensor4, b: &Tensor4, data_range: f64) -> Result<f64> {
    const WIN: usize = 11;
    const SIGMA: f64 = 1.5;
    const K1: f64 = 0.01;
    const K2: f64 = 0.03;

    if a.dims() != b.dims() {
        return Err(Error::shape(
            "ssim",
            format!("dims {:?} vs {:?}", a.dims(), b.dims()),
        ));
    }
    if data_range <= 0.0 {
        return Err(Error::Config("ssim data_range must be > 0".into()));
    }
    let [batch, chans, h, w] = a.dims();
    if h < WIN || w < WIN {
        return Err(Error::shape(
            "ssim",
            format!("image {h}x{w} smaller than the {WIN}x{WIN} window"),
        ));
    }

    // Normalized Gaussian window.
    let mut win = [0.0; WIN * WIN];
    let half = (WIN / 2) as isize;
    let mut sum = 0.0;
    for y in 0..WIN {
        for x in 0..WIN {
            let dy = (y as isize - half) as f64;
            let dx = (x as isize - half) as f64;
            let v = (-(dy * dy + dx * dx) / (2.0 * SIGMA * SIGMA)).exp();
            win[y * WIN + x] = v;
            sum += v;
        }
    }
    for v in &mut win {
        *v /= sum;
    }

    let c1 = (K1 * data_range) * (K1 * data_range);
    let c2 = (K2 * data_range) * (K2 * data_range);
    let mut total = 0.0;
    let mut count = 0usize;
    for bi in 0..batch {
        for c in 0..chans {
            for oy in 0..=h - WIN {
                for ox in 0..=w - WIN {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
                    for wy in 0..WIN {
                        for wx in 0..WIN {
                            let g = win[wy * WIN + wx];
                            let va = a.at(bi, c, oy + wy, ox + wx);
                            let vb = b.at(bi, c, oy + wy, ox + wx);
                            ma += g * va;
                            mb += g * vb;
                            saa += g * va * va;
                            sbb += g * vb * vb;
                            sab += g * va * vb;
                        }
                    }
                    let var_a = saa - ma * ma;
                    let var_b = sbb - mb * mb;
                    let cov = sab - ma * mb;
                    let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                    let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
                    total += num / den;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Per code-pixel count of active channels, shape `[B, 1, H', W']`.
///
/// Counts are raw; use [`normalize_maps_jointly`] to min-max scale a set of
/// maps to `[0, 1]` with shared extremes before rendering them side by side.
pub fn accumulated_activation_map(a: &Tensor4, tol: f64) -> Tensor4 {
    let [batch, m, h, w] = a.dims();
    let mut out = Tensor4::zeros([batch, 1, h, w]);
    for b in 0..batch {
        for c in 0..m {
            for y in 0..h {
                for x in 0..w {
                    if a.at(b, c, y, x).abs() > tol {
                        *out.at_mut(b, 0, y, x) += 1.0;
                    }
                }
            }
        }
    }
    out
}

/// Min-max normalizes all maps to `[0, 1]` using their joint extremes.
/// Degenerate (constant) collections map to all zeros.
pub fn normalize_maps_jointly(maps: &mut [&mut Tensor4]) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in maps.iter() {
        let (a, b) = m.min_max();
        lo = lo.min(a);
        hi = hi.max(b);
    }
    let span = hi - lo;
    for m in maps.iter_mut() {
        if span > 0.0 {
            for v in m.data_mut() {
                *v = (*v - lo) / span;
            }
        } else {
            for v in m.data_mut() {
                *v = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: [usize; 4]) -> Tensor4 {
        let n: usize = dims.iter().product();
        Tensor4::from_vec(dims, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let t = Tensor4::filled([1, 1, 3, 3], 0.4);
        assert_eq!(mse(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn mse_of_constant_offset() {
        let a = Tensor4::filled([1, 1, 4, 4], 0.5);
        let b = Tensor4::filled([1, 1, 4, 4], 0.4);
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-12);
    }

    #[test]
    fn mse_matches_straight_line_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let a = random_tensor(&mut rng, [2, 1, 5, 5]);
        let b = random_tensor(&mut rng, [2, 1, 5, 5]);
        let mut acc = 0.0;
        for (x, y) in a.data().iter().zip(b.data()) {
            acc += (x - y).powi(2);
        }
        acc /= a.len() as f64;
        assert!((mse(&a, &b).unwrap() - acc).abs() < 1e-15);
        assert!(mse(&a, &Tensor4::zeros([1, 1, 5, 5])).is_err());
    }

    #[test]
    fn l0_count_cases() {
        assert_eq!(l0_count(&Tensor4::zeros([1, 2, 2, 2]), L0_TOLERANCE), 0);
        let t = Tensor4::from_vec([1, 1, 1, 3], vec![0.0, 1e-12, 0.5]).unwrap();
        assert_eq!(l0_count(&t, 1e-8), 1);
        // Monotone non-increasing in the tolerance.
        assert!(l0_count(&t, 0.0) >= l0_count(&t, 1e-8));
        assert!(l0_count(&t, 1e-8) >= l0_count(&t, 0.6));
    }

    #[test]
    fn psnr_closed_form_values() {
        assert!((psnr_from_mse(0.01, 1.0) - 20.0).abs() < 1e-12);
        assert!(psnr_from_mse(0.0, 1.0).is_infinite());
        // Halving the mse adds about 3.0103 dB.
        let gain = psnr_from_mse(0.005, 1.0) - psnr_from_mse(0.01, 1.0);
        assert!((gain - 3.0103).abs() < 1e-4);
        // Strictly decreasing in mse.
        assert!(psnr_from_mse(0.02, 1.0) < psnr_from_mse(0.01, 1.0));
    }

    #[test]
    fn ssim_of_identical_images_is_exactly_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random_tensor(&mut rng, [1, 3, 16, 16]);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn ssim_detects_structural_mismatch_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = random_tensor(&mut rng, [1, 1, 16, 16]);
        let b = Tensor4::filled([1, 1, 16, 16], 0.5);
        let s_ab = ssim(&a, &b, 1.0).unwrap();
        assert!(s_ab < 1.0);
        assert!((-1.0..=1.0).contains(&s_ab));
        let s_ba = ssim(&b, &a, 1.0).unwrap();
        assert!((s_ab - s_ba).abs() < 1e-10);
    }

    #[test]
    fn ssim_rejects_images_smaller_than_window() {
        let a = Tensor4::zeros([1, 1, 8, 8]);
        assert!(ssim(&a, &a, 1.0).is_err());
    }

    #[test]
    fn activation_map_counts_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..10 {
            let dims = [2, 5, 4, 4];
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.3) {
                        rng.random_range(-1.0..1.0)
                    } else {
                        0.0
                    }
                })
                .collect();
            let a = Tensor4::from_vec(dims, data).unwrap();
            let map = accumulated_activation_map(&a, L0_TOLERANCE);
            for b in 0..2 {
                for y in 0..4 {
                    for x in 0..4 {
                        let mut count = 0.0;
                        for c in 0..5 {
                            if a.at(b, c, y, x).abs() > L0_TOLERANCE {
                                count += 1.0;
                            }
                        }
                        assert_eq!(map.at(b, 0, y, x), count);
                    }
                }
            }
        }
    }

    #[test]
    fn joint_normalization_of_constant_maps_is_all_zeros() {
        let mut a = Tensor4::filled([1, 1, 2, 2], 3.0);
        let mut b = Tensor4::filled([1, 1, 2, 2], 3.0);
        normalize_maps_jointly(&mut [&mut a, &mut b]);
        assert!(a.data().iter().chain(b.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn joint_normalization_shares_extremes() {
        let mut a = Tensor4::from_vec([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let mut b = Tensor4::from_vec([1, 1, 1, 2], vec![5.0, 2.0]).unwrap();
        normalize_maps_jointly(&mut [&mut a, &mut b]);
        assert_eq!(a.data(), &[0.0, 0.5]);
        assert_eq!(b.data(), &[1.0, 0.25]);
    }

    #[test]
    fn csv_row_format() {
        let rec = MetricsRecord {
            iter: 10,
            mse: 0.25,
            l0: 7,
            psnr: 6.0205999132796235,
            ssim: 0.5,
            energy: 1.5,
        };
        assert_eq!(MetricsRecord::CSV_HEADER, "iter,mse,l0,psnr,ssim,energy");
        assert!(rec.csv_row().starts_with("10,0.25,7,"));
    }
}
