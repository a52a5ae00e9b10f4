//! Kernel bank management and unsupervised dictionary learning: iterative
//! shrinkage-thresholding (ISTA) encoding alternated with projected gradient
//! updates that keep every kernel at unit ℓ2 norm.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::storage::{self, ChannelStats};
use crate::tensor::{correlate, kernel_grad, transposed_convolve, ConvGeometry, Tensor4};
use crate::threshold::{threshold_soft, ThresholdSpec};

const INIT_STD: f64 = 0.1;

/// Training provenance and the input normalization the dictionary expects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DictMeta {
    /// Sparsity weight used in each training epoch.
    pub lambda_schedule: Vec<f64>,
    pub eta: f64,
    pub seed: u64,
    /// Per-channel statistics inputs are normalized with before encoding.
    pub normalization: ChannelStats,
    /// Training-set reconstruction MSE per epoch, codes re-inferred at the
    /// initial lambda.
    pub epoch_loss: Vec<f64>,
}

impl DictMeta {
    pub fn untrained(channels: usize) -> Self {
        DictMeta {
            lambda_schedule: Vec::new(),
            eta: 0.0,
            seed: 0,
            normalization: ChannelStats::identity(channels),
            epoch_loss: Vec::new(),
        }
    }
}

/// Bank of `M` convolutional kernels with its geometry and training metadata.
/// Kernels are unit-norm after construction and after every learning step.
#[derive(Debug, Clone)]
pub struct Dictionary {
    pub kernels: Tensor4,
    pub geom: ConvGeometry,
    pub meta: DictMeta,
}

impl Dictionary {
    /// Wraps an existing kernel bank, normalizing it.
    pub fn from_kernels(kernels: Tensor4, geom: ConvGeometry) -> Result<Self> {
        let channels = kernels.dims()[1];
        let dict = Dictionary {
            kernels,
            geom,
            meta: DictMeta::untrained(channels),
        };
        normalize_kernels(dict)
    }

    /// Gaussian-initialized unit-norm random bank.
    pub fn random(
        features: usize,
        channels: usize,
        geom: ConvGeometry,
        seed: u64,
    ) -> Result<Self> {
        if features == 0 {
            return Err(Error::Config("dictionary needs at least one kernel".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n = features * channels * geom.kernel_h * geom.kernel_w;
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let kernels = Tensor4::from_vec(
            [features, channels, geom.kernel_h, geom.kernel_w],
            data,
        )?;
        let mut dict = Self::from_kernels(kernels, geom)?;
        dict.meta.seed = seed;
        Ok(dict)
    }

    pub fn features(&self) -> usize {
        self.kernels.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.kernels.dims()[1]
    }

    /// ℓ2 norm of each kernel.
    pub fn kernel_norms(&self) -> Vec<f64> {
        let [m, c, kh, kw] = self.kernels.dims();
        let per = c * kh * kw;
        (0..m)
            .map(|i| {
                self.kernels.data()[i * per..(i + 1) * per]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }

    pub fn code_dims(&self, img_h: usize, img_w: usize) -> (usize, usize) {
        self.geom.code_dims(img_h, img_w)
    }

    /// Content hash of the kernel payload as stored on disk.
    pub fn fingerprint(&self) -> String {
        storage::fingerprint(&self.kernels)
    }

    /// Writes the kernel tensor to `path` and a JSON sidecar next to it
    /// (same stem, `.json` extension).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        storage::write_tensor(path, &self.kernels)?;
        let sidecar = DictSidecar {
            geom: self.geom,
            meta: self.meta.clone(),
        };
        storage::write_json(path.with_extension("json"), &sidecar)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let kernels = storage::read_tensor(path)?;
        let sidecar: DictSidecar = storage::read_json(path.with_extension("json"))?;
        Ok(Dictionary {
            kernels,
            geom: sidecar.geom,
            meta: sidecar.meta,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct DictSidecar {
    geom: ConvGeometry,
    meta: DictMeta,
}

/// Dictionary learning schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DictLearnConfig {
    pub epochs: usize,
    /// ISTA iterations per batch.
    pub ista_steps: usize,
    pub lambda0: f64,
    /// Multiplier applied to lambda after each epoch.
    pub increase_factor: f64,
    /// Step size of the projected gradient kernel update.
    pub eta: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl DictLearnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ista_steps == 0 {
            return Err(Error::Config("ista_steps must be positive".into()));
        }
        if self.lambda0 <= 0.0 {
            return Err(Error::Config("lambda0 must be positive".into()));
        }
        if self.increase_factor < 1.0 {
            return Err(Error::Config("increase_factor must be >= 1".into()));
        }
        if self.eta <= 0.0 {
            return Err(Error::Config("eta must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Divides every kernel by its ℓ2 norm. Idempotent; zero-norm kernels are an
/// error naming the kernel index.
pub fn normalize_kernels(mut dict: Dictionary) -> Result<Dictionary> {
    let [m, c, kh, kw] = dict.kernels.dims();
    let per = c * kh * kw;
    let data = dict.kernels.data_mut();
    for i in 0..m {
        let slice = &mut data[i * per..(i + 1) * per];
        let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::ZeroNormKernel { index: i });
        }
        for v in slice {
            *v /= norm;
        }
    }
    Ok(dict)
}

/// Largest eigenvalue of `a -> correlate(transposed_convolve(a))` estimated by
/// power iteration (20 rounds, deterministic start).
pub fn lipschitz_estimate(dict: &Dictionary, img_h: usize, img_w: usize) -> Result<f64> {
    let (ch, cw) = dict.code_dims(img_h, img_w);
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9);
    let n = dict.features() * ch * cw;
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut v = Tensor4::from_vec([1, dict.features(), ch, cw], data)?;
    let mut lambda_max = 1.0;
    for _ in 0..20 {
        let recon = transposed_convolve(&v, &dict.kernels, &dict.geom, img_h, img_w)?;
        let next = correlate(&recon, &dict.kernels, &dict.geom)?;
        lambda_max = next.norm() / v.norm().max(1e-300);
        if lambda_max < 1e-12 {
            return Ok(1e-12);
        }
        v = next;
        let n = v.norm();
        v.scale(1.0 / n);
    }
    Ok(lambda_max)
}

/// `n` ISTA iterations from zero codes:
/// `a <- soft(a + step * correlate(x - reconstruct(a)), step * lambda)`.
pub fn ista_encode(
    x: &Tensor4,
    dict: &Dictionary,
    lambda: f64,
    n: usize,
    step: f64,
) -> Result<Tensor4> {
    if step <= 0.0 {
        return Err(Error::Config("ista step must be positive".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Config("lambda must be >= 0".into()));
    }
    let [batch, _, h, w] = x.dims();
    let (ch, cw) = dict.code_dims(h, w);
    let mut a = Tensor4::zeros([batch, dict.features(), ch, cw]);
    let spec = ThresholdSpec::soft(step * lambda).with_nonneg(false);
    for iter in 0..n {
        let recon = transposed_convolve(&a, &dict.kernels, &dict.geom, h, w)?;
        let residual = x.zip_map(&recon, |xi, ri| xi - ri)?;
        let grad = correlate(&residual, &dict.kernels, &dict.geom)?;
        a.add_scaled(&grad, step)?;
        for v in a.data_mut() {
            *v = threshold_soft(*v, &spec);
        }
        if !a.is_finite() {
            return Err(Error::NonFinite {
                op: "ista_encode",
                iteration: iter,
            });
        }
    }
    Ok(a)
}

/// One projected gradient step on the reconstruction loss
/// `||x - reconstruct(codes)||^2` followed by renormalization.
pub fn dict_update(dict: &Dictionary, x: &Tensor4, codes: &Tensor4, eta: f64) -> Result<Dictionary> {
    let [_, _, h, w] = x.dims();
    let recon = transposed_convolve(codes, &dict.kernels, &dict.geom, h, w)?;
    let residual = x.zip_map(&recon, |xi, ri| xi - ri)?;
    // d/dK ||x - K (*) a||^2 = -2 * <residual, codes> correlated over windows.
    let grad = kernel_grad(&residual, codes, &dict.geom, dict.channels())?;
    let mut kernels = dict.kernels.clone();
    kernels.add_scaled(&grad, 2.0 * eta)?;
    let updated = Dictionary {
        kernels,
        geom: dict.geom,
        meta: dict.meta.clone(),
    };
    normalize_kernels(updated)
}

/// Raw (un-normalized) gradient of the reconstruction loss with respect to
/// the kernels; exposed for verification against finite differences.
pub fn reconstruction_loss_grad(dict: &Dictionary, x: &Tensor4, codes: &Tensor4) -> Result<Tensor4> {
    let [_, _, h, w] = x.dims();
    let recon = transposed_convolve(codes, &dict.kernels, &dict.geom, h, w)?;
    let residual = x.zip_map(&recon, |xi, ri| xi - ri)?;
    let mut grad = kernel_grad(&residual, codes, &dict.geom, dict.channels())?;
    grad.scale(-2.0);
    Ok(grad)
}

/// Reconstruction MSE of the dataset with codes inferred by ISTA at `lambda`.
pub fn reconstruction_mse(
    dict: &Dictionary,
    batches: &[Tensor4],
    lambda: f64,
    ista_steps: usize,
    step: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let codes = ista_encode(batch, dict, lambda, ista_steps, step)?;
        let [_, _, h, w] = batch.dims();
        let recon = transposed_convolve(&codes, &dict.kernels, &dict.geom, h, w)?;
        total += batch
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        count += batch.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Learns a dictionary from raw `[1, C, H, W]` images.
///
/// Computes dataset-global per-channel normalization, then alternates `n`
/// ISTA steps and one projected kernel update per batch for `epochs` epochs,
/// multiplying lambda by `increase_factor` after each epoch. The ISTA step
/// size is `1/L` with `L` re-estimated by power iteration at the start of
/// each epoch.
pub fn learn_dictionary(
    dataset: &[Tensor4],
    features: usize,
    geom: ConvGeometry,
    config: &DictLearnConfig,
) -> Result<Dictionary> {
    config.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::Config("dataset is empty".into()))?;
    let [_, channels, h, w] = first.dims();
    let stats = ChannelStats::compute(dataset)?;
    let normalized: Vec<Tensor4> = dataset
        .iter()
        .map(|t| stats.normalize(t))
        .collect::<Result<_>>()?;

    let mut dict = Dictionary::random(features, channels, geom, config.seed)?;
    dict.meta.eta = config.eta;
    dict.meta.seed = config.seed;
    dict.meta.normalization = stats;

    let mut order: Vec<usize> = (0..normalized.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
    let mut lambda = config.lambda0;
    let eval_batches = make_batches(&normalized, &order, config.batch_size)?;

    for _epoch in 0..config.epochs {
        dict.meta.lambda_schedule.push(lambda);
        shuffle(&mut order, &mut rng);
        let step = 1.0 / (lipschitz_estimate(&dict, h, w)? * 1.01).max(1e-12);
        for batch in make_batches(&normalized, &order, config.batch_size)? {
            let codes = ista_encode(&batch, &dict, lambda, config.ista_steps, step)?;
            dict = dict_update(&dict, &batch, &codes, config.eta)?;
        }
        let eval_step = 1.0 / (lipschitz_estimate(&dict, h, w)? * 1.01).max(1e-12);
        dict.meta.epoch_loss.push(reconstruction_mse(
            &dict,
            &eval_batches,
            config.lambda0,
            config.ista_steps,
            eval_step,
        )?);
        lambda *= config.increase_factor;
    }
    Ok(dict)
}

fn make_batches(images: &[Tensor4], order: &[usize], batch_size: usize) -> Result<Vec<Tensor4>> {
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&Tensor4> = chunk.iter().map(|&i| &images[i]).collect();
            Tensor4::stack_batches(&refs)
        })
        .collect()
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(k: usize, s: usize) -> ConvGeometry {
        ConvGeometry::same(k, k, s, s).unwrap()
    }

    fn random_images(seed: u64, count: usize, dims: [usize; 4]) -> Vec<Tensor4> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let n: usize = dims.iter().product();
                Tensor4::from_vec(dims, (0..n).map(|_| rng.random_range(0.0..1.0)).collect())
                    .unwrap()
            })
            .collect()
    }

    #[test]
    fn normalize_is_idempotent_and_scales_correctly() {
        let kernels = Tensor4::filled([1, 1, 2, 2], 2.0);
        let dict = Dictionary::from_kernels(kernels, geom(2, 2)).unwrap();
        // All 2s with 4 elements: norm 4, entries become 0.5.
        assert!(dict.kernels.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let again = normalize_kernels(dict.clone()).unwrap();
        assert_eq!(dict.kernels, again.kernels);
    }

    #[test]
    fn normalize_random_bank_gives_unit_norms() {
        let dict = Dictionary::random(5, 2, geom(3, 1), 7).unwrap();
        for n in dict.kernel_norms() {
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn normalize_rejects_zero_kernel_with_index() {
        let mut kernels = Tensor4::filled([3, 1, 2, 2], 1.0);
        for y in 0..2 {
            for x in 0..2 {
                *kernels.at_mut(1, 0, y, x) = 0.0;
            }
        }
        let err = Dictionary::from_kernels(kernels, geom(2, 2)).unwrap_err();
        match err {
            Error::ZeroNormKernel { index } => assert_eq!(index, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn ista_zero_input_gives_zero_codes() {
        let dict = Dictionary::random(3, 1, geom(3, 2), 1).unwrap();
        let x = Tensor4::zeros([1, 1, 6, 6]);
        let codes = ista_encode(&x, &dict, 0.1, 5, 0.5).unwrap();
        assert!(codes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ista_with_large_lambda_shrinks_everything_after_one_step() {
        let dict = Dictionary::random(3, 1, geom(3, 2), 2).unwrap();
        let images = random_images(3, 1, [1, 1, 6, 6]);
        let drive = correlate(&images[0], &dict.kernels, &dict.geom).unwrap();
        let lambda = drive.max_abs() * 1.01;
        let codes = ista_encode(&images[0], &dict, lambda, 1, 0.5).unwrap();
        assert!(codes.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ista_matches_closed_form_for_orthonormal_one_pixel_bank() {
        // Two 1x1 kernels on two channels forming an orthonormal basis: the
        // lasso solution is the soft-thresholded projection.
        let mut kernels = Tensor4::zeros([2, 2, 1, 1]);
        *kernels.at_mut(0, 0, 0, 0) = 1.0;
        *kernels.at_mut(1, 1, 0, 0) = 1.0;
        let dict = Dictionary::from_kernels(kernels, geom(1, 1)).unwrap();
        let x = Tensor4::from_vec([1, 2, 1, 1], vec![0.9, -0.3]).unwrap();
        let lambda = 0.2;
        let codes = ista_encode(&x, &dict, lambda, 200, 1.0).unwrap();
        assert!((codes.at(0, 0, 0, 0) - 0.7).abs() < 1e-10);
        assert!((codes.at(0, 1, 0, 0) + 0.1).abs() < 1e-10);
    }

    #[test]
    fn dict_update_with_zero_residual_or_zero_eta_changes_nothing() {
        let dict = Dictionary::random(2, 1, geom(3, 3), 4).unwrap();
        // Codes with a perfect reconstruction: x built from the dictionary.
        let mut codes = Tensor4::zeros([1, 2, 2, 2]);
        *codes.at_mut(0, 0, 0, 1) = 1.25;
        *codes.at_mut(0, 1, 1, 0) = -0.4;
        let x = transposed_convolve(&codes, &dict.kernels, &dict.geom, 6, 6).unwrap();
        let updated = dict_update(&dict, &x, &codes, 0.05).unwrap();
        for (a, b) in updated.kernels.data().iter().zip(dict.kernels.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let images = random_images(5, 1, [1, 1, 6, 6]);
        let frozen = dict_update(&dict, &images[0], &codes, 0.0).unwrap();
        for (a, b) in frozen.kernels.data().iter().zip(dict.kernels.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_gradient_matches_central_finite_differences() {
        let dict = Dictionary::random(2, 1, geom(3, 2), 6).unwrap();
        let images = random_images(7, 1, [1, 1, 5, 5]);
        let x = &images[0];
        let (ch, cw) = dict.code_dims(5, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let codes = Tensor4::from_vec(
            [1, 2, ch, cw],
            (0..2 * ch * cw).map(|_| rng.random_range(-0.5..0.5)).collect(),
        )
        .unwrap();
        let analytic = reconstruction_loss_grad(&dict, x, &codes).unwrap();
        let loss = |kernels: &Tensor4| -> f64 {
            let recon = transposed_convolve(&codes, kernels, &dict.geom, 5, 5).unwrap();
            x.data()
                .iter()
                .zip(recon.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let h = 1e-5;
        for i in 0..dict.kernels.len() {
            let mut plus = dict.kernels.clone();
            plus.data_mut()[i] += h;
            let mut minus = dict.kernels.clone();
            minus.data_mut()[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let got = analytic.data()[i];
            let denom = fd.abs().max(got.abs()).max(1e-6);
            assert!(
                ((got - fd) / denom).abs() < 1e-4,
                "weight {i}: analytic {got} vs fd {fd}"
            );
        }
    }

    #[test]
    fn zero_epochs_returns_normalized_random_dictionary() {
        let config = DictLearnConfig {
            epochs: 0,
            ista_steps: 5,
            lambda0: 0.1,
            increase_factor: 1.0,
            eta: 0.01,
            batch_size: 4,
            seed: 42,
        };
        let images = random_images(9, 6, [1, 1, 6, 6]);
        let dict = learn_dictionary(&images, 4, geom(3, 2), &config).unwrap();
        let reference = Dictionary::random(4, 1, geom(3, 2), 42).unwrap();
        assert_eq!(dict.kernels, reference.kernels);
        for n in dict.kernel_norms() {
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!(dict.meta.lambda_schedule.is_empty());
    }

    #[test]
    fn learning_is_deterministic_given_seed() {
        let config = DictLearnConfig {
            epochs: 2,
            ista_steps: 5,
            lambda0: 0.05,
            increase_factor: 1.1,
            eta: 0.05,
            batch_size: 3,
            seed: 11,
        };
        let images = random_images(10, 7, [1, 1, 6, 6]);
        let a = learn_dictionary(&images, 3, geom(3, 2), &config).unwrap();
        let b = learn_dictionary(&images, 3, geom(3, 2), &config).unwrap();
        assert_eq!(a.kernels, b.kernels);
        assert_eq!(a.meta.epoch_loss, b.meta.epoch_loss);
        assert_eq!(a.meta.lambda_schedule, vec![0.05, 0.05 * 1.1]);
    }

    #[test]
    fn separable_toy_problem_descends_monotonically() {
        // Four orthogonal kernels; every image is one kernel placed at the
        // origin with stride = kernel size, so codes separate exactly.
        let g = geom(2, 2);
        let mut truth = Tensor4::zeros([4, 1, 2, 2]);
        *truth.at_mut(0, 0, 0, 0) = 1.0;
        *truth.at_mut(1, 0, 0, 1) = 1.0;
        *truth.at_mut(2, 0, 1, 0) = 1.0;
        *truth.at_mut(3, 0, 1, 1) = 1.0;
        let mut images = Vec::new();
        for rep in 0..3 {
            for i in 0..4 {
                let mut codes = Tensor4::zeros([1, 4, 2, 2]);
                *codes.at_mut(0, i, 0, 0) = 1.0 + 0.1 * rep as f64;
                let img = transposed_convolve(&codes, &truth, &g, 4, 4).unwrap();
                // Shift into [0, 1] so the normalization stats are sensible.
                images.push(img.map(|v| 0.2 + 0.5 * v));
            }
        }
        let config = DictLearnConfig {
            epochs: 6,
            ista_steps: 30,
            lambda0: 0.02,
            increase_factor: 1.0,
            eta: 0.1,
            batch_size: 4,
            seed: 3,
        };
        let dict = learn_dictionary(&images, 4, g, &config).unwrap();
        let losses = &dict.meta.epoch_loss;
        assert_eq!(losses.len(), 6);
        for pair in losses.windows(2) {
            assert!(
                pair[1] <= pair[0] * 1.01,
                "loss increased: {} -> {}",
                pair[0],
                pair[1]
            );
        }
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn paper_scale_preset_is_accepted() {
        let config = DictLearnConfig {
            epochs: 1,
            ista_steps: 10,
            lambda0: 2.55,
            increase_factor: 1.0,
            eta: 0.01,
            batch_size: 16,
            seed: 0,
        };
        assert!(config.validate().is_ok());
        assert!(ConvGeometry::same(9, 9, 2, 2).is_ok());
    }

    #[test]
    fn save_load_round_trip_preserves_kernels_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let mut dict = Dictionary::random(3, 1, geom(3, 2), 5).unwrap();
        dict.kernels = dict.kernels.round_to_f32();
        dict.meta.lambda_schedule = vec![0.1, 0.2];
        dict.meta.eta = 0.01;
        let path = dir.path().join("dict.wtns");
        dict.save(&path).unwrap();
        let back = Dictionary::load(&path).unwrap();
        assert_eq!(back.kernels, dict.kernels);
        assert_eq!(back.geom, dict.geom);
        assert_eq!(back.meta.lambda_schedule, dict.meta.lambda_schedule);
        assert_eq!(back.fingerprint(), dict.fingerprint());
    }
}
