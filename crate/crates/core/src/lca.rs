//! Discretized locally-competitive dynamics: membrane potentials integrate a
//! feedforward drive, leak, and lateral competition, and activations are read
//! out through a pluggable thresholding operator.
//!
//! One Euler step with step size `1/tau`:
//!
//! `u <- u + (1/tau) * (drive - lateral(a) + a - u)`,  `a <- T(u)`
//!
//! where `drive = correlate(x, kernels)` is precomputed once per solve and
//! `lateral(a)` is the code-space self-product, computed either through the
//! reconstruction (`Residual`) or a precomputed kernel Gram tensor (`Gram`).
//! Adding `a` back cancels the zero-lag self term of the lateral product
//! exactly for unit-norm kernels.

use serde::{Deserialize, Serialize};

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};
use crate::metrics::{l0_count, psnr_from_mse, ssim, MetricsRecord, L0_TOLERANCE};
use crate::storage::ChannelStats;
use crate::tensor::{correlate, gram_apply, kernel_gram, transposed_convolve, Tensor4};
use crate::threshold::{apply_threshold, ThresholdKind, ThresholdSpec};

/// Divergence guard: the solve aborts once `max |u|` exceeds this.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// How the lateral competition term is computed. Both paths are exactly
/// equivalent; `Gram` is kept for verification and small dictionaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InhibitionMode {
    Residual,
    Gram,
}

/// Solver configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LcaConfig {
    /// Sparsity weight reported in the energy; equals the threshold's
    /// sparsity parameter.
    pub lambda: f64,
    /// Time constant; the Euler step size is `1/tau`.
    pub tau: f64,
    pub n_iters: usize,
    pub threshold: ThresholdSpec,
    /// Trajectory sampling period (iterations 0 and `n_iters` are always
    /// recorded).
    pub track_every: usize,
    pub inhibition: InhibitionMode,
}

impl LcaConfig {
    pub fn new(threshold: ThresholdSpec, tau: f64, n_iters: usize) -> Self {
        LcaConfig {
            lambda: sparsity_weight(&threshold),
            tau,
            n_iters,
            threshold,
            track_every: 10,
            inhibition: InhibitionMode::Residual,
        }
    }

    pub fn with_track_every(mut self, every: usize) -> Self {
        self.track_every = every;
        self
    }

    pub fn with_inhibition(mut self, mode: InhibitionMode) -> Self {
        self.inhibition = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if self.track_every == 0 {
            return Err(Error::Config("track_every must be >= 1".into()));
        }
        self.threshold.validate()
    }
}

/// The threshold parameter that plays the role of the sparsity weight.
pub fn sparsity_weight(spec: &ThresholdSpec) -> f64 {
    match spec.kind {
        ThresholdKind::Half => spec.theta,
        _ => spec.lambda,
    }
}

/// Membrane potentials and their thresholded activations.
#[derive(Debug, Clone)]
pub struct LcaState {
    pub u: Tensor4,
    pub a: Tensor4,
    pub iter: usize,
}

/// Per-tracked-iteration metrics of one solve.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub records: Vec<MetricsRecord>,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(MetricsRecord::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    pub fn final_record(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }
}

/// Which sparsity penalty enters the energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnergyNorm {
    L0,
    L1,
}

/// The energy the solver descends: `||x - reconstruct(a)||^2 + lambda * pen(a)`
/// with `pen` an ℓ0 count or ℓ1 sum.
pub fn energy(
    x: &Tensor4,
    dict: &Dictionary,
    a: &Tensor4,
    lambda: f64,
    p: EnergyNorm,
) -> Result<f64> {
    let [_, _, h, w] = x.dims();
    let recon = transposed_convolve(a, &dict.kernels, &dict.geom, h, w)?;
    let fidelity: f64 = x
        .data()
        .iter()
        .zip(recon.data())
        .map(|(xv, rv)| (xv - rv) * (xv - rv))
        .sum();
    let penalty = match p {
        EnergyNorm::L0 => l0_count(a, L0_TOLERANCE) as f64,
        EnergyNorm::L1 => a.data().iter().map(|v| v.abs()).sum(),
    };
    Ok(fidelity + lambda * penalty)
}

fn energy_norm_for(kind: ThresholdKind) -> EnergyNorm {
    match kind {
        ThresholdKind::Soft => EnergyNorm::L1,
        _ => EnergyNorm::L0,
    }
}

/// Everything a step needs that is constant across iterations.
struct StepContext<'a> {
    dict: &'a Dictionary,
    config: &'a LcaConfig,
    drive: &'a Tensor4,
    img_h: usize,
    img_w: usize,
    gram: Option<Tensor4>,
    phi_norms: Option<Vec<f64>>,
}

impl<'a> StepContext<'a> {
    fn new(
        dict: &'a Dictionary,
        config: &'a LcaConfig,
        drive: &'a Tensor4,
        img_h: usize,
        img_w: usize,
    ) -> Self {
        let gram = match config.inhibition {
            InhibitionMode::Residual => None,
            InhibitionMode::Gram => Some(kernel_gram(&dict.kernels, &dict.geom)),
        };
        let phi_norms = match config.threshold.kind {
            ThresholdKind::Cel0 => Some(dict.kernel_norms()),
            _ => None,
        };
        StepContext {
            dict,
            config,
            drive,
            img_h,
            img_w,
            gram,
            phi_norms,
        }
    }

    fn lateral(&self, a: &Tensor4) -> Result<Tensor4> {
        match &self.gram {
            None => {
                let recon = transposed_convolve(
                    a,
                    &self.dict.kernels,
                    &self.dict.geom,
                    self.img_h,
                    self.img_w,
                )?;
                correlate(&recon, &self.dict.kernels, &self.dict.geom)
            }
            Some(gram) => gram_apply(
                gram,
                a,
                &self.dict.kernels,
                &self.dict.geom,
                self.img_h,
                self.img_w,
            ),
        }
    }

    fn step(&self, state: &LcaState) -> Result<LcaState> {
        let lateral = self.lateral(&state.a)?;
        let inv_tau = 1.0 / self.config.tau;
        let mut u = state.u.clone();
        {
            let ud = u.data_mut();
            let dd = self.drive.data();
            let ld = lateral.data();
            let ad = state.a.data();
            for i in 0..ud.len() {
                ud[i] += inv_tau * (dd[i] - ld[i] + ad[i] - ud[i]);
            }
        }
        let iter = state.iter + 1;
        let max_abs = u.max_abs();
        if !max_abs.is_finite() || max_abs > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                iteration: iter,
                max_abs,
            });
        }
        let a = apply_threshold(&u, &self.config.threshold, self.phi_norms.as_deref())?;
        Ok(LcaState { u, a, iter })
    }
}

/// One Euler update. `drive` must be `correlate(x, kernels)` for the solve's
/// input; `img_dims` are the input's spatial dims (needed to reproduce the
/// reconstruction boundary exactly).
pub fn lca_step(
    state: &LcaState,
    drive: &Tensor4,
    dict: &Dictionary,
    config: &LcaConfig,
    img_dims: (usize, usize),
) -> Result<LcaState> {
    let ctx = StepContext::new(dict, config, drive, img_dims.0, img_dims.1);
    ctx.step(state)
}

/// Runs `n_iters` steps from zeros (cold) or `init` (warm), tracking metrics
/// every `track_every` iterations plus iterations 0 and `n_iters`.
///
/// Trajectory MSE/PSNR/SSIM are computed on de-normalized reconstructions in
/// `[0, 1]` pixel space (data range 1) against the de-normalized input; SSIM
/// is `NaN` when the image is smaller than its 11x11 window. The energy is
/// evaluated in the normalized domain with the ℓ1 penalty for soft
/// thresholding and the ℓ0 count otherwise.
pub fn lca_solve(
    x: &Tensor4,
    dict: &Dictionary,
    config: &LcaConfig,
    init: Option<&Tensor4>,
) -> Result<(LcaState, Trajectory)> {
    config.validate()?;
    let [batch, channels, h, w] = x.dims();
    if channels != dict.channels() {
        return Err(Error::shape(
            "lca_solve",
            format!(
                "channel axis: input has {channels}, dictionary expects {}",
                dict.channels()
            ),
        ));
    }
    let (ch, cw) = dict.code_dims(h, w);
    let code_dims = [batch, dict.features(), ch, cw];
    let u0 = match init {
        Some(t) => {
            if t.dims() != code_dims {
                return Err(Error::shape(
                    "lca_solve",
                    format!("init dims {:?} vs code dims {:?}", t.dims(), code_dims),
                ));
            }
            t.clone()
        }
        None => Tensor4::zeros(code_dims),
    };

    let drive = correlate(x, &dict.kernels, &dict.geom)?;
    let ctx = StepContext::new(dict, config, &drive, h, w);
    let a0 = apply_threshold(&u0, &config.threshold, ctx.phi_norms.as_deref())?;
    let mut state = LcaState {
        u: u0,
        a: a0,
        iter: 0,
    };

    let stats = &dict.meta.normalization;
    let x_pix = stats.denormalize(x)?;
    let mut trajectory = Trajectory::default();
    trajectory
        .records
        .push(measure(x, &x_pix, dict, config, &state, stats)?);

    for it in 1..=config.n_iters {
        state = ctx.step(&state)?;
        if it % config.track_every == 0 || it == config.n_iters {
            trajectory
                .records
                .push(measure(x, &x_pix, dict, config, &state, stats)?);
        }
    }
    Ok((state, trajectory))
}

fn measure(
    x: &Tensor4,
    x_pix: &Tensor4,
    dict: &Dictionary,
    config: &LcaConfig,
    state: &LcaState,
    stats: &ChannelStats,
) -> Result<MetricsRecord> {
    let [_, _, h, w] = x.dims();
    let recon = transposed_convolve(&state.a, &dict.kernels, &dict.geom, h, w)?;
    let recon_pix = stats.denormalize(&recon)?;
    let mse_v = crate::metrics::mse(&recon_pix, x_pix)?;
    let ssim_v = if h >= 11 && w >= 11 {
        ssim(&recon_pix, x_pix, 1.0)?
    } else {
        f64::NAN
    };
    Ok(MetricsRecord {
        iter: state.iter,
        mse: mse_v,
        l0: l0_count(&state.a, L0_TOLERANCE),
        psnr: psnr_from_mse(mse_v, 1.0),
        ssim: ssim_v,
        energy: energy(
            x,
            dict,
            &state.a,
            config.lambda,
            energy_norm_for(config.threshold.kind),
        )?,
    })
}

/// A single-iteration refinement from a provided warm state.
pub fn one_step_refine(
    x: &Tensor4,
    dict: &Dictionary,
    u0: &Tensor4,
    tau: f64,
    threshold: ThresholdSpec,
) -> Result<LcaState> {
    let config = LcaConfig::new(threshold, tau, 1).with_track_every(1);
    let (state, _) = lca_solve(x, dict, &config, Some(u0))?;
    Ok(state)
}
