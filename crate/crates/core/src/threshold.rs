//! Elementwise activation / proximal operators applied to membrane potentials.
//!
//! Five operators are provided: hard and soft thresholding, the generalized
//! logistic threshold that interpolates between them, the ℓ1/2 half
//! thresholding operator, and CEL0. Soft and half are exact proximal maps of
//! `λ|x|` and `θ|x|^{1/2}` respectively and are verified against a
//! grid-minimization oracle in the integration tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdKind {
    Hard,
    Soft,
    Generalized,
    Half,
    Cel0,
}

/// Tagged description of one thresholding operator.
///
/// Only the parameters relevant to `kind` are consulted: `lambda`/`alpha` for
/// hard, `lambda` for soft, `lambda`/`alpha`/`gamma_steep` for generalized,
/// `theta` for half, and `lambda`/`mu` (plus per-feature kernel norms) for
/// CEL0. `nonneg` clamps negative outputs to zero for every kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub kind: ThresholdKind,
    #[serde(default)]
    pub lambda: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_gamma")]
    pub gamma_steep: f64,
    #[serde(default)]
    pub theta: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default = "default_nonneg")]
    pub nonneg: bool,
}

fn default_gamma() -> f64 {
    1.0
}

fn default_nonneg() -> bool {
    true
}

impl ThresholdSpec {
    pub fn hard(lambda: f64) -> Self {
        ThresholdSpec {
            kind: ThresholdKind::Hard,
            lambda,
            alpha: 0.0,
            gamma_steep: default_gamma(),
            theta: 0.0,
            mu: 0.0,
            nonneg: true,
        }
    }

    pub fn soft(lambda: f64) -> Self {
        ThresholdSpec {
            kind: ThresholdKind::Soft,
            ..Self::hard(lambda)
        }
    }

    pub fn generalized(lambda: f64, alpha: f64, gamma_steep: f64) -> Self {
        ThresholdSpec {
            kind: ThresholdKind::Generalized,
            alpha,
            gamma_steep,
            ..Self::hard(lambda)
        }
    }

    pub fn half(theta: f64) -> Self {
        ThresholdSpec {
            kind: ThresholdKind::Half,
            theta,
            ..Self::hard(0.0)
        }
    }

    pub fn cel0(lambda: f64, mu: f64) -> Self {
        ThresholdSpec {
            kind: ThresholdKind::Cel0,
            mu,
            ..Self::hard(lambda)
        }
    }

    pub fn with_nonneg(mut self, nonneg: bool) -> Self {
        self.nonneg = nonneg;
        self
    }

    /// Checks that the parameters the selected kind relies on are in range.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        match self.kind {
            ThresholdKind::Hard | ThresholdKind::Soft => {
                if self.lambda < 0.0 {
                    return bad("lambda must be >= 0");
                }
            }
            ThresholdKind::Generalized => {
                if self.lambda < 0.0 {
                    return bad("lambda must be >= 0");
                }
                if self.gamma_steep <= 0.0 {
                    return bad("gamma_steep must be > 0");
                }
            }
            ThresholdKind::Half => {
                if self.theta < 0.0 {
                    return bad("theta must be >= 0");
                }
            }
            ThresholdKind::Cel0 => {
                if self.lambda < 0.0 {
                    return bad("lambda must be >= 0");
                }
                if self.mu <= 0.0 {
                    return bad("mu must be > 0");
                }
            }
        }
        Ok(())
    }

    /// Magnitude below which the operator returns exactly zero, where one
    /// exists (hard, soft, half).
    pub fn dead_zone(&self) -> Option<f64> {
        match self.kind {
            ThresholdKind::Hard | ThresholdKind::Soft => Some(self.lambda),
            ThresholdKind::Half => Some(1.5 * self.theta.powf(2.0 / 3.0)),
            _ => None,
        }
    }
}

fn clamp_nonneg(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Logistic threshold `(u - alpha*lambda) / (1 + exp(-gamma (u - lambda)))`.
///
/// With `nonneg` the raw value is clamped at zero; otherwise the operator is
/// applied to `|u|` and the sign restored.
pub fn threshold_generalized(u: f64, spec: &ThresholdSpec) -> f64 {
    debug_assert_eq!(spec.kind, ThresholdKind::Generalized);
    let raw = |v: f64| {
        (v - spec.alpha * spec.lambda) / (1.0 + (-spec.gamma_steep * (v - spec.lambda)).exp())
    };
    if spec.nonneg {
        clamp_nonneg(raw(u))
    } else {
        u.signum() * clamp_nonneg(raw(u.abs()))
    }
}

/// Hard threshold: `u - alpha*lambda` when `u > lambda`, else `0` (strict
/// inequality; `u == lambda` maps to zero). Sign-symmetric when `nonneg` is
/// off.
pub fn threshold_hard(u: f64, spec: &ThresholdSpec) -> f64 {
    debug_assert_eq!(spec.kind, ThresholdKind::Hard);
    if spec.nonneg {
        if u > spec.lambda {
            u - spec.alpha * spec.lambda
        } else {
            0.0
        }
    } else if u.abs() > spec.lambda {
        u.signum() * (u.abs() - spec.alpha * spec.lambda)
    } else {
        0.0
    }
}

/// Soft threshold `sign(u) * max(|u| - lambda, 0)`; `nonneg` additionally
/// clamps negative outputs to zero.
pub fn threshold_soft(u: f64, spec: &ThresholdSpec) -> f64 {
    debug_assert_eq!(spec.kind, ThresholdKind::Soft);
    let v = u.signum() * (u.abs() - spec.lambda).max(0.0);
    if spec.nonneg {
        clamp_nonneg(v)
    } else {
        v
    }
}

/// Half thresholding: the exact proximal map of `theta * |x|^{1/2}`.
///
/// Zero when `|r| <= (3/2) theta^{2/3}` (the boundary belongs to the zero
/// branch); otherwise the largest stationary point
/// `(2r/3) (1 + cos(2π/3 - (2/3) ψ(r)))` with
/// `ψ(r) = arccos((theta/4) (|r|/3)^{-3/2})`. Floating error can push the
/// arccos argument marginally outside `[-1, 1]`; it is clamped to the
/// interval (tolerance 1e-12) and evaluation proceeds.
pub fn threshold_half(r: f64, spec: &ThresholdSpec) -> f64 {
    debug_assert_eq!(spec.kind, ThresholdKind::Half);
    let theta = spec.theta;
    let v = half_scalar(r.abs(), theta);
    if spec.nonneg {
        if r > 0.0 {
            v
        } else {
            0.0
        }
    } else {
        r.signum() * v
    }
}

fn half_scalar(r: f64, theta: f64) -> f64 {
    debug_assert!(r >= 0.0);
    let dead = 1.5 * theta.powf(2.0 / 3.0);
    if r <= dead {
        return 0.0;
    }
    let arg = (theta / 4.0) * (r / 3.0).powf(-1.5);
    let psi = arg.clamp(-1.0, 1.0).acos();
    (2.0 * r / 3.0) * (1.0 + (2.0 * std::f64::consts::PI / 3.0 - 2.0 * psi / 3.0).cos())
}

/// CEL0 thresholding, keyed on `‖φ‖² μ`.
///
/// For `‖φ‖² μ < 1` the soft-like branch
/// `sign(r) min(|r|, (|r| - √(2λ)‖φ‖)_+ / (1 - μ/‖φ‖²))` applies; when the
/// denominator is within 1e-12 of zero the rule falls through to the second
/// branch. For `‖φ‖² μ >= 1` the operator is a hard cut-off at
/// `√(2μλ)‖φ‖`, with the measure-zero equality tie broken toward zero.
pub fn threshold_cel0(r: f64, lambda: f64, mu: f64, phi_norm: f64) -> f64 {
    debug_assert!(mu > 0.0 && phi_norm > 0.0);
    let denom = 1.0 - mu / (phi_norm * phi_norm);
    if phi_norm * phi_norm * mu < 1.0 && denom.abs() > 1e-12 {
        let shrunk = (r.abs() - (2.0 * lambda).sqrt() * phi_norm).max(0.0) / denom;
        r.signum() * r.abs().min(shrunk)
    } else {
        let cutoff = (2.0 * mu * lambda).sqrt() * phi_norm;
        if r.abs() > cutoff {
            r
        } else {
            0.0
        }
    }
}

/// Applies the operator described by `spec` elementwise. CEL0 needs the
/// ℓ2 norm of each feature's kernel (`phi_norms`, length = feature count).
pub fn apply_threshold(
    u: &Tensor4,
    spec: &ThresholdSpec,
    phi_norms: Option<&[f64]>,
) -> Result<Tensor4> {
    let [_, m, h, w] = u.dims();
    if spec.kind == ThresholdKind::Cel0 {
        let norms = phi_norms.ok_or(Error::MissingKernelNorms)?;
        if norms.len() != m {
            return Err(Error::shape(
                "apply_threshold",
                format!("{} kernel norms for {m} feature maps", norms.len()),
            ));
        }
        let mut out = u.clone();
        let plane = h * w;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let feature = (i / plane) % m;
            let t = threshold_cel0(*v, spec.lambda, spec.mu, norms[feature]);
            *v = if spec.nonneg { clamp_nonneg(t) } else { t };
        }
        return Ok(out);
    }
    let f: fn(f64, &ThresholdSpec) -> f64 = match spec.kind {
        ThresholdKind::Hard => threshold_hard,
        ThresholdKind::Soft => threshold_soft,
        ThresholdKind::Generalized => threshold_generalized,
        ThresholdKind::Half => threshold_half,
        ThresholdKind::Cel0 => unreachable!(),
    };
    Ok(u.map(|v| f(v, spec)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generalized_at_lambda_with_zero_alpha_is_half_lambda() {
        let spec = ThresholdSpec::generalized(0.15, 0.0, 4.0);
        let v = threshold_generalized(0.15, &spec);
        assert!((v - 0.075).abs() < 1e-12);
    }

    #[test]
    fn generalized_with_steep_gamma_approaches_hard_shrink() {
        let spec = ThresholdSpec::generalized(0.15, 1.0, 1e6);
        let v = threshold_generalized(1.15, &spec);
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn generalized_clamps_negatives_under_nonneg() {
        let spec = ThresholdSpec::generalized(0.15, 0.0, 4.0);
        assert_eq!(threshold_generalized(-5.0, &spec), 0.0);
    }

    #[test]
    fn hard_threshold_cases() {
        let spec = ThresholdSpec::hard(0.15);
        assert_eq!(threshold_hard(0.2, &spec), 0.2);
        assert_eq!(threshold_hard(0.1, &spec), 0.0);
        // Strict inequality at the threshold itself.
        assert_eq!(threshold_hard(0.15, &spec), 0.0);
    }

    #[test]
    fn hard_with_zero_alpha_is_idempotent() {
        let spec = ThresholdSpec::hard(0.3);
        for &u in &[-1.0, 0.0, 0.2, 0.3, 0.31, 2.5] {
            let once = threshold_hard(u, &spec);
            assert_eq!(threshold_hard(once, &spec), once);
        }
    }

    #[test]
    fn soft_threshold_cases() {
        let spec = ThresholdSpec::soft(0.5).with_nonneg(false);
        assert!((threshold_soft(1.0, &spec) - 0.5).abs() < 1e-15);
        assert!((threshold_soft(-1.0, &spec) + 0.5).abs() < 1e-15);
        let nn = ThresholdSpec::soft(0.5);
        assert_eq!(threshold_soft(-1.0, &nn), 0.0);
    }

    #[test]
    fn soft_and_half_are_odd_without_nonneg() {
        let soft = ThresholdSpec::soft(0.3).with_nonneg(false);
        let half = ThresholdSpec::half(0.4).with_nonneg(false);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let u: f64 = rng.random_range(-3.0..3.0);
            assert!((threshold_soft(-u, &soft) + threshold_soft(u, &soft)).abs() < 1e-12);
            assert!((threshold_half(-u, &half) + threshold_half(u, &half)).abs() < 1e-12);
        }
    }

    #[test]
    fn half_zero_maps_to_zero_and_boundary_belongs_to_dead_zone() {
        let spec = ThresholdSpec::half(1.0).with_nonneg(false);
        assert_eq!(threshold_half(0.0, &spec), 0.0);
        let boundary = spec.dead_zone().unwrap();
        assert_eq!(threshold_half(boundary, &spec), 0.0);
        assert_eq!(threshold_half(-boundary, &spec), 0.0);
        // Just past the boundary the operator jumps to about theta^(2/3).
        let above = threshold_half(boundary + 1e-9, &spec);
        assert!((above - 1.0).abs() < 1e-3, "{above}");
    }

    #[test]
    fn half_with_zero_theta_is_identity() {
        let spec = ThresholdSpec::half(0.0).with_nonneg(false);
        for &r in &[-2.0, -0.3, 0.7, 1.9] {
            assert!((threshold_half(r, &spec) - r).abs() < 1e-12);
        }
    }

    #[test]
    fn cel0_zero_maps_to_zero() {
        for &(lambda, mu, n) in &[(0.1, 0.5, 1.0), (0.3, 2.0, 1.0), (0.2, 0.3, 0.8)] {
            assert_eq!(threshold_cel0(0.0, lambda, mu, n), 0.0);
        }
    }

    #[test]
    fn cel0_hard_branch_passes_large_values_unchanged() {
        // ‖φ‖² μ >= 1 selects the cut-off branch.
        let (lambda, mu, norm) = (0.2f64, 2.0, 1.0);
        let cutoff = (2.0 * mu * lambda).sqrt() * norm;
        assert_eq!(threshold_cel0(cutoff + 1.0, lambda, mu, norm), cutoff + 1.0);
        assert_eq!(
            threshold_cel0(-(cutoff + 1.0), lambda, mu, norm),
            -(cutoff + 1.0)
        );
        // Equality ties break toward sparsity, below is zero.
        assert_eq!(threshold_cel0(cutoff, lambda, mu, norm), 0.0);
        assert_eq!(threshold_cel0(cutoff * 0.5, lambda, mu, norm), 0.0);
    }

    #[test]
    fn cel0_degenerate_denominator_falls_back_to_cutoff_branch() {
        // ‖φ‖ = 0.5, μ = 0.25: first-branch condition holds but the
        // denominator 1 - μ/‖φ‖² vanishes.
        let (lambda, mu, norm) = (0.1f64, 0.25, 0.5);
        assert!(norm * norm * mu < 1.0);
        let cutoff = (2.0 * mu * lambda).sqrt() * norm;
        assert_eq!(threshold_cel0(cutoff * 0.9, lambda, mu, norm), 0.0);
        let big = cutoff * 3.0;
        assert_eq!(threshold_cel0(big, lambda, mu, norm), big);
    }

    #[test]
    fn all_operators_map_zero_to_zero() {
        let specs = [
            ThresholdSpec::hard(0.2),
            ThresholdSpec::soft(0.2),
            ThresholdSpec::generalized(0.2, 0.5, 3.0),
            ThresholdSpec::half(0.2),
        ];
        for spec in &specs {
            let t = Tensor4::zeros([1, 2, 2, 2]);
            let out = apply_threshold(&t, spec, None).unwrap();
            assert!(out.data().iter().all(|&v| v == 0.0));
        }
        let cel = ThresholdSpec::cel0(0.2, 0.5);
        let out = apply_threshold(&Tensor4::zeros([1, 2, 2, 2]), &cel, Some(&[1.0, 1.0])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn operators_are_monotone_on_the_nonnegative_axis() {
        let specs = [
            ThresholdSpec::hard(0.2),
            ThresholdSpec::soft(0.2),
            ThresholdSpec::generalized(0.2, 1.0, 8.0),
            ThresholdSpec::generalized(0.2, 0.0, 30.0),
            ThresholdSpec::half(0.4),
        ];
        for spec in &specs {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..4000 {
                let u = i as f64 * 1e-3;
                let v = match spec.kind {
                    ThresholdKind::Hard => threshold_hard(u, spec),
                    ThresholdKind::Soft => threshold_soft(u, spec),
                    ThresholdKind::Generalized => threshold_generalized(u, spec),
                    ThresholdKind::Half => threshold_half(u, spec),
                    ThresholdKind::Cel0 => unreachable!(),
                };
                assert!(
                    v >= prev - 1e-12,
                    "{:?} not monotone at u={u}: {v} < {prev}",
                    spec.kind
                );
                prev = v;
            }
        }
        // CEL0, both branches.
        for &(mu, norm) in &[(0.5, 1.0), (2.0, 1.0)] {
            let mut prev = f64::NEG_INFINITY;
            for i in 0..4000 {
                let u = i as f64 * 1e-3;
                let v = threshold_cel0(u, 0.2, mu, norm);
                assert!(v >= prev - 1e-12);
                prev = v;
            }
        }
    }

    #[test]
    fn apply_threshold_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<f64> = (0..60).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = Tensor4::from_vec([1, 3, 4, 5], data).unwrap();
        let specs = [
            ThresholdSpec::hard(0.3),
            ThresholdSpec::soft(0.3).with_nonneg(false),
            ThresholdSpec::generalized(0.3, 0.5, 5.0),
            ThresholdSpec::half(0.3).with_nonneg(false),
        ];
        for spec in &specs {
            let out = apply_threshold(&t, spec, None).unwrap();
            for (i, (&o, &u)) in out.data().iter().zip(t.data()).enumerate() {
                let want = match spec.kind {
                    ThresholdKind::Hard => threshold_hard(u, spec),
                    ThresholdKind::Soft => threshold_soft(u, spec),
                    ThresholdKind::Generalized => threshold_generalized(u, spec),
                    ThresholdKind::Half => threshold_half(u, spec),
                    ThresholdKind::Cel0 => unreachable!(),
                };
                assert_eq!(o, want, "index {i}");
            }
        }
        // CEL0 uses the norm of each feature's kernel.
        let spec = ThresholdSpec::cel0(0.2, 0.4).with_nonneg(false);
        let norms = [0.8, 1.0, 1.3];
        let out = apply_threshold(&t, &spec, Some(&norms)).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    let want = threshold_cel0(t.at(0, c, y, x), 0.2, 0.4, norms[c]);
                    assert_eq!(out.at(0, c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn apply_threshold_hard_example() {
        let t = Tensor4::from_vec([1, 1, 1, 2], vec![0.1, 0.2]).unwrap();
        let out = apply_threshold(&t, &ThresholdSpec::hard(0.15), None).unwrap();
        assert_eq!(out.data(), &[0.0, 0.2]);
    }

    #[test]
    fn apply_threshold_cel0_requires_kernel_norms() {
        let t = Tensor4::zeros([1, 2, 2, 2]);
        let spec = ThresholdSpec::cel0(0.2, 0.5);
        assert!(matches!(
            apply_threshold(&t, &spec, None),
            Err(Error::MissingKernelNorms)
        ));
        assert!(apply_threshold(&t, &spec, Some(&[1.0])).is_err());
    }

    #[test]
    fn spec_round_trips_through_json() {
        let json = r#"{"kind":"hard","lambda":0.15,"alpha":0.0,"nonneg":true}"#;
        let spec: ThresholdSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.kind, ThresholdKind::Hard);
        assert_eq!(spec.lambda, 0.15);
        assert!(spec.nonneg);
        let back = serde_json::to_string(&spec).unwrap();
        let again: ThresholdSpec = serde_json::from_str(&back).unwrap();
        assert_eq!(spec, again);
        let half: ThresholdSpec = serde_json::from_str(r#"{"kind":"half","theta":0.5}"#).unwrap();
        assert_eq!(half.kind, ThresholdKind::Half);
        assert_eq!(half.theta, 0.5);
    }

    #[test]
    fn validate_rejects_out_of_range_parameters() {
        assert!(ThresholdSpec::hard(-0.1).validate().is_err());
        assert!(ThresholdSpec::generalized(0.1, 0.0, 0.0).validate().is_err());
        assert!(ThresholdSpec::half(-1.0).validate().is_err());
        assert!(ThresholdSpec::cel0(0.1, 0.0).validate().is_err());
        assert!(ThresholdSpec::cel0(0.1, 0.5).validate().is_ok());
    }
}
