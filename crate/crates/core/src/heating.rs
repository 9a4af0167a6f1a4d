//! Heating-rate extraction from mean-occupation time series, conversion to
//! electric-field noise spectral density, cross-species normalization, and
//! power-law fits in frequency and distance.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::lsq::weighted_linear_fit;
use crate::units::{IonSpecies, TrapContext, HBAR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatingPoint {
    /// Heating (wait) time, s.
    pub wait_time: f64,
    pub nbar: f64,
    pub nbar_err: Option<f64>,
}

/// Mean occupation against heating time, for one trap context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatingSeries {
    points: Vec<HeatingPoint>,
    pub context: Option<TrapContext>,
}

impl HeatingSeries {
    pub fn new(points: Vec<HeatingPoint>, context: Option<TrapContext>) -> Result<Self> {
        for (i, w) in points.windows(2).enumerate() {
            if !(w[1].wait_time > w[0].wait_time) {
                return Err(Error::invalid(format!(
                    "wait times must be strictly increasing (point {} at {} s after {} s)",
                    i + 1,
                    w[1].wait_time,
                    w[0].wait_time
                )));
            }
        }
        for p in &points {
            if !(p.nbar.is_finite() && p.nbar >= 0.0) {
                return Err(Error::invalid(format!("nbar must be >= 0, got {}", p.nbar)));
            }
        }
        Ok(Self { points, context })
    }

    pub fn points(&self) -> &[HeatingPoint] {
        &self.points
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatingRateResult {
    /// quanta/s
    pub ndot: f64,
    pub ndot_err: f64,
    /// quanta at zero wait
    pub intercept: f64,
    pub intercept_err: f64,
    pub chi2: f64,
    pub dof: usize,
}

impl HeatingRateResult {
    /// Plain rate with an uncertainty, e.g. for values quoted elsewhere.
    pub fn from_rate(ndot: f64, ndot_err: f64) -> Result<Self> {
        if !(ndot_err >= 0.0) {
            return Err(Error::invalid(format!("rate uncertainty must be >= 0, got {ndot_err}")));
        }
        Ok(Self {
            ndot,
            ndot_err,
            intercept: 0.0,
            intercept_err: 0.0,
            chi2: 0.0,
            dof: 0,
        })
    }
}

/// Weighted straight-line fit `nbar(t) = intercept + ndot * t`.
///
/// Points with uncertainties are weighted by `1/sigma^2` and the parameter
/// errors come from the unscaled covariance; without uncertainties the
/// covariance is scaled by the residual variance.
pub fn fit_heating_rate(series: &HeatingSeries) -> Result<HeatingRateResult> {
    let pts = series.points();
    if pts.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 points, got {}", pts.len())));
    }
    let with_err = pts.iter().filter(|p| p.nbar_err.is_some()).count();
    if with_err != 0 && with_err != pts.len() {
        return Err(Error::invalid(
            "either every point or no point may carry an uncertainty",
        ));
    }
    let t0 = pts[0].wait_time;
    if pts.iter().all(|p| p.wait_time == t0) {
        return Err(Error::Degenerate("all wait times are equal".into()));
    }
    let design = DMatrix::from_fn(pts.len(), 2, |i, j| if j == 0 { 1.0 } else { pts[i].wait_time });
    let y: Vec<f64> = pts.iter().map(|p| p.nbar).collect();
    let sigma: Option<Vec<f64>> = (with_err > 0).then(|| pts.iter().map(|p| p.nbar_err.unwrap()).collect());
    let fit = weighted_linear_fit(&design, &y, sigma.as_deref())?;
    Ok(HeatingRateResult {
        ndot: fit.params[1],
        ndot_err: fit.std_err(1),
        intercept: fit.params[0],
        intercept_err: fit.std_err(0),
        chi2: fit.chi2,
        dof: fit.dof,
    })
}

/// Iteratively reweighted line fit: each point's uncertainty is replaced by
/// `sigma_at(predicted nbar)` from the current fit, so the weights no longer
/// track the noise on the observed values. Starts from [`fit_heating_rate`].
pub fn fit_heating_rate_reweighted(
    series: &HeatingSeries,
    sigma_at: impl Fn(f64) -> Result<f64>,
) -> Result<HeatingRateResult> {
    let mut fit = fit_heating_rate(series)?;
    for _ in 0..50 {
        let points = series
            .points()
            .iter()
            .map(|p| {
                let predicted = (fit.intercept + fit.ndot * p.wait_time).max(0.0);
                let sigma = sigma_at(predicted)?;
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::Degenerate(format!(
                        "uncertainty model gave {sigma} at nbar {predicted}"
                    )));
                }
                Ok(HeatingPoint {
                    nbar_err: Some(sigma),
                    ..*p
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let next = fit_heating_rate(&HeatingSeries { points, context: None })?;
        let done = (next.ndot - fit.ndot).abs() <= 1e-12 * fit.ndot.abs().max(1e-300)
            && (next.intercept - fit.intercept).abs() <= 1e-12 * fit.intercept.abs().max(1.0);
        fit = next;
        if done {
            break;
        }
    }
    Ok(fit)
}

/// `S_E = 4 m hbar omega ndot / q^2`, in (V/m)^2/Hz.
pub fn spectral_density_from_rate(result: &HeatingRateResult, ctx: &TrapContext) -> Result<f64> {
    if !(result.ndot >= 0.0) {
        return Err(Error::invalid(format!(
            "heating rate must be >= 0, got {}",
            result.ndot
        )));
    }
    let q = ctx.species.charge;
    Ok(4.0 * ctx.species.mass * HBAR * ctx.axial_freq * result.ndot / (q * q))
}

/// Inverse of [`spectral_density_from_rate`]: `ndot = q^2 S_E / (4 m hbar omega)`.
pub fn rate_from_spectral_density(s_e: f64, ctx: &TrapContext) -> f64 {
    let q = ctx.species.charge;
    q * q * s_e / (4.0 * ctx.species.mass * HBAR * ctx.axial_freq)
}

/// Factor `(m / m_ref) (omega / omega_ref)^2` that carries a rate to the
/// reference species and frequency when `S_E ~ 1/omega`.
pub fn normalization_factor(ctx: &TrapContext, ref_species: &IonSpecies, ref_freq: f64) -> Result<f64> {
    if !(ref_freq > 0.0) {
        return Err(Error::invalid(format!(
            "reference frequency must be positive, got {ref_freq}"
        )));
    }
    let charge_ratio = ref_species.charge / ctx.species.charge;
    let w = ctx.axial_freq / ref_freq;
    // q^2 enters the rate directly
    Ok(charge_ratio * charge_ratio * (ctx.species.mass / ref_species.mass) * w * w)
}

/// Heating rate rescaled to another species and secular frequency.
pub fn normalize_rate(
    result: &HeatingRateResult,
    ctx: &TrapContext,
    ref_species: &IonSpecies,
    ref_freq: f64,
) -> Result<f64> {
    Ok(result.ndot * normalization_factor(ctx, ref_species, ref_freq)?)
}

/// `y = amplitude * x^(-exponent)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub amplitude: f64,
    pub amplitude_err: f64,
    pub exponent: f64,
    pub exponent_err: f64,
    pub chi2: f64,
    pub dof: usize,
}

impl PowerLawFit {
    pub fn eval(&self, x: f64) -> f64 {
        self.amplitude * x.powf(-self.exponent)
    }
}

/// Weighted straight-line fit of `ln y` against `ln x`. Relative errors
/// `y_err / y` become the log-space sigmas, which is first order in the
/// error bar and biases the fit when bars are large.
pub fn fit_power_law(x: &[f64], y: &[f64], y_err: Option<&[f64]>) -> Result<PowerLawFit> {
    if x.len() != y.len() {
        return Err(Error::invalid("x and y lengths differ"));
    }
    if x.len() < 3 {
        return Err(Error::invalid(format!("need at least 3 points, got {}", x.len())));
    }
    if let Some(bad) = x.iter().chain(y).find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::invalid(format!("power-law data must be positive, got {bad}")));
    }
    if x.iter().all(|v| *v == x[0]) {
        return Err(Error::Degenerate("all x values are equal".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let sigma: Option<Vec<f64>> = match y_err {
        Some(e) => {
            if e.len() != y.len() {
                return Err(Error::invalid("error column length does not match data"));
            }
            Some(e.iter().zip(y).map(|(e, y)| e / y).collect())
        }
        None => None,
    };
    let design = DMatrix::from_fn(lx.len(), 2, |i, j| if j == 0 { 1.0 } else { lx[i] });
    let fit = weighted_linear_fit(&design, &ly, sigma.as_deref())?;
    let amplitude = fit.params[0].exp();
    Ok(PowerLawFit {
        amplitude,
        amplitude_err: amplitude * fit.std_err(0),
        exponent: -fit.params[1],
        exponent_err: fit.std_err(1),
        chi2: fit.chi2,
        dof: fit.dof,
    })
}

/// Default p-value threshold for calling a position scan flat.
pub const DEFAULT_FLATNESS_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanSummary {
    /// Inverse-variance weighted mean rate, quanta/s.
    pub mean: f64,
    pub std_err: f64,
    pub chi2: f64,
    pub dof: usize,
    /// Probability of a chi-square at least this large under the constant model.
    pub p_value: f64,
    pub flat: bool,
}

pub fn position_scan_summary(rates: &[(f64, HeatingRateResult)]) -> Result<ScanSummary> {
    position_scan_summary_with(rates, DEFAULT_FLATNESS_THRESHOLD)
}

/// Weighted mean of rates across positions plus a chi-square test of the
/// constant-rate hypothesis.
pub fn position_scan_summary_with(rates: &[(f64, HeatingRateResult)], threshold: f64) -> Result<ScanSummary> {
    if rates.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 positions, got {}",
            rates.len()
        )));
    }
    if let Some((pos, r)) = rates.iter().find(|(_, r)| !(r.ndot_err > 0.0)) {
        return Err(Error::invalid(format!(
            "rate at position {pos} has non-positive error {}",
            r.ndot_err
        )));
    }
    let weights: Vec<f64> = rates.iter().map(|(_, r)| 1.0 / (r.ndot_err * r.ndot_err)).collect();
    let wsum: f64 = weights.iter().sum();
    let mean = rates.iter().zip(&weights).map(|((_, r), w)| w * r.ndot).sum::<f64>() / wsum;
    let chi2: f64 = rates
        .iter()
        .zip(&weights)
        .map(|((_, r), w)| w * (r.ndot - mean).powi(2))
        .sum();
    let dof = rates.len() - 1;
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::invalid(e.to_string()))?;
    let p_value = dist.sf(chi2);
    Ok(ScanSummary {
        mean,
        std_err: wsum.sqrt().recip(),
        chi2,
        dof,
        p_value,
        flat: p_value > threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::units::{hz_to_angular, make_trap_context};
    use approx::assert_relative_eq;

    fn series(f: impl Fn(f64) -> f64, err: Option<f64>) -> HeatingSeries {
        let pts = (0..6)
            .map(|i| {
                let t = i as f64 * 0.4e-3;
                HeatingPoint {
                    wait_time: t,
                    nbar: f(t),
                    nbar_err: err,
                }
            })
            .collect();
        HeatingSeries::new(pts, None).unwrap()
    }

    fn yb(freq_hz: f64) -> TrapContext {
        make_trap_context("Yb-171", hz_to_angular(freq_hz), hz_to_angular(12.7e6), 20e-6).unwrap()
    }

    #[test]
    fn reweighted_fit_matches_plain_for_constant_sigma() {
        let pts: Vec<HeatingPoint> = [(0.0, 0.12), (0.5e-3, 0.47), (1e-3, 0.93), (1.5e-3, 1.2), (2e-3, 1.71)]
            .iter()
            .map(|&(t, n)| HeatingPoint {
                wait_time: t,
                nbar: n,
                nbar_err: Some(0.1),
            })
            .collect();
        let s = HeatingSeries::new(pts, None).unwrap();
        let plain = fit_heating_rate(&s).unwrap();
        let re = fit_heating_rate_reweighted(&s, |_| Ok(0.1)).unwrap();
        assert_relative_eq!(re.ndot, plain.ndot, max_relative = 1e-12);
        assert_relative_eq!(re.ndot_err, plain.ndot_err, max_relative = 1e-12);
        // exact data stays exact whatever the weights
        let exact: Vec<HeatingPoint> = (0..6)
            .map(|i| {
                let t = i as f64 * 0.4e-3;
                HeatingPoint {
                    wait_time: t,
                    nbar: 0.1 + 780.0 * t,
                    nbar_err: Some(0.05),
                }
            })
            .collect();
        let s = HeatingSeries::new(exact, None).unwrap();
        let re = fit_heating_rate_reweighted(&s, |n| Ok(0.05 * (1.0 + n))).unwrap();
        assert_relative_eq!(re.ndot, 780.0, max_relative = 1e-10);
        assert!(fit_heating_rate_reweighted(&s, |_| Ok(0.0)).is_err());
    }

    #[test]
    fn exact_line_recovered() {
        let r = fit_heating_rate(&series(|t| 0.1 + 780.0 * t, Some(0.05))).unwrap();
        assert_relative_eq!(r.ndot, 780.0, max_relative = 1e-10);
        assert_relative_eq!(r.intercept, 0.1, max_relative = 1e-10);
        let flat = fit_heating_rate(&series(|_| 3.0, None)).unwrap();
        assert!(flat.ndot.abs() < 1e-9);
        assert!(flat.ndot_err < 1e-9);
    }

    #[test]
    fn time_unit_rescaling() {
        let s = series(|t| 0.2 + 650.0 * t + (t * 1e4).sin() * 0.05, Some(0.1));
        let ms = HeatingSeries::new(
            s.points()
                .iter()
                .map(|p| HeatingPoint {
                    wait_time: p.wait_time * 1e3,
                    ..*p
                })
                .collect(),
            None,
        )
        .unwrap();
        let a = fit_heating_rate(&s).unwrap();
        let b = fit_heating_rate(&ms).unwrap();
        assert_relative_eq!(a.ndot, 1000.0 * b.ndot, max_relative = 1e-12);
    }

    #[test]
    fn heating_fit_errors() {
        let two = HeatingSeries::new(
            vec![
                HeatingPoint {
                    wait_time: 0.0,
                    nbar: 0.1,
                    nbar_err: None,
                },
                HeatingPoint {
                    wait_time: 1e-3,
                    nbar: 0.9,
                    nbar_err: None,
                },
            ],
            None,
        )
        .unwrap();
        assert!(fit_heating_rate(&two).is_err());
        let unsorted = HeatingSeries::new(
            vec![
                HeatingPoint {
                    wait_time: 1e-3,
                    nbar: 0.1,
                    nbar_err: None,
                },
                HeatingPoint {
                    wait_time: 0.0,
                    nbar: 0.9,
                    nbar_err: None,
                },
            ],
            None,
        );
        assert!(unsorted.is_err());
        let mixed = HeatingSeries::new(
            vec![
                HeatingPoint {
                    wait_time: 0.0,
                    nbar: 0.1,
                    nbar_err: Some(0.1),
                },
                HeatingPoint {
                    wait_time: 1e-3,
                    nbar: 0.9,
                    nbar_err: None,
                },
                HeatingPoint {
                    wait_time: 2e-3,
                    nbar: 1.7,
                    nbar_err: Some(0.1),
                },
            ],
            None,
        )
        .unwrap();
        assert!(fit_heating_rate(&mixed).is_err());
        let zero_err = series(|t| t, Some(0.0));
        assert!(fit_heating_rate(&zero_err).is_err());
    }

    #[test]
    fn spectral_density_closed_form() {
        let ctx = yb(5.329e6);
        let r = HeatingRateResult::from_rate(780.0, 50.0).unwrap();
        let s = spectral_density_from_rate(&r, &ctx).unwrap();
        // independent evaluation with CODATA values written out
        let m = 170.936 * 1.660_539_066_60e-27;
        let w = 2.0 * std::f64::consts::PI * 5.329e6;
        let q = 1.602_176_634e-19_f64;
        let expected = 4.0 * m * 1.054_571_817e-34 * w * 780.0 / (q * q);
        assert_relative_eq!(s, expected, max_relative = 1e-14);
        assert_relative_eq!(rate_from_spectral_density(s, &ctx), 780.0, max_relative = 1e-12);

        let zero = HeatingRateResult::from_rate(0.0, 0.0).unwrap();
        assert_eq!(spectral_density_from_rate(&zero, &ctx).unwrap(), 0.0);
        let doubled = spectral_density_from_rate(&r, &yb(2.0 * 5.329e6)).unwrap();
        assert_relative_eq!(doubled, 2.0 * s, max_relative = 1e-14);
        let neg = HeatingRateResult::from_rate(-1.0, 0.0).unwrap();
        assert!(spectral_density_from_rate(&neg, &ctx).is_err());
    }

    #[test]
    fn normalization_examples() {
        let ctx = yb(5.329e6);
        let r = HeatingRateResult::from_rate(780.0, 50.0).unwrap();
        let same = normalize_rate(&r, &ctx, &ctx.species, ctx.axial_freq).unwrap();
        assert_relative_eq!(same, 780.0, max_relative = 1e-15);

        let ca = IonSpecies::ca40();
        let n = normalize_rate(&r, &ctx, &ca, hz_to_angular(1e6)).unwrap();
        assert_relative_eq!(n, 780.0 * (170.936 / 39.963) * 5.329f64.powi(2), max_relative = 1e-12);
        assert!((n / 1e3 - 94.8).abs() < 0.06);

        let half = normalize_rate(&r, &yb(5.329e6 / 2.0), &ca, hz_to_angular(1e6)).unwrap();
        assert_relative_eq!(half, n / 4.0, max_relative = 1e-12);
    }

    #[test]
    fn power_law_exact() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 5.0 / (v * v)).collect();
        let f = fit_power_law(&x, &y, None).unwrap();
        assert_relative_eq!(f.exponent, 2.0, max_relative = 1e-12);
        assert_relative_eq!(f.amplitude, 5.0, max_relative = 1e-12);
    }

    #[test]
    fn power_law_distance() {
        let d: Vec<f64> = (0..9).map(|i| 20e-6 + i as f64 * 10e-6).collect();
        let y: Vec<f64> = d.iter().map(|d| 1e-20 / d.powi(4)).collect();
        let e: Vec<f64> = y.iter().map(|v| 0.1 * v).collect();
        let f = fit_power_law(&d, &y, Some(&e)).unwrap();
        assert!((f.exponent - 4.0).abs() < 0.1);
    }

    #[test]
    fn power_law_errors() {
        assert!(fit_power_law(&[1.0, 2.0], &[1.0, 0.5], None).is_err());
        assert!(fit_power_law(&[1.0, 2.0, 3.0], &[1.0, -0.5, 0.2], None).is_err());
        assert!(fit_power_law(&[0.0, 2.0, 3.0], &[1.0, 0.5, 0.2], None).is_err());
        assert!(matches!(
            fit_power_law(&[2.0, 2.0, 2.0], &[1.0, 0.5, 0.2], None),
            Err(Error::Degenerate(_))
        ));
    }

    fn rate(v: f64, e: f64) -> HeatingRateResult {
        HeatingRateResult::from_rate(v, e).unwrap()
    }

    /// Upper tail of chi-square with an even number of degrees of freedom,
    /// `exp(-x/2) sum_{j < k/2} (x/2)^j / j!`.
    fn chi2_sf_even(x: f64, k: usize) -> f64 {
        let h = x / 2.0;
        let mut term = 1.0;
        let mut sum = 1.0;
        for j in 1..k / 2 {
            term *= h / j as f64;
            sum += term;
        }
        (-h).exp() * sum
    }

    #[test]
    fn scan_summary_equal_rates() {
        let rates: Vec<_> = (0..9).map(|i| (i as f64 * 10e-6, rate(0.78, 0.05))).collect();
        let s = position_scan_summary(&rates).unwrap();
        assert_relative_eq!(s.mean, 0.78, max_relative = 1e-14);
        assert!(s.chi2 < 1e-20);
        assert_relative_eq!(s.p_value, 1.0, epsilon = 1e-12);
        assert_relative_eq!(s.std_err, 0.05 / 3.0, max_relative = 1e-12);
        assert!(s.flat);
    }

    #[test]
    fn scan_summary_scattered_within_errors() {
        let rates: Vec<_> = (0..9)
            .map(|i| (i as f64 * 10e-6, rate(0.70 + 0.025 * i as f64, 0.05)))
            .collect();
        let s = position_scan_summary(&rates).unwrap();
        assert_relative_eq!(s.chi2, 15.0, max_relative = 1e-10);
        let oracle = chi2_sf_even(15.0, 8);
        assert_relative_eq!(s.p_value, oracle, max_relative = 1e-8);
        assert!(s.p_value > 0.05);
        assert!(s.flat);
    }

    #[test]
    fn scan_summary_outlier() {
        let mut rates: Vec<_> = (0..9).map(|i| (i as f64 * 10e-6, rate(0.78, 0.05))).collect();
        rates[4].1 = rate(0.78 + 10.0 * 0.05, 0.05);
        let s = position_scan_summary(&rates).unwrap();
        assert!(s.p_value < 1e-3);
        assert_relative_eq!(s.p_value, chi2_sf_even(s.chi2, 8), max_relative = 1e-8);
        assert!(!s.flat);
        assert!(position_scan_summary(&rates[..1]).is_err());
    }
}
