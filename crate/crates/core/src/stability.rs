//! Von Neumann growth factors, step-size limits and the spectral-centroid
//! phase angle.
//!
//! A plane wave `V_j = g^n e^{i j theta}` sees the frozen operator
//! eigenvalue `lambda = -(K + 2L) - iM` with `L = (c1 + c2) sin^2(theta/2)`
//! and `M = (c1 - c2) sin(theta)`.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{Complex, Matrix3};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{segment_cycles, AnalysisError};
use crate::channels::RK4_REAL_BOUNDARY;
use crate::integrators::{
    run_simulation, CoefficientSample, Model, SchemeKind, SimError, SimOptions, SimTrace,
};
use crate::morphology::AxialCoupling;

/// Length of the zero-padded DFT used for the spectral centroid.
pub const CENTROID_DFT_LEN: usize = 32;
/// Tolerance for "on the unit circle".
pub const UNIT_CIRCLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StabilityError {
    #[error("{0} has no Butcher bound")]
    UnsupportedScheme(SchemeKind),
    #[error("no coefficient samples fall inside the cycle window")]
    InsufficientCycle,
    #[error("voltage path must hold 1..={max} values, got {len}")]
    BadPath { len: usize, max: usize },
    #[error("coefficient sample has {got} compartments, couplings describe {expected}")]
    ShapeMismatch { got: usize, expected: usize },
    #[error("reference run: {0}")]
    Simulation(#[from] SimError),
    #[error("reference run failed: {0}")]
    ReferenceUnstable(String),
    #[error("reference run: {0}")]
    Cycles(#[from] AnalysisError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchemeCoefficients {
    /// `alpha + sum beta_i`, 1/s.
    pub k: f64,
    pub l: f64,
    pub m: f64,
    /// Frozen-neighbor decay rate `K + c1 + sum c2`, 1/s.
    pub b: f64,
    pub theta: f64,
}

impl SchemeCoefficients {
    /// Coefficients of one compartment with couplings `c1` (parent side)
    /// and `c2` (sum over children) at phase angle `theta`.
    pub fn from_couplings(k: f64, c1: f64, c2: f64, theta: f64) -> Self {
        let half = (0.5 * theta).sin();
        SchemeCoefficients {
            k,
            l: (c1 + c2) * half * half,
            m: (c1 - c2) * theta.sin(),
            b: k + c1 + c2,
            theta,
        }
    }

    /// `K + 2L`.
    pub fn decay(&self) -> f64 {
        self.k + 2.0 * self.l
    }

    pub fn eigenvalue(&self) -> Complex64 {
        Complex64::new(-self.decay(), -self.m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthFactor {
    pub value: Complex64,
    /// The same formula with `M = 0`. For the three-level Taylor scheme the
    /// dominant root may be complex; its magnitude is reported, signed by its
    /// real part.
    pub cosine_basis_value: f64,
}

impl GrowthFactor {
    pub fn magnitude(&self) -> f64 {
        self.value.norm()
    }
}

/// `S4(x) = 1 - x/2 + x^2/6 - x^3/24`, so that the four-stage frozen update
/// reads `1 + k lambda S4(Bk)`.
fn rk4_stage_sum(x: f64) -> f64 {
    1.0 - x / 2.0 + x * x / 6.0 - x * x * x / 24.0
}

fn growth_of(scheme: SchemeKind, lambda: Complex64, b: f64, k: f64) -> Complex64 {
    let one = Complex64::new(1.0, 0.0);
    let z = lambda * k;
    match scheme {
        SchemeKind::Ftcs => one + z,
        SchemeKind::Btcs => one / (one - z),
        SchemeKind::Hcn => (one + z * 0.5) / (one - z * 0.5),
        SchemeKind::ExponentialEuler => {
            if b == 0.0 {
                one + z
            } else {
                one + lambda / b * (1.0 - (-b * k).exp())
            }
        }
        SchemeKind::Rk21 => one + z * (1.0 - 0.5 * b * k),
        SchemeKind::Rk41 => one + z * rk4_stage_sum(b * k),
        SchemeKind::Taylor2 => taylor2_dominant_root(z),
    }
}

/// Roots of `g^3 - (1 + 5z/4) g^2 + z/4 = 0`, `z = k lambda`.
pub fn taylor2_roots(z: Complex64) -> [Complex64; 3] {
    let a2 = -(Complex64::new(1.0, 0.0) + z * 1.25);
    let a0 = z * 0.25;
    let zero = Complex::new(0.0, 0.0);
    let one = Complex::new(1.0, 0.0);
    let companion = Matrix3::new(
        -a2, zero, -a0, //
        one, zero, zero, //
        zero, one, zero,
    );
    let eig = companion
        .schur()
        .eigenvalues()
        .expect("complex Schur form is triangular");
    [eig[0], eig[1], eig[2]]
}

fn taylor2_dominant_root(z: Complex64) -> Complex64 {
    taylor2_roots(z)
        .into_iter()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .expect("three roots")
}

/// Largest root magnitude of `g^3 + (5P - 1) g^2 - P` (the `M = 0` case with
/// `P = k(K + 2L)/4`).
pub fn taylor2_spectral_radius(p: f64) -> f64 {
    taylor2_dominant_root(Complex64::new(-4.0 * p, 0.0)).norm()
}

pub fn growth_factor(
    scheme: SchemeKind,
    coeffs: &SchemeCoefficients,
    k: f64,
) -> Result<GrowthFactor, StabilityError> {
    let value = growth_of(scheme, coeffs.eigenvalue(), coeffs.b, k);
    let cos = growth_of(scheme, Complex64::new(-coeffs.decay(), 0.0), coeffs.b, k);
    let cosine_basis_value = if scheme == SchemeKind::Taylor2 {
        cos.norm().copysign(cos.re)
    } else {
        cos.re
    };
    Ok(GrowthFactor {
        value,
        cosine_basis_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepLimit {
    Bounded { seconds: f64 },
    /// No stability bound; `oscillation_onset` is the step beyond which the
    /// growth factor turns negative, where that applies.
    Unbounded { oscillation_onset: Option<f64> },
}

impl StepLimit {
    pub fn seconds(&self) -> Option<f64> {
        match self {
            StepLimit::Bounded { seconds } => Some(*seconds),
            StepLimit::Unbounded { .. } => None,
        }
    }

    pub fn oscillation_onset(&self) -> Option<f64> {
        match self {
            StepLimit::Bounded { .. } => None,
            StepLimit::Unbounded { oscillation_onset } => *oscillation_onset,
        }
    }

    fn bounded_or_unbounded(seconds: f64) -> StepLimit {
        if seconds.is_finite() {
            StepLimit::Bounded { seconds }
        } else {
            StepLimit::Unbounded {
                oscillation_onset: None,
            }
        }
    }
}

impl fmt::Display for StepLimit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepLimit::Bounded { seconds } => write!(f, "{:.3} us", seconds * 1e6),
            StepLimit::Unbounded {
                oscillation_onset: Some(t),
            } => write!(f, "Unbounded (oscillates above {:.3} us)", t * 1e6),
            StepLimit::Unbounded { .. } => f.write_str("Unbounded"),
        }
    }
}

/// Largest stable step for the cosine-basis growth factor.
///
/// For the frozen Runge-Kutta updates `g = 1 + k lambda S(Bk)`, and since
/// `K + 2L <= 2B` the factor can never reach -1; it leaves the unit disk
/// through +1 where the stage sum `S` changes sign, at `2/B` and `2.785.../B`.
pub fn step_limit(scheme: SchemeKind, coeffs: &SchemeCoefficients) -> StepLimit {
    let decay = coeffs.decay();
    match scheme {
        SchemeKind::Ftcs | SchemeKind::Taylor2 => StepLimit::bounded_or_unbounded(2.0 / decay),
        SchemeKind::Rk21 => StepLimit::bounded_or_unbounded(2.0 / coeffs.b),
        SchemeKind::Rk41 => StepLimit::bounded_or_unbounded(RK4_REAL_BOUNDARY / coeffs.b),
        SchemeKind::Btcs | SchemeKind::ExponentialEuler => StepLimit::Unbounded {
            oscillation_onset: None,
        },
        SchemeKind::Hcn => StepLimit::Unbounded {
            oscillation_onset: (decay > 0.0).then(|| 2.0 / decay),
        },
    }
}

/// Real-axis stability bound of the plain ODE method for `dV/dt = -B V`.
pub fn butcher_limit(scheme: SchemeKind, b: f64) -> Result<StepLimit, StabilityError> {
    let constant = match scheme {
        SchemeKind::Rk21 => 2.0,
        SchemeKind::Rk41 => RK4_REAL_BOUNDARY,
        other => return Err(StabilityError::UnsupportedScheme(other)),
    };
    if b <= 0.0 {
        return Ok(StepLimit::Unbounded {
            oscillation_onset: None,
        });
    }
    Ok(StepLimit::Bounded {
        seconds: constant / b,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneWaveSpectrum {
    /// `|H(omega_i)|` for `omega_i = i pi / 16`, `i = 0..=16`.
    pub magnitudes: Vec<f64>,
    pub centroid: f64,
    /// Every magnitude vanished; the centroid is reported as 0.
    pub all_zero: bool,
}

impl PlaneWaveSpectrum {
    pub fn frequencies() -> Vec<f64> {
        (0..=CENTROID_DFT_LEN / 2)
            .map(|i| i as f64 * PI / (CENTROID_DFT_LEN / 2) as f64)
            .collect()
    }
}

/// Magnitude-weighted mean spatial frequency of a voltage profile.
pub fn spectral_centroid(
    voltages: &[f64],
    remove_mean: bool,
) -> Result<PlaneWaveSpectrum, StabilityError> {
    if voltages.is_empty() || voltages.len() > CENTROID_DFT_LEN {
        return Err(StabilityError::BadPath {
            len: voltages.len(),
            max: CENTROID_DFT_LEN,
        });
    }
    let mean = if remove_mean {
        voltages.iter().sum::<f64>() / voltages.len() as f64
    } else {
        0.0
    };
    let mut buf: Vec<Complex64> = voltages
        .iter()
        .map(|v| Complex64::new(v - mean, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(CENTROID_DFT_LEN)
        .collect();
    FftPlanner::new()
        .plan_fft_forward(CENTROID_DFT_LEN)
        .process(&mut buf);
    let magnitudes: Vec<f64> = buf[..=CENTROID_DFT_LEN / 2].iter().map(|c| c.norm()).collect();
    let total: f64 = magnitudes.iter().sum();
    let scale: f64 = voltages.iter().map(|v| v.abs()).sum();
    if total <= 1e-12 * scale || total == 0.0 {
        return Ok(PlaneWaveSpectrum {
            magnitudes,
            centroid: 0.0,
            all_zero: true,
        });
    }
    let centroid = PlaneWaveSpectrum::frequencies()
        .iter()
        .zip(&magnitudes)
        .map(|(w, h)| w * h)
        .sum::<f64>()
        / total;
    Ok(PlaneWaveSpectrum {
        magnitudes,
        centroid,
        all_zero: false,
    })
}

/// Where and with which coefficients a cycle minimum was attained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleLimit {
    pub limit: StepLimit,
    pub time: f64,
    pub compartment: usize,
    pub coefficients: SchemeCoefficients,
}

/// Options for scanning recorded coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    /// Only samples with `start <= time <= end` take part.
    pub window: Option<(f64, f64)>,
    pub remove_mean: bool,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            window: None,
            remove_mean: true,
        }
    }
}

fn in_window(options: &ScanOptions, t: f64) -> bool {
    options.window.is_none_or(|(a, b)| t >= a && t <= b)
}

/// Visit the coefficients of every compartment at every sample in the window.
fn scan<F: FnMut(&CoefficientSample, usize, SchemeCoefficients)>(
    samples: &[CoefficientSample],
    couplings: &[AxialCoupling],
    options: &ScanOptions,
    mut visit: F,
) -> Result<(), StabilityError> {
    let mut seen = false;
    for s in samples.iter().filter(|s| in_window(options, s.time)) {
        if s.k_values.len() != couplings.len() {
            return Err(StabilityError::ShapeMismatch {
                got: s.k_values.len(),
                expected: couplings.len(),
            });
        }
        let theta = spectral_centroid(&s.path_voltages, options.remove_mean)?.centroid;
        for (j, (&k, c)) in s.k_values.iter().zip(couplings).enumerate() {
            visit(s, j, SchemeCoefficients::from_couplings(k, c.c1, c.c2_sum(), theta));
        }
        seen = true;
    }
    if seen {
        Ok(())
    } else {
        Err(StabilityError::InsufficientCycle)
    }
}

/// Minimum of [`step_limit`] over compartments and recorded instants. For
/// unbounded schemes the smallest oscillation onset is reported instead.
pub fn min_over_cycle_limit(
    samples: &[CoefficientSample],
    couplings: &[AxialCoupling],
    scheme: SchemeKind,
    options: &ScanOptions,
) -> Result<CycleLimit, StabilityError> {
    let mut best: Option<(f64, CycleLimit)> = None;
    scan(samples, couplings, options, |s, j, coeffs| {
        let limit = step_limit(scheme, &coeffs);
        let key = limit
            .seconds()
            .or(limit.oscillation_onset())
            .unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(b, _)| key < *b) {
            best = Some((
                key,
                CycleLimit {
                    limit,
                    time: s.time,
                    compartment: j,
                    coefficients: coeffs,
                },
            ));
        }
    })?;
    Ok(best.expect("scan saw at least one sample").1)
}

/// Coefficients recorded at every step across one full AP cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceCycle {
    pub samples: Vec<CoefficientSample>,
    pub window: (f64, f64),
    /// 0-based index of the cycle used, and the number of complete cycles.
    pub cycle_index: usize,
    pub cycles: usize,
    /// The first run, recording compartment `record` only.
    pub trace: SimTrace,
}

/// Run `scheme` at step `k`, find the last complete AP cycle at compartment
/// `record`, then rerun recording coefficients along `path` inside that
/// cycle. Both runs are deterministic so the second reproduces the first.
pub fn reference_cycle(
    model: &Model,
    scheme: SchemeKind,
    k: f64,
    duration: f64,
    record: usize,
    path: Vec<usize>,
) -> Result<ReferenceCycle, StabilityError> {
    let trace = run_simulation(model, scheme, k, duration, &[record], &SimOptions::default())?;
    if let Some(f) = &trace.failure {
        return Err(StabilityError::ReferenceUnstable(f.reason.clone()));
    }
    let cycles = segment_cycles(&trace.times, &trace.voltages[0])?;
    let cycle_index = cycles.len() - 1;
    let last = &cycles[cycle_index];
    let window = (trace.times[last.start], trace.times[last.end]);
    let options = SimOptions {
        coefficient_window: Some(window),
        ..SimOptions::recording_coefficients(path, 1)
    };
    let end = (window.1 + 0.5 * k).min(duration);
    let rerun = run_simulation(model, scheme, k, end, &[], &options)?;
    Ok(ReferenceCycle {
        samples: rerun.coefficients.unwrap_or_default(),
        window,
        cycle_index,
        cycles: cycles.len(),
        trace,
    })
}

/// Smallest and largest cosine-basis growth factor over the window at step
/// `k`.
pub fn growth_span(
    samples: &[CoefficientSample],
    couplings: &[AxialCoupling],
    scheme: SchemeKind,
    k: f64,
    options: &ScanOptions,
) -> Result<(f64, f64), StabilityError> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    scan(samples, couplings, options, |_, _, coeffs| {
        let g = growth_factor(scheme, &coeffs, k)
            .expect("every scheme has a growth factor")
            .cosine_basis_value;
        lo = lo.min(g);
        hi = hi.max(g);
    })?;
    Ok((lo, hi))
}

/// One row of the stability report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeStability {
    pub scheme: SchemeKind,
    pub limit_seconds: Option<f64>,
    pub butcher_limit_seconds: Option<f64>,
    pub oscillation_onset_seconds: Option<f64>,
    pub theta_used: f64,
    #[serde(rename = "K_min")]
    pub k_min: f64,
    #[serde(rename = "L_at_theta")]
    pub l_at_theta: f64,
    pub time: f64,
    pub compartment: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub schemes: Vec<SchemeStability>,
    /// `(time, centroid)` for every sample in the window.
    pub centroid_series: Vec<(f64, f64)>,
}

pub fn stability_report(
    samples: &[CoefficientSample],
    couplings: &[AxialCoupling],
    options: &ScanOptions,
) -> Result<StabilityReport, StabilityError> {
    let mut schemes = Vec::new();
    for scheme in SchemeKind::ALL {
        let at = min_over_cycle_limit(samples, couplings, scheme, options)?;
        let butcher = match scheme {
            SchemeKind::Rk21 | SchemeKind::Rk41 => {
                let worst_b = max_b(samples, couplings, options)?;
                butcher_limit(scheme, worst_b)?.seconds()
            }
            _ => None,
        };
        schemes.push(SchemeStability {
            scheme,
            limit_seconds: at.limit.seconds(),
            butcher_limit_seconds: butcher,
            oscillation_onset_seconds: at.limit.oscillation_onset(),
            theta_used: at.coefficients.theta,
            k_min: at.coefficients.k,
            l_at_theta: at.coefficients.l,
            time: at.time,
            compartment: at.compartment,
        });
    }
    let mut centroid_series = Vec::new();
    for s in samples.iter().filter(|s| in_window(options, s.time)) {
        let c = spectral_centroid(&s.path_voltages, options.remove_mean)?;
        centroid_series.push((s.time, c.centroid));
    }
    Ok(StabilityReport {
        schemes,
        centroid_series,
    })
}

fn max_b(
    samples: &[CoefficientSample],
    couplings: &[AxialCoupling],
    options: &ScanOptions,
) -> Result<f64, StabilityError> {
    let mut worst = 0.0f64;
    scan(samples, couplings, options, |_, _, c| worst = worst.max(c.b))?;
    Ok(worst)
}

/// CSV of cosine-basis growth factors against step size, one column per
/// scheme.
pub fn growth_curve_csv(coeffs: &SchemeCoefficients, steps: &[f64]) -> String {
    let mut out = String::from("k_s");
    for s in SchemeKind::ALL {
        out.push(',');
        out.push_str(s.name());
    }
    out.push('\n');
    for &k in steps {
        out.push_str(&k.to_string());
        for s in SchemeKind::ALL {
            let g = growth_factor(s, coeffs, k).expect("every scheme has a growth factor");
            out.push(',');
            out.push_str(&g.cosine_basis_value.to_string());
        }
        out.push('\n');
    }
    out
}
