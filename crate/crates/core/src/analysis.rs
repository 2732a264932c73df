//! Waveform analysis: spikes, after-depolarizations, cycle segmentation,
//! accuracy against a fine-step reference, oscillation detection, Welch
//! periodograms and empirical convergence order.
//!
//! Most functions take a `(times, voltages)` pair sampled on a uniform grid.
//! Indices in the returned structures point into those slices.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::integrators::{SchemeKind, SimTrace};

/// A spike peak must exceed this.
pub const SPIKE_PEAK_MIN: f64 = -0.01;
/// The rising limb of a spike must start below this.
pub const SPIKE_BASE_MAX: f64 = -0.04;
/// Local maxima at or above this are never after-depolarizations.
pub const ADP_CEILING: f64 = -0.04;
/// Slack allowed on the monotone rise, in volts.
pub const MONOTONE_TOL: f64 = 1e-12;
/// Second differences at or below this magnitude count as zero concavity.
pub const ZERO_CONCAVITY: f64 = 1e-12;
/// Cycles skipped before statistics; the twentieth cycle is index 19.
pub const DEFAULT_SKIP: usize = 19;
pub const PSD_RATE: f64 = 250.0;
pub const PSD_SEGMENT: usize = 250;
pub const PSD_HOP: usize = 100;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("found {found} complete cycles, need {needed}")]
    InsufficientCycles { found: usize, needed: usize },
    #[error("cycle {cycle} has no spike to align on")]
    NoSpikes { cycle: usize },
    #[error("{samples} samples after downsampling, need {needed}")]
    SignalTooShort { samples: usize, needed: usize },
    #[error("sampling rate {0} Hz is below 250 Hz")]
    RateTooLow(f64),
    #[error("error at index {index} is not positive")]
    NonpositiveError { index: usize },
    #[error("need at least {needed} points, got {found}")]
    TooFewPoints { found: usize, needed: usize },
    #[error("{times} times but {voltages} voltages")]
    LengthMismatch { times: usize, voltages: usize },
}

fn check_lengths(times: &[f64], voltages: &[f64]) -> Result<(), AnalysisError> {
    if times.len() != voltages.len() {
        return Err(AnalysisError::LengthMismatch {
            times: times.len(),
            voltages: voltages.len(),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub index: usize,
    pub time: f64,
    pub voltage: f64,
}

/// Indices of local maxima. A flat top counts once, at its first sample,
/// and only if the signal strictly rises into it and strictly falls after.
fn local_maxima(v: &[f64], from: usize, to: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = from.max(1);
    while i < to {
        if v[i] > v[i - 1] {
            let mut j = i + 1;
            while j < to && v[j] == v[i] {
                j += 1;
            }
            if j < to && v[j] < v[i] {
                out.push(i);
            }
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

/// True when the samples before `peak` fall monotonically (backward in time)
/// below [`SPIKE_BASE_MAX`].
fn rises_from_base(v: &[f64], peak: usize) -> bool {
    let mut j = peak;
    loop {
        if v[j] < SPIKE_BASE_MAX {
            return true;
        }
        if j == 0 || v[j - 1] > v[j] + MONOTONE_TOL {
            return false;
        }
        j -= 1;
    }
}

pub fn detect_spikes(times: &[f64], voltages: &[f64]) -> Vec<Peak> {
    detect_spikes_in(times, voltages, 0, voltages.len())
}

fn detect_spikes_in(times: &[f64], v: &[f64], from: usize, to: usize) -> Vec<Peak> {
    local_maxima(v, from, to)
        .into_iter()
        .filter(|&i| v[i] > SPIKE_PEAK_MIN && rises_from_base(v, i))
        .map(|i| Peak {
            index: i,
            time: times[i],
            voltage: v[i],
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adp {
    pub peak: Peak,
    /// Sits inside an oscillation run, so the peak may be numerical noise.
    pub suspect: bool,
}

/// Sample range `[first, last]` touched by an oscillation event.
fn event_span(e: &OscillationEvent) -> (usize, usize) {
    (e.start - 1, e.start + e.run_length)
}

fn covering_event(events: &[OscillationEvent], index: usize) -> Option<usize> {
    events.iter().position(|e| {
        let (a, b) = event_span(e);
        index >= a && index <= b
    })
}

/// After-depolarizations in `voltages[from..to]`, where `from` is the last
/// spike of a cycle. Only maxima past the first post-spike minimum count.
/// Maxima inside one oscillation run collapse to its highest, flagged
/// suspect: the zig-zag would otherwise produce one maximum per sample pair.
pub fn detect_adp(
    times: &[f64],
    voltages: &[f64],
    from: usize,
    to: usize,
    events: &[OscillationEvent],
) -> Vec<Adp> {
    let v = voltages;
    let to = to.min(v.len());
    let mut m = from;
    while m + 1 < to && v[m + 1] <= v[m] {
        m += 1;
    }
    let mut out: Vec<Adp> = Vec::new();
    let mut last_event: Option<usize> = None;
    for i in local_maxima(v, m + 1, to) {
        if v[i] >= ADP_CEILING {
            continue;
        }
        let peak = Peak {
            index: i,
            time: times[i],
            voltage: v[i],
        };
        match covering_event(events, i) {
            Some(e) if last_event == Some(e) => {
                let prev = out.last_mut().expect("event already produced an entry");
                if peak.voltage > prev.peak.voltage {
                    prev.peak = peak;
                }
            }
            Some(e) => {
                out.push(Adp {
                    peak,
                    suspect: true,
                });
                last_event = Some(e);
            }
            None => {
                out.push(Adp {
                    peak,
                    suspect: false,
                });
                last_event = None;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApCycle {
    pub start: usize,
    pub end: usize,
    pub spikes: Vec<Peak>,
    pub adps: Vec<Adp>,
    pub period: f64,
    pub min_voltage: f64,
    pub max_voltage: f64,
}

fn argmin(v: &[f64], from: usize, to: usize) -> usize {
    let mut best = from;
    for i in from..to {
        if v[i] < v[best] {
            best = i;
        }
    }
    best
}

/// Group spikes into bursts: a gap longer than half the largest interspike
/// interval starts a new group.
fn group_spikes(spikes: &[Peak]) -> Vec<Vec<Peak>> {
    let max_isi = spikes
        .windows(2)
        .map(|w| w[1].time - w[0].time)
        .fold(0.0, f64::max);
    let mut groups: Vec<Vec<Peak>> = Vec::new();
    for (i, s) in spikes.iter().enumerate() {
        if i == 0 || s.time - spikes[i - 1].time > 0.5 * max_isi {
            groups.push(vec![*s]);
        } else {
            groups.last_mut().expect("first spike opened a group").push(*s);
        }
    }
    groups
}

/// Split a trace into AP cycles bounded by the absolute minimum between
/// consecutive spike groups. The first cycle starts at the minimum before
/// the first spike. The final group closes a cycle only when the trace runs
/// past it at least as far as every earlier cycle ran past its last spike.
pub fn segment_cycles(times: &[f64], voltages: &[f64]) -> Result<Vec<ApCycle>, AnalysisError> {
    check_lengths(times, voltages)?;
    let v = voltages;
    let spikes = detect_spikes(times, v);
    let groups = group_spikes(&spikes);
    let insufficient = |found| AnalysisError::InsufficientCycles { found, needed: 2 };
    if groups.len() < 2 {
        return Err(insufficient(0));
    }
    let events = detect_oscillations(v);

    let mut bounds = vec![argmin(v, 0, groups[0][0].index)];
    for w in groups.windows(2) {
        let a = w[0].last().expect("groups are non-empty").index;
        bounds.push(argmin(v, a, w[1][0].index));
    }
    let last_spike = groups.last().unwrap().last().unwrap().index;
    let tail_end = argmin(v, last_spike, v.len());
    let shortest_tail = groups[..groups.len() - 1]
        .iter()
        .zip(&bounds[1..])
        .map(|(g, &b)| b - g.last().unwrap().index)
        .min()
        .unwrap_or(usize::MAX);
    if v.len() - 1 - last_spike >= shortest_tail && tail_end + 1 < v.len() {
        bounds.push(tail_end);
    }

    let cycles: Vec<ApCycle> = bounds
        .windows(2)
        .zip(&groups)
        .map(|(b, g)| {
            let (start, end) = (b[0], b[1]);
            let last = g.last().unwrap().index;
            let span = &v[start..=end];
            ApCycle {
                start,
                end,
                spikes: g.clone(),
                adps: detect_adp(times, v, last, end, &events),
                period: times[end] - times[start],
                min_voltage: span.iter().copied().fold(f64::INFINITY, f64::min),
                max_voltage: span.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    if cycles.len() < 2 {
        return Err(insufficient(cycles.len()));
    }
    Ok(cycles)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); zero for one value.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleStats {
    pub cycles_used: usize,
    pub min_voltage: MeanStd,
    pub max_voltage: MeanStd,
    pub period: MeanStd,
}

pub fn cycle_stats(cycles: &[ApCycle], skip: usize) -> Result<CycleStats, AnalysisError> {
    if cycles.len() <= skip {
        return Err(AnalysisError::InsufficientCycles {
            found: cycles.len(),
            needed: skip + 1,
        });
    }
    let used = &cycles[skip..];
    let pick = |f: fn(&ApCycle) -> f64| MeanStd::of(&used.iter().map(f).collect::<Vec<_>>());
    Ok(CycleStats {
        cycles_used: used.len(),
        min_voltage: pick(|c| c.min_voltage),
        max_voltage: pick(|c| c.max_voltage),
        period: pick(|c| c.period),
    })
}

/// Peak time refined by the vertex of the parabola through the peak sample
/// and its neighbours.
fn refined_peak_time(times: &[f64], v: &[f64], i: usize) -> f64 {
    if i == 0 || i + 1 >= v.len() {
        return times[i];
    }
    let denom = v[i - 1] - 2.0 * v[i] + v[i + 1];
    if denom == 0.0 {
        return times[i];
    }
    let delta = 0.5 * (v[i - 1] - v[i + 1]) / denom;
    times[i] + delta * (times[i + 1] - times[i])
}

/// Linear interpolation of `(xs, ys)` at `x`; `xs` ascending and `x` inside.
fn interpolate(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let idx = xs.partition_point(|&t| t <= x);
    if idx == 0 {
        return ys[0];
    }
    if idx >= xs.len() {
        return ys[xs.len() - 1];
    }
    let (x0, x1) = (xs[idx - 1], xs[idx]);
    ys[idx - 1] + (ys[idx] - ys[idx - 1]) * (x - x0) / (x1 - x0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub scheme: Option<SchemeKind>,
    pub step: f64,
    pub rms: f64,
    /// Added to the test trace's times to line its first spike up with the
    /// reference.
    pub shift: f64,
    pub samples: usize,
}

/// RMS difference between cycle `cycle_index` (0-based) of a test series and
/// of a reference series, after aligning their first spike peaks.
pub fn accuracy_rms_series(
    test: (&[f64], &[f64]),
    reference: (&[f64], &[f64]),
    cycle_index: usize,
) -> Result<AccuracyReport, AnalysisError> {
    let pick = |(t, v): (&[f64], &[f64])| -> Result<ApCycle, AnalysisError> {
        let cycles = segment_cycles(t, v)?;
        let found = cycles.len();
        cycles
            .into_iter()
            .nth(cycle_index)
            .ok_or(AnalysisError::InsufficientCycles {
                found,
                needed: cycle_index + 1,
            })
    };
    let tc = pick(test)?;
    let rc = pick(reference)?;
    let first = |c: &ApCycle| {
        c.spikes.first().map(|p| p.index).ok_or(AnalysisError::NoSpikes { cycle: cycle_index })
    };
    let t_peak = refined_peak_time(test.0, test.1, first(&tc)?);
    let r_peak = refined_peak_time(reference.0, reference.1, first(&rc)?);
    let shift = r_peak - t_peak;

    let shifted: Vec<f64> = test.0[tc.start..=tc.end].iter().map(|t| t + shift).collect();
    let values = &test.1[tc.start..=tc.end];
    let (lo, hi) = (shifted[0], shifted[shifted.len() - 1]);
    let mut acc = 0.0;
    let mut n = 0usize;
    for i in rc.start..=rc.end {
        let tau = reference.0[i];
        if tau < lo || tau > hi {
            continue;
        }
        let d = interpolate(&shifted, values, tau) - reference.1[i];
        acc += d * d;
        n += 1;
    }
    let rms = if n == 0 { 0.0 } else { (acc / n as f64).sqrt() };
    let step = if test.0.len() > 1 { test.0[1] - test.0[0] } else { 0.0 };
    Ok(AccuracyReport {
        scheme: None,
        step,
        rms,
        shift,
        samples: n,
    })
}

/// [`accuracy_rms_series`] on the first recorded compartment of each trace.
pub fn accuracy_rms(
    trace: &SimTrace,
    reference: &SimTrace,
    cycle_index: usize,
) -> Result<AccuracyReport, AnalysisError> {
    fn first(t: &SimTrace) -> &[f64] {
        t.voltages.first().map(|v| v.as_slice()).unwrap_or(&[])
    }
    let mut report = accuracy_rms_series(
        (&trace.times, first(trace)),
        (&reference.times, first(reference)),
        cycle_index,
    )?;
    report.scheme = Some(trace.scheme);
    report.step = trace.step;
    Ok(report)
}

/// `d[n-1] = v[n+1] - 2 v[n] + v[n-1]`, centred on sample `n`.
pub fn second_undivided_differences(voltages: &[f64]) -> Vec<f64> {
    voltages
        .windows(3)
        .map(|w| w[2] - 2.0 * w[1] + w[0])
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OscillationEvent {
    /// Sample index at which the first difference of the run is centred.
    pub start: usize,
    pub run_length: usize,
    /// A quarter of each |second difference| in the run.
    pub amplitudes: Vec<f64>,
    pub rms: f64,
}

fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|a| a * a).sum::<f64>() / values.len() as f64).sqrt()
}

/// Maximal runs of at least three nonzero second differences with strictly
/// alternating sign.
pub fn detect_oscillations(voltages: &[f64]) -> Vec<OscillationEvent> {
    let d = second_undivided_differences(voltages);
    let sign = |x: f64| {
        if x > ZERO_CONCAVITY {
            1
        } else if x < -ZERO_CONCAVITY {
            -1
        } else {
            0
        }
    };
    let mut events = Vec::new();
    let mut i = 0;
    while i < d.len() {
        if sign(d[i]) == 0 {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < d.len() && sign(d[j]) != 0 && sign(d[j]) == -sign(d[j - 1]) {
            j += 1;
        }
        if j - i >= 3 {
            let amplitudes: Vec<f64> = d[i..j].iter().map(|x| x.abs() / 4.0).collect();
            events.push(OscillationEvent {
                start: i + 1,
                run_length: j - i,
                rms: rms(&amplitudes),
                amplitudes,
            });
        }
        i = j;
    }
    events
}

/// Pooled RMS of the event amplitudes whose sample lies in each cycle. A
/// cycle owns `[start, end)` so shared boundary samples count once.
pub fn oscillation_rms_per_cycle(events: &[OscillationEvent], cycles: &[ApCycle]) -> Vec<f64> {
    cycles
        .iter()
        .map(|c| {
            let pooled: Vec<f64> = events
                .iter()
                .flat_map(|e| {
                    e.amplitudes
                        .iter()
                        .enumerate()
                        .map(move |(i, a)| (e.start + i, *a))
                })
                .filter(|(n, _)| *n >= c.start && *n < c.end)
                .map(|(_, a)| a)
                .collect();
            rms(&pooled)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDensity {
    pub frequencies: Vec<f64>,
    /// V^2/Hz, one-sided.
    pub power: Vec<f64>,
    pub sample_rate: f64,
    pub segments: usize,
}

impl SpectralDensity {
    /// Integral of the density over the grid (1 Hz bins).
    pub fn band_power(&self) -> f64 {
        self.power.iter().sum::<f64>() * (self.sample_rate / PSD_SEGMENT as f64)
    }

    pub fn peak_frequency(&self) -> f64 {
        let i = (0..self.power.len())
            .max_by(|&a, &b| self.power[a].total_cmp(&self.power[b]))
            .unwrap_or(0);
        self.frequencies[i]
    }
}

fn block_average(v: &[f64], block: usize) -> Vec<f64> {
    v.chunks_exact(block)
        .map(|c| c.iter().sum::<f64>() / block as f64)
        .collect()
}

/// Bring a series down to [`PSD_RATE`]. Integer ratios are block-averaged.
/// Otherwise the series is first linearly interpolated onto the next grid
/// whose rate is an integer multiple of 250 Hz.
pub fn downsample(voltages: &[f64], native_rate: f64) -> Result<Vec<f64>, AnalysisError> {
    if !(native_rate >= PSD_RATE) {
        return Err(AnalysisError::RateTooLow(native_rate));
    }
    let ratio = native_rate / PSD_RATE;
    let nearest = ratio.round();
    if (ratio - nearest).abs() <= 1e-9 * nearest {
        return Ok(block_average(voltages, nearest as usize));
    }
    let block = ratio.ceil() as usize;
    let fine_rate = PSD_RATE * block as f64;
    let n = voltages.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let last = (n - 1) as f64;
    let fine: Vec<f64> = (0..)
        .map(|i| i as f64 * native_rate / fine_rate)
        .take_while(|&p| p <= last)
        .map(|p| {
            let i0 = p.floor() as usize;
            if i0 + 1 >= n {
                voltages[n - 1]
            } else {
                voltages[i0] + (voltages[i0 + 1] - voltages[i0]) * (p - i0 as f64)
            }
        })
        .collect();
    Ok(block_average(&fine, block))
}

/// Welch power spectral density: 250 Hz sampling, 250-sample periodic
/// Hamming segments, hop 100, mean removed, one-sided density scaling so a
/// unit-amplitude sinusoid integrates to 0.5.
pub fn welch_psd(voltages: &[f64], native_rate: f64) -> Result<SpectralDensity, AnalysisError> {
    let mut x = downsample(voltages, native_rate)?;
    if x.len() < PSD_SEGMENT {
        return Err(AnalysisError::SignalTooShort {
            samples: x.len(),
            needed: PSD_SEGMENT,
        });
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter_mut().for_each(|s| *s -= mean);

    let n = PSD_SEGMENT;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect();
    let norm = PSD_RATE * window.iter().map(|w| w * w).sum::<f64>();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n);
    let bins = n / 2 + 1;
    let mut power = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut segments = 0usize;
    let mut s = 0;
    while s + n <= x.len() {
        for (b, (xi, w)) in buf.iter_mut().zip(x[s..s + n].iter().zip(&window)) {
            *b = Complex::new(xi * w, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p += c.norm_sqr();
        }
        segments += 1;
        s += PSD_HOP;
    }
    for (f, p) in power.iter_mut().enumerate() {
        let one_sided = if f == 0 || 2 * f == n { 1.0 } else { 2.0 };
        *p *= one_sided / (norm * segments as f64);
    }
    let df = PSD_RATE / n as f64;
    Ok(SpectralDensity {
        frequencies: (0..bins).map(|f| f as f64 * df).collect(),
        power,
        sample_rate: PSD_RATE,
        segments,
    })
}

/// Least-squares slope of `ln(rms)` against `ln(k)`.
pub fn empirical_order(points: &[(f64, f64)]) -> Result<f64, AnalysisError> {
    if points.len() < 3 {
        return Err(AnalysisError::TooFewPoints {
            found: points.len(),
            needed: 3,
        });
    }
    if let Some(index) = points.iter().position(|&(k, e)| !(k > 0.0 && e > 0.0)) {
        return Err(AnalysisError::NonpositiveError { index });
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(k, e)| (k.ln(), e.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaveformClass {
    pub n_spikes: usize,
    pub n_adp: usize,
    pub suspect: bool,
    pub label: String,
}

/// `"<spikes>-<adp>"`, with `" (suspect)"` appended when an ADP sits inside
/// an oscillation run.
pub fn classify_cycle(cycle: &ApCycle, events: &[OscillationEvent]) -> WaveformClass {
    let suspect = cycle
        .adps
        .iter()
        .any(|a| a.suspect || covering_event(events, a.peak.index).is_some());
    let n_spikes = cycle.spikes.len();
    let n_adp = cycle.adps.len();
    let mut label = format!("{n_spikes}-{n_adp}");
    if suspect {
        label.push_str(" (suspect)");
    }
    WaveformClass {
        n_spikes,
        n_adp,
        suspect,
        label,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub skip: usize,
    pub cycle_index: usize,
    pub psd: bool,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            skip: DEFAULT_SKIP,
            cycle_index: DEFAULT_SKIP,
            psd: true,
        }
    }
}

/// Everything measured on one trace. Measurements whose preconditions fail
/// are left empty and the reason is listed in `unmet`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub scheme: SchemeKind,
    pub step: f64,
    pub compartment: Option<usize>,
    pub stable: bool,
    pub cycles: usize,
    pub classes: Vec<String>,
    pub class_histogram: BTreeMap<String, usize>,
    pub stats: Option<CycleStats>,
    pub accuracy: Option<AccuracyReport>,
    pub oscillation_rms: Vec<f64>,
    pub psd: Option<SpectralDensity>,
    pub unmet: Vec<String>,
}

pub fn analyze_trace(
    trace: &SimTrace,
    reference: Option<&SimTrace>,
    options: &AnalysisOptions,
) -> AnalysisReport {
    let mut report = AnalysisReport {
        scheme: trace.scheme,
        step: trace.step,
        compartment: trace.compartments.first().copied(),
        stable: !trace.is_unstable(),
        cycles: 0,
        classes: Vec::new(),
        class_histogram: BTreeMap::new(),
        stats: None,
        accuracy: None,
        oscillation_rms: Vec::new(),
        psd: None,
        unmet: Vec::new(),
    };
    let Some(v) = trace.voltages.first() else {
        report.unmet.push("trace records no compartment".into());
        return report;
    };
    let events = detect_oscillations(v);
    match segment_cycles(&trace.times, v) {
        Ok(cycles) => {
            report.cycles = cycles.len();
            for c in &cycles {
                let class = classify_cycle(c, &events);
                *report.class_histogram.entry(class.label.clone()).or_default() += 1;
                report.classes.push(class.label);
            }
            report.oscillation_rms = oscillation_rms_per_cycle(&events, &cycles);
            match cycle_stats(&cycles, options.skip) {
                Ok(s) => report.stats = Some(s),
                Err(e) => report.unmet.push(format!("cycle statistics: {e}")),
            }
        }
        Err(e) => report.unmet.push(format!("segmentation: {e}")),
    }
    if let Some(r) = reference {
        match accuracy_rms(trace, r, options.cycle_index) {
            Ok(a) => report.accuracy = Some(a),
            Err(e) => report.unmet.push(format!("accuracy: {e}")),
        }
    }
    if options.psd {
        match welch_psd(v, 1.0 / trace.step) {
            Ok(p) => report.psd = Some(p),
            Err(e) => report.unmet.push(format!("spectrum: {e}")),
        }
    }
    report
}
