use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use hhcable::analysis::{
    analyze_trace, detect_spikes, empirical_order, AnalysisOptions, AnalysisReport,
};
use hhcable::channels::load_channels;
use hhcable::integrators::{Failure, SimOptions, SimTrace};
use hhcable::stability::{
    growth_curve_csv, growth_span, reference_cycle, stability_report, ReferenceCycle, ScanOptions,
    SchemeCoefficients, StabilityError,
};
use hhcable::{run_simulation, Model, SchemeKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{validate_steps, Experiment};
use crate::table::{opt, Table};
use crate::CliError;

/// Files keyed by path (relative paths land under the output directory),
/// plus what the command wants said on stdout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outputs {
    pub files: BTreeMap<PathBuf, Vec<u8>>,
    pub log: String,
    pub unstable: bool,
    pub unmet: Vec<String>,
}

impl Outputs {
    fn add(&mut self, name: impl Into<PathBuf>, bytes: impl Into<Vec<u8>>) {
        self.files.insert(name.into(), bytes.into());
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) {
        let text = serde_json::to_string_pretty(value).expect("report types serialize");
        self.add(name, text + "\n");
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Command-line values that replace configured ones.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scheme: Option<SchemeKind>,
    pub dt: Option<f64>,
    pub duration: Option<f64>,
    pub out: Option<PathBuf>,
}

impl Experiment {
    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(s) = o.scheme {
            self.schemes = vec![s];
        }
        if let Some(k) = o.dt {
            self.steps = vec![k];
        }
        if let Some(d) = o.duration {
            self.duration = d;
        }
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        validate_steps(&self.steps, self.duration)
    }

    fn options(&self) -> SimOptions {
        SimOptions {
            rk_gates: self.rk_gates,
            initial_state: self.initial_state.clone(),
            ..SimOptions::default()
        }
    }

    fn analysis_options(&self) -> AnalysisOptions {
        AnalysisOptions {
            skip: self.analysis.skip,
            cycle_index: self.analysis.cycle_index,
            psd: self.analysis.psd,
        }
    }

    fn simulate(&self, scheme: SchemeKind, k: f64, duration: f64) -> Result<SimTrace, CliError> {
        run_simulation(&self.model, scheme, k, duration, &self.record, &self.options())
            .map_err(|e| CliError::Config(e.to_string()))
    }

    fn stability_path(&self) -> Vec<usize> {
        self.stability
            .path
            .clone()
            .unwrap_or_else(|| self.model.tree().tip_to_tip_path())
    }

    fn reference_cycle(&self) -> Result<ReferenceCycle, CliError> {
        let duration = self.stability.duration.unwrap_or(self.duration);
        reference_cycle(
            &self.model,
            SchemeKind::Hcn,
            self.stability.reference_step,
            duration,
            self.record[0],
            self.stability_path(),
        )
        .map_err(stability_error)
    }
}

fn stability_error(e: StabilityError) -> CliError {
    match e {
        StabilityError::ReferenceUnstable(r) => CliError::Unstable(format!("reference run: {r}")),
        StabilityError::Simulation(s) => CliError::Config(s.to_string()),
        StabilityError::BadPath { .. } => CliError::Config(e.to_string()),
        other => CliError::Precondition(other.to_string()),
    }
}

/// Worker pool with `jobs` threads, or rayon's default when `None`.
pub fn pool(jobs: Option<usize>) -> Result<rayon::ThreadPool, CliError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| CliError::Other(e.to_string()))
}

/// `ftcs_k12us`, `hcn_k2.5us`.
pub fn trace_stem(scheme: SchemeKind, k: f64) -> String {
    format!("{}_k{}us", scheme, (k * 1e9).round() / 1e3)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub scheme: SchemeKind,
    pub step_s: f64,
    pub duration_s: f64,
    pub model_hash: String,
    pub compartments: Vec<usize>,
    pub samples: usize,
    pub unstable: bool,
    pub failure: Option<Failure>,
    pub digest: String,
}

impl TraceMeta {
    fn of(trace: &SimTrace) -> Self {
        TraceMeta {
            scheme: trace.scheme,
            step_s: trace.step,
            duration_s: trace.duration,
            model_hash: trace.model_hash.clone(),
            compartments: trace.compartments.clone(),
            samples: trace.times.len(),
            unstable: trace.is_unstable(),
            failure: trace.failure.clone(),
            digest: trace.digest(),
        }
    }
}

/// One simulation, written as CSV plus a JSON metadata companion.
pub fn cmd_run(exp: &Experiment) -> Result<Outputs, CliError> {
    let (&[scheme], &[k]) = (exp.schemes.as_slice(), exp.steps.as_slice()) else {
        return Err(CliError::Config(
            "run needs exactly one scheme and one step; pass --scheme and --dt".into(),
        ));
    };
    let trace = exp.simulate(scheme, k, exp.duration)?;
    let stem = trace_stem(scheme, k);
    let meta = TraceMeta::of(&trace);
    let mut out = Outputs::default();
    out.add(format!("{stem}.csv"), trace.to_csv_string());
    out.json(&format!("{stem}.json"), &meta);
    if let (Some(path), Some(state)) = (&exp.save_final_state, &trace.final_state) {
        let text = serde_json::to_string(state).expect("state serializes");
        out.add(path.clone(), text);
    }
    let _ = writeln!(out.log, "{stem}: {} samples", meta.samples);
    if let Some(f) = &trace.failure {
        let _ = writeln!(out.log, "{stem}: unstable at t = {} s ({})", f.time, f.reason);
        out.unstable = true;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub digest: String,
    pub samples: usize,
    pub failure: Option<Failure>,
    pub analysis: AnalysisReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub model_hash: String,
    pub duration_s: f64,
    pub cells: Vec<CellReport>,
    pub unmet: Vec<String>,
}

fn run_cell(
    exp: &Experiment,
    scheme: SchemeKind,
    k: f64,
    reference: Option<&SimTrace>,
    trace_dir: Option<&Path>,
) -> Result<CellReport, CliError> {
    let same_as_reference = reference.is_some_and(|r| r.step == k);
    let owned;
    let trace = if same_as_reference {
        reference.expect("checked above")
    } else {
        owned = exp.simulate(scheme, k, exp.duration)?;
        &owned
    };
    if let Some(dir) = trace_dir {
        let path = dir.join(format!("{}.csv", trace_stem(scheme, k)));
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        trace
            .write_csv(std::io::BufWriter::new(file))
            .map_err(|e| CliError::io(&path, e))?;
    }
    let reference = reference.filter(|r| !r.is_unstable());
    Ok(CellReport {
        digest: trace.digest(),
        samples: trace.times.len(),
        failure: trace.failure.clone(),
        analysis: analyze_trace(trace, reference, &exp.analysis_options()),
    })
}

/// Every (scheme, step) cell, run on `jobs` workers and merged in grid order.
/// Traces go straight to `trace_dir` when given; the reports are returned.
pub fn cmd_sweep(
    exp: &Experiment,
    jobs: Option<usize>,
    trace_dir: Option<&Path>,
) -> Result<Outputs, CliError> {
    let workers = pool(jobs)?;
    let (references, cells, growth) = workers.install(|| -> Result<_, CliError> {
        let references: Vec<Option<SimTrace>> = exp
            .schemes
            .par_iter()
            .map(|&s| {
                exp.analysis
                    .accuracy
                    .then(|| exp.simulate(s, exp.analysis.reference_step, exp.duration))
                    .transpose()
            })
            .collect::<Result<_, _>>()?;
        let grid: Vec<(usize, f64)> = (0..exp.schemes.len())
            .flat_map(|i| exp.steps.iter().map(move |&k| (i, k)))
            .collect();
        let cells: Vec<CellReport> = grid
            .par_iter()
            .map(|&(i, k)| run_cell(exp, exp.schemes[i], k, references[i].as_ref(), trace_dir))
            .collect::<Result<_, _>>()?;
        let growth = exp.analysis.growth_span.then(|| exp.reference_cycle());
        Ok((references, cells, growth))
    })?;
    drop(references);

    let mut out = Outputs::default();
    let mut unmet = Vec::new();
    let mut cells_t = Table::new(["scheme", "step_s", "stable", "failure_time_s", "samples", "cycles", "digest"]);
    let mut intervals = Table::new([
        "scheme",
        "largest_stable_step_s",
        "first_unstable_step_s",
        "stable_cells",
        "cells",
    ]);
    let mut accuracy = Table::new(["scheme", "step_s", "rms_v", "shift_s"]);
    let mut stats = Table::new([
        "scheme",
        "step_s",
        "cycles_used",
        "min_mean_v",
        "min_std_v",
        "max_mean_v",
        "max_std_v",
        "period_mean_s",
        "period_std_s",
    ]);
    let mut classes = Table::new(["scheme", "step_s", "cycle", "label"]);
    let mut osc = Table::new(["scheme", "step_s", "cycle", "rms_v"]);
    let mut psd: BTreeMap<SchemeKind, Table> = BTreeMap::new();

    for (si, &scheme) in exp.schemes.iter().enumerate() {
        let row = &cells[si * exp.steps.len()..(si + 1) * exp.steps.len()];
        let first_bad = row.iter().position(|c| c.failure.is_some());
        let largest_ok = match first_bad {
            Some(0) => None,
            Some(i) => Some(row[i - 1].analysis.step),
            None => row.last().map(|c| c.analysis.step),
        };
        intervals.push([
            scheme.to_string(),
            opt(largest_ok),
            opt(first_bad.map(|i| row[i].analysis.step)),
            row.iter().filter(|c| c.failure.is_none()).count().to_string(),
            row.len().to_string(),
        ]);
        for c in row {
            let a = &c.analysis;
            let k = a.step.to_string();
            cells_t.push([
                scheme.to_string(),
                k.clone(),
                a.stable.to_string(),
                opt(c.failure.as_ref().map(|f| f.time)),
                c.samples.to_string(),
                a.cycles.to_string(),
                c.digest.clone(),
            ]);
            if let Some(r) = &a.accuracy {
                accuracy.push([scheme.to_string(), k.clone(), r.rms.to_string(), r.shift.to_string()]);
            }
            if let Some(s) = &a.stats {
                stats.push([
                    scheme.to_string(),
                    k.clone(),
                    s.cycles_used.to_string(),
                    s.min_voltage.mean.to_string(),
                    s.min_voltage.std.to_string(),
                    s.max_voltage.mean.to_string(),
                    s.max_voltage.std.to_string(),
                    s.period.mean.to_string(),
                    s.period.std.to_string(),
                ]);
            }
            for (n, label) in a.classes.iter().enumerate() {
                classes.push([scheme.to_string(), k.clone(), (n + 1).to_string(), label.clone()]);
            }
            for (n, r) in a.oscillation_rms.iter().enumerate() {
                osc.push([scheme.to_string(), k.clone(), (n + 1).to_string(), r.to_string()]);
            }
            if let Some(p) = &a.psd {
                let t = psd.entry(scheme).or_insert_with(|| {
                    let mut h = vec!["step_s".to_string()];
                    h.extend(p.frequencies.iter().map(|f| format!("f_{f}")));
                    Table::new(h)
                });
                let mut r = vec![k.clone()];
                r.extend(p.power.iter().map(|x| x.to_string()));
                t.push(r);
            }
        }
    }
    out.add("cells.csv", cells_t.to_csv());
    out.add("stable_intervals.csv", intervals.to_csv());
    out.add("accuracy.csv", accuracy.to_csv());
    out.add("stats.csv", stats.to_csv());
    out.add("classes.csv", classes.to_csv());
    out.add("oscillation_rms.csv", osc.to_csv());
    for (scheme, t) in &psd {
        out.add(format!("psd/{scheme}.csv"), t.to_csv());
    }
    match growth {
        Some(Ok(rc)) => {
            let mut t = Table::new(["step_s", "g_min", "g_max"]);
            let options = ScanOptions {
                window: None,
                remove_mean: exp.stability.remove_mean,
            };
            for &k in &exp.steps {
                let (lo, hi) = growth_span(&rc.samples, exp.model.couplings(), SchemeKind::Hcn, k, &options)
                    .map_err(stability_error)?;
                t.push([k, lo, hi]);
            }
            out.add("hcn_growth_span.csv", t.to_csv());
        }
        Some(Err(e)) => unmet.push(format!("hcn growth span: {e}")),
        None => {}
    }
    for c in &cells {
        for u in &c.analysis.unmet {
            unmet.push(format!("{}: {u}", trace_stem(c.analysis.scheme, c.analysis.step)));
        }
    }
    let _ = writeln!(out.log, "{}", intervals.to_csv().trim_end());
    out.json(
        "report.json",
        &SweepReport {
            model_hash: exp.model.hash(),
            duration_s: exp.duration,
            cells,
            unmet: unmet.clone(),
        },
    );
    out.unmet = unmet;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityFile {
    pub reference_scheme: SchemeKind,
    pub reference_step_s: f64,
    pub cycle_window_s: (f64, f64),
    pub cycle_index: usize,
    pub cycles: usize,
    pub path: Vec<usize>,
    pub remove_mean: bool,
    pub report: hhcable::stability::StabilityReport,
}

/// Von Neumann and Butcher limits from one full cycle of an HCN reference.
pub fn cmd_stability(exp: &Experiment) -> Result<Outputs, CliError> {
    let rc = exp.reference_cycle()?;
    let options = ScanOptions {
        window: None,
        remove_mean: exp.stability.remove_mean,
    };
    let report = stability_report(&rc.samples, exp.model.couplings(), &options).map_err(stability_error)?;
    let mut out = Outputs::default();
    let mut centroid = Table::new(["time_s", "theta_rad"]);
    for (t, th) in &report.centroid_series {
        centroid.push([t, th]);
    }
    out.add("centroid.csv", centroid.to_csv());
    if let Some(ftcs) = report.schemes.iter().find(|s| s.scheme == SchemeKind::Ftcs) {
        let c = exp.model.couplings()[ftcs.compartment].clone();
        let coeffs = SchemeCoefficients::from_couplings(ftcs.k_min, c.c1, c.c2_sum(), ftcs.theta_used);
        out.add("growth_curves.csv", growth_curve_csv(&coeffs, &exp.steps));
    }
    let mut limits = Table::new([
        "scheme",
        "limit_s",
        "butcher_limit_s",
        "oscillation_onset_s",
        "theta_rad",
        "compartment",
        "time_s",
    ]);
    for s in &report.schemes {
        limits.push([
            s.scheme.to_string(),
            opt(s.limit_seconds),
            opt(s.butcher_limit_seconds),
            opt(s.oscillation_onset_seconds),
            s.theta_used.to_string(),
            s.compartment.to_string(),
            s.time.to_string(),
        ]);
    }
    out.add("limits.csv", limits.to_csv());
    out.log = limits.to_csv();
    out.json(
        "stability.json",
        &StabilityFile {
            reference_scheme: SchemeKind::Hcn,
            reference_step_s: exp.stability.reference_step,
            cycle_window_s: rc.window,
            cycle_index: rc.cycle_index,
            cycles: rc.cycles,
            path: exp.stability_path(),
            remove_mean: exp.stability.remove_mean,
            report,
        },
    );
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderRow {
    pub scheme: SchemeKind,
    pub reference_step_s: f64,
    /// `(k, rms)` down the ladder.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
}

/// RMS over every recorded series at the coarse trace's sample times.
fn ladder_error(coarse: &SimTrace, fine: &SimTrace, stride: usize) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (c, f) in coarse.voltages.iter().zip(&fine.voltages) {
        for (i, v) in c.iter().enumerate() {
            let d = v - f[i * stride];
            acc += d * d;
            n += 1;
        }
    }
    (acc / n as f64).sqrt()
}

/// The same model with every maximal conductance scaled.
pub fn scaled_model(exp: &Experiment, scale: f64) -> Result<Model, CliError> {
    let mut channels =
        load_channels(&exp.channels_path).map_err(|e| CliError::Config(e.to_string()))?;
    for c in &mut channels.channels {
        c.g_max *= scale;
    }
    Model::new(exp.model.tree().clone(), channels).map_err(|e| CliError::Config(e.to_string()))
}

/// Halving ladder `k, k/2, ...` against a `k/refine` reference of the same
/// scheme, on the model with conductances scaled into a spike-free regime.
pub fn cmd_order(exp: &Experiment, jobs: Option<usize>) -> Result<Outputs, CliError> {
    let o = &exp.order;
    let top = 1usize << (o.levels.max(1) - 1);
    if o.levels < 3 || !o.refine.is_multiple_of(top) || o.refine <= top {
        return Err(CliError::Config(format!(
            "order: need levels >= 3 and refine a multiple of 2^(levels-1) beyond it; got levels {} refine {}",
            o.levels, o.refine
        )));
    }
    let model = scaled_model(exp, o.channel_scale)?;
    let options = SimOptions {
        rk_gates: exp.rk_gates,
        ..SimOptions::default()
    };
    let run = |s: SchemeKind, k: f64| -> Result<SimTrace, CliError> {
        let t = run_simulation(&model, s, k, o.duration, &exp.record, &options)
            .map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(f) = &t.failure {
            return Err(CliError::Unstable(format!("{} at k = {k}: {}", s, f.reason)));
        }
        Ok(t)
    };
    let rows: Vec<OrderRow> = pool(jobs)?.install(|| {
        exp.schemes
            .par_iter()
            .map(|&s| {
                let k_ref = o.base_step / o.refine as f64;
                let fine = run(s, k_ref)?;
                for (series, id) in fine.voltages.iter().zip(&fine.compartments) {
                    let spikes = detect_spikes(&fine.times, series).len();
                    if spikes > 0 {
                        return Err(CliError::Precondition(format!(
                            "{s}: {spikes} spikes at compartment {id}; lower order.channel_scale"
                        )));
                    }
                }
                let mut points = Vec::new();
                for level in 0..o.levels {
                    let div = 1usize << level;
                    let k = o.base_step / div as f64;
                    let coarse = run(s, k)?;
                    points.push((k, ladder_error(&coarse, &fine, o.refine / div)));
                }
                let slope = empirical_order(&points).map_err(|e| CliError::Precondition(format!("{s}: {e}")))?;
                Ok(OrderRow {
                    scheme: s,
                    reference_step_s: k_ref,
                    points,
                    slope,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })?;
    let mut out = Outputs::default();
    let mut t = Table::new(["scheme", "step_s", "rms_v"]);
    let mut summary = Table::new(["scheme", "slope"]);
    for r in &rows {
        for (k, e) in &r.points {
            t.push([r.scheme.to_string(), k.to_string(), e.to_string()]);
        }
        summary.push([r.scheme.to_string(), r.slope.to_string()]);
    }
    out.add("order.csv", t.to_csv());
    out.add("order_slopes.csv", summary.to_csv());
    out.json("order.json", &rows);
    out.log = summary.to_csv();
    Ok(out)
}

pub fn read_trace(path: &Path) -> Result<SimTrace, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        SimTrace::from_json(&text)
    } else {
        SimTrace::from_csv_str(&text)
    };
    parsed.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Re-analyze saved traces, optionally against a saved reference.
pub fn cmd_analyze(
    traces: &[PathBuf],
    reference: Option<&Path>,
    options: &AnalysisOptions,
) -> Result<Outputs, CliError> {
    if traces.is_empty() {
        return Err(CliError::Config("analyze needs at least one trace file".into()));
    }
    let reference = reference.map(read_trace).transpose()?;
    let mut reports = Vec::new();
    let mut out = Outputs::default();
    for path in traces {
        let trace = read_trace(path)?;
        let r = analyze_trace(&trace, reference.as_ref(), options);
        let _ = writeln!(
            out.log,
            "{}: {} cycles, classes {:?}",
            path.display(),
            r.cycles,
            r.class_histogram
        );
        for u in &r.unmet {
            out.unmet.push(format!("{}: {u}", path.display()));
        }
        out.unstable |= !r.stable;
        reports.push(r);
    }
    out.json("analysis.json", &reports);
    Ok(out)
}
