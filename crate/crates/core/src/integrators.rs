//! Time stepping of the coupled gate/voltage system.
//!
//! Every compartment obeys the frozen-neighbor linear ODE
//! `dV_j/dt = A_j - B_j V_j` with
//!
//! ```text
//! A_j = alpha E_L + sum_i beta_i E_i + c1 V_parent + sum_q c2_q V_q
//! B_j = alpha + sum_i beta_i + c1 + sum_q c2_q
//! ```
//!
//! where `alpha = 1/(r_m c_m)` and `beta_i = g_i / c_m`.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channels::{
    calcium_step, channel_conductance, step_channel_gates, CalciumPool, ChannelError, ChannelSet,
    ChannelState, GateRule,
};
use crate::morphology::{axial_couplings, AxialCoupling, MorphologyTree};

/// Membrane voltage magnitude beyond which a run is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 10.0;
/// Pivots smaller than this in magnitude make a tree system singular.
pub const PIVOT_FLOOR: f64 = 1e-300;
/// Initial membrane voltage of every compartment.
pub const INITIAL_VOLTAGE: f64 = -0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Ftcs,
    Btcs,
    ExponentialEuler,
    Hcn,
    Rk21,
    Rk41,
    Taylor2,
}

impl SchemeKind {
    pub const ALL: [SchemeKind; 7] = [
        SchemeKind::Ftcs,
        SchemeKind::Btcs,
        SchemeKind::ExponentialEuler,
        SchemeKind::Hcn,
        SchemeKind::Rk21,
        SchemeKind::Rk41,
        SchemeKind::Taylor2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::Ftcs => "ftcs",
            SchemeKind::Btcs => "btcs",
            SchemeKind::ExponentialEuler => "exponential_euler",
            SchemeKind::Hcn => "hcn",
            SchemeKind::Rk21 => "rk21",
            SchemeKind::Rk41 => "rk41",
            SchemeKind::Taylor2 => "taylor2",
        }
    }

    /// The second-order Taylor scheme is a supplementary method and is
    /// marked as such in reports.
    pub fn supplementary(self) -> bool {
        self == SchemeKind::Taylor2
    }

    pub fn is_implicit(self) -> bool {
        matches!(self, SchemeKind::Btcs | SchemeKind::Hcn)
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        Ok(match key.as_str() {
            "ftcs" => SchemeKind::Ftcs,
            "btcs" => SchemeKind::Btcs,
            "exponential_euler" | "exp_euler" | "expeuler" => SchemeKind::ExponentialEuler,
            "hcn" => SchemeKind::Hcn,
            "rk21" => SchemeKind::Rk21,
            "rk41" => SchemeKind::Rk41,
            "taylor2" | "2ot" => SchemeKind::Taylor2,
            _ => return Err(format!("unknown scheme '{s}'")),
        })
    }
}

/// How the Runge-Kutta schemes advance gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RkGateMode {
    /// Same tableau as the voltage update, with voltage frozen.
    #[default]
    Multistage,
    /// A single forward Euler gate step.
    SingleStage,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StepError {
    #[error("divergence at t = {time} s: compartment {compartment} reached {value} V")]
    DivergenceDetected {
        time: f64,
        compartment: usize,
        value: f64,
    },
    #[error("singular tree system: pivot {pivot:e} at compartment {compartment}")]
    SingularSystem { compartment: usize, pivot: f64 },
    #[error("taylor2 needs two stored derivative vectors, found {found}")]
    InsufficientHistory { found: usize },
    #[error(transparent)]
    Gate(#[from] ChannelError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("step size must be positive and finite, got {0}")]
    InvalidStep(f64),
    #[error("duration {duration} s must be at least the step size {step} s")]
    InvalidDuration { duration: f64, step: f64 },
    #[error("recorded compartment {0} does not exist")]
    UnknownCompartment(usize),
    #[error("initial state does not match the model: {0}")]
    StateMismatch(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

/// Immutable model data shared by every simulation of one configuration.
#[derive(Debug, Clone)]
pub struct Model {
    tree: MorphologyTree,
    couplings: Vec<AxialCoupling>,
    channels: ChannelSet,
    /// `hosted[j][i]`: channel `i` is present in compartment `j`.
    hosted: Vec<Vec<bool>>,
}

impl Model {
    pub fn new(tree: MorphologyTree, channels: ChannelSet) -> Result<Self, ChannelError> {
        channels.validate()?;
        for c in &channels.channels {
            if let Some(ids) = &c.compartments {
                if let Some(&bad) = ids.iter().find(|&&id| id >= tree.len()) {
                    return Err(ChannelError::Invalid {
                        name: c.name.clone(),
                        reason: format!("compartment {bad} does not exist"),
                    });
                }
            }
        }
        let hosted = (0..tree.len())
            .map(|j| channels.channels.iter().map(|c| c.hosted_by(j)).collect())
            .collect();
        Ok(Model {
            couplings: axial_couplings(&tree),
            tree,
            channels,
            hosted,
        })
    }

    /// Leak-only model.
    pub fn passive(tree: MorphologyTree) -> Self {
        Model::new(
            tree,
            ChannelSet {
                channels: Vec::new(),
                calcium: None,
            },
        )
        .expect("an empty channel set is always valid")
    }

    pub fn tree(&self) -> &MorphologyTree {
        &self.tree
    }

    pub fn couplings(&self) -> &[AxialCoupling] {
        &self.couplings
    }

    pub fn channels(&self) -> &ChannelSet {
        &self.channels
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    /// Hex SHA-256 of the canonical JSON rendering of geometry and channels.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&(self.tree.compartments(), &self.channels))
            .expect("model data serializes");
        hex_sha256(canonical.as_bytes())
    }

    /// `(K, S)` for compartment `j`: `K = alpha + sum beta_i` and
    /// `S = alpha E_L + sum beta_i E_i`.
    pub fn membrane_terms(&self, j: usize, gates: &ChannelState) -> (f64, f64) {
        let comp = self.tree.compartment(j);
        let alpha = comp.leak_rate();
        let mut k = alpha;
        let mut s = alpha * comp.e_leak;
        for (i, spec) in self.channels.channels.iter().enumerate() {
            if !self.hosted[j][i] {
                continue;
            }
            let beta = channel_conductance(spec, gates[i]) / comp.c_m;
            k += beta;
            s += beta * spec.reversal;
        }
        (k, s)
    }

    fn neighbor_drive(&self, j: usize, v: &[f64]) -> f64 {
        let c = &self.couplings[j];
        let mut drive = self.tree.parent(j).map_or(0.0, |p| c.c1 * v[p]);
        for &(q, c2) in &c.c2 {
            drive += c2 * v[q];
        }
        drive
    }

    /// Calcium current of compartment `j` in amperes (negative inward).
    fn calcium_current(&self, j: usize, v: f64, gates: &ChannelState) -> f64 {
        let area = self.tree.compartment(j).area();
        self.channels
            .channels
            .iter()
            .enumerate()
            .filter(|(i, spec)| spec.carries_calcium && self.hosted[j][*i])
            .map(|(i, spec)| channel_conductance(spec, gates[i]) * area * (v - spec.reversal))
            .sum()
    }

    /// Initial state: uniform voltage, gates at their steady state there,
    /// empty calcium pool.
    pub fn initial_state(&self, voltage: f64) -> SimState {
        let gates = (0..self.len())
            .map(|_| {
                self.channels
                    .channels
                    .iter()
                    .map(|c| c.steady_gates(voltage, 0.0))
                    .collect()
            })
            .collect();
        SimState {
            time: 0.0,
            steps: 0,
            v: vec![voltage; self.len()],
            gates,
            calcium: vec![0.0; self.len()],
            history: VecDeque::new(),
            gates_staggered: false,
        }
    }
}

/// Mutable state of one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub time: f64,
    pub steps: u64,
    pub v: Vec<f64>,
    pub gates: Vec<ChannelState>,
    /// Calcium pool concentration per compartment.
    pub calcium: Vec<f64>,
    /// Stored right-hand sides `A - B V` of previous steps, oldest first.
    /// Only the lagging Taylor stencil reads them.
    pub history: VecDeque<Vec<f64>>,
    /// Gates sit half a step ahead of the voltage (HCN only).
    pub gates_staggered: bool,
}

impl SimState {
    fn check_against(&self, model: &Model) -> Result<(), SimError> {
        let n = model.len();
        let nc = model.channels.channels.len();
        if self.v.len() != n || self.calcium.len() != n || self.gates.len() != n {
            return Err(SimError::StateMismatch(format!(
                "expected {n} compartments"
            )));
        }
        if self.gates.iter().any(|g| g.len() != nc) {
            return Err(SimError::StateMismatch(format!("expected {nc} channels")));
        }
        Ok(())
    }
}

/// Frozen-neighbor coefficients `(A, B)` of compartment `j` with the
/// state's current gates.
pub fn coefficients_ab(model: &Model, state: &SimState, j: usize) -> (f64, f64) {
    let (k, s) = model.membrane_terms(j, &state.gates[j]);
    (
        s + model.neighbor_drive(j, &state.v),
        k + model.couplings[j].total(),
    )
}

/// Tree-sparse linear system. Row `j` reads
/// `diagonal[j] V_j + lower[j] V_parent(j) + sum_q upper[q] V_q = rhs[j]`
/// with `q` ranging over the children of `j`; `lower` and `upper` are
/// indexed by the child end of each edge and unused at the root.
#[derive(Debug, Clone, PartialEq)]
pub struct HinesSystem {
    pub diagonal: Vec<f64>,
    /// Coefficient of the parent's unknown in the child's row.
    pub lower: Vec<f64>,
    /// Coefficient of the child's unknown in the parent's row.
    pub upper: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl HinesSystem {
    pub fn zeros(n: usize) -> Self {
        HinesSystem {
            diagonal: vec![0.0; n],
            lower: vec![0.0; n],
            upper: vec![0.0; n],
            rhs: vec![0.0; n],
        }
    }
}

/// Two-pass elimination: children are folded into parents in decreasing id
/// order, then values are recovered root first.
pub fn hines_solve(system: &HinesSystem, tree: &MorphologyTree) -> Result<Vec<f64>, StepError> {
    let n = tree.len();
    let mut d = system.diagonal.clone();
    let mut rhs = system.rhs.clone();
    for j in (1..n).rev() {
        let p = tree.parent(j).expect("non-root compartments have parents");
        if d[j].abs() < PIVOT_FLOOR {
            return Err(StepError::SingularSystem {
                compartment: j,
                pivot: d[j],
            });
        }
        let factor = system.upper[j] / d[j];
        d[p] -= factor * system.lower[j];
        rhs[p] -= factor * rhs[j];
    }
    if d[0].abs() < PIVOT_FLOOR {
        return Err(StepError::SingularSystem {
            compartment: 0,
            pivot: d[0],
        });
    }
    let mut x = vec![0.0; n];
    x[0] = rhs[0] / d[0];
    for j in 1..n {
        let p = tree.parent(j).expect("non-root compartments have parents");
        x[j] = (rhs[j] - system.lower[j] * x[p]) / d[j];
    }
    Ok(x)
}

/// System for `(V* - V)/dt = S - K V* + neighbor terms of V*`.
fn implicit_system(model: &Model, state: &SimState, dt: f64) -> HinesSystem {
    let n = model.len();
    let mut sys = HinesSystem::zeros(n);
    for j in 0..n {
        let (k, s) = model.membrane_terms(j, &state.gates[j]);
        let c = &model.couplings[j];
        sys.diagonal[j] = 1.0 + dt * (k + c.total());
        sys.rhs[j] = state.v[j] + dt * s;
        if model.tree.parent(j).is_some() {
            sys.lower[j] = -dt * c.c1;
        }
        for &(q, c2) in &c.c2 {
            sys.upper[q] = -dt * c2;
        }
    }
    sys
}

/// Advance every gate and calcium pool by `dt` with voltages `state.v`.
/// Calcium uses the current at the start of the step.
fn advance_gates(
    model: &Model,
    state: &mut SimState,
    dt: f64,
    rule: GateRule,
) -> Result<(), ChannelError> {
    let pool = model.channels.calcium;
    for j in 0..model.len() {
        let i_ca = pool.map(|_| model.calcium_current(j, state.v[j], &state.gates[j]));
        let ca = state.calcium[j];
        for (i, spec) in model.channels.channels.iter().enumerate() {
            state.gates[j][i] = step_channel_gates(spec, state.gates[j][i], state.v[j], ca, dt, rule)?;
        }
        if let (Some(pool), Some(i_ca)) = (pool, i_ca) {
            let current = CalciumPool {
                concentration: ca,
                ..pool
            };
            state.calcium[j] = calcium_step(current, i_ca, dt).concentration;
        }
    }
    Ok(())
}

/// Right-hand side `A - B V` for every compartment.
fn derivative(model: &Model, gates: &[ChannelState], v: &[f64]) -> Vec<f64> {
    (0..model.len())
        .map(|j| {
            let (k, s) = model.membrane_terms(j, &gates[j]);
            let c = &model.couplings[j];
            s + model.neighbor_drive(j, v) - (k + c.total()) * v[j]
        })
        .collect()
}

fn commit(state: &mut SimState, v: Vec<f64>, k: f64) -> Result<(), StepError> {
    state.steps += 1;
    state.time = state.steps as f64 * k;
    for (j, &x) in v.iter().enumerate() {
        if !x.is_finite() || x.abs() > DIVERGENCE_THRESHOLD {
            return Err(StepError::DivergenceDetected {
                time: state.time,
                compartment: j,
                value: x,
            });
        }
    }
    state.v = v;
    Ok(())
}

pub fn step_ftcs(model: &Model, state: &mut SimState, k: f64) -> Result<(), StepError> {
    advance_gates(model, state, k, GateRule::ForwardEuler)?;
    let f = derivative(model, &state.gates, &state.v);
    let v = state.v.iter().zip(&f).map(|(v, f)| v + k * f).collect();
    commit(state, v, k)
}

pub fn step_btcs(model: &Model, state: &mut SimState, k: f64) -> Result<(), StepError> {
    advance_gates(model, state, k, GateRule::BackwardEuler)?;
    let v = hines_solve(&implicit_system(model, state, k), &model.tree)?;
    commit(state, v, k)
}

pub fn step_exp_euler(model: &Model, state: &mut SimState, k: f64) -> Result<(), StepError> {
    advance_gates(model, state, k, GateRule::ExactExponential)?;
    let v = (0..model.len())
        .map(|j| {
            let (a, b) = coefficients_ab(model, state, j);
            let inf = a / b;
            inf + (state.v[j] - inf) * (-b * k).exp()
        })
        .collect();
    commit(state, v, k)
}

/// Gates live at half-integer times: the first call moves them from `t_0` to
/// `t_{1/2}`, later calls advance them a full step centred on the current
/// voltage.
pub fn step_hcn(model: &Model, state: &mut SimState, k: f64) -> Result<(), StepError> {
    let gate_dt = if state.gates_staggered { k } else { 0.5 * k };
    advance_gates(model, state, gate_dt, GateRule::Trapezoidal)?;
    state.gates_staggered = true;
    let half = hines_solve(&implicit_system(model, state, 0.5 * k), &model.tree)?;
    let v = half
        .iter()
        .zip(&state.v)
        .map(|(h, v)| 2.0 * h - v)
        .collect();
    commit(state, v, k)
}

/// Frozen-coefficient stage sum `k f (1 - Bk/2)` or its four-stage analogue.
fn rk_update(model: &Model, state: &SimState, k: f64, four_stage: bool) -> Vec<f64> {
    (0..model.len())
        .map(|j| {
            let (a, b) = coefficients_ab(model, state, j);
            let v = state.v[j];
            let k1 = a - b * v;
            if !four_stage {
                let k2 = a - b * (v + k * k1);
                return v + 0.5 * k * (k1 + k2);
            }
            let k2 = a - b * (v + 0.5 * k * k1);
            let k3 = a - b * (v + 0.5 * k * k2);
            let k4 = a - b * (v + k * k3);
            v + k / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        })
        .collect()
}

pub fn step_rk21(
    model: &Model,
    state: &mut SimState,
    k: f64,
    gates: RkGateMode,
) -> Result<(), StepError> {
    let rule = match gates {
        RkGateMode::Multistage => GateRule::Heun,
        RkGateMode::SingleStage => GateRule::ForwardEuler,
    };
    advance_gates(model, state, k, rule)?;
    let v = rk_update(model, state, k, false);
    commit(state, v, k)
}

pub fn step_rk41(
    model: &Model,
    state: &mut SimState,
    k: f64,
    gates: RkGateMode,
) -> Result<(), StepError> {
    let rule = match gates {
        RkGateMode::Multistage => GateRule::RungeKutta4,
        RkGateMode::SingleStage => GateRule::ForwardEuler,
    };
    advance_gates(model, state, k, rule)?;
    let v = rk_update(model, state, k, true);
    commit(state, v, k)
}

/// `V' = V + k f^n + (k/4)(f^n - f^{n-2})` with `f = A - B V`.
pub fn step_taylor2(model: &Model, state: &mut SimState, k: f64) -> Result<(), StepError> {
    if state.history.len() < 2 {
        return Err(StepError::InsufficientHistory {
            found: state.history.len(),
        });
    }
    advance_gates(model, state, k, GateRule::ForwardEuler)?;
    let f = derivative(model, &state.gates, &state.v);
    let lagged = &state.history[state.history.len() - 2];
    let v = (0..model.len())
        .map(|j| state.v[j] + k * f[j] + 0.25 * k * (f[j] - lagged[j]))
        .collect();
    commit(state, v, k)?;
    remember(state, f);
    Ok(())
}

fn remember(state: &mut SimState, f: Vec<f64>) {
    state.history.push_back(f);
    while state.history.len() > 2 {
        state.history.pop_front();
    }
}

/// One step of `scheme`. The Taylor scheme bootstraps with RK21 until two
/// derivative vectors are stored.
pub fn advance(
    model: &Model,
    state: &mut SimState,
    scheme: SchemeKind,
    k: f64,
    rk_gates: RkGateMode,
) -> Result<(), StepError> {
    match scheme {
        SchemeKind::Ftcs => step_ftcs(model, state, k),
        SchemeKind::Btcs => step_btcs(model, state, k),
        SchemeKind::ExponentialEuler => step_exp_euler(model, state, k),
        SchemeKind::Hcn => step_hcn(model, state, k),
        SchemeKind::Rk21 => step_rk21(model, state, k, rk_gates),
        SchemeKind::Rk41 => step_rk41(model, state, k, rk_gates),
        SchemeKind::Taylor2 if state.history.len() >= 2 => step_taylor2(model, state, k),
        SchemeKind::Taylor2 => {
            let mut probe = state.clone();
            advance_gates(model, &mut probe, k, GateRule::ForwardEuler)?;
            let f = derivative(model, &probe.gates, &state.v);
            step_rk21(model, state, k, rk_gates)?;
            remember(state, f);
            Ok(())
        }
    }
}

/// Per-step membrane coefficients, recorded for stability analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSample {
    pub time: f64,
    /// `K = alpha + sum beta_i` per compartment.
    pub k_values: Vec<f64>,
    /// Voltages along the recorded path.
    pub path_voltages: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimOptions {
    #[serde(default)]
    pub rk_gates: RkGateMode,
    /// Record coefficient samples every `stride` steps along this path.
    #[serde(default)]
    pub coefficient_path: Option<Vec<usize>>,
    #[serde(default = "default_stride")]
    pub coefficient_stride: usize,
    /// Only record coefficients with `start <= time <= end`.
    #[serde(default)]
    pub coefficient_window: Option<(f64, f64)>,
    /// Start from this state instead of the resting initial state.
    #[serde(default)]
    pub initial_state: Option<SimState>,
}

fn default_stride() -> usize {
    1
}

impl SimOptions {
    pub fn recording_coefficients(path: Vec<usize>, stride: usize) -> Self {
        SimOptions {
            coefficient_path: Some(path),
            coefficient_stride: stride.max(1),
            ..SimOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub time: f64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub scheme: SchemeKind,
    pub step: f64,
    pub duration: f64,
    pub model_hash: String,
    pub compartments: Vec<usize>,
    pub times: Vec<f64>,
    /// One voltage series per recorded compartment.
    pub voltages: Vec<Vec<f64>>,
    #[serde(default)]
    pub failure: Option<Failure>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficients: Option<Vec<CoefficientSample>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_state: Option<SimState>,
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// `floor(duration / k)`, forgiving representation error when the ratio is
/// meant to be an integer.
pub fn step_count(duration: f64, k: f64) -> u64 {
    let ratio = duration / k;
    let nearest = ratio.round();
    if (ratio - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as u64
    } else {
        ratio.floor() as u64
    }
}

pub fn run_simulation(
    model: &Model,
    scheme: SchemeKind,
    k: f64,
    duration: f64,
    record: &[usize],
    options: &SimOptions,
) -> Result<SimTrace, SimError> {
    if !(k.is_finite() && k > 0.0) {
        return Err(SimError::InvalidStep(k));
    }
    if !(duration.is_finite() && duration >= k) {
        return Err(SimError::InvalidDuration { duration, step: k });
    }
    if let Some(&bad) = record
        .iter()
        .chain(options.coefficient_path.iter().flatten())
        .find(|&&id| id >= model.len())
    {
        return Err(SimError::UnknownCompartment(bad));
    }
    let mut state = match &options.initial_state {
        Some(s) => {
            s.check_against(model)?;
            s.clone()
        }
        None => model.initial_state(INITIAL_VOLTAGE),
    };
    let t0 = state.time;
    let steps = step_count(duration, k);
    let capacity = steps as usize + 1;
    let mut times = Vec::with_capacity(capacity);
    let mut voltages: Vec<Vec<f64>> = record.iter().map(|_| Vec::with_capacity(capacity)).collect();
    let mut coefficients = options.coefficient_path.as_ref().map(|_| Vec::new());
    let stride = options.coefficient_stride.max(1) as u64;

    let sample = |state: &SimState, n: u64, times: &mut Vec<f64>, voltages: &mut [Vec<f64>]| {
        times.push(t0 + n as f64 * k);
        for (series, &id) in voltages.iter_mut().zip(record) {
            series.push(state.v[id]);
        }
    };
    let sample_coefficients = |state: &SimState, n: u64, out: &mut Option<Vec<CoefficientSample>>| {
        if let (Some(out), Some(path)) = (out.as_mut(), options.coefficient_path.as_ref()) {
            let time = t0 + n as f64 * k;
            let inside = options
                .coefficient_window
                .is_none_or(|(a, b)| time >= a && time <= b);
            if n.is_multiple_of(stride) && inside {
                out.push(CoefficientSample {
                    time,
                    k_values: (0..model.len())
                        .map(|j| model.membrane_terms(j, &state.gates[j]).0)
                        .collect(),
                    path_voltages: path.iter().map(|&id| state.v[id]).collect(),
                });
            }
        }
    };

    sample(&state, 0, &mut times, &mut voltages);
    sample_coefficients(&state, 0, &mut coefficients);
    let mut failure = None;
    for n in 1..=steps {
        if let Err(e) = advance(model, &mut state, scheme, k, options.rk_gates) {
            failure = Some(Failure {
                time: t0 + n as f64 * k,
                reason: e.to_string(),
            });
            break;
        }
        sample(&state, n, &mut times, &mut voltages);
        sample_coefficients(&state, n, &mut coefficients);
    }
    Ok(SimTrace {
        scheme,
        step: k,
        duration,
        model_hash: model.hash(),
        compartments: record.to_vec(),
        times,
        voltages,
        final_state: failure.is_none().then_some(state),
        failure,
        coefficients,
    })
}

/// Steady state of the passive cable (channels excluded) with some
/// compartments clamped to fixed voltages.
pub fn passive_steady_state(model: &Model, clamps: &[(usize, f64)]) -> Result<Vec<f64>, StepError> {
    let n = model.len();
    let mut sys = HinesSystem::zeros(n);
    for j in 0..n {
        let comp = model.tree.compartment(j);
        let c = &model.couplings[j];
        let alpha = comp.leak_rate();
        sys.diagonal[j] = alpha + c.total();
        sys.rhs[j] = alpha * comp.e_leak;
        sys.lower[j] = -c.c1;
        for &(q, c2) in &c.c2 {
            sys.upper[q] = -c2;
        }
    }
    for &(j, value) in clamps {
        sys.diagonal[j] = 1.0;
        sys.rhs[j] = value;
        sys.lower[j] = 0.0;
        for &q in model.tree.children(j) {
            sys.upper[q] = 0.0;
        }
    }
    hines_solve(&sys, &model.tree)
}

struct HashWriter<'a>(&'a mut Sha256);

impl Write for HashWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.0.update(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("trace csv line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SimTrace {
    pub fn is_unstable(&self) -> bool {
        self.failure.is_some()
    }

    pub fn series(&self, compartment: usize) -> Option<&[f64]> {
        self.compartments
            .iter()
            .position(|&c| c == compartment)
            .map(|i| self.voltages[i].as_slice())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "# scheme={}", self.scheme)?;
        writeln!(out, "# step_s={}", self.step)?;
        writeln!(out, "# duration_s={}", self.duration)?;
        writeln!(out, "# model_hash={}", self.model_hash)?;
        if let Some(f) = &self.failure {
            writeln!(out, "# failure_time_s={}", f.time)?;
            writeln!(out, "# failure={}", f.reason.replace('\n', " "))?;
        }
        write!(out, "time_s")?;
        for id in &self.compartments {
            write!(out, ",V_{id}")?;
        }
        writeln!(out)?;
        for (n, t) in self.times.iter().enumerate() {
            write!(out, "{t}")?;
            for series in &self.voltages {
                write!(out, ",{}", series[n])?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// SHA-256 of the CSV form, for cheap byte-identity checks.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        {
            let mut w = io::BufWriter::new(HashWriter(&mut hasher));
            self.write_csv(&mut w).expect("hashing cannot fail");
            w.flush().expect("hashing cannot fail");
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn from_csv_str(text: &str) -> Result<SimTrace, TraceIoError> {
        let err = |line: usize, reason: &str| TraceIoError::Parse {
            line,
            reason: reason.to_string(),
        };
        let mut scheme = None;
        let mut step = None;
        let mut duration = None;
        let mut model_hash = String::new();
        let mut failure_time = None;
        let mut failure_reason = String::new();
        let mut compartments = None;
        let mut times = Vec::new();
        let mut voltages: Vec<Vec<f64>> = Vec::new();

        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            if let Some(meta) = line.strip_prefix("# ") {
                let (key, value) = meta.split_once('=').ok_or_else(|| err(lineno, "bad metadata"))?;
                let num = |v: &str| v.parse::<f64>().map_err(|_| err(lineno, "bad number"));
                match key {
                    "scheme" => scheme = Some(value.parse().map_err(|e: String| err(lineno, &e))?),
                    "step_s" => step = Some(num(value)?),
                    "duration_s" => duration = Some(num(value)?),
                    "model_hash" => model_hash = value.to_string(),
                    "failure_time_s" => failure_time = Some(num(value)?),
                    "failure" => failure_reason = value.to_string(),
                    _ => {}
                }
                continue;
            }
            if compartments.is_none() {
                let mut cols = line.split(',');
                if cols.next() != Some("time_s") {
                    return Err(err(lineno, "expected header starting with time_s"));
                }
                let ids = cols
                    .map(|c| {
                        c.strip_prefix("V_")
                            .and_then(|id| id.parse::<usize>().ok())
                            .ok_or_else(|| err(lineno, "bad column name"))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                voltages = vec![Vec::new(); ids.len()];
                compartments = Some(ids);
                continue;
            }
            let mut cols = line.split(',');
            let t = cols
                .next()
                .and_then(|c| c.parse::<f64>().ok())
                .ok_or_else(|| err(lineno, "bad time"))?;
            times.push(t);
            let mut count = 0;
            for (series, c) in voltages.iter_mut().zip(cols.by_ref()) {
                series.push(c.parse::<f64>().map_err(|_| err(lineno, "bad voltage"))?);
                count += 1;
            }
            if count != voltages.len() || cols.next().is_some() {
                return Err(err(lineno, "wrong column count"));
            }
        }
        Ok(SimTrace {
            scheme: scheme.ok_or_else(|| err(0, "missing scheme"))?,
            step: step.ok_or_else(|| err(0, "missing step_s"))?,
            duration: duration.ok_or_else(|| err(0, "missing duration_s"))?,
            model_hash,
            compartments: compartments.ok_or_else(|| err(0, "missing header"))?,
            times,
            voltages,
            failure: failure_time.map(|time| Failure {
                time,
                reason: failure_reason,
            }),
            coefficients: None,
            final_state: None,
        })
    }

    pub fn to_json(&self) -> Result<String, TraceIoError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<SimTrace, TraceIoError> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::squid;
    use crate::morphology::{build_tree, uniform_chain, Compartment};
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn comp(id: usize, parent: Option<usize>) -> Compartment {
        Compartment {
            id,
            parent,
            radius: 1e-6,
            length: 50e-6,
            c_m: 0.01,
            r_m: 1.0,
            r_l: 1.0,
            e_leak: -0.065,
        }
    }

    fn single() -> Model {
        Model::passive(build_tree(vec![comp(0, None)]).unwrap())
    }

    fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> MorphologyTree {
        let comps = (0..n)
            .map(|i| Compartment {
                id: i,
                parent: (i > 0).then(|| rng.gen_range(0..i)),
                radius: rng.gen_range(0.5e-6..3e-6),
                length: rng.gen_range(20e-6..80e-6),
                c_m: rng.gen_range(0.005..0.02),
                r_m: rng.gen_range(0.5..3.0),
                r_l: rng.gen_range(0.5..2.0),
                e_leak: rng.gen_range(-0.08..-0.05),
            })
            .collect();
        build_tree(comps).unwrap()
    }

    fn dense(system: &HinesSystem, tree: &MorphologyTree) -> (DMatrix<f64>, DVector<f64>) {
        let n = tree.len();
        let mut a = DMatrix::zeros(n, n);
        for j in 0..n {
            a[(j, j)] = system.diagonal[j];
            if let Some(p) = tree.parent(j) {
                a[(j, p)] = system.lower[j];
                a[(p, j)] = system.upper[j];
            }
        }
        (a, DVector::from_vec(system.rhs.clone()))
    }

    #[test]
    fn isolated_passive_coefficients() {
        let m = single();
        let s = m.initial_state(-0.07);
        let (a, b) = coefficients_ab(&m, &s, 0);
        assert!((b - 100.0).abs() < 1e-12);
        assert!((a - 100.0 * -0.065).abs() < 1e-12);
    }

    #[test]
    fn closed_gates_and_rest_neighbors_are_an_equilibrium() {
        let tree = uniform_chain(3, &comp(0, None)).unwrap();
        let m = Model::new(tree, squid::channel_set(0.0, 0.0)).unwrap();
        let s = m.initial_state(-0.065);
        let (a, b) = coefficients_ab(&m, &s, 1);
        assert!((a - b * -0.065).abs() < 1e-12 * a.abs());
    }

    #[test]
    fn coefficients_match_direct_current_balance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tree = random_tree(&mut rng, 12);
        let m = Model::new(tree.clone(), squid::channel_set(1200.0, 360.0)).unwrap();
        let mut s = m.initial_state(-0.065);
        for v in &mut s.v {
            *v = rng.gen_range(-0.08..0.02);
        }
        for g in s.gates.iter_mut().flatten() {
            g.m = rng.gen_range(0.0..1.0);
            g.h = rng.gen_range(0.0..1.0);
        }
        let chans = squid::channel_set(1200.0, 360.0).channels;
        for j in 0..tree.len() {
            let c = tree.compartment(j);
            let cm = c.c_m;
            let h = c.length;
            // total membrane and axial current balance per unit capacitance
            let mut rhs = (c.e_leak - s.v[j]) / (c.r_m * cm);
            for (i, ch) in chans.iter().enumerate() {
                let g = ch.g_max * s.gates[j][i].m.powi(ch.activation_exponent as i32)
                    * if ch.inactivation.is_some() { s.gates[j][i].h } else { 1.0 };
                rhs += g * (ch.reversal - s.v[j]) / cm;
            }
            let mut neighbors: Vec<(usize, f64)> = Vec::new();
            if let Some(p) = c.parent {
                neighbors.push((p, c.radius));
            }
            for &q in tree.children(j) {
                neighbors.push((q, tree.compartment(q).radius));
            }
            for (q, a_side) in neighbors {
                rhs += a_side * a_side / c.radius / (2.0 * c.r_l * cm * h * h) * (s.v[q] - s.v[j]);
            }
            let (a, b) = coefficients_ab(&m, &s, j);
            let got = a - b * s.v[j];
            assert!((got - rhs).abs() <= 1e-12 * rhs.abs().max(a.abs()), "{j}: {got} vs {rhs}");
        }
    }

    #[test]
    fn ftcs_exact_cancellation() {
        // B = 1000 with A = 0: r_m c_m = 1 ms, E_L = 0
        let mut c = comp(0, None);
        c.r_m = 0.1;
        c.e_leak = 0.0;
        let m = Model::passive(build_tree(vec![c]).unwrap());
        let mut s = m.initial_state(1.0);
        step_ftcs(&m, &mut s, 1e-3).unwrap();
        assert_eq!(s.v[0], 0.0);
    }

    #[test]
    fn ftcs_beyond_bound_grows() {
        let mut c = comp(0, None);
        c.e_leak = 0.0;
        let m = Model::passive(build_tree(vec![c]).unwrap());
        let mut s = m.initial_state(1e-3);
        let k = 2.1 / 100.0;
        let mut prev = s.v[0].abs();
        for _ in 0..10 {
            step_ftcs(&m, &mut s, k).unwrap();
            assert!(s.v[0].abs() > prev);
            prev = s.v[0].abs();
        }
    }

    #[test]
    fn btcs_scalar_closed_form() {
        let m = single();
        let mut s = m.initial_state(-0.02);
        let k = 3e-3;
        step_btcs(&m, &mut s, k).unwrap();
        let expected = (-0.02 + k * 100.0 * -0.065) / (1.0 + k * 100.0);
        assert!((s.v[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn exp_euler_pure_decay() {
        let mut c = comp(0, None);
        c.r_m = 0.1;
        c.e_leak = 0.0;
        let m = Model::passive(build_tree(vec![c]).unwrap());
        let mut s = m.initial_state(1.0);
        step_exp_euler(&m, &mut s, 1e-3).unwrap();
        assert!((s.v[0] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn hcn_scalar_lands_on_rest_at_two_over_alpha() {
        let m = single();
        let mut s = m.initial_state(-0.02);
        step_hcn(&m, &mut s, 2.0 / 100.0).unwrap();
        assert!((s.v[0] - -0.065).abs() < 1e-15);
    }

    #[test]
    fn hcn_huge_step_overshoots_with_smaller_amplitude() {
        let m = single();
        let mut s = m.initial_state(-0.02);
        step_hcn(&m, &mut s, 10.0).unwrap();
        let before: f64 = -0.02 - -0.065;
        let after = s.v[0] - -0.065;
        assert!(after < 0.0 && after.abs() < before.abs());
    }

    #[test]
    fn rk21_matches_quadratic_truncation() {
        let mut c = comp(0, None);
        c.e_leak = 0.0;
        let m = Model::passive(build_tree(vec![c]).unwrap());
        for bk in [0.1, 1.0, 2.0] {
            let mut s = m.initial_state(1.0);
            step_rk21(&m, &mut s, bk / 100.0, RkGateMode::Multistage).unwrap();
            let expected = 1.0 - bk + 0.5 * bk * bk;
            assert!((s.v[0] - expected).abs() < 1e-14, "{bk}");
        }
    }

    #[test]
    fn rk41_matches_quartic_truncation() {
        let mut c = comp(0, None);
        c.e_leak = 0.0;
        let m = Model::passive(build_tree(vec![c]).unwrap());
        let bk = crate::channels::RK4_REAL_BOUNDARY;
        let mut s = m.initial_state(1.0);
        step_rk41(&m, &mut s, bk / 100.0, RkGateMode::Multistage).unwrap();
        let expected = 1.0 - bk + bk.powi(2) / 2.0 - bk.powi(3) / 6.0 + bk.powi(4) / 24.0;
        assert!((s.v[0] - expected).abs() < 1e-14);
        assert!((s.v[0].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn taylor2_needs_history_and_keeps_equilibrium() {
        let m = single();
        let mut s = m.initial_state(-0.065);
        assert_eq!(
            step_taylor2(&m, &mut s, 1e-5),
            Err(StepError::InsufficientHistory { found: 0 })
        );
        for _ in 0..3 {
            advance(&m, &mut s, SchemeKind::Taylor2, 1e-5, RkGateMode::Multistage).unwrap();
            assert!((s.v[0] - -0.065).abs() < 1e-15);
        }
        assert_eq!(s.history.len(), 2);
    }

    #[test]
    fn hines_scalar_and_path() {
        let tree = build_tree(vec![comp(0, None)]).unwrap();
        let sys = HinesSystem {
            diagonal: vec![4.0],
            lower: vec![0.0],
            upper: vec![0.0],
            rhs: vec![2.0],
        };
        assert_eq!(hines_solve(&sys, &tree).unwrap(), vec![0.5]);

        let tree = uniform_chain(3, &comp(0, None)).unwrap();
        let sys = HinesSystem {
            diagonal: vec![3.0, 4.0, 3.0],
            lower: vec![0.0, -1.0, -1.0],
            upper: vec![0.0, -1.0, -1.0],
            rhs: vec![1.0, 2.0, 3.0],
        };
        let x = hines_solve(&sys, &tree).unwrap();
        let (a, b) = dense(&sys, &tree);
        let oracle = a.lu().solve(&b).unwrap();
        for j in 0..3 {
            assert!((x[j] - oracle[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn hines_reports_singular_pivots() {
        let tree = build_tree(vec![comp(0, None)]).unwrap();
        let sys = HinesSystem {
            diagonal: vec![0.0],
            lower: vec![0.0],
            upper: vec![0.0],
            rhs: vec![1.0],
        };
        assert!(matches!(
            hines_solve(&sys, &tree),
            Err(StepError::SingularSystem { compartment: 0, .. })
        ));
    }

    #[test]
    fn btcs_matches_dense_solve_on_random_tree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tree = random_tree(&mut rng, 10);
        let m = Model::new(tree.clone(), squid::channel_set(1200.0, 360.0)).unwrap();
        let mut s = m.initial_state(-0.065);
        for v in &mut s.v {
            *v = rng.gen_range(-0.08..0.0);
        }
        let k = 2.5e-5;
        let mut gated = s.clone();
        advance_gates(&m, &mut gated, k, GateRule::BackwardEuler).unwrap();
        let (a, b) = dense(&implicit_system(&m, &gated, k), &tree);
        let oracle = a.lu().solve(&b).unwrap();
        step_btcs(&m, &mut s, k).unwrap();
        for j in 0..tree.len() {
            assert!((s.v[j] - oracle[j]).abs() < 1e-12);
        }
    }

    /// `exp(t M) v0` for the passive system `dV/dt = M V + s`, by
    /// eigendecomposition-free scaling and squaring of the augmented matrix.
    fn passive_exact(m: &Model, v0: &[f64], t: f64) -> Vec<f64> {
        let n = m.len();
        let mut a = DMatrix::<f64>::zeros(n + 1, n + 1);
        for j in 0..n {
            let c = m.tree().compartment(j);
            let cp = &m.couplings()[j];
            let alpha = c.leak_rate();
            a[(j, j)] = -(alpha + cp.total());
            a[(j, n)] = alpha * c.e_leak;
            if let Some(p) = c.parent {
                a[(j, p)] = cp.c1;
            }
            for &(q, c2) in &cp.c2 {
                a[(j, q)] = c2;
            }
        }
        let exp = (a * t).exp();
        let mut x = DVector::from_iterator(n + 1, v0.iter().copied().chain([1.0]));
        x = exp * x;
        x.iter().take(n).copied().collect()
    }

    fn passive_chain() -> Model {
        let mut t = comp(0, None);
        t.radius = 2e-6;
        t.length = 100e-6;
        Model::passive(uniform_chain(4, &t).unwrap())
    }

    fn error_at(m: &Model, scheme: SchemeKind, k: f64, v0: &[f64], t: f64) -> f64 {
        let mut s = m.initial_state(-0.065);
        s.v = v0.to_vec();
        for _ in 0..step_count(t, k) {
            advance(m, &mut s, scheme, k, RkGateMode::Multistage).unwrap();
        }
        let exact = passive_exact(m, v0, t);
        s.v.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn passive_chain_converges_at_the_expected_order() {
        let m = passive_chain();
        let v0 = [-0.02, -0.05, -0.07, -0.09];
        let t = 2e-3;
        for (scheme, order) in [
            (SchemeKind::Ftcs, 1.0),
            (SchemeKind::ExponentialEuler, 1.0),
            (SchemeKind::Hcn, 2.0),
        ] {
            let e1 = error_at(&m, scheme, 1e-6, &v0, t);
            let e2 = error_at(&m, scheme, 5e-7, &v0, t);
            let slope = (e1 / e2).log2();
            assert!((slope - order).abs() < 0.15, "{scheme}: {slope}");
        }
    }

    #[test]
    fn trace_sample_count_and_flagging() {
        let m = single();
        let tr = run_simulation(&m, SchemeKind::Ftcs, 1e-4, 1e-3, &[0], &SimOptions::default()).unwrap();
        assert_eq!(tr.times.len(), 11);
        assert!(!tr.is_unstable());

        let tr = run_simulation(&m, SchemeKind::Ftcs, 0.05, 5.0, &[0], &SimOptions::default()).unwrap();
        assert!(tr.is_unstable());
        assert!(tr.times.len() < 101);
    }

    #[test]
    fn passive_model_relaxes_to_rest() {
        let mut t = comp(0, None);
        t.radius = 2e-6;
        t.length = 100e-6;
        t.e_leak = -0.0701;
        let m = Model::passive(uniform_chain(4, &t).unwrap());
        for scheme in SchemeKind::ALL {
            let tr = run_simulation(&m, scheme, 1e-5, 0.05, &[0, 3], &SimOptions::default()).unwrap();
            for series in &tr.voltages {
                assert!((series.last().unwrap() - -0.0701).abs() < 1e-6, "{scheme}");
            }
        }
    }

    #[test]
    fn csv_and_json_round_trip() {
        let tree = uniform_chain(3, &comp(0, None)).unwrap();
        let m = Model::new(tree, squid::channel_set(1200.0, 360.0)).unwrap();
        let tr = run_simulation(&m, SchemeKind::Hcn, 1e-5, 2e-3, &[0, 2], &SimOptions::default()).unwrap();
        let csv = tr.to_csv_string();
        let back = SimTrace::from_csv_str(&csv).unwrap();
        assert_eq!(back.to_csv_string(), csv);
        assert_eq!(back.voltages, tr.voltages);
        let json = tr.to_json().unwrap();
        assert_eq!(SimTrace::from_json(&json).unwrap(), tr);
    }

    #[test]
    fn reruns_are_bit_identical() {
        let tree = uniform_chain(3, &comp(0, None)).unwrap();
        let m = Model::new(tree, squid::channel_set(1200.0, 360.0)).unwrap();
        for scheme in SchemeKind::ALL {
            let a = run_simulation(&m, scheme, 2e-5, 5e-3, &[0, 1, 2], &SimOptions::default()).unwrap();
            let b = run_simulation(&m, scheme, 2e-5, 5e-3, &[0, 1, 2], &SimOptions::default()).unwrap();
            assert_eq!(a.to_csv_string(), b.to_csv_string());
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn hines_matches_dense_on_random_trees(seed in any::<u64>(), n in 1usize..=50) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let tree = random_tree(&mut rng, n);
                let mut sys = HinesSystem::zeros(n);
                for j in 0..n {
                    sys.rhs[j] = rng.gen_range(-1.0..1.0);
                    if j > 0 {
                        sys.lower[j] = -rng.gen_range(0.0..1.0);
                        sys.upper[j] = -rng.gen_range(0.0..1.0);
                    }
                }
                for j in 0..n {
                    // diagonally dominant by rows
                    let mut off = sys.lower[j].abs();
                    for &q in tree.children(j) {
                        off += sys.upper[q].abs();
                    }
                    sys.diagonal[j] = 1.0 + off + rng.gen_range(0.0..1.0);
                }
                let x = hines_solve(&sys, &tree).unwrap();
                let (a, b) = dense(&sys, &tree);
                let oracle = a.lu().solve(&b).unwrap();
                for j in 0..n {
                    prop_assert!((x[j] - oracle[j]).abs() < 1e-12);
                }
            }

            #[test]
            fn btcs_never_amplifies_passive_deviation(seed in any::<u64>(), log_k in -7.0f64..1.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut comps = Vec::new();
                for i in 0..8 {
                    let mut c = comp(i, (i > 0).then(|| rng.gen_range(0..i)));
                    c.radius = rng.gen_range(0.5e-6..3e-6);
                    comps.push(c);
                }
                let m = Model::passive(build_tree(comps).unwrap());
                let mut s = m.initial_state(-0.065);
                for v in &mut s.v {
                    *v = rng.gen_range(-0.1..0.0);
                }
                let before = s.v.iter().map(|v| (v + 0.065).abs()).fold(0.0, f64::max);
                step_btcs(&m, &mut s, 10f64.powf(log_k)).unwrap();
                let after = s.v.iter().map(|v| (v + 0.065).abs()).fold(0.0, f64::max);
                prop_assert!(after <= before * (1.0 + 1e-12));
            }

            #[test]
            fn hcn_passive_oscillation_alternates_and_shrinks(factor in 1.05f64..50.0) {
                let m = single();
                let k = factor * 2.0 / 100.0;
                let mut s = m.initial_state(-0.02);
                let mut prev = s.v[0] + 0.065;
                for _ in 0..5 {
                    step_hcn(&m, &mut s, k).unwrap();
                    let dev = s.v[0] + 0.065;
                    prop_assert!(dev * prev < 0.0);
                    prop_assert!(dev.abs() < prev.abs());
                    prev = dev;
                }
            }
        }
    }
}
