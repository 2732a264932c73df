//! Membrane channel kinetics: gate steady states and time constants, channel
//! conductances `g = gbar * m^p * h`, single-step gate updates, and the
//! calcium pool.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-width of the window around a removable 0/0 point of a linoid rate
/// inside which the series limit is used instead of the quotient.
pub const SINGULARITY_WINDOW: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ChannelError {
    #[error("explicit gate step rejected: k = {k:e} s exceeds {limit:e} s")]
    StepRejected { k: f64, limit: f64 },
    #[error("channel config: {0}")]
    Config(String),
    #[error("channel {name}: {reason}")]
    Invalid { name: String, reason: String },
}

/// A rate function of a scalar `x` (membrane voltage in volts, or pool
/// concentration for calcium-dependent gates). Rates are in 1/s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateFn {
    Constant { rate: f64 },
    /// `rate * exp((x - x0) / slope)`
    Exponential { rate: f64, x0: f64, slope: f64 },
    /// `rate / (1 + exp((x - x0) / slope))`
    Sigmoid { rate: f64, x0: f64, slope: f64 },
    /// `rate * (x - x0) / (1 - exp(-(x - x0) / slope))`
    Linoid { rate: f64, x0: f64, slope: f64 },
}

impl RateFn {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            RateFn::Constant { rate } => rate,
            RateFn::Exponential { rate, x0, slope } => rate * ((x - x0) / slope).exp(),
            RateFn::Sigmoid { rate, x0, slope } => rate / (1.0 + ((x - x0) / slope).exp()),
            RateFn::Linoid { rate, x0, slope } => {
                let u = x - x0;
                if u.abs() < SINGULARITY_WINDOW {
                    // u / (1 - e^{-u/s}) = s + u/2 + u^2/(12 s) + ...
                    rate * (slope + 0.5 * u)
                } else {
                    -rate * u / (-u / slope).exp_m1()
                }
            }
        }
    }

    fn check(&self) -> Result<(), String> {
        let slope = match *self {
            RateFn::Constant { rate } => return check_rate(rate),
            RateFn::Exponential { rate, slope, .. }
            | RateFn::Sigmoid { rate, slope, .. }
            | RateFn::Linoid { rate, slope, .. } => {
                check_rate(rate)?;
                slope
            }
        };
        if slope == 0.0 || !slope.is_finite() {
            return Err(format!("rate slope must be nonzero, got {slope}"));
        }
        Ok(())
    }
}

fn check_rate(rate: f64) -> Result<(), String> {
    if rate.is_finite() && rate >= 0.0 {
        Ok(())
    } else {
        Err(format!("rate must be nonnegative, got {rate}"))
    }
}

/// Sampled `(V, y_inf, tau)` table with linear interpolation, clamped at the
/// ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KineticsTable {
    pub v: Vec<f64>,
    pub inf: Vec<f64>,
    pub tau: Vec<f64>,
}

impl KineticsTable {
    fn interp(&self, ys: &[f64], x: f64) -> f64 {
        let xs = &self.v;
        if x <= xs[0] {
            return ys[0];
        }
        let last = xs.len() - 1;
        if x >= xs[last] {
            return ys[last];
        }
        let i = xs.partition_point(|&p| p <= x) - 1;
        let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
        ys[i] + w * (ys[i + 1] - ys[i])
    }
}

/// Where the kinetics read their input from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KineticsInput {
    #[default]
    Voltage,
    Calcium,
}

/// Steady state and time constant of one gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GateKinetics {
    Constant {
        inf: f64,
        tau: f64,
    },
    /// `y_inf = a/(a+b)`, `tau = 1/(a+b)`.
    Rates {
        alpha: RateFn,
        beta: RateFn,
        #[serde(default)]
        input: KineticsInput,
    },
    Table {
        #[serde(flatten)]
        table: KineticsTable,
        #[serde(default)]
        input: KineticsInput,
    },
}

impl GateKinetics {
    pub fn input(&self) -> KineticsInput {
        match self {
            GateKinetics::Constant { .. } => KineticsInput::Voltage,
            GateKinetics::Rates { input, .. } | GateKinetics::Table { input, .. } => *input,
        }
    }

    /// `(y_inf, tau)` at the given input value.
    pub fn inf_tau(&self, x: f64) -> (f64, f64) {
        match self {
            GateKinetics::Constant { inf, tau } => (*inf, *tau),
            GateKinetics::Rates { alpha, beta, .. } => {
                let a = alpha.eval(x);
                let b = beta.eval(x);
                let s = a + b;
                (a / s, 1.0 / s)
            }
            GateKinetics::Table { table, .. } => {
                (table.interp(&table.inf, x), table.interp(&table.tau, x))
            }
        }
    }

    /// Picks voltage or calcium according to the kinetics' input and
    /// evaluates.
    pub fn inf_tau_at(&self, voltage: f64, calcium: f64) -> (f64, f64) {
        match self.input() {
            KineticsInput::Voltage => self.inf_tau(voltage),
            KineticsInput::Calcium => self.inf_tau(calcium),
        }
    }

    pub fn steady_state(&self, x: f64) -> f64 {
        self.inf_tau(x).0
    }

    fn check(&self) -> Result<(), String> {
        match self {
            GateKinetics::Constant { inf, tau } => {
                if !(0.0..=1.0).contains(inf) {
                    return Err(format!("constant inf {inf} outside [0, 1]"));
                }
                if !(*tau > 0.0 && tau.is_finite()) {
                    return Err(format!("constant tau {tau} must be positive"));
                }
                Ok(())
            }
            GateKinetics::Rates { alpha, beta, .. } => {
                alpha.check()?;
                beta.check()
            }
            GateKinetics::Table { table, .. } => {
                let n = table.v.len();
                if n < 2 || table.inf.len() != n || table.tau.len() != n {
                    return Err("table columns must have equal length >= 2".into());
                }
                if table.v.windows(2).any(|w| w[1] <= w[0]) {
                    return Err("table voltages must be strictly increasing".into());
                }
                if table.inf.iter().any(|y| !(0.0..=1.0).contains(y)) {
                    return Err("table inf values must lie in [0, 1]".into());
                }
                if table.tau.iter().any(|t| !(*t > 0.0)) {
                    return Err("table tau values must be positive".into());
                }
                Ok(())
            }
        }
    }
}

/// Steady-state gate value used for initialization.
pub fn gate_steady_init(kinetics: &GateKinetics, voltage: f64) -> f64 {
    kinetics.steady_state(voltage)
}

/// Single-step update rules for the frozen-input gate ODE
/// `dy/dt = (y_inf - y) / tau`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRule {
    ForwardEuler,
    BackwardEuler,
    Trapezoidal,
    ExactExponential,
    /// Two-stage Heun tableau with the input held fixed.
    Heun,
    /// Classic four-stage tableau with the input held fixed.
    RungeKutta4,
}

/// Real-axis stability boundary of the classic four-stage Runge-Kutta
/// amplification polynomial: the positive root of `x^3 - 4x^2 + 12x - 24`.
pub const RK4_REAL_BOUNDARY: f64 = 2.785293563405282;

/// Advance a gate by `k` seconds with `y_inf` and `tau` held fixed.
pub fn gate_step_frozen(
    y: f64,
    inf: f64,
    tau: f64,
    k: f64,
    rule: GateRule,
) -> Result<f64, ChannelError> {
    let r = k / tau;
    Ok(match rule {
        GateRule::ForwardEuler => {
            if k > 2.0 * tau {
                return Err(ChannelError::StepRejected {
                    k,
                    limit: 2.0 * tau,
                });
            }
            y + r * (inf - y)
        }
        GateRule::BackwardEuler => (y + r * inf) / (1.0 + r),
        GateRule::Trapezoidal => (y * (1.0 - 0.5 * r) + r * inf) / (1.0 + 0.5 * r),
        GateRule::ExactExponential => inf + (y - inf) * (-r).exp(),
        GateRule::Heun | GateRule::RungeKutta4 => {
            let z = -r;
            let (amp, limit) = if rule == GateRule::Heun {
                (1.0 + z + 0.5 * z * z, 2.0 * tau)
            } else {
                (
                    1.0 + z * (1.0 + z * (0.5 + z * (1.0 / 6.0 + z / 24.0))),
                    RK4_REAL_BOUNDARY * tau,
                )
            };
            if amp.abs() > 1.0 {
                return Err(ChannelError::StepRejected { k, limit });
            }
            inf + (y - inf) * amp
        }
    })
}

pub fn gate_step(
    kinetics: &GateKinetics,
    y: f64,
    v_eval: f64,
    k: f64,
    rule: GateRule,
) -> Result<f64, ChannelError> {
    let (inf, tau) = kinetics.inf_tau(v_eval);
    gate_step_frozen(y, inf, tau, k, rule)
}

/// One membrane channel species.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    /// Maximal specific conductance, S/m^2.
    pub g_max: f64,
    /// Reversal potential, volts.
    pub reversal: f64,
    pub activation_exponent: u32,
    pub activation: GateKinetics,
    #[serde(default)]
    pub inactivation: Option<GateKinetics>,
    /// Current through this channel feeds the calcium pool.
    #[serde(default)]
    pub carries_calcium: bool,
    /// Compartments that host the channel; `None` means all of them.
    #[serde(default)]
    pub compartments: Option<Vec<usize>>,
}

impl ChannelSpec {
    pub fn has_inactivation(&self) -> bool {
        self.inactivation.is_some()
    }

    pub fn calcium_dependent(&self) -> bool {
        self.activation.input() == KineticsInput::Calcium
            || self
                .inactivation
                .as_ref()
                .is_some_and(|g| g.input() == KineticsInput::Calcium)
    }

    /// Gate-state function `f(m, h)`.
    pub fn open_fraction(&self, gates: GatePair) -> f64 {
        let m = gates.m.powi(self.activation_exponent as i32);
        if self.has_inactivation() {
            m * gates.h
        } else {
            m
        }
    }

    /// Steady-state gates at the given voltage and calcium level.
    pub fn steady_gates(&self, voltage: f64, calcium: f64) -> GatePair {
        GatePair {
            m: self.activation.inf_tau_at(voltage, calcium).0,
            h: self
                .inactivation
                .as_ref()
                .map_or(1.0, |g| g.inf_tau_at(voltage, calcium).0),
        }
    }

    pub fn hosted_by(&self, compartment: usize) -> bool {
        self.compartments
            .as_ref()
            .is_none_or(|ids| ids.contains(&compartment))
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        let invalid = |reason: String| ChannelError::Invalid {
            name: self.name.clone(),
            reason,
        };
        if !(self.g_max.is_finite() && self.g_max >= 0.0) {
            return Err(invalid(format!("g_max must be >= 0, got {}", self.g_max)));
        }
        if !self.reversal.is_finite() {
            return Err(invalid("reversal must be finite".into()));
        }
        self.activation.check().map_err(&invalid)?;
        if let Some(h) = &self.inactivation {
            h.check().map_err(&invalid)?;
        }
        Ok(())
    }
}

/// Activation and inactivation gate values of one channel in one compartment.
/// `h` stays at 1 for channels without inactivation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatePair {
    pub m: f64,
    pub h: f64,
}

/// Gate values for every channel of one compartment, in channel order.
pub type ChannelState = Vec<GatePair>;

/// `g_i = gbar_i f_i(m_i, h_i)` in S/m^2.
pub fn channel_conductance(spec: &ChannelSpec, gates: GatePair) -> f64 {
    spec.g_max * spec.open_fraction(gates)
}

/// Advance both gates of a channel.
pub fn step_channel_gates(
    spec: &ChannelSpec,
    gates: GatePair,
    voltage: f64,
    calcium: f64,
    k: f64,
    rule: GateRule,
) -> Result<GatePair, ChannelError> {
    let (inf, tau) = spec.activation.inf_tau_at(voltage, calcium);
    let m = gate_step_frozen(gates.m, inf, tau, k, rule)?;
    let h = match &spec.inactivation {
        Some(kin) => {
            let (inf, tau) = kin.inf_tau_at(voltage, calcium);
            gate_step_frozen(gates.h, inf, tau, k, rule)?
        }
        None => 1.0,
    };
    Ok(GatePair { m, h })
}

/// Calcium pool `d[Ca]/dt = -B_Ca I_Ca - [Ca]/tau_Ca`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalciumPool {
    #[serde(default)]
    pub concentration: f64,
    /// Pool units per ampere-second.
    pub influx_scale: f64,
    /// Decay time constant, seconds.
    pub decay_time: f64,
}

/// Exact exponential update with `I_Ca` held fixed over the step. Inward
/// (negative) current raises the concentration. The result is clamped at 0.
pub fn calcium_step(pool: CalciumPool, i_ca: f64, k: f64) -> CalciumPool {
    let steady = -pool.influx_scale * i_ca * pool.decay_time;
    let next = steady + (pool.concentration - steady) * (-k / pool.decay_time).exp();
    CalciumPool {
        concentration: next.max(0.0),
        ..pool
    }
}

/// The full channel set of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSet {
    #[serde(default, rename = "channel")]
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub calcium: Option<CalciumPool>,
}

impl ChannelSet {
    pub fn validate(&self) -> Result<(), ChannelError> {
        for c in &self.channels {
            c.validate()?;
        }
        if let Some(pool) = &self.calcium {
            if !(pool.decay_time > 0.0 && pool.influx_scale >= 0.0) {
                return Err(ChannelError::Config(
                    "calcium pool needs decay_time > 0 and influx_scale >= 0".into(),
                ));
            }
        }
        let needs_pool = self
            .channels
            .iter()
            .any(|c| c.carries_calcium || c.calcium_dependent());
        if needs_pool && self.calcium.is_none() {
            return Err(ChannelError::Config(
                "calcium-carrying or calcium-dependent channels need a [calcium] pool".into(),
            ));
        }
        Ok(())
    }
}

pub fn parse_channels(text: &str) -> Result<ChannelSet, ChannelError> {
    let set: ChannelSet = toml::from_str(text).map_err(|e| ChannelError::Config(e.to_string()))?;
    set.validate()?;
    Ok(set)
}

pub fn load_channels(path: &Path) -> Result<ChannelSet, ChannelError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ChannelError::Config(format!("{}: {e}", path.display())))?;
    parse_channels(&text)
}

/// Classic squid-axon kinetics in SI units (volts, seconds), resting near
/// -65 mV.
pub mod squid {
    use super::*;

    pub fn m_gate() -> GateKinetics {
        GateKinetics::Rates {
            alpha: RateFn::Linoid {
                rate: 1e5,
                x0: -0.040,
                slope: 0.010,
            },
            beta: RateFn::Exponential {
                rate: 4000.0,
                x0: -0.065,
                slope: -0.018,
            },
            input: KineticsInput::Voltage,
        }
    }

    pub fn h_gate() -> GateKinetics {
        GateKinetics::Rates {
            alpha: RateFn::Exponential {
                rate: 70.0,
                x0: -0.065,
                slope: -0.020,
            },
            beta: RateFn::Sigmoid {
                rate: 1000.0,
                x0: -0.035,
                slope: -0.010,
            },
            input: KineticsInput::Voltage,
        }
    }

    pub fn n_gate() -> GateKinetics {
        GateKinetics::Rates {
            alpha: RateFn::Linoid {
                rate: 1e4,
                x0: -0.055,
                slope: 0.010,
            },
            beta: RateFn::Exponential {
                rate: 125.0,
                x0: -0.065,
                slope: -0.080,
            },
            input: KineticsInput::Voltage,
        }
    }

    pub fn sodium(g_max: f64) -> ChannelSpec {
        ChannelSpec {
            name: "na".into(),
            g_max,
            reversal: 0.050,
            activation_exponent: 3,
            activation: m_gate(),
            inactivation: Some(h_gate()),
            carries_calcium: false,
            compartments: None,
        }
    }

    pub fn potassium(g_max: f64) -> ChannelSpec {
        ChannelSpec {
            name: "k_dr".into(),
            g_max,
            reversal: -0.077,
            activation_exponent: 4,
            activation: n_gate(),
            inactivation: None,
            carries_calcium: false,
            compartments: None,
        }
    }

    pub fn channel_set(g_na: f64, g_k: f64) -> ChannelSet {
        ChannelSet {
            channels: vec![sodium(g_na), potassium(g_k)],
            calcium: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(inf: f64, tau: f64) -> GateKinetics {
        GateKinetics::Constant { inf, tau }
    }

    #[test]
    fn constant_kinetics_initialize_to_their_steady_state() {
        assert_eq!(gate_steady_init(&constant(0.5, 1e-3), -0.07), 0.5);
    }

    #[test]
    fn squid_n_gate_matches_hand_evaluated_rates() {
        // At V = -65 mV: alpha_n = 0.01*(-10)/(1 - e^1) /ms, beta_n = 0.125 /ms.
        let a = -0.1 / (1.0 - 1.0f64.exp()) * 1000.0;
        let b = 125.0;
        let expected = a / (a + b);
        let got = gate_steady_init(&squid::n_gate(), -0.065);
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((got - 0.3177).abs() < 1e-4);
    }

    #[test]
    fn linoid_is_continuous_across_its_singularity() {
        let f = RateFn::Linoid {
            rate: 1e5,
            x0: -0.04,
            slope: 0.01,
        };
        let at = f.eval(-0.04);
        assert!((at - 1000.0).abs() < 1e-9);
        for du in [-1e-7, -1e-8, -2e-9, -1e-9, 1e-9, 2e-9, 1e-8, 1e-7] {
            let u: f64 = du;
            let series = 1e5 * (0.01 + u / 2.0 + u * u / (12.0 * 0.01));
            let got = f.eval(-0.04 + du);
            assert!((got - series).abs() < 1e-9 * series, "{du}: {got} vs {series}");
        }
    }

    #[test]
    fn conductance_examples() {
        let spec = squid::sodium(120.0);
        assert_eq!(channel_conductance(&spec, GatePair { m: 1.0, h: 1.0 }), 120.0);
        let g = channel_conductance(&spec, GatePair { m: 0.5, h: 0.2 });
        assert!((g - 3.0).abs() < 1e-12);
        let closed = squid::sodium(0.0);
        assert_eq!(channel_conductance(&closed, GatePair { m: 0.9, h: 0.7 }), 0.0);
    }

    #[test]
    fn fixed_point_is_preserved_by_every_rule() {
        for rule in [
            GateRule::ForwardEuler,
            GateRule::BackwardEuler,
            GateRule::Trapezoidal,
            GateRule::ExactExponential,
        ] {
            let y = gate_step_frozen(0.3, 0.3, 1e-3, 1e-4, rule).unwrap();
            assert!((y - 0.3).abs() < 1e-15, "{rule:?}");
        }
    }

    #[test]
    fn exact_rule_matches_closed_form_for_any_step() {
        for k in [1e-6, 1e-3, 0.5, 10.0] {
            let y = gate_step_frozen(0.9, 0.1, 2e-3, k, GateRule::ExactExponential).unwrap();
            let expected = 0.1 + 0.8 * (-k / 2e-3f64).exp();
            assert!((y - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn trapezoidal_local_error_is_third_order() {
        let (y0, inf, tau) = (0.9, 0.1, 1e-3);
        let err = |k: f64| {
            let trap = gate_step_frozen(y0, inf, tau, k, GateRule::Trapezoidal).unwrap();
            let exact = gate_step_frozen(y0, inf, tau, k, GateRule::ExactExponential).unwrap();
            (trap - exact).abs()
        };
        let ratio = err(1e-5) / err(5e-6);
        assert!((ratio - 8.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn forward_euler_rejects_steps_beyond_twice_tau() {
        let err = gate_step_frozen(0.5, 0.1, 1e-4, 2.5e-4, GateRule::ForwardEuler).unwrap_err();
        assert!(matches!(err, ChannelError::StepRejected { .. }));
        for rule in [
            GateRule::BackwardEuler,
            GateRule::Trapezoidal,
            GateRule::ExactExponential,
        ] {
            assert!(gate_step_frozen(0.5, 0.1, 1e-4, 1.0, rule).is_ok());
        }
    }

    #[test]
    fn calcium_pool_decays_and_saturates() {
        let empty = CalciumPool {
            concentration: 0.0,
            influx_scale: 2.0,
            decay_time: 0.05,
        };
        assert_eq!(calcium_step(empty, 0.0, 1e-3).concentration, 0.0);

        let full = CalciumPool {
            concentration: 3.0,
            ..empty
        };
        let decayed = calcium_step(full, 0.0, 1e-3).concentration;
        assert!((decayed - 3.0 * (-0.02f64).exp()).abs() < 1e-14);

        // Constant inward current drives the pool to B * |I| * tau.
        let mut pool = empty;
        for _ in 0..2000 {
            pool = calcium_step(pool, -1.5, 1e-3);
        }
        assert!((pool.concentration - 2.0 * 1.5 * 0.05).abs() < 1e-12);

        // Outward current cannot drive the pool negative.
        assert_eq!(calcium_step(empty, 5.0, 1e-3).concentration, 0.0);
    }

    #[test]
    fn table_kinetics_interpolate_linearly() {
        let kin = GateKinetics::Table {
            table: KineticsTable {
                v: vec![-0.1, 0.0],
                inf: vec![0.0, 1.0],
                tau: vec![1e-3, 3e-3],
            },
            input: KineticsInput::Voltage,
        };
        let (inf, tau) = kin.inf_tau(-0.05);
        assert!((inf - 0.5).abs() < 1e-12 && (tau - 2e-3).abs() < 1e-15);
        assert_eq!(kin.inf_tau(0.5).0, 1.0);
    }

    #[test]
    fn parses_channel_config() {
        let text = r#"
            [[channel]]
            name = "na"
            g_max = 1200.0
            reversal = 0.05
            activation_exponent = 3
            activation = { kind = "rates", alpha = { form = "linoid", rate = 1e5, x0 = -0.04, slope = 0.01 }, beta = { form = "exponential", rate = 4000.0, x0 = -0.065, slope = -0.018 } }
            inactivation = { kind = "constant", inf = 0.6, tau = 1e-3 }
        "#;
        let set = parse_channels(text).unwrap();
        assert_eq!(set.channels[0].activation, squid::m_gate());
        let missing_pool = text.replace("reversal = 0.05", "reversal = 0.05\ncarries_calcium = true");
        assert!(parse_channels(&missing_pool).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn steady_state_and_tau_stay_in_range(v in -0.15f64..0.1) {
                for kin in [squid::m_gate(), squid::h_gate(), squid::n_gate()] {
                    let (inf, tau) = kin.inf_tau(v);
                    prop_assert!((0.0..=1.0).contains(&inf));
                    prop_assert!(tau > 0.0);
                }
            }

            #[test]
            fn implicit_and_exact_rules_keep_gates_in_unit_interval(
                y in 0.0f64..=1.0, inf in 0.0f64..=1.0, tau in 1e-6f64..1.0, k in 1e-9f64..10.0
            ) {
                for rule in [GateRule::BackwardEuler, GateRule::ExactExponential] {
                    let next = gate_step_frozen(y, inf, tau, k, rule).unwrap();
                    prop_assert!((0.0..=1.0).contains(&next), "{:?} gave {}", rule, next);
                }
                // Trapezoidal keeps the unit interval only while k <= 2 tau;
                // beyond that it still contracts toward y_inf.
                let next = gate_step_frozen(y, inf, tau, k, GateRule::Trapezoidal).unwrap();
                if k <= 2.0 * tau {
                    prop_assert!((0.0..=1.0).contains(&next));
                }
                prop_assert!((next - inf).abs() <= (y - inf).abs());
            }

            #[test]
            fn trapezoidal_halves_agree_to_third_order(
                y in 0.0f64..=1.0, inf in 0.0f64..=1.0, tau in 1e-3f64..1e-2
            ) {
                let k = 1e-5;
                let one = gate_step_frozen(y, inf, tau, k, GateRule::Trapezoidal).unwrap();
                let half = gate_step_frozen(y, inf, tau, k / 2.0, GateRule::Trapezoidal).unwrap();
                let two = gate_step_frozen(half, inf, tau, k / 2.0, GateRule::Trapezoidal).unwrap();
                // leading local error ~ (k/tau)^3 / 12
                prop_assert!((one - two).abs() <= (k / tau).powi(3));
            }

            #[test]
            fn conductance_is_monotone_in_each_gate(
                m in 0.0f64..=1.0, h in 0.0f64..=1.0, dm in 0.0f64..0.5, dh in 0.0f64..0.5
            ) {
                let spec = squid::sodium(1200.0);
                let base = channel_conductance(&spec, GatePair { m, h });
                let more_m = channel_conductance(&spec, GatePair { m: (m + dm).min(1.0), h });
                let more_h = channel_conductance(&spec, GatePair { m, h: (h + dh).min(1.0) });
                prop_assert!(more_m >= base && more_h >= base);
            }
        }
    }
}
