//! Time-dependent ramps of wire currents and bias components, trap tracking
//! through a ramp sequence, and the adiabatic compression report.
//!
//! Bundled sequences replay the chip loading and transfer protocols: the
//! staged handover from the under-chip loading wire to the surface U wires
//! and on to the thin wire, and the final bias compression.

use crate::layout::{ChipLayout, LayoutError};
use crate::magnetics::{FieldEngine, FieldError, FieldProvider, WidthMode};
use crate::quantities::{constants, Dimension, Unit, Vec3};
use crate::traps::{
    characterize, find_minimum, MinimizationConfig, SeedSpec, TrapCharacterization, TrapError,
    TrapRegime,
};
use nalgebra::Matrix3;
use serde::Deserialize;
use thiserror::Error;

/// What a ramp drives: a wire current or one bias component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Channel {
    Wire(String),
    /// 0 = x, 1 = y, 2 = z.
    BiasAxis(usize),
}

impl Channel {
    pub fn parse(name: &str) -> Result<Channel, SequenceError> {
        Ok(match name {
            "bias.x" => Channel::BiasAxis(0),
            "bias.y" => Channel::BiasAxis(1),
            "bias.z" => Channel::BiasAxis(2),
            other => Channel::Wire(other.to_string()),
        })
    }

    pub fn label(&self) -> String {
        match self {
            Channel::Wire(id) => id.clone(),
            Channel::BiasAxis(0) => "bias.x".into(),
            Channel::BiasAxis(1) => "bias.y".into(),
            Channel::BiasAxis(_) => "bias.z".into(),
        }
    }
}

/// Piecewise-linear ramp of one channel. Values are SI (A or T). Before the
/// first point and after the last, the boundary value holds.
#[derive(Debug, Clone)]
pub struct Ramp {
    pub channel: Channel,
    /// (t seconds, value) with strictly increasing t.
    pub points: Vec<(f64, f64)>,
}

impl Ramp {
    pub fn value_at(&self, t: f64) -> f64 {
        let pts = &self.points;
        if t <= pts[0].0 {
            return pts[0].1;
        }
        if t >= pts[pts.len() - 1].0 {
            return pts[pts.len() - 1].1;
        }
        let mut i = 0;
        while pts[i + 1].0 < t {
            i += 1;
        }
        let (t0, v0) = pts[i];
        let (t1, v1) = pts[i + 1];
        v0 + (v1 - v0) * (t - t0) / (t1 - t0)
    }

    fn check(&self) -> Result<(), SequenceError> {
        if self.points.is_empty() {
            return Err(SequenceError::InvalidRamp(format!(
                "ramp for `{}` has no points",
                self.channel.label()
            )));
        }
        for w in self.points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(SequenceError::InvalidRamp(format!(
                    "ramp times for `{}` must be strictly increasing",
                    self.channel.label()
                )));
            }
        }
        if self.points.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(SequenceError::InvalidRamp(format!(
                "ramp for `{}` has non-finite points",
                self.channel.label()
            )));
        }
        Ok(())
    }
}

/// A base layout plus ramps, valid on [0, duration].
#[derive(Debug, Clone)]
pub struct Sequence {
    pub base_layout: ChipLayout,
    pub ramps: Vec<Ramp>,
    pub duration: f64,
}

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("time {t} s outside the sequence range [0, {duration}] s")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("unknown bundled sequence `{0}`")]
    UnknownSequence(String),
    #[error("channel `{0}` does not exist in the base layout")]
    UnknownChannel(String),
    #[error("invalid ramp: {0}")]
    InvalidRamp(String),
    #[error("compression model needs harmonic traps with three modes at both ends: {0}")]
    RegimeMismatch(String),
    #[error("sequence parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Trap(#[from] TrapError),
}

impl Sequence {
    pub fn new(
        base_layout: ChipLayout,
        ramps: Vec<Ramp>,
        duration: f64,
    ) -> Result<Self, SequenceError> {
        for r in &ramps {
            r.check()?;
            match &r.channel {
                Channel::Wire(id) => {
                    if base_layout.wire(id).is_none() {
                        return Err(SequenceError::UnknownChannel(id.clone()));
                    }
                }
                Channel::BiasAxis(a) => {
                    if *a > 2 {
                        return Err(SequenceError::UnknownChannel(r.channel.label()));
                    }
                }
            }
        }
        for i in 1..ramps.len() {
            if ramps[..i].iter().any(|r| r.channel == ramps[i].channel) {
                return Err(SequenceError::InvalidRamp(format!(
                    "more than one ramp drives `{}`",
                    ramps[i].channel.label()
                )));
            }
        }
        let t_max = ramps
            .iter()
            .flat_map(|r| r.points.iter().map(|p| p.0))
            .fold(0.0f64, f64::max);
        if duration < t_max {
            return Err(SequenceError::InvalidRamp(format!(
                "duration {duration} s is shorter than the last ramp point {t_max} s"
            )));
        }
        Ok(Sequence { base_layout, ramps, duration })
    }

    /// The layout frozen at time t: ramped channels at their interpolated
    /// values, everything else at base values.
    pub fn instantiate(&self, t: f64) -> Result<ChipLayout, SequenceError> {
        if !(0.0..=self.duration).contains(&t) {
            return Err(SequenceError::TimeOutOfRange { t, duration: self.duration });
        }
        let mut layout = self.base_layout.clone();
        for r in &self.ramps {
            let v = r.value_at(t);
            match &r.channel {
                Channel::Wire(id) => layout.set_current(id, v)?,
                Channel::BiasAxis(a) => layout.set_bias_component(*a, v),
            }
        }
        Ok(layout)
    }

    /// All ramp breakpoints plus the endpoints, sorted and deduplicated.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = vec![0.0, self.duration];
        for r in &self.ramps {
            ts.extend(r.points.iter().map(|p| p.0));
        }
        ts.sort_by(f64::total_cmp);
        ts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
        ts
    }

    /// Same protocol with every time multiplied by `factor`.
    pub fn time_scaled(&self, factor: f64) -> Sequence {
        let ramps = self
            .ramps
            .iter()
            .map(|r| Ramp {
                channel: r.channel.clone(),
                points: r.points.iter().map(|&(t, v)| (t * factor, v)).collect(),
            })
            .collect();
        Sequence {
            base_layout: self.base_layout.clone(),
            ramps,
            duration: self.duration * factor,
        }
    }

    /// The protocol run backwards in time.
    pub fn reversed(&self) -> Sequence {
        let d = self.duration;
        let ramps = self
            .ramps
            .iter()
            .map(|r| {
                let mut points: Vec<(f64, f64)> =
                    r.points.iter().map(|&(t, v)| (d - t, v)).collect();
                points.reverse();
                Ramp { channel: r.channel.clone(), points }
            })
            .collect();
        // The reversed base state is the forward end state.
        let mut base = self.base_layout.clone();
        for r in &self.ramps {
            let v = r.value_at(d);
            match &r.channel {
                Channel::Wire(id) => base.set_current(id, v).expect("validated channel"),
                Channel::BiasAxis(a) => base.set_bias_component(*a, v),
            }
        }
        Sequence { base_layout: base, ramps, duration: d }
    }
}

/// A sequence compiled against a filament engine: geometry fixed once,
/// channel values interpolated per query.
pub struct CompiledSequence {
    pub engine: FieldEngine,
    base_currents: Vec<f64>,
    base_bias: Vec3,
    wire_ramps: Vec<(usize, Ramp)>,
    bias_ramps: Vec<(usize, Ramp)>,
    pub duration: f64,
}

impl CompiledSequence {
    pub fn new(seq: &Sequence, mode: WidthMode) -> Self {
        let engine = FieldEngine::new(&seq.base_layout, mode);
        let mut wire_ramps = Vec::new();
        let mut bias_ramps = Vec::new();
        for r in &seq.ramps {
            match &r.channel {
                Channel::Wire(id) => {
                    let idx = engine.wire_index(id).expect("sequence validated against layout");
                    wire_ramps.push((idx, r.clone()));
                }
                Channel::BiasAxis(a) => bias_ramps.push((*a, r.clone())),
            }
        }
        CompiledSequence {
            base_currents: engine.wire_currents().to_vec(),
            base_bias: seq.base_layout.bias.vector,
            engine,
            wire_ramps,
            bias_ramps,
            duration: seq.duration,
        }
    }

    pub fn currents_at(&self, t: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.base_currents);
        for (idx, r) in &self.wire_ramps {
            out[*idx] = r.value_at(t);
        }
    }

    pub fn bias_at(&self, t: f64) -> Vec3 {
        let mut b = self.base_bias;
        for (axis, r) in &self.bias_ramps {
            let v = r.value_at(t);
            match axis {
                0 => b.x = v,
                1 => b.y = v,
                _ => b.z = v,
            }
        }
        b
    }

    /// A static field view at time t.
    pub fn provider_at(&self, t: f64) -> SequenceProvider<'_> {
        let mut currents = Vec::new();
        self.currents_at(t, &mut currents);
        SequenceProvider { engine: &self.engine, currents, bias: self.bias_at(t) }
    }
}

pub struct SequenceProvider<'a> {
    engine: &'a FieldEngine,
    pub currents: Vec<f64>,
    pub bias: Vec3,
}

impl FieldProvider for SequenceProvider<'_> {
    fn field(&self, p: Vec3) -> Result<Vec3, FieldError> {
        self.engine.field_with(p, &self.currents, self.bias)
    }
    fn jacobian(&self, p: Vec3) -> Result<Matrix3<f64>, FieldError> {
        self.engine.jacobian_with(p, &self.currents)
    }
    fn bias(&self) -> Vec3 {
        self.bias
    }
    fn surface_z(&self) -> f64 {
        self.engine.surface_z()
    }
    fn clearance(&self, p: Vec3) -> f64 {
        self.engine.clearance(p)
    }
}

/// Characterizations along a sequence; entries are absent where no trap was
/// found at that time.
#[derive(Debug)]
pub struct TrapTrajectory {
    pub times: Vec<f64>,
    pub entries: Vec<Option<TrapCharacterization>>,
    pub diagnostics: Vec<String>,
}

impl TrapTrajectory {
    pub fn first_present(&self) -> Option<&TrapCharacterization> {
        self.entries.iter().flatten().next()
    }

    pub fn last_present(&self) -> Option<&TrapCharacterization> {
        self.entries.iter().rev().flatten().next()
    }

    /// Largest harmonic frequency anywhere along the trajectory.
    pub fn max_frequency_hz(&self) -> Option<f64> {
        self.entries
            .iter()
            .flatten()
            .filter_map(|c| c.max_frequency_hz())
            .reduce(f64::max)
    }

    /// CSV export, one row per time, all characterization fields.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(
            "t,found,x,y,z,b_min,grad_eigen_0,grad_eigen_1,grad_eigen_2,\
             curvature_eigen_0,curvature_eigen_1,curvature_eigen_2,\
             frequency_0,frequency_1,frequency_2,\
             ground_state_size_0,ground_state_size_1,ground_state_size_2,\
             depth_bias,larmor_frequency,adiabaticity,regime\n",
        );
        for (t, e) in self.times.iter().zip(&self.entries) {
            match e {
                None => {
                    out.push_str(&format!("{t:.16e},0"));
                    for _ in 0..19 {
                        out.push_str(",NaN");
                    }
                    out.push_str(",none\n");
                }
                Some(c) => {
                    out.push_str(&format!(
                        "{t:.16e},1,{:.16e},{:.16e},{:.16e},{:.16e}",
                        c.position.x, c.position.y, c.position.z, c.b_min
                    ));
                    for g in &c.grad_eigen {
                        out.push_str(&format!(",{:.16e}", g.value));
                    }
                    match &c.curvature_eigen {
                        Some(ce) => {
                            for e in ce {
                                out.push_str(&format!(",{:.16e}", e.value));
                            }
                        }
                        None => out.push_str(",NaN,NaN,NaN"),
                    }
                    let modes = c.modes.as_deref().unwrap_or(&[]);
                    for i in 0..3 {
                        match modes.get(i) {
                            Some(m) => out.push_str(&format!(",{:.16e}", m.frequency_hz)),
                            None => out.push_str(",NaN"),
                        }
                    }
                    for i in 0..3 {
                        match modes.get(i) {
                            Some(m) => out.push_str(&format!(",{:.16e}", m.ground_state_size)),
                            None => out.push_str(",NaN"),
                        }
                    }
                    out.push_str(&format!(
                        ",{:.16e},{:.16e},{:.16e},{}\n",
                        c.depth_bias.joules(),
                        c.larmor_hz,
                        c.adiabaticity,
                        match c.regime {
                            TrapRegime::Harmonic => "harmonic",
                            TrapRegime::LinearQuadrupole => "linear-quadrupole",
                        }
                    ));
                }
            }
        }
        out
    }
}

/// Characterize the trap at each time, seeding each search from the
/// previous minimum (continuation). The first time uses the config seeds.
pub fn track(
    seq: &Sequence,
    times: &[f64],
    model: &crate::traps::PotentialModel,
    config: &MinimizationConfig,
    mode: WidthMode,
) -> Result<TrapTrajectory, SequenceError> {
    for w in times.windows(2) {
        if w[1] < w[0] {
            return Err(SequenceError::InvalidRamp("track times must be sorted".into()));
        }
    }
    if let (Some(first), Some(last)) = (times.first(), times.last()) {
        if *first < 0.0 || *last > seq.duration {
            return Err(SequenceError::TimeOutOfRange { t: *last, duration: seq.duration });
        }
    }
    let compiled = CompiledSequence::new(seq, mode);
    let continuation_scale = match &config.seeds {
        SeedSpec::Grid { region, counts } => {
            let s = region.size();
            (s.x / counts[0].max(1) as f64)
                .max(s.y / counts[1].max(1) as f64)
                .max(s.z / counts[2].max(1) as f64)
        }
        SeedSpec::Points(_) => 1e-4,
    };

    let mut entries = Vec::with_capacity(times.len());
    let mut diagnostics = Vec::new();
    let mut prev_min: Option<Vec3> = None;
    for &t in times {
        let provider = compiled.provider_at(t);
        let cfg = match prev_min {
            None => config.clone(),
            Some(p) => {
                let mut c = MinimizationConfig::from_seeds(vec![p]);
                c.position_tolerance = config.position_tolerance;
                c.max_iterations = config.max_iterations;
                c.epsilon_b = config.epsilon_b;
                c.domain = Some(config.effective_domain());
                c
            }
        };
        match find_minimum(model, &provider, &cfg)
            .and_then(|p| characterize(model, &provider, p, &cfg).map(|c| (p, c)))
        {
            Ok((p, c)) => {
                if let Some(prev) = prev_min {
                    let jump = (p - prev).norm();
                    if jump > 10.0 * continuation_scale {
                        diagnostics.push(format!(
                            "discontinuity at t = {t:.6e} s: trap moved {jump:.3e} m in one step"
                        ));
                    }
                }
                prev_min = Some(p);
                entries.push(Some(c));
            }
            Err(e) => {
                diagnostics.push(format!("t = {t:.6e} s: {e}"));
                entries.push(None);
            }
        }
    }
    Ok(TrapTrajectory { times: times.to_vec(), entries, diagnostics })
}

/// Adiabatic compression summary between the trajectory endpoints under 3D
/// harmonic following: T scales with the geometric-mean frequency, peak
/// density with its 3/2 power.
#[derive(Debug, Clone)]
pub struct CompressionReport {
    pub mean_frequency_initial_hz: f64,
    pub mean_frequency_final_hz: f64,
    pub temperature_factor: f64,
    pub final_temperature_k: f64,
    pub density_factor: f64,
    /// Set when the projected final temperature exceeds a tenth of the
    /// final trap depth: atoms start spilling over the barrier.
    pub loss_risk: bool,
}

pub fn compression_report(
    traj: &TrapTrajectory,
    initial_temperature: f64,
) -> Result<CompressionReport, SequenceError> {
    let first = traj
        .entries
        .first()
        .and_then(|e| e.as_ref())
        .ok_or_else(|| SequenceError::RegimeMismatch("no trap at the initial time".into()))?;
    let last = traj
        .entries
        .last()
        .and_then(|e| e.as_ref())
        .ok_or_else(|| SequenceError::RegimeMismatch("no trap at the final time".into()))?;
    let f_i = first.mean_frequency_hz().ok_or_else(|| {
        SequenceError::RegimeMismatch("initial trap is not harmonic in all three axes".into())
    })?;
    let f_f = last.mean_frequency_hz().ok_or_else(|| {
        SequenceError::RegimeMismatch("final trap is not harmonic in all three axes".into())
    })?;
    let temperature_factor = f_f / f_i;
    let final_temperature_k = initial_temperature * temperature_factor;
    let depth_k = last.depth_bias.temperature_k();
    Ok(CompressionReport {
        mean_frequency_initial_hz: f_i,
        mean_frequency_final_hz: f_f,
        temperature_factor,
        final_temperature_k,
        density_factor: temperature_factor.powf(1.5),
        loss_risk: final_temperature_k > 0.1 * depth_k,
    })
}

// ---------------------------------------------------------------------------
// Bundled sequences
// ---------------------------------------------------------------------------

pub const BUILTIN_SEQUENCES: [&str; 3] = ["fig4-transfer", "fig3-loading", "onchip-bias-demo"];

/// Bundled sequence with the default 10 ms stage duration.
pub fn builtin_sequence(name: &str) -> Result<Sequence, SequenceError> {
    builtin_sequence_with_stage(name, 0.010)
}

/// Bundled sequence with a chosen stage duration.
///
/// `fig4-transfer`: start with 2 A in both U wires and 300 mA in the thin
/// wire, ramp the U wires to 0.5 A, then off, then compress by raising the
/// perpendicular bias from 4 G to 12 G. Stage boundaries at k x `stage`.
///
/// `fig3-loading`: 16 A under-chip wire at 8 G; raise the bias to 19 G;
/// hand over to the chip U wires (2 A) while the under-chip wire ramps off;
/// hand over to the thin wire (300 mA) while the U wires ramp off.
///
/// `onchip-bias-demo`: static self-contained trap, U currents opposite to
/// the thin wire, no external bias.
pub fn builtin_sequence_with_stage(name: &str, stage: f64) -> Result<Sequence, SequenceError> {
    use crate::layout::{builtin_layout, loading_stack, BuiltinParams};
    let t = stage;
    match name {
        "fig4-transfer" => {
            let base = builtin_layout("two-u-plus-thin", &BuiltinParams::default())?;
            let ramps = vec![
                Ramp {
                    channel: Channel::Wire("u-left".into()),
                    points: vec![(0.0, 2.0), (t, 0.5), (2.0 * t, 0.0)],
                },
                Ramp {
                    channel: Channel::Wire("u-right".into()),
                    points: vec![(0.0, 2.0), (t, 0.5), (2.0 * t, 0.0)],
                },
                Ramp {
                    channel: Channel::BiasAxis(0),
                    points: vec![(2.0 * t, -4.0e-4), (3.0 * t, -1.2e-3)],
                },
            ];
            Sequence::new(base, ramps, 3.0 * t)
        }
        "fig3-loading" => {
            let base = loading_stack();
            let ramps = vec![
                Ramp {
                    channel: Channel::BiasAxis(0),
                    points: vec![(0.0, -8.0e-4), (t, -1.9e-3)],
                },
                Ramp {
                    channel: Channel::Wire("under-chip".into()),
                    points: vec![(t, 16.0), (2.0 * t, 0.0)],
                },
                Ramp {
                    channel: Channel::Wire("u-left".into()),
                    points: vec![(t, 0.0), (2.0 * t, 2.0), (3.0 * t, 0.0)],
                },
                Ramp {
                    channel: Channel::Wire("u-right".into()),
                    points: vec![(t, 0.0), (2.0 * t, 2.0), (3.0 * t, 0.0)],
                },
                Ramp {
                    channel: Channel::Wire("thin".into()),
                    points: vec![(2.0 * t, 0.0), (3.0 * t, 0.3)],
                },
            ];
            Sequence::new(base, ramps, 3.0 * t)
        }
        "onchip-bias-demo" => {
            let base = builtin_layout("onchip-bias", &BuiltinParams::default())?;
            Sequence::new(base, vec![], t)
        }
        other => Err(SequenceError::UnknownSequence(other.to_string())),
    }
}

// ---------------------------------------------------------------------------
// Sequence file format
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SeqQuantity {
    value: f64,
    unit: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SeqUnits {
    t: String,
    value: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RampFile {
    channel: String,
    points: Vec<[f64; 2]>,
    units: SeqUnits,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SequenceFile {
    base_layout: String,
    duration: SeqQuantity,
    ramps: Vec<RampFile>,
}

/// Parse a sequence file. `load_layout` resolves the `base_layout` string
/// (a file path or `builtin:<name>`) to a parsed layout.
pub fn parse_sequence(
    text: &str,
    load_layout: &dyn Fn(&str) -> Result<ChipLayout, LayoutError>,
) -> Result<Sequence, SequenceError> {
    let file: SequenceFile = serde_json::from_str(text).map_err(|e| SequenceError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let base = load_layout(&file.base_layout)?;
    let dur_unit =
        Unit::parse(&file.duration.unit).map_err(|_| SequenceError::UnknownUnit(file.duration.unit.clone()))?;
    if dur_unit.dimension() != Dimension::Time {
        return Err(SequenceError::InvalidRamp("duration unit is not a time".into()));
    }
    let duration = file.duration.value * dur_unit.si_scale();

    let mut ramps = Vec::with_capacity(file.ramps.len());
    for rf in &file.ramps {
        let channel = Channel::parse(&rf.channel)?;
        let t_unit =
            Unit::parse(&rf.units.t).map_err(|_| SequenceError::UnknownUnit(rf.units.t.clone()))?;
        let v_unit = Unit::parse(&rf.units.value)
            .map_err(|_| SequenceError::UnknownUnit(rf.units.value.clone()))?;
        if t_unit.dimension() != Dimension::Time {
            return Err(SequenceError::InvalidRamp(format!(
                "ramp `{}`: time unit `{}` is not a time",
                rf.channel, rf.units.t
            )));
        }
        let want = match channel {
            Channel::Wire(_) => Dimension::Current,
            Channel::BiasAxis(_) => Dimension::Field,
        };
        if v_unit.dimension() != want {
            return Err(SequenceError::InvalidRamp(format!(
                "ramp `{}`: value unit `{}` has the wrong dimension",
                rf.channel, rf.units.value
            )));
        }
        let points = rf
            .points
            .iter()
            .map(|[t, v]| (t * t_unit.si_scale(), v * v_unit.si_scale()))
            .collect();
        ramps.push(Ramp { channel, points });
    }
    Sequence::new(base, ramps, duration)
}

/// Depth in kelvin for a bias vector under a given model; loss bookkeeping
/// helper shared with the dynamics energy filter.
pub fn depth_kelvin(model: &crate::traps::PotentialModel, bias: Vec3) -> f64 {
    model.species.mf_gf().abs() * constants::MU_B * bias.norm() / constants::K_B
}
