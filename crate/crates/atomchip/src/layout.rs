//! Chip layout data model: wires, bias field, file format, validation and
//! the bundled wire geometries.
//!
//! Geometry conventions used by the bundled layouts:
//! - the chip surface is the plane z = `surface_z` (0 by default), atoms live
//!   at z > `surface_z`;
//! - trap-forming wire sections run along +y and carry positive current in
//!   +y, which pairs with a bias pointing in -x to place the field minimum
//!   above the chip;
//! - every bundled wire path is a closed loop: the segments that close the
//!   circuit are routed 30-50 mm away from the trap region. An open path is
//!   not a steady-state current and its field picks up spurious curl near the
//!   loose ends.

use crate::quantities::{Unit, Vec3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current density above which real chip wires are known to survive only
/// briefly, A/m² (10⁶ A/cm²). Crossing it draws a warning.
pub const CURRENT_DENSITY_WARN: f64 = 1e10;
/// Ten times the warning level; layouts above this are rejected.
pub const CURRENT_DENSITY_ERROR: f64 = 1e11;
/// Default gold layer thickness, m.
pub const DEFAULT_THICKNESS: f64 = 2.5e-6;

/// A conductor on (or under) the chip: a polyline centerline with a
/// rectangular cross section. Positive current flows from the first path
/// vertex towards the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Wire {
    pub id: String,
    /// Centerline vertices, m.
    pub path: Vec<Vec3>,
    /// In-plane width, m.
    pub width: f64,
    /// Layer thickness, m.
    pub thickness: f64,
    /// Signed current, A.
    pub current: f64,
}

impl Wire {
    pub fn new(id: &str, path: Vec<Vec3>, width: f64, thickness: f64, current: f64) -> Self {
        Wire { id: id.to_string(), path, width, thickness, current }
    }

    /// Cross-section current density magnitude, A/m².
    pub fn current_density(&self) -> f64 {
        self.current.abs() / (self.width * self.thickness)
    }

    /// True when the path returns to its starting vertex.
    pub fn is_closed(&self) -> bool {
        match (self.path.first(), self.path.last()) {
            (Some(a), Some(b)) => (*a - *b).norm() < 1e-12,
            _ => false,
        }
    }

    fn check_invariants(&self) -> Result<(), String> {
        if self.path.len() < 2 {
            return Err("path needs at least 2 vertices".into());
        }
        if !(self.width > 0.0) {
            return Err("width must be positive".into());
        }
        if !(self.thickness > 0.0) {
            return Err("thickness must be positive".into());
        }
        if !self.current.is_finite() {
            return Err("current must be finite".into());
        }
        for v in &self.path {
            if !v.is_finite() {
                return Err("path vertex must be finite".into());
            }
        }
        for w in self.path.windows(2) {
            if (w[1] - w[0]).norm() < 1e-12 {
                return Err("consecutive path vertices coincide".into());
            }
        }
        Ok(())
    }
}

/// Homogeneous external field, T.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BiasField {
    pub vector: Vec3,
}

/// A complete field source description: wires plus bias plus the chip plane.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipLayout {
    pub label: String,
    pub wires: Vec<Wire>,
    pub bias: BiasField,
    /// Chip plane height, m. Atoms are lost below it.
    pub surface_z: f64,
}

impl ChipLayout {
    pub fn wire(&self, id: &str) -> Option<&Wire> {
        self.wires.iter().find(|w| w.id == id)
    }

    pub fn set_current(&mut self, id: &str, amps: f64) -> Result<(), LayoutError> {
        match self.wires.iter_mut().find(|w| w.id == id) {
            Some(w) => {
                w.current = amps;
                Ok(())
            }
            None => Err(LayoutError::UnknownChannel(id.to_string())),
        }
    }

    /// axis: 0 = x, 1 = y, 2 = z.
    pub fn set_bias_component(&mut self, axis: usize, tesla: f64) {
        match axis {
            0 => self.bias.vector.x = tesla,
            1 => self.bias.vector.y = tesla,
            _ => self.bias.vector.z = tesla,
        }
    }

    fn check_invariants(&self) -> Result<(), LayoutError> {
        if !self.surface_z.is_finite() {
            return Err(LayoutError::Invalid {
                wire: None,
                message: "surface_z must be finite".into(),
            });
        }
        if !self.bias.vector.is_finite() {
            return Err(LayoutError::Invalid {
                wire: None,
                message: "bias components must be finite".into(),
            });
        }
        for w in &self.wires {
            w.check_invariants().map_err(|message| LayoutError::Invalid {
                wire: Some(w.id.clone()),
                message,
            })?;
        }
        for i in 1..self.wires.len() {
            if self.wires[..i].iter().any(|w| w.id == self.wires[i].id) {
                return Err(LayoutError::Invalid {
                    wire: Some(self.wires[i].id.clone()),
                    message: "duplicate wire id".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("invalid layout{}: {message}", wire.as_deref().map(|w| format!(" (wire `{w}`)")).unwrap_or_default())]
    Invalid { wire: Option<String>, message: String },
    #[error("unknown bundled layout `{0}`")]
    UnknownLayout(String),
    #[error("unknown channel `{0}`")]
    UnknownChannel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Warning,
    Error,
}

/// One validation finding. `measured` carries the offending quantity in SI.
#[derive(Debug, Clone)]
pub struct Diagnostic {
    pub severity: Severity,
    pub wire: Option<String>,
    pub message: String,
    pub measured: Option<f64>,
}

/// Outcome of [`validate`]: a layout with any ERROR diagnostic is rejected
/// for simulation.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn has_errors(&self) -> bool {
        self.diagnostics.iter().any(|d| d.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics.iter().filter(|d| d.severity == Severity::Warning)
    }
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantityField {
    value: f64,
    unit: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BiasFileField {
    x: f64,
    y: f64,
    z: f64,
    unit: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireFile {
    id: String,
    width: QuantityField,
    #[serde(skip_serializing_if = "Option::is_none")]
    thickness: Option<QuantityField>,
    current: QuantityField,
    path: Vec<[f64; 3]>,
    path_unit: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayoutFile {
    label: String,
    surface_z: QuantityField,
    bias: BiasFileField,
    wires: Vec<WireFile>,
}

fn quantity_si(q: &QuantityField, dim: crate::quantities::Dimension) -> Result<f64, LayoutError> {
    let unit = Unit::parse(&q.unit).map_err(|_| LayoutError::UnknownUnit(q.unit.clone()))?;
    if unit.dimension() != dim {
        return Err(LayoutError::Invalid {
            wire: None,
            message: format!("unit `{}` has the wrong dimension", q.unit),
        });
    }
    if !q.value.is_finite() {
        return Err(LayoutError::Invalid { wire: None, message: "non-finite value".into() });
    }
    Ok(q.value * unit.si_scale())
}

/// Parse a layout file (JSON syntax, explicit units) into SI quantities.
pub fn parse_layout(text: &str) -> Result<ChipLayout, LayoutError> {
    let file: LayoutFile = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        if let Some(rest) = msg.strip_prefix("missing field ") {
            let field = rest.split(" at ").next().unwrap_or(rest).trim_matches('`');
            return LayoutError::MissingField(field.to_string());
        }
        LayoutError::Parse { line: e.line(), column: e.column(), message: msg }
    })?;

    use crate::quantities::Dimension;
    let surface_z = quantity_si(&file.surface_z, Dimension::Length)?;
    let bias_unit =
        Unit::parse(&file.bias.unit).map_err(|_| LayoutError::UnknownUnit(file.bias.unit.clone()))?;
    if bias_unit.dimension() != Dimension::Field {
        return Err(LayoutError::Invalid {
            wire: None,
            message: format!("bias unit `{}` is not a field unit", file.bias.unit),
        });
    }
    let bs = bias_unit.si_scale();
    let bias = BiasField { vector: Vec3::new(file.bias.x * bs, file.bias.y * bs, file.bias.z * bs) };

    let mut wires = Vec::with_capacity(file.wires.len());
    for wf in &file.wires {
        let width = quantity_si(&wf.width, Dimension::Length)?;
        let thickness = match &wf.thickness {
            Some(t) => quantity_si(t, Dimension::Length)?,
            None => DEFAULT_THICKNESS,
        };
        let current = quantity_si(&wf.current, Dimension::Current)?;
        let path_unit =
            Unit::parse(&wf.path_unit).map_err(|_| LayoutError::UnknownUnit(wf.path_unit.clone()))?;
        if path_unit.dimension() != Dimension::Length {
            return Err(LayoutError::Invalid {
                wire: Some(wf.id.clone()),
                message: format!("path unit `{}` is not a length", wf.path_unit),
            });
        }
        let ps = path_unit.si_scale();
        let path = wf
            .path
            .iter()
            .map(|v| Vec3::new(v[0] * ps, v[1] * ps, v[2] * ps))
            .collect();
        wires.push(Wire::new(&wf.id, path, width, thickness, current));
    }

    let layout = ChipLayout { label: file.label, wires, bias, surface_z };
    layout.check_invariants()?;
    Ok(layout)
}

/// Serialize a layout back to the file format, SI units throughout.
/// `parse_layout(serialize_layout(l))` reproduces `l` exactly.
pub fn serialize_layout(layout: &ChipLayout) -> String {
    let file = LayoutFile {
        label: layout.label.clone(),
        surface_z: QuantityField { value: layout.surface_z, unit: "m".into() },
        bias: BiasFileField {
            x: layout.bias.vector.x,
            y: layout.bias.vector.y,
            z: layout.bias.vector.z,
            unit: "T".into(),
        },
        wires: layout
            .wires
            .iter()
            .map(|w| WireFile {
                id: w.id.clone(),
                width: QuantityField { value: w.width, unit: "m".into() },
                thickness: Some(QuantityField { value: w.thickness, unit: "m".into() }),
                current: QuantityField { value: w.current, unit: "A".into() },
                path: w.path.iter().map(|v| v.as_array()).collect(),
                path_unit: "m".into(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("layout serialization cannot fail")
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

fn segment_distance(a0: Vec3, a1: Vec3, b0: Vec3, b1: Vec3) -> f64 {
    // Closest distance between two segments (standard clamped-parameter form).
    let d1 = a1 - a0;
    let d2 = b1 - b0;
    let r = a0 - b0;
    let aa = d1.dot(d1);
    let ee = d2.dot(d2);
    let f = d2.dot(r);
    let (s, t);
    if aa <= 1e-30 && ee <= 1e-30 {
        return r.norm();
    }
    if aa <= 1e-30 {
        s = 0.0;
        t = (f / ee).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(r);
        if ee <= 1e-30 {
            t = 0.0;
            s = (-c / aa).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(d2);
            let denom = aa * ee - b * b;
            let mut s0 = if denom > 1e-30 { ((b * f - c * ee) / denom).clamp(0.0, 1.0) } else { 0.0 };
            let mut t0 = (b * s0 + f) / ee;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / aa).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / aa).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    ((a0 + d1 * s) - (b0 + d2 * t)).norm()
}

/// Static checks on a parsed layout. Pure: equal layouts give equal reports.
pub fn validate(layout: &ChipLayout) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut push = |severity, wire: Option<&str>, message: String, measured: Option<f64>| {
        report.diagnostics.push(Diagnostic {
            severity,
            wire: wire.map(|s| s.to_string()),
            message,
            measured,
        });
    };

    for w in &layout.wires {
        if let Err(msg) = w.check_invariants() {
            push(Severity::Error, Some(&w.id), msg, None);
            continue;
        }
        if w.current != 0.0 {
            let j = w.current_density();
            if j > CURRENT_DENSITY_ERROR {
                push(
                    Severity::Error,
                    Some(&w.id),
                    format!(
                        "current density {:.3e} A/m^2 ({:.3e} A/cm^2) exceeds 10x the sustainable level",
                        j,
                        j * 1e-4
                    ),
                    Some(j),
                );
            } else if j > CURRENT_DENSITY_WARN {
                push(
                    Severity::Warning,
                    Some(&w.id),
                    format!(
                        "current density {:.3e} A/m^2 ({:.3e} A/cm^2) exceeds 1e6 A/cm^2",
                        j,
                        j * 1e-4
                    ),
                    Some(j),
                );
            }
        }
        if !w.is_closed() {
            push(
                Severity::Warning,
                Some(&w.id),
                "wire path is open; the field is only curl-free if the circuit closes far away"
                    .into(),
                None,
            );
        }
    }

    // Overlap of distinct wires at equal height.
    for i in 0..layout.wires.len() {
        for j in (i + 1)..layout.wires.len() {
            let (wi, wj) = (&layout.wires[i], &layout.wires[j]);
            let z_gate = 0.5 * (wi.thickness + wj.thickness);
            let clearance = 0.5 * (wi.width + wj.width);
            'pairs: for si in wi.path.windows(2) {
                for sj in wj.path.windows(2) {
                    let zi = 0.5 * (si[0].z + si[1].z);
                    let zj = 0.5 * (sj[0].z + sj[1].z);
                    if (zi - zj).abs() >= z_gate {
                        continue;
                    }
                    let d = segment_distance(si[0], si[1], sj[0], sj[1]);
                    if d < clearance {
                        push(
                            Severity::Error,
                            Some(&wi.id),
                            format!(
                                "wires `{}` and `{}` overlap at equal height (centerline distance {:.3e} m < {:.3e} m)",
                                wi.id, wj.id, d, clearance
                            ),
                            Some(d),
                        );
                        break 'pairs;
                    }
                }
            }
        }
    }

    let bias_mag = layout.bias.vector.norm();
    if bias_mag >= 1.0 {
        push(
            Severity::Error,
            None,
            format!("bias magnitude {bias_mag:.3} T is outside the sane range (< 1 T)"),
            Some(bias_mag),
        );
    }

    report
}

// ---------------------------------------------------------------------------
// Bundled layouts
// ---------------------------------------------------------------------------

/// Per-call overrides for a bundled layout.
#[derive(Debug, Clone, Default)]
pub struct BuiltinParams {
    /// Replace the current of specific wires, (id, amperes).
    pub currents: Vec<(String, f64)>,
    /// Replace the bias vector, T.
    pub bias: Option<Vec3>,
}

impl BuiltinParams {
    pub fn with_current(mut self, id: &str, amps: f64) -> Self {
        self.currents.push((id.to_string(), amps));
        self
    }

    pub fn with_bias(mut self, bias: Vec3) -> Self {
        self.bias = Some(bias);
        self
    }
}

const MM: f64 = 1e-3;

fn path_mm(points: &[(f64, f64)], z: f64) -> Vec<Vec3> {
    points.iter().map(|&(x, y)| Vec3::new(x * MM, y * MM, z)).collect()
}

/// Straight 10 um guide wire closed through a loop 50 mm to the side.
/// Defaults: 200 mA, 40 G bias in -x. The field zero line sits at
/// mu0*I/(2*pi*B) above the wire (10 um at the defaults).
fn side_guide() -> ChipLayout {
    let path = path_mm(&[(0.0, -10.0), (0.0, 10.0), (50.0, 10.0), (50.0, -10.0), (0.0, -10.0)], 0.0);
    ChipLayout {
        label: "side-guide".into(),
        wires: vec![Wire::new("guide", path, 10e-6, DEFAULT_THICKNESS, 0.2)],
        bias: BiasField { vector: Vec3::new(-4.0e-3, 0.0, 0.0) },
        surface_z: 0.0,
    }
}

/// One U-shaped 200 um wire: 2 mm central bar along y at x = 0, 2 mm arms,
/// circuit closed 30 mm to the left. Defaults: 2 A, 8 G bias.
/// Forms a quadrupole trap with a field zero.
fn u_trap_200() -> ChipLayout {
    let path = path_mm(
        &[(-2.0, -1.0), (0.0, -1.0), (0.0, 1.0), (-2.0, 1.0), (-30.0, 1.0), (-30.0, -1.0), (-2.0, -1.0)],
        0.0,
    );
    ChipLayout {
        label: "u-trap-200".into(),
        wires: vec![Wire::new("u", path, 200e-6, DEFAULT_THICKNESS, 2.0)],
        bias: BiasField { vector: Vec3::new(-8.0e-4, 0.0, 0.0) },
        surface_z: 0.0,
    }
}

/// One Z-shaped 10 um wire: 1.85 mm central bar, 2 mm leads leaving in the
/// same direction, circuit closed far away. Defaults: 200 mA, 40 G bias in -x
/// plus a 1 G longitudinal bias that sets the field at the trap bottom.
/// Forms an Ioffe-type trap with nonzero |B| at the minimum.
fn z_trap_10() -> ChipLayout {
    let path = path_mm(
        &[
            (-2.0, -0.925),
            (0.0, -0.925),
            (0.0, 0.925),
            (2.0, 0.925),
            (30.0, 0.925),
            (30.0, 40.0),
            (-30.0, 40.0),
            (-30.0, -0.925),
            (-2.0, -0.925),
        ],
        0.0,
    );
    ChipLayout {
        label: "z-trap-10".into(),
        wires: vec![Wire::new("z", path, 10e-6, DEFAULT_THICKNESS, 0.2)],
        bias: BiasField { vector: Vec3::new(-4.0e-3, -1.0e-4, 0.0) },
        surface_z: 0.0,
    }
}

/// The transfer-stage geometry: two 200 um U wires with bars at x = +-1 mm
/// and a thin 10 um Z wire between them (1.6 mm bar at x = 0, leads exiting
/// through the channel between the U bars). Defaults are the transfer start:
/// 2 A in each U, 300 mA in the thin wire, 4 G perpendicular plus 1 G
/// longitudinal bias.
fn two_u_plus_thin() -> ChipLayout {
    let u_left = path_mm(
        &[(-3.0, -1.0), (-1.0, -1.0), (-1.0, 1.0), (-3.0, 1.0), (-30.0, 1.0), (-30.0, -1.0), (-3.0, -1.0)],
        0.0,
    );
    let u_right = path_mm(
        &[(3.0, -1.0), (1.0, -1.0), (1.0, 1.0), (3.0, 1.0), (30.0, 1.0), (30.0, -1.0), (3.0, -1.0)],
        0.0,
    );
    let thin = path_mm(
        &[
            (-0.85, -30.0),
            (-0.85, -0.8),
            (0.0, -0.8),
            (0.0, 0.8),
            (0.85, 0.8),
            (0.85, 30.0),
            (40.0, 30.0),
            (40.0, -30.0),
            (-0.85, -30.0),
        ],
        0.0,
    );
    ChipLayout {
        label: "two-u-plus-thin".into(),
        wires: vec![
            Wire::new("u-left", u_left, 200e-6, DEFAULT_THICKNESS, 2.0),
            Wire::new("u-right", u_right, 200e-6, DEFAULT_THICKNESS, 2.0),
            Wire::new("thin", thin, 10e-6, DEFAULT_THICKNESS, 0.3),
        ],
        bias: BiasField { vector: Vec3::new(-4.0e-4, -1.0e-4, 0.0) },
        surface_z: 0.0,
    }
}

/// The 1 mm loading wire mounted 600 um below the chip, same footprint as
/// the left U. Defaults: 16 A, 8 G bias.
fn under_chip_u() -> ChipLayout {
    let path = path_mm(
        &[(-3.0, -1.0), (-1.0, -1.0), (-1.0, 1.0), (-3.0, 1.0), (-30.0, 1.0), (-30.0, -1.0), (-3.0, -1.0)],
        -0.6,
    );
    ChipLayout {
        label: "under-chip-u".into(),
        wires: vec![Wire::new("under-chip", path, 1e-3, 1e-3, 16.0)],
        bias: BiasField { vector: Vec3::new(-8.0e-4, 0.0, 0.0) },
        surface_z: 0.0,
    }
}

/// Self-contained trapping demo: the transfer geometry with the U currents
/// reversed relative to the thin wire and no external bias. The U bars then
/// generate the bias-like field parallel to the chip surface themselves.
fn onchip_bias() -> ChipLayout {
    let mut layout = two_u_plus_thin();
    layout.label = "onchip-bias".into();
    layout.set_current("u-left", -2.0).unwrap();
    layout.set_current("u-right", -2.0).unwrap();
    layout.set_current("thin", 0.3).unwrap();
    layout.bias = BiasField::default();
    layout
}

pub const BUILTIN_LAYOUTS: [&str; 6] =
    ["side-guide", "u-trap-200", "z-trap-10", "two-u-plus-thin", "under-chip-u", "onchip-bias"];

/// Construct a bundled layout by name, with optional overrides.
pub fn builtin_layout(name: &str, params: &BuiltinParams) -> Result<ChipLayout, LayoutError> {
    let mut layout = match name {
        "side-guide" => side_guide(),
        "u-trap-200" => u_trap_200(),
        "z-trap-10" => z_trap_10(),
        "two-u-plus-thin" => two_u_plus_thin(),
        "under-chip-u" => under_chip_u(),
        "onchip-bias" => onchip_bias(),
        other => return Err(LayoutError::UnknownLayout(other.to_string())),
    };
    for (id, amps) in &params.currents {
        layout.set_current(id, *amps)?;
    }
    if let Some(b) = params.bias {
        layout.bias = BiasField { vector: b };
    }
    Ok(layout)
}

/// The composite loading stack: under-chip wire plus the full transfer
/// geometry, with only the under-chip wire initially energized. Used as the
/// base layout of the loading sequence.
pub fn loading_stack() -> ChipLayout {
    let mut layout = two_u_plus_thin();
    layout.label = "loading-stack".into();
    let mut under = under_chip_u().wires.remove(0);
    under.current = 16.0;
    layout.wires.insert(0, under);
    layout.set_current("u-left", 0.0).unwrap();
    layout.set_current("u-right", 0.0).unwrap();
    layout.set_current("thin", 0.0).unwrap();
    layout.bias = BiasField { vector: Vec3::new(-8.0e-4, -1.0e-4, 0.0) };
    layout
}
