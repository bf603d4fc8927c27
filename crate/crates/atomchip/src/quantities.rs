//! Base physical quantities: vectors, constants, unit conversion, atomic
//! species and energy views.
//!
//! Everything internal is SI (tesla, meter, second, joule, kelvin). Non-SI
//! units appear only at file and CLI boundaries, always with an explicit tag.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Physical constants used throughout the toolkit.
///
/// Frozen in one place so numeric goldens stay stable. `MU0` is the
/// pre-2019 exact value; the toolkit treats it as exact by definition.
pub mod constants {
    /// Vacuum permeability, T·m/A. Exactly 4π×10⁻⁷ in this toolkit.
    pub const MU0: f64 = 4.0e-7 * std::f64::consts::PI;
    /// μ0 / 4π, the Biot-Savart prefactor per ampere. Exactly 1e-7.
    pub const MU0_OVER_4PI: f64 = 1.0e-7;
    /// Bohr magneton, J/T (CODATA 2018).
    pub const MU_B: f64 = 9.274_010_078_3e-24;
    /// Planck constant, J·s (exact, SI 2019).
    pub const PLANCK_H: f64 = 6.626_070_15e-34;
    /// Reduced Planck constant, J·s.
    pub const HBAR: f64 = 1.054_571_817e-34;
    /// Boltzmann constant, J/K (exact, SI 2019).
    pub const K_B: f64 = 1.380_649e-23;
    /// Atomic mass unit, kg (CODATA 2018).
    pub const AMU: f64 = 1.660_539_066_60e-27;
    /// Mass of ⁷Li, kg (7.0160034366 u).
    pub const MASS_LI7: f64 = 7.016_003_436_6 * AMU;
    /// Standard gravitational acceleration, m/s².
    pub const G_EARTH: f64 = 9.806_65;
}

/// Cartesian triple. Meters for positions, tesla for fields, m/s for
/// velocities; the context fixes the dimension.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn scaled(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        self.scaled(1.0 / n)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn component(self, axis: usize) -> f64 {
        match axis {
            0 => self.x,
            1 => self.y,
            _ => self.z,
        }
    }

    pub fn as_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        self.scaled(s)
    }
}

impl From<[f64; 3]> for Vec3 {
    fn from(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }
}

/// Dimension class of a unit tag. Conversion is only defined within a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Current,
    Field,
    Length,
    Temperature,
    Frequency,
    FieldGradient,
    Time,
}

/// The unit tags the toolkit accepts at file and CLI boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unit {
    Ampere,
    Milliampere,
    Tesla,
    Gauss,
    Meter,
    Centimeter,
    Millimeter,
    Micrometer,
    Nanometer,
    Kelvin,
    Millikelvin,
    Microkelvin,
    Hertz,
    Kilohertz,
    Megahertz,
    TeslaPerMeter,
    KilogaussPerCentimeter,
    GaussPerCentimeter,
    Second,
    Millisecond,
    Microsecond,
}

impl Unit {
    pub fn dimension(self) -> Dimension {
        use Unit::*;
        match self {
            Ampere | Milliampere => Dimension::Current,
            Tesla | Gauss => Dimension::Field,
            Meter | Centimeter | Millimeter | Micrometer | Nanometer => Dimension::Length,
            Kelvin | Millikelvin | Microkelvin => Dimension::Temperature,
            Hertz | Kilohertz | Megahertz => Dimension::Frequency,
            TeslaPerMeter | KilogaussPerCentimeter | GaussPerCentimeter => {
                Dimension::FieldGradient
            }
            Second | Millisecond | Microsecond => Dimension::Time,
        }
    }

    /// Scale factor to the SI unit of the same dimension.
    pub fn si_scale(self) -> f64 {
        use Unit::*;
        match self {
            Ampere | Tesla | Meter | Kelvin | Hertz | TeslaPerMeter | Second => 1.0,
            Milliampere | Millimeter | Millikelvin | Millisecond => 1e-3,
            Gauss => 1e-4,
            Centimeter => 1e-2,
            Micrometer | Microkelvin | Microsecond => 1e-6,
            Nanometer => 1e-9,
            Kilohertz => 1e3,
            Megahertz => 1e6,
            // 1 kG/cm = 0.1 T / 1e-2 m = 10 T/m
            KilogaussPerCentimeter => 10.0,
            GaussPerCentimeter => 1e-2,
        }
    }

    pub fn parse(tag: &str) -> Result<Unit, QuantityError> {
        use Unit::*;
        Ok(match tag {
            "A" => Ampere,
            "mA" => Milliampere,
            "T" => Tesla,
            "G" => Gauss,
            "m" => Meter,
            "cm" => Centimeter,
            "mm" => Millimeter,
            "um" | "µm" | "μm" => Micrometer,
            "nm" => Nanometer,
            "K" => Kelvin,
            "mK" => Millikelvin,
            "uK" | "µK" | "μK" => Microkelvin,
            "Hz" => Hertz,
            "kHz" => Kilohertz,
            "MHz" => Megahertz,
            "T/m" => TeslaPerMeter,
            "kG/cm" => KilogaussPerCentimeter,
            "G/cm" => GaussPerCentimeter,
            "s" => Second,
            "ms" => Millisecond,
            "us" | "µs" | "μs" => Microsecond,
            _ => return Err(QuantityError::UnknownUnit(tag.to_string())),
        })
    }

    pub fn label(self) -> &'static str {
        use Unit::*;
        match self {
            Ampere => "A",
            Milliampere => "mA",
            Tesla => "T",
            Gauss => "G",
            Meter => "m",
            Centimeter => "cm",
            Millimeter => "mm",
            Micrometer => "um",
            Nanometer => "nm",
            Kelvin => "K",
            Millikelvin => "mK",
            Microkelvin => "uK",
            Hertz => "Hz",
            Kilohertz => "kHz",
            Megahertz => "MHz",
            TeslaPerMeter => "T/m",
            KilogaussPerCentimeter => "kG/cm",
            GaussPerCentimeter => "G/cm",
            Second => "s",
            Millisecond => "ms",
            Microsecond => "us",
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QuantityError {
    #[error("incompatible units: cannot convert {from} to {to}")]
    IncompatibleUnits { from: &'static str, to: &'static str },
    #[error("unknown unit tag `{0}`")]
    UnknownUnit(String),
    #[error("non-finite value in unit conversion")]
    NonFinite,
}

/// Exact scale-factor conversion between two unit tags of the same dimension.
pub fn convert(value: f64, from: Unit, to: Unit) -> Result<f64, QuantityError> {
    if !value.is_finite() {
        return Err(QuantityError::NonFinite);
    }
    if from.dimension() != to.dimension() {
        return Err(QuantityError::IncompatibleUnits {
            from: from.label(),
            to: to.label(),
        });
    }
    Ok(value * (from.si_scale() / to.si_scale()))
}

/// An energy stored in joules, viewable as a frequency (E/h) or a
/// temperature (E/kB).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Energy {
    joules: f64,
}

/// The three standard views of one energy value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyViews {
    pub joules: f64,
    pub frequency_mhz: f64,
    pub temperature_mk: f64,
}

impl Energy {
    pub fn from_joules(joules: f64) -> Self {
        Energy { joules }
    }

    pub fn from_frequency_hz(f: f64) -> Self {
        Energy { joules: f * constants::PLANCK_H }
    }

    pub fn from_temperature_k(t: f64) -> Self {
        Energy { joules: t * constants::K_B }
    }

    pub fn joules(self) -> f64 {
        self.joules
    }

    pub fn frequency_hz(self) -> f64 {
        self.joules / constants::PLANCK_H
    }

    pub fn temperature_k(self) -> f64 {
        self.joules / constants::K_B
    }

    pub fn views(self) -> EnergyViews {
        EnergyViews {
            joules: self.joules,
            frequency_mhz: self.frequency_hz() * 1e-6,
            temperature_mk: self.temperature_k() * 1e3,
        }
    }
}

/// An atomic species in a fixed hyperfine Zeeman state.
///
/// Trappable (low-field-seeking) states require `m_f * g_f > 0`. The ⁷Li
/// presets use the standard ground-state Landé factors g_F = +1/2 (F=2)
/// and g_F = -1/2 (F=1); these are textbook atomic-structure values.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomSpecies {
    /// Atomic mass, kg.
    pub mass: f64,
    /// Landé g-factor of the hyperfine level.
    pub g_f: f64,
    /// Magnetic quantum number.
    pub m_f: i32,
    pub label: String,
}

impl AtomSpecies {
    pub fn new(mass: f64, g_f: f64, m_f: i32, label: &str) -> Self {
        assert!(mass > 0.0, "species mass must be positive");
        AtomSpecies { mass, g_f, m_f, label: label.to_string() }
    }

    /// ⁷Li |F=2, mF=2⟩, the stretched state (m_F g_F = 1).
    pub fn li7_f2_mf2() -> Self {
        Self::new(constants::MASS_LI7, 0.5, 2, "7Li F=2 mF=2")
    }

    /// ⁷Li |F=2, mF=1⟩ (m_F g_F = 1/2).
    pub fn li7_f2_mf1() -> Self {
        Self::new(constants::MASS_LI7, 0.5, 1, "7Li F=2 mF=1")
    }

    /// ⁷Li |F=1, mF=-1⟩ (m_F g_F = 1/2).
    pub fn li7_f1_mfm1() -> Self {
        Self::new(constants::MASS_LI7, -0.5, -1, "7Li F=1 mF=-1")
    }

    /// All bundled ⁷Li presets.
    pub fn li7_presets() -> Vec<AtomSpecies> {
        vec![Self::li7_f2_mf2(), Self::li7_f2_mf1(), Self::li7_f1_mfm1()]
    }

    /// m_F · g_F; positive for low-field seekers.
    pub fn mf_gf(&self) -> f64 {
        self.m_f as f64 * self.g_f
    }

    /// |μ| = m_F g_F μ_B projected on the field axis, J/T. Positive for
    /// trappable states.
    pub fn effective_moment(&self) -> f64 {
        self.mf_gf() * constants::MU_B
    }
}
