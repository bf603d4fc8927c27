//! Trap location and characterization: potential, minimum search,
//! curvature eigenanalysis, frequencies, ground-state sizes and depths.
//!
//! The search minimizes |B|^2 rather than |B|: it stays differentiable
//! through field zeros, so quadrupole minima are ordinary stationary points.

use crate::layout::ChipLayout;
use crate::magnetics::{
    magnitude_gradient, magnitude_hessian, FieldEngine, FieldError, FieldProvider, Region,
    WidthMode,
};
use crate::quantities::{constants, AtomSpecies, Energy, Vec3};
use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

/// |B| below this is treated as a field zero: magnitude derivatives are
/// meaningless and spin following fails there anyway. 10 mG.
pub const DEFAULT_EPSILON_B: f64 = 1e-6;

/// Adiabatic-following potential V = mu' |B| for a low-field seeker.
#[derive(Debug, Clone)]
pub struct PotentialModel {
    pub species: AtomSpecies,
    /// m_F g_F mu_B, J/T. Positive by construction.
    pub effective_moment: f64,
}

#[derive(Debug, Error)]
pub enum TrapError {
    #[error("species `{0}` is not low-field seeking (m_F g_F <= 0)")]
    NotLowFieldSeeking(String),
    #[error("point lies on a conductor")]
    OnConductor,
    #[error("no minimum found after {0} iterations")]
    NoConvergence(usize),
    #[error("search left the domain or crossed the chip surface")]
    EscapedDomain,
    #[error("gradient of |B|^2 at the supplied point is {gradient:.3e} T^2/m, not a converged minimum")]
    NotAMinimum { gradient: f64 },
    #[error("no potential barrier: the minimum connects to the region boundary at its own level")]
    NoBarrier,
    #[error("|B| is degenerate at the point; harmonic analysis unavailable")]
    Degenerate,
}

impl From<FieldError> for TrapError {
    fn from(e: FieldError) -> Self {
        match e {
            FieldError::OnConductor(_) => TrapError::OnConductor,
            FieldError::DegenerateMagnitude => TrapError::Degenerate,
        }
    }
}

impl PotentialModel {
    pub fn new(species: AtomSpecies) -> Result<Self, TrapError> {
        let effective_moment = species.effective_moment();
        if effective_moment <= 0.0 {
            return Err(TrapError::NotLowFieldSeeking(species.label));
        }
        Ok(PotentialModel { species, effective_moment })
    }

    /// Trap depth set by a homogeneous field: E = |m_F g_F| mu_B |B|.
    pub fn depth_from_bias(&self, bias_magnitude: f64) -> Energy {
        Energy::from_joules(self.species.mf_gf().abs() * constants::MU_B * bias_magnitude)
    }
}

/// V(p) = mu' |B(p)|.
pub fn potential(
    model: &PotentialModel,
    provider: &dyn FieldProvider,
    p: Vec3,
) -> Result<Energy, TrapError> {
    let b = provider.field(p)?;
    Ok(Energy::from_joules(model.effective_moment * b.norm()))
}

/// Convenience: depth from a bias magnitude without building a model first.
pub fn depth_from_bias(bias_magnitude: f64, model: &PotentialModel) -> Energy {
    model.depth_from_bias(bias_magnitude)
}

/// Where the multistart picks its initial guesses.
#[derive(Debug, Clone)]
pub enum SeedSpec {
    Points(Vec<Vec3>),
    /// Regular seed grid over a box; 5x5x5 is the usual choice.
    Grid { region: Region, counts: [usize; 3] },
}

#[derive(Debug, Clone)]
pub struct MinimizationConfig {
    pub seeds: SeedSpec,
    /// Convergence radius of the minimizer, m.
    pub position_tolerance: f64,
    pub max_iterations: usize,
    /// Harmonic / quadrupole split on |B| at the minimum, T.
    pub epsilon_b: f64,
    /// Iterates leaving this box abort the seed. Defaults to the inflated
    /// seed box.
    pub domain: Option<Region>,
}

impl MinimizationConfig {
    pub fn from_region(region: Region) -> Self {
        MinimizationConfig {
            seeds: SeedSpec::Grid { region, counts: [5, 5, 5] },
            position_tolerance: 1e-9,
            max_iterations: 200,
            epsilon_b: DEFAULT_EPSILON_B,
            domain: None,
        }
    }

    pub fn from_seeds(points: Vec<Vec3>) -> Self {
        MinimizationConfig {
            seeds: SeedSpec::Points(points),
            position_tolerance: 1e-9,
            max_iterations: 200,
            epsilon_b: DEFAULT_EPSILON_B,
            domain: None,
        }
    }

    fn seed_points(&self) -> Vec<Vec3> {
        match &self.seeds {
            SeedSpec::Points(p) => p.clone(),
            SeedSpec::Grid { region, counts } => {
                let [nx, ny, nz] = *counts;
                let mut out = Vec::with_capacity(nx * ny * nz);
                let coord = |lo: f64, hi: f64, n: usize, i: usize| {
                    if n == 1 {
                        0.5 * (lo + hi)
                    } else {
                        lo + (hi - lo) * (i as f64 + 0.5) / n as f64
                    }
                };
                for ix in 0..nx {
                    for iy in 0..ny {
                        for iz in 0..nz {
                            out.push(Vec3::new(
                                coord(region.min.x, region.max.x, nx, ix),
                                coord(region.min.y, region.max.y, ny, iy),
                                coord(region.min.z, region.max.z, nz, iz),
                            ));
                        }
                    }
                }
                out
            }
        }
    }

    pub(crate) fn effective_domain(&self) -> Region {
        if let Some(d) = self.domain {
            return d;
        }
        let base = match &self.seeds {
            SeedSpec::Grid { region, .. } => *region,
            SeedSpec::Points(pts) => {
                let mut min = pts[0];
                let mut max = pts[0];
                for p in pts {
                    min = Vec3::new(min.x.min(p.x), min.y.min(p.y), min.z.min(p.z));
                    max = Vec3::new(max.x.max(p.x), max.y.max(p.y), max.z.max(p.z));
                }
                Region::new(min, max)
            }
        };
        // Generous slack plus a floor so point seeds still have room to move.
        let mut d = base.inflated(4.0);
        let floor = 2e-3;
        let c = d.center();
        let half = Vec3::new(
            (0.5 * d.size().x).max(floor),
            (0.5 * d.size().y).max(floor),
            (0.5 * d.size().z).max(floor),
        );
        d = Region::new(c - half, c + half);
        d
    }
}

enum SeedOutcome {
    Converged(Vec3, f64),
    Escaped,
    Failed,
}

fn minimize_from(
    provider: &dyn FieldProvider,
    seed: Vec3,
    domain: &Region,
    cfg: &MinimizationConfig,
) -> SeedOutcome {
    let surface = provider.surface_z();
    if seed.z <= surface || !domain.contains(seed) {
        return SeedOutcome::Failed;
    }
    let mut p = seed;
    let Ok(mut b) = provider.field(p) else { return SeedOutcome::Failed };
    let mut f = b.norm_squared();
    let max_step = domain.size().norm() * 0.25;
    let mut lambda = 1e-2;

    for _ in 0..cfg.max_iterations {
        let Ok(jac) = provider.jacobian(p) else { return SeedOutcome::Failed };
        let bv = Vector3::new(b.x, b.y, b.z);
        let grad = jac.transpose() * bv;
        let jtj = jac.transpose() * jac;
        let scale = jtj.trace() / 3.0;
        if scale < 1e-24 {
            // Flat landscape (no wire field): nothing to descend.
            return SeedOutcome::Failed;
        }

        // Damped Gauss-Newton step with step acceptance. Candidates that
        // leave the domain are rejected like uphill steps; only a damped-out
        // search that still points outside counts as escaped.
        let mut accepted = false;
        let mut exited = false;
        for _ in 0..60 {
            let m = jtj + Matrix3::identity() * (lambda * scale);
            let Some(inv) = m.try_inverse() else {
                lambda *= 4.0;
                continue;
            };
            let d = inv * (-grad);
            let mut step = Vec3::new(d.x, d.y, d.z);
            let norm = step.norm();
            if norm > max_step {
                step = step.scaled(max_step / norm);
            }
            let cand = p + step;
            if cand.z <= surface || !domain.contains(cand) {
                exited = true;
                lambda *= 4.0;
                if lambda > 1e14 {
                    return SeedOutcome::Escaped;
                }
                continue;
            }
            let Ok(bc) = provider.field(cand) else { return SeedOutcome::Failed };
            let fc = bc.norm_squared();
            if fc <= f {
                let moved = (cand - p).norm();
                p = cand;
                b = bc;
                f = fc;
                lambda = (lambda * 0.3).max(1e-10);
                accepted = true;
                if moved < cfg.position_tolerance {
                    return SeedOutcome::Converged(p, f);
                }
                break;
            }
            lambda *= 4.0;
            if lambda > 1e14 {
                // Cannot improve: at machine-level stationarity.
                return SeedOutcome::Converged(p, f);
            }
        }
        if !accepted {
            return if exited { SeedOutcome::Escaped } else { SeedOutcome::Converged(p, f) };
        }
    }
    SeedOutcome::Failed
}

/// Multistart local minimization of |B|^2. Returns the basin minimum with
/// the lowest |B|, ties broken by distance to the first seed.
pub fn find_minimum(
    _model: &PotentialModel,
    provider: &dyn FieldProvider,
    config: &MinimizationConfig,
) -> Result<Vec3, TrapError> {
    let seeds = config.seed_points();
    if seeds.is_empty() {
        return Err(TrapError::NoConvergence(0));
    }
    let surface = provider.surface_z();
    if !seeds.iter().any(|s| s.z > surface) {
        return Err(TrapError::EscapedDomain);
    }
    let domain = config.effective_domain();
    let first_seed = seeds[0];

    let outcomes: Vec<SeedOutcome> = seeds
        .par_iter()
        .map(|&s| minimize_from(provider, s, &domain, config))
        .collect();

    let mut best: Option<(Vec3, f64)> = None;
    let mut any_escaped = false;
    for o in outcomes {
        match o {
            SeedOutcome::Converged(p, f) => {
                // Reject flat "minima" with no field structure at all.
                let structured = provider
                    .jacobian(p)
                    .map(|j| j.norm() > 1e-9)
                    .unwrap_or(false);
                if !structured {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((bp, bf)) => {
                        let tol = 1e-9 * bf.max(f).max(1e-300);
                        if (f - bf).abs() <= tol {
                            (p - first_seed).norm() < (bp - first_seed).norm()
                        } else {
                            f < bf
                        }
                    }
                };
                if better {
                    best = Some((p, f));
                }
            }
            SeedOutcome::Escaped => any_escaped = true,
            SeedOutcome::Failed => {}
        }
    }

    match best {
        Some((p, _)) => Ok(p),
        None if any_escaped => Err(TrapError::EscapedDomain),
        None => Err(TrapError::NoConvergence(config.max_iterations)),
    }
}

/// Local shape of |B| around a minimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrapRegime {
    /// Nonzero field at the bottom; curvature and frequencies defined.
    Harmonic,
    /// Field (near-)zero at the bottom; only the linear gradient form holds.
    LinearQuadrupole,
}

/// Eigenvalue/axis pair of the gradient or curvature tensor.
#[derive(Debug, Clone, Copy)]
pub struct EigenMode {
    pub value: f64,
    pub axis: Vec3,
}

/// One harmonic oscillation mode of the trap.
#[derive(Debug, Clone, Copy)]
pub struct TrapMode {
    pub frequency_hz: f64,
    /// sqrt(hbar / (m omega)), m.
    pub ground_state_size: f64,
    pub axis: Vec3,
}

#[derive(Debug, Clone)]
pub struct TrapCharacterization {
    pub position: Vec3,
    /// |B| at the minimum, T.
    pub b_min: f64,
    /// Singular values of the field Jacobian: |B| slope per direction, T/m.
    pub grad_eigen: [EigenMode; 3],
    /// Eigensystem of the |B| Hessian, T/m^2. Harmonic regime only.
    pub curvature_eigen: Option<[EigenMode; 3]>,
    /// Trap modes, harmonic regime only; axes with negative curvature are
    /// dropped (see `diagnostics`).
    pub modes: Option<Vec<TrapMode>>,
    /// Depth from the homogeneous field alone.
    pub depth_bias: Energy,
    /// Depth from an explicit barrier search, when one was run.
    pub depth_numeric: Option<Energy>,
    /// Spin precession frequency at the bottom, Hz.
    pub larmor_hz: f64,
    /// larmor / max trap frequency; large means spin follows adiabatically.
    /// Zero in the quadrupole regime.
    pub adiabaticity: f64,
    pub regime: TrapRegime,
    pub diagnostics: Vec<String>,
}

impl TrapCharacterization {
    pub fn frequencies_hz(&self) -> Option<Vec<f64>> {
        self.modes.as_ref().map(|m| m.iter().map(|x| x.frequency_hz).collect())
    }

    /// Geometric mean trap frequency; requires all three modes.
    pub fn mean_frequency_hz(&self) -> Option<f64> {
        let modes = self.modes.as_ref()?;
        if modes.len() != 3 {
            return None;
        }
        Some(modes.iter().map(|m| m.frequency_hz).product::<f64>().cbrt())
    }

    pub fn max_frequency_hz(&self) -> Option<f64> {
        self.frequencies_hz()
            .and_then(|f| f.into_iter().reduce(f64::max))
    }

    /// Largest |B| slope at the minimum, T/m.
    pub fn max_gradient(&self) -> f64 {
        self.grad_eigen.iter().map(|e| e.value).fold(0.0, f64::max)
    }

    /// Flat `key = value # unit` export, SI plus friendly views.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: f64, unit: &str| {
            s.push_str(&format!("{k} = {v:.16e} # {unit}\n"));
        };
        kv("position_x", self.position.x, "m");
        kv("position_y", self.position.y, "m");
        kv("position_z", self.position.z, "m");
        kv("position_z_um", self.position.z * 1e6, "um");
        kv("b_min", self.b_min, "T");
        kv("b_min_gauss", self.b_min * 1e4, "G");
        for (i, e) in self.grad_eigen.iter().enumerate() {
            kv(&format!("grad_eigen_{i}"), e.value, "T/m");
            kv(&format!("grad_axis_{i}_x"), e.axis.x, "1");
            kv(&format!("grad_axis_{i}_y"), e.axis.y, "1");
            kv(&format!("grad_axis_{i}_z"), e.axis.z, "1");
        }
        if let Some(ce) = &self.curvature_eigen {
            for (i, e) in ce.iter().enumerate() {
                kv(&format!("curvature_eigen_{i}"), e.value, "T/m^2");
            }
        }
        if let Some(modes) = &self.modes {
            for (i, m) in modes.iter().enumerate() {
                kv(&format!("frequency_{i}"), m.frequency_hz, "Hz");
                kv(&format!("frequency_{i}_khz"), m.frequency_hz * 1e-3, "kHz");
                kv(&format!("ground_state_size_{i}"), m.ground_state_size, "m");
                kv(&format!("ground_state_size_{i}_nm"), m.ground_state_size * 1e9, "nm");
            }
        }
        kv("depth_bias", self.depth_bias.joules(), "J");
        kv("depth_bias_mhz", self.depth_bias.views().frequency_mhz, "MHz");
        kv("depth_bias_mk", self.depth_bias.views().temperature_mk, "mK");
        if let Some(d) = self.depth_numeric {
            kv("depth_numeric", d.joules(), "J");
            kv("depth_numeric_mhz", d.views().frequency_mhz, "MHz");
            kv("depth_numeric_mk", d.views().temperature_mk, "mK");
        }
        kv("larmor_frequency", self.larmor_hz, "Hz");
        kv("adiabaticity", self.adiabaticity, "1");
        s.push_str(&format!(
            "regime = {}\n",
            match self.regime {
                TrapRegime::Harmonic => "harmonic",
                TrapRegime::LinearQuadrupole => "linear-quadrupole",
            }
        ));
        for d in &self.diagnostics {
            s.push_str(&format!("# diagnostic: {d}\n"));
        }
        s
    }
}

fn vec_from(col: nalgebra::VectorView3<f64>) -> Vec3 {
    Vec3::new(col[0], col[1], col[2])
}

/// Characterize a converged minimum: gradients, curvature, frequencies,
/// ground-state sizes, depths, Larmor frequency and adiabaticity.
pub fn characterize(
    model: &PotentialModel,
    provider: &dyn FieldProvider,
    p_star: Vec3,
    config: &MinimizationConfig,
) -> Result<TrapCharacterization, TrapError> {
    let b = provider.field(p_star)?;
    let jac = provider.jacobian(p_star)?;
    let b_min = b.norm();

    // Converged-minimum gate on grad(|B|^2) = 2 J^T B.
    let bv = Vector3::new(b.x, b.y, b.z);
    let grad = (jac.transpose() * bv) * 2.0;
    let svd = jac.svd(false, true);
    let sigma_max = svd.singular_values[0];
    let grad_tol = 2.0 * sigma_max * sigma_max * (100.0 * config.position_tolerance) + 1e-18;
    if grad.norm() > grad_tol {
        return Err(TrapError::NotAMinimum { gradient: grad.norm() });
    }

    // |B| slopes: singular values of J with their position-space directions.
    let vt = svd.v_t.expect("svd with v requested");
    let mut grad_eigen = [EigenMode { value: 0.0, axis: Vec3::ZERO }; 3];
    for i in 0..3 {
        grad_eigen[i] = EigenMode {
            value: svd.singular_values[i],
            axis: vec_from(vt.row(i).transpose().as_view()),
        };
    }

    let mut diagnostics = Vec::new();
    let mass = model.species.mass;
    let (regime, curvature_eigen, modes) = if b_min > config.epsilon_b {
        let hess = magnitude_hessian(provider, p_star, config.epsilon_b)?;
        let eig = hess.symmetric_eigen();
        let mut pairs: Vec<EigenMode> = (0..3)
            .map(|i| EigenMode {
                value: eig.eigenvalues[i],
                axis: vec_from(eig.eigenvectors.column(i).as_view()),
            })
            .collect();
        pairs.sort_by(|a, b| b.value.total_cmp(&a.value));
        let curvature: [EigenMode; 3] = [pairs[0], pairs[1], pairs[2]];
        let lambda_max = pairs[0].value.abs().max(1e-300);
        let mut modes = Vec::new();
        for e in &pairs {
            if e.value <= 0.0 {
                if e.value < -1e-6 * lambda_max {
                    diagnostics.push(format!(
                        "negative |B| curvature {:.3e} T/m^2 along ({:.3}, {:.3}, {:.3}); axis omitted from frequencies",
                        e.value, e.axis.x, e.axis.y, e.axis.z
                    ));
                }
                continue;
            }
            let omega = (model.effective_moment * e.value / mass).sqrt();
            modes.push(TrapMode {
                frequency_hz: omega / (2.0 * std::f64::consts::PI),
                ground_state_size: (constants::HBAR / (mass * omega)).sqrt(),
                axis: e.axis,
            });
        }
        (TrapRegime::Harmonic, Some(curvature), Some(modes))
    } else {
        (TrapRegime::LinearQuadrupole, None, None)
    };

    let larmor_hz = model.effective_moment * b_min.max(config.epsilon_b)
        / (2.0 * std::f64::consts::PI * constants::HBAR);
    let adiabaticity = match &modes {
        Some(m) if !m.is_empty() => {
            larmor_hz / m.iter().map(|x| x.frequency_hz).fold(0.0, f64::max)
        }
        _ => 0.0,
    };

    Ok(TrapCharacterization {
        position: p_star,
        b_min,
        grad_eigen,
        curvature_eigen,
        modes,
        depth_bias: model.depth_from_bias(provider.bias().norm()),
        depth_numeric: None,
        larmor_hz,
        adiabaticity,
        regime,
        diagnostics,
    })
}

/// Options for the numeric barrier search.
#[derive(Debug, Clone)]
pub struct DepthOptions {
    /// Cells per axis of the first grid.
    pub base_resolution: usize,
    /// Stop refining when the barrier moves less than this fraction.
    pub refine_tolerance: f64,
    pub max_refinements: usize,
    /// Fraction of the potential range treated as "his own level" for the
    /// no-barrier test.
    pub no_barrier_fraction: f64,
}

impl Default for DepthOptions {
    fn default() -> Self {
        DepthOptions {
            base_resolution: 64,
            refine_tolerance: 0.02,
            max_refinements: 2,
            no_barrier_fraction: 1e-3,
        }
    }
}

struct PotentialGrid {
    res: usize,
    /// mu' |B| per cell; +inf marks conductor cells.
    v: Vec<f64>,
    /// Cells on the region boundary or at/below the chip surface.
    escape: Vec<bool>,
    start: usize,
}

fn build_grid(
    model: &PotentialModel,
    provider: &dyn FieldProvider,
    region: Region,
    p_star: Vec3,
    res: usize,
) -> PotentialGrid {
    let n = res;
    let size = region.size();
    let surface = provider.surface_z();
    let cell = |i: usize, axis: usize| -> f64 {
        let lo = region.min.component(axis);
        let s = size.component(axis);
        lo + s * (i as f64 + 0.5) / n as f64
    };
    let v: Vec<f64> = (0..n * n * n)
        .into_par_iter()
        .map(|idx| {
            let iz = idx % n;
            let iy = (idx / n) % n;
            let ix = idx / (n * n);
            let p = Vec3::new(cell(ix, 0), cell(iy, 1), cell(iz, 2));
            match provider.field(p) {
                Ok(b) => model.effective_moment * b.norm(),
                Err(_) => f64::INFINITY,
            }
        })
        .collect();
    let mut escape = vec![false; n * n * n];
    for ix in 0..n {
        for iy in 0..n {
            for iz in 0..n {
                let idx = (ix * n + iy) * n + iz;
                let boundary =
                    ix == 0 || iy == 0 || iz == 0 || ix == n - 1 || iy == n - 1 || iz == n - 1;
                let below_surface = cell(iz, 2) <= surface;
                escape[idx] = boundary || below_surface;
            }
        }
    }
    let clampi = |x: f64, axis: usize| -> usize {
        let lo = region.min.component(axis);
        let s = size.component(axis);
        (((x - lo) / s * n as f64).floor() as isize).clamp(0, n as isize - 1) as usize
    };
    let start = (clampi(p_star.x, 0) * n + clampi(p_star.y, 1)) * n + clampi(p_star.z, 2);
    PotentialGrid { res: n, v, escape, start }
}

/// Breadth-first sublevel flood from the start cell; true when an escape
/// cell is reachable without exceeding `level`.
fn connects(grid: &PotentialGrid, level: f64) -> bool {
    let n = grid.res;
    if grid.v[grid.start] > level {
        return false;
    }
    let mut seen = vec![false; n * n * n];
    let mut queue = std::collections::VecDeque::new();
    seen[grid.start] = true;
    queue.push_back(grid.start);
    while let Some(idx) = queue.pop_front() {
        if grid.escape[idx] {
            return true;
        }
        let iz = idx % n;
        let iy = (idx / n) % n;
        let ix = idx / (n * n);
        let mut push = |jx: isize, jy: isize, jz: isize| {
            if jx < 0 || jy < 0 || jz < 0 || jx >= n as isize || jy >= n as isize || jz >= n as isize
            {
                return;
            }
            let j = ((jx as usize) * n + jy as usize) * n + jz as usize;
            if !seen[j] && grid.v[j] <= level {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        let (x, y, z) = (ix as isize, iy as isize, iz as isize);
        push(x - 1, y, z);
        push(x + 1, y, z);
        push(x, y - 1, z);
        push(x, y + 1, z);
        push(x, y, z - 1);
        push(x, y, z + 1);
    }
    false
}

fn barrier_on_grid(
    model: &PotentialModel,
    provider: &dyn FieldProvider,
    region: Region,
    p_star: Vec3,
    v_star: f64,
    res: usize,
    opts: &DepthOptions,
) -> Result<f64, TrapError> {
    let grid = build_grid(model, provider, region, p_star, res);
    let v_max = grid.v.iter().copied().filter(|v| v.is_finite()).fold(v_star, f64::max);
    let range = (v_max - v_star).max(1e-300);
    if connects(&grid, v_star + opts.no_barrier_fraction * range) {
        return Err(TrapError::NoBarrier);
    }
    if !connects(&grid, v_max) {
        // Walled in by conductors on every route; the box max bounds it.
        return Ok(v_max - v_star);
    }
    let mut lo = v_star;
    let mut hi = v_max;
    for _ in 0..48 {
        let mid = 0.5 * (lo + hi);
        if connects(&grid, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi) - v_star)
}

/// Barrier height between the minimum and the region boundary (or the chip
/// surface, which absorbs atoms): level-set bisection over a flood fill,
/// refined until stable.
pub fn depth_numeric(
    model: &PotentialModel,
    provider: &dyn FieldProvider,
    p_star: Vec3,
    region: Region,
    opts: &DepthOptions,
) -> Result<Energy, TrapError> {
    let v_star = potential(model, provider, p_star)?.joules();
    let mut res = opts.base_resolution;
    let mut barrier = barrier_on_grid(model, provider, region, p_star, v_star, res, opts)?;
    for _ in 0..opts.max_refinements {
        res *= 2;
        let refined = barrier_on_grid(model, provider, region, p_star, v_star, res, opts)?;
        let change = (refined - barrier).abs() / refined.abs().max(1e-300);
        barrier = refined;
        if change < opts.refine_tolerance {
            break;
        }
    }
    Ok(Energy::from_joules(barrier))
}

/// One-stop search on a layout: build a converged engine, find the minimum,
/// characterize it.
pub fn characterize_layout(
    model: &PotentialModel,
    layout: &ChipLayout,
    config: &MinimizationConfig,
    mode: WidthMode,
) -> Result<TrapCharacterization, TrapError> {
    let engine = FieldEngine::new(layout, mode);
    let p = find_minimum(model, &engine, config)?;
    characterize(model, &engine, p, config)
}

/// Gradient of V = mu' |B|, used by the dynamics force loop.
pub fn potential_gradient(
    model: &PotentialModel,
    provider: &dyn FieldProvider,
    p: Vec3,
) -> Result<Vec3, TrapError> {
    Ok(magnitude_gradient(provider, p, 0.0)
        .map(|g| g.scaled(model.effective_moment))?)
}
