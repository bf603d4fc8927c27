//! Classical ensemble dynamics of low-field-seeking atoms in the
//! time-dependent potential V = mu' |B(p, t)|.
//!
//! Atoms are independent point particles: no collisions, spin following the
//! field adiabatically. Velocity Verlet keeps the energy bounded over long
//! runs; losses are bookkept per atom (surface contact, domain exit, energy
//! above the trap depth while moving outward).

use crate::magnetics::{FieldProvider, Region, WidthMode};
use crate::quantities::{constants, AtomSpecies, Vec3};
use crate::sequences::{CompiledSequence, Sequence, SequenceError};
use crate::traps::{MinimizationConfig, PotentialModel, TrapCharacterization, TrapError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossCause {
    /// Hit the chip (z <= surface).
    Surface,
    /// Energy above the trap depth while moving away from the trap.
    DepthEscape,
    /// Left the integration domain.
    DomainExit,
}

#[derive(Debug, Clone, Copy)]
pub struct AtomState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub alive: bool,
    pub loss_cause: Option<LossCause>,
}

/// A classical ensemble of one species. The seed is recorded so any run can
/// be reproduced bit for bit; atom `i` draws from stream `i` of the seeded
/// generator, so ensembles are stable under resizing and parallel layout.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub atoms: Vec<AtomState>,
    pub species: AtomSpecies,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("timestep {dt:.3e} s too large: the stiffest tracked trap frequency {f_max:.3e} Hz needs dt <= {dt_max:.3e} s")]
    TimestepTooLarge { dt: f64, f_max: f64, dt_max: f64 },
    #[error("thermal sampling in Gaussian mode needs a harmonic trap with three modes")]
    RegimeMismatch,
    #[error("ensemble is empty")]
    NoAtoms,
    #[error("initial positions must lie inside the integration domain")]
    OutsideDomain,
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error(transparent)]
    Trap(#[from] TrapError),
}

fn atom_rng(seed: u64, atom: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(atom as u64);
    rng
}

/// Boltzmann sample of the local harmonic approximation of a trap: positions
/// Gaussian along the mode axes with sigma_i = sqrt(kB T / (m omega_i^2)),
/// velocities Maxwell(T). Deterministic for a given seed.
pub fn sample_thermal(
    trap: &TrapCharacterization,
    species: &AtomSpecies,
    temperature: f64,
    n: usize,
    seed: u64,
) -> Result<Ensemble, DynamicsError> {
    let modes = trap.modes.as_deref().filter(|m| m.len() == 3).ok_or(DynamicsError::RegimeMismatch)?;
    let mass = species.mass;
    let sigma_v = (constants::K_B * temperature.max(0.0) / mass).sqrt();
    let sigmas: Vec<(Vec3, f64)> = modes
        .iter()
        .map(|m| {
            let omega = 2.0 * std::f64::consts::PI * m.frequency_hz;
            (m.axis, (constants::K_B * temperature.max(0.0) / mass).sqrt() / omega)
        })
        .collect();

    let atoms: Vec<AtomState> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = atom_rng(seed, i);
            let mut pos = trap.position;
            for (axis, sigma) in &sigmas {
                let g: f64 = rng.sample(StandardNormal);
                pos += axis.scaled(g * sigma);
            }
            let velocity = Vec3::new(
                sigma_v * rng.sample::<f64, _>(StandardNormal),
                sigma_v * rng.sample::<f64, _>(StandardNormal),
                sigma_v * rng.sample::<f64, _>(StandardNormal),
            );
            AtomState { position: pos, velocity, alive: true, loss_cause: None }
        })
        .collect();

    Ok(Ensemble { atoms, species: species.clone(), seed })
}

/// Boltzmann sample against the true potential by rejection inside a box:
/// positions accepted with exp(-(V - V_min)/kB T), velocities Maxwell(T).
pub fn sample_thermal_rejection(
    model: &PotentialModel,
    provider: &dyn crate::magnetics::FieldProvider,
    region: Region,
    temperature: f64,
    n: usize,
    seed: u64,
) -> Result<Ensemble, DynamicsError> {
    // Coarse scan for the potential floor inside the box.
    let probe = 24;
    let mut v_min = f64::INFINITY;
    for ix in 0..probe {
        for iy in 0..probe {
            for iz in 0..probe {
                let f = |i: usize, lo: f64, hi: f64| lo + (hi - lo) * (i as f64 + 0.5) / probe as f64;
                let p = Vec3::new(
                    f(ix, region.min.x, region.max.x),
                    f(iy, region.min.y, region.max.y),
                    f(iz, region.min.z, region.max.z),
                );
                if let Ok(b) = provider.field(p) {
                    v_min = v_min.min(model.effective_moment * b.norm());
                }
            }
        }
    }
    let kt = constants::K_B * temperature;
    let mass = model.species.mass;
    let sigma_v = (kt / mass).sqrt();

    let atoms: Vec<AtomState> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = atom_rng(seed, i);
            let position = loop {
                let p = Vec3::new(
                    rng.gen_range(region.min.x..region.max.x),
                    rng.gen_range(region.min.y..region.max.y),
                    rng.gen_range(region.min.z..region.max.z),
                );
                let Ok(b) = provider.field(p) else { continue };
                let v = model.effective_moment * b.norm();
                let accept = (-(v - v_min) / kt).exp();
                if rng.gen::<f64>() < accept {
                    break p;
                }
            };
            let velocity = Vec3::new(
                sigma_v * rng.sample::<f64, _>(StandardNormal),
                sigma_v * rng.sample::<f64, _>(StandardNormal),
                sigma_v * rng.sample::<f64, _>(StandardNormal),
            );
            AtomState { position, velocity, alive: true, loss_cause: None }
        })
        .collect();

    Ok(Ensemble { atoms, species: model.species.clone(), seed })
}

#[derive(Debug, Clone)]
pub struct IntegratorConfig {
    /// Timestep, s. Must resolve the stiffest trap frequency: dt <= 1/(50 f).
    pub dt: f64,
    /// Atoms leaving this box are lost.
    pub domain: Region,
    /// Include -g z. Off by default: magnetic forces dominate by orders of
    /// magnitude at chip-trap gradients.
    pub gravity: bool,
    /// Record observables every this many steps.
    pub output_stride: usize,
    pub width_mode: WidthMode,
    /// Energy-filter depth override, J. Defaults to the instantaneous bias
    /// depth mu' |B_bias(t)|.
    pub depth_override: Option<f64>,
}

impl IntegratorConfig {
    pub fn new(dt: f64, domain: Region) -> Self {
        IntegratorConfig {
            dt,
            domain,
            gravity: false,
            output_stride: 100,
            width_mode: WidthMode::Thin,
            depth_override: None,
        }
    }
}

/// Recorded simulation: frame times plus per-frame per-atom state, and the
/// final atom states with loss causes.
pub struct SimResult {
    pub times: Vec<f64>,
    /// [frame][atom]
    pub positions: Vec<Vec<Vec3>>,
    pub velocities: Vec<Vec<Vec3>>,
    pub alive: Vec<Vec<bool>>,
    pub final_states: Vec<AtomState>,
    pub species: AtomSpecies,
}

/// Per-frame ensemble statistics.
pub struct Observables {
    pub times: Vec<f64>,
    pub n_alive: Vec<usize>,
    /// Equipartition temperature per axis, K.
    pub t_axes: Vec<[f64; 3]>,
    /// Geometric mean of the axis temperatures: tracks the mean trap
    /// frequency under per-axis adiabatic following.
    pub t_geometric: Vec<f64>,
    /// Arithmetic mean of the axis temperatures.
    pub t_arithmetic: Vec<f64>,
    pub rms: Vec<[f64; 3]>,
    /// alive / (rms_x rms_y rms_z).
    pub density_proxy: Vec<f64>,
    pub retained_fraction: Vec<f64>,
}

struct TrapTrack {
    times: Vec<f64>,
    positions: Vec<Option<Vec3>>,
    f_max: Option<f64>,
}

impl TrapTrack {
    fn position_at(&self, t: f64, fallback: Vec3) -> Vec3 {
        // Linear interpolation over present entries; nearest present entry
        // at the ends.
        let mut prev: Option<(f64, Vec3)> = None;
        let mut next: Option<(f64, Vec3)> = None;
        for (ti, pi) in self.times.iter().zip(&self.positions) {
            if let Some(p) = pi {
                if *ti <= t {
                    prev = Some((*ti, *p));
                } else {
                    next = Some((*ti, *p));
                    break;
                }
            }
        }
        match (prev, next) {
            (Some((t0, p0)), Some((t1, p1))) => {
                let f = if t1 > t0 { (t - t0) / (t1 - t0) } else { 0.0 };
                p0 + (p1 - p0).scaled(f)
            }
            (Some((_, p)), None) | (None, Some((_, p))) => p,
            (None, None) => fallback,
        }
    }
}

fn track_for_dynamics(
    seq: &Sequence,
    model: &PotentialModel,
    config: &IntegratorConfig,
) -> Result<TrapTrack, DynamicsError> {
    let mut times = Vec::new();
    let bps = seq.breakpoints();
    for w in bps.windows(2) {
        times.push(w[0]);
        times.push(0.5 * (w[0] + w[1]));
    }
    times.push(*bps.last().unwrap());
    let mcfg = MinimizationConfig::from_region(config.domain);
    let traj = crate::sequences::track(seq, &times, model, &mcfg, config.width_mode)?;
    let f_max = traj.max_frequency_hz();
    let positions = traj
        .entries
        .iter()
        .map(|e| e.as_ref().map(|c| c.position))
        .collect();
    Ok(TrapTrack { times, positions, f_max })
}

/// Velocity-Verlet integration of the ensemble through a sequence.
pub fn integrate(
    ensemble: &Ensemble,
    seq: &Sequence,
    model: &PotentialModel,
    config: &IntegratorConfig,
) -> Result<SimResult, DynamicsError> {
    if ensemble.atoms.is_empty() {
        return Err(DynamicsError::NoAtoms);
    }
    if ensemble.atoms.iter().any(|a| !config.domain.contains(a.position)) {
        return Err(DynamicsError::OutsideDomain);
    }
    let track = track_for_dynamics(seq, model, config)?;
    if let Some(f_max) = track.f_max {
        let dt_max = 1.0 / (50.0 * f_max);
        if config.dt > dt_max {
            return Err(DynamicsError::TimestepTooLarge { dt: config.dt, f_max, dt_max });
        }
    }

    let compiled = CompiledSequence::new(seq, config.width_mode);
    let n_steps = (seq.duration / config.dt).ceil() as usize;
    let stride = config.output_stride.max(1);
    let mut frame_steps: Vec<usize> = (0..=n_steps).step_by(stride).collect();
    if *frame_steps.last().unwrap() != n_steps {
        frame_steps.push(n_steps);
    }
    let times: Vec<f64> = frame_steps.iter().map(|&k| (k as f64 * config.dt).min(seq.duration)).collect();

    let mass = model.species.mass;
    let moment = model.effective_moment;
    let surface = compiled.engine.surface_z();
    let domain = config.domain;
    let gravity = if config.gravity { constants::G_EARTH } else { 0.0 };
    let fallback_center = domain.center();

    struct AtomRun {
        frames: Vec<(Vec3, Vec3, bool)>,
        fin: AtomState,
    }

    let runs: Vec<AtomRun> = ensemble
        .atoms
        .par_iter()
        .map(|atom0| {
            let mut currents: Vec<f64> = Vec::new();
            let mut frames = Vec::with_capacity(frame_steps.len());
            let mut state = *atom0;
            let mut frame_cursor = 0usize;

            // Acceleration and potential at (p, t); the potential rides
            // along free of charge for the energy filter.
            let accel = |p: Vec3, t: f64, cur: &mut Vec<f64>| -> Option<(Vec3, f64)> {
                compiled.currents_at(t, cur);
                let bias = compiled.bias_at(t);
                match compiled.engine.field_and_jacobian_with(p, cur, bias) {
                    Ok((b, jac)) => {
                        let norm = b.norm().max(1e-15);
                        let gx = (b.x * jac[(0, 0)] + b.y * jac[(1, 0)] + b.z * jac[(2, 0)]) / norm;
                        let gy = (b.x * jac[(0, 1)] + b.y * jac[(1, 1)] + b.z * jac[(2, 1)]) / norm;
                        let gz = (b.x * jac[(0, 2)] + b.y * jac[(1, 2)] + b.z * jac[(2, 2)]) / norm;
                        let scale = -moment / mass;
                        let acc = Vec3::new(gx * scale, gy * scale, gz * scale - gravity);
                        Some((acc, moment * norm))
                    }
                    // On-conductor evaluation: treated as a surface hit by
                    // the caller.
                    Err(_) => None,
                }
            };

            let record = |k: usize, s: &AtomState, frames: &mut Vec<(Vec3, Vec3, bool)>, cursor: &mut usize| {
                if *cursor < frame_steps.len() && frame_steps[*cursor] == k {
                    frames.push((s.position, s.velocity, s.alive));
                    *cursor += 1;
                }
            };

            let kill = |s: &mut AtomState, cause: LossCause| {
                s.alive = false;
                s.loss_cause = Some(cause);
                s.velocity = Vec3::ZERO;
            };

            let mut acc = match accel(state.position, 0.0, &mut currents) {
                Some((a, _)) => a,
                None => {
                    kill(&mut state, LossCause::Surface);
                    Vec3::ZERO
                }
            };
            record(0, &state, &mut frames, &mut frame_cursor);

            for k in 1..=n_steps {
                if state.alive {
                    let dt = config.dt;
                    let t_next = (k as f64 * dt).min(seq.duration);
                    state.position += state.velocity.scaled(dt) + acc.scaled(0.5 * dt * dt);

                    if state.position.z <= surface {
                        kill(&mut state, LossCause::Surface);
                    } else if !domain.contains(state.position) {
                        kill(&mut state, LossCause::DomainExit);
                    } else {
                        match accel(state.position, t_next, &mut currents) {
                            Some((a_new, v_pot)) => {
                                state.velocity += (acc + a_new).scaled(0.5 * dt);
                                acc = a_new;
                                let depth = config.depth_override.unwrap_or_else(|| {
                                    moment * compiled.bias_at(t_next).norm()
                                });
                                if v_pot > depth {
                                    let trap_p =
                                        track.position_at(t_next, fallback_center);
                                    if (state.position - trap_p).dot(state.velocity) > 0.0 {
                                        kill(&mut state, LossCause::DepthEscape);
                                    }
                                }
                            }
                            None => kill(&mut state, LossCause::Surface),
                        }
                    }
                }
                record(k, &state, &mut frames, &mut frame_cursor);
            }
            AtomRun { frames, fin: state }
        })
        .collect();

    let n_frames = times.len();
    let n_atoms = ensemble.atoms.len();
    let mut positions = vec![vec![Vec3::ZERO; n_atoms]; n_frames];
    let mut velocities = vec![vec![Vec3::ZERO; n_atoms]; n_frames];
    let mut alive = vec![vec![false; n_atoms]; n_frames];
    for (ai, run) in runs.iter().enumerate() {
        for (fi, (p, v, al)) in run.frames.iter().enumerate() {
            positions[fi][ai] = *p;
            velocities[fi][ai] = *v;
            alive[fi][ai] = *al;
        }
    }

    Ok(SimResult {
        times,
        positions,
        velocities,
        alive,
        final_states: runs.into_iter().map(|r| r.fin).collect(),
        species: ensemble.species.clone(),
    })
}

/// Per-frame temperatures, sizes, retention and density proxy. Summation is
/// in fixed atom order, so parallel and serial runs agree bitwise.
pub fn observables(result: &SimResult) -> Observables {
    let n0 = result.final_states.len().max(1);
    let mass = result.species.mass;
    let mut out = Observables {
        times: result.times.clone(),
        n_alive: Vec::new(),
        t_axes: Vec::new(),
        t_geometric: Vec::new(),
        t_arithmetic: Vec::new(),
        rms: Vec::new(),
        density_proxy: Vec::new(),
        retained_fraction: Vec::new(),
    };
    for fi in 0..result.times.len() {
        let mut n = 0usize;
        let mut vsum = [0.0f64; 3];
        let mut psum = [0.0f64; 3];
        for (ai, &al) in result.alive[fi].iter().enumerate() {
            if !al {
                continue;
            }
            n += 1;
            let v = result.velocities[fi][ai];
            let p = result.positions[fi][ai];
            for a in 0..3 {
                vsum[a] += v.component(a);
                psum[a] += p.component(a);
            }
        }
        let nf = n.max(1) as f64;
        let vmean = [vsum[0] / nf, vsum[1] / nf, vsum[2] / nf];
        let pmean = [psum[0] / nf, psum[1] / nf, psum[2] / nf];
        let mut vvar = [0.0f64; 3];
        let mut pvar = [0.0f64; 3];
        for (ai, &al) in result.alive[fi].iter().enumerate() {
            if !al {
                continue;
            }
            let v = result.velocities[fi][ai];
            let p = result.positions[fi][ai];
            for a in 0..3 {
                vvar[a] += (v.component(a) - vmean[a]).powi(2);
                pvar[a] += (p.component(a) - pmean[a]).powi(2);
            }
        }
        let t_ax = [
            mass * vvar[0] / nf / constants::K_B,
            mass * vvar[1] / nf / constants::K_B,
            mass * vvar[2] / nf / constants::K_B,
        ];
        let rms = [(pvar[0] / nf).sqrt(), (pvar[1] / nf).sqrt(), (pvar[2] / nf).sqrt()];
        let vol = rms[0] * rms[1] * rms[2];
        out.n_alive.push(n);
        out.t_axes.push(t_ax);
        out.t_geometric.push((t_ax[0] * t_ax[1] * t_ax[2]).cbrt());
        out.t_arithmetic.push((t_ax[0] + t_ax[1] + t_ax[2]) / 3.0);
        out.rms.push(rms);
        out.density_proxy.push(if vol > 0.0 { n as f64 / vol } else { f64::NAN });
        out.retained_fraction.push(n as f64 / n0 as f64);
    }
    out
}

impl SimResult {
    /// Frame CSV: `t,N_alive,T_x,T_y,T_z,rms_x,rms_y,rms_z,density_proxy`.
    pub fn observables_csv(&self) -> String {
        let obs = observables(self);
        let mut s = String::from("t,N_alive,T_x,T_y,T_z,rms_x,rms_y,rms_z,density_proxy\n");
        for i in 0..obs.times.len() {
            s.push_str(&format!(
                "{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                obs.times[i],
                obs.n_alive[i],
                obs.t_axes[i][0],
                obs.t_axes[i][1],
                obs.t_axes[i][2],
                obs.rms[i][0],
                obs.rms[i][1],
                obs.rms[i][2],
                obs.density_proxy[i],
            ));
        }
        s
    }

    /// Full per-atom dump: `t,atom_id,x,y,z,vx,vy,vz,alive`.
    pub fn trajectory_csv(&self) -> String {
        let mut s = String::from("t,atom_id,x,y,z,vx,vy,vz,alive\n");
        for (fi, t) in self.times.iter().enumerate() {
            for ai in 0..self.final_states.len() {
                let p = self.positions[fi][ai];
                let v = self.velocities[fi][ai];
                s.push_str(&format!(
                    "{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
                    t,
                    ai,
                    p.x,
                    p.y,
                    p.z,
                    v.x,
                    v.y,
                    v.z,
                    u8::from(self.alive[fi][ai]),
                ));
            }
        }
        s
    }

    /// Total energy of one live atom in a static field, J. Test hook for
    /// conservation checks.
    pub fn energy_of(
        &self,
        frame: usize,
        atom: usize,
        model: &PotentialModel,
        provider: &dyn crate::magnetics::FieldProvider,
    ) -> Option<f64> {
        if !self.alive[frame][atom] {
            return None;
        }
        let p = self.positions[frame][atom];
        let v = self.velocities[frame][atom];
        let b = provider.field(p).ok()?;
        Some(0.5 * model.species.mass * v.norm_squared() + model.effective_moment * b.norm())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{builtin_layout, BuiltinParams};
    use crate::magnetics::{FieldEngine, FieldProvider};
    use crate::traps::{characterize, find_minimum};
    use approx::assert_relative_eq;

    fn li7() -> (PotentialModel, AtomSpecies) {
        let s = AtomSpecies::li7_f2_mf2();
        (PotentialModel::new(s.clone()).unwrap(), s)
    }

    /// Ioffe-type guide: side-guide plus a longitudinal bias so |B| stays
    /// smooth and harmonic on the axis.
    fn smooth_guide() -> crate::layout::ChipLayout {
        builtin_layout(
            "side-guide",
            &BuiltinParams::default().with_bias(Vec3::new(-4e-3, -1e-4, 0.0)),
        )
        .unwrap()
    }

    fn guide_trap(
        model: &PotentialModel,
        engine: &FieldEngine,
    ) -> (Vec3, TrapCharacterization, MinimizationConfig) {
        let cfg = MinimizationConfig::from_region(Region::new(
            Vec3::new(-5e-6, -5e-5, 5e-6),
            Vec3::new(5e-6, 5e-5, 2e-5),
        ));
        let p = find_minimum(model, engine, &cfg).unwrap();
        let c = characterize(model, engine, p, &cfg).unwrap();
        (p, c, cfg)
    }

    /// Short-bar Z trap (200 um bar): all three modes well confined
    /// (~150 kHz transverse, ~700 Hz axial), so thermal clouds stay compact.
    fn compact_z_layout() -> crate::layout::ChipLayout {
        use crate::layout::{BiasField, ChipLayout, Wire};
        let mm = 1e-3;
        let pts = [
            (-1.0, -0.1),
            (0.0, -0.1),
            (0.0, 0.1),
            (1.0, 0.1),
            (20.0, 0.1),
            (20.0, 20.0),
            (-20.0, 20.0),
            (-20.0, -0.1),
            (-1.0, -0.1),
        ];
        let path = pts.iter().map(|&(x, y)| Vec3::new(x * mm, y * mm, 0.0)).collect();
        ChipLayout {
            label: "compact-z".into(),
            wires: vec![Wire::new("z", path, 10e-6, 2.5e-6, 0.2)],
            bias: BiasField { vector: Vec3::new(-4e-3, -1e-4, 0.0) },
            surface_z: 0.0,
        }
    }

    fn compact_z_trap(
        model: &PotentialModel,
    ) -> (crate::layout::ChipLayout, FieldEngine, Vec3, TrapCharacterization) {
        let layout = compact_z_layout();
        let engine = FieldEngine::new(&layout, WidthMode::Thin);
        let cfg = MinimizationConfig::from_region(Region::new(
            Vec3::new(-5e-6, -5e-5, 5e-6),
            Vec3::new(5e-6, 5e-5, 2e-5),
        ));
        let p = find_minimum(model, &engine, &cfg).unwrap();
        let c = characterize(model, &engine, p, &cfg).unwrap();
        assert_eq!(c.modes.as_ref().map(|m| m.len()), Some(3), "{:?}", c.diagnostics);
        (layout, engine, p, c)
    }

    #[test]
    fn sampling_matches_boltzmann_moments() {
        let (model, species) = li7();
        let (_, _, _, trap) = compact_z_trap(&model);
        let temp = 50e-6;
        let n = 10_000;
        let ens = sample_thermal(&trap, &species, temp, n, 42).unwrap();

        // Velocity variance per axis: kB T / m within 5 %.
        let kt_m = constants::K_B * temp / species.mass;
        for axis in 0..3 {
            let mean: f64 =
                ens.atoms.iter().map(|a| a.velocity.component(axis)).sum::<f64>() / n as f64;
            let var: f64 = ens
                .atoms
                .iter()
                .map(|a| (a.velocity.component(axis) - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            assert!((var / kt_m - 1.0).abs() < 0.05, "axis {axis}: var {var} vs {kt_m}");
        }

        // Position spread along each mode: sqrt(kB T / m) / omega within 5 %.
        for mode in trap.modes.as_ref().unwrap() {
            let omega = 2.0 * std::f64::consts::PI * mode.frequency_hz;
            let expect = kt_m.sqrt() / omega;
            let mean: f64 = ens
                .atoms
                .iter()
                .map(|a| (a.position - trap.position).dot(mode.axis))
                .sum::<f64>()
                / n as f64;
            let var: f64 = ens
                .atoms
                .iter()
                .map(|a| ((a.position - trap.position).dot(mode.axis) - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            assert!(
                (var.sqrt() / expect - 1.0).abs() < 0.05,
                "mode at {} Hz: sigma {} vs {}",
                mode.frequency_hz,
                var.sqrt(),
                expect
            );
        }
    }

    #[test]
    fn sampling_zero_temperature_collapses() {
        let (model, species) = li7();
        let (_, _, p, trap) = compact_z_trap(&model);
        let ens = sample_thermal(&trap, &species, 0.0, 100, 1).unwrap();
        for a in &ens.atoms {
            assert!((a.position - p).norm() < 1e-15);
            assert_eq!(a.velocity, Vec3::ZERO);
        }
    }

    #[test]
    fn sampling_velocity_normality_chi_squared() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let (model, species) = li7();
        let (_, _, _, trap) = compact_z_trap(&model);
        let temp = 50e-6;
        let n = 100_000;
        let ens = sample_thermal(&trap, &species, temp, n, 7).unwrap();
        let sigma = (constants::K_B * temp / species.mass).sqrt();

        // Equal-probability bins; chi^2 against N(0, sigma) at the 1% level.
        let bins = 24usize;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let edges: Vec<f64> =
            (1..bins).map(|i| normal.inverse_cdf(i as f64 / bins as f64) * sigma).collect();
        let mut counts = vec![0usize; bins];
        for a in &ens.atoms {
            let v = a.velocity.x;
            let k = edges.partition_point(|e| *e < v);
            counts[k] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 =
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // chi^2 critical value, 23 dof, alpha = 0.01.
        assert!(chi2 < 41.64, "chi2 = {chi2}");
    }

    #[test]
    fn rejection_sampling_matches_harmonic_prediction() {
        // Cold enough that kT is well below mu' B0 and the harmonic
        // approximation is good to a few percent.
        let (model, species) = li7();
        let (_, engine, p, trap) = compact_z_trap(&model);
        let temp = 5e-6;
        let region = Region::new(
            p + Vec3::new(-1e-6, -6e-5, -1e-6),
            p + Vec3::new(1e-6, 6e-5, 1e-6),
        );
        let n = 4000;
        let ens = sample_thermal_rejection(&model, &engine, region, temp, n, 5).unwrap();
        // Compare transverse spread with the harmonic answer.
        let mode = trap
            .modes
            .as_ref()
            .unwrap()
            .iter()
            .max_by(|a, b| a.frequency_hz.total_cmp(&b.frequency_hz))
            .unwrap();
        let omega = 2.0 * std::f64::consts::PI * mode.frequency_hz;
        let expect = (constants::K_B * temp / species.mass).sqrt() / omega;
        let vals: Vec<f64> =
            ens.atoms.iter().map(|a| (a.position - p).dot(mode.axis)).collect();
        let mean = vals.iter().sum::<f64>() / n as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(
            (var.sqrt() / expect - 1.0).abs() < 0.10,
            "sigma {} vs harmonic {}",
            var.sqrt(),
            expect
        );
    }

    fn static_sequence(layout: crate::layout::ChipLayout, duration: f64) -> Sequence {
        Sequence::new(layout, vec![], duration).unwrap()
    }

    #[test]
    fn atom_at_rest_at_minimum_stays() {
        let (model, species) = li7();
        let layout = smooth_guide();
        let engine = FieldEngine::new(&layout, WidthMode::Thin);
        let (p, _, _) = guide_trap(&model, &engine);
        let ens = Ensemble {
            atoms: vec![AtomState {
                position: p,
                velocity: Vec3::ZERO,
                alive: true,
                loss_cause: None,
            }],
            species,
            seed: 0,
        };
        let seq = static_sequence(layout, 1e-4);
        let cfg = IntegratorConfig {
            output_stride: 50,
            ..IntegratorConfig::new(
                5e-8,
                Region::new(Vec3::new(-1e-3, -1e-2, 1e-7), Vec3::new(1e-3, 1e-2, 1e-3)),
            )
        };
        let res = integrate(&ens, &seq, &model, &cfg).unwrap();
        let last = res.positions.last().unwrap()[0];
        assert!((last - p).norm() < 5e-9, "drifted {:.3e} m", (last - p).norm());
        assert!(res.final_states[0].alive);
    }

    #[test]
    fn energy_conserved_over_oscillation() {
        // One atom displaced 1 um transverse to a smooth guide: window-mean
        // energy drift below 1e-6 over 10 ms.
        let (model, species) = li7();
        let layout = smooth_guide();
        let engine = FieldEngine::new(&layout, WidthMode::Thin);
        let (p, trap, _) = guide_trap(&model, &engine);
        let f_max = trap.max_frequency_hz().unwrap();
        let dt = 1.0 / (200.0 * f_max);
        let ens = Ensemble {
            atoms: vec![AtomState {
                position: p + Vec3::new(1e-6, 0.0, 0.0),
                velocity: Vec3::ZERO,
                alive: true,
                loss_cause: None,
            }],
            species,
            seed: 0,
        };
        let seq = static_sequence(layout, 0.01);
        let cfg = IntegratorConfig {
            output_stride: 64,
            ..IntegratorConfig::new(
                dt,
                Region::new(Vec3::new(-1e-3, -1e-2, 1e-7), Vec3::new(1e-3, 1e-2, 1e-3)),
            )
        };
        let res = integrate(&ens, &seq, &model, &cfg).unwrap();
        let energies: Vec<f64> = (0..res.times.len())
            .map(|f| res.energy_of(f, 0, &model, &engine).unwrap())
            .collect();
        // Window averages kill the bounded Verlet oscillation and expose
        // any secular trend.
        let w = energies.len() / 10;
        let head: f64 = energies[..w].iter().sum::<f64>() / w as f64;
        let tail: f64 = energies[energies.len() - w..].iter().sum::<f64>() / w as f64;
        let drift = ((tail - head) / head).abs();
        assert!(drift < 1e-6, "energy drift {drift}");
    }

    #[test]
    fn timestep_gate_enforced() {
        let (model, species) = li7();
        let layout = smooth_guide();
        let engine = FieldEngine::new(&layout, WidthMode::Thin);
        let (p, _, _) = guide_trap(&model, &engine);
        let ens = Ensemble {
            atoms: vec![AtomState {
                position: p,
                velocity: Vec3::ZERO,
                alive: true,
                loss_cause: None,
            }],
            species,
            seed: 0,
        };
        let seq = static_sequence(layout, 1e-3);
        // The guide's transverse frequency is ~180 kHz; 1 us is far too
        // coarse.
        let cfg = IntegratorConfig::new(
            1e-6,
            Region::new(Vec3::new(-1e-3, -1e-2, 1e-7), Vec3::new(1e-3, 1e-2, 1e-3)),
        );
        assert!(matches!(
            integrate(&ens, &seq, &model, &cfg),
            Err(DynamicsError::TimestepTooLarge { .. })
        ));
    }

    #[test]
    fn time_reversal_retraces() {
        let (model, species) = li7();
        let layout = smooth_guide();
        let engine = FieldEngine::new(&layout, WidthMode::Thin);
        let (p, trap, _) = guide_trap(&model, &engine);
        let f_max = trap.max_frequency_hz().unwrap();
        let dt = 1.0 / (100.0 * f_max);
        let start = p + Vec3::new(8e-7, 2e-6, -4e-7);
        let domain = Region::new(Vec3::new(-1e-3, -1e-2, 1e-7), Vec3::new(1e-3, 1e-2, 1e-3));
        let steps = 20_000usize;
        let duration = dt * steps as f64;
        let seq = static_sequence(layout, duration);
        let mk = |pos: Vec3, vel: Vec3| Ensemble {
            atoms: vec![AtomState { position: pos, velocity: vel, alive: true, loss_cause: None }],
            species: species.clone(),
            seed: 0,
        };
        let cfg = IntegratorConfig { output_stride: steps, ..IntegratorConfig::new(dt, domain) };
        let fwd = integrate(&mk(start, Vec3::ZERO), &seq, &model, &cfg).unwrap();
        let end = fwd.final_states[0];
        let back = integrate(&mk(end.position, -end.velocity), &seq, &model, &cfg).unwrap();
        let returned = back.final_states[0].position;
        assert!(
            (returned - start).norm() < 1e-6,
            "retrace error {:.3e} m",
            (returned - start).norm()
        );
    }

    #[test]
    fn released_guide_spreads_longitudinally() {
        // Sample a compact 3D trap, then let the cloud evolve in the guide
        // (no longitudinal confinement): the axial rms grows monotonically.
        let (model, species) = li7();
        let (_, _, _, trap) = compact_z_trap(&model);
        let ens = sample_thermal(&trap, &species, 5e-6, 300, 9).unwrap();

        let guide = smooth_guide();
        let seq = static_sequence(guide, 1e-3);
        let cfg = IntegratorConfig {
            output_stride: 500,
            ..IntegratorConfig::new(
                1e-7,
                Region::new(Vec3::new(-1e-3, -5e-2, 1e-7), Vec3::new(1e-3, 5e-2, 1e-3)),
            )
        };
        let res = integrate(&ens, &seq, &model, &cfg).unwrap();
        let obs = observables(&res);
        for w in obs.rms.windows(2) {
            assert!(w[1][1] >= w[0][1] * 0.999, "axial rms shrank: {:?}", w);
        }
        assert!(obs.rms.last().unwrap()[1] > 1.5 * obs.rms[0][1]);
    }

    #[test]
    fn deterministic_and_loss_monotone() {
        let (model, species) = li7();
        let (layout, _, _, trap) = compact_z_trap(&model);
        let ens = sample_thermal(&trap, &species, 100e-6, 200, 3).unwrap();
        let seq = static_sequence(layout, 5e-5);
        let domain = Region::new(Vec3::new(-1e-3, -1e-2, 1e-7), Vec3::new(1e-3, 1e-2, 1e-3));
        let base = IntegratorConfig { output_stride: 20, ..IntegratorConfig::new(5e-8, domain) };

        let a = integrate(&ens, &seq, &model, &base).unwrap();
        let b = integrate(&ens, &seq, &model, &base).unwrap();
        assert_eq!(a.observables_csv(), b.observables_csv());
        assert_eq!(a.trajectory_csv(), b.trajectory_csv());

        // Lowering the filter depth can only lose more atoms.
        let deep = integrate(
            &ens,
            &seq,
            &model,
            &IntegratorConfig { depth_override: Some(f64::INFINITY), ..base.clone() },
        )
        .unwrap();
        let shallow = integrate(
            &ens,
            &seq,
            &model,
            // A tenth of the bias depth: the 100 uK tail spills over.
            &IntegratorConfig {
                depth_override: Some(0.1 * model.depth_from_bias(4e-3).joules()),
                ..base.clone()
            },
        )
        .unwrap();
        let alive = |r: &SimResult| r.final_states.iter().filter(|s| s.alive).count();
        assert!(alive(&shallow) <= alive(&deep));
        assert!(alive(&shallow) < ens.atoms.len(), "shallow filter lost nobody");
        assert!(deep
            .final_states
            .iter()
            .all(|s| s.alive || s.loss_cause != Some(LossCause::DepthEscape)));
    }

    #[test]
    fn observables_on_pristine_trap() {
        let (model, species) = li7();
        let (layout, _, _, trap) = compact_z_trap(&model);
        let ens = sample_thermal(&trap, &species, 1e-6, 400, 11).unwrap();
        let seq = static_sequence(layout, 2e-5);
        let cfg = IntegratorConfig {
            output_stride: 40,
            ..IntegratorConfig::new(
                5e-8,
                Region::new(Vec3::new(-1e-3, -1e-2, 1e-7), Vec3::new(1e-3, 1e-2, 1e-3)),
            )
        };
        let res = integrate(&ens, &seq, &model, &cfg).unwrap();
        let obs = observables(&res);
        for f in &obs.retained_fraction {
            assert_relative_eq!(*f, 1.0);
        }
        // Temperature stays near the sampled value in a static trap.
        let t0 = obs.t_geometric[0];
        let t1 = *obs.t_geometric.last().unwrap();
        assert!((t1 / t0 - 1.0).abs() < 0.25, "t0 {t0} t1 {t1}");
        let csv = res.observables_csv();
        assert!(csv.starts_with("t,N_alive,T_x,T_y,T_z,rms_x,rms_y,rms_z,density_proxy\n"));
    }
}
