//! Synthetic networked-microgrid transient simulator.
//!
//! Grid-forming DERs set their bus voltage magnitude and carry second-order
//! angle dynamics with damping and an angle-droop restoring term:
//!
//! ```text
//! M·δ̈ = P_set − P_e − k_droop·(δ − δ_set) − d·δ̇
//! ```
//!
//! Loads are constant-power sinks and empty buses enforce zero current
//! injection; both are solved algebraically (Newton) against the admittance
//! network at every step, so every emitted state is power-flow consistent by
//! construction. Disturbances are instantaneous load steps. Explicit Euler
//! advances the DER states at `dt`.
//!
//! The angle-droop term pins absolute angles, so a disturbed system settles
//! into a true equilibrium instead of drifting at a common frequency offset;
//! that is what makes the settledness invariant of complete responses
//! checkable.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, TrajectoryKind, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::graph::{BusType, GraphJson, PowerGraph};
use crate::linalg::{solve_real, Matrix};
use crate::model::STATE_DIM;

/// Per-DER dynamic parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DerParams {
    /// Inertia-like constant (s²).
    pub inertia: f64,
    /// Damping (s).
    pub damping: f64,
    /// Angle-droop gain (pu power per radian).
    pub droop: f64,
    /// Voltage magnitude setpoint (pu).
    pub v_set: f64,
}

/// Nominal load at one load-carrying bus (pu).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LoadParams {
    pub p0: f64,
    pub q0: f64,
}

/// Full synthetic-grid specification.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub graph: PowerGraph,
    pub der_buses: Vec<usize>,
    pub load_buses: Vec<usize>,
    pub der_params: Vec<DerParams>,
    pub load_params: Vec<LoadParams>,
    /// Integration step (s).
    pub dt: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.graph.n_buses();
        if self.der_buses.is_empty() {
            return Err(Error::structural("grid needs at least one DER"));
        }
        if self.der_buses.len() != self.der_params.len()
            || self.load_buses.len() != self.load_params.len()
        {
            return Err(Error::argument("bus/parameter list length mismatch"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::argument("dt must be positive"));
        }
        for &b in self.der_buses.iter().chain(&self.load_buses) {
            if b >= n {
                return Err(Error::argument(format!("bus index {b} out of range")));
            }
        }
        for p in &self.der_params {
            if !(p.inertia > 0.0 && p.damping > 0.0) {
                return Err(Error::structural("DER needs positive inertia and damping"));
            }
        }
        // β codes must agree with the bus classification.
        let types = self.graph.bus_types();
        for i in 0..n {
            let is_der = self.der_buses.contains(&i);
            let is_load = self.load_buses.contains(&i);
            let expect = if is_der {
                BusType::Der
            } else if is_load {
                BusType::Load
            } else {
                BusType::Empty
            };
            if types[i] != expect {
                return Err(Error::structural(format!(
                    "bus {i} typed {:?} but classified {:?}",
                    types[i], expect
                )));
            }
        }
        Ok(())
    }

    /// Canonical JSON for hashing and the CLI surface.
    pub fn to_json(&self) -> GridSpecJson {
        GridSpecJson {
            graph: self.graph.to_json(),
            der_buses: self.der_buses.clone(),
            load_buses: self.load_buses.clone(),
            der_params: self.der_params.clone(),
            load_params: self.load_params.clone(),
            dt: self.dt,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GridSpecJson = serde_json::from_str(text)?;
        let spec = GridSpec {
            graph: doc.graph.into_graph()?,
            der_buses: doc.der_buses,
            load_buses: doc.load_buses,
            der_params: doc.der_params,
            load_params: doc.load_params,
            dt: doc.dt,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of the canonical JSON, hex-encoded.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let text = serde_json::to_string(&self.to_json()).expect("grid spec serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serde mirror of the grid-spec document. The `graph` fields are flattened
/// so the document doubles as the plain topology JSON.
#[derive(Debug, Serialize, Deserialize)]
pub struct GridSpecJson {
    #[serde(flatten)]
    pub graph: GraphJson,
    pub der_buses: Vec<usize>,
    pub load_buses: Vec<usize>,
    pub der_params: Vec<DerParams>,
    pub load_params: Vec<LoadParams>,
    pub dt: f64,
}

/// Consumption per bus (positive = consuming), dense over all buses.
#[derive(Debug, Clone)]
pub struct Loads {
    pub s: Vec<Complex64>,
}

impl Loads {
    pub fn nominal(spec: &GridSpec) -> Self {
        let mut s = vec![Complex64::new(0.0, 0.0); spec.graph.n_buses()];
        for (&bus, lp) in spec.load_buses.iter().zip(&spec.load_params) {
            s[bus] += Complex64::new(lp.p0, lp.q0);
        }
        Loads { s }
    }
}

/// One instantaneous load step: at step `step`, the *injection* at `bus`
/// changes by `delta_p + j·delta_q` (a load increase is a negative injection
/// delta). The magnitudes are bounded by ±10% of the target load's nominal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceEvent {
    pub step: usize,
    pub bus: usize,
    pub delta_p: f64,
    pub delta_q: f64,
}

/// Time-ordered disturbance schedule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSchedule {
    pub events: Vec<DisturbanceEvent>,
}

impl DisturbanceSchedule {
    pub fn validate(&self, spec: &GridSpec) -> Result<()> {
        for ev in &self.events {
            let pos = spec
                .load_buses
                .iter()
                .position(|&b| b == ev.bus)
                .ok_or_else(|| {
                    Error::structural(format!("event targets non-load bus {}", ev.bus))
                })?;
            let lp = spec.load_params[pos];
            if ev.delta_p.abs() > 0.10 * lp.p0.abs() + 1e-12
                || ev.delta_q.abs() > 0.10 * lp.q0.abs() + 1e-12
            {
                return Err(Error::structural(format!(
                    "event at step {} exceeds the ±10% bound",
                    ev.step
                )));
            }
        }
        Ok(())
    }

    /// The exogenous disturbance features at one step: per-bus dP and dQ
    /// (injection deltas) plus the γ flag raised on every bus when any
    /// event fires.
    pub fn features_at(&self, step: usize, n: usize) -> (Vec<f64>, Vec<f64>, f64) {
        let mut dp = vec![0.0; n];
        let mut dq = vec![0.0; n];
        let mut gamma = 0.0;
        for ev in self.events.iter().filter(|e| e.step == step) {
            dp[ev.bus] += ev.delta_p;
            dq[ev.bus] += ev.delta_q;
            gamma = 1.0;
        }
        (dp, dq, gamma)
    }

    fn apply_at(&self, step: usize, loads: &mut Loads) {
        for ev in self.events.iter().filter(|e| e.step == step) {
            // delta is an injection change; consumption moves the other way.
            loads.s[ev.bus] -= Complex64::new(ev.delta_p, ev.delta_q);
        }
    }
}

/// Full dynamic state of the grid at one instant.
#[derive(Debug, Clone)]
pub struct GridState {
    pub voltages: Vec<Complex64>,
    pub currents: Vec<Complex64>,
    /// DER angles (per entry of `der_buses`).
    pub delta: Vec<f64>,
    /// DER angle rates.
    pub omega: Vec<f64>,
}

impl GridState {
    /// The N×6 measurable state `[P,Q,ReV,ImV,ReI,ImI]` per bus, row-major.
    pub fn measurable(&self) -> Vec<f64> {
        let n = self.voltages.len();
        let mut out = Vec::with_capacity(n * 6);
        for i in 0..n {
            let v = self.voltages[i];
            let c = self.currents[i];
            let s = v * c.conj();
            out.extend_from_slice(&[s.re, s.im, v.re, v.im, c.re, c.im]);
        }
        out
    }
}

/// One simulated response: `states[k]` is the N×6 measurable state at step
/// k. Training-target rates are forward differences, so explicit Euler on
/// the true rates reconstructs the trajectory exactly.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub schedule: DisturbanceSchedule,
    pub dt: f64,
    pub kind: TrajectoryKind,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len()
    }

    pub fn n_buses(&self) -> usize {
        self.states[0].len() / 6
    }

    /// Forward-difference rate at step k: `(X^(k+1) − X^(k)) / dt`.
    pub fn rate(&self, k: usize) -> Vec<f64> {
        let a = &self.states[k];
        let b = &self.states[k + 1];
        a.iter().zip(b).map(|(x, y)| (y - x) / self.dt).collect()
    }

    pub fn max_rate_magnitude(&self, from_step: usize) -> f64 {
        let mut worst = 0.0f64;
        for k in from_step..self.n_steps() - 1 {
            for r in self.rate(k) {
                worst = worst.max(r.abs());
            }
        }
        worst
    }
}

/// Generation setpoints: one P_set per DER (angle setpoints are zero).
#[derive(Debug, Clone)]
pub struct Dispatch {
    pub p_set: Vec<f64>,
}

/// Equal-share dispatch of the total consumption.
pub fn dispatch_for_loads(spec: &GridSpec, loads: &Loads) -> Dispatch {
    let total: f64 = loads.s.iter().map(|s| s.re).sum();
    let share = total / spec.der_buses.len() as f64;
    Dispatch {
        p_set: vec![share; spec.der_buses.len()],
    }
}

const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 60;
const JACOBIAN_FD_STEP: f64 = 1e-7;

/// Newton solve of the algebraic network equations for the non-DER bus
/// voltages, DER voltages fixed at `E∠δ`. Loads are constant-power; empty
/// buses enforce zero current injection. `warm` seeds the iteration.
fn solve_network(
    spec: &GridSpec,
    delta: &[f64],
    loads: &Loads,
    warm: Option<&[Complex64]>,
) -> Result<Vec<Complex64>> {
    let n = spec.graph.n_buses();
    let y = spec.graph.admittance_matrix();
    let free: Vec<usize> = (0..n).filter(|i| !spec.der_buses.contains(i)).collect();
    let n_free = free.len();

    let mut v: Vec<Complex64> = match warm {
        Some(w) => w.to_vec(),
        None => vec![Complex64::new(1.0, 0.0); n],
    };
    for (slot, &bus) in spec.der_buses.iter().enumerate() {
        let e = spec.der_params[slot].v_set;
        v[bus] = Complex64::from_polar(e, delta[slot]);
    }
    if n_free == 0 {
        return Ok(v);
    }

    let residual = |v: &[Complex64], out: &mut [f64]| {
        for (slot, &bus) in free.iter().enumerate() {
            // current injection at this bus
            let mut inj = Complex64::new(0.0, 0.0);
            for j in 0..n {
                inj += y[bus * n + j] * v[j];
            }
            let r = if loads.s[bus].norm_sqr() > 0.0 || spec.load_buses.contains(&bus) {
                // constant-power load: V·conj(I) + S_load = 0
                v[bus] * inj.conj() + loads.s[bus]
            } else {
                // empty bus: zero current injection
                inj
            };
            out[2 * slot] = r.re;
            out[2 * slot + 1] = r.im;
        }
    };

    let m = 2 * n_free;
    let mut r = vec![0.0; m];
    let mut r_pert = vec![0.0; m];
    for _ in 0..NEWTON_MAX_ITER {
        residual(&v, &mut r);
        let worst = r.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if worst < NEWTON_TOL {
            return Ok(v);
        }
        // Numeric Jacobian over the free voltages' real/imag parts.
        let mut jac = Matrix::zeros(m, m);
        for (slot, &bus) in free.iter().enumerate() {
            for part in 0..2 {
                let mut vp = v.clone();
                if part == 0 {
                    vp[bus] += Complex64::new(JACOBIAN_FD_STEP, 0.0);
                } else {
                    vp[bus] += Complex64::new(0.0, JACOBIAN_FD_STEP);
                }
                residual(&vp, &mut r_pert);
                for row in 0..m {
                    jac[(row, 2 * slot + part)] = (r_pert[row] - r[row]) / JACOBIAN_FD_STEP;
                }
            }
        }
        let mut rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        solve_real(&mut jac, &mut rhs)?;
        for (slot, &bus) in free.iter().enumerate() {
            v[bus] += Complex64::new(rhs[2 * slot], rhs[2 * slot + 1]);
        }
    }
    Err(Error::numerical("network Newton did not converge"))
}

fn currents(spec: &GridSpec, v: &[Complex64]) -> Vec<Complex64> {
    let n = spec.graph.n_buses();
    let y = spec.graph.admittance_matrix();
    (0..n)
        .map(|i| {
            let mut inj = Complex64::new(0.0, 0.0);
            for j in 0..n {
                inj += y[i * n + j] * v[j];
            }
            inj
        })
        .collect()
}

/// DER accelerations at the given solved network state.
fn accelerations(
    spec: &GridSpec,
    dispatch: &Dispatch,
    delta: &[f64],
    omega: &[f64],
    v: &[Complex64],
    i_inj: &[Complex64],
    loads: &Loads,
) -> Vec<f64> {
    spec.der_buses
        .iter()
        .enumerate()
        .map(|(slot, &bus)| {
            let p = spec.der_params[slot];
            // Electrical output of the DER itself: net bus injection plus
            // any co-located load it is also serving.
            let p_net = (v[bus] * i_inj[bus].conj()).re;
            let p_e = p_net + loads.s[bus].re;
            (dispatch.p_set[slot] - p_e - p.droop * delta[slot] - p.damping * omega[slot])
                / p.inertia
        })
        .collect()
}

/// Time derivative of the DER state vector `[δ…, ω…]` under the given loads,
/// with the network solved algebraically at the given angles. Used by the
/// eigenvalue-based stability oracle in the test suite.
pub fn der_state_derivative(
    spec: &GridSpec,
    dispatch: &Dispatch,
    loads: &Loads,
    state: &[f64],
    warm_voltages: &[Complex64],
) -> Result<Vec<f64>> {
    let g = spec.der_buses.len();
    if state.len() != 2 * g {
        return Err(Error::argument("state must hold G angles and G rates"));
    }
    let (delta, omega) = state.split_at(g);
    let v = solve_network(spec, delta, loads, Some(warm_voltages))?;
    let i_inj = currents(spec, &v);
    let acc = accelerations(spec, dispatch, delta, omega, &v, &i_inj, loads);
    let mut out = Vec::with_capacity(2 * g);
    out.extend_from_slice(omega);
    out.extend_from_slice(&acc);
    Ok(out)
}

/// Solves for the steady state under the given loads with the dispatch
/// derived from those same loads (equal sharing).
pub fn solve_equilibrium(spec: &GridSpec, loads: &Loads) -> Result<GridState> {
    let dispatch = dispatch_for_loads(spec, loads);
    solve_equilibrium_with_dispatch(spec, loads, &dispatch, None)
}

/// Steady-state solve with an explicit dispatch: DER angles and all free
/// voltages are unknowns; rates are zero.
pub fn solve_equilibrium_with_dispatch(
    spec: &GridSpec,
    loads: &Loads,
    dispatch: &Dispatch,
    warm: Option<&GridState>,
) -> Result<GridState> {
    spec.validate()?;
    let g = spec.der_buses.len();

    let mut delta: Vec<f64> = match warm {
        Some(w) => w.delta.clone(),
        None => vec![0.0; g],
    };
    let mut v: Vec<Complex64> = match warm {
        Some(w) => w.voltages.clone(),
        None => vec![Complex64::new(1.0, 0.0); spec.graph.n_buses()],
    };

    // Outer Newton on DER angles; inner network solve per evaluation.
    let zero_omega = vec![0.0; g];
    let mut r = vec![0.0; g];
    let mut r_pert = vec![0.0; g];
    let eval = |delta: &[f64], warm_v: &[Complex64], out: &mut [f64]| -> Result<Vec<Complex64>> {
        let v = solve_network(spec, delta, loads, Some(warm_v))?;
        let i_inj = currents(spec, &v);
        let acc = accelerations(spec, dispatch, delta, &zero_omega, &v, &i_inj, loads);
        out.copy_from_slice(&acc);
        Ok(v)
    };

    for _ in 0..NEWTON_MAX_ITER {
        v = eval(&delta, &v, &mut r)?;
        let worst = r.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if worst < 1e-11 {
            let i_inj = currents(spec, &v);
            return Ok(GridState {
                voltages: v,
                currents: i_inj,
                delta,
                omega: vec![0.0; g],
            });
        }
        let mut jac = Matrix::zeros(g, g);
        for col in 0..g {
            let mut dp = delta.clone();
            dp[col] += JACOBIAN_FD_STEP;
            eval(&dp, &v, &mut r_pert)?;
            for row in 0..g {
                jac[(row, col)] = (r_pert[row] - r[row]) / JACOBIAN_FD_STEP;
            }
        }
        let mut rhs: Vec<f64> = r.iter().map(|x| -x).collect();
        solve_real(&mut jac, &mut rhs)?;
        for (d, step) in delta.iter_mut().zip(&rhs) {
            *d += step;
        }
    }
    Err(Error::numerical("equilibrium Newton did not converge"))
}

/// Steps the surrogate from `initial` for `n_steps` transitions, applying
/// scheduled load steps. `initial` must be the equilibrium of the
/// pre-disturbance loads for complete responses.
pub fn simulate(
    spec: &GridSpec,
    initial: &GridState,
    loads0: &Loads,
    dispatch: &Dispatch,
    schedule: &DisturbanceSchedule,
    n_steps: usize,
    kind: TrajectoryKind,
) -> Result<Trajectory> {
    spec.validate()?;
    schedule.validate(spec)?;
    if kind == TrajectoryKind::Complete {
        // Equilibrium start: zero rates at the initial state.
        let i_inj = currents(spec, &initial.voltages);
        let acc = accelerations(
            spec,
            dispatch,
            &initial.delta,
            &initial.omega,
            &initial.voltages,
            &i_inj,
            loads0,
        );
        let worst = acc
            .iter()
            .chain(&initial.omega)
            .fold(0.0f64, |a, b| a.max(b.abs()));
        if worst > 1e-9 {
            return Err(Error::argument(format!(
                "complete response must start at equilibrium (residual {worst:.2e})"
            )));
        }
    }

    let dt = spec.dt;
    let mut loads = loads0.clone();
    let mut delta = initial.delta.clone();
    let mut omega = initial.omega.clone();
    let mut v = initial.voltages.clone();

    let mut states = Vec::with_capacity(n_steps + 1);
    let mut i_inj = currents(spec, &v);
    states.push(GridState {
        voltages: v.clone(),
        currents: i_inj.clone(),
        delta: delta.clone(),
        omega: omega.clone(),
    });

    for k in 0..n_steps {
        let acc = accelerations(spec, dispatch, &delta, &omega, &v, &i_inj, &loads);
        for slot in 0..delta.len() {
            delta[slot] += dt * omega[slot];
            omega[slot] += dt * acc[slot];
        }
        // Events at step k take effect in the state at k+1.
        schedule.apply_at(k, &mut loads);
        v = solve_network(spec, &delta, &loads, Some(&v))?;
        i_inj = currents(spec, &v);
        states.push(GridState {
            voltages: v.clone(),
            currents: i_inj.clone(),
            delta: delta.clone(),
            omega: omega.clone(),
        });
    }

    Ok(Trajectory {
        states: states.iter().map(|s| s.measurable()).collect(),
        schedule: schedule.clone(),
        dt,
        kind,
    })
}

/// Extended states `[P,Q,ReV,ImV,ReI,ImI,dP,dQ,γ,β]` per bus per step. The
/// disturbance features come from the schedule (they are exogenous inputs,
/// not finite differences of the trajectory), and γ flags event steps on
/// every bus.
pub fn build_extended_states(trajectory: &Trajectory, bus_types: &[BusType]) -> Vec<Vec<f64>> {
    let n = trajectory.n_buses();
    let mut out = Vec::with_capacity(trajectory.n_steps());
    for k in 0..trajectory.n_steps() {
        let (dp, dq, gamma) = trajectory.schedule.features_at(k, n);
        let mut step = Vec::with_capacity(n * STATE_DIM);
        for bus in 0..n {
            let meas = &trajectory.states[k][bus * 6..(bus + 1) * 6];
            step.extend_from_slice(meas);
            step.push(dp[bus]);
            step.push(dq[bus]);
            step.push(gamma);
            step.push(bus_types[bus].beta());
        }
        out.push(step);
    }
    out
}

/// Number of steps in a complete transient response (the horizon over which
/// the desk grids verifiably settle).
pub const COMPLETE_RESPONSE_STEPS: usize = 1000;
/// Steps between events in an initial (never-settling) response.
pub const INITIAL_EVENT_SPACING: usize = 10;

fn trajectory_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn sample_complete_schedule(spec: &GridSpec, rng: &mut ChaCha8Rng) -> DisturbanceSchedule {
    let pick = rng.gen_range(0..spec.load_buses.len());
    let bus = spec.load_buses[pick];
    let lp = spec.load_params[pick];
    // Meaningful magnitude: |u| ∈ [0.5, 1] of the ±10% band, random sign.
    let up: f64 = rng.gen_range(0.5..=1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let uq: f64 = rng.gen_range(0.5..=1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    DisturbanceSchedule {
        events: vec![DisturbanceEvent {
            step: 0,
            bus,
            delta_p: -up * 0.10 * lp.p0,
            delta_q: -uq * 0.10 * lp.q0,
        }],
    }
}

fn sample_initial_schedule(
    spec: &GridSpec,
    n_events: usize,
    rng: &mut ChaCha8Rng,
) -> DisturbanceSchedule {
    // Track cumulative injection deltas so the load never leaves the ±10%
    // band around nominal while each event also stays within the band.
    let mut cumulative = vec![0.0f64; spec.load_buses.len()];
    let mut cumulative_q = vec![0.0f64; spec.load_buses.len()];
    let mut events = Vec::with_capacity(n_events);
    for e in 0..n_events {
        let pick = rng.gen_range(0..spec.load_buses.len());
        let bus = spec.load_buses[pick];
        let lp = spec.load_params[pick];
        let band_p = 0.10 * lp.p0;
        let band_q = 0.10 * lp.q0;
        let lo_p = (-band_p - cumulative[pick]).max(-band_p);
        let hi_p = (band_p - cumulative[pick]).min(band_p);
        let lo_q = (-band_q - cumulative_q[pick]).max(-band_q);
        let hi_q = (band_q - cumulative_q[pick]).min(band_q);
        let delta_p = rng.gen_range(lo_p..=hi_p);
        let delta_q = rng.gen_range(lo_q..=hi_q);
        cumulative[pick] += delta_p;
        cumulative_q[pick] += delta_q;
        events.push(DisturbanceEvent {
            step: e * INITIAL_EVENT_SPACING,
            bus,
            delta_p,
            delta_q,
        });
    }
    DisturbanceSchedule { events }
}

/// Generates a dataset of complete responses (one random load step at step
/// 0, simulated until well settled) and one initial response with recurring
/// events every 10 steps. Deterministic under `seed`; trajectories own RNG
/// streams derived from `(seed, index)` so parallel generation is
/// bit-identical to serial.
pub fn make_dataset(
    spec: &GridSpec,
    n_complete: usize,
    n_initial_events: usize,
    seed: u64,
    parallel: bool,
) -> Result<Dataset> {
    spec.validate()?;
    let loads0 = Loads::nominal(spec);
    let dispatch = dispatch_for_loads(spec, &loads0);
    let equilibrium = solve_equilibrium(spec, &loads0)?;

    let mut jobs: Vec<(usize, TrajectoryKind, usize)> = (0..n_complete)
        .map(|i| (i, TrajectoryKind::Complete, COMPLETE_RESPONSE_STEPS))
        .collect();
    if n_initial_events > 0 {
        jobs.push((
            n_complete,
            TrajectoryKind::Initial,
            n_initial_events * INITIAL_EVENT_SPACING + 1,
        ));
    }

    let run_job = |&(index, kind, n_steps): &(usize, TrajectoryKind, usize)| -> Result<Trajectory> {
        let mut rng = ChaCha8Rng::seed_from_u64(trajectory_seed(seed, index as u64));
        let schedule = match kind {
            TrajectoryKind::Complete => sample_complete_schedule(spec, &mut rng),
            TrajectoryKind::Initial => sample_initial_schedule(spec, n_initial_events, &mut rng),
        };
        simulate(spec, &equilibrium, &loads0, &dispatch, &schedule, n_steps, kind)
    };

    let trajectories: Result<Vec<Trajectory>> = if parallel {
        jobs.par_iter().map(run_job).collect()
    } else {
        jobs.iter().map(run_job).collect()
    };
    let trajectories = trajectories?;

    let records: Vec<TrajectoryRecord> = trajectories
        .iter()
        .map(|t| TrajectoryRecord {
            kind: t.kind,
            n_buses: t.n_buses(),
            extended: build_extended_states(t, spec.graph.bus_types()),
            schedule: t.schedule.clone(),
        })
        .collect();

    Ok(Dataset::new(
        serde_json::to_string(&spec.to_json()).expect("grid spec serializes"),
        spec.content_hash(),
        spec.dt,
        spec.graph.n_buses(),
        records,
    ))
}

/// The 9-bus desk grid: a ring with two chords, DERs at buses 0/3/6 and
/// loads everywhere else. Sized so transients settle well inside a
/// 1000-step complete response.
pub fn desk_grid_9bus() -> GridSpec {
    let n = 9;
    // (i, j, length factor); impedance z = (0.04 + 0.12j)·len.
    let lines: &[(usize, usize, f64)] = &[
        (0, 1, 1.0),
        (1, 2, 0.9),
        (2, 3, 1.2),
        (3, 4, 0.8),
        (4, 5, 1.1),
        (5, 6, 1.0),
        (6, 7, 1.3),
        (7, 8, 0.95),
        (8, 0, 1.05),
        (1, 5, 1.5),
        (2, 7, 1.6),
    ];
    let graph = graph_from_lines(n, lines, &[0, 3, 6], &[1, 2, 4, 5, 7, 8]);
    GridSpec {
        graph,
        der_buses: vec![0, 3, 6],
        load_buses: vec![1, 2, 4, 5, 7, 8],
        der_params: vec![
            DerParams {
                inertia: 0.02,
                damping: 0.70,
                droop: 8.0,
                v_set: 1.0,
            };
            3
        ],
        load_params: vec![
            LoadParams { p0: 0.55, q0: 0.22 },
            LoadParams { p0: 0.65, q0: 0.26 },
            LoadParams { p0: 0.70, q0: 0.28 },
            LoadParams { p0: 0.60, q0: 0.24 },
            LoadParams { p0: 0.75, q0: 0.30 },
            LoadParams { p0: 0.50, q0: 0.20 },
        ],
        dt: 0.001,
    }
}

/// A 33-bus stand-in at the scale of a four-microgrid networked system:
/// four 8-bus rings joined through a hub bus, six DERs, eighteen loads, and
/// idle interconnection buses. The layout is a synthetic stand-in, not a
/// reproduction of any published feeder.
pub fn stand_in_grid_33bus() -> GridSpec {
    let n = 33;
    let hub = 32;
    let mut lines: Vec<(usize, usize, f64)> = Vec::new();
    for ring in 0..4 {
        let base = ring * 8;
        for i in 0..8 {
            let a = base + i;
            let b = base + (i + 1) % 8;
            let len = 0.8 + 0.05 * ((a * 7 + b * 3) % 9) as f64;
            lines.push((a, b, len));
        }
        lines.push((hub, base, 1.4 + 0.1 * ring as f64));
    }
    // Two inter-ring ties.
    lines.push((4, 12, 1.8));
    lines.push((20, 28, 1.7));

    let der_buses = vec![0, 8, 16, 24, 4, 20];
    let load_buses: Vec<usize> = vec![
        1, 2, 3, 5, 6, 9, 10, 11, 13, 14, 17, 18, 19, 21, 25, 26, 27, 29,
    ];
    let graph = graph_from_lines(n, &lines, &der_buses, &load_buses);
    let load_params: Vec<LoadParams> = load_buses
        .iter()
        .map(|&b| LoadParams {
            p0: 0.45 + 0.03 * ((b * 5) % 7) as f64,
            q0: 0.18 + 0.015 * ((b * 3) % 5) as f64,
        })
        .collect();
    GridSpec {
        graph,
        der_buses: der_buses.clone(),
        load_buses,
        der_params: vec![
            DerParams {
                inertia: 0.02,
                damping: 0.75,
                droop: 9.0,
                v_set: 1.0,
            };
            der_buses.len()
        ],
        load_params,
        dt: 0.001,
    }
}

fn graph_from_lines(
    n: usize,
    lines: &[(usize, usize, f64)],
    der_buses: &[usize],
    load_buses: &[usize],
) -> PowerGraph {
    let mut y = vec![Complex64::new(0.0, 0.0); n * n];
    let mut edges = Vec::new();
    for &(i, j, len) in lines {
        let z = Complex64::new(0.04, 0.12) * len;
        let admittance = z.inv();
        y[i * n + j] -= admittance;
        y[j * n + i] -= admittance;
        y[i * n + i] += admittance;
        y[j * n + j] += admittance;
        edges.push((i, j));
    }
    let bus_types: Vec<BusType> = (0..n)
        .map(|i| {
            if der_buses.contains(&i) {
                BusType::Der
            } else if load_buses.contains(&i) {
                BusType::Load
            } else {
                BusType::Empty
            }
        })
        .collect();
    PowerGraph::new(n, &edges, y, bus_types).expect("preset grid is valid")
}

/// Resolves a grid argument: a preset name or a path to a grid-spec JSON.
pub fn resolve_grid(arg: &str) -> Result<GridSpec> {
    match arg {
        "desk9" => Ok(desk_grid_9bus()),
        "grid33" => Ok(stand_in_grid_33bus()),
        path => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                Error::argument(format!("cannot read grid spec {path}: {e}"))
            })?;
            GridSpec::from_json(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::kirchhoff_residual;

    fn zero_loads(spec: &GridSpec) -> Loads {
        Loads {
            s: vec![Complex64::new(0.0, 0.0); spec.graph.n_buses()],
        }
    }

    #[test]
    fn presets_validate() {
        desk_grid_9bus().validate().unwrap();
        stand_in_grid_33bus().validate().unwrap();
    }

    #[test]
    fn zero_loads_flat_profile() {
        let spec = desk_grid_9bus();
        let loads = zero_loads(&spec);
        let eq = solve_equilibrium(&spec, &loads).unwrap();
        for v in &eq.voltages {
            assert!((v - Complex64::new(1.0, 0.0)).norm() < 1e-9, "{v}");
        }
        for c in &eq.currents {
            assert!(c.norm() < 1e-9);
        }
        for d in &eq.delta {
            assert!(d.abs() < 1e-9);
        }
        for bus in eq.measurable().chunks_exact(6) {
            assert!(bus[0].abs() < 1e-9 && bus[1].abs() < 1e-9);
        }
    }

    #[test]
    fn equilibrium_is_kirchhoff_consistent() {
        let spec = desk_grid_9bus();
        let loads = Loads::nominal(&spec);
        let eq = solve_equilibrium(&spec, &loads).unwrap();
        for bus in eq.measurable().chunks_exact(6) {
            assert!(kirchhoff_residual(bus) < 1e-10);
        }
        // Load buses actually consume their specified power.
        for (&bus, lp) in spec.load_buses.iter().zip(&spec.load_params) {
            let s = eq.voltages[bus] * eq.currents[bus].conj();
            assert!((s.re + lp.p0).abs() < 1e-9, "bus {bus}: P = {}", s.re);
            assert!((s.im + lp.q0).abs() < 1e-9);
        }
    }

    #[test]
    fn equilibrium_fixed_point_under_load_step() {
        let spec = desk_grid_9bus();
        let loads = Loads::nominal(&spec);
        let dispatch = dispatch_for_loads(&spec, &loads);
        let eq = solve_equilibrium(&spec, &loads).unwrap();

        // +5% load step at bus 4 shifts the equilibrium.
        let mut loads2 = loads.clone();
        loads2.s[4] *= 1.05;
        let eq2 = solve_equilibrium_with_dispatch(&spec, &loads2, &dispatch, None).unwrap();
        let moved = eq
            .voltages
            .iter()
            .zip(&eq2.voltages)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0f64, f64::max);
        assert!(moved > 1e-5, "load step should move the operating point");

        // Re-solving from a perturbed start converges to the same point.
        let mut warm = eq2.clone();
        for v in warm.voltages.iter_mut() {
            *v += Complex64::new(0.01, -0.005);
        }
        for d in warm.delta.iter_mut() {
            *d += 0.02;
        }
        let eq2b = solve_equilibrium_with_dispatch(&spec, &loads2, &dispatch, Some(&warm)).unwrap();
        for (a, b) in eq2.voltages.iter().zip(&eq2b.voltages) {
            assert!((a - b).norm() < 1e-9);
        }
        for (a, b) in eq2.delta.iter().zip(&eq2b.delta) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_schedule_preserves_equilibrium() {
        let spec = desk_grid_9bus();
        let loads = Loads::nominal(&spec);
        let dispatch = dispatch_for_loads(&spec, &loads);
        let eq = solve_equilibrium(&spec, &loads).unwrap();
        let traj = simulate(
            &spec,
            &eq,
            &loads,
            &dispatch,
            &DisturbanceSchedule::default(),
            200,
            TrajectoryKind::Complete,
        )
        .unwrap();
        let first = &traj.states[0];
        for step in &traj.states {
            for (a, b) in step.iter().zip(first) {
                assert!((a - b).abs() < 1e-9, "equilibrium drifted");
            }
        }
    }

    #[test]
    fn single_event_settles_to_new_equilibrium() {
        let spec = desk_grid_9bus();
        let loads = Loads::nominal(&spec);
        let dispatch = dispatch_for_loads(&spec, &loads);
        let eq = solve_equilibrium(&spec, &loads).unwrap();
        let schedule = DisturbanceSchedule {
            events: vec![DisturbanceEvent {
                step: 0,
                bus: 4,
                delta_p: -0.05,
                delta_q: -0.02,
            }],
        };
        let traj = simulate(
            &spec,
            &eq,
            &loads,
            &dispatch,
            &schedule,
            COMPLETE_RESPONSE_STEPS,
            TrajectoryKind::Complete,
        )
        .unwrap();

        // Settled: last 50 steps have negligible rates.
        let settled_from = traj.n_steps() - 51;
        assert!(
            traj.max_rate_magnitude(settled_from) < 1e-6,
            "max rate {}",
            traj.max_rate_magnitude(settled_from)
        );

        // The endpoint matches the post-event equilibrium (fixed dispatch).
        let mut loads2 = loads.clone();
        loads2.s[4] += Complex64::new(0.05, 0.02);
        let eq2 = solve_equilibrium_with_dispatch(&spec, &loads2, &dispatch, Some(&eq)).unwrap();
        let want = eq2.measurable();
        let last = &traj.states[traj.n_steps() - 1];
        for (a, b) in last.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }

        // There was an actual transient.
        let jump: f64 = traj.states[1]
            .iter()
            .zip(&traj.states[0])
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(jump > 1e-3, "no visible disturbance (jump {jump})");
    }

    #[test]
    fn all_emitted_states_kirchhoff_consistent() {
        let spec = desk_grid_9bus();
        let dataset = make_dataset(&spec, 2, 20, 7, false).unwrap();
        for rec in &dataset.records {
            for step in &rec.extended {
                for bus in step.chunks_exact(STATE_DIM) {
                    assert!(kirchhoff_residual(&bus[0..6]) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn recurring_events_never_settle() {
        let spec = desk_grid_9bus();
        let loads = Loads::nominal(&spec);
        let dispatch = dispatch_for_loads(&spec, &loads);
        let eq = solve_equilibrium(&spec, &loads).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let schedule = sample_initial_schedule(&spec, 30, &mut rng);
        let traj = simulate(
            &spec,
            &eq,
            &loads,
            &dispatch,
            &schedule,
            30 * INITIAL_EVENT_SPACING + 1,
            TrajectoryKind::Initial,
        )
        .unwrap();
        // Between consecutive events the system stays in motion: the rate
        // magnitude within every inter-event window stays well above the
        // settled threshold.
        for w in 0..29 {
            let from = w * INITIAL_EVENT_SPACING + 1;
            let mut max_rate = 0.0f64;
            for k in from..from + INITIAL_EVENT_SPACING - 1 {
                for r in traj.rate(k) {
                    max_rate = max_rate.max(r.abs());
                }
            }
            assert!(max_rate > 1e-4, "window {w} unexpectedly settled");
        }
    }

    #[test]
    fn non_equilibrium_start_rejected_for_complete() {
        let spec = desk_grid_9bus();
        let loads = Loads::nominal(&spec);
        let dispatch = dispatch_for_loads(&spec, &loads);
        let mut eq = solve_equilibrium(&spec, &loads).unwrap();
        eq.omega[0] = 0.5;
        let err = simulate(
            &spec,
            &eq,
            &loads,
            &dispatch,
            &DisturbanceSchedule::default(),
            10,
            TrajectoryKind::Complete,
        );
        assert!(err.is_err());
    }

    #[test]
    fn schedule_validation() {
        let spec = desk_grid_9bus();
        // Event on a DER bus is rejected.
        let bad_bus = DisturbanceSchedule {
            events: vec![DisturbanceEvent {
                step: 0,
                bus: 0,
                delta_p: 0.01,
                delta_q: 0.0,
            }],
        };
        assert!(bad_bus.validate(&spec).is_err());
        // Oversized event is rejected (bus 1 has p0 = 0.55, band 0.055).
        let too_big = DisturbanceSchedule {
            events: vec![DisturbanceEvent {
                step: 0,
                bus: 1,
                delta_p: 0.1,
                delta_q: 0.0,
            }],
        };
        assert!(too_big.validate(&spec).is_err());
    }

    #[test]
    fn euler_halving_is_second_order_local() {
        // One dt step vs two dt/2 steps differ at O(dt²): halving dt
        // shrinks the difference by about 4.
        let spec = desk_grid_9bus();
        let loads = Loads::nominal(&spec);
        let dispatch = dispatch_for_loads(&spec, &loads);
        let eq = solve_equilibrium(&spec, &loads).unwrap();
        // Kick the system so rates are nonzero and smooth (no events).
        let mut kicked = eq.clone();
        kicked.omega.iter_mut().for_each(|w| *w += 0.3);

        let end_state = |dt: f64, steps: usize| -> Vec<f64> {
            let mut s = spec.clone();
            s.dt = dt;
            let traj = simulate(
                &s,
                &kicked,
                &loads,
                &dispatch,
                &DisturbanceSchedule::default(),
                steps,
                TrajectoryKind::Initial,
            )
            .unwrap();
            traj.states[traj.n_steps() - 1].clone()
        };

        let dt = spec.dt;
        let diff = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max)
        };
        let d1 = diff(&end_state(dt, 1), &end_state(dt / 2.0, 2));
        let d2 = diff(&end_state(dt / 2.0, 1), &end_state(dt / 4.0, 2));
        assert!(d1 > 0.0 && d2 > 0.0);
        let ratio = d1 / d2;
        assert!(
            (2.5..6.0).contains(&ratio),
            "expected ≈4 for O(dt²), got {ratio}"
        );
    }

    #[test]
    fn extended_states_features() {
        let spec = desk_grid_9bus();
        let loads = Loads::nominal(&spec);
        let dispatch = dispatch_for_loads(&spec, &loads);
        let eq = solve_equilibrium(&spec, &loads).unwrap();
        let schedule = DisturbanceSchedule {
            events: vec![DisturbanceEvent {
                step: 50,
                bus: 4,
                delta_p: 0.05,
                delta_q: 0.01,
            }],
        };
        // Event at 50 means the start is still an equilibrium.
        let traj = simulate(
            &spec,
            &eq,
            &loads,
            &dispatch,
            &schedule,
            200,
            TrajectoryKind::Complete,
        )
        .unwrap();
        let ext = build_extended_states(&traj, spec.graph.bus_types());

        let n = spec.graph.n_buses();
        for (k, step) in ext.iter().enumerate() {
            for bus in 0..n {
                let f = &step[bus * STATE_DIM..(bus + 1) * STATE_DIM];
                let expect_gamma = if k == 50 { 1.0 } else { 0.0 };
                assert_eq!(f[8], expect_gamma, "gamma at step {k}");
                if k == 50 && bus == 4 {
                    assert_eq!(f[6], 0.05);
                    assert_eq!(f[7], 0.01);
                } else {
                    assert_eq!(f[6], 0.0, "dP at step {k} bus {bus}");
                    assert_eq!(f[7], 0.0);
                }
                let expect_beta = spec.graph.bus_types()[bus].beta();
                assert_eq!(f[9], expect_beta);
            }
        }

        // Eq. for dP: injection jump between step 50 and 51 at bus 4
        // matches the scheduled delta (constant-power load).
        let p50 = traj.states[50][4 * 6];
        let p51 = traj.states[51][4 * 6];
        assert!(((p51 - p50) - 0.05).abs() < 1e-9, "dP = {}", p51 - p50);
        // And away from the event P stays put at that bus.
        let p10 = traj.states[10][4 * 6];
        let p11 = traj.states[11][4 * 6];
        assert!((p11 - p10).abs() < 1e-9);
    }

    #[test]
    fn dataset_determinism_and_parallel_equivalence() {
        let spec = desk_grid_9bus();
        let d1 = make_dataset(&spec, 3, 10, 42, false).unwrap();
        let d2 = make_dataset(&spec, 3, 10, 42, false).unwrap();
        let d3 = make_dataset(&spec, 3, 10, 42, true).unwrap();
        assert_eq!(d1.records.len(), 4);
        for (a, b) in d1.records.iter().zip(&d2.records) {
            assert_eq!(a.schedule, b.schedule);
            for (x, y) in a.extended.iter().zip(&b.extended) {
                assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
        for (a, b) in d1.records.iter().zip(&d3.records) {
            assert_eq!(a.schedule, b.schedule);
            for (x, y) in a.extended.iter().zip(&b.extended) {
                assert!(x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()));
            }
        }
        // Different seed, different data.
        let d4 = make_dataset(&spec, 3, 10, 43, false).unwrap();
        assert_ne!(d1.records[0].schedule, d4.records[0].schedule);
    }

    #[test]
    fn grid_spec_json_roundtrip() {
        let spec = desk_grid_9bus();
        let text = serde_json::to_string(&spec.to_json()).unwrap();
        let back = GridSpec::from_json(&text).unwrap();
        assert_eq!(back.graph.n_buses(), 9);
        assert_eq!(back.der_buses, spec.der_buses);
        assert_eq!(back.content_hash(), spec.content_hash());
    }
}
