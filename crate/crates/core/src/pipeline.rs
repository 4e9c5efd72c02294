//! Pipeline orchestration: bands → states → correctors → coupling →
//! homogenized run → fine validation, with all artifacts written to the
//! scenario's output directory and listed in a run manifest.
//!
//! Data files are byte-reproducible: numbers are serialized as the shortest
//! round-trip decimal and no timestamps appear in them. The manifest is the
//! only file carrying volatile metadata (wall times).

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::band::{
    find_critical_points, sample_band, theta_grid_regular, verify_state, BandSample, StateSpec,
    Tolerances,
};
use crate::bloch::BlochEigenpair;
use crate::corrector::{effective_mass_tensor, solve_corrector_zeta, EffectiveMassTensor};
use crate::coupling::{
    coupling_matrix_resonant, fermi_coupling_em, fermi_coupling_scalar, CouplingCoefficient,
    MacroFactor, ScalarDriveProfile, VectorDriveProfile,
};
use crate::error::{Error, Result};
use crate::fine::{convergence_study, ConvergenceRow, Envelope, FineRunResult, FineScenario};
use crate::homogenized::{
    gaussian_field, run as run_macro, AmplitudeState, CouplingField,
    HomogenizedSystem, MacroGrid, RunRecord,
};
use crate::potential::PeriodicPotential;
use crate::resonance::{check_nonresonance, find_resonance_chain, ResonanceReport};
use crate::scenario::{hex, DriveSpec, EmProfile, Scenario, ThetaReq};

/// Pipeline stages selectable from the CLI.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Bands,
    States,
    EffMass,
    Coupling,
    Homogenize,
    Resonant,
    Validate,
    All,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub states: Vec<StateSpec>,
    pub nonresonant: Option<bool>,
    pub resonance_margin: Option<f64>,
    pub macro_mass_max_rel_dev: Option<f64>,
    /// (eps, max relative ‖u‖ deviation) per fine run.
    pub fine_mass_max_rel_dev: Vec<(String, f64)>,
    pub envelope_tail_fraction: Option<f64>,
    pub warnings: Vec<String>,
}

/// Written last; its presence marks a completed run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub scenario_sha256: String,
    pub status: String,
    pub artifacts: Vec<ArtifactRecord>,
    pub verification: VerificationSummary,
    pub wall_times_ms: Vec<(String, u128)>,
}

struct ResolvedState {
    role: &'static str,
    spec: StateSpec,
    pair: BlochEigenpair,
}

struct Ctx {
    scenario: Scenario,
    c: PeriodicPotential,
    tols: Tolerances,
    out_dir: PathBuf,
    artifacts: Vec<ArtifactRecord>,
    verification: VerificationSummary,
    wall: Vec<(String, u128)>,
    band_samples: Option<Vec<BandSample>>,
    states: Option<Vec<ResolvedState>>,
    tensors: Option<Vec<EffectiveMassTensor>>,
    coupling: Option<Vec<CouplingCoefficient>>,
    macro_run: Option<RunRecord>,
    macro_roles: Vec<String>,
    convergence: Option<Vec<ConvergenceRow>>,
    fine_primary: Option<FineRunResult>,
}

impl Ctx {
    fn new(scenario: &Scenario, out_override: Option<&Path>) -> Result<Self> {
        let grid = scenario.grid()?;
        let c = scenario.potential.build(grid)?;
        let out_dir = out_override.map(Path::to_path_buf).unwrap_or(scenario.out_dir.clone());
        std::fs::create_dir_all(&out_dir)?;
        Ok(Self {
            scenario: scenario.clone(),
            c,
            tols: Tolerances::default(),
            out_dir,
            artifacts: Vec::new(),
            verification: VerificationSummary::default(),
            wall: Vec::new(),
            band_samples: None,
            states: None,
            tensors: None,
            coupling: None,
            macro_run: None,
            macro_roles: Vec::new(),
            convergence: None,
            fine_primary: None,
        })
    }

    fn write_artifact(&mut self, name: &str, contents: &str) -> Result<()> {
        use sha2::{Digest, Sha256};
        let path = self.out_dir.join(name);
        std::fs::write(&path, contents)?;
        let mut hasher = Sha256::new();
        hasher.update(contents.as_bytes());
        self.artifacts.push(ArtifactRecord {
            path: name.to_string(),
            sha256: hex(&hasher.finalize()),
            bytes: contents.len() as u64,
        });
        Ok(())
    }

    fn timed<T>(&mut self, label: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t0 = Instant::now();
        let out = f(self);
        self.wall.push((label.to_string(), t0.elapsed().as_millis()));
        out
    }

    // ---- stage: band sampling -------------------------------------------

    fn ensure_bands(&mut self) -> Result<&[BandSample]> {
        if self.band_samples.is_none() {
            let thetas = theta_grid_regular(self.scenario.dim, self.scenario.states.theta_grid);
            let samples = sample_band(&self.c, 1, self.scenario.states.bands, &thetas)?;
            self.band_samples = Some(samples);
        }
        Ok(self.band_samples.as_ref().unwrap())
    }

    fn stage_bands(&mut self) -> Result<()> {
        self.timed("bands", |ctx| {
            ctx.ensure_bands()?;
            let (csv, plot) = {
                let samples = ctx.band_samples.as_ref().unwrap();
                let dim = ctx.scenario.dim;
                let mut header: Vec<String> = (1..=dim).map(|j| format!("theta_{j}")).collect();
                for s in samples {
                    header.push(format!("lambda_{}", s.band));
                }
                for s in samples {
                    header.push(format!("gap_{}", s.band));
                }
                let mut csv = header.join(",");
                csv.push('\n');
                // plot file: theta column then one column per band
                let mut plot =
                    String::from("# band diagram: theta components, then lambda per band\n");
                let n_theta = samples[0].thetas.len();
                for i in 0..n_theta {
                    let theta_cols: Vec<String> =
                        samples[0].thetas[i].as_f64().iter().map(|x| format!("{x}")).collect();
                    let mut row = theta_cols.clone();
                    for s in samples {
                        row.push(format!("{}", s.lambdas[i]));
                    }
                    plot.push_str(&row.join(" "));
                    plot.push('\n');
                    for s in samples {
                        row.push(format!("{}", s.gaps[i]));
                    }
                    csv.push_str(&row.join(","));
                    csv.push('\n');
                }
                (csv, plot)
            };
            ctx.write_artifact("bands.csv", &csv)?;
            ctx.write_artifact("plot_bands.txt", &plot)
        })
    }

    // ---- stage: state resolution ----------------------------------------

    fn resolve_theta(&mut self, band: usize, req: &ThetaReq, role: &str) -> Result<StateSpec> {
        match req {
            ThetaReq::Fixed(theta) => {
                let (spec, _) = verify_state(&self.c, band, theta, &self.tols)?;
                Ok(spec)
            }
            ThetaReq::Auto => {
                self.ensure_bands()?;
                let sample = self
                    .band_samples
                    .as_ref()
                    .unwrap()
                    .iter()
                    .find(|s| s.band == band)
                    .cloned()
                    .ok_or_else(|| {
                        Error::Validation(format!(
                            "auto search for band {band} needs bands >= {band} in [states]"
                        ))
                    })?;
                let found = find_critical_points(&self.c, &sample, &self.tols)?;
                found
                    .into_iter()
                    .find(|s| s.a1_verified && s.theta.is_some())
                    .ok_or_else(|| {
                        Error::AssumptionViolated(format!(
                            "no verified critical point with rational quasi-momentum found on band {band} for state {role}"
                        ))
                    })
            }
        }
    }

    fn ensure_states(&mut self) -> Result<()> {
        if self.states.is_some() {
            return Ok(());
        }
        let n_req = self.scenario.states.n_theta.clone();
        let m_req = self.scenario.states.m_theta.clone();
        let n_band = self.scenario.states.n_band;
        let m_band = self.scenario.states.m_band;
        let n_spec = self.resolve_theta(n_band, &n_req, "n")?;
        let m_spec = self.resolve_theta(m_band, &m_req, "m")?;
        let mut states = Vec::new();
        for (role, spec) in [("n", n_spec), ("m", m_spec)] {
            let theta = spec.theta.clone().ok_or_else(|| {
                Error::Validation(format!("state {role} has no rational quasi-momentum"))
            })?;
            let (spec, pair) = verify_state(&self.c, spec.band, &theta, &self.tols)?;
            if !spec.a1_verified {
                self.verification.warnings.push(format!(
                    "state {role} (band {}, theta {}) is not a verified simple critical point",
                    spec.band,
                    spec.theta_string()
                ));
            }
            self.verification.states.push(spec.clone());
            states.push(ResolvedState { role: if role == "n" { "n" } else { "m" }, spec, pair });
        }
        self.states = Some(states);
        Ok(())
    }

    fn stage_states(&mut self) -> Result<()> {
        self.timed("states", |ctx| {
            ctx.ensure_states()?;
            let states = ctx.states.as_ref().unwrap();
            #[derive(Serialize)]
            struct Entry<'a> {
                role: &'a str,
                #[serde(flatten)]
                spec: &'a StateSpec,
            }
            let entries: Vec<Entry> =
                states.iter().map(|s| Entry { role: s.role, spec: &s.spec }).collect();
            let json = serde_json::to_string_pretty(&entries).expect("state serialization");
            ctx.write_artifact("states.json", &json)
        })
    }

    fn require_a1(&self) -> Result<()> {
        let states = self.states.as_ref().expect("states resolved");
        for s in states {
            if !s.spec.a1_verified {
                return Err(Error::AssumptionViolated(format!(
                    "state {} (band {}, theta {}) is not a simple critical point; gap {:.3e}, |grad| {}",
                    s.role,
                    s.spec.band,
                    s.spec.theta_string(),
                    s.spec.gap,
                    s.spec
                        .grad_norm
                        .map_or("n/a".to_string(), |g| format!("{g:.3e}")),
                )));
            }
        }
        Ok(())
    }

    // ---- stage: effective mass ------------------------------------------

    fn ensure_tensors(&mut self) -> Result<()> {
        if self.tensors.is_some() {
            return Ok(());
        }
        self.ensure_states()?;
        self.require_a1()?;
        let states = self.states.as_ref().unwrap();
        let dim = self.scenario.dim;
        let mut tensors = Vec::new();
        for s in states {
            let zetas: Result<Vec<_>> =
                (0..dim).map(|k| solve_corrector_zeta(&self.c, &s.pair, k, &self.tols)).collect();
            tensors.push(effective_mass_tensor(&self.c, &s.pair, &zetas?, &self.tols)?);
        }
        self.tensors = Some(tensors);
        Ok(())
    }

    fn stage_effmass(&mut self) -> Result<()> {
        self.timed("effmass", |ctx| {
            ctx.ensure_tensors()?;
            let states = ctx.states.as_ref().unwrap();
            let tensors = ctx.tensors.as_ref().unwrap();
            #[derive(Serialize)]
            struct Entry<'a> {
                role: &'a str,
                band: usize,
                theta: String,
                a_star: &'a Vec<Vec<f64>>,
                fd_reference: &'a Vec<Vec<f64>>,
                max_rel_delta: f64,
                asymmetry: f64,
            }
            let entries: Vec<Entry> = states
                .iter()
                .zip(tensors)
                .map(|(s, t)| Entry {
                    role: s.role,
                    band: s.spec.band,
                    theta: s.spec.theta_string(),
                    a_star: &t.a_star,
                    fd_reference: &t.fd_reference,
                    max_rel_delta: t.max_rel_delta,
                    asymmetry: t.asymmetry,
                })
                .collect();
            let json = serde_json::to_string_pretty(&entries).expect("tensor serialization");
            ctx.write_artifact("effmass.json", &json)
        })
    }

    // ---- stage: coupling --------------------------------------------------

    fn scalar_profile(&self) -> Result<Option<ScalarDriveProfile>> {
        match &self.scenario.drive {
            DriveSpec::Scalar { q, g } => Ok(Some(ScalarDriveProfile {
                q: q.build(*self.c.grid())?,
                g: g.clone(),
            })),
            _ => Ok(None),
        }
    }

    fn em_profile(&self) -> Result<Option<VectorDriveProfile>> {
        match &self.scenario.drive {
            DriveSpec::Em { a_profile, g } => {
                let grid = *self.c.grid();
                let components = match a_profile {
                    EmProfile::Const(vals) => vals
                        .iter()
                        .map(|&v| Ok(PeriodicPotential::constant(grid, v)))
                        .collect::<Result<Vec<_>>>()?,
                    EmProfile::Mathieu => {
                        let mut comps = vec![PeriodicPotential::mathieu(grid)];
                        for _ in 1..grid.dim() {
                            comps.push(PeriodicPotential::free(grid));
                        }
                        comps
                    }
                };
                Ok(Some(VectorDriveProfile { components, g: g.clone() }))
            }
            _ => Ok(None),
        }
    }

    fn ensure_coupling(&mut self) -> Result<()> {
        if self.coupling.is_some() {
            return Ok(());
        }
        self.ensure_states()?;
        let states = self.states.as_ref().unwrap();
        let (n, m) = (&states[0].pair, &states[1].pair);
        let coeffs = match &self.scenario.drive {
            DriveSpec::None => {
                return Err(Error::Validation(
                    "this stage needs a [drive] section (kind = scalar or em)".to_string(),
                ))
            }
            DriveSpec::Scalar { .. } => {
                let profile = self.scalar_profile()?.unwrap();
                vec![
                    fermi_coupling_scalar(&profile.q, n, m)?,
                    fermi_coupling_scalar(&profile.q, m, n)?,
                ]
            }
            DriveSpec::Em { .. } => {
                let profile = self.em_profile()?.unwrap();
                vec![fermi_coupling_em(&profile, n, m)?, fermi_coupling_em(&profile, m, n)?]
            }
        };
        self.coupling = Some(coeffs);
        Ok(())
    }

    fn stage_coupling(&mut self) -> Result<()> {
        self.timed("coupling", |ctx| {
            ctx.ensure_coupling()?;
            let coeffs = ctx.coupling.as_ref().unwrap();
            #[derive(Serialize)]
            struct Entry<'a> {
                #[serde(flatten)]
                coeff: &'a CouplingCoefficient,
                abs: f64,
                transition_probability: f64,
            }
            let entries: Vec<Entry> = coeffs
                .iter()
                .map(|c| Entry {
                    coeff: c,
                    abs: c.value().norm(),
                    transition_probability: c.transition_probability(),
                })
                .collect();
            let json = serde_json::to_string_pretty(&entries).expect("coupling serialization");
            ctx.write_artifact("coupling.json", &json)
        })
    }

    // ---- stage: homogenized run -------------------------------------------

    fn build_two_state_system(&mut self) -> Result<HomogenizedSystem> {
        self.ensure_states()?;
        self.ensure_coupling()?;
        let dim = self.scenario.dim;
        let tensors: Vec<Vec<Vec<f64>>> = match &self.scenario.macro_spec.tensors_override {
            Some(vals) => vals.iter().map(|&v| vec![vec![v]]).collect(),
            None => {
                self.ensure_tensors()?;
                self.tensors.as_ref().unwrap().iter().map(|t| t.a_star.clone()).collect()
            }
        };
        let states = self.states.as_ref().unwrap();
        let coeffs = self.coupling.as_ref().unwrap();
        let d_nm = coeffs[0].value();
        let mut structure = DMatrix::<Complex64>::zeros(2, 2);
        structure[(0, 1)] = d_nm;
        structure[(1, 0)] = d_nm.conj();
        let g = match &self.scenario.drive {
            DriveSpec::Scalar { g, .. } | DriveSpec::Em { g, .. } => g.clone(),
            DriveSpec::None => MacroFactor::Const { amplitude: 0.0 },
        };
        let grid = MacroGrid::new(
            dim,
            self.scenario.macro_spec.box_length,
            self.scenario.macro_spec.points,
        )?;
        self.macro_roles = vec!["n".to_string(), "m".to_string()];
        Ok(HomogenizedSystem {
            states: states.iter().map(|s| s.spec.clone()).collect(),
            tensors,
            coupling: CouplingField::new(structure, g)?,
            grid,
            initial_index: 0,
        })
    }

    fn run_homogenized(&mut self, system: HomogenizedSystem) -> Result<()> {
        let grid = system.grid;
        let spec = &self.scenario.macro_spec;
        let v0 = gaussian_field(&grid, &spec.envelope_center, spec.envelope_sigma);
        let tail = envelope_tail_fraction(&v0, &grid);
        self.verification.envelope_tail_fraction = Some(tail);
        if tail > 1e-8 {
            self.verification
                .warnings
                .push(format!("macro envelope tail fraction {tail:.3e} exceeds 1e-8"));
        }
        let order = system.order();
        let init = AmplitudeState::initial(&grid, order, system.initial_index, v0)?;
        let snapshots = spec.snapshots;
        let snapshot_every = if snapshots > 0 {
            ((spec.horizon / spec.dt).round() as usize / snapshots).max(1)
        } else {
            0
        };
        let record = run_macro(system, init, spec.horizon, spec.dt, snapshot_every)?;
        self.verification.macro_mass_max_rel_dev = Some(record.max_rel_mass_dev);
        self.macro_run = Some(record);
        Ok(())
    }

    fn stage_homogenize(&mut self) -> Result<()> {
        self.timed("homogenize", |ctx| {
            ctx.ensure_states()?;
            ctx.require_a1()?;
            let system = ctx.build_two_state_system()?;
            ctx.run_homogenized(system)?;
            ctx.write_macro_artifacts()
        })
    }

    fn write_macro_artifacts(&mut self) -> Result<()> {
        let mut files: Vec<(String, String)> = Vec::new();
        {
            let record = self.macro_run.as_ref().expect("macro run recorded");
            let roles = &self.macro_roles;
            let mut csv = String::from("t,");
            csv.push_str(&roles.iter().map(|r| format!("mass_{r}")).collect::<Vec<_>>().join(","));
            csv.push_str(",total\n");
            for (i, t) in record.times.iter().enumerate() {
                let mut row = vec![format!("{t}")];
                for p in 0..roles.len() {
                    row.push(format!("{}", record.masses[p][i]));
                }
                row.push(format!("{}", record.totals[i]));
                csv.push_str(&row.join(","));
                csv.push('\n');
            }
            let mut plot = String::from("# t, mass per amplitude, total\n");
            for line in csv.lines().skip(1) {
                plot.push_str(&line.replace(',', " "));
                plot.push('\n');
            }
            files.push(("trajectory_norms.csv".to_string(), csv));
            files.push(("plot_masses.txt".to_string(), plot));

            let grid_dim = self.scenario.dim;
            let grid = MacroGrid::new(
                grid_dim,
                self.scenario.macro_spec.box_length,
                self.scenario.macro_spec.points,
            )?;
            for (idx, snap) in record.snapshots.iter().enumerate() {
                for (p, field) in snap.fields.iter().enumerate() {
                    let mut s = String::from(if grid_dim == 1 { "x,re,im\n" } else { "x1,x2,re,im\n" });
                    for (i, v) in field.iter().enumerate() {
                        let x = grid.point(i);
                        let coords: Vec<String> =
                            (0..grid_dim).map(|j| format!("{}", x[j])).collect();
                        s.push_str(&format!("{},{},{}\n", coords.join(","), v.re, v.im));
                    }
                    files.push((format!("v_{p}_t{idx}.csv"), s));
                }
            }
        }
        for (name, contents) in files {
            self.write_artifact(&name, &contents)?;
        }
        Ok(())
    }

    // ---- stage: resonance ---------------------------------------------------

    fn stage_resonant(&mut self) -> Result<()> {
        self.timed("resonant", |ctx| {
            ctx.ensure_states()?;
            let (n_spec, m_spec) = {
                let states = ctx.states.as_ref().unwrap();
                (states[0].spec.clone(), states[1].spec.clone())
            };
            let report = check_nonresonance(&ctx.c, &n_spec, &m_spec, &ctx.tols)?;
            ctx.verification.nonresonant = Some(report.nonresonant);
            ctx.verification.resonance_margin = Some(report.margin);
            ctx.verification.warnings.extend(report.warnings.clone());

            // Walk the ladder; an unterminated chain is an assumption failure,
            // but the level-1 report is always written first.
            let chain_result = if report.nonresonant {
                Ok(report.clone())
            } else {
                find_resonance_chain(&ctx.c, &n_spec, &m_spec, 8, &ctx.tols)
            };
            let final_report = match &chain_result {
                Ok(r) => r.clone(),
                Err(_) => report.clone(),
            };
            let json =
                serde_json::to_string_pretty(&final_report).expect("resonance serialization");
            ctx.write_artifact("resonance.json", &json)?;
            let chain_report = chain_result?;

            // With a finite chain and a scalar drive, run the multi-state system.
            if let (Some(chain), Some(profile)) = (&chain_report.chain, ctx.scalar_profile()?) {
                ctx.run_resonant_chain(chain, &profile)?;
                ctx.write_macro_artifacts()?;
            }
            Ok(())
        })
    }

    fn run_resonant_chain(
        &mut self,
        chain: &[StateSpec],
        profile: &ScalarDriveProfile,
    ) -> Result<()> {
        let dim = self.scenario.dim;
        let mut pairs = Vec::new();
        for s in chain {
            let theta = s.theta.clone().ok_or_else(|| {
                Error::Validation("chain states need rational quasi-momenta".to_string())
            })?;
            let (spec, pair) = verify_state(&self.c, s.band, &theta, &self.tols)?;
            if !spec.a1_verified {
                return Err(Error::AssumptionViolated(format!(
                    "chain state band {} at theta {} is not a simple critical point",
                    spec.band,
                    spec.theta_string()
                )));
            }
            pairs.push(pair);
        }
        let matrix = coupling_matrix_resonant(&pairs, &profile.q)?;
        let mut tensors = Vec::new();
        for pair in &pairs {
            let zetas: Result<Vec<_>> =
                (0..dim).map(|k| solve_corrector_zeta(&self.c, pair, k, &self.tols)).collect();
            tensors.push(effective_mass_tensor(&self.c, pair, &zetas?, &self.tols)?.a_star);
        }
        let grid = MacroGrid::new(
            dim,
            self.scenario.macro_spec.box_length,
            self.scenario.macro_spec.points,
        )?;
        self.macro_roles = (0..chain.len())
            .map(|i| match i {
                0 => "m".to_string(),
                1 => "n".to_string(),
                k => format!("l{}", k - 1),
            })
            .collect();
        let system = HomogenizedSystem {
            states: chain.to_vec(),
            tensors,
            coupling: CouplingField::new(matrix, profile.g.clone())?,
            grid,
            // the wave packet starts on state n, which sits at chain index 1
            initial_index: 1,
        };
        self.run_homogenized(system)
    }

    // ---- stage: fine validation ----------------------------------------------

    fn stage_validate(&mut self) -> Result<()> {
        self.timed("validate", |ctx| {
            let fine_spec = ctx.scenario.fine.clone().ok_or_else(|| {
                Error::Validation("scenario has no [fine] section".to_string())
            })?;
            ctx.ensure_states()?;
            ctx.require_a1()?;
            // Theorem hypothesis: the pair must be non-resonant.
            let (n_spec, m_spec) = {
                let states = ctx.states.as_ref().unwrap();
                (states[0].spec.clone(), states[1].spec.clone())
            };
            let report = check_nonresonance(&ctx.c, &n_spec, &m_spec, &ctx.tols)?;
            ctx.verification.nonresonant = Some(report.nonresonant);
            ctx.verification.resonance_margin = Some(report.margin);
            if !report.nonresonant {
                return Err(Error::AssumptionViolated(format!(
                    "state pair is resonant (margin {:.3e}); the two-state limit does not apply",
                    report.margin
                )));
            }

            // Homogenized reference on the fine box, sampled like the fine runs.
            let profile = ctx.scalar_profile()?;
            let system = ctx.build_two_state_system()?;
            let samples = fine_spec.samples;
            let horizon = ctx.scenario.macro_spec.horizon;
            let span = horizon / samples as f64;
            let per = (span / ctx.scenario.macro_spec.dt).ceil().max(1.0) as usize;
            let dt_macro = span / per as f64;
            // the reference must live on the fine box, not the macro box
            let ref_grid = MacroGrid::new(1, fine_spec.box_length as f64, ctx.scenario.macro_spec.points)?;
            let (center, sigma) = match fine_spec.envelope {
                Envelope::Gaussian { center, sigma } => (center, sigma),
                Envelope::Uniform => (0.0, 0.0),
            };
            let v0 = match fine_spec.envelope {
                Envelope::Uniform => vec![Complex64::new(1.0, 0.0); ref_grid.n_total()],
                Envelope::Gaussian { .. } => gaussian_field(&ref_grid, &[center], sigma),
            };
            let ref_system = HomogenizedSystem { grid: ref_grid, ..system };
            let init = AmplitudeState::initial(&ref_grid, 2, 0, v0)?;
            let record = run_macro(ref_system, init, horizon, dt_macro, 0)?;
            ctx.verification.macro_mass_max_rel_dev = Some(record.max_rel_mass_dev);
            let reference_masses: Vec<Vec<f64>> = (0..2)
                .map(|p| (0..=samples).map(|s| record.masses[p][s * per]).collect())
                .collect();

            let states = ctx.states.as_ref().unwrap();
            let base = FineScenario {
                epsilon: fine_spec.eps_list[0],
                box_length: fine_spec.box_length,
                points_per_cell: fine_spec.points_per_cell,
                c: ctx.c.clone(),
                n: states[0].pair.clone(),
                m: states[1].pair.clone(),
                drive: profile,
                envelope: fine_spec.envelope.clone(),
                horizon,
                dt_safety: fine_spec.dt_safety,
                with_corrector: fine_spec.with_corrector,
            };
            let rows = convergence_study(&base, &fine_spec.eps_list, &reference_masses, samples)?;
            for row in &rows {
                ctx.verification
                    .fine_mass_max_rel_dev
                    .push((row.eps.clone(), row.max_rel_norm_dev));
                ctx.wall.push((format!("fine eps={}", row.eps), row.wall_ms));
            }

            // fine_run.csv: time series of the finest member
            let finest = rows.last().and_then(|r| r.result.as_ref()).unwrap();
            let mut csv = String::from("t,norm_u,eps_grad_norm,mass_n,mass_m,remainder\n");
            for s in 0..finest.sample_times.len() {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    finest.sample_times[s],
                    finest.norms[s],
                    finest.eps_grad_norms[s],
                    finest.masses[0][s],
                    finest.masses[1][s],
                    finest.remainders[s]
                ));
            }
            ctx.write_artifact("fine_run.csv", &csv)?;

            let mut conv = String::from("epsilon,time_integrated_remainder,band_mass_deviation\n");
            let mut plot = String::from("# epsilon, time-integrated remainder, band-mass deviation\n");
            for row in &rows {
                conv.push_str(&format!(
                    "{},{},{}\n",
                    row.eps, row.remainder_sq_time_integral, row.band_mass_deviation
                ));
                plot.push_str(&format!(
                    "{} {} {}\n",
                    row.eps_f, row.remainder_sq_time_integral, row.band_mass_deviation
                ));
            }
            ctx.write_artifact("convergence.csv", &conv)?;
            ctx.write_artifact("plot_remainder.txt", &plot)?;
            ctx.fine_primary = rows.into_iter().last().and_then(|r| r.result);
            Ok(())
        })
    }

    fn finish(mut self, status: String) -> Result<RunManifest> {
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            name: self.scenario.name.clone(),
            scenario_sha256: self.scenario.sha256(),
            status,
            artifacts: self.artifacts.clone(),
            verification: self.verification.clone(),
            wall_times_ms: self.wall.clone(),
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
        std::fs::write(self.out_dir.join("manifest.json"), json)?;
        Ok(manifest)
    }
}

fn envelope_tail_fraction(v0: &[Complex64], grid: &MacroGrid) -> f64 {
    // mass fraction in the outermost grid layer
    let p = grid.points_per_dim;
    let total: f64 = v0.iter().map(|z| z.norm_sqr()).sum();
    let mut tail = 0.0;
    for (i, v) in v0.iter().enumerate() {
        let mut rem = i;
        let mut outer = false;
        for _ in 0..grid.dim {
            let c = rem % p;
            if c == 0 || c == p - 1 {
                outer = true;
            }
            rem /= p;
        }
        if outer {
            tail += v.norm_sqr();
        }
    }
    tail / total.max(f64::MIN_POSITIVE)
}

/// Execute the requested stage (plus its prerequisites) and write the
/// manifest. On failure the manifest is still written with a failure marker
/// before the error is returned.
pub fn run_pipeline(
    scenario: &Scenario,
    stage: Stage,
    out_override: Option<&Path>,
) -> Result<RunManifest> {
    let mut ctx = Ctx::new(scenario, out_override)?;
    let outcome = execute(&mut ctx, stage);
    match outcome {
        Ok(()) => ctx.finish("complete".to_string()),
        Err(e) => {
            let _ = ctx.finish(format!("failed: {e}"));
            Err(e)
        }
    }
}

fn execute(ctx: &mut Ctx, stage: Stage) -> Result<()> {
    match stage {
        Stage::Bands => {
            ctx.stage_bands()?;
            ctx.stage_states()
        }
        Stage::States => ctx.stage_states(),
        Stage::EffMass => {
            ctx.stage_states()?;
            ctx.stage_effmass()
        }
        Stage::Coupling => {
            ctx.stage_states()?;
            ctx.stage_coupling()
        }
        Stage::Homogenize => {
            ctx.stage_states()?;
            ctx.stage_effmass()?;
            ctx.stage_coupling()?;
            ctx.stage_homogenize()
        }
        Stage::Resonant => {
            ctx.stage_states()?;
            ctx.stage_resonant()
        }
        Stage::Validate => {
            ctx.stage_states()?;
            ctx.stage_effmass()?;
            ctx.stage_coupling()?;
            ctx.stage_homogenize()?;
            ctx.stage_validate()
        }
        Stage::All => {
            ctx.stage_bands()?;
            ctx.stage_states()?;
            if !matches!(ctx.scenario.drive, DriveSpec::None) {
                ctx.stage_effmass()?;
                ctx.stage_coupling()?;
                ctx.stage_homogenize()?;
                if ctx.scenario.fine.is_some() {
                    ctx.stage_validate()?;
                }
            }
            Ok(())
        }
    }
}

/// Outcome of `--check-assumptions-only`.
#[derive(Clone, Debug, Serialize)]
pub struct AssumptionCheck {
    pub states: Vec<StateSpec>,
    pub a1_ok: bool,
    pub nonresonant: bool,
    pub margin: f64,
    pub report: ResonanceReport,
}

/// Verify a1 for both states and the non-resonance condition, without
/// writing any artifacts.
pub fn check_assumptions(scenario: &Scenario) -> Result<AssumptionCheck> {
    let mut ctx = Ctx::new(scenario, Some(Path::new(".")))?;
    ctx.ensure_states()?;
    let states = ctx.states.as_ref().unwrap();
    let a1_ok = states.iter().all(|s| s.spec.a1_verified);
    let report = check_nonresonance(&ctx.c, &states[0].spec, &states[1].spec, &ctx.tols)?;
    Ok(AssumptionCheck {
        states: states.iter().map(|s| s.spec.clone()).collect(),
        a1_ok,
        nonresonant: report.nonresonant,
        margin: report.margin,
        report,
    })
}
