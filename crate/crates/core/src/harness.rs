//! Run configuration, index-theorem reports, figure data and the command line.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framing::{assemble_su, build_frame, frame_monodromy, ClosedFrame, TwistedCoefficients};
use crate::geometry::{DeckMap, ManifoldKind, ManifoldModel, Potential};
use crate::jacobi::{morse_index, MorseOptions, SpectralCount};
use crate::linalg::{max_abs, Mat, Vector};
use crate::maslov::{cz_index, find_crossings, CrossingOptions, HalfInteger};
use crate::orbits::{canonical_start, find_orbit, join, OrbitOptions, PerturbedOrbit};
use crate::specflow::{family_endpoint_paths, proof_family_flows, FlowOptions};
use crate::symplectic::{
    fundamental_solution, gamma1_path, gamma2_path, matrix_exponential_path, unwrapped_coords, SymplecticPath,
};

fn default_potential() -> Potential {
    Potential::Zero
}

/// One Newton seed: a chart position, an optional momentum and a deck word.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SeedSpec {
    pub position: Vec<f64>,
    /// Defaults to the straight chart segment from `x` to `D(x)`.
    #[serde(default)]
    pub momentum: Option<Vec<f64>>,
    #[serde(default)]
    pub deck: Vec<(usize, i32)>,
}

/// Uniform seeds `k/per_axis` in every coordinate, combined with each deck word.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SeedGrid {
    pub per_axis: usize,
    #[serde(default = "default_decks")]
    pub decks: Vec<Vec<(usize, i32)>>,
}

fn default_decks() -> Vec<Vec<(usize, i32)>> {
    vec![Vec::new()]
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolverParams {
    pub orbit_steps: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub det_tol: f64,
    pub defect_tol: f64,
    pub morse_start_grid: usize,
    pub morse_max_grid: usize,
    pub null_tol: Option<f64>,
    pub path_steps: usize,
    pub kernel_rtol: f64,
    pub form_tol: f64,
    pub lambda_steps: usize,
    pub flow_grid: usize,
    /// Power of the half rotation `U` used for twisted frames.
    pub rotation_power: i32,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            orbit_steps: crate::orbits::DEFAULT_STEPS,
            newton_tol: 1e-10,
            newton_max_iter: 50,
            det_tol: 1e-8,
            defect_tol: 1e-8,
            morse_start_grid: 128,
            morse_max_grid: 1024,
            null_tol: None,
            path_steps: crate::symplectic::DEFAULT_PATH_STEPS,
            kernel_rtol: 1e-7,
            form_tol: 1e-8,
            lambda_steps: 64,
            flow_grid: 128,
            rotation_power: 1,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("newton_tol", self.newton_tol),
            ("det_tol", self.det_tol),
            ("defect_tol", self.defect_tol),
            ("kernel_rtol", self.kernel_rtol),
            ("form_tol", self.form_tol),
            ("null_tol", self.null_tol.unwrap_or(1.0)),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.orbit_steps == 0 || self.path_steps == 0 || self.lambda_steps == 0 || self.newton_max_iter == 0 {
            return Err(Error::Config("step counts must be positive".into()));
        }
        if self.morse_start_grid < crate::jacobi::MIN_GRID || self.morse_max_grid < self.morse_start_grid {
            return Err(Error::Config(format!(
                "Morse grids must satisfy {} <= start <= max",
                crate::jacobi::MIN_GRID
            )));
        }
        if self.flow_grid < crate::jacobi::MIN_GRID {
            return Err(Error::Config("flow grid too small".into()));
        }
        Ok(())
    }

    pub fn orbit_options(&self) -> OrbitOptions {
        OrbitOptions {
            steps: self.orbit_steps,
            tol: self.newton_tol,
            max_iter: self.newton_max_iter,
            det_tol: self.det_tol,
            defect_tol: self.defect_tol,
        }
    }

    pub fn morse_options(&self) -> MorseOptions {
        MorseOptions {
            start_grid: self.morse_start_grid,
            max_grid: self.morse_max_grid,
            null_tol: self.null_tol,
        }
    }

    pub fn crossing_options(&self) -> CrossingOptions {
        CrossingOptions {
            kernel_rtol: self.kernel_rtol,
            form_tol: self.form_tol,
            ..CrossingOptions::default()
        }
    }

    pub fn flow_options(&self) -> FlowOptions {
        FlowOptions {
            lambda_steps: self.lambda_steps,
            grid: self.flow_grid,
            null_tol: self.null_tol,
            ..FlowOptions::default()
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Outputs {
    pub report: Option<PathBuf>,
    /// Directory for per-orbit path CSVs.
    pub orbit_paths: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifold: ManifoldKind,
    #[serde(default = "default_potential")]
    pub potential: Potential,
    #[serde(default)]
    pub seeds: Vec<SeedSpec>,
    #[serde(default)]
    pub seed_grid: Option<SeedGrid>,
    /// Seed for the random cut-off adjustments of the proof families.
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub outputs: Outputs,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        let model = self.model()?;
        self.potential
            .check_dimension(model.dim())
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.seeds.is_empty() && self.seed_grid.is_none() {
            return Err(Error::Config("no seeds given".into()));
        }
        for s in &self.seeds {
            if s.position.len() != model.dim() || s.momentum.as_ref().is_some_and(|m| m.len() != model.dim()) {
                return Err(Error::Config(format!("seed {:?} has the wrong dimension", s.position)));
            }
        }
        if let Some(g) = &self.seed_grid {
            if g.per_axis == 0 || g.decks.is_empty() {
                return Err(Error::Config("empty seed grid".into()));
            }
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ManifoldModel> {
        ManifoldModel::new(self.manifold).map_err(|e| Error::Config(e.to_string()))
    }

    /// Seeds as phase-space points with their deck maps, in a fixed order.
    pub fn expand_seeds(&self, model: &ManifoldModel) -> Result<Vec<(Vector, DeckMap)>> {
        let mut specs = self.seeds.clone();
        if let Some(grid) = &self.seed_grid {
            let n = model.dim();
            let total = grid.per_axis.pow(n as u32);
            for deck in &grid.decks {
                for idx in 0..total {
                    let mut rest = idx;
                    let position = (0..n)
                        .map(|_| {
                            let k = rest % grid.per_axis;
                            rest /= grid.per_axis;
                            k as f64 / grid.per_axis as f64
                        })
                        .collect();
                    specs.push(SeedSpec {
                        position,
                        momentum: None,
                        deck: deck.clone(),
                    });
                }
            }
        }
        specs
            .iter()
            .map(|s| {
                let deck = model.deck(&s.deck).map_err(|e| Error::Config(e.to_string()))?;
                let x = Vector::from_vec(s.position.clone());
                let y = match &s.momentum {
                    Some(m) => Vector::from_vec(m.clone()),
                    None => model.metric(&x)? * (deck.apply(&x) - &x),
                };
                Ok((join(&x, &y), deck))
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct Diagnostics {
    pub newton_residual: Option<f64>,
    pub nondegeneracy_gap: Option<f64>,
    pub frame_defect: Option<f64>,
    pub path_defect: Option<f64>,
    /// `‖Ψ_U(1) − twisted linearized return map‖_∞`.
    pub monodromy_mismatch: Option<f64>,
    pub spectral_gap: Option<f64>,
    pub null_tol: Option<f64>,
    pub morse_grid: Option<usize>,
    pub path_steps: Option<usize>,
    pub crossings: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct IndexReport {
    pub orbit_id: String,
    pub status: Status,
    pub reason: Option<String>,
    pub action: Option<f64>,
    pub sigma: Option<u8>,
    pub ind: Option<usize>,
    pub null: Option<usize>,
    pub mu_cz: Option<String>,
    /// `μ_CZ + Ind − σ`.
    pub residual: Option<i64>,
    pub diagnostics: Diagnostics,
}

/// Both index computations for one orbit.
#[derive(Debug, Clone)]
pub struct OrbitAnalysis {
    pub frame: ClosedFrame,
    pub sigma: u8,
    pub morse: SpectralCount,
    pub path: SymplecticPath,
    pub mu_cz: HalfInteger,
    pub crossings: usize,
    pub frame_defect: f64,
    pub monodromy_mismatch: f64,
}

impl OrbitAnalysis {
    pub fn residual(&self) -> Option<i64> {
        self.mu_cz
            .to_integer()
            .map(|mu| mu + self.morse.ind as i64 - self.sigma as i64)
    }
}

/// Morse index from the discretized Jacobi operator and `μ_CZ` from the twisted
/// linearized flow, both in the same closed frame.
pub fn analyze_orbit(
    model: &ManifoldModel,
    pot: &Potential,
    orbit: &PerturbedOrbit,
    params: &SolverParams,
) -> Result<OrbitAnalysis> {
    let frame = build_frame(model, pot, orbit, None)?;
    let sigma = frame.sigma;
    let frame_defect = frame.orthonormality_defect(model, orbit)?;
    let morse = morse_index(&frame, &params.morse_options())?;
    let coeffs: Arc<dyn TwistedCoefficients> = Arc::new(frame.clone());
    let (_, su) = assemble_su(coeffs, params.rotation_power);
    let path = fundamental_solution(&su, params.path_steps)?;
    let opts = params.crossing_options();
    let mu_cz = cz_index(&path, &opts)?;
    let crossings = find_crossings(&path, &opts)?.len();
    let mismatch = if params.rotation_power == 1 {
        max_abs(&(frame_monodromy(model, orbit, &frame)? - path.end()))
    } else {
        f64::NAN
    };
    Ok(OrbitAnalysis {
        frame,
        sigma,
        morse,
        path,
        mu_cz,
        crossings,
        frame_defect,
        monodromy_mismatch: mismatch,
    })
}

fn fmt_num(v: f64) -> String {
    let r = (v * 1e6).round() / 1e6;
    let r = if r == 0.0 { 0.0 } else { r };
    format!("{r}")
}

/// Stable identifier from the canonical start point and deck map.
pub fn orbit_id(model: &ManifoldModel, orbit: &PerturbedOrbit) -> String {
    let (z, deck) = canonical_start(model, orbit);
    let n = model.dim();
    let x: Vec<String> = (0..n).map(|i| fmt_num(z[i])).collect();
    let y: Vec<String> = (0..n).map(|i| fmt_num(z[n + i])).collect();
    let a: Vec<String> = deck.linear.iter().map(|&v| fmt_num(v)).collect();
    let s: Vec<String> = deck.shift.iter().map(|&v| fmt_num(v)).collect();
    format!("x=({});y=({});A=({});s=({})", x.join(","), y.join(","), a.join(","), s.join(","))
}

enum SeedOutcome {
    Found(Box<PerturbedOrbit>),
    Failed(Error),
}

fn run_seeds(config: &RunConfig) -> Result<(ManifoldModel, Vec<(usize, SeedOutcome)>)> {
    let model = config.model()?;
    let seeds = config.expand_seeds(&model)?;
    let opts = config.solver.orbit_options();
    let pot = &config.potential;
    let outcomes: Vec<(usize, SeedOutcome)> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, (z, d))| match find_orbit(&model, pot, z, d, &opts) {
            Ok(o) => (i, SeedOutcome::Found(Box::new(o))),
            Err(e) => (i, SeedOutcome::Failed(e)),
        })
        .collect();
    Ok((model, outcomes))
}

/// Distinct orbits found from the configured seeds, keyed by id, plus per-seed failures.
pub fn find_orbits(config: &RunConfig) -> Result<(ManifoldModel, Vec<(String, PerturbedOrbit)>, Vec<(usize, Error)>)> {
    let (model, outcomes) = run_seeds(config)?;
    let mut found: Vec<(String, PerturbedOrbit)> = Vec::new();
    let mut failures = Vec::new();
    for (i, outcome) in outcomes {
        match outcome {
            SeedOutcome::Found(o) => {
                let id = orbit_id(&model, &o);
                if !found.iter().any(|(k, _)| *k == id) {
                    found.push((id, *o));
                }
            }
            SeedOutcome::Failed(e) => failures.push((i, e)),
        }
    }
    found.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((model, found, failures))
}

fn skipped(id: String, reason: String) -> IndexReport {
    IndexReport {
        orbit_id: id,
        status: Status::Skipped,
        reason: Some(reason),
        action: None,
        sigma: None,
        ind: None,
        null: None,
        mu_cz: None,
        residual: None,
        diagnostics: Diagnostics::default(),
    }
}

fn report_for(model: &ManifoldModel, pot: &Potential, id: String, orbit: &PerturbedOrbit, params: &SolverParams) -> IndexReport {
    let mut diagnostics = Diagnostics {
        newton_residual: Some(orbit.residual),
        nondegeneracy_gap: Some(orbit.monodromy.nondegeneracy_gap),
        path_steps: Some(params.path_steps),
        ..Diagnostics::default()
    };
    match analyze_orbit(model, pot, orbit, params) {
        Ok(a) => {
            diagnostics.frame_defect = Some(a.frame_defect);
            diagnostics.path_defect = Some(a.path.defect);
            diagnostics.monodromy_mismatch = Some(a.monodromy_mismatch).filter(|v| v.is_finite());
            diagnostics.spectral_gap = Some(a.morse.gap);
            diagnostics.null_tol = Some(a.morse.null_tol);
            diagnostics.morse_grid = Some(a.morse.grid);
            diagnostics.crossings = Some(a.crossings);
            let residual = a.residual();
            let ok = residual == Some(0) && a.morse.null == 0;
            IndexReport {
                orbit_id: id,
                status: if ok { Status::Pass } else { Status::Fail },
                reason: (!ok).then(|| "index identity violated".to_string()),
                action: Some(orbit.action),
                sigma: Some(a.sigma),
                ind: Some(a.morse.ind),
                null: Some(a.morse.null),
                mu_cz: Some(a.mu_cz.to_string()),
                residual,
                diagnostics,
            }
        }
        Err(e) if e.is_degeneracy() => {
            let mut r = skipped(id, e.to_string());
            r.action = Some(orbit.action);
            r.diagnostics = diagnostics;
            r
        }
        Err(e) => IndexReport {
            orbit_id: id,
            status: Status::Fail,
            reason: Some(e.to_string()),
            action: Some(orbit.action),
            sigma: None,
            ind: None,
            null: None,
            mu_cz: None,
            residual: None,
            diagnostics,
        },
    }
}

/// Find orbits from the configured seeds and check `μ_CZ + Ind − σ = 0` on each.
///
/// Seeds that fail with a degeneracy become SKIPPED rows; other seed failures
/// are dropped when some orbit was found, and become SKIPPED rows otherwise.
pub fn verify_index_theorem(config: &RunConfig) -> Result<Vec<IndexReport>> {
    let (model, found, failures) = find_orbits(config)?;
    let pot = &config.potential;
    let mut reports: Vec<IndexReport> = found
        .par_iter()
        .map(|(id, orbit)| report_for(&model, pot, id.clone(), orbit, &config.solver))
        .collect();
    for (i, e) in failures {
        if e.is_degeneracy() || reports.is_empty() {
            reports.push(skipped(format!("seed-{i:04}"), e.to_string()));
        }
    }
    reports.sort_by(|a, b| a.orbit_id.cmp(&b.orbit_id));
    Ok(reports)
}

pub fn write_report(path: &Path, reports: &[IndexReport]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(reports)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone)]
pub enum Figure {
    Gamma1,
    Gamma2 { mu_hat: f64 },
    /// The first coordinate plane `{e₁, e_{n+1}}` of a path that leaves it invariant.
    OrbitPath(SymplecticPath),
}

fn plane_block(m: &Mat, n: usize) -> Mat {
    Mat::from_row_slice(2, 2, &[m[(0, 0)], m[(0, n)], m[(n, 0)], m[(n, n)]])
}

/// Rows `t,theta,u,v,det1m` for a path in `Sp(2)`.
pub fn figure_rows(figure: &Figure, steps: usize) -> Result<Vec<[f64; 5]>> {
    let path = match figure {
        Figure::Gamma1 => gamma1_path(steps),
        Figure::Gamma2 { mu_hat } => gamma2_path(*mu_hat, steps)?,
        Figure::OrbitPath(p) => {
            let n = p.n;
            let mut leak = 0.0_f64;
            let blocks: Vec<Mat> = p
                .psi
                .iter()
                .map(|m| {
                    for i in 0..2 * n {
                        for j in 0..2 * n {
                            let inside = (i == 0 || i == n) == (j == 0 || j == n);
                            if !inside {
                                leak = leak.max(m[(i, j)].abs());
                            }
                        }
                    }
                    plane_block(m, n)
                })
                .collect();
            if leak > 1e-8 {
                return Err(Error::Parameter(format!(
                    "path does not preserve the first coordinate plane (leak {leak:.3e})"
                )));
            }
            let mut q = crate::symplectic::closed_path(1, p.steps(), |_| Mat::identity(2, 2));
            q.psi = blocks;
            q
        }
    };
    let coords = unwrapped_coords(&path)?;
    Ok(path
        .times
        .iter()
        .zip(&path.psi)
        .zip(coords)
        .map(|((&t, m), (theta, u, v))| {
            let d = (Mat::identity(2, 2) - m).determinant();
            [t, theta, u, v, d]
        })
        .collect())
}

fn csv_field(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v}")
}

pub fn figure_csv(rows: &[[f64; 5]]) -> String {
    let mut out = String::from("t,theta,u,v,det1m\n");
    for r in rows {
        let fields: Vec<String> = r.iter().map(|&v| csv_field(v)).collect();
        let _ = writeln!(out, "{}", fields.join(","));
    }
    out
}

/// Write the figure CSV; returns the number of data rows (`steps + 1`).
pub fn emit_figure_data(figure: &Figure, steps: usize, out: &Path) -> Result<usize> {
    let rows = figure_rows(figure, steps)?;
    fs::write(out, figure_csv(&rows))?;
    Ok(rows.len())
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FlowReport {
    pub orbit_id: String,
    pub flow_a: i64,
    pub flow_b: i64,
    pub cz_start: i64,
    pub cz_end: i64,
    pub crossings_a: Vec<f64>,
    pub attempts: usize,
    /// `flow_a + flow_b = μ_CZ(end) − μ_CZ(start)`.
    pub consistent: bool,
}

/// Spectral flow of both proof families for every found orbit.
pub fn spectral_flow_reports(config: &RunConfig, mu_hat: Option<f64>) -> Result<Vec<FlowReport>> {
    let (model, found, _) = find_orbits(config)?;
    let pot = &config.potential;
    let params = &config.solver;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let seeds: Vec<u64> = found.iter().map(|_| rng.gen()).collect();
    found
        .iter()
        .zip(seeds)
        .map(|((id, orbit), seed)| {
            let frame = build_frame(&model, pot, orbit, None)?;
            let coeffs: Arc<dyn TwistedCoefficients> = Arc::new(frame);
            let lowest = crate::linalg::sym_eigenvalues(
                &crate::jacobi::assemble_a0(coeffs.as_ref(), params.flow_grid)?.matrix,
            )?[0];
            let depth = mu_hat.unwrap_or_else(|| (-2.0 * std::f64::consts::PI).min(lowest - 2.0));
            let flows = proof_family_flows(coeffs, depth, &params.flow_options(), seed)?;
            let cz = |fam: &crate::specflow::OperatorFamily, l: f64| -> Result<i64> {
                let path = family_endpoint_paths(fam, l, params.path_steps)?;
                cz_index(&path, &params.crossing_options())?
                    .to_integer()
                    .ok_or_else(|| Error::Numerics("half-integer index at an endpoint".into()))
            };
            let cz_start = cz(&flows.families.family_a, 0.0)?;
            let cz_end = cz(&flows.families.family_b, 1.0)?;
            let total = flows.flow_a.flow + flows.flow_b.flow;
            Ok(FlowReport {
                orbit_id: id.clone(),
                flow_a: flows.flow_a.flow,
                flow_b: flows.flow_b.flow,
                cz_start,
                cz_end,
                crossings_a: flows.flow_a.crossings.iter().map(|c| c.lambda).collect(),
                attempts: flows.attempts,
                consistent: total == cz_end - cz_start,
            })
        })
        .collect()
}

#[derive(Debug, Parser)]
#[command(name = "geodex", version, about = "Index computations for perturbed closed geodesics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PathKind {
    Gamma1,
    Gamma2,
    Exp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FigureKind {
    Gamma1,
    Gamma2,
    OrbitPath,
}

#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub path_steps: Option<usize>,
    #[arg(long)]
    pub orbit_steps: Option<usize>,
    #[arg(long)]
    pub morse_grid: Option<usize>,
    #[arg(long)]
    pub null_tol: Option<f64>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(v) = self.path_steps {
            cfg.solver.path_steps = v;
        }
        if let Some(v) = self.orbit_steps {
            cfg.solver.orbit_steps = v;
        }
        if let Some(v) = self.morse_grid {
            cfg.solver.morse_start_grid = v;
            cfg.solver.morse_max_grid = cfg.solver.morse_max_grid.max(v);
        }
        if self.null_tol.is_some() {
            cfg.solver.null_tol = self.null_tol;
        }
        if self.report.is_some() {
            cfg.outputs.report = self.report.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Locate periodic orbits from the configured seeds.
    FindOrbits(ConfigArgs),
    /// Compare Morse and Conley–Zehnder indices on every orbit.
    Verify(ConfigArgs),
    /// Conley–Zehnder index of a model path.
    CzPath {
        #[arg(long, value_enum)]
        kind: PathKind,
        #[arg(long, default_value_t = -std::f64::consts::PI * std::f64::consts::PI, allow_negative_numbers = true)]
        mu_hat: f64,
        /// Row-major symmetric matrix for `exp`, comma separated.
        #[arg(long, allow_negative_numbers = true)]
        matrix: Option<String>,
        #[arg(long, default_value_t = 1024)]
        steps: usize,
    },
    /// Spectral flow of the two homotopies for every orbit.
    SpectralFlow {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long, allow_negative_numbers = true)]
        mu_hat: Option<f64>,
    },
    /// Write `t,theta,u,v,det1m` rows for a path in Sp(2).
    EmitFigure {
        #[arg(long, value_enum)]
        which: FigureKind,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1024)]
        steps: usize,
        #[arg(long, default_value_t = -std::f64::consts::PI * std::f64::consts::PI, allow_negative_numbers = true)]
        mu_hat: f64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Index into the sorted orbit list.
        #[arg(long, default_value_t = 0)]
        orbit: usize,
    },
}

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICS: i32 = 3;

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Json(_) | Error::Parameter(_) => EXIT_CONFIG,
        _ => EXIT_NUMERICS,
    }
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(p) => fs::write(p, format!("{text}\n"))?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct OrbitSummary {
    orbit_id: String,
    position: Vec<f64>,
    momentum: Vec<f64>,
    deck_linear: Vec<f64>,
    deck_shift: Vec<f64>,
    action: f64,
    residual: f64,
    iterations: usize,
    nondegeneracy_gap: f64,
}

#[derive(Debug, Serialize)]
struct PathSummary {
    index: String,
    defect: f64,
    crossings: Vec<(f64, usize, i32)>,
}

fn parse_matrix(text: &str) -> Result<Mat> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Config(format!("matrix entry {s:?}: {e}"))))
        .collect::<Result<_>>()?;
    let d = (vals.len() as f64).sqrt().round() as usize;
    if d * d != vals.len() || d % 2 != 0 || d == 0 {
        return Err(Error::Config("matrix must be 2n x 2n".into()));
    }
    let m = Mat::from_row_slice(d, d, &vals);
    if crate::linalg::asymmetry(&m) > 1e-12 {
        return Err(Error::Config("matrix must be symmetric".into()));
    }
    Ok(m)
}

/// Execute a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("geodex: {e}");
            exit_code_for(&e)
        }
    }
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::FindOrbits(args) => {
            let cfg = args.load()?;
            let (_, found, failures) = find_orbits(&cfg)?;
            let summaries: Vec<OrbitSummary> = found
                .iter()
                .map(|(id, o)| {
                    let n = o.dim();
                    OrbitSummary {
                        orbit_id: id.clone(),
                        position: o.z0().iter().take(n).copied().collect(),
                        momentum: o.z0().iter().skip(n).copied().collect(),
                        deck_linear: o.deck.linear.iter().copied().collect(),
                        deck_shift: o.deck.shift.iter().copied().collect(),
                        action: o.action,
                        residual: o.residual,
                        iterations: o.iterations,
                        nondegeneracy_gap: o.monodromy.nondegeneracy_gap,
                    }
                })
                .collect();
            for (i, e) in &failures {
                eprintln!("seed {i}: {e}");
            }
            emit_json(&summaries, cfg.outputs.report.as_deref())?;
            Ok(EXIT_PASS)
        }
        Command::Verify(args) => {
            let cfg = args.load()?;
            let reports = verify_index_theorem(&cfg)?;
            match &cfg.outputs.report {
                Some(p) => write_report(p, &reports)?,
                None => emit_json(&reports, None)?,
            }
            if let Some(dir) = &cfg.outputs.orbit_paths {
                write_orbit_paths(&cfg, dir)?;
            }
            let failed = reports.iter().any(|r| r.status == Status::Fail);
            Ok(if failed { EXIT_FAIL } else { EXIT_PASS })
        }
        Command::CzPath {
            kind,
            mu_hat,
            matrix,
            steps,
        } => {
            let path = match kind {
                PathKind::Gamma1 => gamma1_path(steps),
                PathKind::Gamma2 => gamma2_path(mu_hat, steps)?,
                PathKind::Exp => {
                    let text = matrix.ok_or_else(|| Error::Config("--matrix is required for exp".into()))?;
                    matrix_exponential_path(&parse_matrix(&text)?, steps)
                }
            };
            let opts = CrossingOptions::default();
            let index = cz_index(&path, &opts)?;
            let crossings = find_crossings(&path, &opts)?
                .iter()
                .map(|c| (c.t, c.dim(), c.signature))
                .collect();
            emit_json(
                &PathSummary {
                    index: index.to_string(),
                    defect: path.defect,
                    crossings,
                },
                None,
            )?;
            Ok(EXIT_PASS)
        }
        Command::SpectralFlow { args, mu_hat } => {
            let cfg = args.load()?;
            let reports = spectral_flow_reports(&cfg, mu_hat)?;
            emit_json(&reports, cfg.outputs.report.as_deref())?;
            Ok(if reports.iter().all(|r| r.consistent) { EXIT_PASS } else { EXIT_FAIL })
        }
        Command::EmitFigure {
            which,
            out,
            steps,
            mu_hat,
            config,
            orbit,
        } => {
            let figure = match which {
                FigureKind::Gamma1 => Figure::Gamma1,
                FigureKind::Gamma2 => Figure::Gamma2 { mu_hat },
                FigureKind::OrbitPath => {
                    let path = config.ok_or_else(|| Error::Config("--config is required for orbit-path".into()))?;
                    let mut cfg = RunConfig::load(&path)?;
                    cfg.solver.path_steps = steps;
                    Figure::OrbitPath(orbit_path(&cfg, orbit)?)
                }
            };
            let rows = emit_figure_data(&figure, steps, &out)?;
            eprintln!("wrote {rows} rows to {}", out.display());
            Ok(EXIT_PASS)
        }
    }
}

/// The twisted path `Ψ_U` of the `index`-th orbit in sorted order.
pub fn orbit_path(cfg: &RunConfig, index: usize) -> Result<SymplecticPath> {
    let (model, found, _) = find_orbits(cfg)?;
    let (_, orbit) = found
        .get(index)
        .ok_or_else(|| Error::Config(format!("only {} orbits found", found.len())))?;
    Ok(analyze_orbit(&model, &cfg.potential, orbit, &cfg.solver)?.path)
}

fn write_orbit_paths(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (model, found, _) = find_orbits(cfg)?;
    for (k, (_, orbit)) in found.iter().enumerate() {
        let Ok(a) = analyze_orbit(&model, &cfg.potential, orbit, &cfg.solver) else {
            continue;
        };
        let path = a.path;
        if let Ok(rows) = figure_rows(&Figure::OrbitPath(path), cfg.solver.path_steps) {
            fs::write(dir.join(format!("orbit-{k:03}.csv")), figure_csv(&rows))?;
        }
    }
    Ok(())
}

/// Cap the global rayon pool from `GEODEX_THREADS`, if set.
pub fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GEODEX_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("GEODEX_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("GEODEX_THREADS must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}
