//! Spectral flow of one-parameter families `A_λ = −∂² − B_λ − Q_λ`.
//!
//! The flow is computed twice: from the change of the negative count, resolved
//! into crossings by bisection and crossing operators, and from eigenvalue
//! branches tracked across the λ grid by eigenvector overlaps.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::framing::{assemble_su, ClosingRamp, TwistedCoefficients};
use crate::jacobi::{assemble_a0, assemble_operator, DiscretizedOperator, OperatorTag};
use crate::linalg::{sym_eigen, sym_eigenvalues, symmetrize, Mat};
use crate::symplectic::{fundamental_solution, SymplecticPath, DEFAULT_PATH_STEPS};

type CoeffFn = dyn Fn(f64, f64) -> (Mat, Mat) + Send + Sync;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    Generic,
    HomotopyA,
    HomotopyB,
}

/// `λ ↦ (Q_λ(t), P_λ(t))` over a closed interval, with fixed `σ`.
#[derive(Clone)]
pub struct OperatorFamily {
    pub n: usize,
    pub sigma: u8,
    pub range: (f64, f64),
    pub kind: FamilyKind,
    coeffs: Arc<CoeffFn>,
}

impl fmt::Debug for OperatorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OperatorFamily")
            .field("n", &self.n)
            .field("sigma", &self.sigma)
            .field("range", &self.range)
            .field("kind", &self.kind)
            .finish()
    }
}

impl OperatorFamily {
    pub fn new<F>(n: usize, sigma: u8, range: (f64, f64), f: F) -> Result<Self>
    where
        F: Fn(f64, f64) -> (Mat, Mat) + Send + Sync + 'static,
    {
        if !(range.0 < range.1) || !range.0.is_finite() || !range.1.is_finite() {
            return Err(Error::Parameter(format!("bad parameter interval {range:?}")));
        }
        if sigma > 1 || n == 0 {
            return Err(Error::Parameter(format!("bad family shape n = {n}, sigma = {sigma}")));
        }
        Ok(OperatorFamily {
            n,
            sigma,
            range,
            kind: FamilyKind::Generic,
            coeffs: Arc::new(f),
        })
    }

    pub fn with_kind(mut self, kind: FamilyKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn coefficients(&self, lambda: f64, t: f64) -> (Mat, Mat) {
        (self.coeffs)(lambda, t)
    }

    pub fn slice(&self, lambda: f64) -> FamilySlice {
        FamilySlice {
            family: self.clone(),
            lambda,
        }
    }

    pub fn assemble(&self, lambda: f64, grid: usize) -> Result<DiscretizedOperator> {
        let tag = match self.kind {
            FamilyKind::Generic => OperatorTag::Family(lambda),
            FamilyKind::HomotopyA => OperatorTag::HomotopyA(lambda),
            FamilyKind::HomotopyB => OperatorTag::HomotopyB(lambda),
        };
        assemble_operator(&self.slice(lambda), grid, tag)
    }

    /// Check symmetry, skewness and the twisted boundary relations on a sample grid.
    pub fn check(&self, lambda_samples: usize, t_samples: usize) -> Result<()> {
        let e = crate::linalg::e_sigma(self.n, self.sigma);
        let (a, b) = self.range;
        for i in 0..=lambda_samples {
            let lambda = a + (b - a) * i as f64 / lambda_samples as f64;
            for k in 0..=t_samples {
                let (q, p) = self.coefficients(lambda, k as f64 / t_samples as f64);
                let sq = (&q - q.transpose()).amax();
                let sp = (&p + p.transpose()).amax();
                if sq > 1e-10 || sp > 1e-10 {
                    return Err(Error::Assembly(format!(
                        "at λ = {lambda}: Q asymmetric by {sq:e}, P not skew by {sp:e}"
                    )));
                }
            }
            let (q0, p0) = self.coefficients(lambda, 0.0);
            let (q1, p1) = self.coefficients(lambda, 1.0);
            let bq = (&q1 - &e * q0 * &e).amax();
            let bp = (&p1 - &e * p0 * &e).amax();
            if bq > 1e-8 || bp > 1e-8 {
                return Err(Error::Assembly(format!(
                    "at λ = {lambda}: boundary relation violated by {:e}",
                    bq.max(bp)
                )));
            }
        }
        Ok(())
    }
}

/// One member `A_λ` of a family, as coefficients for the assembler and the path builder.
#[derive(Debug, Clone)]
pub struct FamilySlice {
    family: OperatorFamily,
    lambda: f64,
}

impl TwistedCoefficients for FamilySlice {
    fn n(&self) -> usize {
        self.family.n
    }

    fn sigma(&self) -> u8 {
        self.family.sigma
    }

    fn q_at(&self, t: f64) -> Mat {
        self.family.coefficients(self.lambda, t).0
    }

    fn p_at(&self, t: f64) -> Mat {
        self.family.coefficients(self.lambda, t).1
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlowOptions {
    pub lambda_steps: usize,
    pub grid: usize,
    pub bisect_tol: f64,
    /// Number of tracked eigenvalues; defaults to `2n + 6`.
    pub window: Option<usize>,
    pub null_tol: Option<f64>,
    /// Maximal number of interval halvings when overlaps are ambiguous.
    pub max_refine: usize,
    /// Step of the central λ-difference, relative to the interval length.
    pub diff_step: f64,
}

impl Default for FlowOptions {
    fn default() -> Self {
        FlowOptions {
            lambda_steps: 64,
            grid: 128,
            bisect_tol: 1e-8,
            window: None,
            null_tol: None,
            max_refine: 10,
            diff_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowCrossing {
    pub lambda: f64,
    pub kernel_dim: usize,
    pub signature: i64,
    /// Eigenvalues of the crossing operator on the numerical kernel.
    pub form: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenTrace {
    pub lambdas: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SpectralFlowResult {
    pub flow: i64,
    pub crossings: Vec<FlowCrossing>,
    pub traces: Vec<EigenTrace>,
    /// Net count of sign changes along the tracked branches.
    pub trace_flow: i64,
    /// Smallest `|eigenvalue|` at the two ends.
    pub endpoint_gaps: (f64, f64),
    pub null_tol: f64,
    /// λ samples used for tracking, after refinement.
    pub samples: usize,
}

impl SpectralFlowResult {
    pub fn crossing_sum(&self) -> i64 {
        self.crossings.iter().map(|c| c.signature).sum()
    }
}

struct Sample {
    lambda: f64,
    values: Vec<f64>,
    vectors: Mat,
    neg: usize,
    min_abs: f64,
}

fn sample_at(lambda: f64, m: &Mat, window: usize) -> Result<Sample> {
    let (vals, vecs) = sym_eigen(m)?;
    let dim = vals.len();
    let zero = vals.iter().position(|&v| v >= 0.0).unwrap_or(dim);
    let (mut lo, mut hi) = (zero, zero);
    while hi - lo < window.min(dim) {
        let take_low = match (lo > 0, hi < dim) {
            (true, true) => vals[lo - 1].abs() <= vals[hi].abs(),
            (true, false) => true,
            _ => false,
        };
        if take_low {
            lo -= 1;
        } else {
            hi += 1;
        }
    }
    Ok(Sample {
        lambda,
        values: vals.iter().skip(lo).take(hi - lo).copied().collect(),
        vectors: vecs.columns(lo, hi - lo).into_owned(),
        neg: zero,
        min_abs: vals.iter().fold(f64::INFINITY, |a, v| a.min(v.abs())),
    })
}

fn negative_count(m: &Mat) -> Result<usize> {
    Ok(sym_eigenvalues(m)?.iter().filter(|&&v| v < 0.0).count())
}

/// Match window `a` to window `b`. `None` signals an ambiguous step.
fn match_windows(a: &Sample, b: &Sample) -> Option<Vec<Option<usize>>> {
    let overlap = a.vectors.transpose() * &b.vectors;
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (j, &v) in b.values.iter().enumerate() {
        match clusters.last_mut() {
            Some(c) if (v - b.values[c[c.len() - 1]]).abs() <= 1e-6 * (1.0 + v.abs()) => c.push(j),
            _ => clusters.push(vec![j]),
        }
    }
    let edge = b
        .values
        .first()
        .zip(b.values.last())
        .map(|(x, y)| 0.5 * x.abs().min(y.abs()))
        .unwrap_or(0.0);
    let whole = a.vectors.nrows() == a.values.len();
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); clusters.len()];
    for i in 0..a.values.len() {
        let (best, weight) = clusters
            .iter()
            .enumerate()
            .map(|(c, members)| (c, members.iter().map(|&j| overlap[(i, j)].powi(2)).sum::<f64>()))
            .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if weight >= 0.25 {
            chosen[best].push(i);
        } else if whole || a.values[i].abs() < edge {
            return None;
        }
    }
    let mut out = vec![None; a.values.len()];
    for (members, picked) in clusters.iter().zip(&chosen) {
        if picked.len() > members.len() {
            return None;
        }
        for (&i, &j) in picked.iter().zip(members) {
            out[i] = Some(j);
        }
    }
    Some(out)
}

fn row_sum_norm(m: &Mat) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Spectral flow of a family of symmetric matrices `λ ↦ f(λ)` on `range`.
///
/// Counts eigenvalues moving from negative to positive as λ increases.
pub fn spectral_flow_matrices<F>(
    range: (f64, f64),
    opts: &FlowOptions,
    null_tol: f64,
    window: usize,
    f: F,
) -> Result<SpectralFlowResult>
where
    F: Fn(f64) -> Result<Mat> + Sync,
{
    let (a, b) = range;
    if !(a < b) || opts.lambda_steps == 0 || null_tol <= 0.0 {
        return Err(Error::Parameter("bad spectral flow parameters".into()));
    }
    let steps = opts.lambda_steps;
    let lambdas: Vec<f64> = (0..=steps)
        .map(|k| if k == steps { b } else { a + (b - a) * k as f64 / steps as f64 })
        .collect();
    let mut samples: Vec<Sample> = lambdas
        .par_iter()
        .map(|&l| sample_at(l, &f(l)?, window))
        .collect::<Result<_>>()?;

    let gaps = (samples[0].min_abs, samples[steps].min_abs);
    if gaps.0 <= null_tol || gaps.1 <= null_tol {
        return Err(Error::Degenerate(format!(
            "endpoint operator not injective: gaps {:.3e}, {:.3e} against tolerance {null_tol:.3e}",
            gaps.0, gaps.1
        )));
    }
    let flow = samples[0].neg as i64 - samples[steps].neg as i64;

    // Crossings: bisection on the negative count, then the crossing operator.
    let mut leaves = Vec::new();
    let intervals: Vec<(f64, usize, f64, usize)> = samples
        .windows(2)
        .filter(|w| w[0].neg != w[1].neg)
        .map(|w| (w[0].lambda, w[0].neg, w[1].lambda, w[1].neg))
        .collect();
    let located: Vec<Vec<(f64, usize, f64, usize)>> = intervals
        .par_iter()
        .map(|&(l, nl, r, nr)| {
            let mut out = Vec::new();
            bisect(&f, l, nl, r, nr, opts.bisect_tol, &mut out)?;
            Ok(out)
        })
        .collect::<Result<_>>()?;
    for v in located {
        leaves.extend(v);
    }
    let delta = opts.diff_step * (b - a);
    let crossings: Vec<FlowCrossing> = leaves
        .par_iter()
        .map(|&(l, nl, r, nr)| crossing_operator(&f, l, nl, r, nr, delta, null_tol))
        .collect::<Result<_>>()?;

    // Branch tracking.
    let finest = (b - a) / steps as f64 / f64::powi(2.0, opts.max_refine as i32);
    let mut matches: Vec<Vec<Option<usize>>> = Vec::new();
    let mut k = 0;
    while k + 1 < samples.len() {
        match match_windows(&samples[k], &samples[k + 1]) {
            Some(m) => {
                matches.push(m);
                k += 1;
            }
            None => {
                let (l, r) = (samples[k].lambda, samples[k + 1].lambda);
                if r - l < finest {
                    return Err(Error::Resolution(format!(
                        "eigenvalue branches cannot be matched on [{l}, {r}]"
                    )));
                }
                let mid = 0.5 * (l + r);
                samples.insert(k + 1, sample_at(mid, &f(mid)?, window)?);
            }
        }
    }
    let mut traces: Vec<EigenTrace> = samples[0]
        .values
        .iter()
        .map(|&v| EigenTrace {
            lambdas: vec![samples[0].lambda],
            values: vec![v],
        })
        .collect();
    let mut active: Vec<usize> = (0..traces.len()).collect();
    let mut trace_flow = 0_i64;
    for (k, m) in matches.iter().enumerate() {
        let next = &samples[k + 1];
        let mut next_active = vec![usize::MAX; next.values.len()];
        for (i, j) in m.iter().enumerate() {
            if let Some(j) = *j {
                let id = active[i];
                let (from, to) = (samples[k].values[i], next.values[j]);
                if from < 0.0 && to >= 0.0 {
                    trace_flow += 1;
                } else if from >= 0.0 && to < 0.0 {
                    trace_flow -= 1;
                }
                traces[id].lambdas.push(next.lambda);
                traces[id].values.push(to);
                next_active[j] = id;
            }
        }
        for (j, slot) in next_active.iter_mut().enumerate() {
            if *slot == usize::MAX {
                *slot = traces.len();
                traces.push(EigenTrace {
                    lambdas: vec![next.lambda],
                    values: vec![next.values[j]],
                });
            }
        }
        active = next_active;
    }

    let result = SpectralFlowResult {
        flow,
        crossings,
        traces,
        trace_flow,
        endpoint_gaps: gaps,
        null_tol,
        samples: samples.len(),
    };
    if result.crossing_sum() != flow {
        return Err(Error::Resolution(format!(
            "crossing signatures sum to {} but the negative count changes by {flow}",
            result.crossing_sum()
        )));
    }
    if trace_flow != flow {
        return Err(Error::Resolution(format!(
            "tracked branches give flow {trace_flow}, negative count gives {flow}"
        )));
    }
    Ok(result)
}

fn bisect<F>(
    f: &F,
    l: f64,
    nl: usize,
    r: f64,
    nr: usize,
    tol: f64,
    out: &mut Vec<(f64, usize, f64, usize)>,
) -> Result<()>
where
    F: Fn(f64) -> Result<Mat>,
{
    if nl == nr {
        return Ok(());
    }
    if r - l <= tol {
        out.push((l, nl, r, nr));
        return Ok(());
    }
    let m = 0.5 * (l + r);
    let nm = negative_count(&f(m)?)?;
    bisect(f, l, nl, m, nm, tol, out)?;
    bisect(f, m, nm, r, nr, tol, out)
}

fn crossing_operator<F>(f: &F, l: f64, nl: usize, r: f64, nr: usize, delta: f64, null_tol: f64) -> Result<FlowCrossing>
where
    F: Fn(f64) -> Result<Mat>,
{
    let lambda = 0.5 * (l + r);
    let derivative = symmetrize(&((f(lambda + delta)? - f(lambda - delta)?) / (2.0 * delta)));
    let norm = row_sum_norm(&derivative);
    let (vals, vecs) = sym_eigen(&f(lambda)?)?;
    let ker_tol = 10.0 * (r - l) * norm + null_tol;
    let cols: Vec<usize> = (0..vals.len()).filter(|&i| vals[i].abs() <= ker_tol).collect();
    let expected = nl as i64 - nr as i64;
    if cols.len() < expected.unsigned_abs() as usize {
        return Err(Error::Resolution(format!(
            "kernel at λ = {lambda} has dimension {} but the count changes by {expected}",
            cols.len()
        )));
    }
    let kernel = vecs.select_columns(&cols);
    let form = sym_eigenvalues(&symmetrize(&(kernel.transpose() * &derivative * &kernel)))?;
    let form_tol = 1e-6 * (1.0 + norm);
    if let Some(bad) = form.iter().find(|v| v.abs() <= form_tol) {
        return Err(Error::Irregular {
            at: lambda,
            detail: format!("crossing operator eigenvalue {bad:.3e} within {form_tol:.3e}"),
        });
    }
    let signature = form.iter().map(|&v| if v > 0.0 { 1 } else { -1 }).sum::<i64>();
    if signature != expected {
        return Err(Error::Irregular {
            at: lambda,
            detail: format!("crossing operator signature {signature}, count change {expected}"),
        });
    }
    Ok(FlowCrossing {
        lambda,
        kernel_dim: cols.len(),
        signature,
        form: form.iter().copied().collect(),
    })
}

/// Spectral flow of a family of twisted operators, discretized on `opts.grid` points.
pub fn spectral_flow(family: &OperatorFamily, opts: &FlowOptions) -> Result<SpectralFlowResult> {
    let (a, b) = family.range;
    let null_tol = match opts.null_tol {
        Some(t) => t,
        None => {
            let ea = family.assemble(a, opts.grid)?;
            let eb = family.assemble(b, opts.grid)?;
            ea.default_null_tol().max(eb.default_null_tol())
        }
    };
    let window = opts.window.unwrap_or(2 * family.n + 6);
    spectral_flow_matrices(family.range, opts, null_tol, window, |l| {
        Ok(family.assemble(l, opts.grid)?.matrix)
    })
}

/// Fundamental solution `Ψ_{λ,U}` of the twisted generator of `A_λ`.
pub fn family_endpoint_paths(family: &OperatorFamily, lambda: f64, steps: usize) -> Result<SymplecticPath> {
    let (_, su) = assemble_su(Arc::new(family.slice(lambda)), 1);
    fundamental_solution(&su, steps)
}

/// The decreasing cut-off `β(λ) = μ̂·ramp(λ)`, flat near both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CutOff {
    pub mu_hat: f64,
    pub ramp: ClosingRamp,
}

impl CutOff {
    pub fn value(&self, lambda: f64) -> f64 {
        self.mu_hat * self.ramp.value(lambda)
    }

    pub fn derivative(&self, lambda: f64) -> f64 {
        self.mu_hat * self.ramp.derivative(lambda)
    }
}

/// The two homotopies joining `A⁰` to a positive operator and then removing `P`.
#[derive(Debug, Clone)]
pub struct ProofFamilies {
    /// `Q_λ = (1 − λ)Q + β(λ)`, `P` fixed.
    pub family_a: OperatorFamily,
    /// `Q = β(1)`, `P_λ = (1 − λ)P`.
    pub family_b: OperatorFamily,
    pub beta: CutOff,
    /// Smallest eigenvalue of the discretized `A⁰`.
    pub a0_lowest: f64,
}

pub fn build_proof_families(
    coeffs: Arc<dyn TwistedCoefficients>,
    mu_hat: f64,
    grid: usize,
) -> Result<ProofFamilies> {
    let lowest = sym_eigenvalues(&assemble_a0(coeffs.as_ref(), grid)?.matrix)?[0];
    if !(mu_hat < -PI) || !(mu_hat < lowest) {
        return Err(Error::Parameter(format!(
            "cut-off depth {mu_hat} must lie below both -π and the lowest eigenvalue {lowest:.6}"
        )));
    }
    Ok(with_cutoff(
        coeffs,
        CutOff {
            mu_hat,
            ramp: ClosingRamp::default(),
        },
        lowest,
    ))
}

fn with_cutoff(coeffs: Arc<dyn TwistedCoefficients>, beta: CutOff, lowest: f64) -> ProofFamilies {
    let n = coeffs.n();
    let sigma = coeffs.sigma();
    let id = Mat::identity(n, n);
    let (c, i) = (coeffs.clone(), id.clone());
    let family_a = OperatorFamily {
        n,
        sigma,
        range: (0.0, 1.0),
        kind: FamilyKind::HomotopyA,
        coeffs: Arc::new(move |l, t| (c.q_at(t) * (1.0 - l) + &i * beta.value(l), c.p_at(t))),
    };
    let end = beta.value(1.0);
    let family_b = OperatorFamily {
        n,
        sigma,
        range: (0.0, 1.0),
        kind: FamilyKind::HomotopyB,
        coeffs: Arc::new(move |l, t| (&id * end, coeffs.p_at(t) * (1.0 - l))),
    };
    ProofFamilies {
        family_a,
        family_b,
        beta,
        a0_lowest: lowest,
    }
}

#[derive(Debug, Clone)]
pub struct ProofFlows {
    pub families: ProofFamilies,
    pub flow_a: SpectralFlowResult,
    pub flow_b: SpectralFlowResult,
    pub attempts: usize,
}

pub const MAX_CUTOFF_ATTEMPTS: usize = 5;

/// Flows of both proof families. If a crossing of the first family is irregular or
/// has `β′(λ_i)` in the spectrum of `Q(1)`, the cut-off is rescaled by `1 + 10⁻³·r`
/// with seeded `r ∈ [0, 1)` and the computation repeated.
pub fn proof_family_flows(
    coeffs: Arc<dyn TwistedCoefficients>,
    mu_hat: f64,
    opts: &FlowOptions,
    seed: u64,
) -> Result<ProofFlows> {
    let base = build_proof_families(coeffs.clone(), mu_hat, opts.grid)?;
    let q1 = sym_eigenvalues(&coeffs.q_at(1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last_err = None;
    for attempt in 0..MAX_CUTOFF_ATTEMPTS {
        let scale = if attempt == 0 { 1.0 } else { 1.0 + 1e-3 * rng.gen::<f64>() };
        let beta = CutOff {
            mu_hat: mu_hat * scale,
            ramp: base.beta.ramp,
        };
        let families = with_cutoff(coeffs.clone(), beta, base.a0_lowest);
        let flow_a = match spectral_flow(&families.family_a, opts) {
            Ok(r) => r,
            Err(e @ Error::Irregular { .. }) => {
                last_err = Some(e);
                continue;
            }
            Err(e) => return Err(e),
        };
        let collision = flow_a.crossings.iter().find(|c| {
            let slope = beta.derivative(c.lambda);
            q1.iter().any(|&q| (slope - q).abs() <= 1e-6 * (1.0 + q.abs()))
        });
        if let Some(c) = collision {
            last_err = Some(Error::Irregular {
                at: c.lambda,
                detail: "cut-off slope lies in the spectrum of Q(1)".into(),
            });
            continue;
        }
        let flow_b = spectral_flow(&families.family_b, opts)?;
        return Ok(ProofFlows {
            families,
            flow_a,
            flow_b,
            attempts: attempt + 1,
        });
    }
    Err(last_err.unwrap_or_else(|| Error::Resolution("cut-off adjustment failed".into())))
}

/// Default path resolution for endpoint paths.
pub const ENDPOINT_STEPS: usize = DEFAULT_PATH_STEPS;
