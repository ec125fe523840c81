//! Data-generating process for the simulation study, true risk factors,
//! and the bias/RMSE experiment driver.
//!
//! Returns follow `r_t = chol(H_t) z_t` with `H_t = D_t P_t D_t`, GARCH(1,1)
//! volatilities in `D_t` and the targeted correlation recursion
//!
//! ```text
//! R_t = (1 - a - b) S + a eps_{t-1} eps_{t-1}' + b R_{t-1}
//! ```
//!
//! with `S` an equicorrelation matrix. The innovations `z_t` have zero mean
//! and identity covariance.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal, StudentsT};

use crate::dcc::{self, DccParams};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, quad_form, to_correlation, Matrix, SymMatrix};
use crate::optimizer::MultistartConfig;
use crate::par;
use crate::scoring::RiskLevel;
use crate::stats;
use crate::timeseries::{PortfolioWeights, ReturnPanel};

/// Discarded steps before the first recorded observation.
pub const BURN_IN: usize = 500;
/// Default sample size for simulated true factors.
pub const DEFAULT_FACTOR_SAMPLE: usize = 100_000;
/// Share of failed replications above which a study cell is marked failed.
pub const MAX_FAILURE_SHARE: f64 = 0.10;

/// Innovation distribution, standardised to unit variance per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum Innovation {
    Normal,
    /// Multivariate Student t with `nu` degrees of freedom.
    Mvt { nu: f64 },
    /// Independent Student t marginals with per-component degrees of freedom.
    Nst { nu: Vec<f64> },
}

impl Innovation {
    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            Innovation::Normal => Ok(()),
            Innovation::Mvt { nu } => check_dof(*nu),
            Innovation::Nst { nu } => {
                if nu.len() != n {
                    return Err(Error::dim(n, nu.len()));
                }
                nu.iter().try_for_each(|v| check_dof(*v))
            }
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        match self {
            Innovation::Normal => {
                for z in out.iter_mut() {
                    *z = StandardNormal.sample(rng);
                }
            }
            Innovation::Mvt { nu } => {
                for z in out.iter_mut() {
                    *z = StandardNormal.sample(rng);
                }
                let w = ChiSquared::new(*nu).expect("validated dof").sample(rng);
                let s = ((nu - 2.0) / w).sqrt();
                out.iter_mut().for_each(|z| *z *= s);
            }
            Innovation::Nst { nu } => {
                for (z, v) in out.iter_mut().zip(nu) {
                    let t: f64 = StudentT::new(*v).expect("validated dof").sample(rng);
                    *z = t * ((v - 2.0) / v).sqrt();
                }
            }
        }
    }
}

impl fmt::Display for Innovation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Innovation::Normal => write!(f, "normal"),
            Innovation::Mvt { nu } => write!(f, "mvt{nu}"),
            Innovation::Nst { .. } => write!(f, "nst"),
        }
    }
}

fn check_dof(nu: f64) -> Result<()> {
    if nu > 2.0 && nu.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "degrees of freedom must exceed 2, got {nu}"
        )))
    }
}

/// GARCH(1,1) truth `h_t^2 = omega + alpha r_{t-1}^2 + beta h_{t-1}^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchSpec {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl GarchSpec {
    pub fn new(omega: f64, alpha: f64, beta: f64) -> Result<Self> {
        let g = GarchSpec { omega, alpha, beta };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.omega > 0.0 && self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta < 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!(
                "GARCH({}, {}, {}) needs omega > 0, alpha, beta >= 0, alpha + beta < 1",
                self.omega, self.alpha, self.beta
            )))
        }
    }

    pub fn unconditional_variance(&self) -> f64 {
        self.omega / (1.0 - self.alpha - self.beta)
    }
}

impl Default for GarchSpec {
    fn default() -> Self {
        GarchSpec {
            omega: 0.1,
            alpha: 0.1,
            beta: 0.8,
        }
    }
}

/// Full description of one simulated panel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n: usize,
    pub t_len: usize,
    pub a: f64,
    pub b: f64,
    /// Off-diagonal of the correlation target.
    pub rho: f64,
    /// One entry per asset.
    pub garch: Vec<GarchSpec>,
    pub dist: Innovation,
    pub seed: u64,
    /// Independent stream of the generator seeded by `seed`.
    #[serde(default)]
    pub stream: u64,
}

impl DgpSpec {
    /// The study design: `a = 0.12`, `b = 0.78`, `rho = 0.5`, GARCH(0.1, 0.1, 0.8).
    pub fn reference(n: usize, t_len: usize, dist: Innovation, seed: u64) -> Self {
        DgpSpec {
            n,
            t_len,
            a: 0.12,
            b: 0.78,
            rho: 0.5,
            garch: vec![GarchSpec::default(); n],
            dist,
            seed,
            stream: 0,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.stream = stream;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.t_len == 0 {
            return Err(Error::InvalidInput("n and T must be positive".into()));
        }
        if !(self.a >= 0.0 && self.b >= 0.0 && self.a + self.b < 1.0) {
            return Err(Error::InvalidInput(format!(
                "a = {}, b = {} violate a, b >= 0, a + b < 1",
                self.a, self.b
            )));
        }
        let lo = if self.n > 1 { -1.0 / (self.n as f64 - 1.0) } else { -1.0 };
        if !(self.rho > lo && self.rho < 1.0) {
            return Err(Error::InvalidInput(format!(
                "rho = {} outside ({lo}, 1)",
                self.rho
            )));
        }
        if self.garch.len() != self.n {
            return Err(Error::dim(self.n, self.garch.len()));
        }
        self.garch.iter().try_for_each(GarchSpec::validate)?;
        self.dist.validate(self.n)
    }

    pub fn target(&self) -> SymMatrix {
        SymMatrix::equicorrelation(self.n, self.rho)
    }
}

/// Step-by-step generator for a [`DgpSpec`].
pub struct DgpSimulator<'a> {
    spec: &'a DgpSpec,
    rng: ChaCha8Rng,
    target: SymMatrix,
    h2: Vec<f64>,
    r_mat: SymMatrix,
    r_prev: Vec<f64>,
    eps_prev: Vec<f64>,
    started: bool,
    z: Vec<f64>,
}

impl<'a> DgpSimulator<'a> {
    /// Start at the unconditional variances and `R = S`.
    pub fn new(spec: &'a DgpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(spec.stream);
        let target = spec.target();
        Ok(DgpSimulator {
            spec,
            rng,
            r_mat: target.clone(),
            target,
            h2: spec.garch.iter().map(GarchSpec::unconditional_variance).collect(),
            r_prev: vec![0.0; spec.n],
            eps_prev: vec![0.0; spec.n],
            started: false,
            z: vec![0.0; spec.n],
        })
    }

    fn advance(
        spec: &DgpSpec,
        target: &SymMatrix,
        r_prev: &[f64],
        eps_prev: &[f64],
        h2: &mut [f64],
        r_mat: &mut SymMatrix,
    ) {
        for i in 0..spec.n {
            let g = &spec.garch[i];
            h2[i] = g.omega + g.alpha * r_prev[i] * r_prev[i] + g.beta * h2[i];
        }
        let w = 1.0 - spec.a - spec.b;
        let target = target.packed();
        let packed = r_mat.packed_mut();
        let mut k = 0;
        for i in 0..spec.n {
            for j in 0..=i {
                packed[k] = w * target[k] + spec.a * eps_prev[i] * eps_prev[j] + spec.b * packed[k];
                k += 1;
            }
        }
    }

    fn covariance(h2: &[f64], r_mat: &SymMatrix) -> Result<(SymMatrix, Vec<f64>)> {
        let p = to_correlation(r_mat).map_err(|e| Error::Sim(e.to_string()))?;
        let h: Vec<f64> = h2.iter().map(|v| v.sqrt()).collect();
        Ok((p, h))
    }

    /// Draw the next return vector, returning it with its conditional
    /// covariance.
    pub fn step(&mut self) -> Result<(Vec<f64>, SymMatrix)> {
        if self.started {
            Self::advance(
                self.spec,
                &self.target,
                &self.r_prev,
                &self.eps_prev,
                &mut self.h2,
                &mut self.r_mat,
            );
        }
        self.started = true;
        let (p, h) = Self::covariance(&self.h2, &self.r_mat)?;
        let l = cholesky(&p).ok_or_else(|| Error::Sim("conditional correlation is not positive definite".into()))?;
        self.spec.dist.draw(&mut self.rng, &mut self.z);
        let u = l.mul_vec(&self.z);
        let r: Vec<f64> = u.iter().zip(&h).map(|(ui, hi)| ui * hi).collect();
        self.eps_prev = u;
        self.r_prev.clone_from(&r);
        let cov = p.scale_diag(&h)?;
        Ok((r, cov))
    }

    /// Conditional covariance of the next, not yet drawn, step.
    pub fn next_covariance(&self) -> Result<SymMatrix> {
        let mut h2 = self.h2.clone();
        let mut r_mat = self.r_mat.clone();
        if self.started {
            Self::advance(self.spec, &self.target, &self.r_prev, &self.eps_prev, &mut h2, &mut r_mat);
        }
        let (p, h) = Self::covariance(&h2, &r_mat)?;
        p.scale_diag(&h)
    }
}

/// A simulated panel with its true conditional covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPanel {
    pub panel: ReturnPanel,
    /// `H_t` for every recorded step.
    pub cov_path: Vec<SymMatrix>,
    /// `H_{T+1}`.
    pub next_cov: SymMatrix,
}

/// Simulate `spec.t_len` observations after [`BURN_IN`] discarded steps.
pub fn simulate_panel(spec: &DgpSpec) -> Result<SimulatedPanel> {
    let mut sim = DgpSimulator::new(spec)?;
    for _ in 0..BURN_IN {
        sim.step()?;
    }
    let mut values = Vec::with_capacity(spec.t_len * spec.n);
    let mut cov_path = Vec::with_capacity(spec.t_len);
    for _ in 0..spec.t_len {
        let (r, h) = sim.step()?;
        values.extend_from_slice(&r);
        cov_path.push(h);
    }
    let next_cov = sim.next_covariance()?;
    let panel = ReturnPanel::with_synthetic_index(Matrix::from_vec(spec.t_len, spec.n, values)?)?;
    Ok(SimulatedPanel {
        panel,
        cov_path,
        next_cov,
    })
}

/// True portfolio VaR and ES factors of the standardised portfolio return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrueFactors {
    pub q: f64,
    pub c: f64,
    pub gamma0: f64,
}

impl TrueFactors {
    pub fn from_qc(q: f64, c: f64) -> Result<Self> {
        if !(c < q && q < 0.0) {
            return Err(Error::Domain(format!("factors q = {q}, c = {c} need c < q < 0")));
        }
        Ok(TrueFactors {
            q,
            c,
            gamma0: (c * c / (q * q) - 1.0).ln(),
        })
    }

    pub fn q2(&self) -> f64 {
        self.q * self.q
    }
}

/// Analytic factors for normal and multivariate t innovations.
pub fn true_factors_spherical(dist: &Innovation, alpha: RiskLevel) -> Result<TrueFactors> {
    let a = alpha.value();
    match dist {
        Innovation::Normal => {
            let n = Normal::standard();
            let q = n.inverse_cdf(a);
            TrueFactors::from_qc(q, -n.pdf(q) / a)
        }
        Innovation::Mvt { nu } => {
            check_dof(*nu)?;
            let t = StudentsT::new(0.0, 1.0, *nu).map_err(|e| Error::InvalidInput(e.to_string()))?;
            let tq = t.inverse_cdf(a);
            let s = ((nu - 2.0) / nu).sqrt();
            let tail = -(nu + tq * tq) / (nu - 1.0) * t.pdf(tq) / a;
            TrueFactors::from_qc(s * tq, s * tail)
        }
        Innovation::Nst { .. } => Err(Error::InvalidInput(
            "non-spherical innovations have no analytic portfolio factors".into(),
        )),
    }
}

/// Empirical factors of `w'r_t / sqrt(w'H_t w)` over `t_sim` steps of the
/// process in `spec` (its `t_len` is ignored).
pub fn true_factors_simulated(
    spec: &DgpSpec,
    w: &PortfolioWeights,
    alpha: RiskLevel,
    t_sim: usize,
) -> Result<TrueFactors> {
    if w.len() != spec.n {
        return Err(Error::dim(spec.n, w.len()));
    }
    if t_sim == 0 {
        return Err(Error::InvalidInput("t_sim must be positive".into()));
    }
    let mut sim = DgpSimulator::new(spec)?;
    for _ in 0..BURN_IN {
        sim.step()?;
    }
    let mut z = Vec::with_capacity(t_sim);
    for _ in 0..t_sim {
        let (r, h) = sim.step()?;
        z.push(w.dot(&r) / quad_form(&h, w.as_slice())?.sqrt());
    }
    let (q, c) = stats::quantile_and_tail_mean(&z, alpha.value());
    TrueFactors::from_qc(q, c)
}

/// Degrees of freedom `nu_i ~ U[5, 15]` for the non-spherical design.
pub fn draw_nst_dofs(n: usize, seed: u64) -> Vec<f64> {
    log::info!("drawing nst degrees of freedom with seed {seed}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(5.0..15.0)).collect()
}

/// Distribution family of a study cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum StudyDist {
    Normal,
    Mvt { nu: f64 },
    /// Degrees of freedom drawn once per study by [`draw_nst_dofs`].
    Nst,
}

/// One `(distribution, T)` cell of the study grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    #[serde(flatten)]
    pub dist: StudyDist,
    pub t_len: usize,
}

/// Study design shared by all cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySpec {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub rho: f64,
    pub garch: GarchSpec,
    pub cells: Vec<StudyCell>,
    pub n_reps: usize,
    pub alpha: RiskLevel,
    pub fit: MultistartConfig,
    pub seed: u64,
    /// Sample size for simulated nst factors.
    pub factor_sample: usize,
}

impl StudySpec {
    /// Reference design for the given cells.
    pub fn reference(n: usize, cells: Vec<StudyCell>, n_reps: usize, seed: u64) -> Self {
        StudySpec {
            n,
            a: 0.12,
            b: 0.78,
            rho: 0.5,
            garch: GarchSpec::default(),
            cells,
            n_reps,
            alpha: RiskLevel::default(),
            fit: MultistartConfig::default(),
            seed,
            factor_sample: DEFAULT_FACTOR_SAMPLE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_reps == 0 {
            return Err(Error::InvalidInput("n_reps must be positive".into()));
        }
        if self.cells.is_empty() {
            return Err(Error::InvalidInput("study grid is empty".into()));
        }
        self.fit.validate()?;
        for c in &self.cells {
            self.dgp(c, &[], 0).validate()?;
            if c.t_len < dcc::MIN_FIT_LEN {
                return Err(Error::InvalidInput(format!(
                    "T = {} is shorter than {}",
                    c.t_len,
                    dcc::MIN_FIT_LEN
                )));
            }
        }
        Ok(())
    }

    fn dgp(&self, cell: &StudyCell, nst_nu: &[f64], stream: u64) -> DgpSpec {
        let dist = match cell.dist {
            StudyDist::Normal => Innovation::Normal,
            StudyDist::Mvt { nu } => Innovation::Mvt { nu },
            StudyDist::Nst => Innovation::Nst {
                nu: if nst_nu.is_empty() { vec![10.0; self.n] } else { nst_nu.to_vec() },
            },
        };
        DgpSpec {
            n: self.n,
            t_len: cell.t_len,
            a: self.a,
            b: self.b,
            rho: self.rho,
            garch: vec![self.garch; self.n],
            dist,
            seed: self.seed,
            stream,
        }
    }
}

/// Estimates and forecasts from one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub params: DccParams,
    pub var_fc: f64,
    pub es_fc: f64,
    pub true_var_fc: f64,
    pub true_es_fc: f64,
}

/// One row of the study table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub a: f64,
    pub b: f64,
    pub gamma0: f64,
    pub q2: f64,
    pub var_fc: f64,
    pub es_fc: f64,
}

impl StudyRow {
    fn nan() -> Self {
        StudyRow {
            a: f64::NAN,
            b: f64::NAN,
            gamma0: f64::NAN,
            q2: f64::NAN,
            var_fc: f64::NAN,
            es_fc: f64::NAN,
        }
    }
}

/// Results for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub cell: StudyCell,
    pub label: String,
    pub truth: TrueFactors,
    pub replications: Vec<Replication>,
    pub n_failed: usize,
    /// More than [`MAX_FAILURE_SHARE`] of the replications failed.
    pub failed: bool,
    pub true_row: StudyRow,
    pub mean_row: StudyRow,
    pub rmse_row: StudyRow,
}

impl CellReport {
    fn new(cell: StudyCell, label: String, truth: TrueFactors, results: Vec<Result<Replication>>, a: f64, b: f64) -> Self {
        let n_total = results.len();
        let replications: Vec<Replication> = results.into_iter().filter_map(|r| r.ok()).collect();
        let n_failed = n_total - replications.len();
        let failed = replications.is_empty() || n_failed as f64 > MAX_FAILURE_SHARE * n_total as f64;
        if failed {
            log::warn!("study cell {label}, T = {}: {n_failed} of {n_total} replications failed", cell.t_len);
            return CellReport {
                cell,
                label,
                truth,
                replications,
                n_failed,
                failed,
                true_row: StudyRow::nan(),
                mean_row: StudyRow::nan(),
                rmse_row: StudyRow::nan(),
            };
        }
        let mean = |f: &dyn Fn(&Replication) -> f64| stats::mean(&replications.iter().map(f).collect::<Vec<_>>());
        let rmse = |f: &dyn Fn(&Replication) -> f64| stats::rmse(replications.iter().map(f));
        let q2_true = truth.q2();
        let true_row = StudyRow {
            a,
            b,
            gamma0: truth.gamma0,
            q2: q2_true,
            var_fc: mean(&|r| r.true_var_fc),
            es_fc: mean(&|r| r.true_es_fc),
        };
        let mean_row = StudyRow {
            a: mean(&|r| r.params.a),
            b: mean(&|r| r.params.b),
            gamma0: mean(&|r| r.params.gamma0),
            q2: mean(&|r| r.params.q * r.params.q),
            var_fc: mean(&|r| r.var_fc),
            es_fc: mean(&|r| r.es_fc),
        };
        let rmse_row = StudyRow {
            a: rmse(&|r| r.params.a - a),
            b: rmse(&|r| r.params.b - b),
            gamma0: rmse(&|r| r.params.gamma0 - truth.gamma0),
            q2: rmse(&|r| r.params.q * r.params.q - q2_true),
            var_fc: rmse(&|r| r.var_fc - r.true_var_fc),
            es_fc: rmse(&|r| r.es_fc - r.true_es_fc),
        };
        CellReport {
            cell,
            label,
            truth,
            replications,
            n_failed,
            failed,
            true_row,
            mean_row,
            rmse_row,
        }
    }
}

/// Output of [`run_study`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub cells: Vec<CellReport>,
    /// Degrees of freedom used for nst cells.
    pub nst_nu: Vec<f64>,
}

impl StudyReport {
    /// Table with columns `dist,T,stat,a,b,gamma0,q2,var_fc,es_fc`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "dist,T,stat,a,b,gamma0,q2,var_fc,es_fc")?;
        for c in &self.cells {
            for (stat, row) in [("true", &c.true_row), ("mean", &c.mean_row), ("rmse", &c.rmse_row)] {
                writeln!(
                    out,
                    "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                    c.label, c.cell.t_len, stat, row.a, row.b, row.gamma0, row.q2, row.var_fc, row.es_fc
                )?;
            }
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn cell(&self, label: &str, t_len: usize) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.label == label && c.cell.t_len == t_len)
    }
}

fn fit_seed(seed: u64, task: u64) -> u64 {
    seed ^ task.wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Stream reserved for simulated factors.
const FACTOR_STREAM: u64 = u64::MAX;

fn replicate(
    study: &StudySpec,
    dgp: &DgpSpec,
    truth: &TrueFactors,
    task: u64,
) -> Result<Replication> {
    let sim = simulate_panel(dgp)?;
    let w = PortfolioWeights::equal(study.n);
    let fit = dcc::fit_dcc(&sim.panel, &w, study.alpha, &study.fit.with_seed(fit_seed(study.seed, task)))?;
    let fc = dcc::forecast_one_step(&fit)?;
    let sd = quad_form(&sim.next_cov, w.as_slice())?.sqrt();
    Ok(Replication {
        params: fit.params,
        var_fc: fc.var,
        es_fc: fc.es,
        true_var_fc: truth.q * sd,
        true_es_fc: truth.c * sd,
    })
}

/// Run every replication of every cell, in parallel across the flattened
/// `(cell, replication)` grid. Replication `k` of cell `j` uses stream
/// `j * 2^32 + k` of the study seed.
pub fn run_study(study: &StudySpec) -> Result<StudyReport> {
    study.validate()?;
    let nst_nu = if study.cells.iter().any(|c| c.dist == StudyDist::Nst) {
        draw_nst_dofs(study.n, study.seed)
    } else {
        Vec::new()
    };
    let truths: Vec<TrueFactors> = par::map_indexed(study.cells.len(), |j| {
        let cell = &study.cells[j];
        match cell.dist {
            StudyDist::Nst => {
                let spec = study.dgp(cell, &nst_nu, FACTOR_STREAM);
                true_factors_simulated(&spec, &PortfolioWeights::equal(study.n), study.alpha, study.factor_sample)
            }
            _ => true_factors_spherical(&study.dgp(cell, &nst_nu, 0).dist, study.alpha),
        }
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let reps = study.n_reps;
    let results = par::map_indexed(study.cells.len() * reps, |task| {
        let (j, k) = (task / reps, task % reps);
        let dgp = study.dgp(&study.cells[j], &nst_nu, ((j as u64) << 32) + k as u64);
        let out = replicate(study, &dgp, &truths[j], task as u64);
        if let Err(e) = &out {
            log::debug!("cell {j} replication {k} failed: {e}");
        }
        out
    });
    let mut results = results.into_iter();
    let cells = study
        .cells
        .iter()
        .zip(&truths)
        .map(|(cell, truth)| {
            let label = study.dgp(cell, &nst_nu, 0).dist.to_string();
            let chunk: Vec<_> = results.by_ref().take(reps).collect();
            CellReport::new(*cell, label, *truth, chunk, study.a, study.b)
        })
        .collect();
    Ok(StudyReport { cells, nst_nu })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn alpha() -> RiskLevel {
        RiskLevel::default()
    }

    #[test]
    fn normal_factors() {
        let f = true_factors_spherical(&Innovation::Normal, alpha()).unwrap();
        assert_abs_diff_eq!(f.q2(), 3.8415, epsilon = 1e-3);
        assert_abs_diff_eq!(f.gamma0, -0.8610, epsilon = 1e-3);
        assert_abs_diff_eq!(f.gamma0.exp(), f.c * f.c / f.q2() - 1.0, epsilon = 1e-12);
    }

    #[test]
    fn student_factors() {
        let f = true_factors_spherical(&Innovation::Mvt { nu: 10.0 }, alpha()).unwrap();
        assert_abs_diff_eq!(f.q2(), 3.9717, epsilon = 1e-3);
        assert_abs_diff_eq!(f.gamma0, -0.5097, epsilon = 1e-3);
        assert!(true_factors_spherical(&Innovation::Mvt { nu: 2.0 }, alpha()).is_err());
        assert!(true_factors_spherical(&Innovation::Nst { nu: vec![5.0] }, alpha()).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = DgpSpec::reference(3, 10, Innovation::Normal, 1);
        assert!(s.validate().is_ok());
        s.rho = -0.5;
        assert!(s.validate().is_err());
        s.rho = 0.5;
        s.a = 0.3;
        s.b = 0.7;
        assert!(s.validate().is_err());
        s.a = 0.1;
        s.dist = Innovation::Nst { nu: vec![5.0, 6.0] };
        assert!(s.validate().is_err());
        s.dist = Innovation::Mvt { nu: 1.5 };
        assert!(s.validate().is_err());
    }

    #[test]
    fn iid_oracle() {
        let spec = DgpSpec {
            n: 3,
            t_len: 10_000,
            a: 0.0,
            b: 0.0,
            rho: 0.0,
            garch: vec![GarchSpec::new(0.7, 0.0, 0.0).unwrap(); 3],
            dist: Innovation::Normal,
            seed: 11,
            stream: 0,
        };
        let sim = simulate_panel(&spec).unwrap();
        for i in 0..3 {
            let v = stats::variance(&sim.panel.column(i));
            assert!((v / 0.7 - 1.0).abs() < 0.05, "variance {v}");
        }
    }

    #[test]
    fn reproducible_and_streams_differ() {
        let spec = DgpSpec::reference(3, 50, Innovation::Mvt { nu: 8.0 }, 5);
        let a = simulate_panel(&spec).unwrap();
        let b = simulate_panel(&spec).unwrap();
        assert_eq!(a, b);
        let c = simulate_panel(&spec.clone().with_stream(1)).unwrap();
        assert_ne!(a.panel.values(), c.panel.values());
    }

    #[test]
    fn cholesky_root_reproduces_covariance() {
        let spec = DgpSpec::reference(4, 200, Innovation::Normal, 3);
        let sim = simulate_panel(&spec).unwrap();
        for h in &sim.cov_path {
            let l = cholesky(h).unwrap();
            assert!(l.reconstruct().max_abs_diff(h) < 1e-10);
        }
    }

    #[test]
    fn innovations_are_standardised() {
        let dists = [
            Innovation::Normal,
            Innovation::Mvt { nu: 10.0 },
            Innovation::Nst { nu: vec![5.0, 9.0, 14.0] },
        ];
        for d in dists {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let mut z = vec![0.0; 3];
            let mut cols = vec![Vec::new(); 3];
            for _ in 0..10_000 {
                d.draw(&mut rng, &mut z);
                for i in 0..3 {
                    cols[i].push(z[i]);
                }
            }
            for c in &cols {
                assert!(stats::mean(c).abs() < 0.05, "{d}");
                assert!((stats::variance(c) - 1.0).abs() < 0.1, "{d}");
            }
        }
    }

    #[test]
    fn simulated_factors_match_normal() {
        let spec = DgpSpec::reference(3, 1, Innovation::Normal, 9);
        let f = true_factors_simulated(&spec, &PortfolioWeights::equal(3), alpha(), DEFAULT_FACTOR_SAMPLE).unwrap();
        let exact = true_factors_spherical(&Innovation::Normal, alpha()).unwrap();
        assert_abs_diff_eq!(f.q, exact.q, epsilon = 0.03);
    }

    #[test]
    fn nst_dofs_in_range() {
        let nu = draw_nst_dofs(28, 4);
        assert_eq!(nu.len(), 28);
        assert!(nu.iter().all(|v| (5.0..15.0).contains(v)));
        assert_eq!(nu, draw_nst_dofs(28, 4));
    }
}
