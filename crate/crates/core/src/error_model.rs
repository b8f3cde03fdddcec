//! Linear mixed-effects model of absolute prediction errors: a random
//! intercept per patient, fixed effects with within/between decomposition of
//! the time-varying predictors, and Wald inference per coefficient.
//!
//! The model is
//!
//! ```text
//! y_ij = x_ij' beta + u_i + e_ij,   u_i ~ N(0, sigma_u^2),  e_ij ~ N(0, sigma_e^2)
//! ```
//!
//! Fitting profiles the fixed effects and the residual variance out of the
//! restricted likelihood, leaving a one-dimensional search over the variance
//! ratio `psi = sigma_u^2 / sigma_e^2`. The grouped random-intercept
//! structure makes every profile evaluation O(groups · p²) via per-group
//! sufficient statistics and the Sherman-Morrison form of `(I + psi J)^-1`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::transcript::{Gender, RaterId};

/// One error instance: the absolute prediction error for one
/// (interview, run) together with its predictors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorObservation {
    pub patient_id: String,
    /// Absolute prediction error for pipeline-built observations; the
    /// fitter itself accepts any real response.
    pub y: f64,
    pub visit: u32,
    pub tokens: u32,
    pub rater: RaterId,
    pub education: u32,
    pub gender: Gender,
    pub age: u32,
}

/// Fixed-effect design aligned with a response vector and patient grouping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub column_names: Vec<String>,
    /// Row-major n × p.
    pub rows: Vec<Vec<f64>>,
    pub y: Vec<f64>,
    /// Patient index per row, indexing into `group_ids`.
    pub groups: Vec<usize>,
    pub group_ids: Vec<String>,
    /// Per-column divisor already applied to the stored values (1.0 = raw).
    pub scaling: Vec<f64>,
}

impl DesignMatrix {
    pub fn n_obs(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }

    pub fn n_groups(&self) -> usize {
        self.group_ids.len()
    }

    /// Copy with the named columns removed.
    pub fn without_columns(&self, drop: &[String]) -> DesignMatrix {
        let keep: Vec<usize> = (0..self.n_cols())
            .filter(|&j| !drop.contains(&self.column_names[j]))
            .collect();
        DesignMatrix {
            column_names: keep.iter().map(|&j| self.column_names[j].clone()).collect(),
            rows: self
                .rows
                .iter()
                .map(|row| keep.iter().map(|&j| row[j]).collect())
                .collect(),
            y: self.y.clone(),
            groups: self.groups.clone(),
            group_ids: self.group_ids.clone(),
            scaling: keep.iter().map(|&j| self.scaling[j]).collect(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ErrorModelError {
    #[error("no observations to fit")]
    EmptyPatientGroup,
    #[error("need more observations ({n_obs}) than fixed-effect columns ({n_cols}) and at least 2 patients (have {n_groups})")]
    InsufficientData {
        n_obs: usize,
        n_cols: usize,
        n_groups: usize,
    },
    #[error("design is singular; collinear or empty columns: {}", columns.join(", "))]
    SingularDesign { columns: Vec<String> },
    #[error("variance-ratio search failed to converge within {iterations} iterations")]
    NonConvergence { iterations: usize },
}

/// Build the error-model design: within/between decomposition of visit
/// number and token count, dummy codes for rater (vs R1) and gender (vs
/// female), plus education and optionally age as patient-level predictors.
///
/// Within columns are `x_ij − mean_i(x)`; between columns are `mean_i(x)`.
pub fn decompose_within_between(
    observations: &[ErrorObservation],
    include_age: bool,
) -> Result<DesignMatrix, ErrorModelError> {
    if observations.is_empty() {
        return Err(ErrorModelError::EmptyPatientGroup);
    }
    let mut group_ids: Vec<String> = Vec::new();
    let mut index_of = std::collections::BTreeMap::new();
    let mut groups: Vec<usize> = Vec::with_capacity(observations.len());
    for obs in observations {
        let idx = *index_of.entry(obs.patient_id.clone()).or_insert_with(|| {
            group_ids.push(obs.patient_id.clone());
            group_ids.len() - 1
        });
        groups.push(idx);
    }

    // Patient means of the time-varying predictors.
    let mut visit_sum = vec![0.0; group_ids.len()];
    let mut token_sum = vec![0.0; group_ids.len()];
    let mut count = vec![0.0; group_ids.len()];
    for (obs, &g) in observations.iter().zip(&groups) {
        visit_sum[g] += f64::from(obs.visit);
        token_sum[g] += f64::from(obs.tokens);
        count[g] += 1.0;
    }
    let visit_mean: Vec<f64> = visit_sum.iter().zip(&count).map(|(s, c)| s / c).collect();
    let token_mean: Vec<f64> = token_sum.iter().zip(&count).map(|(s, c)| s / c).collect();

    let mut column_names = vec![
        "intercept".to_string(),
        "visit_within".to_string(),
        "tokens_within".to_string(),
        "rater_r2".to_string(),
        "rater_r3".to_string(),
        "visit_between".to_string(),
        "tokens_between".to_string(),
        "education".to_string(),
        "male".to_string(),
        "other_gender".to_string(),
    ];
    if include_age {
        column_names.push("age".to_string());
    }

    let mut rows = Vec::with_capacity(observations.len());
    let mut y = Vec::with_capacity(observations.len());
    for (obs, &g) in observations.iter().zip(&groups) {
        let mut row = vec![
            1.0,
            f64::from(obs.visit) - visit_mean[g],
            f64::from(obs.tokens) - token_mean[g],
            f64::from(u8::from(obs.rater == RaterId::R2)),
            f64::from(u8::from(obs.rater == RaterId::R3)),
            visit_mean[g],
            token_mean[g],
            f64::from(obs.education),
            f64::from(u8::from(obs.gender == Gender::Male)),
            f64::from(u8::from(obs.gender == Gender::Other)),
        ];
        if include_age {
            row.push(f64::from(obs.age));
        }
        rows.push(row);
        y.push(obs.y);
    }

    Ok(DesignMatrix {
        scaling: vec![1.0; column_names.len()],
        column_names,
        rows,
        y,
        groups,
        group_ids,
    })
}

/// Columns that are (numerically) zero or linear combinations of earlier
/// columns, by modified Gram-Schmidt with a relative tolerance.
pub fn detect_collinear_columns(design: &DesignMatrix) -> Vec<String> {
    let n = design.n_obs();
    let p = design.n_cols();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut flagged = Vec::new();
    for j in 0..p {
        let mut column = DVector::from_iterator(n, design.rows.iter().map(|row| row[j]));
        let original_norm = column.norm();
        if original_norm <= 1e-12 {
            flagged.push(design.column_names[j].clone());
            continue;
        }
        for q in &basis {
            let coefficient = q.dot(&column);
            column.axpy(-coefficient, q, 1.0);
        }
        let residual_norm = column.norm();
        if residual_norm <= 1e-8 * original_norm {
            flagged.push(design.column_names[j].clone());
        } else {
            basis.push(column / residual_norm);
        }
    }
    flagged
}

/// Drop degenerate columns, returning the pruned design and their names.
pub fn prune_degenerate_columns(design: &DesignMatrix) -> (DesignMatrix, Vec<String>) {
    let dropped = detect_collinear_columns(design);
    if dropped.is_empty() {
        (design.clone(), dropped)
    } else {
        (design.without_columns(&dropped), dropped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Restricted maximum likelihood (unbiased variance components).
    Reml,
    /// Plain maximum likelihood, for likelihood-ratio comparisons.
    Ml,
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub criterion: Criterion,
    /// Search bracket for psi = sigma_u^2 / sigma_e^2.
    pub psi_bracket: (f64, f64),
    pub grid_points: usize,
    pub max_iterations: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            criterion: Criterion::Reml,
            psi_bracket: (1e-8, 1e4),
            grid_points: 41,
            max_iterations: 500,
        }
    }
}

/// One fitted coefficient with Wald inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub wald_z: f64,
    pub p_value: f64,
}

/// A converged (or boundary) mixed-model fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixedModelFit {
    pub coefficients: Vec<Coefficient>,
    pub sigma_u2: f64,
    pub sigma_e2: f64,
    /// Variance ratio sigma_u^2 / sigma_e^2 at the optimum.
    pub psi: f64,
    /// Log restricted likelihood (or log likelihood under ML).
    pub log_likelihood: f64,
    pub criterion: Criterion,
    pub converged: bool,
    /// True when the optimum pinned psi at zero.
    pub boundary: bool,
    pub n_obs: usize,
    pub n_groups: usize,
}

impl MixedModelFit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// Predictors whose Wald p-value is strictly below `alpha`, with their
/// coefficients.
pub fn significant_effects(fit: &MixedModelFit, alpha: f64) -> Vec<(String, f64)> {
    fit.coefficients
        .iter()
        .filter(|c| c.p_value < alpha)
        .map(|c| (c.name.clone(), c.estimate))
        .collect()
}

/// Fit with REML and default search settings.
pub fn fit_reml(design: &DesignMatrix) -> Result<MixedModelFit, ErrorModelError> {
    fit_with(design, &FitOptions::default())
}

/// Fixed effects of the generalized-least-squares fit at a fixed psi
/// (psi = 0 reduces exactly to ordinary least squares).
pub fn gls_fixed_effects(design: &DesignMatrix, psi: f64) -> Result<Vec<f64>, ErrorModelError> {
    let profiler = Profiler::build(design, &FitOptions::default())?;
    let point = profiler.eval(psi)?;
    Ok(profiler.unscale_beta(&point.beta))
}

pub fn fit_with(
    design: &DesignMatrix,
    options: &FitOptions,
) -> Result<MixedModelFit, ErrorModelError> {
    let profiler = Profiler::build(design, options)?;
    let (lo, hi) = options.psi_bracket;
    let (ln_lo, ln_hi) = (lo.ln(), hi.ln());

    // Profile objective on a log-spaced grid, plus the exact psi = 0 limit.
    let at_zero = profiler.eval(0.0)?;
    let grid_n = options.grid_points.max(3);
    let mut grid: Vec<(f64, f64)> = Vec::with_capacity(grid_n);
    for i in 0..grid_n {
        let ln_psi = ln_lo + (ln_hi - ln_lo) * i as f64 / (grid_n - 1) as f64;
        let point = profiler.eval(ln_psi.exp())?;
        grid.push((ln_psi, point.objective));
    }
    let (argmin, _) = grid
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("grid is non-empty");

    let mut converged = true;
    let mut psi_hat = grid[argmin].0.exp();
    if argmin == 0 {
        // Objective increases away from the lower edge: boundary at zero.
        psi_hat = 0.0;
    } else if argmin == grid_n - 1 {
        // Still decreasing at the upper edge; report the edge, not converged.
        converged = false;
    } else {
        // Bisect the profile-score sign change inside the bracketing cells;
        // the derivative is analytic, so this pins the root far more tightly
        // than value-comparison search alone.
        let mut a = grid[argmin - 1].0;
        let mut b = grid[argmin + 1].0;
        let ga = profiler.dobjective(a.exp())?;
        let gb = profiler.dobjective(b.exp())?;
        if ga < 0.0 && gb > 0.0 {
            let mut iterations = 0;
            while b - a > 1e-13 {
                if iterations >= options.max_iterations {
                    return Err(ErrorModelError::NonConvergence {
                        iterations: options.max_iterations,
                    });
                }
                let mid = 0.5 * (a + b);
                if profiler.dobjective(mid.exp())? >= 0.0 {
                    b = mid;
                } else {
                    a = mid;
                }
                iterations += 1;
            }
            psi_hat = (0.5 * (a + b)).exp();
        } else {
            // Fall back to golden-section on the objective.
            psi_hat = golden_section(&profiler, a, b, options.max_iterations)?;
        }
    }

    // Settle the boundary-vs-interior decision on objective values.
    let (best, boundary) = if psi_hat == 0.0 {
        (at_zero, true)
    } else {
        let interior = profiler.eval(psi_hat)?;
        if at_zero.objective <= interior.objective {
            psi_hat = 0.0;
            (at_zero, true)
        } else {
            (interior, false)
        }
    };

    Ok(profiler.finish(psi_hat, best, converged, boundary))
}

fn golden_section(
    profiler: &Profiler,
    mut a: f64,
    mut b: f64,
    max_iterations: usize,
) -> Result<f64, ErrorModelError> {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = profiler.eval(c.exp())?.objective;
    let mut fd = profiler.eval(d.exp())?.objective;
    let mut iterations = 0;
    while (b - a).abs() > 1e-12 {
        if iterations >= max_iterations {
            // A meaningfully wide interval at the cap is a failure; a
            // nearly-closed one is good enough.
            if (b - a).abs() > 1e-6 {
                return Err(ErrorModelError::NonConvergence {
                    iterations: max_iterations,
                });
            }
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = profiler.eval(c.exp())?.objective;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = profiler.eval(d.exp())?.objective;
        }
        iterations += 1;
    }
    Ok((0.5 * (a + b)).exp())
}

/// Per-group sufficient statistics over the (internally rescaled) design.
struct GroupStats {
    n: f64,
    xtx: DMatrix<f64>,
    xt1: DVector<f64>,
    xty: DVector<f64>,
    yt1: f64,
    yty: f64,
}

struct ProfilePoint {
    beta: DVector<f64>,
    rss: f64,
    logdet_h: f64,
    logdet_m: f64,
    chol: Cholesky<f64, Dyn>,
    objective: f64,
}

struct Profiler {
    group_stats: Vec<GroupStats>,
    column_names: Vec<String>,
    /// Total divisor per column (internal conditioning times caller scaling).
    scale: Vec<f64>,
    n: usize,
    p: usize,
    /// n − p for REML, n for ML.
    df: f64,
    criterion: Criterion,
}

impl Profiler {
    fn build(design: &DesignMatrix, options: &FitOptions) -> Result<Profiler, ErrorModelError> {
        let n = design.n_obs();
        let p = design.n_cols();
        if n == 0 {
            return Err(ErrorModelError::EmptyPatientGroup);
        }
        if n <= p || design.n_groups() < 2 {
            return Err(ErrorModelError::InsufficientData {
                n_obs: n,
                n_cols: p,
                n_groups: design.n_groups(),
            });
        }
        let collinear = detect_collinear_columns(design);
        if !collinear.is_empty() {
            return Err(ErrorModelError::SingularDesign { columns: collinear });
        }

        // Rescale columns to unit RMS for conditioning; estimates are mapped
        // back to the caller's units at the end.
        let mut scale = vec![1.0; p];
        for (j, s) in scale.iter_mut().enumerate() {
            let ss: f64 = design.rows.iter().map(|row| row[j] * row[j]).sum();
            let rms = (ss / n as f64).sqrt();
            if rms > 1e-12 {
                *s = rms;
            }
        }

        let m = design.n_groups();
        let mut group_stats: Vec<GroupStats> = (0..m)
            .map(|_| GroupStats {
                n: 0.0,
                xtx: DMatrix::zeros(p, p),
                xt1: DVector::zeros(p),
                xty: DVector::zeros(p),
                yt1: 0.0,
                yty: 0.0,
            })
            .collect();
        let mut x_row = DVector::zeros(p);
        for (row, (&g, &yv)) in design.rows.iter().zip(design.groups.iter().zip(&design.y)) {
            for j in 0..p {
                x_row[j] = row[j] / scale[j];
            }
            let stats = &mut group_stats[g];
            stats.n += 1.0;
            stats.xtx.syger(1.0, &x_row, &x_row, 1.0);
            stats.xt1 += &x_row;
            stats.xty.axpy(yv, &x_row, 1.0);
            stats.yt1 += yv;
            stats.yty += yv * yv;
        }

        Ok(Profiler {
            group_stats,
            column_names: design.column_names.clone(),
            scale: scale
                .iter()
                .zip(&design.scaling)
                .map(|(internal, caller)| internal * caller)
                .collect(),
            n,
            p,
            df: match options.criterion {
                Criterion::Reml => (n - p) as f64,
                Criterion::Ml => n as f64,
            },
            criterion: options.criterion,
        })
    }

    fn eval(&self, psi: f64) -> Result<ProfilePoint, ErrorModelError> {
        let p = self.p;
        let mut m = DMatrix::zeros(p, p);
        let mut v = DVector::zeros(p);
        let mut q = 0.0;
        let mut logdet_h = 0.0;
        for stats in &self.group_stats {
            let c = psi / (1.0 + psi * stats.n);
            m += &stats.xtx;
            m.syger(-c, &stats.xt1, &stats.xt1, 1.0);
            v += &stats.xty;
            v.axpy(-c * stats.yt1, &stats.xt1, 1.0);
            q += stats.yty - c * stats.yt1 * stats.yt1;
            logdet_h += (1.0 + psi * stats.n).ln();
        }
        // syger touches only the lower triangle; mirror before factoring.
        m.fill_upper_triangle_with_lower_triangle();
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| ErrorModelError::SingularDesign {
                columns: self.column_names.clone(),
            })?;
        let logdet_m = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let beta = chol.solve(&v);
        let rss = (q - v.dot(&beta)).max(f64::MIN_POSITIVE);
        let mut objective = self.df * rss.ln() + logdet_h;
        if self.criterion == Criterion::Reml {
            objective += logdet_m;
        }
        Ok(ProfilePoint {
            beta,
            rss,
            logdet_h,
            logdet_m,
            chol,
            objective,
        })
    }

    /// Analytic derivative of the profile objective with respect to psi.
    fn dobjective(&self, psi: f64) -> Result<f64, ErrorModelError> {
        let point = self.eval(psi)?;
        let mut d_logdet_h = 0.0;
        let mut d_logdet_m = 0.0;
        let mut d_rss = 0.0;
        for stats in &self.group_stats {
            let denom = 1.0 + psi * stats.n;
            let c_prime = 1.0 / (denom * denom);
            d_logdet_h += stats.n / denom;
            let m_inv_s = point.chol.solve(&stats.xt1);
            d_logdet_m -= c_prime * stats.xt1.dot(&m_inv_s);
            let resid = stats.yt1 - stats.xt1.dot(&point.beta);
            d_rss -= c_prime * resid * resid;
        }
        let mut derivative = self.df * d_rss / point.rss + d_logdet_h;
        if self.criterion == Criterion::Reml {
            derivative += d_logdet_m;
        }
        Ok(derivative)
    }

    fn unscale_beta(&self, beta: &DVector<f64>) -> Vec<f64> {
        beta.iter().zip(&self.scale).map(|(b, s)| b / s).collect()
    }

    fn finish(
        &self,
        psi: f64,
        point: ProfilePoint,
        converged: bool,
        boundary: bool,
    ) -> MixedModelFit {
        let sigma_e2 = point.rss / self.df;
        let sigma_u2 = psi * sigma_e2;
        let covariance = point.chol.inverse() * sigma_e2;
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let coefficients = self
            .column_names
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let estimate = point.beta[j] / self.scale[j];
                let std_error = covariance[(j, j)].max(0.0).sqrt() / self.scale[j];
                let wald_z = if std_error > 0.0 {
                    estimate / std_error
                } else {
                    0.0
                };
                let p_value = 2.0 * normal.cdf(-wald_z.abs());
                Coefficient {
                    name: name.clone(),
                    estimate,
                    std_error,
                    wald_z,
                    p_value,
                }
            })
            .collect();

        // Map the scaled log|X'H^-1 X| back to raw units for the reported
        // (restricted) log-likelihood.
        let logdet_m_raw = point.logdet_m + 2.0 * self.scale.iter().map(|s| s.ln()).sum::<f64>();
        let ln_two_pi = std::f64::consts::TAU.ln();
        let minus_two_ll = match self.criterion {
            Criterion::Reml => {
                self.df * point.rss.ln() - self.df * self.df.ln()
                    + point.logdet_h
                    + logdet_m_raw
                    + self.df * (1.0 + ln_two_pi)
            }
            Criterion::Ml => {
                self.df * point.rss.ln() - self.df * self.df.ln()
                    + point.logdet_h
                    + self.df * (1.0 + ln_two_pi)
            }
        };

        MixedModelFit {
            coefficients,
            sigma_u2,
            sigma_e2,
            psi,
            log_likelihood: -0.5 * minus_two_ll,
            criterion: self.criterion,
            converged,
            boundary,
            n_obs: self.n,
            n_groups: self.group_stats.len(),
        }
    }
}
