//! Monte Carlo adjudication of the closed forms.
//!
//! Two checks are provided. [`verify_equivalence`] estimates the averaged
//! loss `E‖y − (X + Δ)β‖²` by sampling `Δ` and compares it against the ridge
//! objective `‖y − Xβ‖² + λ‖β‖²`. [`audit_moments`] estimates the first and
//! second moments and the volume of a set and compares them with both the
//! published and the derived constants.

use nalgebra::DVector;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::{PenaltyMode, SetKind, UncertaintySet};
use crate::regression::{fit_aur, fit_ols, RegressionProblem};
use crate::rng::{derive_seed, seeded};
use crate::sampling::{
    hit_and_run, rejection_sample, PerturbationBatch, SamplerConfig, SamplingMethod, REJECTION_MAX_DIM,
};
use crate::stats::{BatchMeans, RunningStats};
use crate::{Error, Result};

/// Agreement gate in standard errors.
pub const SIGMA_GATE: f64 = 3.0;

/// Relative floor of the equivalence gate.
pub const RELATIVE_FLOOR: f64 = 0.01;

/// Minimum sample count for [`verify_equivalence`].
pub const MIN_EQUIVALENCE_SAMPLES: usize = 10_000;

/// Rejection sampling is used for moment audits only when the expected
/// acceptance rate is at least this large.
const MIN_REJECTION_ACCEPTANCE: f64 = 2e-4;

/// Samples per parallel chunk in [`mc_average_loss`].
const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Agree,
    Disagree,
    Inconclusive,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Agree => "agree",
            Verdict::Disagree => "DISAGREE",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

/// Mean and standard error of `‖y − (X + Δ)β‖²` over the batch.
///
/// Chunks are reduced in parallel and merged in index order, so the result
/// is independent of scheduling.
pub fn mc_average_loss(
    problem: &RegressionProblem,
    beta: &DVector<f64>,
    set: &UncertaintySet,
    batch: &PerturbationBatch,
) -> Result<(f64, f64)> {
    if batch.is_empty() {
        return Err(Error::Config("cannot average over an empty batch".into()));
    }
    if batch.set() != set {
        return Err(Error::Config(format!(
            "batch was drawn from {}, not {set}",
            batch.set()
        )));
    }
    let (n, k) = (problem.n(), problem.k());
    if set.n() != n || set.k() != k || beta.len() != k {
        return Err(Error::Dimension {
            expected: format!("{n}x{k} problem, set and beta of length {k}"),
            got: format!("set {}x{}, beta of length {}", set.n(), set.k(), beta.len()),
        });
    }
    let base = problem.residual(beta);
    let beta = beta.as_slice();
    let loss = |delta: &[f64]| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let row = &delta[i * k..(i + 1) * k];
            let shift: f64 = row.iter().zip(beta).map(|(d, b)| d * b).sum();
            let r = base[i] - shift;
            total += r * r;
        }
        total
    };
    let partials: Vec<RunningStats> = (0..batch.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map(|idx| idx.iter().map(|&i| loss(batch.sample(i))).collect())
        .collect();
    let mut total = RunningStats::new();
    for part in &partials {
        total.merge(part);
    }
    Ok((total.mean(), total.std_error()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    /// Least-squares solution.
    Ols,
    /// Ridge solution with the audited penalty.
    Aur,
    /// Seeded standard normal vector.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub set: UncertaintySet,
    pub probe: Probe,
    pub beta_probe: Vec<f64>,
    pub lambda: f64,
    pub mc_mean_loss: f64,
    pub mc_std_error: f64,
    pub closed_form_loss: f64,
    pub relative_gap: f64,
    pub mode: PenaltyMode,
    pub sample_count: usize,
    pub verdict: Verdict,
}

impl EquivalenceReport {
    /// Gate on the relative gap: `max(1%, 3·s.e./|closed form|)`.
    pub fn gate(&self) -> f64 {
        RELATIVE_FLOOR.max(SIGMA_GATE * self.mc_std_error / self.closed_form_loss.abs().max(1e-12))
    }
}

/// Compares the sampled averaged loss against the ridge objective at three
/// probes (OLS, AUR and a random vector).
pub fn verify_equivalence(
    problem: &RegressionProblem,
    set: &UncertaintySet,
    mode: PenaltyMode,
    sample_count: usize,
    seed: u64,
) -> Result<Vec<EquivalenceReport>> {
    if sample_count < MIN_EQUIVALENCE_SAMPLES {
        return Err(Error::Config(format!(
            "equivalence audit needs at least {MIN_EQUIVALENCE_SAMPLES} samples, got {sample_count}"
        )));
    }
    if set.n() != problem.n() || set.k() != problem.k() {
        return Err(Error::Dimension {
            expected: format!("set shaped {}x{}", problem.n(), problem.k()),
            got: format!("{}x{}", set.n(), set.k()),
        });
    }
    let lambda = set.ridge_lambda(mode)?;
    let batch = hit_and_run(set, &SamplerConfig::new(seed), sample_count)?;

    let mut rng = seeded(derive_seed(seed, "probe"));
    let random = DVector::from_fn(problem.k(), |_, _| rng.sample(StandardNormal));
    let probes = [
        (Probe::Ols, fit_ols(problem)?.beta_vector()),
        (Probe::Aur, fit_aur(problem, lambda)?.beta_vector()),
        (Probe::Random, random),
    ];

    probes
        .into_iter()
        .map(|(probe, beta)| {
            let (mean, se) = mc_average_loss(problem, &beta, set, &batch)?;
            let closed = problem.aur_objective(&beta, lambda);
            let gap = (mean - closed).abs() / closed.abs().max(1e-12);
            let mut report = EquivalenceReport {
                set: set.clone(),
                probe,
                beta_probe: beta.as_slice().to_vec(),
                lambda,
                mc_mean_loss: mean,
                mc_std_error: se,
                closed_form_loss: closed,
                relative_gap: gap,
                mode,
                sample_count,
                verdict: Verdict::Inconclusive,
            };
            report.verdict = if gap <= report.gate() {
                Verdict::Agree
            } else {
                Verdict::Disagree
            };
            Ok(report)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    /// Average over coordinates of the per-entry mean.
    Mean,
    /// Average over coordinates of the per-entry second moment.
    SecondMoment,
    /// Average of `x_i x_{i+1}` over adjacent coordinate pairs.
    Cross,
    Volume,
    Lambda,
}

impl std::fmt::Display for Quantity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Quantity::Mean => "mean",
            Quantity::SecondMoment => "m2",
            Quantity::Cross => "cross",
            Quantity::Volume => "volume",
            Quantity::Lambda => "lambda",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub quantity: Quantity,
    pub paper_value: Option<f64>,
    pub derived_value: Option<f64>,
    pub mc_value: Option<f64>,
    pub mc_std_error: Option<f64>,
    pub paper_verdict: Verdict,
    pub derived_verdict: Verdict,
}

fn judge(value: Option<f64>, mc: Option<f64>, se: Option<f64>) -> Verdict {
    match (value, mc, se) {
        (Some(v), Some(m), Some(s)) => {
            // The floor absorbs rounding when the estimate is exact (s = 0).
            if (v - m).abs() <= SIGMA_GATE * s + 1e-12 * v.abs().max(m.abs()) {
                Verdict::Agree
            } else {
                Verdict::Disagree
            }
        }
        _ => Verdict::Inconclusive,
    }
}

impl LedgerRow {
    fn new(quantity: Quantity, paper: Option<f64>, derived: Option<f64>, mc: Option<(f64, f64)>) -> Self {
        let (mc_value, mc_std_error) = match mc {
            Some((m, s)) => (Some(m), Some(s)),
            None => (None, None),
        };
        Self {
            quantity,
            paper_value: paper,
            derived_value: derived,
            mc_value,
            mc_std_error,
            paper_verdict: judge(paper, mc_value, mc_std_error),
            derived_verdict: judge(derived, mc_value, mc_std_error),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FormulaAuditLedger {
    pub set: UncertaintySet,
    pub sample_count: usize,
    pub seed: u64,
    pub method: SamplingMethod,
    pub rows: Vec<LedgerRow>,
}

impl FormulaAuditLedger {
    pub fn row(&self, quantity: Quantity) -> Option<&LedgerRow> {
        self.rows.iter().find(|r| r.quantity == quantity)
    }

    /// True when no derived-constant row disagrees with the Monte Carlo value.
    pub fn derived_ok(&self) -> bool {
        self.rows.iter().all(|r| r.derived_verdict != Verdict::Disagree)
    }

    /// Fixed-width text rendering.
    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.6e}"));
        let mut out = format!(
            "set {}  samples {}  seed {}  method {:?}\n",
            self.set, self.sample_count, self.seed, self.method
        );
        out.push_str(&format!(
            "{:<8} {:>14} {:>14} {:>14} {:>14} {:>13} {:>13}\n",
            "quantity", "paper", "derived", "monte_carlo", "std_error", "paper", "derived"
        ));
        for r in &self.rows {
            out.push_str(&format!(
                "{:<8} {:>14} {:>14} {:>14} {:>14} {:>13} {:>13}\n",
                r.quantity.to_string(),
                fmt(r.paper_value),
                fmt(r.derived_value),
                fmt(r.mc_value),
                fmt(r.mc_std_error),
                r.paper_verdict.to_string(),
                r.derived_verdict.to_string()
            ));
        }
        out
    }
}

/// Lower bound on the fraction of `[−ρ, ρ]^d` occupied by the set.
fn acceptance_lower_bound(set: &UncertaintySet) -> f64 {
    let d = set.dim() as f64;
    let cube = d * (2.0 * set.rho()).ln();
    let log_vol = match set.log_volume() {
        Ok(v) => v,
        // Budget outside the closed-form window still contains the ℓ₁ ball
        // of radius Γ.
        Err(_) => {
            let gamma = set.gamma().unwrap_or(set.rho());
            UncertaintySet::diamond(gamma, set.n(), set.k())
                .and_then(|s| s.log_volume())
                .unwrap_or(f64::NEG_INFINITY)
        }
    };
    (log_vol - cube).exp()
}

/// Estimates mean, second moment, a cross moment, the volume and λ of `set`,
/// and judges both constant families against the estimates.
///
/// Uses exact rejection sampling when `d ≤ 12` and the acceptance rate is
/// workable; otherwise falls back to hit-and-run with batch-means standard
/// errors and leaves the volume row inconclusive.
pub fn audit_moments(set: &UncertaintySet, sample_count: usize, seed: u64) -> Result<FormulaAuditLedger> {
    if sample_count < 2 {
        return Err(Error::Config("moment audit needs at least 2 samples".into()));
    }
    let d = set.dim();
    let use_rejection = d <= REJECTION_MAX_DIM && acceptance_lower_bound(set) >= MIN_REJECTION_ACCEPTANCE;
    let batch = if use_rejection {
        rejection_sample(set, seed, sample_count)?
    } else {
        hit_and_run(set, &SamplerConfig::new(seed), sample_count)?
    };

    let mut mean = BatchMeans::new(sample_count, 50);
    let mut second = BatchMeans::new(sample_count, 50);
    let mut cross = BatchMeans::new(sample_count, 50);
    for s in batch.iter() {
        mean.push(s.iter().sum::<f64>() / d as f64);
        second.push(s.iter().map(|v| v * v).sum::<f64>() / d as f64);
        if d >= 2 {
            cross.push(s.windows(2).map(|w| w[0] * w[1]).sum::<f64>() / (d - 1) as f64);
        }
    }
    // Batch means cover autocorrelated hit-and-run output; rejection samples
    // are independent.
    let estimate = |acc: &BatchMeans| -> (f64, f64) {
        if use_rejection {
            (acc.mean(), acc.iid_std_error())
        } else {
            (acc.mean(), acc.std_error())
        }
    };

    let valid = set.closed_form_valid();
    let zero = Some(0.0);
    let paper_m2 = set.per_entry_second_moment(PenaltyMode::Paper).ok();
    let derived_m2 = set.per_entry_second_moment(PenaltyMode::Derived).ok();
    let volume = set.volume().ok();
    let n = set.n() as f64;
    let (m2, m2_se) = estimate(&second);

    let volume_mc = if batch.method() == SamplingMethod::Rejection {
        let p = batch.acceptance_rate();
        let cube = (2.0 * set.rho()).powi(set.dim() as i32);
        let se = (p * (1.0 - p) / batch.proposals() as f64).sqrt();
        Some((cube * p, cube * se))
    } else {
        None
    };

    let rows = vec![
        LedgerRow::new(Quantity::Mean, zero, zero, Some(estimate(&mean))),
        LedgerRow::new(Quantity::SecondMoment, paper_m2, derived_m2, Some((m2, m2_se))),
        LedgerRow::new(Quantity::Cross, zero, zero, (d >= 2).then(|| estimate(&cross))),
        LedgerRow::new(
            Quantity::Volume,
            volume.filter(|_| valid),
            volume.filter(|_| valid),
            volume_mc,
        ),
        LedgerRow::new(
            Quantity::Lambda,
            set.ridge_lambda(PenaltyMode::Paper).ok(),
            set.ridge_lambda(PenaltyMode::Derived).ok(),
            Some((n * m2, n * m2_se)),
        ),
    ];
    Ok(FormulaAuditLedger {
        set: set.clone(),
        sample_count,
        seed,
        method: batch.method(),
        rows,
    })
}

/// Set kinds whose published and derived constants coincide.
pub fn constants_coincide(kind: SetKind) -> bool {
    matches!(kind, SetKind::Box | SetKind::Diamond)
}
