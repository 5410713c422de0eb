//! Uniform samplers over the perturbation sets.
//!
//! [`hit_and_run`] is the production sampler and works in any dimension.
//! [`rejection_sample`] is exact but only practical for `d ≤ 12`; the audit
//! uses it as ground truth. [`nested_level_sample`] draws from a larger set
//! while excluding a smaller one so perturbation strengths are strictly
//! increasing across levels.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::geometry::{unflatten, SetKind, UncertaintySet};
use crate::rng::{seeded, Rng};
use crate::{Error, Result};

/// Largest dimension accepted by [`rejection_sample`].
pub const REJECTION_MAX_DIM: usize = 12;

/// Bisection steps used to locate ℓ₁ chord endpoints.
const L1_BISECTION_STEPS: usize = 50;

/// Upper bound on chain outputs inspected per accepted nested sample.
const NESTED_MAX_TRIES_PER_SAMPLE: u64 = 100_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed: u64,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_thinning")]
    pub thinning: usize,
    /// Chain start; the origin when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<Vec<f64>>,
}

fn default_burn_in() -> usize {
    1000
}

fn default_thinning() -> usize {
    10
}

impl SamplerConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            burn_in: default_burn_in(),
            thinning: default_thinning(),
            start: None,
        }
    }

    pub fn with_burn_in(mut self, burn_in: usize) -> Self {
        self.burn_in = burn_in;
        self
    }

    pub fn with_thinning(mut self, thinning: usize) -> Self {
        self.thinning = thinning;
        self
    }

    pub fn with_start(mut self, start: Vec<f64>) -> Self {
        self.start = Some(start);
        self
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self::new(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMethod {
    HitAndRun,
    Rejection,
}

/// An immutable batch of flattened samples from one set.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationBatch {
    set: UncertaintySet,
    seed: u64,
    method: SamplingMethod,
    data: Vec<f64>,
    proposals: u64,
}

impl PerturbationBatch {
    pub fn set(&self) -> &UncertaintySet {
        &self.set
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn method(&self) -> SamplingMethod {
        self.method
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.set.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major flattened sample `i`.
    pub fn sample(&self, i: usize) -> &[f64] {
        let d = self.set.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.set.dim())
    }

    /// Sample `i` as an `n × k` matrix.
    pub fn matrix(&self, i: usize) -> DMatrix<f64> {
        unflatten(self.sample(i), self.set.n(), self.set.k())
    }

    /// Number of candidate points examined: bounding-box proposals for
    /// rejection sampling, thinned chain outputs for nested sampling, and
    /// the sample count for plain hit-and-run.
    pub fn proposals(&self) -> u64 {
        self.proposals
    }

    /// Accepted samples over proposals.
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.len() as f64 / self.proposals as f64
        }
    }
}

/// Hit-and-run Markov chain on a single set.
///
/// Each step draws a uniformly random direction and moves to a uniformly
/// random point on the chord of the set through the current point.
pub struct HitAndRunChain<'a> {
    set: &'a UncertaintySet,
    rng: Rng,
    x: Vec<f64>,
    direction: Vec<f64>,
}

impl<'a> HitAndRunChain<'a> {
    pub fn new(set: &'a UncertaintySet, seed: u64, start: Option<&[f64]>) -> Result<Self> {
        let d = set.dim();
        let x = match start {
            Some(s) => {
                if s.len() != d {
                    return Err(Error::Config(format!(
                        "start point has {} entries, set has dimension {d}",
                        s.len()
                    )));
                }
                if !set.contains_unchecked(s) {
                    return Err(Error::Config(format!("start point lies outside {set}")));
                }
                s.to_vec()
            }
            None => vec![0.0; d],
        };
        Ok(Self {
            set,
            rng: seeded(seed),
            x,
            direction: vec![0.0; d],
        })
    }

    pub fn current(&self) -> &[f64] {
        &self.x
    }

    pub fn step(&mut self) {
        self.draw_direction();
        let (lo, hi) = chord(self.set, &self.x, &self.direction);
        let t = if hi > lo { self.rng.random_range(lo..=hi) } else { 0.0 };
        for (xi, ui) in self.x.iter_mut().zip(&self.direction) {
            *xi += t * ui;
        }
    }

    pub fn advance(&mut self, steps: usize) {
        for _ in 0..steps {
            self.step();
        }
    }

    fn draw_direction(&mut self) {
        loop {
            let mut norm2 = 0.0;
            for u in self.direction.iter_mut() {
                *u = self.rng.sample(StandardNormal);
                norm2 += *u * *u;
            }
            // A zero direction has probability zero; redraw if it happens.
            if norm2 > 0.0 {
                let inv = 1.0 / norm2.sqrt();
                self.direction.iter_mut().for_each(|u| *u *= inv);
                return;
            }
        }
    }
}

/// Parameter interval `[lo, hi]` (with `lo ≤ 0 ≤ hi`) such that
/// `x + t·u` stays in the set.
pub fn chord(set: &UncertaintySet, x: &[f64], u: &[f64]) -> (f64, f64) {
    match set.kind() {
        SetKind::Ellipsoidal => ball_chord(set.rho(), x, u),
        SetKind::Box => box_chord(set.rho(), x, u),
        SetKind::Diamond => {
            let hi = l1_endpoint(set.rho(), x, u, 1.0, f64::INFINITY);
            let lo = l1_endpoint(set.rho(), x, u, -1.0, f64::INFINITY);
            (-lo, hi)
        }
        SetKind::Budget => {
            let gamma = set.gamma().expect("budget has gamma");
            let (box_lo, box_hi) = box_chord(gamma, x, u);
            let hi = l1_endpoint(set.rho(), x, u, 1.0, box_hi);
            let lo = l1_endpoint(set.rho(), x, u, -1.0, -box_lo);
            (-lo, hi)
        }
    }
}

fn ball_chord(rho: f64, x: &[f64], u: &[f64]) -> (f64, f64) {
    // |x + t u|² = ρ² with |u| = 1:  t² + 2 t (x·u) + |x|² − ρ² = 0.
    let xu: f64 = x.iter().zip(u).map(|(a, b)| a * b).sum();
    let xx: f64 = x.iter().map(|a| a * a).sum();
    let disc = (xu * xu - (xx - rho * rho)).max(0.0);
    let root = disc.sqrt();
    ((-xu - root).min(0.0), (-xu + root).max(0.0))
}

fn box_chord(half_width: f64, x: &[f64], u: &[f64]) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for (&xi, &ui) in x.iter().zip(u) {
        if ui == 0.0 {
            continue;
        }
        let a = (-half_width - xi) / ui;
        let b = (half_width - xi) / ui;
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        lo = lo.max(a);
        hi = hi.min(b);
    }
    (lo.min(0.0), hi.max(0.0))
}

/// Largest `s ≥ 0` (at most `cap`) with `‖x + s·sign·u‖₁ ≤ ρ`, by bisection
/// on the convex piecewise-linear profile. The returned endpoint is always on
/// the feasible side.
fn l1_endpoint(rho: f64, x: &[f64], u: &[f64], sign: f64, cap: f64) -> f64 {
    let l1_at = |s: f64| -> f64 { x.iter().zip(u).map(|(a, b)| (a + s * sign * b).abs()).sum() };
    let x1: f64 = x.iter().map(|a| a.abs()).sum();
    let u1: f64 = u.iter().map(|a| a.abs()).sum();
    // ‖x + s u‖₁ ≥ s‖u‖₁ − ‖x‖₁, so the profile exceeds ρ beyond this point.
    let mut hi = ((rho + x1) / u1).min(cap.max(0.0));
    if l1_at(hi) <= rho {
        return hi;
    }
    let mut lo = 0.0;
    for _ in 0..L1_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if l1_at(mid) <= rho {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Approximately uniform samples by hit-and-run.
pub fn hit_and_run(set: &UncertaintySet, config: &SamplerConfig, count: usize) -> Result<PerturbationBatch> {
    if config.thinning == 0 {
        return Err(Error::Config("thinning must be at least 1".into()));
    }
    let mut chain = HitAndRunChain::new(set, config.seed, config.start.as_deref())?;
    chain.advance(config.burn_in);
    let mut data = Vec::with_capacity(count * set.dim());
    for _ in 0..count {
        chain.advance(config.thinning);
        data.extend_from_slice(chain.current());
    }
    Ok(PerturbationBatch {
        set: set.clone(),
        seed: config.seed,
        method: SamplingMethod::HitAndRun,
        data,
        proposals: count as u64,
    })
}

/// Exact uniform samples by proposing in `[−ρ, ρ]^d` and keeping members.
pub fn rejection_sample(set: &UncertaintySet, seed: u64, count: usize) -> Result<PerturbationBatch> {
    let d = set.dim();
    if d > REJECTION_MAX_DIM {
        return Err(Error::Config(format!(
            "rejection sampling is limited to d <= {REJECTION_MAX_DIM} (got d = {d}); use hit-and-run"
        )));
    }
    let mut rng = seeded(seed);
    let half = set.bounding_half_width();
    let mut data = Vec::with_capacity(count * d);
    let mut candidate = vec![0.0; d];
    let mut proposals = 0u64;
    let mut accepted = 0usize;
    while accepted < count {
        for c in candidate.iter_mut() {
            *c = rng.random_range(-half..=half);
        }
        proposals += 1;
        if set.contains_unchecked(&candidate) {
            data.extend_from_slice(&candidate);
            accepted += 1;
        }
    }
    Ok(PerturbationBatch {
        set: set.clone(),
        seed,
        method: SamplingMethod::Rejection,
        data,
        proposals,
    })
}

/// Hit-and-run samples from `large` that do not lie in `small`.
pub fn nested_level_sample(
    small: &UncertaintySet,
    large: &UncertaintySet,
    config: &SamplerConfig,
    count: usize,
) -> Result<PerturbationBatch> {
    if small.kind() != large.kind() || small.n() != large.n() || small.k() != large.k() {
        return Err(Error::Config(format!(
            "nested sets must share kind and shape: {small} vs {large}"
        )));
    }
    if small.rho() >= large.rho() {
        return Err(Error::Config(format!(
            "inner radius {} must be below outer radius {}",
            small.rho(),
            large.rho()
        )));
    }
    if let (Some(gs), Some(gl)) = (small.gamma(), large.gamma()) {
        if gs > gl {
            return Err(Error::Config(format!(
                "inner set {small} is not contained in outer set {large}"
            )));
        }
    }
    if config.thinning == 0 {
        return Err(Error::Config("thinning must be at least 1".into()));
    }
    let mut chain = HitAndRunChain::new(large, config.seed, config.start.as_deref())?;
    chain.advance(config.burn_in);
    let mut data = Vec::with_capacity(count * large.dim());
    let mut proposals = 0u64;
    let mut accepted = 0usize;
    let budget = NESTED_MAX_TRIES_PER_SAMPLE.saturating_mul(count.max(1) as u64);
    while accepted < count {
        if proposals >= budget {
            return Err(Error::Config(format!(
                "nested sampling accepted {accepted}/{count} after {proposals} chain outputs; \
                 the excluded set {small} covers almost all of {large}"
            )));
        }
        chain.advance(config.thinning);
        proposals += 1;
        if !small.contains_unchecked(chain.current()) {
            data.extend_from_slice(chain.current());
            accepted += 1;
        }
    }
    Ok(PerturbationBatch {
        set: large.clone(),
        seed: config.seed,
        method: SamplingMethod::HitAndRun,
        data,
        proposals,
    })
}
