//! Latent-space design search: NSGA-II with constraint domination, the
//! robust `mean - beta * std` objective, and the studies built on top of it
//! (bulk modulus beta sweep, robust versus deterministic Pareto fronts).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::MaterialSample;
use crate::homogenizer::{bulk_from, true_aleatoric_study, AleatoricStudy, SolverConfig};
use crate::metrics::coefficient_of_variation;
use crate::model::Model;
use crate::uq::{predict_with_uncertainty, PropertyUq, UqConfig, UqResult, UqStart};
use crate::voxel::{binarize, largest_component, mirror_eighth, save_grid, Connectivity, VoxelGrid, DEFAULT_THRESHOLD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Property {
    #[serde(rename = "E")]
    E,
    #[serde(rename = "nu")]
    Nu,
    #[serde(rename = "K")]
    K,
}

impl Property {
    pub fn name(self) -> &'static str {
        match self {
            Property::E => "E",
            Property::Nu => "nu",
            Property::K => "K",
        }
    }
}

/// One maximized objective: `mean - beta * total std` of a property.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub property: Property,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignMode {
    Robust,
    Deterministic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignProblem {
    pub objectives: Vec<Objective>,
    pub vf_target: f64,
    pub vf_tolerance: f64,
    pub bounds: Vec<(f64, f64)>,
    pub mode: DesignMode,
}

impl DesignProblem {
    /// Maximize the bulk modulus at a volume fraction of 0.3.
    pub fn bulk_modulus(beta: f64, bounds: Vec<(f64, f64)>) -> Self {
        Self {
            objectives: vec![Objective { property: Property::K, beta }],
            vf_target: 0.3,
            vf_tolerance: 0.001,
            bounds,
            mode: DesignMode::Robust,
        }
    }

    /// Maximize both E and nu at a volume fraction of 0.32.
    pub fn stiff_and_expanding(mode: DesignMode, beta: f64, bounds: Vec<(f64, f64)>) -> Self {
        Self {
            objectives: vec![
                Objective { property: Property::E, beta },
                Objective { property: Property::Nu, beta },
            ],
            vf_target: 0.32,
            vf_tolerance: 0.001,
            bounds,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objectives.is_empty() {
            return Err(Error::config("at least one objective"));
        }
        if self.objectives.iter().any(|o| !(o.beta >= 0.0)) {
            return Err(Error::config("beta must be non-negative"));
        }
        if !(self.vf_tolerance > 0.0) {
            return Err(Error::config("vf_tolerance must be positive"));
        }
        check_bounds(&self.bounds)
    }

    fn needs_bulk(&self) -> bool {
        self.objectives.iter().any(|o| o.property == Property::K)
    }
}

fn check_bounds(bounds: &[(f64, f64)]) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::config("no design variables"));
    }
    match bounds.iter().position(|(lo, hi)| !(lo < hi)) {
        Some(d) => Err(Error::DegenerateBounds(d)),
        None => Ok(()),
    }
}

/// A scored design point. Objectives are maximized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub z: Vec<f64>,
    pub objectives: Vec<f64>,
    pub violation: f64,
    pub uq: Option<UqResult>,
    pub vf: f64,
    #[serde(skip)]
    pub grid: Option<VoxelGrid>,
}

impl Individual {
    /// A plain point without design payload, for benchmark problems.
    pub fn scored(z: Vec<f64>, objectives: Vec<f64>, violation: f64) -> Self {
        Self {
            z,
            objectives,
            violation,
            uq: None,
            vf: f64::NAN,
            grid: None,
        }
    }

    pub fn is_feasible(&self) -> bool {
        self.violation == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsgaConfig {
    pub population: usize,
    pub generations: usize,
    pub sbx_eta: f64,
    pub mutation_eta: f64,
    /// Per-variable mutation probability; `None` means `1 / d`.
    pub mutation_prob: Option<f64>,
    pub crossover_prob: f64,
    pub seed: u64,
}

impl Default for NsgaConfig {
    fn default() -> Self {
        Self {
            population: 64,
            generations: 100,
            sbx_eta: 15.0,
            mutation_eta: 20.0,
            mutation_prob: None,
            crossover_prob: 0.9,
            seed: 0,
        }
    }
}

impl NsgaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 || self.population % 2 != 0 {
            return Err(Error::config(format!("population must be even and >= 4, got {}", self.population)));
        }
        if !(self.sbx_eta >= 0.0 && self.mutation_eta >= 0.0) {
            return Err(Error::config("distribution indices must be non-negative"));
        }
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(self.crossover_prob) || !self.mutation_prob.is_none_or(unit) {
            return Err(Error::config("probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Per-dimension extrema of encoded training means.
pub fn latent_bounds(codes: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    let Some(first) = codes.first() else {
        return Err(Error::EmptyDataset);
    };
    let mut bounds: Vec<(f64, f64)> = first.iter().map(|&v| (v, v)).collect();
    for c in &codes[1..] {
        if c.len() != bounds.len() {
            return Err(Error::shape(format!("latent width {} vs {}", c.len(), bounds.len())));
        }
        for (b, &v) in bounds.iter_mut().zip(c) {
            b.0 = b.0.min(v);
            b.1 = b.1.max(v);
        }
    }
    check_bounds(&bounds)?;
    Ok(bounds)
}

fn property_uq(uq: &UqResult, p: Property) -> Result<PropertyUq> {
    match p {
        Property::E => Ok(uq.e),
        Property::Nu => Ok(uq.nu),
        Property::K => uq.k.ok_or_else(|| Error::config("bulk modulus was not induced in this UQ run")),
    }
}

pub fn robust_objective(uq: &UqResult, property: Property, beta: f64) -> Result<f64> {
    let p = property_uq(uq, property)?;
    Ok(p.mean - beta * p.total)
}

/// Distance outside the `target ± tolerance` band; rounding noise at the
/// band edge counts as inside.
pub fn constraint_violation(vf: f64, target: f64, tolerance: f64) -> f64 {
    let gap = (vf - target).abs();
    if gap <= tolerance + 1e-12 {
        0.0
    } else {
        gap - tolerance
    }
}

/// Decodes a latent point into a full binary cell: threshold, mirror the
/// octant and keep the largest connected solid.
pub fn design_grid(model: &Model, z: &[f64]) -> Result<VoxelGrid> {
    let octant = crate::voxel::EighthCell::new(binarize(model.decode(z)?.grid(), DEFAULT_THRESHOLD));
    Ok(largest_component(&mirror_eighth(&octant), Connectivity::Face)?.0)
}

fn sentinel(z: &[f64], n_obj: usize) -> Individual {
    Individual::scored(z.to_vec(), vec![0.0; n_obj], f64::INFINITY)
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::EmptyStructure | Error::IncompressibleLimit(_))
}

/// Scores one latent point. Infeasible designs keep their violation but are
/// not run through the property models, since constraint domination never
/// looks at their objectives.
pub fn evaluate(z: &[f64], model: &Model, problem: &DesignProblem, uq_cfg: &UqConfig) -> Result<Individual> {
    let n_obj = problem.objectives.len();
    let grid = match design_grid(model, z) {
        Ok(g) => g,
        Err(e) if recoverable(&e) => return Ok(sentinel(z, n_obj)),
        Err(e) => return Err(e),
    };
    let vf = grid.volume_fraction();
    let violation = constraint_violation(vf, problem.vf_target, problem.vf_tolerance);
    let mut ind = Individual {
        z: z.to_vec(),
        objectives: vec![0.0; n_obj],
        violation,
        uq: None,
        vf,
        grid: Some(grid),
    };
    if violation > 0.0 {
        return Ok(ind);
    }
    let scored = match problem.mode {
        DesignMode::Robust => score_robust(z, model, problem, uq_cfg).map(|(o, u)| (o, Some(u))),
        DesignMode::Deterministic => score_deterministic(z, model, problem).map(|o| (o, None)),
    };
    match scored {
        Ok((objectives, uq)) => {
            ind.objectives = objectives;
            ind.uq = uq;
            Ok(ind)
        }
        Err(e) if recoverable(&e) => Ok(sentinel(z, n_obj)),
        Err(e) => Err(e),
    }
}

fn score_robust(z: &[f64], model: &Model, problem: &DesignProblem, uq_cfg: &UqConfig) -> Result<(Vec<f64>, UqResult)> {
    let cfg = UqConfig {
        bulk_draws: if problem.needs_bulk() { uq_cfg.bulk_draws.max(2) } else { 0 },
        ..uq_cfg.clone()
    };
    let uq = predict_with_uncertainty(model, &UqStart::Latent(z), &cfg)?.result;
    let objectives = problem
        .objectives
        .iter()
        .map(|o| robust_objective(&uq, o.property, o.beta))
        .collect::<Result<_>>()?;
    Ok((objectives, uq))
}

fn score_deterministic(z: &[f64], model: &Model, problem: &DesignProblem) -> Result<Vec<f64>> {
    let [e, nu] = model.deterministic_predict(z)?;
    problem
        .objectives
        .iter()
        .map(|o| match o.property {
            Property::E => Ok(e),
            Property::Nu => Ok(nu),
            Property::K => bulk_from(e, nu),
        })
        .collect()
}

/// Constraint domination for maximization: feasible beats infeasible, lower
/// violation beats higher, and feasible pairs use Pareto dominance.
pub fn dominates(a: &Individual, b: &Individual) -> bool {
    match (a.is_feasible(), b.is_feasible()) {
        (true, false) => true,
        (false, true) => false,
        (false, false) => a.violation < b.violation,
        (true, true) => {
            let mut strict = false;
            for (x, y) in a.objectives.iter().zip(&b.objectives) {
                if x < y {
                    return false;
                }
                strict |= x > y;
            }
            strict
        }
    }
}

/// Fronts of population indices, best first.
pub fn non_dominated_sort(pop: &[Individual]) -> Vec<Vec<usize>> {
    let n = pop.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if dominates(&pop[i], &pop[j]) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            } else if dominates(&pop[j], &pop[i]) {
                dominates_list[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    fronts
}

/// Crowding distance of each member of a front, in front order.
pub fn crowding_distance(front: &[&Individual]) -> Vec<f64> {
    let n = front.len();
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let mut dist = vec![0.0; n];
    let n_obj = front[0].objectives.len();
    for m in 0..n_obj {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| front[a].objectives[m].total_cmp(&front[b].objectives[m]));
        let lo = front[order[0]].objectives[m];
        let hi = front[order[n - 1]].objectives[m];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let span = hi - lo;
        if !(span > 0.0 && span.is_finite()) {
            continue;
        }
        for k in 1..n - 1 {
            let gap = front[order[k + 1]].objectives[m] - front[order[k - 1]].objectives[m];
            dist[order[k]] += gap / span;
        }
    }
    dist
}

fn sbx(a: &[f64], b: &[f64], bounds: &[(f64, f64)], eta: f64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let mut c1 = a.to_vec();
    let mut c2 = b.to_vec();
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if !rng.random_bool(0.5) || (a[i] - b[i]).abs() <= 1e-14 {
            continue;
        }
        let (y1, y2) = if a[i] < b[i] { (a[i], b[i]) } else { (b[i], a[i]) };
        let u: f64 = rng.random();
        let spread = |beta: f64| {
            let alpha = 2.0 - beta.powf(-(eta + 1.0));
            if u <= 1.0 / alpha {
                (u * alpha).powf(1.0 / (eta + 1.0))
            } else {
                (1.0 / (2.0 - u * alpha)).powf(1.0 / (eta + 1.0))
            }
        };
        let bq1 = spread(1.0 + 2.0 * (y1 - lo) / (y2 - y1));
        let bq2 = spread(1.0 + 2.0 * (hi - y2) / (y2 - y1));
        let mut v1 = (0.5 * ((y1 + y2) - bq1 * (y2 - y1))).clamp(lo, hi);
        let mut v2 = (0.5 * ((y1 + y2) + bq2 * (y2 - y1))).clamp(lo, hi);
        if rng.random_bool(0.5) {
            std::mem::swap(&mut v1, &mut v2);
        }
        c1[i] = v1;
        c2[i] = v2;
    }
    (c1, c2)
}

fn polynomial_mutation(x: &mut [f64], bounds: &[(f64, f64)], eta: f64, prob: f64, rng: &mut ChaCha8Rng) {
    let pow = 1.0 / (eta + 1.0);
    for (v, &(lo, hi)) in x.iter_mut().zip(bounds) {
        if !rng.random_bool(prob) {
            continue;
        }
        let width = hi - lo;
        let d1 = (*v - lo) / width;
        let d2 = (hi - *v) / width;
        let r: f64 = rng.random();
        let dq = if r < 0.5 {
            let val = 2.0 * r + (1.0 - 2.0 * r) * (1.0 - d1).powf(eta + 1.0);
            val.powf(pow) - 1.0
        } else {
            let val = 2.0 * (1.0 - r) + 2.0 * (r - 0.5) * (1.0 - d2).powf(eta + 1.0);
            1.0 - val.powf(pow)
        };
        *v = (*v + dq * width).clamp(lo, hi);
    }
}

#[derive(Clone, Debug)]
pub struct NsgaRun {
    /// First front of the final population.
    pub front: Vec<Individual>,
    pub population: Vec<Individual>,
    /// Best feasible value of the first objective after each generation
    /// (`-inf` while nothing is feasible); generation 0 is the initial
    /// population.
    pub best_history: Vec<f64>,
}

impl NsgaRun {
    /// Best feasible member of the front on the first objective, falling
    /// back to the least-violating member.
    pub fn winner(&self) -> &Individual {
        self.front
            .iter()
            .min_by(|a, b| {
                a.violation
                    .total_cmp(&b.violation)
                    .then(b.objectives[0].total_cmp(&a.objectives[0]))
            })
            .expect("front is never empty")
    }
}

fn rank_and_crowd(pop: &[Individual]) -> (Vec<usize>, Vec<f64>) {
    let mut rank = vec![0; pop.len()];
    let mut crowd = vec![0.0; pop.len()];
    for (r, front) in non_dominated_sort(pop).iter().enumerate() {
        let members: Vec<&Individual> = front.iter().map(|&i| &pop[i]).collect();
        for (&i, d) in front.iter().zip(crowding_distance(&members)) {
            rank[i] = r;
            crowd[i] = d;
        }
    }
    (rank, crowd)
}

fn best_feasible(pop: &[Individual]) -> f64 {
    pop.iter()
        .filter(|p| p.is_feasible())
        .map(|p| p.objectives[0])
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Runs NSGA-II over the box `bounds`, maximizing the objectives returned
/// by `eval`. Evaluation runs in parallel; everything random is drawn from
/// one seeded stream on the calling thread, so results do not depend on
/// the worker count.
pub fn nsga2<F>(bounds: &[(f64, f64)], cfg: &NsgaConfig, eval: F) -> Result<NsgaRun>
where
    F: Fn(&[f64]) -> Result<Individual> + Sync,
{
    cfg.validate()?;
    check_bounds(bounds)?;
    let d = bounds.len();
    let pm = cfg.mutation_prob.unwrap_or(1.0 / d as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval_all = |zs: Vec<Vec<f64>>| -> Result<Vec<Individual>> { zs.par_iter().map(|z| eval(z)).collect() };

    let init: Vec<Vec<f64>> = (0..cfg.population)
        .map(|_| bounds.iter().map(|&(lo, hi)| rng.random_range(lo..=hi)).collect())
        .collect();
    let mut pop = eval_all(init)?;
    let mut history = vec![best_feasible(&pop)];

    for _ in 0..cfg.generations {
        let (rank, crowd) = rank_and_crowd(&pop);
        let tournament = |rng: &mut ChaCha8Rng| {
            let a = rng.random_range(0..pop.len());
            let b = rng.random_range(0..pop.len());
            if rank[b] < rank[a] || (rank[b] == rank[a] && crowd[b] > crowd[a]) {
                b
            } else {
                a
            }
        };
        let mut children = Vec::with_capacity(cfg.population);
        while children.len() < cfg.population {
            let p1 = tournament(&mut rng);
            let p2 = tournament(&mut rng);
            let (mut c1, mut c2) = if rng.random_bool(cfg.crossover_prob) {
                sbx(&pop[p1].z, &pop[p2].z, bounds, cfg.sbx_eta, &mut rng)
            } else {
                (pop[p1].z.clone(), pop[p2].z.clone())
            };
            polynomial_mutation(&mut c1, bounds, cfg.mutation_eta, pm, &mut rng);
            polynomial_mutation(&mut c2, bounds, cfg.mutation_eta, pm, &mut rng);
            children.push(c1);
            children.push(c2);
        }
        let mut combined = pop;
        combined.extend(eval_all(children)?);
        pop = environmental_selection(combined, cfg.population);
        history.push(best_feasible(&pop));
    }

    let first = non_dominated_sort(&pop).swap_remove(0);
    let front = first.iter().map(|&i| pop[i].clone()).collect();
    Ok(NsgaRun { front, population: pop, best_history: history })
}

fn environmental_selection(combined: Vec<Individual>, size: usize) -> Vec<Individual> {
    let mut keep = Vec::with_capacity(size);
    for front in non_dominated_sort(&combined) {
        if keep.len() + front.len() <= size {
            keep.extend(front);
            continue;
        }
        let members: Vec<&Individual> = front.iter().map(|&i| &combined[i]).collect();
        let dist = crowding_distance(&members);
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
        keep.extend(order.into_iter().take(size - keep.len()).map(|k| front[k]));
        break;
    }
    keep.sort_unstable();
    let mut slots: Vec<Option<Individual>> = combined.into_iter().map(Some).collect();
    keep.into_iter().map(|i| slots[i].take().expect("index kept once")).collect()
}

/// Runs NSGA-II on a design problem through the trained model.
pub fn run_design(model: &Model, problem: &DesignProblem, nsga: &NsgaConfig, uq_cfg: &UqConfig) -> Result<NsgaRun> {
    problem.validate()?;
    if problem.bounds.len() != model.latent_dim() {
        return Err(Error::shape(format!(
            "{} bounds for latent width {}",
            problem.bounds.len(),
            model.latent_dim()
        )));
    }
    nsga2(&problem.bounds, nsga, |z| evaluate(z, model, problem, uq_cfg))
}

/// Finite element check of a design under repeated material draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    pub base: MaterialSample,
    pub replicates: usize,
    pub seed: u64,
    pub solver: SolverConfig,
}

impl Default for Verification {
    fn default() -> Self {
        Self {
            base: MaterialSample::aluminum(),
            replicates: 8,
            seed: 0,
            solver: SolverConfig::default(),
        }
    }
}

pub fn verify(grid: &VoxelGrid, v: &Verification) -> Result<AleatoricStudy> {
    true_aleatoric_study(grid, &v.base, v.replicates, v.seed, &v.solver)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub beta: f64,
    pub winner: Individual,
    /// Predicted spread of the winner's bulk modulus.
    pub predicted: PropertyUq,
    pub fea: AleatoricStudy,
}

/// One bulk modulus search per beta, each winner checked by simulation.
pub fn beta_sweep(
    model: &Model,
    bounds: &[(f64, f64)],
    betas: &[f64],
    nsga: &NsgaConfig,
    uq_cfg: &UqConfig,
    check: &Verification,
) -> Result<Vec<SweepRow>> {
    if betas.is_empty() {
        return Err(Error::config("no beta values"));
    }
    betas
        .iter()
        .map(|&beta| {
            let problem = DesignProblem::bulk_modulus(beta, bounds.to_vec());
            let run = run_design(model, &problem, nsga, uq_cfg)?;
            let winner = run.winner().clone();
            log::info!("beta {beta}: objective {:.2}, vf {:.4}", winner.objectives[0], winner.vf);
            let grid = winner.grid.as_ref().ok_or(Error::EmptyStructure)?;
            let fea = verify(grid, check)?;
            let predicted = match &winner.uq {
                Some(u) => property_uq(u, Property::K)?,
                None => PropertyUq { mean: f64::NAN, aleatoric: f64::NAN, epistemic: f64::NAN, total: f64::NAN },
            };
            Ok(SweepRow { beta, winner, predicted, fea })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub z: Vec<f64>,
    pub vf: f64,
    /// Objectives under the robust formulation.
    pub robust_scores: Vec<f64>,
    pub cv_e: f64,
    pub cv_nu: f64,
    pub fea: AleatoricStudy,
    /// Some robust archive member is at least as good on every objective.
    pub dominated_or_tied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoComparison {
    pub robust: Vec<CandidateReport>,
    pub deterministic: Vec<CandidateReport>,
    /// Median CV in percent, `[E, nu]`.
    pub median_cv_robust: [f64; 2],
    pub median_cv_deterministic: [f64; 2],
    /// Share of deterministic candidates dominated by or tied with the
    /// robust archive.
    pub dominated_fraction: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Simulates both archives, compares their variability and re-scores the
/// deterministic candidates under the robust objective.
pub fn pareto_compare(
    robust: &[Individual],
    deterministic: &[Individual],
    model: &Model,
    robust_problem: &DesignProblem,
    uq_cfg: &UqConfig,
    check: &Verification,
) -> Result<ParetoComparison> {
    let usable = |a: &[Individual]| -> Vec<Individual> { a.iter().filter(|i| i.grid.is_some()).cloned().collect() };
    let (robust, deterministic) = (usable(robust), usable(deterministic));
    if robust.is_empty() || deterministic.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let rescore = |ind: &Individual| -> Result<Individual> { evaluate(&ind.z, model, robust_problem, uq_cfg) };
    let robust_scored: Vec<Individual> = robust.iter().map(rescore).collect::<Result<_>>()?;
    let report = |ind: &Individual, scored: &Individual, dominated_or_tied: bool| -> Result<CandidateReport> {
        let fea = verify(ind.grid.as_ref().expect("filtered"), check)?;
        let es: Vec<f64> = fea.draws.iter().map(|p| p.e).collect();
        let nus: Vec<f64> = fea.draws.iter().map(|p| p.nu).collect();
        Ok(CandidateReport {
            z: ind.z.clone(),
            vf: ind.vf,
            robust_scores: scored.objectives.clone(),
            cv_e: coefficient_of_variation(&es)?,
            cv_nu: coefficient_of_variation(&nus)?,
            fea,
            dominated_or_tied,
        })
    };
    let covered = |s: &Individual| {
        robust_scored
            .iter()
            .filter(|r| r.is_feasible())
            .any(|r| r.objectives.iter().zip(&s.objectives).all(|(a, b)| a >= b))
    };
    let robust_reports = robust
        .iter()
        .zip(&robust_scored)
        .map(|(i, s)| report(i, s, true))
        .collect::<Result<Vec<_>>>()?;
    let det_reports = deterministic
        .iter()
        .map(|i| {
            let s = rescore(i)?;
            let tied = !s.is_feasible() || covered(&s);
            report(i, &s, tied)
        })
        .collect::<Result<Vec<_>>>()?;
    let med = |r: &[CandidateReport]| {
        [
            median(&mut r.iter().map(|c| c.cv_e).collect::<Vec<_>>()),
            median(&mut r.iter().map(|c| c.cv_nu).collect::<Vec<_>>()),
        ]
    };
    let dominated = det_reports.iter().filter(|c| c.dominated_or_tied).count();
    Ok(ParetoComparison {
        median_cv_robust: med(&robust_reports),
        median_cv_deterministic: med(&det_reports),
        dominated_fraction: dominated as f64 / det_reports.len() as f64,
        robust: robust_reports,
        deterministic: det_reports,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRow {
    pub case: String,
    pub beta: f64,
    pub z_json: String,
    #[serde(rename = "pred_mu_E")]
    pub pred_mu_e: Option<f64>,
    #[serde(rename = "pred_sigma_E")]
    pub pred_sigma_e: Option<f64>,
    pub pred_mu_nu: Option<f64>,
    pub pred_sigma_nu: Option<f64>,
    #[serde(rename = "pred_mu_K")]
    pub pred_mu_k: Option<f64>,
    #[serde(rename = "pred_sigma_K")]
    pub pred_sigma_k: Option<f64>,
    pub vf: f64,
    #[serde(rename = "fea_E")]
    pub fea_e: Option<f64>,
    pub fea_nu: Option<f64>,
    #[serde(rename = "fea_K")]
    pub fea_k: Option<f64>,
}

impl ArchiveRow {
    pub fn new(case: &str, beta: f64, ind: &Individual, fea: Option<&AleatoricStudy>) -> Result<Self> {
        let uq = ind.uq.as_ref();
        Ok(Self {
            case: case.into(),
            beta,
            z_json: serde_json::to_string(&ind.z)?,
            pred_mu_e: uq.map(|u| u.e.mean),
            pred_sigma_e: uq.map(|u| u.e.total),
            pred_mu_nu: uq.map(|u| u.nu.mean),
            pred_sigma_nu: uq.map(|u| u.nu.total),
            pred_mu_k: uq.and_then(|u| u.k).map(|k| k.mean),
            pred_sigma_k: uq.and_then(|u| u.k).map(|k| k.total),
            vf: ind.vf,
            fea_e: fea.map(|f| f.e.mean),
            fea_nu: fea.map(|f| f.nu.mean),
            fea_k: fea.map(|f| f.k.mean),
        })
    }
}

impl ArchiveRow {
    /// Fills the predicted means from a point predictor, leaving the spread
    /// columns empty.
    pub fn with_means(mut self, [e, nu]: [f64; 2]) -> Self {
        self.pred_mu_e = Some(e);
        self.pred_mu_nu = Some(nu);
        self.pred_mu_k = bulk_from(e, nu).ok();
        self
    }
}

/// Writes `archive.csv` plus one voxel file per row that carries a grid.
pub fn write_archive(dir: &Path, rows: &[ArchiveRow], grids: &[Option<&VoxelGrid>]) -> Result<()> {
    if rows.len() != grids.len() {
        return Err(Error::shape(format!("{} rows vs {} grids", rows.len(), grids.len())));
    }
    std::fs::create_dir_all(dir.join("voxels"))?;
    let mut w = csv::Writer::from_path(dir.join("archive.csv"))?;
    for (i, (row, grid)) in rows.iter().zip(grids).enumerate() {
        w.serialize(row)?;
        if let Some(g) = grid {
            save_grid(g, &dir.join(format!("voxels/{}_{i:03}.vox", row.case)))?;
        }
    }
    w.flush()?;
    Ok(())
}
