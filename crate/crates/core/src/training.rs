//! Dataset splitting, class down-selection, single-phase training with early
//! stopping, and the staged warm-start schedule over latent size and loss
//! weights.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homogenizer::LabeledDataset;
use crate::model::{
    kl_graph, nll_graph, LabelScaler, LossTerms, LossWeights, Mode, Model, ModelConfig, N_PROPS,
};
use crate::tensor::{AdamState, Graph, LrSchedule, ParamStore, Tensor, Var};
use crate::metrics::{property_reports, recon_accuracy, MetricReport};
use crate::voxel::{binarize, load_grid, VoxelGrid, DEFAULT_THRESHOLD};

/// One training example: eighth-cell occupancy and `[E, nu]` labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub cell: Vec<f64>,
    pub labels: [f64; N_PROPS],
}

impl Sample {
    pub fn from_grid(id: impl Into<String>, grid: &VoxelGrid, labels: [f64; N_PROPS]) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            cell: grid.eighth()?.into_grid().into_values(),
            labels,
        })
    }
}

/// Loads every row of a labeled dataset; voxel paths resolve against
/// `base_path`'s directory.
pub fn load_samples(dataset: &LabeledDataset, base_path: &Path) -> Result<Vec<Sample>> {
    dataset
        .rows
        .iter()
        .map(|r| {
            let path = {
                let p = Path::new(&r.voxel_path);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base_path.parent().unwrap_or(Path::new(".")).join(p)
                }
            };
            Sample::from_grid(&r.id, &load_grid(&path)?, [r.e_mean, r.nu_mean])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_frac: 0.7, val_frac: 0.2, test_frac: 0.1, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle into train/validation/test. Train and validation sizes
/// are rounded down; the test split takes the remainder.
pub fn split_dataset<T: Clone>(rows: &[T], spec: &SplitSpec) -> Result<Split<T>> {
    let fracs = [spec.train_frac, spec.val_frac, spec.test_frac];
    if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || (fracs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must lie in [0, 1] and sum to 1"));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    // Guard against 0.7 * 100 = 69.999...
    let n_train = ((n as f64 * spec.train_frac) + 1e-9).floor() as usize;
    let n_val = (((n as f64 * spec.val_frac) + 1e-9).floor() as usize).min(n - n_train);
    let pick = |ix: &[usize]| ix.iter().map(|&i| rows[i].clone()).collect::<Vec<T>>();
    Ok(Split {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownselectSpec {
    pub keep_fraction: f64,
    pub seed: u64,
}

impl Default for DownselectSpec {
    fn default() -> Self {
        Self { keep_fraction: 0.6, seed: 0 }
    }
}

/// Keeps `floor(keep_fraction * count)` randomly chosen rows with positive
/// Poisson's ratio and every other row, preserving input order.
pub fn downselect<T: Clone>(rows: &[T], poisson: impl Fn(&T) -> f64, spec: &DownselectSpec) -> Result<Vec<T>> {
    if !(spec.keep_fraction > 0.0 && spec.keep_fraction <= 1.0) {
        return Err(Error::config("keep_fraction must lie in (0, 1]"));
    }
    let mut positive: Vec<usize> = (0..rows.len()).filter(|&i| poisson(&rows[i]) > 0.0).collect();
    let keep = ((positive.len() as f64 * spec.keep_fraction) + 1e-9).floor() as usize;
    positive.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut dropped = vec![false; rows.len()];
    for &i in &positive[keep..] {
        dropped[i] = true;
    }
    Ok(rows
        .iter()
        .zip(dropped)
        .filter(|(_, d)| !d)
        .map(|(r, _)| r.clone())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            patience: 10,
            batch_size: 8,
            schedule: LrSchedule::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub train: LossTerms,
    pub val: LossTerms,
    /// Weighted validation loss used for early stopping.
    pub val_total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLosses>,
    pub best_epoch: usize,
    pub seconds: f64,
}

impl TrainReport {
    pub fn best(&self) -> EpochLosses {
        self.epochs.get(self.best_epoch).copied().unwrap_or_default()
    }
}

/// Which parameters a phase may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Vae,
    DeterministicHead,
}

fn cells<'a>(batch: &[&'a Sample]) -> Vec<&'a [f64]> {
    batch.iter().map(|s| s.cell.as_slice()).collect()
}

fn label_tensor(model: &Model, batch: &[&Sample]) -> Tensor {
    let data = batch.iter().flat_map(|s| model.scaler.to_scaled(s.labels)).collect();
    Tensor::new(vec![batch.len(), N_PROPS], data).expect("label shape")
}

/// Loss terms on one batch, decoding from the latent mean.
fn eval_terms(model: &Model, g: &Graph, batch: &[&Sample]) -> Result<LossTerms> {
    let x = g.constant(model.batch_tensor(&cells(batch))?);
    let f = model.forward(g, x, None, Mode::Infer)?;
    let recon = g.mse(f.recon, x)?;
    let kl = kl_graph(g, f.mean, f.logvar)?;
    let y = g.constant(label_tensor(model, batch));
    let nll = nll_graph(g, f.prop_mean, f.prop_std, y)?;
    let item = |v| g.value(v).item();
    Ok(LossTerms { recon: item(recon), kl: item(kl), nll: item(nll) })
}

fn weighted_loss(
    model: &Model,
    g: &Graph,
    batch: &[&Sample],
    noise: Option<&Tensor>,
    w: &LossWeights,
) -> Result<(LossTerms, Var)> {
    let x = g.constant(model.batch_tensor(&cells(batch))?);
    let f = model.forward(g, x, noise, Mode::Train)?;
    let recon = g.mse(f.recon, x)?;
    let kl = kl_graph(g, f.mean, f.logvar)?;
    let y = g.constant(label_tensor(model, batch));
    let nll = nll_graph(g, f.prop_mean, f.prop_std, y)?;
    let terms = LossTerms {
        recon: g.value(recon).item(),
        kl: g.value(kl).item(),
        nll: g.value(nll).item(),
    };
    let total = g.add(g.scale(recon, w.alpha1), g.scale(kl, w.alpha2))?;
    let total = g.add(total, g.scale(nll, w.alpha3))?;
    Ok((terms, total))
}

/// Mean loss terms over a dataset, decoding from the latent mean.
pub fn evaluate_losses(model: &Model, data: &[Sample], batch_size: usize) -> Result<LossTerms> {
    let mut acc = LossTerms::default();
    if data.is_empty() {
        return Ok(acc);
    }
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let g = Graph::new();
        let t = eval_terms(model, &g, &batch)?;
        let k = chunk.len() as f64;
        acc.recon += t.recon * k;
        acc.kl += t.kl * k;
        acc.nll += t.nll * k;
    }
    let n = data.len() as f64;
    acc.recon /= n;
    acc.kl /= n;
    acc.nll /= n;
    Ok(acc)
}

fn det_loss(model: &Model, g: &Graph, batch: &[&Sample], mode: Mode) -> Result<Var> {
    let x = g.constant(model.batch_tensor(&cells(batch))?);
    let (mean, _) = model.encode_graph(g, x, Mode::Infer)?;
    let pred = model.deterministic_graph(g, mean, mode)?;
    let y = g.constant(label_tensor(model, batch));
    g.mse(pred, y)
}

/// Trains with Adam and a decaying learning rate, stopping once the
/// weighted validation loss has not improved for `patience` epochs. The
/// model is left at its best validation epoch.
pub fn run_phase(
    model: &mut Model,
    weights: &LossWeights,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    run_phase_on(model, weights, train, val, cfg, Trainable::Vae)
}

pub fn run_phase_on(
    model: &mut Model,
    weights: &LossWeights,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    which: Trainable,
) -> Result<TrainReport> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.patience == 0 || cfg.batch_size == 0 {
        return Err(Error::config("patience and batch_size must be at least 1"));
    }
    let started = Instant::now();
    let ids = match which {
        Trainable::Vae => model.vae_params(),
        Trainable::DeterministicHead => model.deterministic_params(),
    };
    let mut adam = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = model.latent_dim();
    let mut report = TrainReport::default();
    let mut best = (f64::INFINITY, model.params.clone());
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = cfg.schedule.rate(epoch);
        let mut train_terms = LossTerms::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let g = Graph::new();
            let (terms, loss) = match which {
                Trainable::Vae => {
                    let eps: Vec<f64> = (0..batch.len() * d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let eps = Tensor::new(vec![batch.len(), d], eps)?;
                    weighted_loss(model, &g, &batch, Some(&eps), weights)?
                }
                Trainable::DeterministicHead => {
                    let l = det_loss(model, &g, &batch, Mode::Train)?;
                    (LossTerms { nll: g.value(l).item(), ..Default::default() }, l)
                }
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NumericalDivergence { epoch, value });
            }
            let grads = g.backward(loss)?.retain(&ids);
            adam.step(&mut model.params, &grads, lr);
            let k = batch.len() as f64;
            train_terms.recon += terms.recon * k;
            train_terms.kl += terms.kl * k;
            train_terms.nll += terms.nll * k;
        }
        let n = train.len() as f64;
        train_terms.recon /= n;
        train_terms.kl /= n;
        train_terms.nll /= n;

        let (val_terms, val_total) = match which {
            Trainable::Vae => {
                let t = evaluate_losses(model, val, cfg.batch_size)?;
                (t, t.weighted(weights))
            }
            Trainable::DeterministicHead => {
                let mse = deterministic_mse(model, val)?;
                (LossTerms { nll: mse, ..Default::default() }, mse)
            }
        };
        if !val_total.is_finite() {
            return Err(Error::NumericalDivergence { epoch, value: val_total });
        }
        report.epochs.push(EpochLosses { train: train_terms, val: val_terms, val_total });
        if val_total < best.0 {
            best = (val_total, model.params.clone());
            report.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                log::info!("early stop at epoch {epoch}, best {}", report.best_epoch);
                break;
            }
        }
    }
    model.params = best.1;
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean squared error of the deterministic head in scaled units.
pub fn deterministic_mse(model: &Model, data: &[Sample]) -> Result<f64> {
    let mut acc = 0.0;
    for chunk in data.chunks(16) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let g = Graph::new();
        let l = det_loss(model, &g, &batch, Mode::Infer)?;
        acc += g.value(l).item() * chunk.len() as f64;
    }
    Ok(acc / data.len().max(1) as f64)
}

/// Latent means of every sample, in order.
pub fn encode_means(model: &Model, data: &[Sample]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(32) {
        let cells: Vec<&[f64]> = chunk.iter().map(|s| s.cell.as_slice()).collect();
        out.extend(model.encode_batch(&cells)?.into_iter().map(|c| c.mean));
    }
    Ok(out)
}

/// Reconstruction accuracy of the thresholded decodes plus per-property R²
/// and NRMSE of the property head, all read at the latent mean.
pub fn split_reports(model: &Model, split: &str, data: &[Sample]) -> Result<Vec<MetricReport>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let edge = model.config().input_edge;
    let means = encode_means(model, data)?;
    let refs: Vec<&[f64]> = means.iter().map(Vec::as_slice).collect();
    let decoded = model.decode_batch(&refs)?;
    let originals = data
        .iter()
        .map(|s| VoxelGrid::from_values(edge, s.cell.clone()))
        .collect::<Result<Vec<_>>>()?;
    let recons: Vec<VoxelGrid> = decoded.iter().map(|c| binarize(c.grid(), DEFAULT_THRESHOLD)).collect();
    let mut rows = vec![MetricReport::new(split, "recon_accuracy", "voxels", recon_accuracy(&originals, &recons)?, data.len())];
    let preds: Vec<[f64; N_PROPS]> = model.mdn_predict_batch(&refs)?.into_iter().map(|p| p.means).collect();
    let truth: Vec<[f64; N_PROPS]> = data.iter().map(|s| s.labels).collect();
    rows.extend(property_reports(split, &truth, &preds)?);
    Ok(rows)
}

/// Fits the label scaler on the training labels.
pub fn fit_scaler(model: &mut Model, train: &[Sample]) {
    let labels: Vec<[f64; N_PROPS]> = train.iter().map(|s| s.labels).collect();
    model.scaler = LabelScaler::fit(&labels);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub latent_dims: Vec<usize>,
    pub alpha2: Vec<f64>,
    pub alpha3: Vec<f64>,
    /// Relative validation reconstruction error tolerated when preferring a
    /// smaller latent size or a stronger weight.
    pub recon_tolerance: f64,
    pub train: TrainConfig,
}

impl PhaseSchedule {
    /// Full ladders with 400 epochs per rung.
    pub fn full() -> Self {
        Self {
            latent_dims: vec![4, 16, 32, 48, 64],
            alpha2: vec![5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 1.0],
            alpha3: vec![1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            recon_tolerance: 0.15,
            train: TrainConfig { epochs: 400, ..TrainConfig::default() },
        }
    }

    /// Short ladders around the selected weights for small machines.
    pub fn desk() -> Self {
        Self {
            latent_dims: vec![16, 32],
            alpha2: vec![1e-4, 1e-3],
            alpha3: vec![1e-4, 1e-3],
            recon_tolerance: 0.15,
            train: TrainConfig { patience: 20, ..TrainConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if self.latent_dims.is_empty() || self.alpha2.is_empty() || self.alpha3.is_empty() {
            return Err(Error::config("every ladder needs at least one rung"));
        }
        let dims: Vec<f64> = self.latent_dims.iter().map(|&d| d as f64).collect();
        if !increasing(&dims) || !increasing(&self.alpha2) || !increasing(&self.alpha3) {
            return Err(Error::config("ladders must be strictly increasing"));
        }
        if self.train.patience == 0 {
            return Err(Error::config("patience must be at least 1"));
        }
        Ok(())
    }
}

/// One rung of the schedule, mirroring the columns of the phase ledger.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub phase: String,
    pub rung: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub latent_dim: usize,
    pub train_recon: f64,
    pub val_recon: f64,
    pub train_kl: f64,
    pub val_kl: f64,
    pub train_nll: f64,
    pub val_nll: f64,
    pub epochs: usize,
    pub seconds: f64,
}

impl LedgerRow {
    fn from_report(phase: &str, rung: usize, w: &LossWeights, d: usize, r: &TrainReport) -> Self {
        let b = r.best();
        Self {
            phase: phase.into(),
            rung,
            alpha1: w.alpha1,
            alpha2: w.alpha2,
            alpha3: w.alpha3,
            latent_dim: d,
            train_recon: b.train.recon,
            val_recon: b.val.recon,
            train_kl: b.train.kl,
            val_kl: b.val.kl,
            train_nll: b.train.nll,
            val_nll: b.val.nll,
            epochs: r.epochs.len(),
            seconds: r.seconds,
        }
    }
}

pub fn write_ledger(rows: &[LedgerRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record([
        "phase", "rung", "alpha1", "alpha2", "alpha3", "latent_dim", "train_recon", "val_recon", "train_kl",
        "val_kl", "train_nll", "val_nll", "epochs", "seconds",
    ])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Outcome of the staged schedule.
pub struct ScheduleOutcome {
    pub model: Model,
    pub weights: LossWeights,
    pub ledger: Vec<LedgerRow>,
    /// Parameters each rung started from, in ledger order.
    pub rung_starts: Vec<ParamStore>,
}

fn within(recon: f64, reference: f64, tol: f64) -> bool {
    recon <= reference * (1.0 + tol)
}

/// Step 1 sweeps latent sizes on reconstruction alone and keeps the
/// smallest size within tolerance of the best. Steps 2 and 3 walk the KL
/// and NLL weight ladders, each rung warm-started from the previous rung's
/// best parameters, and keep the rung with the lowest KL (step 2) or NLL
/// (step 3) whose reconstruction stays within tolerance.
pub fn progressive_schedule(
    train: &[Sample],
    val: &[Sample],
    base: &ModelConfig,
    schedule: &PhaseSchedule,
) -> Result<ScheduleOutcome> {
    schedule.validate()?;
    let mut ledger = Vec::new();
    let mut rung_starts = Vec::new();
    let cfg = &schedule.train;

    let mut candidates = Vec::new();
    for (rung, &d) in schedule.latent_dims.iter().enumerate() {
        let mut model = Model::new(ModelConfig { latent_dim: d, ..base.clone() })?;
        fit_scaler(&mut model, train);
        rung_starts.push(model.params.clone());
        let w = LossWeights::recon_only();
        let report = run_phase(&mut model, &w, train, val, cfg)?;
        ledger.push(LedgerRow::from_report("step1", rung, &w, d, &report));
        candidates.push((report.best().val.recon, model));
    }
    let best_recon = candidates.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let pick = candidates
        .iter()
        .position(|c| within(c.0, best_recon, schedule.recon_tolerance))
        .expect("the best candidate is always within tolerance");
    let (step1_recon, mut model) = candidates.swap_remove(pick);
    let d = model.latent_dim();
    log::info!("step 1 selected latent size {d}");

    let mut run_ladder = |model: &mut Model,
                          phase: &str,
                          ladder: &[f64],
                          make: &dyn Fn(f64) -> LossWeights,
                          reference: f64,
                          score: &dyn Fn(&LossTerms) -> f64|
     -> Result<(LossWeights, Model, f64)> {
        let mut chosen: Option<(f64, LossWeights, Model, f64)> = None;
        let mut fallback: Option<(f64, LossWeights, Model, f64)> = None;
        for (rung, &a) in ladder.iter().enumerate() {
            let w = make(a);
            rung_starts.push(model.params.clone());
            let report = run_phase(model, &w, train, val, cfg)?;
            ledger.push(LedgerRow::from_report(phase, rung, &w, d, &report));
            let b = report.best().val;
            let entry = (score(&b), w, model.clone(), b.recon);
            if within(b.recon, reference, schedule.recon_tolerance) {
                if chosen.as_ref().is_none_or(|c| entry.0 < c.0) {
                    chosen = Some(entry);
                }
            } else if fallback.as_ref().is_none_or(|c| entry.3 < c.3) {
                fallback = Some(entry);
            }
        }
        let (_, w, m, recon) = chosen.or(fallback).expect("ladder is non-empty");
        Ok((w, m, recon))
    };

    let (w2, mut model, step2_recon) = run_ladder(
        &mut model,
        "step2",
        &schedule.alpha2,
        &|a| LossWeights { alpha1: 1.0, alpha2: a, alpha3: 0.0 },
        step1_recon,
        &|t| t.kl,
    )?;
    let alpha2 = w2.alpha2;
    let (weights, model, _) = run_ladder(
        &mut model,
        "step3",
        &schedule.alpha3,
        &|a| LossWeights { alpha1: 1.0, alpha2, alpha3: a },
        step2_recon,
        &|t| t.nll,
    )?;
    Ok(ScheduleOutcome { model, weights, ledger, rung_starts })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub val: LossTerms,
    pub epochs: usize,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub weights: LossWeights,
    pub scratch: ArmResult,
    pub staged: ArmResult,
    /// Staged wall time over from-scratch wall time.
    pub time_ratio: f64,
}

/// Trains one model from scratch directly at `weights` and one through a
/// staged run at the base latent size whose KL and NLL ladders end at
/// `weights`. Both arms share the seed and the per-phase epoch budget.
pub fn compare_from_scratch(
    train: &[Sample],
    val: &[Sample],
    base: &ModelConfig,
    weights: &LossWeights,
    cfg: &TrainConfig,
    staged: bool,
) -> Result<(Comparison, Model, Model)> {
    let mut scratch = Model::new(base.clone())?;
    fit_scaler(&mut scratch, train);
    let r = run_phase(&mut scratch, weights, train, val, cfg)?;
    let scratch_arm = ArmResult { val: r.best().val, epochs: r.epochs.len(), seconds: r.seconds };

    let mut model = Model::new(base.clone())?;
    fit_scaler(&mut model, train);
    let mut stages = vec![*weights];
    if staged {
        stages = vec![
            LossWeights::recon_only(),
            LossWeights { alpha1: weights.alpha1, alpha2: weights.alpha2, alpha3: 0.0 },
            *weights,
        ];
    }
    let mut last = TrainReport::default();
    let (mut epochs, mut seconds) = (0, 0.0);
    for w in &stages {
        last = run_phase(&mut model, w, train, val, cfg)?;
        epochs += last.epochs.len();
        seconds += last.seconds;
    }
    let staged_arm = ArmResult { val: last.best().val, epochs, seconds };
    let time_ratio = if scratch_arm.seconds > 0.0 { seconds / scratch_arm.seconds } else { f64::NAN };
    Ok((
        Comparison { weights: *weights, scratch: scratch_arm, staged: staged_arm, time_ratio },
        scratch,
        model,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 2,
            input_edge: 4,
            channels: vec![2],
            convs_per_block: 1,
            fc_hidden: vec![6],
            head_channels: vec![],
            mdn_hidden: vec![4],
            deterministic_head: true,
            seed: 1,
        }
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<Sample> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let k = rng.random_range(1..4usize);
                let grid = VoxelGrid::from_fn(8, |x, y, z| x.min(7 - x) < k || (y.min(7 - y) < 1 && z.min(7 - z) < k));
                let vf = grid.volume_fraction();
                Sample::from_grid(format!("s{i}"), &grid, [1000.0 * vf, 0.3 - 0.2 * vf]).unwrap()
            })
            .collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let rows: Vec<usize> = (0..100).collect();
        let s = split_dataset(&rows, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 20, 10));
        assert_eq!(s, split_dataset(&rows, &SplitSpec::default()).unwrap());
        let big: Vec<usize> = (0..46_840).collect();
        let s = split_dataset(&big, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (32_788, 9_368, 4_684));
        assert!(matches!(split_dataset::<usize>(&[], &SplitSpec::default()), Err(Error::EmptyDataset)));
    }

    proptest! {
        #[test]
        fn split_is_a_partition(n in 1usize..300, seed in 0u64..1000) {
            let rows: Vec<usize> = (0..n).collect();
            let s = split_dataset(&rows, &SplitSpec { seed, ..Default::default() }).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort();
            prop_assert_eq!(all, rows);
        }

        #[test]
        fn downselect_keeps_negatives(nus in prop::collection::vec(-0.5..0.5f64, 0..80), keep in 0.05..1.0f64) {
            let rows: Vec<(usize, f64)> = nus.iter().copied().enumerate().collect();
            let out = downselect(&rows, |r| r.1, &DownselectSpec { keep_fraction: keep, seed: 3 }).unwrap();
            let pos = rows.iter().filter(|r| r.1 > 0.0).count();
            let neg: Vec<_> = rows.iter().filter(|r| r.1 <= 0.0).collect();
            let out_neg: Vec<_> = out.iter().filter(|r| r.1 <= 0.0).collect();
            prop_assert_eq!(neg, out_neg);
            prop_assert_eq!(out.iter().filter(|r| r.1 > 0.0).count(), ((pos as f64 * keep) + 1e-9).floor() as usize);
        }
    }

    #[test]
    fn downselect_examples() {
        let rows: Vec<f64> = (0..100).map(|_| 0.3).chain((0..10).map(|_| -0.1)).collect();
        let out = downselect(&rows, |v| *v, &DownselectSpec::default()).unwrap();
        assert_eq!(out.iter().filter(|v| **v > 0.0).count(), 60);
        assert_eq!(out.iter().filter(|v| **v <= 0.0).count(), 10);
        let all = downselect(&rows, |v| *v, &DownselectSpec { keep_fraction: 1.0, seed: 0 }).unwrap();
        assert_eq!(all, rows);
        let neg = vec![-0.1; 7];
        assert_eq!(downselect(&neg, |v| *v, &DownselectSpec { keep_fraction: 0.2, seed: 0 }).unwrap(), neg);
    }

    #[test]
    fn zero_rate_stops_after_patience() {
        let data = toy_samples(12, 1);
        let mut model = Model::new(tiny_config()).unwrap();
        fit_scaler(&mut model, &data);
        let before = model.params.clone();
        let cfg = TrainConfig {
            epochs: 50,
            patience: 4,
            batch_size: 4,
            schedule: LrSchedule { initial_rate: 0.0, decay: 1.0 },
            seed: 0,
        };
        let r = run_phase(&mut model, &LossWeights::recon_only(), &data[..8], &data[8..], &cfg).unwrap();
        assert_eq!(r.epochs.len(), 5);
        assert_eq!(r.best_epoch, 0);
        assert_eq!(model.params, before);
    }

    #[test]
    fn training_reduces_reconstruction_and_keeps_best() {
        let data = toy_samples(24, 2);
        let mut model = Model::new(tiny_config()).unwrap();
        fit_scaler(&mut model, &data);
        let initial = evaluate_losses(&model, &data[16..], 8).unwrap().recon;
        let cfg = TrainConfig {
            epochs: 30,
            patience: 30,
            batch_size: 4,
            schedule: LrSchedule { initial_rate: 0.01, decay: 0.99 },
            seed: 0,
        };
        let r = run_phase(&mut model, &LossWeights::recon_only(), &data[..16], &data[16..], &cfg).unwrap();
        assert!(r.best_epoch < r.epochs.len());
        let best = r.epochs.iter().map(|e| e.val_total).fold(f64::INFINITY, f64::min);
        assert_eq!(best, r.best().val_total);
        let after = evaluate_losses(&model, &data[16..], 4).unwrap().recon;
        assert_eq!(after, r.best().val.recon);
        assert!(after < 0.5 * initial, "{after} vs {initial}");
    }

    #[test]
    fn divergence_is_reported() {
        let data = toy_samples(8, 3);
        let mut model = Model::new(tiny_config()).unwrap();
        let id = model.params.find("enc.mean.b").unwrap();
        model.params.get_mut(id).data_mut()[0] = f64::NAN;
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let r = run_phase(&mut model, &LossWeights::recon_only(), &data[..6], &data[6..], &cfg);
        assert!(matches!(r, Err(Error::NumericalDivergence { .. })));
    }

    #[test]
    fn deterministic_head_phase_touches_only_its_params() {
        let data = toy_samples(16, 4);
        let mut model = Model::new(tiny_config()).unwrap();
        fit_scaler(&mut model, &data);
        let before = model.params.clone();
        let cfg = TrainConfig { epochs: 5, patience: 5, batch_size: 4, schedule: LrSchedule { initial_rate: 0.01, decay: 1.0 }, seed: 0 };
        run_phase_on(&mut model, &LossWeights::recon_only(), &data[..12], &data[12..], &cfg, Trainable::DeterministicHead).unwrap();
        for id in model.vae_params() {
            assert_eq!(model.params.get(id), before.get(id));
        }
        assert!(model.deterministic_params().iter().any(|&id| model.params.get(id) != before.get(id)));
    }

    #[test]
    fn schedule_warm_starts_and_ledgers() {
        let data = toy_samples(20, 5);
        let schedule = PhaseSchedule {
            latent_dims: vec![2],
            alpha2: vec![1e-4, 1e-3],
            alpha3: vec![1e-3],
            recon_tolerance: 0.15,
            train: TrainConfig { epochs: 3, patience: 3, batch_size: 4, schedule: LrSchedule { initial_rate: 0.01, decay: 1.0 }, seed: 0 },
        };
        let out = progressive_schedule(&data[..14], &data[14..], &tiny_config(), &schedule).unwrap();
        assert_eq!(out.ledger.len(), 4);
        assert_eq!(out.rung_starts.len(), 4);
        let phases: Vec<&str> = out.ledger.iter().map(|r| r.phase.as_str()).collect();
        assert_eq!(phases, ["step1", "step2", "step2", "step3"]);
        // Rung 2 of step 2 starts from rung 1's best parameters.
        let mut replay = Model::new(tiny_config()).unwrap();
        fit_scaler(&mut replay, &data[..14]);
        replay.params = out.rung_starts[1].clone();
        run_phase(&mut replay, &LossWeights::new(1.0, 1e-4, 0.0).unwrap(), &data[..14], &data[14..], &schedule.train).unwrap();
        assert_eq!(replay.params, out.rung_starts[2]);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.csv");
        write_ledger(&out.ledger, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "phase,rung,alpha1,alpha2,alpha3,latent_dim,train_recon,val_recon,train_kl,val_kl,train_nll,val_nll,epochs,seconds\n"
        ));
        assert_eq!(read_ledger(&path).unwrap(), out.ledger);
    }

    #[test]
    fn single_rung_schedule_is_one_phase_per_step() {
        let schedule = PhaseSchedule {
            latent_dims: vec![2],
            alpha2: vec![1e-3],
            alpha3: vec![1e-3],
            recon_tolerance: 0.15,
            train: TrainConfig { epochs: 2, patience: 2, batch_size: 4, ..Default::default() },
        };
        let data = toy_samples(10, 6);
        let out = progressive_schedule(&data[..7], &data[7..], &tiny_config(), &schedule).unwrap();
        assert_eq!(out.ledger.len(), 3);
        assert_eq!(out.weights, LossWeights::new(1.0, 1e-3, 1e-3).unwrap());
        assert!(PhaseSchedule { alpha2: vec![1e-3, 1e-4], ..schedule }.validate().is_err());
    }

    #[test]
    fn comparison_arms_match_without_staging() {
        let data = toy_samples(12, 7);
        let cfg = TrainConfig { epochs: 3, patience: 3, batch_size: 4, ..Default::default() };
        let (c, a, b) =
            compare_from_scratch(&data[..9], &data[9..], &tiny_config(), &LossWeights::default(), &cfg, false).unwrap();
        assert_eq!(c.scratch.val, c.staged.val);
        assert_eq!(a.params, b.params);
    }
}
