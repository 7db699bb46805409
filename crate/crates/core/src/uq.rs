//! Latent-space uncertainty quantification: decode, re-encode, resample the
//! latent Gaussian and pool the property head's predictions into aleatoric,
//! epistemic and total spreads.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::homogenizer::bulk_from;
use crate::model::{LatentCode, MdnPrediction, Model, N_PROPS};
use crate::voxel::{binarize, EighthCell, DEFAULT_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UqConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Re-encode the thresholded decode rather than the raw probabilities.
    pub binarize_before_reencode: bool,
    /// Pool aleatoric spread as the root of the mean variance instead of
    /// the mean standard deviation.
    pub variance_mean: bool,
    /// Multiplies the re-encoded latent std; 1 in normal use.
    pub latent_std_scale: f64,
    /// Material draws per latent sample used to induce the bulk modulus
    /// distribution; 0 skips the bulk modulus.
    pub bulk_draws: usize,
}

impl Default for UqConfig {
    fn default() -> Self {
        Self {
            n_samples: 80,
            seed: 0,
            binarize_before_reencode: true,
            variance_mean: false,
            latent_std_scale: 1.0,
            bulk_draws: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropertyUq {
    pub mean: f64,
    pub aleatoric: f64,
    pub epistemic: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UqResult {
    #[serde(rename = "E")]
    pub e: PropertyUq,
    pub nu: PropertyUq,
    #[serde(rename = "K", skip_serializing_if = "Option::is_none", default)]
    pub k: Option<PropertyUq>,
}

impl UqResult {
    pub fn property(&self, p: usize) -> PropertyUq {
        if p == 0 {
            self.e
        } else {
            self.nu
        }
    }
}

/// Pools per-sample means and standard deviations: predictive mean is the
/// mean of means, aleatoric the mean of stds, epistemic the sample std of
/// the means and total their root sum of squares.
pub fn pool(means: &[f64], stds: &[f64], variance_mean: bool) -> Result<PropertyUq> {
    let n = means.len();
    if n < 2 || stds.len() != n {
        return Err(Error::InsufficientSamples(n.min(stds.len())));
    }
    let nf = n as f64;
    // Averaging offsets from the first value keeps identical inputs exact.
    let shifted_mean = |v: &[f64]| v[0] + v.iter().map(|x| x - v[0]).sum::<f64>() / nf;
    let mean = shifted_mean(means);
    let aleatoric = if variance_mean {
        let vars: Vec<f64> = stds.iter().map(|s| s * s).collect();
        shifted_mean(&vars).sqrt()
    } else {
        shifted_mean(stds)
    };
    let epistemic = (means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    Ok(PropertyUq {
        mean,
        aleatoric,
        epistemic,
        total: (aleatoric * aleatoric + epistemic * epistemic).sqrt(),
    })
}

pub fn aggregate(samples: &[MdnPrediction]) -> Result<UqResult> {
    aggregate_with(samples, false)
}

pub fn aggregate_with(samples: &[MdnPrediction], variance_mean: bool) -> Result<UqResult> {
    let col = |p: usize| -> Result<PropertyUq> {
        let m: Vec<f64> = samples.iter().map(|s| s.means[p]).collect();
        let s: Vec<f64> = samples.iter().map(|s| s.stds[p]).collect();
        pool(&m, &s, variance_mean)
    };
    Ok(UqResult { e: col(0)?, nu: col(1)?, k: None })
}

/// Pushes each latent sample's (E, nu) Gaussians through the bulk modulus
/// formula by Monte Carlo, then pools the per-sample K statistics. Draws
/// with nu at or past the incompressible limit are discarded; a sample
/// left with fewer than two usable draws is an error.
pub fn induced_bulk(samples: &[MdnPrediction], draws: usize, seed: u64, variance_mean: bool) -> Result<PropertyUq> {
    if draws < 2 {
        return Err(Error::InsufficientSamples(draws));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6B75_6C6B);
    let mut means = Vec::with_capacity(samples.len());
    let mut stds = Vec::with_capacity(samples.len());
    let mut ks = Vec::with_capacity(draws);
    for s in samples {
        ks.clear();
        let mut last_err = None;
        for _ in 0..draws {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            match bulk_from(s.means[0] + s.stds[0] * a, s.means[1] + s.stds[1] * b) {
                Ok(k) => ks.push(k),
                Err(e) => last_err = Some(e),
            }
        }
        if ks.len() < 2 {
            return Err(last_err.unwrap_or(Error::InsufficientSamples(ks.len())));
        }
        let n = ks.len() as f64;
        let m = ks.iter().sum::<f64>() / n;
        means.push(m);
        stds.push((ks.iter().map(|k| (k - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    }
    pool(&means, &stds, variance_mean)
}

/// Where the loop starts: a unit cell to encode, or a latent mean.
#[derive(Clone, Debug)]
pub enum UqStart<'a> {
    Cell(&'a EighthCell),
    Latent(&'a [f64]),
}

#[derive(Clone, Debug)]
pub struct UqOutput {
    pub result: UqResult,
    /// Latent code of the re-encoded reconstruction.
    pub code: LatentCode,
    pub reconstruction: EighthCell,
    pub samples: Vec<MdnPrediction>,
}

/// Encodes (if needed), decodes, re-encodes, draws `n_samples` latent
/// vectors around the re-encoded mean and pools the property predictions.
pub fn predict_with_uncertainty(model: &Model, start: &UqStart, cfg: &UqConfig) -> Result<UqOutput> {
    if cfg.n_samples < 2 {
        return Err(Error::InsufficientSamples(cfg.n_samples));
    }
    let z_mean = match start {
        UqStart::Cell(c) => model.encode(c)?.mean,
        UqStart::Latent(z) => z.to_vec(),
    };
    let decoded = model.decode(&z_mean)?;
    let reconstruction = if cfg.binarize_before_reencode {
        EighthCell::new(binarize(decoded.grid(), DEFAULT_THRESHOLD))
    } else {
        decoded
    };
    let code = model.encode(&reconstruction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let zs: Vec<Vec<f64>> = (0..cfg.n_samples)
        .map(|_| {
            code.mean
                .iter()
                .zip(&code.std)
                .map(|(m, s)| {
                    let eps: f64 = rng.sample(StandardNormal);
                    m + cfg.latent_std_scale * s * eps
                })
                .collect()
        })
        .collect();
    let refs: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
    let samples = model.mdn_predict_batch(&refs)?;
    let mut result = aggregate_with(&samples, cfg.variance_mean)?;
    if cfg.bulk_draws > 0 {
        result.k = Some(induced_bulk(&samples, cfg.bulk_draws, cfg.seed, cfg.variance_mean)?);
    }
    Ok(UqOutput { result, code, reconstruction, samples })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "total_E")]
    pub total_e: f64,
    pub total_nu: f64,
}

/// Total spread per sample count. Every count reuses the same base seed, so
/// smaller runs see a prefix of the larger runs' latent draws.
pub fn convergence_sweep(model: &Model, start: &UqStart, n_values: &[usize], cfg: &UqConfig) -> Result<Vec<ConvergenceRow>> {
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("sample counts must be non-empty and ascending"));
    }
    n_values
        .iter()
        .map(|&n| {
            let out = predict_with_uncertainty(model, start, &UqConfig { n_samples: n, bulk_draws: 0, ..cfg.clone() })?;
            Ok(ConvergenceRow { n, total_e: out.result.e.total, total_nu: out.result.nu.total })
        })
        .collect()
}

pub fn write_uq_json(result: &UqResult, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(result)?)?;
    Ok(())
}

pub fn write_convergence_csv(rows: &[ConvergenceRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(["N", "total_E", "total_nu"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-property standard deviations `[E, nu]` of a pooled result.
pub fn totals(r: &UqResult) -> [f64; N_PROPS] {
    [r.e.total, r.nu.total]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::voxel::VoxelGrid;
    use proptest::prelude::*;

    fn pred(m: [f64; 2], s: [f64; 2]) -> MdnPrediction {
        MdnPrediction { means: m, stds: s }
    }

    #[test]
    fn identical_samples_have_no_epistemic_spread() {
        let r = aggregate(&vec![pred([5.0, 0.3], [0.7, 0.01]); 10]).unwrap();
        assert_eq!(r.e, PropertyUq { mean: 5.0, aleatoric: 0.7, epistemic: 0.0, total: 0.7 });
        assert_eq!(r.nu, PropertyUq { mean: 0.3, aleatoric: 0.01, epistemic: 0.0, total: 0.01 });
    }

    #[test]
    fn two_sample_closed_form() {
        let r = aggregate(&[pred([0.0, 0.0], [1.0, 1.0]), pred([2.0, 0.0], [1.0, 1.0])]).unwrap();
        assert_eq!(r.e.mean, 1.0);
        assert_eq!(r.e.aleatoric, 1.0);
        assert!((r.e.epistemic - 2f64.sqrt()).abs() < 1e-15);
        assert!((r.e.total - 3f64.sqrt()).abs() < 1e-15);
        assert!(matches!(aggregate(&[pred([0.0; 2], [1.0; 2])]), Err(Error::InsufficientSamples(1))));
    }

    #[test]
    fn variance_mean_alternative() {
        let r = aggregate_with(&[pred([0.0; 2], [1.0; 2]), pred([0.0; 2], [3.0; 2])], true).unwrap();
        assert!((r.e.aleatoric - 5f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn permutation_invariance_and_pythagoras(
            raw in prop::collection::vec((-10.0..10.0f64, 0.01..3.0f64), 2..40),
            rot in 0usize..40,
        ) {
            let s: Vec<MdnPrediction> = raw.iter().map(|&(m, sd)| pred([m, -m], [sd, sd])).collect();
            let mut t = s.clone();
            t.rotate_left(rot % s.len());
            let (a, b) = (aggregate(&s).unwrap(), aggregate(&t).unwrap());
            prop_assert!((a.e.mean - b.e.mean).abs() < 1e-12);
            prop_assert!((a.e.epistemic - b.e.epistemic).abs() < 1e-12);
            prop_assert!((a.e.total.powi(2) - a.e.aleatoric.powi(2) - a.e.epistemic.powi(2)).abs() <= 1e-12 * a.e.total.powi(2));
            // Shifting every std leaves the epistemic part alone.
            let shifted: Vec<MdnPrediction> = s.iter().map(|p| pred(p.means, [p.stds[0] + 1.0, p.stds[1]])).collect();
            prop_assert_eq!(aggregate(&shifted).unwrap().e.epistemic, a.e.epistemic);
        }
    }

    #[test]
    fn duplicated_list_changes_only_the_denominator() {
        let s = vec![pred([1.0, 0.1], [0.2, 0.01]), pred([3.0, 0.2], [0.4, 0.02]), pred([2.0, 0.4], [0.1, 0.03])];
        let doubled: Vec<MdnPrediction> = s.iter().chain(&s).copied().collect();
        let (a, b) = (aggregate(&s).unwrap(), aggregate(&doubled).unwrap());
        assert!((a.e.mean - b.e.mean).abs() < 1e-15);
        assert!((a.e.aleatoric - b.e.aleatoric).abs() < 1e-15);
        // Sum of squares doubles; denominators are n-1 = 2 and 2n-1 = 5.
        let expect = a.e.epistemic * (2.0 * 2.0 / 5.0f64).sqrt();
        assert!((b.e.epistemic - expect).abs() < 1e-14);
    }

    #[test]
    fn bulk_of_certain_predictions() {
        let s = vec![pred([900.0, 0.25], [1e-9, 1e-12]); 3];
        let k = induced_bulk(&s, 16, 0, false).unwrap();
        assert!((k.mean - 600.0).abs() < 1e-3);
        assert!(k.epistemic < 1e-9);
        let bad = vec![pred([900.0, 0.5], [1.0, 0.0]); 2];
        assert!(matches!(induced_bulk(&bad, 4, 0, false), Err(Error::IncompressibleLimit(_))));
    }

    fn tiny_model() -> Model {
        Model::new(ModelConfig {
            latent_dim: 3,
            input_edge: 4,
            channels: vec![2],
            convs_per_block: 1,
            fc_hidden: vec![5],
            head_channels: vec![],
            mdn_hidden: vec![4],
            deterministic_head: false,
            seed: 2,
        })
        .unwrap()
    }

    fn cell() -> EighthCell {
        EighthCell::new(VoxelGrid::from_fn(4, |x, y, _| x < 2 || y == 0))
    }

    #[test]
    fn degenerate_pipeline() {
        let mut m = tiny_model();
        let w = m.params.find("mdn.out.w").unwrap();
        m.params.get_mut(w).data_mut().fill(0.0);
        let b = m.params.find("mdn.out.b").unwrap();
        m.params.get_mut(b).data_mut().copy_from_slice(&[0.0, 0.0, -100.0, -100.0]);
        let cfg = UqConfig { latent_std_scale: 0.0, n_samples: 10, bulk_draws: 0, ..Default::default() };
        let out = predict_with_uncertainty(&m, &UqStart::Cell(&cell()), &cfg).unwrap();
        assert_eq!(out.result.e.epistemic, 0.0);
        assert_eq!(out.result.e.aleatoric, crate::model::STD_FLOOR);
        assert_eq!(out.result.nu.aleatoric, crate::model::STD_FLOOR);
    }

    #[test]
    fn seeded_loop_is_repeatable() {
        let m = tiny_model();
        let cfg = UqConfig { n_samples: 20, ..Default::default() };
        let a = predict_with_uncertainty(&m, &UqStart::Cell(&cell()), &cfg).unwrap();
        let b = predict_with_uncertainty(&m, &UqStart::Cell(&cell()), &cfg).unwrap();
        assert_eq!(a.result, b.result);
        let z = m.encode(&cell()).unwrap().mean;
        let c = predict_with_uncertainty(&m, &UqStart::Latent(&z), &cfg).unwrap();
        assert_eq!(a.result, c.result);
        assert!(a.result.e.total > 0.0 && a.result.e.total.is_finite());
        let soft = predict_with_uncertainty(&m, &UqStart::Cell(&cell()), &UqConfig { binarize_before_reencode: false, ..cfg }).unwrap();
        assert!(!soft.reconstruction.grid().is_binary());
    }

    #[test]
    fn convergence_table_rows() {
        let m = tiny_model();
        let ns: Vec<usize> = (1..=10).map(|k| 10 * k).collect();
        let rows = convergence_sweep(&m, &UqStart::Cell(&cell()), &ns, &UqConfig::default()).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(rows[9].n, 100);
        let one = convergence_sweep(&m, &UqStart::Cell(&cell()), &[80], &UqConfig::default()).unwrap();
        assert_eq!(one.len(), 1);
        assert!(convergence_sweep(&m, &UqStart::Cell(&cell()), &[20, 10], &UqConfig::default()).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("conv.csv");
        write_convergence_csv(&rows, &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("N,total_E,total_nu\n"));
        let j = dir.path().join("uq.json");
        let r = predict_with_uncertainty(&m, &UqStart::Cell(&cell()), &UqConfig::default()).unwrap().result;
        write_uq_json(&r, &j).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&j).unwrap()).unwrap();
        assert!(v["E"]["total"].is_number() && v["nu"]["epistemic"].is_number());
    }
}
