//! Convolutional VAE over eighth cells with a single-Gaussian property head
//! and an optional deterministic head, plus the loss terms and spherical
//! interpolation in latent space.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_params, write_params, Graph, ParamId, ParamStore, Tensor, Var};
use crate::voxel::EighthCell;

/// Lower bound applied to every predicted standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

/// Number of predicted properties: Young's modulus and Poisson's ratio.
pub const N_PROPS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    /// Edge of the eighth cell fed to the encoder.
    pub input_edge: usize,
    /// Channels of each encoder block; each block ends in a 2x pooling.
    pub channels: Vec<usize>,
    pub convs_per_block: usize,
    /// Hidden dense widths between the flattened features and the latent heads.
    pub fc_hidden: Vec<usize>,
    /// Convolutions run at full resolution before the output layer.
    pub head_channels: Vec<usize>,
    pub mdn_hidden: Vec<usize>,
    pub deterministic_head: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Small network for 16^3 cells.
    pub fn desk() -> Self {
        Self {
            latent_dim: 16,
            input_edge: 8,
            channels: vec![16, 32],
            convs_per_block: 1,
            fc_hidden: vec![128],
            head_channels: vec![8],
            mdn_hidden: vec![64, 32],
            deterministic_head: true,
            seed: 0,
        }
    }

    /// The full-size architecture for 48^3 cells.
    pub fn full() -> Self {
        Self {
            latent_dim: 32,
            input_edge: 24,
            channels: vec![32, 64, 96],
            convs_per_block: 3,
            fc_hidden: vec![1000, 100],
            head_channels: vec![16, 16],
            mdn_hidden: vec![256, 128],
            deterministic_head: true,
            seed: 0,
        }
    }

    pub fn bottleneck_edge(&self) -> usize {
        self.input_edge >> self.channels.len()
    }

    pub fn flat_features(&self) -> usize {
        self.channels.last().copied().unwrap_or(1) * self.bottleneck_edge().pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be at least 1"));
        }
        if self.channels.is_empty() || self.convs_per_block == 0 {
            return Err(Error::config("need at least one conv block"));
        }
        let div = 1usize << self.channels.len();
        if self.input_edge % div != 0 || self.input_edge < div {
            return Err(Error::config(format!(
                "input edge {} cannot be pooled {} times",
                self.input_edge,
                self.channels.len()
            )));
        }
        Ok(())
    }
}

/// Relative weights of reconstruction, KL and property NLL.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
}

impl LossWeights {
    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64) -> Result<Self> {
        let w = Self { alpha1, alpha2, alpha3 };
        if [alpha1, alpha2, alpha3].iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if alpha1 + alpha2 + alpha3 == 0.0 {
            return Err(Error::config("loss weights cannot all be zero"));
        }
        Ok(w)
    }

    pub fn recon_only() -> Self {
        Self { alpha1: 1.0, alpha2: 0.0, alpha3: 0.0 }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha1: 1.0, alpha2: 1e-3, alpha3: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Predicted Gaussian per property, in physical units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdnPrediction {
    pub means: [f64; N_PROPS],
    pub stds: [f64; N_PROPS],
}

/// Per-property affine map between physical labels and network targets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScaler {
    pub mean: [f64; N_PROPS],
    pub std: [f64; N_PROPS],
}

impl Default for LabelScaler {
    fn default() -> Self {
        Self { mean: [0.0; N_PROPS], std: [1.0; N_PROPS] }
    }
}

impl LabelScaler {
    pub fn fit(labels: &[[f64; N_PROPS]]) -> Self {
        let mut s = Self::default();
        if labels.is_empty() {
            return s;
        }
        let n = labels.len() as f64;
        for p in 0..N_PROPS {
            let m = labels.iter().map(|l| l[p]).sum::<f64>() / n;
            let var = labels.iter().map(|l| (l[p] - m).powi(2)).sum::<f64>() / n;
            s.mean[p] = m;
            s.std[p] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        s
    }

    pub fn to_scaled(&self, y: [f64; N_PROPS]) -> [f64; N_PROPS] {
        std::array::from_fn(|p| (y[p] - self.mean[p]) / self.std[p])
    }
}

struct Dense {
    w: ParamId,
    b: ParamId,
}

struct Conv {
    w: ParamId,
    b: ParamId,
}

/// The network with its parameters. Parameters are addressed by name in the
/// store so checkpoints are self-describing.
pub struct Model {
    config: ModelConfig,
    pub params: ParamStore,
    pub scaler: LabelScaler,
    enc_convs: Vec<Conv>,
    enc_fc: Vec<Dense>,
    enc_mean: Dense,
    enc_logvar: Dense,
    dec_fc: Vec<Dense>,
    dec_convs: Vec<Conv>,
    dec_head: Vec<Conv>,
    dec_out: Conv,
    mdn_fc: Vec<Dense>,
    mdn_out: Dense,
    det_fc: Vec<Dense>,
    det_out: Option<Dense>,
}

/// Parameters enter a graph either as trainable leaves or as constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Graph handles produced by one forward pass over a batch.
pub struct Forward {
    pub mean: Var,
    pub logvar: Var,
    pub recon: Var,
    pub prop_mean: Var,
    pub prop_std: Var,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let dense = |params: &mut ParamStore, name: String, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng| Dense {
            w: params.add(format!("{name}.w"), Tensor::glorot(&[n_in, n_out], n_in, n_out, rng)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[n_out])),
        };
        let conv = |params: &mut ParamStore, name: String, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng| Conv {
            w: params.add(
                format!("{name}.w"),
                Tensor::glorot(&[c_out, c_in, 3, 3, 3], c_in * 27, c_out * 27, rng),
            ),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[c_out])),
        };

        let mut enc_convs = Vec::new();
        let mut c_in = 1;
        for &c in &config.channels {
            for _ in 0..config.convs_per_block {
                enc_convs.push(conv(&mut params, format!("enc.conv{}", enc_convs.len()), c_in, c, &mut rng));
                c_in = c;
            }
        }
        let mut enc_fc = Vec::new();
        let mut n_in = config.flat_features();
        for &h in &config.fc_hidden {
            enc_fc.push(dense(&mut params, format!("enc.fc{}", enc_fc.len()), n_in, h, &mut rng));
            n_in = h;
        }
        let d = config.latent_dim;
        let enc_mean = dense(&mut params, "enc.mean".into(), n_in, d, &mut rng);
        let enc_logvar = dense(&mut params, "enc.logvar".into(), n_in, d, &mut rng);

        let mut dec_fc = Vec::new();
        let mut n_in = d;
        for &h in config.fc_hidden.iter().rev().chain(std::iter::once(&config.flat_features())) {
            dec_fc.push(dense(&mut params, format!("dec.fc{}", dec_fc.len()), n_in, h, &mut rng));
            n_in = h;
        }
        let mut dec_convs = Vec::new();
        let mut c_in = *config.channels.last().unwrap();
        for &c in config.channels.iter().rev() {
            for _ in 0..config.convs_per_block {
                dec_convs.push(conv(&mut params, format!("dec.conv{}", dec_convs.len()), c_in, c, &mut rng));
                c_in = c;
            }
        }
        let mut dec_head = Vec::new();
        for &c in &config.head_channels {
            dec_head.push(conv(&mut params, format!("dec.head{}", dec_head.len()), c_in, c, &mut rng));
            c_in = c;
        }
        let dec_out = conv(&mut params, "dec.out".into(), c_in, 1, &mut rng);

        let mut mdn_fc = Vec::new();
        let mut n_in = d;
        for &h in &config.mdn_hidden {
            mdn_fc.push(dense(&mut params, format!("mdn.fc{}", mdn_fc.len()), n_in, h, &mut rng));
            n_in = h;
        }
        let mdn_out = dense(&mut params, "mdn.out".into(), n_in, 2 * N_PROPS, &mut rng);

        let mut det_fc = Vec::new();
        let mut det_out = None;
        if config.deterministic_head {
            let mut n_in = d;
            for &h in &config.mdn_hidden {
                det_fc.push(dense(&mut params, format!("det.fc{}", det_fc.len()), n_in, h, &mut rng));
                n_in = h;
            }
            det_out = Some(dense(&mut params, "det.out".into(), n_in, N_PROPS, &mut rng));
        }

        Ok(Self {
            config,
            params,
            scaler: LabelScaler::default(),
            enc_convs,
            enc_fc,
            enc_mean,
            enc_logvar,
            dec_fc,
            dec_convs,
            dec_head,
            dec_out,
            mdn_fc,
            mdn_out,
            det_fc,
            det_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Ids of the deterministic head's parameters.
    pub fn deterministic_params(&self) -> Vec<ParamId> {
        self.det_fc
            .iter()
            .chain(self.det_out.iter())
            .flat_map(|l| [l.w, l.b])
            .collect()
    }

    /// Ids of every parameter outside the deterministic head.
    pub fn vae_params(&self) -> Vec<ParamId> {
        let det = self.deterministic_params();
        self.params.ids().filter(|id| !det.contains(id)).collect()
    }

    fn p(&self, g: &Graph, id: ParamId, mode: Mode) -> Var {
        match mode {
            Mode::Train => g.param(&self.params, id),
            Mode::Infer => g.constant(self.params.get(id).clone()),
        }
    }

    fn dense(&self, g: &Graph, x: Var, l: &Dense, mode: Mode) -> Result<Var> {
        g.dense(x, self.p(g, l.w, mode), self.p(g, l.b, mode))
    }

    fn conv(&self, g: &Graph, x: Var, l: &Conv, mode: Mode) -> Result<Var> {
        g.conv3d(x, self.p(g, l.w, mode), self.p(g, l.b, mode), 1, 1)
    }

    /// Batch of eighth cells as a `[B, 1, e, e, e]` tensor.
    pub fn batch_tensor(&self, cells: &[&[f64]]) -> Result<Tensor> {
        let e = self.config.input_edge;
        let mut data = Vec::with_capacity(cells.len() * e * e * e);
        for c in cells {
            if c.len() != e * e * e {
                return Err(Error::shape(format!("expected {} voxels, got {}", e * e * e, c.len())));
            }
            data.extend_from_slice(c);
        }
        Tensor::new(vec![cells.len(), 1, e, e, e], data)
    }

    /// Returns `(mean, logvar)`, each `[B, d]`.
    pub fn encode_graph(&self, g: &Graph, x: Var, mode: Mode) -> Result<(Var, Var)> {
        let shape = g.shape(x);
        let e = self.config.input_edge;
        if shape.len() != 5 || shape[1..] != [1, e, e, e] {
            return Err(Error::shape(format!("encoder expects [B, 1, {e}, {e}, {e}], got {shape:?}")));
        }
        let batch = shape[0];
        let mut h = x;
        for (i, l) in self.enc_convs.iter().enumerate() {
            h = g.relu(self.conv(g, h, l, mode)?);
            if (i + 1) % self.config.convs_per_block == 0 {
                h = g.maxpool3d(h, 2)?;
            }
        }
        h = g.reshape(h, &[batch, self.config.flat_features()])?;
        for l in &self.enc_fc {
            h = g.relu(self.dense(g, h, l, mode)?);
        }
        let mean = self.dense(g, h, &self.enc_mean, mode)?;
        let logvar = self.dense(g, h, &self.enc_logvar, mode)?;
        Ok((mean, logvar))
    }

    /// `z [B, d]` to voxel probabilities `[B, 1, e, e, e]`.
    pub fn decode_graph(&self, g: &Graph, z: Var, mode: Mode) -> Result<Var> {
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != self.config.latent_dim {
            return Err(Error::shape(format!(
                "decoder expects [B, {}], got {shape:?}",
                self.config.latent_dim
            )));
        }
        let batch = shape[0];
        let mut h = z;
        for l in &self.dec_fc {
            h = g.relu(self.dense(g, h, l, mode)?);
        }
        let b = self.config.bottleneck_edge();
        h = g.reshape(h, &[batch, *self.config.channels.last().unwrap(), b, b, b])?;
        for (i, l) in self.dec_convs.iter().enumerate() {
            h = g.relu(self.conv(g, h, l, mode)?);
            if (i + 1) % self.config.convs_per_block == 0 {
                h = g.upsample3d(h, 2)?;
            }
        }
        for l in &self.dec_head {
            h = g.relu(self.conv(g, h, l, mode)?);
        }
        let out = self.conv(g, h, &self.dec_out, mode)?;
        Ok(g.sigmoid(out))
    }

    fn mlp(&self, g: &Graph, z: Var, hidden: &[Dense], mode: Mode) -> Result<Var> {
        let shape = g.shape(z);
        if shape.len() != 2 || shape[1] != self.config.latent_dim {
            return Err(Error::shape(format!(
                "head expects [B, {}], got {shape:?}",
                self.config.latent_dim
            )));
        }
        let mut h = z;
        for l in hidden {
            h = g.relu(self.dense(g, h, l, mode)?);
        }
        Ok(h)
    }

    /// Property head in scaled units: `(means, stds)`, each `[B, 2]`.
    pub fn mdn_graph(&self, g: &Graph, z: Var, mode: Mode) -> Result<(Var, Var)> {
        let h = self.mlp(g, z, &self.mdn_fc, mode)?;
        let raw = self.dense(g, h, &self.mdn_out, mode)?;
        let means = g.slice_cols(raw, 0, N_PROPS)?;
        let log_std = g.slice_cols(raw, N_PROPS, 2 * N_PROPS)?;
        let stds = g.clamp_min(g.exp(log_std), STD_FLOOR);
        Ok((means, stds))
    }

    /// Deterministic head in scaled units, `[B, 2]`.
    pub fn deterministic_graph(&self, g: &Graph, z: Var, mode: Mode) -> Result<Var> {
        let out = self
            .det_out
            .as_ref()
            .ok_or_else(|| Error::config("model was built without a deterministic head"))?;
        let h = self.mlp(g, z, &self.det_fc, mode)?;
        self.dense(g, h, out, mode)
    }

    /// Full pass for a batch. The latent sample feeds the decoder; the
    /// property head reads the latent mean.
    pub fn forward(&self, g: &Graph, x: Var, noise: Option<&Tensor>, mode: Mode) -> Result<Forward> {
        let (mean, logvar) = self.encode_graph(g, x, mode)?;
        let z = match noise {
            Some(eps) => {
                let std = g.exp(g.scale(logvar, 0.5));
                let e = g.constant(eps.clone());
                g.add(mean, g.mul(std, e)?)?
            }
            None => mean,
        };
        let recon = self.decode_graph(g, z, mode)?;
        let (prop_mean, prop_std) = self.mdn_graph(g, mean, mode)?;
        Ok(Forward { mean, logvar, recon, prop_mean, prop_std })
    }

    pub fn encode_batch(&self, cells: &[&[f64]]) -> Result<Vec<LatentCode>> {
        let g = Graph::new();
        let x = g.constant(self.batch_tensor(cells)?);
        let (mean, logvar) = self.encode_graph(&g, x, Mode::Infer)?;
        let (m, lv) = (g.value(mean), g.value(logvar));
        let d = self.config.latent_dim;
        Ok((0..cells.len())
            .map(|i| LatentCode {
                mean: m.row(i).to_vec(),
                std: lv.row(i).iter().map(|v| (0.5 * v).exp()).collect(),
            })
            .inspect(|c| debug_assert_eq!(c.mean.len(), d))
            .collect())
    }

    pub fn encode(&self, cell: &EighthCell) -> Result<LatentCode> {
        if cell.edge() != self.config.input_edge {
            return Err(Error::shape(format!(
                "eighth cell edge {} does not match model edge {}",
                cell.edge(),
                self.config.input_edge
            )));
        }
        Ok(self.encode_batch(&[cell.grid().values()])?.remove(0))
    }

    fn latent_tensor(&self, zs: &[&[f64]]) -> Result<Tensor> {
        let d = self.config.latent_dim;
        let mut data = Vec::with_capacity(zs.len() * d);
        for z in zs {
            if z.len() != d {
                return Err(Error::shape(format!("latent vector of length {} for d = {d}", z.len())));
            }
            data.extend_from_slice(z);
        }
        Tensor::new(vec![zs.len(), d], data)
    }

    /// Continuous voxel probabilities for a batch of latent vectors.
    pub fn decode_batch(&self, zs: &[&[f64]]) -> Result<Vec<EighthCell>> {
        let g = Graph::new();
        let z = g.constant(self.latent_tensor(zs)?);
        let out = self.decode_graph(&g, z, Mode::Infer)?;
        let out = g.value(out);
        let e = self.config.input_edge;
        let n = e * e * e;
        out.data()
            .chunks(n)
            .map(|c| EighthCell::from_values(e, c.to_vec()))
            .collect()
    }

    pub fn decode(&self, z: &[f64]) -> Result<EighthCell> {
        Ok(self.decode_batch(&[z])?.remove(0))
    }

    pub fn mdn_predict_batch(&self, zs: &[&[f64]]) -> Result<Vec<MdnPrediction>> {
        let g = Graph::new();
        let z = g.constant(self.latent_tensor(zs)?);
        let (m, s) = self.mdn_graph(&g, z, Mode::Infer)?;
        let (m, s) = (g.value(m), g.value(s));
        Ok((0..zs.len())
            .map(|i| MdnPrediction {
                means: std::array::from_fn(|p| self.scaler.mean[p] + self.scaler.std[p] * m.row(i)[p]),
                stds: std::array::from_fn(|p| self.scaler.std[p] * s.row(i)[p]),
            })
            .collect())
    }

    pub fn mdn_predict(&self, z: &[f64]) -> Result<MdnPrediction> {
        Ok(self.mdn_predict_batch(&[z])?.remove(0))
    }

    /// Point prediction `[E, nu]` from the deterministic head.
    pub fn deterministic_predict(&self, z: &[f64]) -> Result<[f64; N_PROPS]> {
        let g = Graph::new();
        let zt = g.constant(self.latent_tensor(&[z])?);
        let out = self.deterministic_graph(&g, zt, Mode::Infer)?;
        let out = g.value(out);
        Ok(std::array::from_fn(|p| self.scaler.mean[p] + self.scaler.std[p] * out.data()[p]))
    }

    /// Writes `<stem>.params` and `<stem>.json`.
    pub fn save(&self, stem: &Path, meta: &CheckpointMeta) -> Result<()> {
        let (blob, side) = checkpoint_paths(stem);
        write_params(&self.params, BufWriter::new(File::create(blob)?))?;
        let sidecar = Sidecar {
            model_config: self.config.clone(),
            label_scaler: self.scaler,
            meta: meta.clone(),
        };
        serde_json::to_writer_pretty(BufWriter::new(File::create(side)?), &sidecar)?;
        Ok(())
    }

    pub fn load(stem: &Path) -> Result<(Self, CheckpointMeta)> {
        let (blob, side) = checkpoint_paths(stem);
        let sidecar: Sidecar = serde_json::from_reader(BufReader::new(File::open(side)?))?;
        let stored = read_params(BufReader::new(File::open(blob)?))?;
        let mut model = Model::new(sidecar.model_config)?;
        if stored.len() != model.params.len() || model.params.load_matching(&stored) != stored.len() {
            return Err(Error::Format("checkpoint parameters do not match the model config".into()));
        }
        model.scaler = sidecar.label_scaler;
        Ok((model, sidecar.meta))
    }
}

impl Clone for Model {
    fn clone(&self) -> Self {
        let mut m = Model::new(self.config.clone()).expect("config was validated");
        m.params = self.params.clone();
        m.scaler = self.scaler;
        m
    }
}

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("params"), stem.with_extension("json"))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub loss_weights: Option<LossWeights>,
    pub training_phase: String,
    pub epoch: usize,
    pub metrics: serde_json::Map<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    model_config: ModelConfig,
    label_scaler: LabelScaler,
    #[serde(flatten)]
    meta: CheckpointMeta,
}

/// `z = mean + std * eps` with standard-normal `eps`.
pub fn reparameterize<R: Rng>(code: &LatentCode, rng: &mut R) -> Vec<f64> {
    code.mean
        .iter()
        .zip(&code.std)
        .map(|(m, s)| {
            let eps: f64 = rng.sample(StandardNormal);
            m + s * eps
        })
        .collect()
}

/// KL divergence to the standard normal, summed over dimensions and
/// averaged over codes.
pub fn kl_loss(codes: &[LatentCode]) -> f64 {
    if codes.is_empty() {
        return 0.0;
    }
    let total: f64 = codes
        .iter()
        .map(|c| {
            c.mean
                .iter()
                .zip(&c.std)
                .map(|(m, s)| 0.5 * (m * m + s * s - 1.0) - s.ln())
                .sum::<f64>()
        })
        .sum();
    total / codes.len() as f64
}

pub fn recon_loss(x: &[f64], x_hat: &[f64]) -> Result<f64> {
    if x.len() != x_hat.len() || x.is_empty() {
        return Err(Error::shape(format!("recon of {} vs {} voxels", x.len(), x_hat.len())));
    }
    Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.len() as f64)
}

/// Negative log-likelihood of labels under the predicted Gaussians, summed
/// over properties and averaged over the batch.
pub fn mdn_nll(preds: &[MdnPrediction], labels: &[[f64; N_PROPS]]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut total = 0.0;
    for (p, y) in preds.iter().zip(labels) {
        for k in 0..N_PROPS {
            let s = p.stds[k];
            if !(s > 0.0) {
                return Err(Error::NonPositiveStd(s));
            }
            total += 0.5 * (2.0 * PI * s * s).ln() + (y[k] - p.means[k]).powi(2) / (2.0 * s * s);
        }
    }
    Ok(total / preds.len() as f64)
}

/// The three loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub recon: f64,
    pub kl: f64,
    pub nll: f64,
}

impl LossTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.alpha1 * self.recon + w.alpha2 * self.kl + w.alpha3 * self.nll
    }
}

pub fn total_loss(
    x: &[f64],
    x_hat: &[f64],
    codes: &[LatentCode],
    preds: &[MdnPrediction],
    labels: &[[f64; N_PROPS]],
    w: &LossWeights,
) -> Result<f64> {
    let terms = LossTerms {
        recon: recon_loss(x, x_hat)?,
        kl: kl_loss(codes),
        nll: mdn_nll(preds, labels)?,
    };
    Ok(terms.weighted(w))
}

/// Graph form of [`kl_loss`] for `[B, d]` mean and log-variance.
pub fn kl_graph(g: &Graph, mean: Var, logvar: Var) -> Result<Var> {
    let batch = g.shape(mean)[0] as f64;
    let var = g.exp(logvar);
    let t = g.add(g.square(mean), var)?;
    let t = g.sub(t, logvar)?;
    let t = g.add_scalar(t, -1.0);
    let s = g.sum(t);
    Ok(g.scale(s, 0.5 / batch))
}

/// Graph form of [`mdn_nll`] with `[B, 2]` operands in scaled units.
pub fn nll_graph(g: &Graph, means: Var, stds: Var, labels: Var) -> Result<Var> {
    let batch = g.shape(means)[0] as f64;
    let n = g.value(means).len() as f64;
    let r = g.div(g.sub(labels, means)?, stds)?;
    let quad = g.scale(g.sum(g.square(r)), 0.5);
    let logs = g.sum(g.ln(stds));
    let t = g.add(quad, logs)?;
    let t = g.add_scalar(t, 0.5 * n * (2.0 * PI).ln());
    Ok(g.scale(t, 1.0 / batch))
}

/// Spherical linear interpolation. Parallel inputs fall back to linear
/// interpolation; antiparallel inputs have no unique great circle.
pub fn slerp(z1: &[f64], z2: &[f64], t: f64) -> Result<Vec<f64>> {
    if z1.len() != z2.len() {
        return Err(Error::shape(format!("slerp of lengths {} and {}", z1.len(), z2.len())));
    }
    let n1 = z1.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n2 = z2.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::DegenerateAngle(f64::NAN));
    }
    let cos = (z1.iter().zip(z2).map(|(a, b)| a * b).sum::<f64>() / (n1 * n2)).clamp(-1.0, 1.0);
    if cos <= -1.0 + 1e-12 {
        return Err(Error::DegenerateAngle(PI));
    }
    if cos >= 1.0 - 1e-12 {
        return Ok(z1.iter().zip(z2).map(|(a, b)| (1.0 - t) * a + t * b).collect());
    }
    let theta = cos.acos();
    let s = theta.sin();
    let (w1, w2) = (((1.0 - t) * theta).sin() / s, (t * theta).sin() / s);
    Ok(z1.iter().zip(z2).map(|(a, b)| w1 * a + w2 * b).collect())
}
