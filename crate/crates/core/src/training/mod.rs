//! Training-set construction and Rprop optimization of denoiser modules
//! and the speech autoencoder.

mod rprop;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_manifest_value, mix_at_snr, realize, DatasetManifest};
use crate::error::{ensure_shape, Error, Result};
use crate::exec::Exec;
use crate::fsutil;
use crate::network::{backprop_into, init_weights, Activation, DropoutMode, DropoutSpec, Gradients, Network};
use crate::signal::{concat_context, magnitude, stft, MaskMatrix, Spectrogram, Waveform};

pub use rprop::{rprop_step, RpropConfig, RpropState};

/// Mixture bins quieter than this get a zero mask.
pub const MASK_FLOOR: f64 = 1e-10;
/// Pairs per gradient chunk. Chunks are reduced in order, which keeps the
/// batch gradient independent of the thread count.
const GRADIENT_CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// Everything needed to turn a manifest into a trained network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub frame_size: usize,
    pub hop: usize,
    pub context: usize,
    /// Layer widths from input to output.
    pub dims: Vec<usize>,
    pub activations: Vec<Activation>,
    #[serde(default)]
    pub rprop: RpropConfig,
    pub dropout: DropoutSpec,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    fn with_hidden(frame_size: usize, context: usize, hidden: &[usize], output: Activation) -> Self {
        let bins = frame_size / 2 + 1;
        let dims: Vec<usize> = std::iter::once(context * bins)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(bins))
            .collect();
        let mut activations = vec![Activation::ModifiedRelu; hidden.len()];
        activations.push(output);
        Self {
            frame_size,
            hop: frame_size / 4,
            context,
            dims,
            activations,
            rprop: RpropConfig::default(),
            dropout: DropoutSpec::uniform(0.8, DropoutMode::Sampled, 0),
            seed: 0,
        }
    }

    /// Mask-estimating module: logistic output over `context` frames.
    pub fn denoiser(frame_size: usize, context: usize, hidden: &[usize]) -> Self {
        Self::with_hidden(frame_size, context, hidden, Activation::Logistic)
    }

    /// Speech autoencoder: nonnegative (modified ReLU) magnitude output.
    pub fn autoencoder(frame_size: usize, context: usize, hidden: &[usize]) -> Self {
        Self::with_hidden(frame_size, context, hidden, Activation::ModifiedRelu)
    }

    pub fn bins(&self) -> usize {
        self.frame_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.context == 0 || self.context.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "context must be a positive odd count, got {}",
                self.context
            )));
        }
        if self.dims.len() < 2 || self.activations.len() != self.dims.len() - 1 {
            return Err(Error::InvalidArgument(
                "dims must list input..output and activations one per layer".into(),
            ));
        }
        let bins = self.bins();
        if self.dims[0] != self.context * bins || *self.dims.last().unwrap() != bins {
            return Err(Error::InvalidArgument(format!(
                "dims {:?} do not fit {} context frames of {bins} bins",
                self.dims, self.context
            )));
        }
        self.rprop.validate()?;
        self.dropout.validate(self.dims.len() - 1)
    }
}

/// A dataset manifest plus the configuration to train on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    #[serde(flatten)]
    pub dataset: DatasetManifest,
    pub config: TrainConfig,
}

pub fn load_train_manifest(path: impl AsRef<Path>) -> Result<TrainManifest> {
    let (mut m, base): (TrainManifest, _) = load_manifest_value(path.as_ref())?;
    m.dataset.base_dir = base;
    m.dataset.validate()?;
    m.config.validate()?;
    Ok(m)
}

pub fn save_train_manifest(path: impl AsRef<Path>, m: &TrainManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(m)?;
    bytes.push(b'\n');
    fsutil::write_atomic(path.as_ref(), &bytes)
}

/// Ideal ratio mask `|s| / |x|`, clipped to `[0, 1]`.
pub fn mask_targets(clean: &Spectrogram, mixture: &Spectrogram) -> Result<MaskMatrix> {
    ensure_shape!(
        clean.frames() == mixture.frames() && clean.bins() == mixture.bins(),
        "clean {}x{} vs mixture {}x{}",
        clean.frames(),
        clean.bins(),
        mixture.frames(),
        mixture.bins()
    );
    let data = clean
        .data()
        .iter()
        .zip(mixture.data())
        .map(|(s, x)| {
            let xm = x.norm();
            if xm < MASK_FLOOR {
                0.0
            } else {
                (s.norm() / xm).min(1.0)
            }
        })
        .collect();
    MaskMatrix::new(clean.frames(), clean.bins(), data)
}

/// Pairs of context features of the mixture and the center frame's mask.
pub fn denoiser_pairs(
    clean: &Waveform,
    mixture: &Waveform,
    frame_size: usize,
    hop: usize,
    context: usize,
) -> Result<Vec<TrainPair>> {
    let s = stft(clean, frame_size, hop)?;
    let x = stft(mixture, frame_size, hop)?;
    let mask = mask_targets(&s, &x)?;
    let features = concat_context(&magnitude(&x), context)?;
    Ok((0..features.rows())
        .map(|t| TrainPair {
            input: features.row(t).to_vec(),
            target: mask.frame(t).to_vec(),
        })
        .collect())
}

/// Mixes each (clean, noise, SNR) triple and collects its mask pairs.
pub fn build_denoiser_dataset(
    items: &[(Waveform, Waveform, f64)],
    frame_size: usize,
    hop: usize,
    context: usize,
    exec: Exec,
) -> Result<Vec<TrainPair>> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("no utterances to build a dataset from".into()));
    }
    let per_utt = exec.try_map(items, |(clean, noise, snr)| {
        let (mixture, _) = mix_at_snr(clean, noise, *snr)?;
        denoiser_pairs(clean, &mixture, frame_size, hop, context)
    })?;
    Ok(per_utt.into_iter().flatten().collect())
}

/// Clean context features in, clean center frame out. Corruption happens
/// at training time through input dropout.
pub fn build_dae_dataset(
    cleans: &[Waveform],
    frame_size: usize,
    hop: usize,
    context: usize,
    exec: Exec,
) -> Result<Vec<TrainPair>> {
    if cleans.is_empty() {
        return Err(Error::InvalidArgument("no utterances to build a dataset from".into()));
    }
    let per_utt = exec.try_map(cleans, |clean| {
        let m = magnitude(&stft(clean, frame_size, hop)?);
        let features = concat_context(&m, context)?;
        Ok::<_, Error>(
            (0..features.rows())
                .map(|t| TrainPair {
                    input: features.row(t).to_vec(),
                    target: m.frame(t).to_vec(),
                })
                .collect::<Vec<_>>(),
        )
    })?;
    Ok(per_utt.into_iter().flatten().collect())
}

/// Seeded epoch shuffling; batches run sequentially through each
/// permutation and wrap into the next one.
struct BatchSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { rng, order, cursor: 0 }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.cursor == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                self.order[self.cursor - 1]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Inference-ready weights (dropout keep rates folded in), rounded to
    /// `f32` exactly as a model file stores them.
    pub network: Network,
    /// Mean per-pair loss of each iteration's batch.
    pub loss_curve: Vec<f64>,
}

/// Minimizes the summed squared error over mini-batches with iRprop−.
///
/// Dropout masks are drawn from a stream keyed by (seed, iteration, batch
/// position), so results do not depend on how chunks are scheduled.
pub fn train(
    mut net: Network,
    data: &[TrainPair],
    cfg: &RpropConfig,
    dropout: &DropoutSpec,
    seed: u64,
    exec: Exec,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    cfg.validate()?;
    dropout.validate(net.layers().len())?;
    for (i, p) in data.iter().enumerate() {
        ensure_shape!(
            p.input.len() == net.input_dim() && p.target.len() == net.output_dim(),
            "pair {i} is {}->{} but the network is {}->{}",
            p.input.len(),
            p.target.len(),
            net.input_dim(),
            net.output_dim()
        );
    }

    let mut state = RpropState::new(&net, cfg);
    let mut sampler = BatchSampler::new(data.len(), seed);
    let mask_seed = seed.rotate_left(32) ^ dropout.seed ^ 0x5eed_d80f;
    let mut curve = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let batch = sampler.next_batch(cfg.batch_size);
        let chunks: Vec<(usize, &[usize])> = batch
            .chunks(GRADIENT_CHUNK)
            .enumerate()
            .map(|(c, idx)| (c * GRADIENT_CHUNK, idx))
            .collect();
        let net_ref = &net;
        let partials = exec.try_map(&chunks, |&(offset, idx)| {
            let mut grads = Gradients::zeros_like(net_ref);
            let mut loss = 0.0;
            for (k, &i) in idx.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
                rng.set_stream((iteration * cfg.batch_size + offset + k) as u64);
                let gates = dropout.gates(net_ref, &mut rng)?;
                loss += backprop_into(net_ref, &data[i].input, &data[i].target, &gates, &mut grads)?;
            }
            Ok::<_, Error>((loss, grads))
        })?;
        let mut total = Gradients::zeros_like(&net);
        let mut loss = 0.0;
        for (l, g) in &partials {
            loss += l;
            total.add_assign(g);
        }
        let mean = loss / batch.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became non-finite at iteration {iteration}"
            )));
        }
        curve.push(mean);
        rprop_step(&mut state, &total, &mut net, cfg)?;
    }
    net.fold_keep(dropout);
    net.quantize_f32();
    Ok(TrainOutcome {
        network: net,
        loss_curve: curve,
    })
}

/// `iteration,mean_loss` rows.
pub fn loss_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("iteration,mean_loss\n");
    for (i, l) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

fn fresh_network(cfg: &TrainConfig) -> Result<Network> {
    init_weights(&cfg.dims, &cfg.activations, cfg.seed)
}

/// Trains a mask-estimating module on the mixtures a manifest describes.
pub fn train_denoiser(manifest: &TrainManifest, exec: Exec) -> Result<TrainOutcome> {
    let cfg = &manifest.config;
    cfg.validate()?;
    if cfg.activations.last() != Some(&Activation::Logistic) {
        return Err(Error::InvalidArgument(
            "denoiser modules need a logistic output layer".into(),
        ));
    }
    let ds = &manifest.dataset;
    let realized = exec.try_map(&ds.records, |r| {
        if r.noise_path.is_none() {
            return Err(Error::Manifest(format!(
                "record {} has no noise; denoiser training needs mixtures",
                r.clean_path.display()
            )));
        }
        realize(ds, r)
    })?;
    let items: Vec<(Waveform, Waveform, f64)> = realized
        .into_iter()
        .zip(&ds.records)
        .map(|(r, rec)| (r.clean, r.noise, rec.snr_db))
        .collect();
    let data = build_denoiser_dataset(&items, cfg.frame_size, cfg.hop, cfg.context, exec)?;
    train(fresh_network(cfg)?, &data, &cfg.rprop, &cfg.dropout, cfg.seed, exec)
}

/// Trains the speech autoencoder on the clean side of a manifest.
pub fn train_autoencoder(manifest: &TrainManifest, exec: Exec) -> Result<TrainOutcome> {
    let cfg = &manifest.config;
    cfg.validate()?;
    let ds = &manifest.dataset;
    let cleans = exec.try_map(&ds.records, |r| crate::signal::read_wav(ds.resolve(&r.clean_path)))?;
    let data = build_dae_dataset(&cleans, cfg.frame_size, cfg.hop, cfg.context, exec)?;
    train(fresh_network(cfg)?, &data, &cfg.rprop, &cfg.dropout, cfg.seed, exec)
}
