//! Training loop: augmentation, dynamic weighting, optional background
//! sampling, batched gradients and Adam updates.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint;
use crate::nn::{Gradients, NetworkConfig, NetworkParams};
use crate::phantom::PatchRecord;
use crate::seeding::{self, STREAM_AUGMENT, STREAM_SAMPLING, STREAM_SHUFFLE};
use crate::volume::{Grid, LabelVolume, Volume};
use crate::weighting::{self, BandMap, Sampling, WeightMap, WeightingState, DEFAULT_ALPHA};

/// Which parts of the weighting scheme are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schema {
    /// Every voxel weighs 1.
    #[serde(rename = "unweighted")]
    Unweighted,
    /// Dynamic class and patch weights, no background sampling.
    #[serde(rename = "dw")]
    Dw,
    /// Dynamic weights plus band-based background sampling.
    #[serde(rename = "dw+rs")]
    DwRs,
}

impl Schema {
    pub fn label(self) -> &'static str {
        match self {
            Schema::Unweighted => "unweighted",
            Schema::Dw => "DW",
            Schema::DwRs => "DW+RS",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Augmentation {
    /// Independent random flip along each axis.
    pub flips: bool,
    /// Additive intensity offset with σ = `jitter_fraction` × patch range.
    pub jitter: bool,
    pub jitter_fraction: f64,
}

impl Default for Augmentation {
    fn default() -> Self {
        Self {
            flips: true,
            jitter: true,
            jitter_fraction: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub schema: Schema,
    pub augmentation: Augmentation,
    /// Moving-average rate of the class volumes.
    pub alpha: f64,
    pub seed: u64,
    /// Steps between log lines and checkpoints.
    pub checkpoint_every: usize,
    /// Weight of the extra per-scale loss term; 0 trains on the averaged
    /// map only.
    pub scale_loss_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 4,
            max_steps: 1000,
            schema: Schema::DwRs,
            augmentation: Augmentation::default(),
            alpha: DEFAULT_ALPHA,
            seed: 0,
            checkpoint_every: 500,
            scale_loss_weight: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint interval must be at least 1");
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.scale_loss_weight >= 0.0 && self.scale_loss_weight.is_finite()) {
            return bad("scale loss weight must be finite and non-negative");
        }
        Ok(())
    }
}

/// Adam moments, one entry per layer tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<(Vec<f64>, Vec<f64>)>,
    pub v: Vec<(Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams<f32>) -> Self {
        let zeros: Vec<(Vec<f64>, Vec<f64>)> = params
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weight.len()], vec![0.0; l.bias.len()]))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update, returning new parameters and moments.
pub fn adam_step(
    params: &NetworkParams<f32>,
    grads: &Gradients<f32>,
    state: &OptimizerState,
    config: &TrainConfig,
) -> Result<(NetworkParams<f32>, OptimizerState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    adam_in_place(&mut p, grads, &mut s, config)?;
    Ok((p, s))
}

fn adam_in_place(
    params: &mut NetworkParams<f32>,
    grads: &Gradients<f32>,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.layers.len() != params.layers.len() || state.m.len() != params.layers.len() {
        return Err(Error::Shape("gradients, moments and parameters disagree".into()));
    }
    for (layer, g) in params.layers.iter().zip(&grads.layers) {
        if g.weight.len() != layer.weight.len() || g.bias.len() != layer.bias.len() {
            return Err(Error::Shape(format!("gradient of {} has the wrong size", layer.id)));
        }
        if g.weight.iter().chain(&g.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: layer.id.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    let eps = config.epsilon;
    for (i, (layer, g)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        let (mw, mb) = &mut state.m[i];
        let (vw, vb) = &mut state.v[i];
        let tensors = [
            (&mut layer.weight, &g.weight, mw, vw),
            (&mut layer.bias, &g.bias, mb, vb),
        ];
        for (p, g, m, v) in tensors {
            for k in 0..p.len() {
                let gk = g[k] as f64;
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                p[k] = (p[k] as f64 - update) as f32;
            }
        }
    }
    Ok(())
}

/// Random flips and an additive intensity offset.
pub fn augment(image: &Volume, labels: &LabelVolume, aug: &Augmentation, rng: &mut impl Rng) -> Result<(Volume, LabelVolume)> {
    let flips = if aug.flips {
        [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)]
    } else {
        [false; 3]
    };
    let shape = image.shape();
    let src = |x: usize, y: usize, z: usize| {
        let f = |v: usize, a: usize, on: bool| if on { shape[a] - 1 - v } else { v };
        (f(x, 0, flips[0]), f(y, 1, flips[1]), f(z, 2, flips[2]))
    };
    let labels = Grid::from_fn(shape, |x, y, z| {
        let (a, b, c) = src(x, y, z);
        labels.get(a, b, c)
    });
    let mut offset = 0.0f32;
    if aug.jitter {
        let (lo, hi) = image
            .data()
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let sigma = aug.jitter_fraction * (hi - lo) as f64;
        if sigma > 0.0 {
            offset = Normal::new(0.0, sigma).expect("positive sigma").sample(rng) as f32;
        }
    }
    let grid = Grid::from_fn(shape, |x, y, z| {
        let (a, b, c) = src(x, y, z);
        image.get(a, b, c) + offset
    });
    Ok((Volume::new(grid, image.spacing())?, labels))
}

/// Everything the loss sees for one patch of one step.
pub struct PatchStep<'a> {
    pub step: usize,
    pub labels: &'a LabelVolume,
    pub bands: Option<&'a BandMap>,
    pub samples: &'a [usize],
    pub weights: &'a WeightMap,
    pub state: &'a WeightingState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean weighted loss over the steps since the previous entry.
    pub loss: f64,
    pub volumes: Vec<f64>,
    pub class_weights: Vec<f64>,
    /// Patches skipped so far because all their weights were zero.
    pub skipped: usize,
}

pub struct TrainOutcome {
    pub params: NetworkParams<f32>,
    pub optimizer: OptimizerState,
    pub weighting: WeightingState,
    /// Batch loss of every step, `NaN` for fully skipped steps.
    pub losses: Vec<f64>,
    pub log: Vec<LogEntry>,
    pub skipped: usize,
}

/// Where checkpoints and `train_log.jsonl` go.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.json")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }
}

struct Stream<'a> {
    dataset: &'a [PatchRecord],
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl<'a> Stream<'a> {
    fn next(&mut self) -> &'a PatchRecord {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let r = &self.dataset[self.order[self.cursor]];
        self.cursor += 1;
        r
    }
}

struct Prepared {
    image: Volume,
    labels: LabelVolume,
    weights: WeightMap,
}

fn check_dataset(dataset: &[PatchRecord], net: &NetworkConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let want = [net.patch_size; 3];
    if let Some(r) = dataset.iter().find(|r| r.image.shape() != want || r.labels.shape() != want) {
        return Err(Error::Shape(format!(
            "patch from {} has shape {:?}, network expects {want:?}",
            r.source,
            r.image.shape()
        )));
    }
    let has_fg = dataset.iter().any(|r| r.labels.data().iter().any(|&c| c != 0));
    let has_bg = dataset.iter().any(|r| r.labels.data().iter().all(|&c| c == 0));
    if !has_fg || !has_bg {
        return Err(Error::Config(
            "training set needs at least one foreground patch and one background-only patch".into(),
        ));
    }
    Ok(())
}

/// Trains from `init` (or a fresh network seeded from `config.seed`).
pub fn train(
    dataset: &[PatchRecord],
    net: &NetworkConfig,
    config: &TrainConfig,
    init: Option<NetworkParams<f32>>,
    output: Option<&TrainOutput>,
    mut hook: Option<&mut dyn FnMut(&PatchStep<'_>)>,
) -> Result<TrainOutcome> {
    config.validate()?;
    net.validate()?;
    check_dataset(dataset, net)?;
    let mut params = match init {
        Some(p) if p.config() != net => {
            return Err(Error::Config("initial parameters were built for another network".into()))
        }
        Some(p) => p,
        None => NetworkParams::init(net, config.seed)?,
    };
    let mut optimizer = OptimizerState::new(&params);
    let mut weighting = WeightingState::new(net.classes, config.alpha)?;
    let mut stream = Stream {
        dataset,
        order: (0..dataset.len()).collect(),
        cursor: dataset.len(),
        rng: seeding::stream(config.seed, STREAM_SHUFFLE),
    };
    let mut aug_rng = seeding::stream(config.seed, STREAM_AUGMENT);
    let mut sample_rng = seeding::stream(config.seed, STREAM_SAMPLING);

    let mut log_file = match output {
        Some(out) => {
            fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e))?;
            let path = out.log();
            Some((BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?), path))
        }
        None => None,
    };

    let mut losses = Vec::with_capacity(config.max_steps);
    let mut log = Vec::new();
    let mut skipped = 0usize;
    let mut window = (0.0f64, 0usize);
    for step in 1..=config.max_steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let record = stream.next();
            let (image, labels) = augment(&record.image, &record.labels, &config.augmentation, &mut aug_rng)?;
            weighting = weighting.update(&labels);
            let (weights, bands, samples) = match config.schema {
                Schema::Unweighted => (WeightMap::filled(labels.shape(), 1.0), None, Vec::new()),
                Schema::Dw => (weighting::voxel_weight_map(&labels, &weighting, None)?, None, Vec::new()),
                Schema::DwRs => {
                    let bands = weighting::build_bands(&labels);
                    let samples = weighting::sample_background(&bands, &mut sample_rng);
                    let w = weighting::voxel_weight_map(
                        &labels,
                        &weighting,
                        Some(Sampling {
                            bands: &bands,
                            samples: &samples,
                        }),
                    )?;
                    (w, Some(bands), samples)
                }
            };
            if let Some(h) = hook.as_mut() {
                h(&PatchStep {
                    step,
                    labels: &labels,
                    bands: bands.as_ref(),
                    samples: &samples,
                    weights: &weights,
                    state: &weighting,
                });
            }
            batch.push(Prepared { image, labels, weights });
        }

        let results: Vec<Result<(Gradients<f32>, f64)>> = batch
            .par_iter()
            .map(|p| {
                let trace = params.forward(&p.image)?;
                params.backward_with(&trace, &p.labels, &p.weights, config.scale_loss_weight)
            })
            .collect();
        let mut total: Option<Gradients<f32>> = None;
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for r in results {
            match r {
                Ok((g, loss)) => {
                    match total.as_mut() {
                        None => total = Some(g),
                        Some(t) => t.add_assign(&g),
                    }
                    loss_sum += loss;
                    used += 1;
                }
                Err(Error::DegenerateBatch) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        match total {
            Some(mut g) => {
                g.scale(1.0 / used as f32);
                adam_in_place(&mut params, &g, &mut optimizer, config)?;
                let loss = loss_sum / used as f64;
                losses.push(loss);
                window.0 += loss;
                window.1 += 1;
            }
            None => losses.push(f64::NAN),
        }

        if step % config.checkpoint_every == 0 || step == config.max_steps {
            let entry = LogEntry {
                step,
                loss: if window.1 > 0 { window.0 / window.1 as f64 } else { f64::NAN },
                volumes: weighting.volumes().to_vec(),
                class_weights: weighting.class_weights()?,
                skipped,
            };
            window = (0.0, 0);
            if let Some((w, path)) = log_file.as_mut() {
                serde_json::to_writer(&mut *w, &entry)?;
                writeln!(w).map_err(|e| Error::io(path.as_path(), e))?;
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(out) = output {
                checkpoint::save(&out.checkpoint(), &params, config.seed, step as u64)?;
            }
            log.push(entry);
        }
    }
    Ok(TrainOutcome {
        params,
        optimizer,
        weighting,
        losses,
        log,
        skipped,
    })
}

/// Writes a weight map next to `dir` for inspection.
pub fn dump_weights(dir: &Path, step: usize, index: usize, weights: &WeightMap) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::kvol::write_scalar_field(&dir.join(format!("weights_step{step:06}_{index}.kvol")), weights, [1.0; 3])
}
