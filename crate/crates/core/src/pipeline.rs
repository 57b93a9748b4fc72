//! Phantom experiments: generate subjects, train under one or more weighting
//! schemas, segment held-out subjects and score them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, class_name, DiceReport, KIDNEY_BOX, WHOLE_ROI};
use crate::nn::{NetworkConfig, NetworkParams};
use crate::phantom::{generate_phantom, slice_patches, PatchRecord, PhantomMeta, PhantomSpec};
use crate::seeding::sub_seed;
use crate::stitch::{segment_volume, StitchOptions};
use crate::train::{train, Schema, TrainConfig, TrainOutput};
use crate::volume::{LabelVolume, Volume};

/// Sub-seed slots of an experiment seed.
const SLOT_PHANTOM: u64 = 0;
const SLOT_SLICE: u64 = 1 << 20;
const SLOT_TRAIN: u64 = 2 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub phantom: PhantomSpec,
    pub network: NetworkConfig,
    /// `seed` inside is replaced by one derived from the experiment seed.
    pub train: TrainConfig,
    pub train_phantoms: usize,
    pub test_phantoms: usize,
    /// Patches cut per training phantom: background, then one entry per class.
    pub patches_per_phantom: Vec<usize>,
    pub schemas: Vec<Schema>,
    pub tile: Option<usize>,
    pub halo: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            network: NetworkConfig {
                levels: 2,
                base_channels: 4,
                ..NetworkConfig::default()
            },
            train: TrainConfig {
                batch_size: 2,
                max_steps: 5000,
                checkpoint_every: 500,
                // Keeps the coarse branches from collapsing to background
                // while the class weights are still near uniform.
                scale_loss_weight: 1.0,
                ..TrainConfig::default()
            },
            train_phantoms: 20,
            test_phantoms: 5,
            patches_per_phantom: vec![6, 6, 6, 6],
            schemas: vec![Schema::Dw, Schema::DwRs],
            tile: None,
            halo: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.phantom.classes() != self.network.classes {
            return Err(Error::Config(format!(
                "phantom has {} classes, network {}",
                self.phantom.classes(),
                self.network.classes
            )));
        }
        if self.train_phantoms == 0 || self.test_phantoms == 0 {
            return Err(Error::Config("need at least one training and one held-out phantom".into()));
        }
        if self.patches_per_phantom.len() != self.network.classes {
            return Err(Error::Config(format!(
                "patches_per_phantom needs {} entries (background first)",
                self.network.classes
            )));
        }
        if self.patches_per_phantom[0] == 0 {
            return Err(Error::Config("background-only patches are required for training".into()));
        }
        if self.schemas.is_empty() {
            return Err(Error::Config("no schema to run".into()));
        }
        Ok(())
    }

    pub fn stitch_options(&self) -> StitchOptions {
        StitchOptions {
            tile: self.tile,
            halo: self.halo,
            ..StitchOptions::default()
        }
    }

    /// Training config with the seed derived from the experiment seed.
    pub fn train_config(&self, schema: Schema, seed: u64) -> TrainConfig {
        TrainConfig {
            schema,
            seed: sub_seed(seed, SLOT_TRAIN),
            ..self.train.clone()
        }
    }
}

/// A generated phantom with its ground truth.
#[derive(Clone, Debug)]
pub struct Subject {
    pub name: String,
    pub volume: Volume,
    pub labels: LabelVolume,
    pub meta: PhantomMeta,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<PatchRecord>,
    pub test: Vec<Subject>,
}

/// Phantom `i` of an experiment seeded with `seed`.
pub fn make_subject(spec: &PhantomSpec, seed: u64, i: usize) -> Result<Subject> {
    let (volume, labels, meta) = generate_phantom(spec, sub_seed(seed, SLOT_PHANTOM + i as u64))?;
    Ok(Subject {
        name: format!("phantom{i:03}"),
        volume,
        labels,
        meta,
    })
}

/// Training patches from the first `train_phantoms` subjects and the
/// following `test_phantoms` subjects kept whole.
pub fn build_dataset(config: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let total = config.train_phantoms + config.test_phantoms;
    let subjects: Vec<Subject> = (0..total)
        .into_par_iter()
        .map(|i| make_subject(&config.phantom, seed, i))
        .collect::<Result<_>>()?;
    let (train_subjects, test) = subjects.split_at(config.train_phantoms);
    let mut train = Vec::new();
    for (i, s) in train_subjects.iter().enumerate() {
        train.extend(slice_patches(
            &s.volume,
            &s.labels,
            &s.meta,
            config.network.patch_size,
            &config.patches_per_phantom,
            sub_seed(seed, SLOT_SLICE + i as u64),
            &s.name,
        )?);
    }
    Ok(Dataset {
        train,
        test: test.to_vec(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectResult {
    pub name: String,
    pub dice: DiceReport,
    pub foreground_recall: f64,
    pub background_false_positives: usize,
}

/// Held-out results of one schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaResult {
    pub schema: Schema,
    /// `{class: {region: mean dice}}` over subjects where the region applies.
    pub mean_dice: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    pub foreground_recall: f64,
    /// Summed over held-out subjects, before island filtering.
    pub background_false_positives: usize,
    pub final_loss: f64,
    pub skipped_patches: usize,
    pub train_seconds: f64,
    pub infer_seconds: f64,
    pub subjects: Vec<SubjectResult>,
}

impl SchemaResult {
    pub fn dice(&self, class: u8, region: &str) -> Option<f64> {
        *self.mean_dice.get(&class_name(class))?.get(region)?
    }
}

/// Segments and scores held-out subjects.
pub fn evaluate_subjects(
    params: &NetworkParams<f32>,
    config: &ExperimentConfig,
    subjects: &[Subject],
) -> Result<Vec<SubjectResult>> {
    let options = config.stitch_options();
    subjects
        .iter()
        .map(|s| {
            let (_, pred) = segment_volume(params, &config.network, &s.volume, &options)?;
            Ok(SubjectResult {
                name: s.name.clone(),
                dice: eval::evaluate(&pred, &s.labels, &s.meta, config.network.classes)?,
                foreground_recall: eval::foreground_recall(&pred, &s.labels)?,
                background_false_positives: eval::background_false_positives(&pred, &s.labels)?,
            })
        })
        .collect()
}

fn summarize(schema: Schema, classes: usize, subjects: Vec<SubjectResult>) -> SchemaResult {
    let mut mean_dice = BTreeMap::new();
    for c in 1..classes as u8 {
        let mut per_region = BTreeMap::new();
        for region in [WHOLE_ROI, KIDNEY_BOX] {
            let scores: Vec<f64> = subjects.iter().filter_map(|s| s.dice.score(c, region)).map(|r| r.dice).collect();
            let mean = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
            per_region.insert(region.to_string(), mean);
        }
        mean_dice.insert(class_name(c), per_region);
    }
    let n = subjects.len().max(1) as f64;
    SchemaResult {
        schema,
        mean_dice,
        foreground_recall: subjects.iter().map(|s| s.foreground_recall).sum::<f64>() / n,
        background_false_positives: subjects.iter().map(|s| s.background_false_positives).sum(),
        final_loss: f64::NAN,
        skipped_patches: 0,
        train_seconds: 0.0,
        infer_seconds: 0.0,
        subjects,
    }
}

/// Trains one schema and scores it on the held-out subjects. With `out`,
/// checkpoints and the training log go to `out/<schema>`.
pub fn run_schema(
    dataset: &Dataset,
    config: &ExperimentConfig,
    schema: Schema,
    seed: u64,
    out: Option<&Path>,
) -> Result<(NetworkParams<f32>, SchemaResult)> {
    let train_cfg = config.train_config(schema, seed);
    let output = out.map(|dir| TrainOutput {
        dir: dir.join(schema_dir(schema)),
    });
    let t0 = Instant::now();
    let outcome = train(&dataset.train, &config.network, &train_cfg, None, output.as_ref(), None)?;
    let train_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let subjects = evaluate_subjects(&outcome.params, config, &dataset.test)?;
    let mut result = summarize(schema, config.network.classes, subjects);
    result.train_seconds = train_seconds;
    result.infer_seconds = t1.elapsed().as_secs_f64();
    result.final_loss = outcome.log.last().map_or(f64::NAN, |e| e.loss);
    result.skipped_patches = outcome.skipped;
    Ok((outcome.params, result))
}

pub fn schema_dir(schema: Schema) -> &'static str {
    match schema {
        Schema::Unweighted => "unweighted",
        Schema::Dw => "dw",
        Schema::DwRs => "dw_rs",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub config: ExperimentConfig,
    /// Keyed by schema label.
    pub schemas: BTreeMap<String, SchemaResult>,
}

impl AblationReport {
    pub fn result(&self, schema: Schema) -> Option<&SchemaResult> {
        self.schemas.get(schema.label())
    }

    /// Plain-text table: one row per class, one column per region and schema.
    pub fn table(&self) -> String {
        let schemas: Vec<&SchemaResult> = self.config.schemas.iter().filter_map(|s| self.result(*s)).collect();
        let mut out = String::new();
        let _ = write!(out, "{:<8}", "");
        for region in [WHOLE_ROI, KIDNEY_BOX] {
            for s in &schemas {
                let _ = write!(out, " | {:>22}", format!("{region} {}", s.schema.label()));
            }
        }
        out.push('\n');
        for c in 1..self.config.network.classes as u8 {
            let _ = write!(out, "{:<8}", class_name(c));
            for region in [WHOLE_ROI, KIDNEY_BOX] {
                for s in &schemas {
                    let cell = s.dice(c, region).map_or("n/a".to_string(), |d| format!("{d:.3}"));
                    let _ = write!(out, " | {cell:>22}");
                }
            }
            out.push('\n');
        }
        for s in &schemas {
            let _ = writeln!(
                out,
                "{}: background false positives {}, foreground recall {:.3}",
                s.schema.label(),
                s.background_false_positives,
                s.foreground_recall
            );
        }
        out
    }
}

/// Runs every configured schema on the same phantoms and training seed.
pub fn ablate(config: &ExperimentConfig, seed: u64, out: Option<&Path>) -> Result<AblationReport> {
    let dataset = build_dataset(config, seed)?;
    let mut schemas = BTreeMap::new();
    for &schema in &config.schemas {
        let (_, result) = run_schema(&dataset, config, schema, seed, out)?;
        schemas.insert(schema.label().to_string(), result);
    }
    Ok(AblationReport {
        seed,
        config: config.clone(),
        schemas,
    })
}
