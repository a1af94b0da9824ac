//! Three-stage training and the ablation ladder.
//!
//! Stage 1 fits the backbone and the GAP classifier with `L_C`. Stage 2
//! adds the attribute heads (`λ_C·L_C + λ_T·L_T + λ_TC·L_TC`). The memory
//! block is then built from per-value mean representations, and stage 3
//! fits the global composition with `L_G` while everything local stays fixed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{self, CHANNEL_MEAN};
use crate::engine::{self, EvalReport};
use crate::error::{Error, Result};
use crate::global_rep::{self, GlobalVars};
use crate::heads::{self, Dropout};
use crate::localization;
use crate::memory::{self, MEMORY};
use crate::model::{Model, ModelConfig};
use crate::numerics::{sgd_step, ParamSet, Real, RoiBox, SgdConfig, Tape, Tensor, Var};
use crate::synthgen::{AttributeSchema, Dataset, LabeledImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "woRank")]
    WoRank,
    Rank,
    RankL,
    RankLG,
    Full,
    FullFF,
}

impl Variant {
    /// Ladder order.
    pub const ALL: [Variant; 6] = [Self::WoRank, Self::Rank, Self::RankL, Self::RankLG, Self::Full, Self::FullFF];

    pub fn name(self) -> &'static str {
        match self {
            Self::WoRank => "woRank",
            Self::Rank => "Rank",
            Self::RankL => "RankL",
            Self::RankLG => "RankLG",
            Self::Full => "Full",
            Self::FullFF => "FullFF",
        }
    }

    pub fn flags(self) -> VariantFlags {
        let rung = Self::ALL.iter().position(|&v| v == self).expect("listed");
        VariantFlags {
            use_triplet: rung >= 1,
            use_localization: rung >= 2,
            use_global_training: rung >= 3,
            memory_trainable: rung >= 4,
            feature_fusion: rung >= 5,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::Argument(format!("unknown variant '{s}' (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    pub use_triplet: bool,
    pub use_localization: bool,
    pub use_global_training: bool,
    pub memory_trainable: bool,
    pub feature_fusion: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub classification: f32,
    pub triplet: f32,
    pub head_classification: f32,
    pub global: f32,
}

impl LossWeights {
    pub const STAGE2: LossWeights = LossWeights { classification: 1.0, triplet: 1.5, head_classification: 1.0, global: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let all = [self.classification, self.triplet, self.head_classification, self.global];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Argument(format!("loss weights must be nonnegative, got {self:?}")));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::STAGE2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub stage2_weights: LossWeights,
    /// Keep the stage-1 boxes through stage 2 instead of recomputing them.
    pub freeze_boxes: bool,
    /// Global triplets per stage-3 epoch; `None` means one per train image.
    pub global_triplets_per_epoch: Option<usize>,
    /// Rescale each batch gradient to at most this L2 norm.
    pub gradient_clip: Option<f32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sgd: SgdConfig::default(),
            batch_size: 32,
            stage1_epochs: 16,
            stage2_epochs: 12,
            stage3_epochs: 2,
            stage2_weights: LossWeights::STAGE2,
            freeze_boxes: false,
            global_triplets_per_epoch: Some(20_000),
            gradient_clip: Some(5.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.stage2_weights.validate()?;
        if self.gradient_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Argument("gradient clip must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        self.model.backbone.layer_shapes()?;
        Ok(())
    }
}

/// Mean of each loss term over one epoch.
pub type EpochLosses = BTreeMap<String, f64>;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub epochs: Vec<EpochLosses>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Option<Variant>,
    pub seed: u64,
    /// Choices the training procedure had to make on its own.
    pub defaults: Vec<String>,
    pub stages: Vec<StageReport>,
    pub evaluation: Option<EvalReport>,
}

fn default_notes(config: &TrainConfig) -> Vec<String> {
    vec![
        format!("mini-batch size {} with batch-mean losses", config.batch_size),
        "ranking triplets drawn in-batch, at most one per anchor per attribute".into(),
        match config.global_triplets_per_epoch {
            Some(n) => format!("{n} global triplets per stage-3 epoch"),
            None => "global triplets: one per train image per stage-3 epoch".into(),
        },
        format!(
            "initialization: He-scaled backbone/fc weights, N(0, 0.01²) classifiers, λ = 1, projections {}",
            if config.model.global.identity_init { "identity (r = A·D)" } else { "N(0, 1/(A·D))" }
        ),
        format!(
            "activation-map boxes {} during stage 2",
            if config.freeze_boxes { "frozen after stage 1" } else { "recomputed every forward pass" }
        ),
    ]
}

/// Backbone and classifier after stage 1, shared by every variant.
#[derive(Clone, Debug)]
pub struct Stage1 {
    pub model: Model,
    pub report: StageReport,
    pub seed: u64,
}

fn images<'a>(data: &'a Dataset, ids: &[String]) -> Result<Vec<&'a LabeledImage>> {
    data.subset(ids)
}

fn batches<R: Rng>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn mean_terms(sums: &BTreeMap<String, f64>, count: usize) -> EpochLosses {
    sums.iter().map(|(k, v)| (k.clone(), v / count.max(1) as f64)).collect()
}

/// Plain SGD over the trainable gradients, after optional norm clipping.
fn apply_update(
    params: &mut ParamSet<f32>,
    grads: Vec<(String, Tensor<f32>)>,
    config: &TrainConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<()> {
    let grads: Vec<_> = grads.into_iter().filter(|(n, _)| trainable(n)).collect();
    let scale = match config.gradient_clip {
        Some(limit) => {
            let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            if norm > limit as f64 {
                (limit as f64 / norm) as f32
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    sgd_step(params, &grads, config.sgd.learning_rate, scale, |_| true)
}

/// Stage 1: channel means over train, then `L_C` on backbone and classifier.
pub fn train_stage1(schema: &AttributeSchema, train: &[&LabeledImage], config: &TrainConfig, seed: u64) -> Result<Stage1> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Argument("training split is empty".into()));
    }
    let mut model = Model::init(schema.clone(), config.model.clone(), seed)?;
    let means = backbone::channel_means(train.iter().map(|i| &i.pixels), config.model.backbone.input_channels);
    model.params.insert(CHANNEL_MEAN, means);

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_1);
    let mut report = StageReport { name: "stage1".into(), ..Default::default() };
    for epoch in 0..config.stage1_epochs {
        let mut sums = BTreeMap::new();
        let order = batches(train.len(), config.batch_size, &mut rng);
        for batch in &order {
            let imgs: Vec<&LabeledImage> = batch.iter().map(|&i| train[i]).collect();
            let loss = stage1_step(&mut model, &imgs, config)?;
            *sums.entry("classification".to_string()).or_insert(0.0) += loss;
        }
        let losses = mean_terms(&sums, order.len());
        info!("stage 1 epoch {}: {:?}", epoch + 1, losses);
        report.epochs.push(losses);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(Stage1 { model, report, seed })
}

fn stage1_step(model: &mut Model, batch: &[&LabeledImage], config: &TrainConfig) -> Result<f64> {
    let mut tape = Tape::<f32>::new();
    let w = 1.0 / batch.len() as f32;
    let mut terms = Vec::with_capacity(batch.len());
    for img in batch {
        let f = backbone::extract_features(&mut tape, &model.config.backbone, &model.params, &img.pixels)?;
        let l = localization::classification_loss(&mut tape, f.last, &img.labels, &model.schema, &model.params)?;
        terms.push((l, w));
    }
    let loss = tape.weighted_sum(&terms)?;
    let value = tape.value(loss).item() as f64;
    let grads = tape.backward(loss)?;
    let backbone_cfg = model.config.backbone.clone();
    apply_update(&mut model.params, grads.into_params(), config, |n| {
        backbone_cfg.is_trainable(n) || n.starts_with("cls/")
    })?;
    Ok(value)
}

/// Loss terms of one stage-2 batch, each already a batch mean.
#[derive(Clone, Copy, Debug)]
pub struct JointTerms {
    pub total: Var,
    pub classification: Var,
    pub triplet: Option<Var>,
    pub head_classification: Option<Var>,
}

/// Schema, architecture and parameters at any precision: what a loss
/// needs from a model. Gradient checks run the same losses in `f64`.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'a, T: Real> {
    pub schema: &'a AttributeSchema,
    pub config: &'a ModelConfig,
    pub params: &'a ParamSet<T>,
}

impl Model {
    pub fn view(&self) -> ModelView<'_, f32> {
        ModelView { schema: &self.schema, config: &self.config, params: &self.params }
    }
}

/// Activation-map boxes at `f32`, whatever the tape precision.
fn boxes_at<T: Real>(last: &Tensor<T>, schema: &AttributeSchema, params: &ParamSet<T>) -> Result<Vec<RoiBox>> {
    let mut cls = ParamSet::new();
    for name in localization::classifier_names(schema) {
        cls.insert(&name, params.get(&name)?.cast::<f32>());
    }
    localization::attribute_boxes(&last.cast::<f32>(), schema, &cls)
}

/// Builds the stage-2 joint loss for one batch on `tape`.
///
/// `batch` pairs pixels with labels. `boxes` supplies frozen per-image
/// boxes; when `None` they come from the current activation maps (or the
/// whole map without localization).
#[allow(clippy::too_many_arguments)]
pub fn joint_batch_loss<T: Real, R: Rng>(
    tape: &mut Tape<T>,
    model: ModelView<'_, T>,
    batch: &[(&Tensor<T>, &[usize])],
    flags: VariantFlags,
    weights: LossWeights,
    keep_probability: f32,
    boxes: Option<&[Vec<RoiBox>]>,
    rng: &mut R,
) -> Result<JointTerms> {
    let (schema, params) = (model.schema, model.params);
    let inv = T::of_f64(1.0 / batch.len() as f64);
    let mut lc = Vec::with_capacity(batch.len());
    let mut ltc = Vec::new();
    let mut reps: Vec<Vec<Var>> = Vec::new();
    for (i, (pixels, labels)) in batch.iter().enumerate() {
        let f = backbone::extract_features(tape, &model.config.backbone, params, pixels)?;
        lc.push((localization::classification_loss(tape, f.last, labels, schema, params)?, inv));
        if !flags.use_triplet {
            continue;
        }
        let img_boxes = match boxes {
            Some(b) => b[i].clone(),
            None if flags.use_localization => boxes_at(tape.value(f.last), schema, params)?,
            None => vec![RoiBox::FULL; schema.len()],
        };
        let mut slots = Vec::with_capacity(schema.len());
        for (a, roi) in img_boxes.iter().enumerate() {
            let dropout = Some(Dropout { keep_probability, rng: &mut *rng });
            slots.push(heads::attribute_representation(tape, f.mid, roi, a, schema, &model.config.heads, params, dropout)?);
        }
        ltc.push((heads::head_classification_loss(tape, &slots, labels, schema, params)?, inv));
        reps.push(slots);
    }
    let w = |x: f32| T::of_f64(x as f64);
    let classification = tape.weighted_sum(&lc)?;
    let mut total = vec![(classification, w(weights.classification))];
    let (mut triplet, mut head_classification) = (None, None);
    if flags.use_triplet {
        let labels: Vec<&[usize]> = batch.iter().map(|(_, l)| *l).collect();
        let triplets = heads::in_batch_triplets(&labels, schema.len(), rng);
        let lt = heads::ranking_loss(tape, &triplets, &reps, model.config.heads.squared_triplet)?;
        let lt = tape.scale_const(lt, inv)?;
        let lh = tape.weighted_sum(&ltc)?;
        total.push((lt, w(weights.triplet)));
        total.push((lh, w(weights.head_classification)));
        triplet = Some(lt);
        head_classification = Some(lh);
    }
    let total = tape.weighted_sum(&total)?;
    Ok(JointTerms { total, classification, triplet, head_classification })
}

fn is_stage2_trainable(model: &Model, flags: VariantFlags, name: &str) -> bool {
    model.config.backbone.is_trainable(name)
        || name.starts_with("cls/")
        || (flags.use_triplet && name.starts_with("head/"))
}

fn stage2(model: &mut Model, train: &[&LabeledImage], flags: VariantFlags, config: &TrainConfig, seed: u64) -> Result<StageReport> {
    let start = Instant::now();
    let frozen: Option<Vec<Vec<RoiBox>>> = if config.freeze_boxes && flags.use_localization {
        Some(
            train
                .iter()
                .map(|img| model.boxes(&model.features(&img.pixels)?))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_2);
    let mut report = StageReport { name: "stage2".into(), ..Default::default() };
    for epoch in 0..config.stage2_epochs {
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let order = batches(train.len(), config.batch_size, &mut rng);
        for batch in &order {
            let imgs: Vec<(&Tensor<f32>, &[usize])> =
                batch.iter().map(|&i| (&train[i].pixels, train[i].labels.as_slice())).collect();
            let boxes: Option<Vec<Vec<RoiBox>>> = frozen.as_ref().map(|f| batch.iter().map(|&i| f[i].clone()).collect());
            let mut tape = Tape::new();
            let terms = joint_batch_loss(
                &mut tape,
                model.view(),
                &imgs,
                flags,
                config.stage2_weights,
                config.sgd.dropout_keep_probability,
                boxes.as_deref(),
                &mut rng,
            )?;
            let mut record = |k: &str, v: Option<Var>| {
                if let Some(v) = v {
                    *sums.entry(k.to_string()).or_insert(0.0) += tape.value(v).item() as f64;
                }
            };
            record("classification", Some(terms.classification));
            record("triplet", terms.triplet);
            record("head_classification", terms.head_classification);
            if flags.use_triplet {
                record("total", Some(terms.total));
            }
            let grads = tape.backward(terms.total)?.into_params();
            let keep: Vec<bool> = grads.iter().map(|(n, _)| is_stage2_trainable(model, flags, n)).collect();
            let grads = grads.into_iter().zip(keep).filter(|(_, k)| *k).map(|(g, _)| g).collect();
            apply_update(&mut model.params, grads, config, |_| true)?;
        }
        let losses = mean_terms(&sums, order.len());
        info!("stage 2 epoch {}: {:?}", epoch + 1, losses);
        report.epochs.push(losses);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean representation per (attribute, value) over the training images.
pub fn build_model_memory(model: &mut Model, train: &[&LabeledImage]) -> Result<Vec<Vec<Tensor<f32>>>> {
    let reps: Vec<Vec<Tensor<f32>>> = train.iter().map(|i| model.representations(&i.pixels)).collect::<Result<_>>()?;
    let labels: Vec<Vec<usize>> = train.iter().map(|i| i.labels.clone()).collect();
    let m = memory::build_memory(&model.schema, &reps, &labels)?;
    model.set_memory(&m);
    Ok(reps)
}

/// `L_G` over a batch of global triplets, with fixed local representations.
pub fn global_batch_loss<T: Real>(
    tape: &mut Tape<T>,
    model: ModelView<'_, T>,
    reps: &[Vec<Tensor<T>>],
    triplets: &[global_rep::GlobalTriplet],
    memory_trainable: bool,
) -> Result<Var> {
    let (schema, params) = (model.schema, model.params);
    let m = if memory_trainable {
        tape.param(MEMORY, params.get(MEMORY)?)
    } else {
        tape.constant(params.get(MEMORY)?.clone())
    };
    let mut vars: Vec<Option<GlobalVars>> = vec![None; schema.len()];
    let inv = T::of_f64(1.0 / triplets.len().max(1) as f64);
    let mut terms = Vec::with_capacity(triplets.len());
    for t in triplets {
        let gv = match vars[t.attribute] {
            Some(v) => v,
            None => {
                let v = global_rep::global_vars(tape, schema, &model.config.global, params, t.attribute, true)?;
                vars[t.attribute] = Some(v);
                v
            }
        };
        let consts = |tape: &mut Tape<T>, i: usize| -> Vec<Var> { reps[i].iter().map(|r| tape.constant(r.clone())).collect() };
        let q = consts(tape, t.query);
        let p = consts(tape, t.positive);
        let n = consts(tape, t.negative);
        let g = memory::retrieve_on_tape(tape, m, &memory::indicator(schema, t.attribute, t.value)?.cast())?;
        let fq = global_rep::compose_on_tape(tape, &q, Some((t.attribute, g)), gv)?;
        let fp = global_rep::compose_on_tape(tape, &p, None, gv)?;
        let fneg = global_rep::compose_on_tape(tape, &n, None, gv)?;
        terms.push((global_rep::global_loss(tape, fq, fp, fneg)?, inv));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    tape.weighted_sum(&terms)
}

fn stage3(
    model: &mut Model,
    reps: &[Vec<Tensor<f32>>],
    labels: &[Vec<usize>],
    flags: VariantFlags,
    config: &TrainConfig,
    seed: u64,
) -> Result<StageReport> {
    let start = Instant::now();
    let per_epoch = config.global_triplets_per_epoch.unwrap_or(labels.len());
    let mut report = StageReport { name: "stage3".into(), ..Default::default() };
    for epoch in 0..config.stage3_epochs {
        let triplets = global_rep::sample_global_triplets(labels, &model.schema, per_epoch, seed ^ (0x5_3 + epoch as u64))?;
        let mut sum = 0.0;
        let chunks: Vec<_> = triplets.chunks(config.batch_size).collect();
        for chunk in &chunks {
            let mut tape = Tape::new();
            let loss = global_batch_loss(&mut tape, model.view(), reps, chunk, flags.memory_trainable)?;
            sum += tape.value(loss).item() as f64;
            let grads = tape.backward(loss)?;
            apply_update(&mut model.params, grads.into_params(), config, |n| {
                n.starts_with("global/") || (flags.memory_trainable && n == MEMORY)
            })?;
        }
        let losses: EpochLosses = [("global".to_string(), sum / chunks.len().max(1) as f64)].into();
        info!("stage 3 epoch {}: {:?}", epoch + 1, losses);
        report.epochs.push(losses);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Stages 2–3 and the memory block for one variant, starting from a
/// shared stage-1 result.
pub fn train_variant(stage1: &Stage1, train: &[&LabeledImage], variant: Variant, config: &TrainConfig) -> Result<(Model, TrainReport)> {
    config.validate()?;
    let flags = variant.flags();
    let seed = stage1.seed;
    let mut model = stage1.model.clone();
    model.config.localization = flags.use_localization;
    model.config.heads.fusion = flags.feature_fusion;
    let (_, _, mid_c) = model.config.backbone.mid_shape()?;
    let fresh_heads = heads::init_heads(&model.schema, &model.config.heads, mid_c, seed.wrapping_add(2));
    model.params.merge_prefix(&fresh_heads, "head/");

    let mut report = TrainReport {
        variant: Some(variant),
        seed,
        defaults: default_notes(config),
        stages: vec![stage1.report.clone()],
        evaluation: None,
    };
    report.stages.push(stage2(&mut model, train, flags, config, seed)?);

    let reps = build_model_memory(&mut model, train)?;
    let rep_dim = model.config.heads.dim;
    let global = if flags.use_global_training {
        global_rep::init_global(&model.schema, &model.config.global, rep_dim, seed.wrapping_add(3))
    } else {
        global_rep::identity_global(&model.schema, &model.config.global, rep_dim)
    };
    drop_prefix(&mut model.params, "global/");
    model.params.merge_prefix(&global, "global/");
    if flags.use_global_training {
        let labels: Vec<Vec<usize>> = train.iter().map(|i| i.labels.clone()).collect();
        report.stages.push(stage3(&mut model, &reps, &labels, flags, config, seed)?);
    }
    Ok((model, report))
}

fn drop_prefix(params: &mut ParamSet<f32>, prefix: &str) {
    let names: Vec<String> = params.names().filter(|n| n.starts_with(prefix)).cloned().collect();
    for n in names {
        params.remove(&n);
    }
}

/// Full three-stage run on a dataset's train split.
pub fn train(data: &Dataset, variant: Variant, config: &TrainConfig, seed: u64) -> Result<(Model, TrainReport)> {
    let train = images(data, &data.split.train)?;
    let s1 = train_stage1(&data.schema, &train, config, seed)?;
    train_variant(&s1, &train, variant, config)
}

/// Indexes the gallery split and evaluates the query split.
pub fn evaluate_split(model: &Model, data: &Dataset, ks: &[usize]) -> Result<(engine::GalleryIndex, EvalReport)> {
    let gallery = images(data, &data.split.gallery)?;
    let queries = images(data, &data.split.query)?;
    let index = engine::index_gallery(model, &gallery)?;
    let report = engine::evaluate(model, &index, &queries, ks)?;
    Ok((index, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Per seed, `accuracy[k][a]` followed by the average column.
    pub per_seed: Vec<EvalReport>,
    /// `mean[k][col]` and `spread[k][col]` (population standard deviation)
    /// over seeds; the last column is the attribute average.
    pub mean: Vec<Vec<f64>>,
    pub spread: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub attributes: Vec<String>,
    pub ks: Vec<usize>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationRow {
    fn from_reports(variant: Variant, per_seed: Vec<EvalReport>) -> Self {
        let ks = per_seed[0].ks.len();
        let cols = per_seed[0].attributes.len() + 1;
        let value = |r: &EvalReport, k: usize, c: usize| if c + 1 == cols { r.average[k] } else { r.accuracy[k][c] };
        let n = per_seed.len() as f64;
        let mut mean = vec![vec![0.0; cols]; ks];
        let mut spread = vec![vec![0.0; cols]; ks];
        for k in 0..ks {
            for c in 0..cols {
                let m = per_seed.iter().map(|r| value(r, k, c)).sum::<f64>() / n;
                let var = per_seed.iter().map(|r| (value(r, k, c) - m).powi(2)).sum::<f64>() / n;
                mean[k][c] = m;
                spread[k][c] = var.sqrt();
            }
        }
        Self { variant, per_seed, mean, spread }
    }

    pub fn mean_average(&self, k_index: usize) -> f64 {
        *self.mean[k_index].last().expect("average column")
    }
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Mean attribute-average accuracy of `variant` at `k`.
    pub fn average(&self, variant: Variant, k: usize) -> Option<f64> {
        let ki = self.ks.iter().position(|&x| x == k)?;
        self.row(variant).map(|r| r.mean_average(ki))
    }

    /// Text table: one block per K, rows in ladder order, `mean±spread`.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (ki, k) in self.ks.iter().enumerate() {
            out.push_str(&format!("Top-{k} accuracy over seeds {:?}\n", self.seeds));
            out.push_str(&format!("{:<8}", "variant"));
            for a in self.attributes.iter().map(String::as_str).chain(["avg"]) {
                out.push_str(&format!(" {a:>15}"));
            }
            out.push('\n');
            for row in &self.rows {
                out.push_str(&format!("{:<8}", row.variant.name()));
                for (m, s) in row.mean[ki].iter().zip(&row.spread[ki]) {
                    out.push_str(&format!(" {:>15}", format!("{m:.3}±{s:.3}")));
                }
                out.push('\n');
            }
            out.push('\n');
        }
        out
    }

    /// CSV with one line per (variant, K): mean and spread per column.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,k");
        for a in self.attributes.iter().map(String::as_str).chain(["avg"]) {
            out.push_str(&format!(",{a},{a}_spread"));
        }
        out.push('\n');
        for row in &self.rows {
            for (ki, k) in self.ks.iter().enumerate() {
                out.push_str(&format!("{},{k}", row.variant.name()));
                for (m, s) in row.mean[ki].iter().zip(&row.spread[ki]) {
                    out.push_str(&format!(",{m:.4},{s:.4}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Trains every (variant, seed), evaluates at every K and aggregates.
/// Stage 1 runs once per seed and is shared by all variants. `on_model`
/// sees each trained model (e.g. to save it).
pub fn ablation_run(
    data: &Dataset,
    variants: &[Variant],
    ks: &[usize],
    seeds: &[u64],
    config: &TrainConfig,
    mut on_model: impl FnMut(Variant, u64, &Model, &EvalReport) -> Result<()>,
) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("ablation needs at least one variant and one seed".into()));
    }
    let mut ordered = variants.to_vec();
    ordered.sort();
    ordered.dedup();
    let train = images(data, &data.split.train)?;
    let mut per_variant: BTreeMap<Variant, Vec<EvalReport>> = BTreeMap::new();
    for &seed in seeds {
        let s1 = train_stage1(&data.schema, &train, config, seed)?;
        for &v in &ordered {
            let (model, _) = train_variant(&s1, &train, v, config)?;
            let (_, report) = evaluate_split(&model, data, ks)?;
            info!("{v} seed {seed}: avg {:?}", report.average);
            on_model(v, seed, &model, &report)?;
            per_variant.entry(v).or_default().push(report);
        }
    }
    Ok(AblationTable {
        attributes: data.schema.attributes.iter().map(|a| a.name.clone()).collect(),
        ks: ks.to_vec(),
        seeds: seeds.to_vec(),
        rows: ordered
            .into_iter()
            .map(|v| AblationRow::from_reports(v, per_variant.remove(&v).expect("trained")))
            .collect(),
    })
}
