//! Task heads: cosine alignment logits, cross-entropy training, the three
//! evaluators (top-1 classification, mAP retrieval, mIoU segmentation), and
//! the generic trainer that drives them.
//!
//! The trainer takes one optimizer step per sample, sweeping the dataset in
//! order each epoch, so an epoch means `len(samples)` updates. No draw
//! depends on iteration timing, so a (config, seed) pair always reproduces
//! the same parameters. When no backbone group is trainable, diffusion
//! features are extracted once and cached as constants; with a live backbone
//! group the U-net runs inside every step graph so its norm affines receive
//! gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{
    self, BackboneConfig, ExtractOpts, FeatureBundle, NoiseMode, Stage, TapKey,
};
use crate::conditioning::{
    make_prompt, ClassifierWeights, PromptCondition, PromptSpec, TextConfig, PHOTO_TEMPLATE,
};
use crate::data::SampleRecord;
use crate::diffusion::ScheduleTable;
use crate::error::{Error, Result};
use crate::expert::{self, ExpertConfig};
use crate::fusion::{self, FusionPlan, UHeadConfig};
use crate::params::{self, AdamW, ParamStore};
use crate::rng::derive_seed;
use crate::tensor::{Scalar, Tensor};

/// Mask id excluded from losses and metrics.
pub const IGNORE_INDEX: usize = 255;

// ----------------------------------------------------------------------
// Configuration
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Classify,
    Retrieve,
    Segment,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Classify => "classify",
            TaskKind::Retrieve => "retrieve",
            TaskKind::Segment => "segment",
        }
    }

    pub fn default_temperature(&self) -> f64 {
        match self {
            TaskKind::Classify | TaskKind::Retrieve => 0.2,
            TaskKind::Segment => 0.02,
        }
    }
}

/// Parameter namespaces the trainer may unfreeze.
pub const TRAINABLE_GROUPS: &[&str] =
    &["uhead", "expert", "baseline", "backbone", "backbone-norm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub task: TaskKind,
    pub temperature: f64,
    pub trainable_groups: Vec<String>,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient L2 clip.
    pub grad_clip: f64,
    pub epochs: usize,
}

impl TaskConfig {
    pub fn preset(task: TaskKind) -> Self {
        TaskConfig {
            task,
            temperature: task.default_temperature(),
            trainable_groups: vec!["uhead".to_string(), "expert".to_string()],
            lr: 5e-3,
            weight_decay: 5e-4,
            grad_clip: 1.0,
            epochs: match task {
                TaskKind::Classify | TaskKind::Retrieve => 100,
                TaskKind::Segment => 10,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::config("temperature must be positive"));
        }
        if self.trainable_groups.is_empty() {
            return Err(Error::config("training needs at least one trainable group"));
        }
        for g in &self.trainable_groups {
            if !TRAINABLE_GROUPS.contains(&g.as_str()) {
                return Err(Error::config(format!("unknown trainable group {g:?}")));
            }
        }
        if self.lr < 0.0 || self.grad_clip <= 0.0 {
            return Err(Error::config("lr must be >= 0 and grad clip positive"));
        }
        Ok(())
    }
}

/// Which head consumes the feature pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    UHead,
    Baseline,
}

/// How the conditioning context is chosen per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PromptPolicy {
    Null,
    Random { seed: u64 },
    /// The sample's own caption.
    Aligned,
    /// One prompt row per class name.
    AllClasses,
}

impl PromptPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            PromptPolicy::Null => "null",
            PromptPolicy::Random { .. } => "random",
            PromptPolicy::Aligned => "aligned",
            PromptPolicy::AllClasses => "all-classes",
        }
    }

    pub fn realize(&self, caption: &str, class_names: &[String]) -> PromptSpec {
        match self {
            PromptPolicy::Null => PromptSpec::Null,
            PromptPolicy::Random { seed } => PromptSpec::Random { seed: *seed },
            PromptPolicy::Aligned => PromptSpec::Aligned {
                caption: caption.to_string(),
            },
            PromptPolicy::AllClasses => PromptSpec::AllClasses {
                class_names: class_names.to_vec(),
                template: PHOTO_TEMPLATE.to_string(),
            },
        }
    }
}

/// Feature-extraction recipe shared by training and evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractSpec {
    pub t: usize,
    pub noise: NoiseMode,
    pub prompt: PromptPolicy,
    pub cfg_scale: f64,
    pub stages: Vec<Stage>,
}

/// Every model piece a task needs, minus the parameters themselves.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub backbone: BackboneConfig,
    pub text: TextConfig,
    pub table: ScheduleTable,
    pub expert: ExpertConfig,
    pub head: UHeadConfig,
    pub head_kind: HeadKind,
    pub extract: ExtractSpec,
}

impl Pipeline {
    pub fn plan(&self) -> Result<FusionPlan> {
        fusion::plan_fusion(
            &self.backbone,
            &self.extract.stages,
            Some(&self.expert),
            self.head.use_attn_maps,
        )
    }
}

/// Fresh parameters for every namespace a pipeline can touch: encoder and
/// U-net, text encoder, U-head, expert, and the baseline head.
pub fn init_pipeline_store<T: Scalar>(seed: u64, pipe: &Pipeline) -> Result<ParamStore<T>> {
    let plan = pipe.plan()?;
    let mut store = backbone::init_backbone_params(seed, &pipe.backbone);
    store.absorb(crate::conditioning::init_text_params(
        derive_seed(seed, "init-text", 0),
        &pipe.text,
    ));
    store.absorb(fusion::init_uhead_params(
        derive_seed(seed, "init-uhead", 0),
        &plan,
        &pipe.head,
    )?);
    store.absorb(expert::init_expert_params(
        derive_seed(seed, "init-expert", 0),
        &pipe.expert,
    ));
    store.absorb(fusion::init_baseline_params(
        derive_seed(seed, "init-baseline", 0),
        &plan,
        pipe.head.out_dim,
    ));
    Ok(store)
}

// ----------------------------------------------------------------------
// Alignment logits and losses (value level)
// ----------------------------------------------------------------------

fn cosine_against_rows<T: Scalar>(v: &[f64], w: &Tensor<T>) -> Vec<f64> {
    let k = w.shape()[0];
    let d = w.shape()[1];
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = vec![0.0; k];
    if vn == 0.0 {
        return out;
    }
    for (ki, o) in out.iter_mut().enumerate() {
        let row = &w.data()[ki * d..(ki + 1) * d];
        let mut dot = 0.0;
        let mut wn = 0.0;
        for (a, b) in v.iter().zip(row) {
            dot += a * b.as_f64();
            wn += b.as_f64() * b.as_f64();
        }
        if wn > 0.0 {
            *o = dot / (vn * wn.sqrt());
        }
    }
    out
}

/// Temperature-scaled cosine similarities against the classifier rows.
/// `[d]` features give `[K]` logits; `[d, H, W]` maps give `[K, H, W]`,
/// one similarity column per spatial position. A zero-norm feature is
/// defined to have all-zero similarities.
pub fn cosine_logits<T: Scalar>(
    v: &Tensor<T>,
    w: &ClassifierWeights<T>,
    tau: f64,
) -> Result<Tensor<T>> {
    if tau <= 0.0 {
        return Err(Error::config("temperature must be positive"));
    }
    let d = w.w.shape()[1];
    let k = w.w.shape()[0];
    match *v.shape() {
        [vd] if vd == d => {
            let feat: Vec<f64> = v.data().iter().map(|x| x.as_f64()).collect();
            let sims = cosine_against_rows(&feat, &w.w);
            let data = sims.iter().map(|s| T::from_f64(s / tau)).collect();
            Tensor::from_vec(&[k], data)
        }
        [vd, h, wd] if vd == d => {
            let hw = h * wd;
            let mut data = vec![T::zero(); k * hw];
            for p in 0..hw {
                let feat: Vec<f64> = (0..d).map(|c| v.data()[c * hw + p].as_f64()).collect();
                let sims = cosine_against_rows(&feat, &w.w);
                for (ki, s) in sims.iter().enumerate() {
                    data[ki * hw + p] = T::from_f64(s / tau);
                }
            }
            Tensor::from_vec(&[k, h, wd], data)
        }
        _ => Err(Error::shape(format!(
            "features {:?} do not match classifier width {d}",
            v.shape()
        ))),
    }
}

fn log_softmax_nll(row: &[f64], label: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - row[label]
}

/// Negative log-likelihood of `label` under softmax logits `[K]`.
pub fn ce_loss<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<f64> {
    let [k] = *logits.shape() else {
        return Err(Error::shape("ce_loss wants a flat [K] logit vector"));
    };
    if label >= k {
        return Err(Error::invalid(format!("label {label} out of {k} classes")));
    }
    let row: Vec<f64> = logits.data().iter().map(|v| v.as_f64()).collect();
    Ok(log_softmax_nll(&row, label))
}

/// Mean pixel NLL of a `[K, H, W]` logit map against a class-id mask.
/// Ignored pixels contribute nothing; a fully ignored mask scores 0.
pub fn ce_loss_map<T: Scalar>(
    logits: &Tensor<T>,
    mask: &[usize],
    ignore: Option<usize>,
) -> Result<f64> {
    let [k, h, w] = *logits.shape() else {
        return Err(Error::shape("ce_loss_map wants [K, H, W] logits"));
    };
    let hw = h * w;
    if mask.len() != hw {
        return Err(Error::shape(format!(
            "mask has {} pixels, logits cover {hw}",
            mask.len()
        )));
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for (p, &id) in mask.iter().enumerate() {
        if Some(id) == ignore {
            continue;
        }
        if id >= k {
            return Err(Error::invalid(format!("mask id {id} out of {k} classes")));
        }
        let row: Vec<f64> = (0..k).map(|ki| logits.data()[ki * hw + p].as_f64()).collect();
        acc += log_softmax_nll(&row, id);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { acc / count as f64 })
}

// ----------------------------------------------------------------------
// Metrics
// ----------------------------------------------------------------------

fn argmax_lowest<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if v.as_f64() > row[best].as_f64() {
            best = i;
        }
    }
    best
}

/// Fraction of argmax hits; ties resolve to the lowest class index.
pub fn top1_accuracy<T: Scalar>(logits: &[Tensor<T>], labels: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::data("top-1 accuracy over an empty batch"));
    }
    if logits.len() != labels.len() {
        return Err(Error::shape("one label per logit row"));
    }
    let mut hits = 0usize;
    for (row, &label) in logits.iter().zip(labels) {
        if argmax_lowest(row.data()) == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / labels.len() as f64)
}

fn cosine_f64(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Gallery indices sorted by similarity descending, index-ascending ties.
fn ranked_indices(sims: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..sims.len()).collect();
    idx.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapReport {
    pub map: f64,
    /// Queries that entered the mean.
    pub evaluated: usize,
    /// Queries dropped for having no relevant gallery item.
    pub skipped: usize,
}

/// Mean average precision of label-relevant retrieval. Full-gallery by
/// default; `cutoff` restricts scoring to the top k ranks (AP@k with the
/// usual min(R, k) normalizer).
pub fn map_score(
    query_feats: &[Vec<f64>],
    query_labels: &[usize],
    gallery_feats: &[Vec<f64>],
    gallery_labels: &[usize],
    cutoff: Option<usize>,
) -> Result<MapReport> {
    if query_feats.len() != query_labels.len() || gallery_feats.len() != gallery_labels.len() {
        return Err(Error::shape("one label per feature vector"));
    }
    if query_feats.is_empty() || gallery_feats.is_empty() {
        return Err(Error::data("mAP needs nonempty queries and gallery"));
    }
    if let Some(k) = cutoff {
        if k == 0 {
            return Err(Error::invalid("rank cutoff must be positive"));
        }
    }
    let mut total = 0.0;
    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    for (q, &ql) in query_feats.iter().zip(query_labels) {
        let relevant = gallery_labels.iter().filter(|&&g| g == ql).count();
        if relevant == 0 {
            skipped += 1;
            continue;
        }
        let sims: Vec<f64> = gallery_feats.iter().map(|g| cosine_f64(q, g)).collect();
        let order = ranked_indices(&sims);
        let depth = cutoff.unwrap_or(order.len()).min(order.len());
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank0, &gi) in order[..depth].iter().enumerate() {
            if gallery_labels[gi] == ql {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
            }
        }
        ap /= relevant.min(depth) as f64;
        total += ap;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::data("every query lacked a relevant gallery item"));
    }
    Ok(MapReport {
        map: total / evaluated as f64,
        evaluated,
        skipped,
    })
}

/// Mean IoU over classes present in either mask; pixels whose ground truth
/// equals `ignore` are excluded entirely.
pub fn miou(
    pred: &[usize],
    gt: &[usize],
    num_classes: usize,
    ignore: Option<usize>,
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!(
            "mask sizes differ: {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if num_classes == 0 {
        return Err(Error::invalid("need at least one class"));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if Some(g) == ignore {
            continue;
        }
        if g >= num_classes || (p >= num_classes && Some(p) != ignore) {
            return Err(Error::invalid(format!(
                "mask value outside [0, {num_classes})"
            )));
        }
        if p == g {
            inter[p] += 1;
            union[p] += 1;
        } else {
            if p < num_classes {
                union[p] += 1;
            }
            union[g] += 1;
        }
    }
    let mut total = 0.0;
    let mut seen = 0usize;
    for c in 0..num_classes {
        if union[c] > 0 {
            total += inter[c] as f64 / union[c] as f64;
            seen += 1;
        }
    }
    if seen == 0 {
        return Err(Error::data("no class present in either mask"));
    }
    Ok(total / seen as f64)
}

/// Top-k gallery indices per query under cosine ranking.
pub fn retrieve(
    query_feats: &[Vec<f64>],
    gallery_feats: &[Vec<f64>],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if k > gallery_feats.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds gallery size {}",
            gallery_feats.len()
        )));
    }
    Ok(query_feats
        .iter()
        .map(|q| {
            let sims: Vec<f64> = gallery_feats.iter().map(|g| cosine_f64(q, g)).collect();
            ranked_indices(&sims)[..k].to_vec()
        })
        .collect())
}

/// Zero-shot contract: evaluation categories never overlap training ones.
pub fn check_zero_shot_split(train_labels: &[usize], eval_labels: &[usize]) -> Result<()> {
    for l in eval_labels {
        if train_labels.contains(l) {
            return Err(Error::invalid(format!(
                "label {l} appears in both training and zero-shot evaluation"
            )));
        }
    }
    Ok(())
}

// ----------------------------------------------------------------------
// Shared forward construction
// ----------------------------------------------------------------------

/// Per-sample noise derivation keeps DDPM draws independent across a set
/// while staying a pure function of the base seed.
fn sample_noise(noise: &NoiseMode, index: usize) -> NoiseMode {
    match noise {
        NoiseMode::Ddpm { seed } => NoiseMode::Ddpm {
            seed: derive_seed(*seed, "sample-noise", index as u64),
        },
        other => *other,
    }
}

fn realize_prompt<T: Scalar>(
    pipe: &Pipeline,
    store: &ParamStore<T>,
    caption: &str,
    class_names: &[String],
) -> Result<PromptCondition<T>> {
    let spec = pipe.extract.prompt.realize(caption, class_names);
    make_prompt(&spec, store, &pipe.text)
}

fn sample_bundle<T: Scalar>(
    pipe: &Pipeline,
    store: &ParamStore<T>,
    img: &Tensor<T>,
    prompt: &PromptCondition<T>,
    index: usize,
) -> Result<FeatureBundle<T>> {
    let opts = ExtractOpts {
        t: pipe.extract.t,
        noise: sample_noise(&pipe.extract.noise, index),
        prompt: prompt.clone(),
        cfg_scale: pipe.extract.cfg_scale,
        stages: pipe.extract.stages.clone(),
        want_attn: pipe.head.use_attn_maps,
    };
    backbone::extract_features(img, &opts, store, &pipe.backbone, &pipe.table)
}

type TapNodes = (BTreeMap<TapKey, NodeId>, Option<BTreeMap<TapKey, NodeId>>);

fn bundle_nodes<T: Scalar>(g: &mut Graph<T>, bundle: &FeatureBundle<T>) -> TapNodes {
    let taps = bundle
        .taps
        .iter()
        .map(|(k, t)| (*k, g.constant(t.clone())))
        .collect();
    let attn = bundle.attn.as_ref().map(|m| {
        m.iter()
            .map(|(k, t)| (*k, g.constant(t.clone())))
            .collect()
    });
    (taps, attn)
}

/// U-net forward inside the step graph, with optional in-graph guidance
/// blending. Gradients flow into whichever U-net leaves the binding opened.
fn live_nodes<T: Scalar>(
    g: &mut Graph<T>,
    b: &params::Binding,
    pipe: &Pipeline,
    store: &ParamStore<T>,
    z_t: &Tensor<T>,
    cond: &Tensor<T>,
) -> Result<TapNodes> {
    let z = g.constant(z_t.clone());
    let c = g.constant(cond.clone());
    let want_attn = pipe.head.use_attn_maps;
    let out = backbone::unet_forward(
        g,
        b,
        z,
        pipe.extract.t,
        Some(c),
        &pipe.backbone,
        &pipe.table,
        want_attn,
    )?;
    let keep = |k: &TapKey| pipe.extract.stages.contains(&k.stage);
    let mut taps: BTreeMap<TapKey, NodeId> =
        out.taps.into_iter().filter(|(k, _)| keep(k)).collect();
    if pipe.extract.cfg_scale != 1.0 {
        let null = g.constant(store.get("text.null_embed").clone());
        let unc = backbone::unet_forward(
            g,
            b,
            z,
            pipe.extract.t,
            Some(null),
            &pipe.backbone,
            &pipe.table,
            false,
        )?;
        let s = T::from_f64(pipe.extract.cfg_scale);
        for (key, id) in taps.iter_mut() {
            let u = unc.taps[key];
            let diff = g.sub(*id, u);
            let scaled = g.scale(diff, s);
            *id = g.add(u, scaled);
        }
    }
    let attn = want_attn.then(|| {
        out.attn.into_iter().filter(|(k, _)| keep(k)).collect()
    });
    Ok((taps, attn))
}

/// Fused head output node: the global `[d]` vector, or the dense
/// `[d, out, out]` map when `dense_out` is set.
fn head_node<T: Scalar>(
    g: &mut Graph<T>,
    b: &params::Binding,
    pipe: &Pipeline,
    plan: &FusionPlan,
    taps: &BTreeMap<TapKey, NodeId>,
    attn: Option<&BTreeMap<TapKey, NodeId>>,
    img: &Tensor<T>,
    dense_out: Option<usize>,
) -> Result<NodeId> {
    let expert_nodes = if pipe.expert.enabled && pipe.head_kind == HeadKind::UHead {
        let x = g.constant(img.clone());
        Some(expert::expert_features_nodes(g, b, x, &pipe.expert)?)
    } else {
        None
    };
    match (pipe.head_kind, dense_out) {
        (HeadKind::UHead, None) => {
            let (_, v) = fusion::uhead_global_nodes(
                g,
                b,
                taps,
                expert_nodes.as_deref(),
                attn,
                plan,
                &pipe.head,
            )?;
            Ok(v)
        }
        (HeadKind::UHead, Some(out)) => fusion::uhead_dense_nodes(
            g,
            b,
            taps,
            expert_nodes.as_deref(),
            attn,
            plan,
            &pipe.head,
            out,
        ),
        (HeadKind::Baseline, None) => fusion::baseline_global_nodes(g, b, taps, plan),
        (HeadKind::Baseline, Some(out)) => fusion::baseline_dense_nodes(g, b, taps, plan, out),
    }
}

/// Cosine-alignment cross-entropy on top of a head output node. Global
/// features pair with a single label; dense maps pair with a pixel mask.
fn alignment_loss<T: Scalar>(
    g: &mut Graph<T>,
    feat: NodeId,
    w: NodeId,
    tau: f64,
    labels: &[Option<usize>],
) -> NodeId {
    let shape = g.value(feat).shape().to_vec();
    let rows = match *shape {
        [d] => {
            let r = g.reshape(feat, &[1, d]);
            g.l2_normalize_rows(r)
        }
        [d, h, wd] => {
            let flat = g.reshape(feat, &[d, h * wd]);
            let tokens = g.transpose(flat);
            g.l2_normalize_rows(tokens)
        }
        _ => unreachable!("head outputs are [d] or [d, H, W]"),
    };
    let logits = g.matmul_nt(rows, w);
    let scaled = g.scale(logits, T::from_f64(1.0 / tau));
    g.cross_entropy(scaled, labels)
}

// ----------------------------------------------------------------------
// Training
// ----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean sample loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Scalar count of the unfrozen parameter set.
    pub trained_scalars: usize,
}

fn labels_for<T: Scalar>(
    task: TaskKind,
    sample: &SampleRecord<T>,
    n_classes: usize,
    out_pixels: usize,
) -> Result<Vec<Option<usize>>> {
    match task {
        TaskKind::Classify | TaskKind::Retrieve => {
            if sample.label >= n_classes {
                return Err(Error::invalid(format!(
                    "label {} outside the {n_classes}-way classifier",
                    sample.label
                )));
            }
            Ok(vec![Some(sample.label)])
        }
        TaskKind::Segment => {
            let mask = sample
                .mask
                .as_ref()
                .ok_or_else(|| Error::data("segmentation sample without a mask"))?;
            if mask.len() != out_pixels {
                return Err(Error::shape(format!(
                    "mask has {} pixels, head emits {out_pixels}",
                    mask.len()
                )));
            }
            mask.iter()
                .map(|&id| {
                    if id == IGNORE_INDEX {
                        Ok(None)
                    } else if id >= n_classes {
                        Err(Error::invalid(format!("mask id {id} out of range")))
                    } else {
                        Ok(Some(id))
                    }
                })
                .collect()
        }
    }
}

/// Trains the unfrozen groups against the classifier rows, one optimizer
/// step per sample in dataset order (an epoch is `samples.len()` steps).
/// Deterministic in (config, pipeline, store, samples).
pub fn train_task<T: Scalar>(
    cfg: &TaskConfig,
    pipe: &Pipeline,
    store: &mut ParamStore<T>,
    samples: &[SampleRecord<T>],
    weights: &ClassifierWeights<T>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::data("training needs a nonempty dataset"));
    }
    let plan = pipe.plan()?;
    if weights.w.shape()[1] != pipe.head.out_dim {
        return Err(Error::shape(format!(
            "classifier width {} vs head output {}",
            weights.w.shape()[1],
            pipe.head.out_dim
        )));
    }
    let n_classes = weights.class_names.len();
    let dense_out = match cfg.task {
        TaskKind::Segment => Some(pipe.backbone.image_size),
        _ => None,
    };
    let out_pixels = dense_out.map(|s| s * s).unwrap_or(1);
    let labels: Vec<Vec<Option<usize>>> = samples
        .iter()
        .map(|s| labels_for(cfg.task, s, n_classes, out_pixels))
        .collect::<Result<_>>()?;

    let live = cfg
        .trainable_groups
        .iter()
        .any(|g| matches!(g.as_str(), "backbone" | "backbone-norm"));
    let trainable = params::group_predicate(&cfg.trainable_groups);
    let with_expert = pipe.expert.enabled && pipe.head_kind == HeadKind::UHead;
    let include = |name: &str| {
        name.starts_with("uhead.")
            || name.starts_with("baseline.")
            || (with_expert && name.starts_with("expert."))
            || (live && name.starts_with("unet."))
    };
    let trained_scalars = store
        .iter()
        .filter(|(n, _)| include(n) && trainable(n))
        .map(|(_, t)| t.numel())
        .sum();

    let prompts: Vec<PromptCondition<T>> = samples
        .iter()
        .map(|s| realize_prompt(pipe, store, &s.caption, &weights.class_names))
        .collect::<Result<_>>()?;
    let bundles: Option<Vec<FeatureBundle<T>>> = if live {
        None
    } else {
        Some(
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| sample_bundle(pipe, store, &s.image, &prompts[i], i))
                .collect::<Result<_>>()?,
        )
    };
    let mut latents: Vec<Tensor<T>> = Vec::new();
    let invert_live = live && matches!(pipe.extract.noise, NoiseMode::DdimInvert { .. });
    if live {
        latents = compute_latents(pipe, store, samples)?;
    }

    let mut opt = AdamW::new(cfg.lr);
    opt.weight_decay = cfg.weight_decay;
    opt.clip_norm = Some(cfg.grad_clip);
    let n = samples.len();
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        trained_scalars,
    };

    for epoch in 0..cfg.epochs {
        // Inversion latents track the evolving U-net; DDPM and clean
        // latents never change once the (frozen) encoder has run.
        if invert_live && epoch > 0 {
            latents = compute_latents(pipe, store, samples)?;
        }
        // Datasets arrive class-sorted; stepping through them in order
        // makes consecutive updates pull toward one class at a time. The
        // visit order is a fixed per-epoch permutation (shared by every
        // run), so training stays bitwise reproducible.
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            let mut r = crate::rng::rng_from(derive_seed(0, "task-epoch-order", epoch as u64));
            order.shuffle(&mut r);
        }
        let mut epoch_loss = 0.0;
        for &i in &order {
            let sample = &samples[i];
            let mut g = Graph::new();
            let b = params::bind_where(&mut g, store, include, |n| trainable(n));
            let (taps, attn) = match &bundles {
                Some(bs) => bundle_nodes(&mut g, &bs[i]),
                None => live_nodes(&mut g, &b, pipe, store, &latents[i], &prompts[i].seq)?,
            };
            let feat = head_node(
                &mut g,
                &b,
                pipe,
                &plan,
                &taps,
                attn.as_ref(),
                &sample.image,
                dense_out,
            )?;
            let w = g.constant(weights.w.clone());
            let loss = alignment_loss(&mut g, feat, w, cfg.temperature, &labels[i]);
            epoch_loss += g.value(loss).item().as_f64();
            let grads = g.backward(loss);
            opt.step(store, &params::collect_grads(&g, &grads, store, &b));
        }
        report.epoch_losses.push(epoch_loss / n as f64);
    }
    Ok(report)
}

fn compute_latents<T: Scalar>(
    pipe: &Pipeline,
    store: &ParamStore<T>,
    samples: &[SampleRecord<T>],
) -> Result<Vec<Tensor<T>>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            backbone::noised_latent(
                &s.image,
                pipe.extract.t,
                &sample_noise(&pipe.extract.noise, i),
                store,
                &pipe.backbone,
                &pipe.table,
            )
        })
        .collect()
}

// ----------------------------------------------------------------------
// Evaluation
// ----------------------------------------------------------------------

/// Which vector feeds retrieval similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalFeature {
    /// The projected head output `v` (the default).
    ProjectedV,
    /// Spatial mean of the pre-projection fused map `h`.
    PooledH,
}

/// One evaluated sample's global features.
struct GlobalOut<T: Scalar> {
    v: Tensor<T>,
    h_pooled: Vec<f64>,
}

fn eval_global<T: Scalar>(
    pipe: &Pipeline,
    plan: &FusionPlan,
    store: &ParamStore<T>,
    sample: &SampleRecord<T>,
    class_names: &[String],
    index: usize,
) -> Result<GlobalOut<T>> {
    let prompt = realize_prompt(pipe, store, &sample.caption, class_names)?;
    let bundle = sample_bundle(pipe, store, &sample.image, &prompt, index)?;
    let with_expert = pipe.expert.enabled && pipe.head_kind == HeadKind::UHead;
    let mut g = Graph::new();
    let b = params::bind_where(
        &mut g,
        store,
        |n| {
            n.starts_with("uhead.")
                || n.starts_with("baseline.")
                || (with_expert && n.starts_with("expert."))
        },
        |_| false,
    );
    let (taps, attn) = bundle_nodes(&mut g, &bundle);
    match pipe.head_kind {
        HeadKind::UHead => {
            let expert_nodes = with_expert
                .then(|| {
                    let x = g.constant(sample.image.clone());
                    expert::expert_features_nodes(&mut g, &b, x, &pipe.expert)
                })
                .transpose()?;
            let (h, v) = fusion::uhead_global_nodes(
                &mut g,
                &b,
                &taps,
                expert_nodes.as_deref(),
                attn.as_ref(),
                plan,
                &pipe.head,
            )?;
            let hv = g.value(h);
            let hs = hv.shape().to_vec();
            let hw = hs[1] * hs[2];
            let h_pooled = (0..hs[0])
                .map(|c| {
                    hv.data()[c * hw..(c + 1) * hw]
                        .iter()
                        .map(|x| x.as_f64())
                        .sum::<f64>()
                        / hw as f64
                })
                .collect();
            Ok(GlobalOut {
                v: g.value(v).clone(),
                h_pooled,
            })
        }
        HeadKind::Baseline => {
            let v = fusion::baseline_global_nodes(&mut g, &b, &taps, plan)?;
            let vt = g.value(v).clone();
            let h_pooled = vt.data().iter().map(|x| x.as_f64()).collect();
            Ok(GlobalOut { v: vt, h_pooled })
        }
    }
}

/// Top-1 accuracy of cosine classification over a sample set.
pub fn eval_classification<T: Scalar>(
    pipe: &Pipeline,
    store: &ParamStore<T>,
    weights: &ClassifierWeights<T>,
    samples: &[SampleRecord<T>],
    temperature: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("evaluation over an empty set"));
    }
    let plan = pipe.plan()?;
    let mut logits = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let out = eval_global(pipe, &plan, store, s, &weights.class_names, i)?;
        logits.push(cosine_logits(&out.v, weights, temperature)?);
        labels.push(s.label);
    }
    top1_accuracy(&logits, &labels)
}

/// Sketch-to-photo retrieval mAP; enforces the zero-shot split when given
/// the training label set.
pub fn eval_retrieval<T: Scalar>(
    pipe: &Pipeline,
    store: &ParamStore<T>,
    class_names: &[String],
    queries: &[SampleRecord<T>],
    gallery: &[SampleRecord<T>],
    feature: RetrievalFeature,
    cutoff: Option<usize>,
    train_labels: Option<&[usize]>,
) -> Result<MapReport> {
    if let Some(train) = train_labels {
        let labels: Vec<usize> = queries
            .iter()
            .chain(gallery)
            .map(|s| s.label)
            .collect();
        check_zero_shot_split(train, &labels)?;
    }
    let plan = pipe.plan()?;
    let feats = |set: &[SampleRecord<T>], base: usize| -> Result<Vec<Vec<f64>>> {
        set.iter()
            .enumerate()
            .map(|(i, s)| {
                let out = eval_global(pipe, &plan, store, s, class_names, base + i)?;
                Ok(match feature {
                    RetrievalFeature::ProjectedV => {
                        out.v.data().iter().map(|x| x.as_f64()).collect()
                    }
                    RetrievalFeature::PooledH => out.h_pooled,
                })
            })
            .collect()
    };
    let qf = feats(queries, 0)?;
    let gf = feats(gallery, queries.len())?;
    let ql: Vec<usize> = queries.iter().map(|s| s.label).collect();
    let gl: Vec<usize> = gallery.iter().map(|s| s.label).collect();
    map_score(&qf, &ql, &gf, &gl, cutoff)
}

/// Dataset mIoU of per-pixel cosine argmax against the ground-truth masks.
/// Intersections and unions aggregate over the whole set before the mean.
pub fn eval_segmentation<T: Scalar>(
    pipe: &Pipeline,
    store: &ParamStore<T>,
    weights: &ClassifierWeights<T>,
    samples: &[SampleRecord<T>],
    temperature: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("evaluation over an empty set"));
    }
    let plan = pipe.plan()?;
    let size = pipe.backbone.image_size;
    let with_expert = pipe.expert.enabled && pipe.head_kind == HeadKind::UHead;
    let mut pred_all = Vec::with_capacity(samples.len() * size * size);
    let mut gt_all = Vec::with_capacity(samples.len() * size * size);
    for (i, s) in samples.iter().enumerate() {
        let mask = s
            .mask
            .as_ref()
            .ok_or_else(|| Error::data("segmentation sample without a mask"))?;
        let prompt = realize_prompt(pipe, store, &s.caption, &weights.class_names)?;
        let bundle = sample_bundle(pipe, store, &s.image, &prompt, i)?;
        let mut g = Graph::new();
        let b = params::bind_where(
            &mut g,
            store,
            |n| {
                n.starts_with("uhead.")
                    || n.starts_with("baseline.")
                    || (with_expert && n.starts_with("expert."))
            },
            |_| false,
        );
        let (taps, attn) = bundle_nodes(&mut g, &bundle);
        let feat = head_node(&mut g, &b, pipe, &plan, &taps, attn.as_ref(), &s.image, Some(size))?;
        let map = g.value(feat).clone();
        let logits = cosine_logits(&map, weights, temperature)?;
        let k = weights.class_names.len();
        let hw = size * size;
        for p in 0..hw {
            let col: Vec<f64> = (0..k).map(|ki| logits.data()[ki * hw + p].as_f64()).collect();
            let mut best = 0;
            for (ki, v) in col.iter().enumerate().skip(1) {
                if *v > col[best] {
                    best = ki;
                }
            }
            pred_all.push(best);
        }
        gt_all.extend_from_slice(mask);
    }
    miou(&pred_all, &gt_all, weights.class_names.len(), Some(IGNORE_INDEX))
}
