//! The U-head: pyramid fusion of tapped diffusion features (optionally with
//! expert features and attention maps) into either a global vector (down
//! flow, attention-pooled) or a dense per-pixel map (up flow, 1x1 conv).
//!
//! Both flows share the same fuse blocks; only the carry direction and the
//! final projection differ. A sum-fusion baseline head lives here too since
//! it shares the level plan.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{self, BackboneConfig, FeatureBundle, Stage, TapKey};
use crate::error::{Error, Result};
use crate::expert::ExpertConfig;
use crate::params::{self, Binding, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const GN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Flow {
    /// Fine to coarse; ends in an attention-pooled global vector.
    Down,
    /// Coarse to fine; ends in a dense projected map.
    Up,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UHeadConfig {
    pub flow: Flow,
    /// Fuse-block output channels per pyramid level, finest first.
    pub block_channels: Vec<usize>,
    /// Output width; matches the text/conditioning width.
    pub out_dim: usize,
    pub use_attn_maps: bool,
    pub groupnorm_groups: usize,
    /// Fuse-block kernel size (odd).
    pub kernel: usize,
}

impl Default for UHeadConfig {
    fn default() -> Self {
        UHeadConfig {
            flow: Flow::Down,
            block_channels: vec![64, 64, 64],
            out_dim: 64,
            use_attn_maps: false,
            groupnorm_groups: 8,
            kernel: 3,
        }
    }
}

impl UHeadConfig {
    fn gn_groups(&self, channels: usize) -> usize {
        self.groupnorm_groups.min(channels)
    }

    pub fn validate(&self, levels: usize) -> Result<()> {
        if self.out_dim == 0 || self.groupnorm_groups == 0 {
            return Err(Error::config("head dimensions must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::config("fuse kernel must be odd"));
        }
        if self.block_channels.len() < levels {
            return Err(Error::config(format!(
                "{} block widths for {levels} pyramid levels",
                self.block_channels.len()
            )));
        }
        for i in 0..levels {
            let c = self.block_channels[i];
            if c % self.gn_groups(c) != 0 {
                return Err(Error::config(format!(
                    "block width {c} not divisible by its norm groups"
                )));
            }
        }
        Ok(())
    }
}

// ----------------------------------------------------------------------
// Level plan
// ----------------------------------------------------------------------

/// Input layout of one pyramid level, finest first in a [`FusionPlan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPlan {
    pub resolution: usize,
    /// Taps concatenated at this level, in key order.
    pub taps: Vec<TapKey>,
    pub sd_channels: usize,
    pub expert_channels: usize,
    pub attn_channels: usize,
}

impl LevelPlan {
    pub fn in_channels(&self) -> usize {
        self.sd_channels + self.expert_channels + self.attn_channels
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub levels: Vec<LevelPlan>,
}

impl FusionPlan {
    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

/// Derives the per-level input layout for a stage selection. Expert features
/// and attention maps attach to the level whose resolution they match.
pub fn plan_fusion(
    backbone_cfg: &BackboneConfig,
    stages: &[Stage],
    expert: Option<&ExpertConfig>,
    use_attn_maps: bool,
) -> Result<FusionPlan> {
    let catalog = backbone::tap_catalog(backbone_cfg, stages);
    if catalog.is_empty() {
        return Err(Error::config("stage selection yields no taps"));
    }
    let mut resolutions: Vec<usize> = catalog.iter().map(|(_, _, r)| *r).collect();
    resolutions.sort_unstable_by(|a, b| b.cmp(a));
    resolutions.dedup();

    let mut levels = Vec::with_capacity(resolutions.len());
    for &res in &resolutions {
        let mut taps = Vec::new();
        let mut sd_channels = 0;
        for (key, c, r) in &catalog {
            if *r == res {
                taps.push(*key);
                sd_channels += c;
            }
        }
        let expert_channels = expert
            .filter(|e| e.enabled)
            .and_then(|e| {
                (0..e.levels())
                    .find(|&i| e.resolution(i) == res)
                    .map(|i| e.channels[i])
            })
            .unwrap_or(0);
        let attn_channels = if use_attn_maps { taps.len() } else { 0 };
        levels.push(LevelPlan {
            resolution: res,
            taps,
            sd_channels,
            expert_channels,
            attn_channels,
        });
    }
    Ok(FusionPlan { levels })
}

// ----------------------------------------------------------------------
// Parameters
// ----------------------------------------------------------------------

/// Fuse-block input width at pyramid level `i` under the given flow: the
/// level's own inputs plus the carry from the previously processed level.
fn block_in_channels(plan: &FusionPlan, config: &UHeadConfig, i: usize) -> usize {
    let own = plan.levels[i].in_channels();
    let carry = match config.flow {
        Flow::Down => (i > 0).then(|| config.block_channels[i - 1]),
        Flow::Up => (i + 1 < plan.len()).then(|| config.block_channels[i + 1]),
    };
    own + carry.unwrap_or(0)
}

/// Fresh U-head parameters under the `uhead.` namespace.
pub fn init_uhead_params<T: Scalar>(
    seed: u64,
    plan: &FusionPlan,
    config: &UHeadConfig,
) -> Result<ParamStore<T>> {
    config.validate(plan.len())?;
    let mut store = ParamStore::new();
    let k = config.kernel;
    for i in 0..plan.len() {
        let cin = block_in_channels(plan, config, i);
        let cout = config.block_channels[i];
        let mut r = rng::rng_from(rng::derive_seed(seed, "uhead-block", i as u64));
        let (w, b) = params::init_conv(&mut r, cout, cin, k);
        store.insert(&format!("uhead.block{i}.conv.w"), w);
        store.insert(&format!("uhead.block{i}.conv.b"), b);
        let (g, bb) = params::init_norm(cout);
        store.insert(&format!("uhead.block{i}.gn.g"), g);
        store.insert(&format!("uhead.block{i}.gn.b"), bb);
    }
    let d = config.out_dim;
    match config.flow {
        Flow::Down => {
            let coarse = plan.levels.last().unwrap();
            let c_last = config.block_channels[plan.len() - 1];
            let hw = coarse.resolution * coarse.resolution;
            let mut r = rng::rng_from(rng::derive_seed(seed, "uhead-pool", 0));
            store.insert("uhead.pool.q", params::init_embedding(&mut r, 1, d));
            let (kw, _) = params::init_linear::<T>(&mut r, c_last, d);
            store.insert("uhead.pool.k.w", kw);
            store.insert("uhead.pool.pos", Tensor::zeros(&[1, hw]));
            let (pw, pb) = params::init_linear(&mut r, c_last, d);
            store.insert("uhead.pool.proj.w", pw);
            store.insert("uhead.pool.proj.b", pb);
        }
        Flow::Up => {
            let c_fine = config.block_channels[0];
            let mut r = rng::rng_from(rng::derive_seed(seed, "uhead-proj", 0));
            let (w, b) = params::init_conv(&mut r, d, c_fine, 1);
            store.insert("uhead.proj.w", w);
            store.insert("uhead.proj.b", b);
        }
    }
    Ok(store)
}

/// Total parameter count of a U-head; pure in (plan, config).
pub fn uhead_param_count(plan: &FusionPlan, config: &UHeadConfig) -> usize {
    let k = config.kernel;
    let mut n = 0;
    for i in 0..plan.len() {
        let cin = block_in_channels(plan, config, i);
        let cout = config.block_channels[i];
        n += cout * cin * k * k + cout; // conv
        n += 2 * cout; // norm affine
    }
    let d = config.out_dim;
    match config.flow {
        Flow::Down => {
            let c_last = config.block_channels[plan.len() - 1];
            let coarse = plan.levels.last().unwrap();
            n += d; // query
            n += c_last * d; // key projection
            n += coarse.resolution * coarse.resolution; // positional bias
            n += c_last * d + d; // output projection
        }
        Flow::Up => {
            let c_fine = config.block_channels[0];
            n += d * c_fine + d; // 1x1 projection
        }
    }
    n
}

// ----------------------------------------------------------------------
// Blocks
// ----------------------------------------------------------------------

/// Channel-wise concatenation in the fixed order [sd; expert; attn]; absent
/// parts are skipped, and with both absent the input passes through as-is.
pub fn concat_expert<T: Scalar>(
    g: &mut Graph<T>,
    sd_level: NodeId,
    expert_level: Option<NodeId>,
    attn_level: Option<NodeId>,
) -> NodeId {
    let mut parts = vec![sd_level];
    parts.extend(expert_level);
    parts.extend(attn_level);
    if parts.len() == 1 {
        sd_level
    } else {
        g.concat_channels(&parts)
    }
}

/// One fuse block: concat [carry; x], replicate-padded Conv, GroupNorm,
/// SiLU. A spatially constant input stays spatially constant all the way
/// through, since replicate padding adds no border effects.
pub fn fuse_block<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    prefix: &str,
    x: NodeId,
    carry: Option<NodeId>,
    config: &UHeadConfig,
) -> Result<NodeId> {
    let cat = match carry {
        Some(c) => g.concat_channels(&[c, x]),
        None => x,
    };
    let w = b.id(&format!("{prefix}.conv.w"));
    let ws = g.value(w).shape().to_vec();
    let have = g.value(cat).shape()[0];
    if ws[1] != have {
        return Err(Error::shape(format!(
            "{prefix} expects {} input channels, got {have}",
            ws[1]
        )));
    }
    let pad = config.kernel / 2;
    let padded = if pad > 0 {
        g.replicate_pad2d(cat, pad)
    } else {
        cat
    };
    let h = g.conv2d(padded, w, Some(b.id(&format!("{prefix}.conv.b"))), 1, 0);
    let cout = g.value(h).shape()[0];
    let h = g.group_norm(
        h,
        b.id(&format!("{prefix}.gn.g")),
        b.id(&format!("{prefix}.gn.b")),
        config.gn_groups(cout),
        GN_EPS,
    );
    Ok(g.silu(h))
}

/// Validates inputs against the plan and assembles one concatenated node per
/// level, finest first.
fn build_level_inputs<T: Scalar>(
    g: &mut Graph<T>,
    taps: &BTreeMap<TapKey, NodeId>,
    expert: Option<&[NodeId]>,
    attn: Option<&BTreeMap<TapKey, NodeId>>,
    plan: &FusionPlan,
) -> Result<Vec<NodeId>> {
    let mut out = Vec::with_capacity(plan.len());
    for level in &plan.levels {
        let mut sd_parts = Vec::with_capacity(level.taps.len());
        let mut sd_channels = 0;
        for key in &level.taps {
            let id = *taps
                .get(key)
                .ok_or_else(|| Error::data(format!("bundle is missing tap {key}")))?;
            let shape = g.value(id).shape().to_vec();
            if shape[1] != level.resolution || shape[2] != level.resolution {
                return Err(Error::shape(format!(
                    "tap {key} at {}x{}, plan wants {}",
                    shape[1], shape[2], level.resolution
                )));
            }
            sd_channels += shape[0];
            sd_parts.push(id);
        }
        if sd_channels != level.sd_channels {
            return Err(Error::shape(format!(
                "level {} carries {sd_channels} tap channels, plan wants {}",
                level.resolution, level.sd_channels
            )));
        }
        let sd = if sd_parts.len() == 1 {
            sd_parts[0]
        } else {
            g.concat_channels(&sd_parts)
        };

        let expert_level = if level.expert_channels > 0 {
            let feats =
                expert.ok_or_else(|| Error::data("plan expects expert features, none given"))?;
            let id = feats
                .iter()
                .copied()
                .find(|id| g.value(*id).shape()[1] == level.resolution)
                .ok_or_else(|| {
                    Error::data(format!("no expert feature at {}", level.resolution))
                })?;
            let c = g.value(id).shape()[0];
            if c != level.expert_channels {
                return Err(Error::shape(format!(
                    "expert level has {c} channels, plan wants {}",
                    level.expert_channels
                )));
            }
            Some(id)
        } else {
            None
        };

        let attn_level = if level.attn_channels > 0 {
            let maps = attn.ok_or_else(|| Error::data("plan expects attention maps"))?;
            let mut parts = Vec::with_capacity(level.taps.len());
            for key in &level.taps {
                let id = *maps
                    .get(key)
                    .ok_or_else(|| Error::data(format!("missing attention map {key}")))?;
                parts.push(id);
            }
            Some(if parts.len() == 1 {
                parts[0]
            } else {
                g.concat_channels(&parts)
            })
        } else {
            None
        };

        out.push(concat_expert(g, sd, expert_level, attn_level));
    }
    Ok(out)
}

fn carry_down<T: Scalar>(g: &mut Graph<T>, mut x: NodeId, target: usize) -> NodeId {
    while g.value(x).shape()[1] > target {
        x = g.avg_pool2(x);
    }
    assert_eq!(g.value(x).shape()[1], target, "carry cannot reach target");
    x
}

// ----------------------------------------------------------------------
// Flows
// ----------------------------------------------------------------------

/// Down flow on the graph: returns `(h, v)` with `h` the coarsest fused map
/// and `v` its attention-pooled projection, `[out_dim]`.
pub fn uhead_global_nodes<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    taps: &BTreeMap<TapKey, NodeId>,
    expert: Option<&[NodeId]>,
    attn: Option<&BTreeMap<TapKey, NodeId>>,
    plan: &FusionPlan,
    config: &UHeadConfig,
) -> Result<(NodeId, NodeId)> {
    if config.flow != Flow::Down {
        return Err(Error::config("global head requires the down flow"));
    }
    config.validate(plan.len())?;
    let inputs = build_level_inputs(g, taps, expert, attn, plan)?;
    let mut carry: Option<NodeId> = None;
    let mut h = inputs[0];
    for (i, &x) in inputs.iter().enumerate() {
        let carried = carry.map(|c| carry_down(g, c, plan.levels[i].resolution));
        h = fuse_block(g, b, &format!("uhead.block{i}"), x, carried, config)?;
        carry = Some(h);
    }

    // Attention pool: one learned query over spatial tokens.
    let hs = g.value(h).shape().to_vec();
    let (c, hw) = (hs[0], hs[1] * hs[2]);
    let flat = g.reshape(h, &[c, hw]);
    let tokens = g.transpose(flat); // [HW, C]
    let keys = g.matmul(tokens, b.id("uhead.pool.k.w")); // [HW, d]
    let q = b.id("uhead.pool.q"); // [1, d]
    let logits = g.matmul_nt(q, keys); // [1, HW]
    let logits = g.scale(logits, T::from_f64(1.0 / (config.out_dim as f64).sqrt()));
    let logits = g.add(logits, b.id("uhead.pool.pos"));
    let a = g.softmax_rows(logits); // [1, HW]
    let pooled = g.matmul(a, tokens); // [1, C]
    let v = g.matmul(pooled, b.id("uhead.pool.proj.w"));
    let v = g.add_row_bias(v, b.id("uhead.pool.proj.b"));
    let v = g.reshape(v, &[config.out_dim]);
    Ok((h, v))
}

/// Up flow on the graph: dense `[out_dim, out_size, out_size]` map.
pub fn uhead_dense_nodes<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    taps: &BTreeMap<TapKey, NodeId>,
    expert: Option<&[NodeId]>,
    attn: Option<&BTreeMap<TapKey, NodeId>>,
    plan: &FusionPlan,
    config: &UHeadConfig,
    out_size: usize,
) -> Result<NodeId> {
    if config.flow != Flow::Up {
        return Err(Error::config("dense head requires the up flow"));
    }
    config.validate(plan.len())?;
    let inputs = build_level_inputs(g, taps, expert, attn, plan)?;
    let mut carry: Option<NodeId> = None;
    let mut h = inputs[0];
    for i in (0..inputs.len()).rev() {
        let res = plan.levels[i].resolution;
        let carried = carry.map(|c| g.resize_bilinear(c, res, res));
        h = fuse_block(g, b, &format!("uhead.block{i}"), inputs[i], carried, config)?;
        carry = Some(h);
    }
    let proj = g.conv2d(h, b.id("uhead.proj.w"), Some(b.id("uhead.proj.b")), 1, 0);
    Ok(g.resize_bilinear(proj, out_size, out_size))
}

// ----------------------------------------------------------------------
// Value-level wrappers
// ----------------------------------------------------------------------

/// Assembled inputs for one head pass at the value level.
pub struct FusionInput<'a, T: Scalar> {
    pub sd: &'a FeatureBundle<T>,
    pub expert: Option<&'a [Tensor<T>]>,
    pub attn: Option<&'a BTreeMap<TapKey, Tensor<T>>>,
}

fn bind_input<T: Scalar>(
    g: &mut Graph<T>,
    input: &FusionInput<'_, T>,
) -> (
    BTreeMap<TapKey, NodeId>,
    Option<Vec<NodeId>>,
    Option<BTreeMap<TapKey, NodeId>>,
) {
    let taps = input
        .sd
        .taps
        .iter()
        .map(|(k, t)| (*k, g.constant(t.clone())))
        .collect();
    let expert = input
        .expert
        .map(|fs| fs.iter().map(|t| g.constant(t.clone())).collect());
    let attn = input.attn.map(|m| {
        m.iter()
            .map(|(k, t)| (*k, g.constant(t.clone())))
            .collect()
    });
    (taps, expert, attn)
}

/// Global feature: `(h, v)` as tensors, no gradients retained.
pub fn uhead_global<T: Scalar>(
    input: &FusionInput<'_, T>,
    store: &ParamStore<T>,
    plan: &FusionPlan,
    config: &UHeadConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let b = params::bind(&mut g, store, |_| false);
    let (taps, expert, attn) = bind_input(&mut g, input);
    let (h, v) = uhead_global_nodes(
        &mut g,
        &b,
        &taps,
        expert.as_deref(),
        attn.as_ref(),
        plan,
        config,
    )?;
    Ok((g.value(h).clone(), g.value(v).clone()))
}

/// Dense feature map as a tensor, no gradients retained.
pub fn uhead_dense<T: Scalar>(
    input: &FusionInput<'_, T>,
    store: &ParamStore<T>,
    plan: &FusionPlan,
    config: &UHeadConfig,
    out_size: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = params::bind(&mut g, store, |_| false);
    let (taps, expert, attn) = bind_input(&mut g, input);
    let out = uhead_dense_nodes(
        &mut g,
        &b,
        &taps,
        expert.as_deref(),
        attn.as_ref(),
        plan,
        config,
        out_size,
    )?;
    Ok(g.value(out).clone())
}

// ----------------------------------------------------------------------
// Sum-fusion baseline
// ----------------------------------------------------------------------

/// Baseline head parameters: one 1x1 conv per level onto `d` channels.
pub fn init_baseline_params<T: Scalar>(
    seed: u64,
    plan: &FusionPlan,
    d: usize,
) -> ParamStore<T> {
    let mut store = ParamStore::new();
    for (i, level) in plan.levels.iter().enumerate() {
        let mut r = rng::rng_from(rng::derive_seed(seed, "baseline", i as u64));
        let (w, b) = params::init_conv(&mut r, d, level.sd_channels, 1);
        store.insert(&format!("baseline.level{i}.conv.w"), w);
        store.insert(&format!("baseline.level{i}.conv.b"), b);
    }
    store
}

/// Baseline fusion: per-level 1x1 conv to `d` channels, resample every level
/// to the coarsest resolution, sum. Ignores expert features and attention
/// maps by construction.
pub fn baseline_map_nodes<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    taps: &BTreeMap<TapKey, NodeId>,
    plan: &FusionPlan,
) -> Result<NodeId> {
    let coarsest = plan.levels.last().unwrap().resolution;
    let mut acc: Option<NodeId> = None;
    for (i, level) in plan.levels.iter().enumerate() {
        let mut parts = Vec::new();
        for key in &level.taps {
            let id = *taps
                .get(key)
                .ok_or_else(|| Error::data(format!("bundle is missing tap {key}")))?;
            parts.push(id);
        }
        let sd = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_channels(&parts)
        };
        let proj = g.conv2d(
            sd,
            b.id(&format!("baseline.level{i}.conv.w")),
            Some(b.id(&format!("baseline.level{i}.conv.b"))),
            1,
            0,
        );
        let down = carry_down(g, proj, coarsest);
        acc = Some(match acc {
            None => down,
            Some(a) => g.add(a, down),
        });
    }
    Ok(acc.unwrap())
}

/// Baseline global vector: mean over the summed map's positions, `[d]`.
pub fn baseline_global_nodes<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    taps: &BTreeMap<TapKey, NodeId>,
    plan: &FusionPlan,
) -> Result<NodeId> {
    let map = baseline_map_nodes(g, b, taps, plan)?;
    let s = g.value(map).shape().to_vec();
    let (c, hw) = (s[0], s[1] * s[2]);
    let flat = g.reshape(map, &[c, hw]);
    Ok(g.row_mean(flat)) // [c]
}

/// Baseline dense map: summed map bilinearly resized to `out_size`.
pub fn baseline_dense_nodes<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    taps: &BTreeMap<TapKey, NodeId>,
    plan: &FusionPlan,
    out_size: usize,
) -> Result<NodeId> {
    let map = baseline_map_nodes(g, b, taps, plan)?;
    Ok(g.resize_bilinear(map, out_size, out_size))
}
