//! The adapted discriminative expert: a small strided conv net emitting
//! features at the bundle's three resolutions, each passed through a
//! residual bottleneck adapter whose up-projection starts at zero (so a
//! freshly initialized adapter is exactly the identity).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{self, Binding, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExpertVariant {
    /// One conv per stage.
    Plain,
    /// Two convs per stage (a second 3x3 at stage resolution).
    Deep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub image_size: usize,
    /// Output channels per level, finest first.
    pub channels: Vec<usize>,
    pub adapter_bottleneck: usize,
    pub enabled: bool,
    pub variant: ExpertVariant,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            image_size: 64,
            channels: vec![16, 32, 64],
            adapter_bottleneck: 8,
            enabled: true,
            variant: ExpertVariant::Plain,
        }
    }
}

impl ExpertConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial size of level `i`: the first stage divides by 4, later ones
    /// by 2 each, mirroring the bundle resolutions.
    pub fn resolution(&self, i: usize) -> usize {
        self.image_size / (4 << i)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::config("expert needs at least one level"));
        }
        if self.image_size % (4 << (self.levels() - 1)) != 0 {
            return Err(Error::config("image size incompatible with expert strides"));
        }
        for &c in &self.channels {
            if self.adapter_bottleneck >= c {
                return Err(Error::config(
                    "adapter bottleneck must be smaller than every level width",
                ));
            }
        }
        Ok(())
    }
}

/// Fresh expert parameters under the `expert.` namespace. Adapter
/// up-projections (weight and bias) start at zero.
pub fn init_expert_params<T: Scalar>(seed: u64, config: &ExpertConfig) -> ParamStore<T> {
    let mut store = ParamStore::new();
    let mut cin = 3usize;
    for (i, &cout) in config.channels.iter().enumerate() {
        let k = if i == 0 { 4 } else { 3 };
        let mut r = rng::rng_from(rng::derive_seed(seed, "expert-stage", i as u64));
        let (w, b) = params::init_conv(&mut r, cout, cin, k);
        store.insert(&format!("expert.stage{i}.conv.w"), w);
        store.insert(&format!("expert.stage{i}.conv.b"), b);
        if config.variant == ExpertVariant::Deep {
            let (w2, b2) = params::init_conv(&mut r, cout, cout, 3);
            store.insert(&format!("expert.stage{i}.conv2.w"), w2);
            store.insert(&format!("expert.stage{i}.conv2.b"), b2);
        }
        let bn = config.adapter_bottleneck;
        let (dw, db) = params::init_conv(&mut r, bn, cout, 1);
        store.insert(&format!("expert.adapter{i}.down.w"), dw);
        store.insert(&format!("expert.adapter{i}.down.b"), db);
        store.insert(
            &format!("expert.adapter{i}.up.w"),
            Tensor::zeros(&[cout, bn, 1, 1]),
        );
        store.insert(&format!("expert.adapter{i}.up.b"), Tensor::zeros(&[cout]));
        cin = cout;
    }
    store
}

/// Residual bottleneck: `feat + up(silu(down(feat)))`, same shape.
pub fn adapter<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    prefix: &str,
    feat: NodeId,
) -> NodeId {
    let h = g.conv2d(
        feat,
        b.id(&format!("{prefix}.down.w")),
        Some(b.id(&format!("{prefix}.down.b"))),
        1,
        0,
    );
    let h = g.silu(h);
    let h = g.conv2d(
        h,
        b.id(&format!("{prefix}.up.w")),
        Some(b.id(&format!("{prefix}.up.b"))),
        1,
        0,
    );
    g.add(feat, h)
}

/// Builds the expert on the graph; returns adapted per-level features,
/// finest first. Spatial convs replicate-pad so a constant field stays
/// constant (border-free bias propagation).
pub fn expert_features_nodes<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    img: NodeId,
    config: &ExpertConfig,
) -> Result<Vec<NodeId>> {
    config.validate()?;
    let s = config.image_size;
    let shape = g.value(img).shape().to_vec();
    if shape != [3, s, s] {
        return Err(Error::shape(format!(
            "expert expects [3, {s}, {s}], got {shape:?}"
        )));
    }
    let mut x = img;
    let mut out = Vec::with_capacity(config.levels());
    for i in 0..config.levels() {
        let stride = if i == 0 { 4 } else { 2 };
        let pre = if i == 0 { x } else { g.replicate_pad2d(x, 1) };
        let h = g.conv2d(
            pre,
            b.id(&format!("expert.stage{i}.conv.w")),
            Some(b.id(&format!("expert.stage{i}.conv.b"))),
            stride,
            0,
        );
        let mut h = g.silu(h);
        if config.variant == ExpertVariant::Deep {
            let p = g.replicate_pad2d(h, 1);
            let h2 = g.conv2d(
                p,
                b.id(&format!("expert.stage{i}.conv2.w")),
                Some(b.id(&format!("expert.stage{i}.conv2.b"))),
                1,
                0,
            );
            h = g.silu(h2);
        }
        let adapted = adapter(g, b, &format!("expert.adapter{i}"), h);
        out.push(adapted);
        x = adapted;
    }
    Ok(out)
}

/// Value-level wrapper: per-level adapted features, finest first.
pub fn expert_features<T: Scalar>(
    img: &Tensor<T>,
    store: &ParamStore<T>,
    config: &ExpertConfig,
) -> Result<Vec<Tensor<T>>> {
    let mut g = Graph::new();
    let b = params::bind(&mut g, store, |_| false);
    let x = g.constant(img.clone());
    let ids = expert_features_nodes(&mut g, &b, x, config)?;
    Ok(ids.into_iter().map(|id| g.value(id).clone()).collect())
}
