//! Named parameter storage, initialization, grouping, and the optimizer.
//!
//! Parameters live in an insertion-ordered store keyed by slash-free dotted
//! names (`unet.down0.res.conv1.w`). The leading segment is the namespace
//! (`encoder`, `unet`, `text`, `uhead`, `expert`, `baseline`); group
//! predicates below map namespaces to the trainable groups the trainer
//! understands. Normalization affines inside the backbone carry a `.gn.`
//! segment, which is what "backbone-norm" matches.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::io::{self, AnyTensor};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

/// Insertion-ordered map of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name:?}"
        );
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        match self.index.get(name) {
            Some(&i) => &self.entries[i].1,
            None => panic!("unknown parameter {name:?}"),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        match self.index.get(name) {
            Some(&i) => &mut self.entries[i].1,
            None => panic!("unknown parameter {name:?}"),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar parameters under a namespace prefix.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast());
        }
        out
    }

    /// Moves every entry of `other` into this store; names must not collide.
    pub fn absorb(&mut self, other: ParamStore<T>) {
        for (n, t) in other.entries {
            self.insert(&n, t);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries: Vec<(String, AnyTensor)> = self
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), io::any_from(t)))
            .collect();
        io::save_tensors(path, &entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = io::load_tensors(path)?;
        let mut store = ParamStore::new();
        for (name, any) in entries {
            if store.contains(&name) {
                return Err(Error::format(format!("duplicate checkpoint entry {name:?}")));
            }
            store.insert(&name, any.to_tensor());
        }
        Ok(store)
    }
}

// ----------------------------------------------------------------------
// Groups
// ----------------------------------------------------------------------

/// Trainable groups named in run configs. `backbone-norm` selects exactly the
/// normalization affines of the U-net; `backbone` selects every U-net
/// parameter (norm and non-norm partition it).
pub const GROUPS: &[&str] = &["uhead", "expert", "baseline", "backbone", "backbone-norm", "text"];

pub fn in_group(name: &str, group: &str) -> bool {
    match group {
        "uhead" => name.starts_with("uhead."),
        "expert" => name.starts_with("expert."),
        "baseline" => name.starts_with("baseline."),
        "backbone" => name.starts_with("unet."),
        // Normalization affines all live in a `gn*` name segment.
        "backbone-norm" => name.starts_with("unet.") && name.contains(".gn"),
        "backbone-non-norm" => name.starts_with("unet.") && !name.contains(".gn"),
        "text" => name.starts_with("text."),
        "encoder" => name.starts_with("encoder."),
        _ => false,
    }
}

/// Predicate for "any of these groups".
pub fn group_predicate(groups: &[String]) -> impl Fn(&str) -> bool + '_ {
    move |name| groups.iter().any(|g| in_group(name, g))
}

// ----------------------------------------------------------------------
// Graph binding
// ----------------------------------------------------------------------

/// Parameter-name to graph-leaf mapping for one forward pass.
pub struct Binding {
    ids: HashMap<String, NodeId>,
}

impl Binding {
    /// Wraps pre-built leaves, for callers that manage graph nodes directly.
    pub fn from_ids(ids: HashMap<String, NodeId>) -> Self {
        Binding { ids }
    }

    pub fn id(&self, name: &str) -> NodeId {
        match self.ids.get(name) {
            Some(id) => *id,
            None => panic!("parameter {name:?} not bound"),
        }
    }

    /// Lookup that tolerates parameters excluded from the binding.
    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(|s| s.as_str())
    }
}

/// Inserts every parameter as a graph leaf; `trainable` decides which leaves
/// receive gradients.
pub fn bind<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    trainable: impl Fn(&str) -> bool,
) -> Binding {
    bind_where(graph, store, |_| true, trainable)
}

/// Like [`bind`], but only parameters passing `include` enter the graph.
/// Keeps step graphs small when most of the store is frozen and unused.
pub fn bind_where<T: Scalar>(
    graph: &mut Graph<T>,
    store: &ParamStore<T>,
    include: impl Fn(&str) -> bool,
    trainable: impl Fn(&str) -> bool,
) -> Binding {
    let mut ids = HashMap::new();
    for (name, tensor) in store.iter() {
        if !include(name) {
            continue;
        }
        let id = if trainable(name) {
            graph.leaf(tensor.clone())
        } else {
            graph.constant(tensor.clone())
        };
        ids.insert(name.to_string(), id);
    }
    Binding { ids }
}

/// Collects gradients for all bound parameters in store order. Parameters
/// without a gradient (unused or frozen) are omitted.
pub fn collect_grads<T: Scalar>(
    graph: &Graph<T>,
    grads: &crate::autodiff::Gradients<T>,
    store: &ParamStore<T>,
    binding: &Binding,
) -> Vec<(String, Tensor<T>)> {
    let _ = graph;
    store
        .iter()
        .filter_map(|(name, _)| {
            let id = binding.try_id(name)?;
            grads.get(id).map(|g| (name.to_string(), g.clone()))
        })
        .collect()
}

// ----------------------------------------------------------------------
// Initialization
// ----------------------------------------------------------------------

/// Uniform fan-in init for conv kernels, `U(+-1/sqrt(fan_in))`.
pub fn init_conv<T: Scalar>(
    rng: &mut ChaCha8Rng,
    out_ch: usize,
    in_ch: usize,
    k: usize,
) -> (Tensor<T>, Tensor<T>) {
    let bound = 1.0 / ((in_ch * k * k) as f64).sqrt();
    let w = rng::uniform_tensor(rng, &[out_ch, in_ch, k, k], -bound, bound);
    let b = rng::uniform_tensor(rng, &[out_ch], -bound, bound);
    (w, b)
}

/// Uniform fan-in init for a `[in,out]` matrix used as `x·W`.
pub fn init_linear<T: Scalar>(
    rng: &mut ChaCha8Rng,
    in_dim: usize,
    out_dim: usize,
) -> (Tensor<T>, Tensor<T>) {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = rng::uniform_tensor(rng, &[in_dim, out_dim], -bound, bound);
    let b = rng::uniform_tensor(rng, &[out_dim], -bound, bound);
    (w, b)
}

/// Gaussian embedding init with 0.02 standard deviation.
pub fn init_embedding<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor<T> {
    rng::normal_tensor::<T>(rng, &[rows, dim]).scale(T::from_f64(0.02))
}

/// GroupNorm affine: scale one, bias zero.
pub fn init_norm<T: Scalar>(channels: usize) -> (Tensor<T>, Tensor<T>) {
    (
        Tensor::filled(&[channels], T::one()),
        Tensor::zeros(&[channels]),
    )
}

// ----------------------------------------------------------------------
// Optimizer
// ----------------------------------------------------------------------

/// Adam with decoupled weight decay and global-norm gradient clipping.
pub struct AdamW<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 clip threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
    step: u64,
    m: HashMap<String, Tensor<T>>,
    v: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            clip_norm: Some(1.0),
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Applies one update. `grads` must be in a deterministic order; the
    /// global clip norm accumulates over exactly the tensors given here.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(String, Tensor<T>)]) {
        if grads.is_empty() {
            return;
        }
        self.step += 1;
        let mut total_sq = 0.0f64;
        for (_, g) in grads {
            let n = g.norm_f64();
            total_sq += n * n;
        }
        let total = total_sq.sqrt();
        let clip_scale = match self.clip_norm {
            Some(c) if total > c => c / total,
            _ => 1.0,
        };

        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let scale = T::from_f64(clip_scale);
        let lr = T::from_f64(self.lr);
        let wd = T::from_f64(self.lr * self.weight_decay);
        let eps = T::from_f64(self.eps);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);

        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let theta = store.get_mut(name);
            assert_eq!(theta.shape(), grad.shape(), "grad shape for {name}");
            let td = theta.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..td.len() {
                let g = grad.data()[i] * scale;
                md[i] = b1 * md[i] + one_m_b1 * g;
                vd[i] = b2 * vd[i] + one_m_b2 * g * g;
                let mhat = md[i] * inv_bc1;
                let vhat = vd[i] * inv_bc2;
                td[i] = td[i] - lr * mhat / (vhat.sqrt() + eps) - wd * td[i];
            }
        }
    }
}
