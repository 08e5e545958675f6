//! Text conditioning: tokenizer, toy text encoder, prompt construction, and
//! classifier weights built from class-name prompts.
//!
//! The tokenizer is a stable word hash, not a learned vocabulary: captions
//! come from synthetic generative factors, so all that matters is that
//! distinct factor words map to distinct ids (checked by a census test) and
//! that the map never changes across platforms or runs.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{self, Binding, ParamStore};
use crate::rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    /// Hash-bucket vocabulary size; id 0 is reserved for padding.
    pub vocab_size: usize,
    /// Token capacity per prompt.
    pub max_tokens: usize,
    /// Embedding and conditioning width.
    pub dim: usize,
    /// Output width of the optional projection layer.
    pub proj_dim: usize,
    /// Emit projected features (the "second-to-last vs projected" toggle).
    pub use_projection: bool,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            vocab_size: 1024,
            max_tokens: 16,
            dim: 64,
            proj_dim: 64,
            use_projection: false,
        }
    }
}

impl TextConfig {
    /// Width of the conditioning vectors handed to cross-attention.
    pub fn cond_dim(&self) -> usize {
        if self.use_projection {
            self.proj_dim
        } else {
            self.dim
        }
    }
}

pub const PAD_ID: usize = 0;

/// FNV-1a word hash into `1..vocab_size`; 0 stays reserved for padding.
fn word_id(word: &str, vocab_size: usize) -> usize {
    const OFFSET: u64 = 0xcbf29ce484222325;
    const PRIME: u64 = 0x100000001b3;
    let mut h = OFFSET;
    for b in word.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(PRIME);
    }
    1 + (h % (vocab_size as u64 - 1)) as usize
}

/// Lowercases, splits on whitespace, hashes each word, truncates to capacity.
/// Empty text gives an empty sequence.
pub fn tokenize(text: &str, config: &TextConfig) -> Vec<usize> {
    text.split_whitespace()
        .take(config.max_tokens)
        .map(|w| word_id(&w.to_lowercase(), config.vocab_size))
        .collect()
}

// ----------------------------------------------------------------------
// Parameters
// ----------------------------------------------------------------------

/// Fresh text-encoder parameters under the `text.` namespace.
pub fn init_text_params<T: Scalar>(seed: u64, config: &TextConfig) -> ParamStore<T> {
    let mut r = rng::rng_from(rng::derive_seed(seed, "text", 0));
    let d = config.dim;
    let mut store = ParamStore::new();
    store.insert(
        "text.tok_embed",
        params::init_embedding(&mut r, config.vocab_size, d),
    );
    store.insert(
        "text.pos_embed",
        params::init_embedding(&mut r, config.max_tokens, d),
    );
    let (w1, b1) = params::init_linear(&mut r, d, d);
    store.insert("text.mlp1.w", w1);
    store.insert("text.mlp1.b", b1);
    let (w2, b2) = params::init_linear(&mut r, d, d);
    store.insert("text.mlp2.w", w2);
    store.insert("text.mlp2.b", b2);
    let (pw, pb) = params::init_linear(&mut r, d, config.proj_dim);
    store.insert("text.proj.w", pw);
    store.insert("text.proj.b", pb);
    store.insert(
        "text.null_embed",
        params::init_embedding(&mut r, 1, config.cond_dim()),
    );
    store
}

// ----------------------------------------------------------------------
// Encoder
// ----------------------------------------------------------------------

/// Encodes non-empty token ids on the graph. Returns `(seq [n,cond_dim],
/// pooled [cond_dim])`; pooled is the mean over token rows, taken before any
/// normalization.
pub fn encode_tokens<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    tokens: &[usize],
    config: &TextConfig,
) -> Result<(NodeId, NodeId)> {
    if tokens.is_empty() {
        return Err(Error::invalid("cannot encode an empty token sequence"));
    }
    if tokens.len() > config.max_tokens {
        return Err(Error::invalid(format!(
            "{} tokens exceed capacity {}",
            tokens.len(),
            config.max_tokens
        )));
    }
    if let Some(bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::invalid(format!(
            "token id {bad} outside vocabulary of {}",
            config.vocab_size
        )));
    }
    let n = tokens.len();
    let emb = g.embedding(b.id("text.tok_embed"), tokens);
    let pos_ids: Vec<usize> = (0..n).collect();
    let pos = g.embedding(b.id("text.pos_embed"), &pos_ids);
    let x = g.add(emb, pos);
    let h = g.matmul(x, b.id("text.mlp1.w"));
    let h = g.add_row_bias(h, b.id("text.mlp1.b"));
    let h = g.silu(h);
    let h = g.matmul(h, b.id("text.mlp2.w"));
    let h = g.add_row_bias(h, b.id("text.mlp2.b"));

    let all_rows: Vec<usize> = (0..n).collect();
    if config.use_projection {
        let seq = g.matmul(h, b.id("text.proj.w"));
        let seq = g.add_row_bias(seq, b.id("text.proj.b"));
        let pooled = g.mean_rows(seq, &all_rows);
        Ok((seq, pooled))
    } else {
        let pooled = g.mean_rows(h, &all_rows);
        Ok((h, pooled))
    }
}

/// Value-level wrapper around [`encode_tokens`] for frozen-encoder callers.
pub fn encode_text<T: Scalar>(
    tokens: &[usize],
    store: &ParamStore<T>,
    config: &TextConfig,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut g = Graph::new();
    let b = params::bind(&mut g, store, |_| false);
    let (seq, pooled) = encode_tokens(&mut g, &b, tokens, config)?;
    Ok((g.value(seq).clone(), g.value(pooled).clone()))
}

// ----------------------------------------------------------------------
// Prompts
// ----------------------------------------------------------------------

/// How the conditioning context for feature extraction is built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PromptSpec {
    /// Learned null embedding, one row.
    Null,
    /// Seeded uniform token ids at full capacity.
    Random { seed: u64 },
    /// The sample's own caption.
    Aligned { caption: String },
    /// One pooled row per class prompt, truncated to capacity.
    AllClasses {
        class_names: Vec<String>,
        template: String,
    },
}

impl PromptSpec {
    pub fn mode_name(&self) -> &'static str {
        match self {
            PromptSpec::Null => "null",
            PromptSpec::Random { .. } => "random",
            PromptSpec::Aligned { .. } => "aligned",
            PromptSpec::AllClasses { .. } => "all-classes",
        }
    }
}

/// A realized conditioning context.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptCondition<T: Scalar> {
    pub mode: String,
    /// Token ids backing the context (provenance; empty for null mode).
    pub tokens: Vec<usize>,
    /// Conditioning rows fed to cross-attention, `[n, cond_dim]`.
    pub seq: Tensor<T>,
    /// Unit-norm summary vector (zero if the raw pooled vector was zero).
    pub pooled: Tensor<T>,
    /// Whether the rows passed through the final projection layer.
    pub projected: bool,
}

fn normalize_vec<T: Scalar>(v: &Tensor<T>) -> Tensor<T> {
    let n = v.norm_f64();
    if n > 0.0 {
        v.scale(T::from_f64(1.0 / n))
    } else {
        v.clone()
    }
}

/// Renders a prompt template: `{}` is replaced by the class name.
pub fn fill_template(template: &str, class_name: &str) -> String {
    template.replacen("{}", class_name, 1)
}

/// Builds the conditioning context for one extraction call.
pub fn make_prompt<T: Scalar>(
    spec: &PromptSpec,
    store: &ParamStore<T>,
    config: &TextConfig,
) -> Result<PromptCondition<T>> {
    let (tokens, seq, pooled) = match spec {
        PromptSpec::Null => {
            let null = store.get("text.null_embed").clone();
            let pooled = null.reshaped(&[config.cond_dim()])?;
            (Vec::new(), null, pooled)
        }
        PromptSpec::Random { seed } => {
            let mut r = rng::rng_from(rng::derive_seed(*seed, "random-prompt", 0));
            let tokens: Vec<usize> = (0..config.max_tokens)
                .map(|_| {
                    use rand::Rng;
                    r.gen_range(1..config.vocab_size)
                })
                .collect();
            let (seq, pooled) = encode_text(&tokens, store, config)?;
            (tokens, seq, pooled)
        }
        PromptSpec::Aligned { caption } => {
            let tokens = tokenize(caption, config);
            if tokens.is_empty() {
                return Err(Error::invalid("aligned prompt needs a non-empty caption"));
            }
            let (seq, pooled) = encode_text(&tokens, store, config)?;
            (tokens, seq, pooled)
        }
        PromptSpec::AllClasses {
            class_names,
            template,
        } => {
            if class_names.is_empty() {
                return Err(Error::invalid("all-classes prompt needs class names"));
            }
            let d = config.cond_dim();
            let mut rows = Vec::new();
            let mut tokens = Vec::new();
            for name in class_names.iter().take(config.max_tokens) {
                let prompt = fill_template(template, name);
                let toks = tokenize(&prompt, config);
                let (_, pooled) = encode_text(&toks, store, config)?;
                rows.extend_from_slice(pooled.data());
                tokens.extend(toks);
            }
            tokens.truncate(config.max_tokens);
            let n = rows.len() / d;
            let seq = Tensor::from_vec(&[n, d], rows)?;
            let mut pooled = Tensor::zeros(&[d]);
            for r in 0..n {
                for c in 0..d {
                    pooled.data_mut()[c] =
                        pooled.data_mut()[c] + seq.data()[r * d + c];
                }
            }
            let pooled = pooled.scale(T::from_f64(1.0 / n as f64));
            (tokens, seq, pooled)
        }
    };
    Ok(PromptCondition {
        mode: spec.mode_name().to_string(),
        tokens,
        seq,
        pooled: normalize_vec(&pooled),
        projected: config.use_projection,
    })
}

// ----------------------------------------------------------------------
// Classifier weights
// ----------------------------------------------------------------------

pub const PHOTO_TEMPLATE: &str = "a photo of a {}";
pub const SKETCH_TEMPLATE: &str = "a sketch of a {}";

/// Text-derived classifier: one unit row per class, open vocabulary (rows can
/// be rebuilt for any class list without retraining anything).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights<T: Scalar> {
    /// `[n_classes, cond_dim]`, L2-normalized rows.
    pub w: Tensor<T>,
    pub class_names: Vec<String>,
    pub template: String,
    pub projected: bool,
}

/// One L2-normalized pooled encoding per class name, stacked into `[K, d]`.
/// Rows depend only on their own class name, so appending classes never
/// perturbs existing rows.
pub fn build_classifier_weights<T: Scalar>(
    class_names: &[String],
    template: &str,
    store: &ParamStore<T>,
    config: &TextConfig,
) -> Result<ClassifierWeights<T>> {
    if class_names.is_empty() {
        return Err(Error::invalid("classifier needs at least one class"));
    }
    let d = config.cond_dim();
    let mut rows = Vec::with_capacity(class_names.len() * d);
    for name in class_names {
        let prompt = fill_template(template, name);
        let tokens = tokenize(&prompt, config);
        let (_, pooled) = encode_text(&tokens, store, config)?;
        let unit = normalize_vec(&pooled);
        rows.extend_from_slice(unit.data());
    }
    Ok(ClassifierWeights {
        w: Tensor::from_vec(&[class_names.len(), d], rows)?,
        class_names: class_names.to_vec(),
        template: template.to_string(),
        projected: config.use_projection,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_max_rel_err;

    /// Every word that can appear in a synthetic caption or class prompt.
    const CAPTION_VOCABULARY: &[&str] = &[
        "a", "photo", "sketch", "of", "circle", "square", "triangle", "cross", "ring", "star",
        "red", "green", "blue", "yellow", "magenta", "cyan", "background",
    ];

    fn cfg() -> TextConfig {
        TextConfig::default()
    }

    #[test]
    fn tokenizer_is_deterministic_and_case_folding() {
        let c = cfg();
        let a = tokenize("A Photo of a RED circle", &c);
        let b = tokenize("a photo of a red circle", &c);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        assert!(tokenize("", &c).is_empty());
        assert!(tokenize("   \t  ", &c).is_empty());
    }

    #[test]
    fn tokenizer_truncates_to_capacity() {
        let c = cfg();
        let long = vec!["word"; 40].join(" ");
        assert_eq!(tokenize(&long, &c).len(), c.max_tokens);
    }

    #[test]
    fn tokenizer_never_emits_pad_id() {
        let c = cfg();
        for w in CAPTION_VOCABULARY {
            let ids = tokenize(w, &c);
            assert_eq!(ids.len(), 1);
            assert_ne!(ids[0], PAD_ID);
            assert!(ids[0] < c.vocab_size);
        }
    }

    #[test]
    fn caption_vocabulary_collision_census_is_under_five_percent() {
        let c = cfg();
        let ids: Vec<usize> = CAPTION_VOCABULARY
            .iter()
            .map(|w| tokenize(w, &c)[0])
            .collect();
        let n = ids.len();
        let mut collisions = 0usize;
        let mut pairs = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                pairs += 1;
                if ids[i] == ids[j] {
                    collisions += 1;
                }
            }
        }
        let rate = collisions as f64 / pairs as f64;
        assert!(
            rate < 0.05,
            "hash collision rate {rate:.4} over {pairs} pairs"
        );
        // Factor words (shapes, colors) must be pairwise distinct outright:
        // class identity rides on them.
        let factor_ids: Vec<usize> = CAPTION_VOCABULARY[4..]
            .iter()
            .map(|w| tokenize(w, &c)[0])
            .collect();
        let mut sorted = factor_ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), factor_ids.len(), "factor words must not collide");
    }

    #[test]
    fn encode_rejects_empty_and_oversized() {
        let c = cfg();
        let store = init_text_params::<f64>(1, &c);
        assert!(encode_text(&[], &store, &c).is_err());
        let too_many = vec![5usize; c.max_tokens + 1];
        assert!(encode_text(&too_many, &store, &c).is_err());
    }

    #[test]
    fn single_token_pooled_equals_its_row() {
        let c = cfg();
        let store = init_text_params::<f64>(2, &c);
        let (seq, pooled) = encode_text(&[7], &store, &c).unwrap();
        assert_eq!(seq.shape(), &[1, c.dim]);
        assert_eq!(pooled.data(), &seq.data()[..c.dim]);
    }

    #[test]
    fn projection_toggle_changes_values_not_shapes() {
        let mut c = cfg();
        let store = init_text_params::<f64>(3, &c);
        let tokens = tokenize("a photo of a red circle", &c);
        let (seq_raw, pooled_raw) = encode_text(&tokens, &store, &c).unwrap();
        c.use_projection = true;
        let (seq_proj, pooled_proj) = encode_text(&tokens, &store, &c).unwrap();
        assert_eq!(seq_raw.shape(), seq_proj.shape());
        assert_eq!(pooled_raw.shape(), pooled_proj.shape());
        assert!(seq_raw.max_abs_diff(&seq_proj) > 1e-6, "projection must alter values");
        assert!(pooled_raw.max_abs_diff(&pooled_proj) > 1e-6);
    }

    #[test]
    fn prompt_modes_have_contracted_shapes() {
        let c = cfg();
        let store = init_text_params::<f32>(4, &c);
        let null = make_prompt(&PromptSpec::Null, &store, &c).unwrap();
        assert_eq!(null.seq.shape(), &[1, c.cond_dim()]);
        assert!(null.tokens.is_empty());
        assert_eq!(
            null.seq.data(),
            store.get("text.null_embed").data(),
            "null mode must surface the learned null embedding row"
        );

        let rand = make_prompt(&PromptSpec::Random { seed: 5 }, &store, &c).unwrap();
        assert_eq!(rand.seq.shape(), &[c.max_tokens, c.cond_dim()]);
        let rand2 = make_prompt(&PromptSpec::Random { seed: 5 }, &store, &c).unwrap();
        assert_eq!(rand.seq, rand2.seq, "random prompts are seed-deterministic");

        let aligned = make_prompt(
            &PromptSpec::Aligned {
                caption: "a photo of a red circle".into(),
            },
            &store,
            &c,
        )
        .unwrap();
        assert_eq!(aligned.seq.shape(), &[6, c.cond_dim()]);
        assert_eq!(aligned.tokens, tokenize("a photo of a red circle", &c));

        let all = make_prompt(
            &PromptSpec::AllClasses {
                class_names: vec!["red circle".into(), "blue square".into()],
                template: PHOTO_TEMPLATE.into(),
            },
            &store,
            &c,
        )
        .unwrap();
        assert_eq!(all.seq.shape(), &[2, c.cond_dim()]);
    }

    #[test]
    fn pooled_vectors_are_unit_bounded() {
        let c = cfg();
        let store = init_text_params::<f64>(6, &c);
        for spec in [
            PromptSpec::Null,
            PromptSpec::Random { seed: 1 },
            PromptSpec::Aligned {
                caption: "a photo of a green star".into(),
            },
        ] {
            let p = make_prompt(&spec, &store, &c).unwrap();
            let n = p.pooled.norm_f64();
            assert!(
                n <= 1.0 + 1e-6,
                "{} pooled norm {n} exceeds unit bound",
                p.mode
            );
        }
    }

    #[test]
    fn classifier_rows_are_unit_norm_and_order_equivariant() {
        let c = cfg();
        let store = init_text_params::<f64>(7, &c);
        let names: Vec<String> = ["red circle", "blue square", "green star"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let cls = build_classifier_weights(&names, PHOTO_TEMPLATE, &store, &c).unwrap();
        let w = &cls.w;
        assert_eq!(w.shape(), &[3, c.cond_dim()]);
        assert_eq!(cls.class_names, names);
        assert!(!cls.projected);
        for k in 0..3 {
            let row = &w.data()[k * c.cond_dim()..(k + 1) * c.cond_dim()];
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6, "row {k} norm {n}");
        }

        // Permuting class names permutes rows bitwise.
        let permuted: Vec<String> = vec![names[2].clone(), names[0].clone(), names[1].clone()];
        let wp = build_classifier_weights(&permuted, PHOTO_TEMPLATE, &store, &c)
            .unwrap()
            .w;
        let d = c.cond_dim();
        assert_eq!(&wp.data()[0..d], &w.data()[2 * d..3 * d]);
        assert_eq!(&wp.data()[d..2 * d], &w.data()[0..d]);

        // Appending an unseen class leaves existing rows untouched.
        let mut extended = names.clone();
        extended.push("yellow ring".into());
        let we = build_classifier_weights(&extended, PHOTO_TEMPLATE, &store, &c)
            .unwrap()
            .w;
        assert_eq!(&we.data()[..3 * d], w.data());
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let c = TextConfig {
            vocab_size: 32,
            max_tokens: 6,
            dim: 8,
            proj_dim: 8,
            use_projection: true,
        };
        let store = init_text_params::<f64>(8, &c);
        let inputs: Vec<(String, Tensor<f64>)> = store
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        let names: Vec<String> = inputs.iter().map(|(n, _)| n.clone()).collect();
        let cfg = c;
        let err = finite_diff_max_rel_err(&inputs, 6, move |g, ids| {
            let binding_ids = names
                .iter()
                .cloned()
                .zip(ids.iter().copied())
                .collect::<std::collections::HashMap<_, _>>();
            let b = Binding::from_ids(binding_ids);
            let (seq, pooled) = encode_tokens(g, &b, &[3, 9, 1], &cfg).unwrap();
            let z1 = Tensor::zeros(g.value(seq).shape());
            let l1 = g.mse_loss(seq, &z1);
            let p2 = g.reshape(pooled, &[1, cfg.cond_dim()]);
            let z2 = Tensor::zeros(&[1, cfg.cond_dim()]);
            let l2 = g.mse_loss(p2, &z2);
            g.add(l1, l2)
        });
        assert!(err <= 1e-5, "text encoder gradient rel err {err:.3e}");
    }
}
