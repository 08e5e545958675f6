//! Deterministic synthetic shape datasets with factor-derived captions.
//!
//! Every image is rendered by the same fixed-point rasterization rule: 4x4
//! supersampled coverage, trigonometry quantized to 1/65536 steps, and final
//! pixels snapped to the u8 grid. Any (spec, seed) pair therefore reproduces
//! the dataset byte for byte, independent of the platform's libm.
//!
//! Three generators cover the task protocols: single-shape classification
//! sets, sketch/photo pairs with held-out categories for zero-shot
//! retrieval, and multi-shape segmentation scenes with class-id masks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{fill_template, PHOTO_TEMPLATE, SKETCH_TEMPLATE};
use crate::error::{Error, Result};
use crate::io::{self, AnyTensor};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::{Scalar, Tensor};

/// Supersampling grid per pixel axis.
const SS: usize = 4;
/// Conservative bounding-circle factor over the nominal radius (the square's
/// corners reach 0.80 * sqrt(2) = 1.13 of it).
const BOUND: f64 = 1.14;

// ----------------------------------------------------------------------
// Factors
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Star,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Cross => "cross",
            ShapeKind::Ring => "ring",
            ShapeKind::Star => "star",
        }
    }
}

impl FromStr for ShapeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown shape {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorKind {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

impl ColorKind {
    pub const ALL: [ColorKind; 6] = [
        ColorKind::Red,
        ColorKind::Green,
        ColorKind::Blue,
        ColorKind::Yellow,
        ColorKind::Magenta,
        ColorKind::Cyan,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
            ColorKind::Yellow => "yellow",
            ColorKind::Magenta => "magenta",
            ColorKind::Cyan => "cyan",
        }
    }

    pub fn rgb(&self) -> [f64; 3] {
        match self {
            ColorKind::Red => [1.0, 0.0, 0.0],
            ColorKind::Green => [0.0, 1.0, 0.0],
            ColorKind::Blue => [0.0, 0.0, 1.0],
            ColorKind::Yellow => [1.0, 1.0, 0.0],
            ColorKind::Magenta => [1.0, 0.0, 1.0],
            ColorKind::Cyan => [0.0, 1.0, 1.0],
        }
    }
}

impl FromStr for ColorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ColorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown color {s:?}")))
    }
}

/// One category: a (color, shape) factor pair such as "red circle".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub color: ColorKind,
    pub shape: ShapeKind,
}

impl Category {
    pub fn new(color: ColorKind, shape: ShapeKind) -> Self {
        Category { color, shape }
    }

    pub fn name(&self) -> String {
        format!("{} {}", self.color.name(), self.shape.name())
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.name(), self.shape.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let (Some(color), Some(shape), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::invalid(format!(
                "category must be \"<color> <shape>\", got {s:?}"
            )));
        };
        Ok(Category {
            color: color.parse()?,
            shape: shape.parse()?,
        })
    }
}

/// The first `n` cells of a diagonal walk over the 6x6 factor grid; the
/// first six categories differ in both color and shape.
pub fn default_categories(n: usize) -> Result<Vec<Category>> {
    if n == 0 || n > 36 {
        return Err(Error::invalid(format!(
            "default category count must be in 1..=36, got {n}"
        )));
    }
    Ok((0..n)
        .map(|i| {
            let diag = i / 6;
            Category {
                shape: ShapeKind::ALL[i % 6],
                color: ColorKind::ALL[(i + diag) % 6],
            }
        })
        .collect())
}

// ----------------------------------------------------------------------
// Specs and records
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Domain {
    Photo,
    Sketch,
}

impl Domain {
    pub fn name(&self) -> &'static str {
        match self {
            Domain::Photo => "photo",
            Domain::Sketch => "sketch",
        }
    }
}

/// One rendered sample with its ground-truth factors.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord<T: Scalar> {
    /// `[3, S, S]` in `[0, 1]`.
    pub image: Tensor<T>,
    pub caption: String,
    pub label: usize,
    /// Row-major `S*S` class ids; segmentation only.
    pub mask: Option<Vec<usize>>,
    pub domain: Domain,
}

/// Category index split for zero-shot protocols.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorySplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub categories: Vec<Category>,
    pub n_per_class: usize,
    pub seed: u64,
    pub image_size: usize,
    /// Train/test category partition for zero-shot tasks.
    pub split: Option<CategorySplit>,
    /// Few-shot budget; consumed by [`Dataset::few_shot_indices`].
    pub shots: Option<usize>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            categories: default_categories(6).unwrap(),
            n_per_class: 16,
            seed: 0,
            image_size: 64,
            split: None,
            shots: None,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::config("category list must be nonempty"));
        }
        let mut names: Vec<String> = self.categories.iter().map(|c| c.name()).collect();
        names.sort();
        names.dedup();
        if names.len() != self.categories.len() {
            return Err(Error::config("duplicate categories"));
        }
        if self.n_per_class == 0 {
            return Err(Error::config("n_per_class must be positive"));
        }
        if self.image_size < 16 || self.image_size % 4 != 0 {
            return Err(Error::config(format!(
                "image size must be >= 16 and divisible by 4, got {}",
                self.image_size
            )));
        }
        if let Some(split) = &self.split {
            if split.train.is_empty() || split.test.is_empty() {
                return Err(Error::config("both split sides must be nonempty"));
            }
            let k = self.categories.len();
            for &i in split.train.iter().chain(&split.test) {
                if i >= k {
                    return Err(Error::config(format!("split index {i} out of {k}")));
                }
            }
            if split.train.iter().any(|i| split.test.contains(i)) {
                return Err(Error::config("zero-shot split sides must be disjoint"));
            }
        }
        if let Some(shots) = self.shots {
            if shots == 0 || shots > self.n_per_class {
                return Err(Error::config(format!(
                    "shots must be in 1..={}, got {shots}",
                    self.n_per_class
                )));
            }
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.categories.iter().map(|c| c.name()).collect()
    }
}

/// A generated split: samples plus the label vocabulary they index into.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub samples: Vec<SampleRecord<T>>,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub seed: u64,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            image_size: self.image_size,
            seed: self.seed,
        }
    }

    /// Sample indices per label, in generation order.
    pub fn label_indices(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.label).or_default().push(i);
        }
        map
    }

    /// First `shots` samples of each label train; the rest evaluate.
    pub fn few_shot_indices(&self, shots: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for (label, idx) in self.label_indices() {
            if idx.len() <= shots {
                return Err(Error::data(format!(
                    "label {label} has {} samples, needs more than {shots}",
                    idx.len()
                )));
            }
            train.extend_from_slice(&idx[..shots]);
            eval.extend_from_slice(&idx[shots..]);
        }
        Ok((train, eval))
    }
}

// ----------------------------------------------------------------------
// Rasterizer
// ----------------------------------------------------------------------

/// Sine quantized to 1/65536 steps. All rasterization trigonometry goes
/// through this (and [`qcos`]) so dataset bytes do not depend on the
/// platform's libm rounding.
pub fn qsin(x: f64) -> f64 {
    (x.sin() * 65536.0).round() / 65536.0
}

pub fn qcos(x: f64) -> f64 {
    (x.cos() * 65536.0).round() / 65536.0
}

/// One shape instance in image coordinates. This is the parameter record a
/// photo and its sketch share.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub color: ColorKind,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub rotation: f64,
    pub brightness: f64,
}

/// Smooth low-amplitude background texture parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BgParams {
    pub tone: [f64; 3],
    pub freq: [f64; 2],
    pub phase: [f64; 3],
}

impl BgParams {
    pub fn draw(r: &mut ChaCha8Rng) -> Self {
        BgParams {
            tone: [
                r.gen_range(0.15..0.45),
                r.gen_range(0.15..0.45),
                r.gen_range(0.15..0.45),
            ],
            freq: [r.gen_range(0.15..0.45), r.gen_range(0.15..0.45)],
            phase: [
                r.gen_range(0.0..std::f64::consts::TAU),
                r.gen_range(0.0..std::f64::consts::TAU),
                r.gen_range(0.0..std::f64::consts::TAU),
            ],
        }
    }

    fn at(&self, x: f64, y: f64, c: usize) -> f64 {
        self.tone[c] + 0.05 * qsin(self.freq[0] * x + self.freq[1] * y + self.phase[c])
    }
}

/// Sketch-domain rendering deltas applied on top of the shared record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SketchJitter {
    pub radius_scale: f64,
    pub rotation_delta: f64,
    /// Stroke half-width in pixels.
    pub stroke: f64,
}

impl SketchJitter {
    pub fn draw(r: &mut ChaCha8Rng) -> Self {
        SketchJitter {
            radius_scale: r.gen_range(0.92..1.08),
            rotation_delta: r.gen_range(-0.15..0.15),
            stroke: r.gen_range(0.9..1.8),
        }
    }
}

/// Resolved geometry for point-inside tests at one effective radius.
struct Geom {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
    cos_t: f64,
    sin_t: f64,
    poly: Vec<(f64, f64)>,
}

impl Geom {
    fn new(shape: &PlacedShape, radius: f64, rotation: f64) -> Self {
        let poly = match shape.kind {
            ShapeKind::Triangle => (0..3)
                .map(|k| {
                    let a = std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::TAU / 3.0;
                    (radius * qcos(a), radius * qsin(a))
                })
                .collect(),
            ShapeKind::Star => (0..10)
                .map(|k| {
                    let a = std::f64::consts::FRAC_PI_2 + k as f64 * std::f64::consts::TAU / 10.0;
                    let rr = if k % 2 == 0 { radius } else { 0.42 * radius };
                    (rr * qcos(a), rr * qsin(a))
                })
                .collect(),
            _ => Vec::new(),
        };
        Geom {
            kind: shape.kind,
            cx: shape.cx,
            cy: shape.cy,
            r: radius,
            cos_t: qcos(rotation),
            sin_t: qsin(rotation),
            poly,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        // Inverse rotation moves the probe into the shape's local frame.
        let lx = dx * self.cos_t + dy * self.sin_t;
        let ly = -dx * self.sin_t + dy * self.cos_t;
        let r = self.r;
        match self.kind {
            ShapeKind::Circle => lx * lx + ly * ly <= r * r,
            ShapeKind::Ring => {
                let d2 = lx * lx + ly * ly;
                let rin = 0.55 * r;
                d2 >= rin * rin && d2 <= r * r
            }
            ShapeKind::Square => {
                let half = 0.80 * r;
                lx.abs() <= half && ly.abs() <= half
            }
            ShapeKind::Cross => {
                let arm = 0.34 * r;
                (lx.abs() <= arm && ly.abs() <= r) || (ly.abs() <= arm && lx.abs() <= r)
            }
            ShapeKind::Triangle | ShapeKind::Star => in_polygon(&self.poly, lx, ly),
        }
    }
}

/// Even-odd crossing test.
fn in_polygon(poly: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) {
            let xint = xi + (y - yi) * (xj - xi) / (yj - yi);
            if x < xint {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Fraction of the pixel's 4x4 subsample grid covered by the geometry.
fn coverage(g: &Geom, px: usize, py: usize) -> f64 {
    let mut hits = 0;
    for sy in 0..SS {
        for sx in 0..SS {
            let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
            let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
            if g.contains(x, y) {
                hits += 1;
            }
        }
    }
    hits as f64 / (SS * SS) as f64
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders shapes over the textured background; `[3, size, size]` in the
/// u8-quantized unit range.
pub fn render_photo<T: Scalar>(shapes: &[PlacedShape], bg: &BgParams, size: usize) -> Tensor<T> {
    render_scene(shapes, &vec![1; shapes.len()], bg, size).0
}

/// Like [`render_photo`] but also paints a class-id mask: a pixel takes a
/// shape's id where its coverage majority-wins, background stays 0.
pub fn render_scene<T: Scalar>(
    shapes: &[PlacedShape],
    ids: &[usize],
    bg: &BgParams,
    size: usize,
) -> (Tensor<T>, Vec<usize>) {
    assert_eq!(shapes.len(), ids.len(), "one mask id per shape");
    let geoms: Vec<(Geom, [f64; 3], f64)> = shapes
        .iter()
        .map(|s| (Geom::new(s, s.radius, s.rotation), s.color.rgb(), s.brightness))
        .collect();
    let mut data = vec![T::zero(); 3 * size * size];
    let mut mask = vec![0usize; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut px = [
                bg.at(x as f64, y as f64, 0),
                bg.at(x as f64, y as f64, 1),
                bg.at(x as f64, y as f64, 2),
            ];
            for (i, (geom, rgb, bright)) in geoms.iter().enumerate() {
                let cov = coverage(geom, x, y);
                if cov == 0.0 {
                    continue;
                }
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - cov) + rgb[c] * bright * cov;
                }
                if cov > 0.5 {
                    mask[y * size + x] = ids[i];
                }
            }
            for c in 0..3 {
                data[c * size * size + y * size + x] = T::from_f64(quantize(px[c]));
            }
        }
    }
    (
        Tensor::from_vec(&[3, size, size], data).unwrap(),
        mask,
    )
}

/// Black outline of the shared record on a white page. The stroke is the
/// band where the shape grown by the stroke width disagrees with the shape
/// shrunk by it, which traces every boundary (both ring circles included).
pub fn render_sketch<T: Scalar>(
    shape: &PlacedShape,
    jitter: &SketchJitter,
    size: usize,
) -> Tensor<T> {
    let r = shape.radius * jitter.radius_scale;
    let rot = shape.rotation + jitter.rotation_delta;
    let outer = Geom::new(shape, r + jitter.stroke, rot);
    let inner = Geom::new(shape, (r - jitter.stroke).max(0.5), rot);
    let mut data = vec![T::zero(); 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let fx = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let fy = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    if outer.contains(fx, fy) != inner.contains(fx, fy) {
                        hits += 1;
                    }
                }
            }
            let v = quantize(1.0 - hits as f64 / (SS * SS) as f64);
            for c in 0..3 {
                data[c * size * size + y * size + x] = T::from_f64(v);
            }
        }
    }
    Tensor::from_vec(&[3, size, size], data).unwrap()
}

// ----------------------------------------------------------------------
// Scene sampling
// ----------------------------------------------------------------------

/// Draw order is part of the determinism contract: cx, cy, radius,
/// rotation, brightness.
fn draw_shape(
    r: &mut ChaCha8Rng,
    cat: &Category,
    size: usize,
    r_range: (f64, f64),
    c_range: (f64, f64),
) -> PlacedShape {
    let s = size as f64;
    PlacedShape {
        kind: cat.shape,
        color: cat.color,
        cx: r.gen_range(c_range.0 * s..c_range.1 * s),
        cy: r.gen_range(c_range.0 * s..c_range.1 * s),
        radius: r.gen_range(r_range.0 * s..r_range.1 * s),
        rotation: r.gen_range(0.0..std::f64::consts::TAU),
        brightness: r.gen_range(0.85..1.0),
    }
}

fn fits(candidate: &PlacedShape, placed: &[PlacedShape], size: usize) -> bool {
    let bound = BOUND * candidate.radius;
    let s = size as f64;
    if candidate.cx - bound < 1.0
        || candidate.cy - bound < 1.0
        || candidate.cx + bound > s - 1.0
        || candidate.cy + bound > s - 1.0
    {
        return false;
    }
    placed.iter().all(|p| {
        let dx = candidate.cx - p.cx;
        let dy = candidate.cy - p.cy;
        let min = bound + BOUND * p.radius + 1.0;
        dx * dx + dy * dy >= min * min
    })
}

/// 1 to 3 non-occluding shapes; each placement gets 100 attempts, a failed
/// scene is redrawn with fresh jitter from the same stream.
fn draw_seg_scene(
    r: &mut ChaCha8Rng,
    categories: &[Category],
    size: usize,
) -> Result<Vec<(usize, PlacedShape)>> {
    for _round in 0..50 {
        let count = r.gen_range(1..=3usize);
        let mut shapes: Vec<(usize, PlacedShape)> = Vec::with_capacity(count);
        let mut ok = true;
        for _ in 0..count {
            let mut placed = false;
            for _attempt in 0..100 {
                let c = r.gen_range(0..categories.len());
                let cand = draw_shape(r, &categories[c], size, (0.09, 0.15), (0.2, 0.8));
                let others: Vec<PlacedShape> = shapes.iter().map(|(_, s)| *s).collect();
                if fits(&cand, &others, size) {
                    shapes.push((c, cand));
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if ok {
            return Ok(shapes);
        }
    }
    Err(Error::data("could not place a non-occluding scene"))
}

fn sample_seed(seed: u64, tag: &str, class: usize, index: usize) -> u64 {
    derive_seed(seed, tag, ((class as u64) << 32) | index as u64)
}

// ----------------------------------------------------------------------
// Generators
// ----------------------------------------------------------------------

/// Balanced single-shape photos, one caption per sample.
pub fn gen_classification_set<T: Scalar>(spec: &DatasetSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let size = spec.image_size;
    let mut samples = Vec::with_capacity(spec.categories.len() * spec.n_per_class);
    for (c, cat) in spec.categories.iter().enumerate() {
        for i in 0..spec.n_per_class {
            let mut r = rng_from(sample_seed(spec.seed, "classify", c, i));
            let shape = draw_shape(&mut r, cat, size, (0.17, 0.28), (0.38, 0.62));
            let bg = BgParams::draw(&mut r);
            samples.push(SampleRecord {
                image: render_photo(&[shape], &bg, size),
                caption: fill_template(PHOTO_TEMPLATE, &cat.name()),
                label: c,
                mask: None,
                domain: Domain::Photo,
            });
        }
    }
    Ok(Dataset {
        samples,
        class_names: spec.class_names(),
        image_size: size,
        seed: spec.seed,
    })
}

/// The shared parameter record behind one (photo, sketch) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub category: usize,
    pub index: usize,
    pub shape: PlacedShape,
    pub bg: BgParams,
    pub sketch: SketchJitter,
}

/// Zero-shot sketch-based retrieval splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchPhotoSet<T: Scalar> {
    /// Photos and sketches of the train categories (both domains).
    pub train: Dataset<T>,
    /// Photos of the held-out categories.
    pub gallery: Dataset<T>,
    /// Sketches of the held-out categories.
    pub queries: Dataset<T>,
    /// Provenance for every rendered pair, in generation order.
    pub records: Vec<InstanceRecord>,
}

pub fn gen_sketch_photo_set<T: Scalar>(spec: &DatasetSpec) -> Result<SketchPhotoSet<T>> {
    spec.validate()?;
    let split = spec
        .split
        .as_ref()
        .ok_or_else(|| Error::config("sketch/photo generation needs a zero-shot split"))?;
    let size = spec.image_size;
    let names = spec.class_names();
    let empty = |seed| Dataset::<T> {
        samples: Vec::new(),
        class_names: names.clone(),
        image_size: size,
        seed,
    };
    let mut train = empty(spec.seed);
    let mut gallery = empty(spec.seed);
    let mut queries = empty(spec.seed);
    let mut records = Vec::new();

    for &c in split.train.iter().chain(&split.test) {
        let cat = &spec.categories[c];
        for i in 0..spec.n_per_class {
            let mut r = rng_from(sample_seed(spec.seed, "sbir", c, i));
            let shape = draw_shape(&mut r, cat, size, (0.17, 0.28), (0.38, 0.62));
            let bg = BgParams::draw(&mut r);
            let jitter = SketchJitter::draw(&mut r);
            let photo = SampleRecord {
                image: render_photo(&[shape], &bg, size),
                caption: fill_template(PHOTO_TEMPLATE, &cat.name()),
                label: c,
                mask: None,
                domain: Domain::Photo,
            };
            let sketch = SampleRecord {
                image: render_sketch(&shape, &jitter, size),
                caption: fill_template(SKETCH_TEMPLATE, &cat.name()),
                label: c,
                mask: None,
                domain: Domain::Sketch,
            };
            if split.train.contains(&c) {
                train.samples.push(photo);
                train.samples.push(sketch);
            } else {
                gallery.samples.push(photo);
                queries.samples.push(sketch);
            }
            records.push(InstanceRecord {
                category: c,
                index: i,
                shape,
                bg,
                sketch: jitter,
            });
        }
    }
    Ok(SketchPhotoSet {
        train,
        gallery,
        queries,
        records,
    })
}

/// Multi-shape scenes with class-id masks. Mask id of category `c` is
/// `c + 1`; id 0 is the background, and `class_names` lists it first. A
/// sample's `label` is its first shape's mask id.
pub fn gen_segmentation_set<T: Scalar>(spec: &DatasetSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let size = spec.image_size;
    let total = spec.categories.len() * spec.n_per_class;
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let mut r = rng_from(sample_seed(spec.seed, "segment", 0, i));
        let shapes = draw_seg_scene(&mut r, &spec.categories, size)?;
        let bg = BgParams::draw(&mut r);
        let placed: Vec<PlacedShape> = shapes.iter().map(|(_, s)| *s).collect();
        let ids: Vec<usize> = shapes.iter().map(|(c, _)| c + 1).collect();
        let (image, mask) = render_scene(&placed, &ids, &bg, size);
        let mut caption = String::from("a photo of a ");
        for (j, (c, _)) in shapes.iter().enumerate() {
            if j > 0 {
                caption.push_str(" and a ");
            }
            caption.push_str(&spec.categories[*c].name());
        }
        samples.push(SampleRecord {
            image,
            caption,
            label: ids[0],
            mask: Some(mask),
            domain: Domain::Photo,
        });
    }
    let mut class_names = vec!["background".to_string()];
    class_names.extend(spec.class_names());
    Ok(Dataset {
        samples,
        class_names,
        image_size: size,
        seed: spec.seed,
    })
}

// ----------------------------------------------------------------------
// Persistence
// ----------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSample {
    caption: String,
    label: usize,
    domain: Domain,
    has_mask: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    image_size: usize,
    seed: u64,
    class_names: Vec<String>,
    samples: Vec<ManifestSample>,
}

fn container_path(stem: &Path) -> PathBuf {
    stem.with_extension("vmf1")
}

fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

/// Writes `{stem}.vmf1` (images and masks) plus `{stem}.json` (captions,
/// labels, splits). The pair is the on-disk form of a [`Dataset`].
pub fn save_dataset<T: Scalar>(ds: &Dataset<T>, stem: &Path) -> Result<()> {
    let manifest = Manifest {
        version: 1,
        image_size: ds.image_size,
        seed: ds.seed,
        class_names: ds.class_names.clone(),
        samples: ds
            .samples
            .iter()
            .map(|s| ManifestSample {
                caption: s.caption.clone(),
                label: s.label,
                domain: s.domain,
                has_mask: s.mask.is_some(),
            })
            .collect(),
    };
    let mut entries: Vec<(String, AnyTensor)> = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        entries.push((format!("image.{i}"), io::any_from(&s.image)));
        if let Some(mask) = &s.mask {
            let data: Vec<T> = mask.iter().map(|&id| T::from_f64(id as f64)).collect();
            let t = Tensor::from_vec(&[ds.image_size, ds.image_size], data)?;
            entries.push((format!("mask.{i}"), io::any_from(&t)));
        }
    }
    io::save_tensors(&container_path(stem), &entries)?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(format!("manifest encode: {e}")))?;
    fs::write(manifest_path(stem), json + "\n")?;
    Ok(())
}

pub fn load_dataset<T: Scalar>(stem: &Path) -> Result<Dataset<T>> {
    let json = fs::read_to_string(manifest_path(stem))?;
    let manifest: Manifest = serde_json::from_str(&json)
        .map_err(|e| Error::format(format!("manifest decode: {e}")))?;
    if manifest.version != 1 {
        return Err(Error::format(format!(
            "unsupported dataset version {}",
            manifest.version
        )));
    }
    let tensors: BTreeMap<String, AnyTensor> = io::load_tensors(&container_path(stem))?
        .into_iter()
        .collect();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for (i, m) in manifest.samples.iter().enumerate() {
        let image = tensors
            .get(&format!("image.{i}"))
            .ok_or_else(|| Error::format(format!("missing image.{i}")))?
            .to_tensor::<T>();
        let mask = if m.has_mask {
            let t = tensors
                .get(&format!("mask.{i}"))
                .ok_or_else(|| Error::format(format!("missing mask.{i}")))?
                .to_tensor::<f64>();
            Some(t.data().iter().map(|v| v.round() as usize).collect())
        } else {
            None
        };
        samples.push(SampleRecord {
            image,
            caption: m.caption.clone(),
            label: m.label,
            mask,
            domain: m.domain,
        });
    }
    Ok(Dataset {
        samples,
        class_names: manifest.class_names,
        image_size: manifest.image_size,
        seed: manifest.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{tokenize, TextConfig};

    fn spec(n_cats: usize, n_per_class: usize, seed: u64) -> DatasetSpec {
        DatasetSpec {
            categories: default_categories(n_cats).unwrap(),
            n_per_class,
            seed,
            image_size: 64,
            split: None,
            shots: None,
        }
    }

    fn images_equal<T: Scalar>(a: &Dataset<T>, b: &Dataset<T>) -> bool {
        a.len() == b.len()
            && a.samples
                .iter()
                .zip(&b.samples)
                .all(|(x, y)| x.image.max_abs_diff(&y.image) == 0.0 && x.caption == y.caption)
    }

    #[test]
    fn classification_set_is_deterministic_and_balanced() {
        let s = spec(3, 4, 9);
        let a: Dataset<f64> = gen_classification_set(&s).unwrap();
        let b: Dataset<f64> = gen_classification_set(&s).unwrap();
        assert!(images_equal(&a, &b), "same spec must be byte-identical");

        let counts = a.label_indices();
        assert_eq!(counts.len(), 3);
        assert!(counts.values().all(|v| v.len() == 4));

        let other: Dataset<f64> = gen_classification_set(&spec(3, 4, 10)).unwrap();
        assert!(!images_equal(&a, &other), "a new seed must change pixels");
    }

    #[test]
    fn red_disk_dominates_its_interior() {
        let shape = PlacedShape {
            kind: ShapeKind::Circle,
            color: ColorKind::Red,
            cx: 32.0,
            cy: 32.0,
            radius: 12.0,
            rotation: 0.0,
            brightness: 0.9,
        };
        let bg = BgParams {
            tone: [0.3, 0.3, 0.3],
            freq: [0.2, 0.3],
            phase: [0.0, 1.0, 2.0],
        };
        let img: Tensor<f64> = render_photo(&[shape], &bg, 64);
        let (mut interior, mut red_ok) = (0, 0);
        for y in 0..64 {
            for x in 0..64 {
                let dx = x as f64 + 0.5 - 32.0;
                let dy = y as f64 + 0.5 - 32.0;
                if (dx * dx + dy * dy).sqrt() <= 12.0 - 1.5 {
                    interior += 1;
                    let r = img.data()[y * 64 + x];
                    let g = img.data()[4096 + y * 64 + x];
                    let b = img.data()[2 * 4096 + y * 64 + x];
                    if r >= 0.7 && g == 0.0 && b == 0.0 {
                        red_ok += 1;
                    }
                }
            }
        }
        assert!(interior > 300, "oracle should cover a real area");
        assert_eq!(red_ok, interior, "interior must be pure scaled red");
    }

    #[test]
    fn pixels_sit_on_the_u8_grid() {
        let ds: Dataset<f64> = gen_classification_set(&spec(2, 2, 3)).unwrap();
        for s in &ds.samples {
            for &v in s.image.data() {
                let steps = v * 255.0;
                assert!((steps - steps.round()).abs() < 1e-9, "off-grid value {v}");
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn sketches_are_grayscale_and_mostly_white() {
        let mut s = spec(4, 3, 5);
        s.split = Some(CategorySplit {
            train: vec![0, 1],
            test: vec![2, 3],
        });
        let set: SketchPhotoSet<f64> = gen_sketch_photo_set(&s).unwrap();
        let sketches: Vec<_> = set
            .train
            .samples
            .iter()
            .chain(&set.queries.samples)
            .filter(|r| r.domain == Domain::Sketch)
            .collect();
        assert_eq!(sketches.len(), 4 * 3);
        let mut total = 0.0;
        let mut count = 0usize;
        for r in &sketches {
            let d = r.image.data();
            for i in 0..4096 {
                assert_eq!(d[i], d[4096 + i], "sketch must be grayscale");
                assert_eq!(d[i], d[2 * 4096 + i]);
                total += d[i];
                count += 1;
            }
        }
        assert!(total / count as f64 > 0.8, "sketches are mostly page");
    }

    #[test]
    fn photo_and_sketch_share_the_parameter_record() {
        let mut s = spec(3, 2, 8);
        s.split = Some(CategorySplit {
            train: vec![0],
            test: vec![1, 2],
        });
        let set: SketchPhotoSet<f64> = gen_sketch_photo_set(&s).unwrap();
        assert_eq!(set.records.len(), 3 * 2);
        for rec in &set.records {
            let photo: Tensor<f64> = render_photo(&[rec.shape], &rec.bg, 64);
            let sketch: Tensor<f64> = render_sketch(&rec.shape, &rec.sketch, 64);
            let photo_pool: Vec<_> = set
                .train
                .samples
                .iter()
                .chain(&set.gallery.samples)
                .collect();
            let sketch_pool: Vec<_> = set
                .train
                .samples
                .iter()
                .chain(&set.queries.samples)
                .collect();
            assert!(
                photo_pool.iter().any(|r| r.image.max_abs_diff(&photo) == 0.0),
                "record {}:{} must re-render its photo",
                rec.category,
                rec.index
            );
            assert!(
                sketch_pool.iter().any(|r| r.image.max_abs_diff(&sketch) == 0.0),
                "record {}:{} must re-render its sketch",
                rec.category,
                rec.index
            );
        }
    }

    #[test]
    fn zero_shot_split_is_enforced() {
        let mut s = spec(4, 2, 1);
        s.split = Some(CategorySplit {
            train: vec![0, 1],
            test: vec![1, 3],
        });
        assert!(gen_sketch_photo_set::<f64>(&s).is_err(), "overlap must fail");

        s.split = Some(CategorySplit {
            train: vec![0, 1],
            test: vec![2, 3],
        });
        let set: SketchPhotoSet<f64> = gen_sketch_photo_set(&s).unwrap();
        let train_labels: Vec<usize> = set.train.samples.iter().map(|r| r.label).collect();
        for q in set.queries.samples.iter().chain(&set.gallery.samples) {
            assert!(
                !train_labels.contains(&q.label),
                "held-out categories must not appear in training"
            );
        }
        assert!(set.gallery.samples.iter().all(|r| r.domain == Domain::Photo));
        assert!(set.queries.samples.iter().all(|r| r.domain == Domain::Sketch));

        s.split = None;
        assert!(gen_sketch_photo_set::<f64>(&s).is_err(), "split is required");
    }

    #[test]
    fn segmentation_scenes_are_well_formed() {
        let s = spec(3, 4, 7);
        let ds: Dataset<f64> = gen_segmentation_set(&s).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.class_names.len(), 4, "background plus categories");
        assert_eq!(ds.class_names[0], "background");
        for r in &ds.samples {
            let mask = r.mask.as_ref().expect("segmentation masks");
            assert_eq!(mask.len(), 64 * 64);
            assert!(mask.iter().all(|&id| id <= 3), "ids within the class set");
            assert!(mask.iter().any(|&id| id == 0), "some background remains");
            assert!(r.label >= 1 && r.label <= 3);
        }
        // Scene statistics: 1..=3 shapes, non-occluding by the placement rule.
        for i in 0..12 {
            let mut r = rng_from(sample_seed(7, "segment", 0, i));
            let shapes = draw_seg_scene(&mut r, &s.categories, 64).unwrap();
            assert!((1..=3).contains(&shapes.len()));
            for a in 0..shapes.len() {
                for b in a + 1..shapes.len() {
                    let (pa, pb) = (&shapes[a].1, &shapes[b].1);
                    let d = ((pa.cx - pb.cx).powi(2) + (pa.cy - pb.cy).powi(2)).sqrt();
                    assert!(
                        d >= BOUND * (pa.radius + pb.radius),
                        "shapes {a} and {b} occlude in scene {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn disk_mask_area_tracks_the_analytic_value() {
        let shape = PlacedShape {
            kind: ShapeKind::Circle,
            color: ColorKind::Blue,
            cx: 30.0,
            cy: 34.0,
            radius: 10.0,
            rotation: 0.4,
            brightness: 0.95,
        };
        let bg = BgParams {
            tone: [0.2, 0.25, 0.3],
            freq: [0.3, 0.2],
            phase: [0.5, 1.5, 2.5],
        };
        let (_, mask) = render_scene::<f64>(&[shape], &[1], &bg, 64);
        let area = mask.iter().filter(|&&id| id == 1).count() as f64;
        let want = std::f64::consts::PI * 100.0;
        assert!(
            (area - want).abs() / want < 0.05,
            "disk area {area} vs analytic {want}"
        );
    }

    #[test]
    fn captions_contain_the_class_name_tokens() {
        let tc = TextConfig::default();
        let mut s = spec(4, 2, 2);
        s.split = Some(CategorySplit {
            train: vec![0, 1],
            test: vec![2, 3],
        });
        let cls: Dataset<f64> = gen_classification_set(&s).unwrap();
        let seg: Dataset<f64> = gen_segmentation_set(&s).unwrap();
        let sp: SketchPhotoSet<f64> = gen_sketch_photo_set(&s).unwrap();
        let all: Vec<(&Dataset<f64>, &SampleRecord<f64>)> = cls
            .samples
            .iter()
            .map(|r| (&cls, r))
            .chain(seg.samples.iter().map(|r| (&seg, r)))
            .chain(sp.train.samples.iter().map(|r| (&sp.train, r)))
            .chain(sp.queries.samples.iter().map(|r| (&sp.queries, r)))
            .collect();
        for (ds, r) in all {
            let caption_ids = tokenize(&r.caption, &tc);
            for id in tokenize(&ds.class_names[r.label], &tc) {
                assert!(
                    caption_ids.contains(&id),
                    "caption {:?} misses a token of {:?}",
                    r.caption,
                    ds.class_names[r.label]
                );
            }
        }
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let dir = std::env::temp_dir().join(format!("vermouth-data-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let stem = dir.join("seg-split");
        let ds: Dataset<f64> = gen_segmentation_set(&spec(2, 2, 4)).unwrap();
        save_dataset(&ds, &stem).unwrap();
        let back: Dataset<f64> = load_dataset(&stem).unwrap();
        assert_eq!(ds.class_names, back.class_names);
        assert_eq!(ds.image_size, back.image_size);
        assert_eq!(ds.len(), back.len());
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.image.max_abs_diff(&b.image), 0.0);
            assert_eq!(a.caption, b.caption);
            assert_eq!(a.label, b.label);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.domain, b.domain);
        }
        fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn spec_validation_rejects_bad_inputs() {
        let mut s = spec(3, 4, 0);
        s.categories.push(s.categories[0]);
        assert!(s.validate().is_err(), "duplicate category");

        let mut s = spec(3, 4, 0);
        s.shots = Some(5);
        assert!(s.validate().is_err(), "shots beyond n_per_class");

        let mut s = spec(3, 4, 0);
        s.image_size = 30;
        assert!(s.validate().is_err(), "image size not divisible by 4");

        let mut s = spec(3, 4, 0);
        s.split = Some(CategorySplit {
            train: vec![0],
            test: vec![7],
        });
        assert!(s.validate().is_err(), "split index out of range");

        assert!("red circle".parse::<Category>().is_ok());
        assert!("red blob".parse::<Category>().is_err());
        assert!("mauve circle".parse::<Category>().is_err());
        assert!(default_categories(37).is_err());
    }

    #[test]
    fn default_categories_are_distinct_and_factor_rich() {
        let cats = default_categories(36).unwrap();
        let mut names: Vec<String> = cats.iter().map(|c| c.name()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 36);
        // The first six cover every shape and every color exactly once.
        let first: Vec<_> = cats[..6].to_vec();
        for k in ShapeKind::ALL {
            assert_eq!(first.iter().filter(|c| c.shape == k).count(), 1);
        }
        for k in ColorKind::ALL {
            assert_eq!(first.iter().filter(|c| c.color == k).count(), 1);
        }
    }

    #[test]
    fn few_shot_indices_partition_in_order() {
        let ds: Dataset<f64> = gen_classification_set(&spec(3, 4, 6)).unwrap();
        let (train, eval) = ds.few_shot_indices(1).unwrap();
        assert_eq!(train.len(), 3);
        assert_eq!(eval.len(), 9);
        let mut all: Vec<usize> = train.iter().chain(&eval).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
        assert!(ds.few_shot_indices(4).is_err(), "nothing left to evaluate");
    }
}
