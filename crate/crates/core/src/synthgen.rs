//! Deterministic synthetic five-modal identities.
//!
//! Each identity is a vector of eight categorical attributes. The RGB view
//! paints them onto a fixed body layout; infrared keeps only luminance,
//! colour pencil rotates hue and snaps to a coarse palette, sketch keeps only
//! edges, and text names a random subset of the attributes. Every draw comes
//! from a stream keyed by (seed, identity, modality, view).

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Payload, SampleRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::modality::Modality;
use crate::rng;

const TAG_ATTR: u64 = 1;
const TAG_VIEW: u64 = 2;
const TAG_TEXT: u64 = 3;
const TAG_SPLIT: u64 = 4;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const MASK: usize = 2;
/// First id that is an ordinary word.
pub const FIRST_WORD: usize = 3;

/// Reference canvas; layouts are scaled from it to the configured size.
const REF_H: usize = 32;
const REF_W: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub n_cameras: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            n_identities: 30,
            views: 4,
            height: 32,
            width: 16,
            patch_size: 8,
            vocab_size: 64,
            n_cameras: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 || self.views == 0 || self.n_cameras == 0 {
            return Err(Error::Config("need at least 2 identities, 1 view and 1 camera".into()));
        }
        if self.patch_size == 0 || self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.height, self.width, self.patch_size
            )));
        }
        if self.height < REF_H / 2 || self.width < REF_W / 2 {
            return Err(Error::Config(format!("images must be at least {}x{}", REF_H / 2, REF_W / 2)));
        }
        let needed = FIRST_WORD + WORDS.len();
        if self.vocab_size < needed {
            return Err(Error::Config(format!(
                "vocabulary of {} cannot hold the {needed} template words and flags",
                self.vocab_size
            )));
        }
        Ok(())
    }

    /// Longest text the templates can produce, flags included.
    pub fn max_text_len(&self) -> usize {
        MAX_TEXT_WORDS + 2
    }
}

pub const TOP_HUES: usize = 8;
pub const HAIR_HUES: usize = 4;
pub const BUILDS: usize = 3;
pub const SHOE_HUES: usize = 4;

const GARMENT_RGB: [[f64; 3]; TOP_HUES] = [
    [0.90, 0.10, 0.10],
    [0.95, 0.55, 0.10],
    [0.95, 0.90, 0.15],
    [0.15, 0.75, 0.20],
    [0.10, 0.80, 0.85],
    [0.15, 0.25, 0.90],
    [0.55, 0.20, 0.80],
    [0.95, 0.45, 0.70],
];
const GARMENT_WORDS: [&str; TOP_HUES] = ["red", "orange", "yellow", "green", "cyan", "blue", "purple", "pink"];
const HAIR_RGB: [[f64; 3]; HAIR_HUES] = [[0.08, 0.08, 0.08], [0.45, 0.27, 0.10], [0.92, 0.82, 0.45], [0.60, 0.60, 0.60]];
const HAIR_WORDS: [&str; HAIR_HUES] = ["black", "brown", "blonde", "gray"];
const SHOE_RGB: [[f64; 3]; SHOE_HUES] = [[0.08, 0.08, 0.08], [0.95, 0.95, 0.95], [0.45, 0.27, 0.10], [0.60, 0.60, 0.60]];
const SHOE_WORDS: [&str; SHOE_HUES] = ["black", "white", "brown", "gray"];
const SKIN: [f64; 3] = [0.85, 0.65, 0.50];
const BAG_RGB: [f64; 3] = [0.30, 0.30, 0.15];
const HAT_RGB: [f64; 3] = [0.20, 0.20, 0.30];
const BUILD_WORDS: [[&str; 2]; BUILDS] = [["slim", "thin"], ["average", "medium"], ["heavy", "broad"]];

/// Every word the templates can emit, in vocabulary order.
pub const WORDS: [&str; 41] = [
    "a", "person", "wearing", "with", "and", "carrying", "hair", "top", "shirt", "jacket", "pants", "trousers",
    "jeans", "shoes", "sneakers", "boots", "bag", "backpack", "hat", "cap", "striped", "slim", "thin", "average",
    "medium", "heavy", "broad", "red", "orange", "yellow", "green", "cyan", "blue", "purple", "pink", "black",
    "brown", "blonde", "gray", "white", "in",
];
const MAX_TEXT_WORDS: usize = 22;

pub fn word_id(word: &str) -> usize {
    FIRST_WORD + WORDS.iter().position(|w| *w == word).expect("template word is in the vocabulary")
}

/// Vocabulary strings indexed by token id, flags first.
pub fn vocabulary() -> Vec<String> {
    ["<bos>", "<eos>", "<mask>"].iter().chain(WORDS.iter()).map(|s| s.to_string()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Attributes {
    pub top_hue: usize,
    pub bottom_hue: usize,
    pub hair_hue: usize,
    pub build: usize,
    pub shoe_hue: usize,
    pub bag: bool,
    pub hat: bool,
    pub striped: bool,
}

impl Attributes {
    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            top_hue: rng.random_range(0..TOP_HUES),
            bottom_hue: rng.random_range(0..TOP_HUES),
            hair_hue: rng.random_range(0..HAIR_HUES),
            build: rng.random_range(0..BUILDS),
            shoe_hue: rng.random_range(0..SHOE_HUES),
            bag: rng.random_bool(0.5),
            hat: rng.random_bool(0.5),
            striped: rng.random_bool(0.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentitySpec {
    pub id: usize,
    pub attributes: Attributes,
}

/// Draws distinct attribute vectors: a vector that repeats an earlier
/// identity's is redrawn from the next stream for that identity.
pub fn identities(n: usize, seed: u64) -> Vec<IdentitySpec> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    for id in 0..n {
        let mut attempt = 0u64;
        let attributes = loop {
            let a = Attributes::draw(&mut rng::stream(&[seed, TAG_ATTR, id as u64, attempt]));
            if seen.insert(a) {
                break a;
            }
            attempt += 1;
        };
        out.push(IdentitySpec { id, attributes });
    }
    out
}

/// Per-view rendering jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewParams {
    pub background: f64,
    pub gain: f64,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl ViewParams {
    pub fn draw(seed: u64, identity: usize, modality: Modality, view: usize) -> Self {
        let mut r = rng::stream(&[seed, TAG_VIEW, identity as u64, modality.index() as u64, view as u64]);
        Self {
            background: r.random_range(0.47..0.53),
            gain: r.random_range(0.97..1.03),
            noise_std: 0.03,
            noise_seed: r.random(),
        }
    }

    pub fn clean(self) -> Self {
        Self { noise_std: 0.0, ..self }
    }
}

/// Axis-aligned box in reference-canvas units, `[y0, y1) × [x0, x1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Region {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Region {
    const fn new(y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        Self { y0, y1, x0, x1 }
    }

    /// The same box on an `h×w` canvas.
    pub fn scaled(self, h: usize, w: usize) -> Self {
        Self {
            y0: self.y0 * h / REF_H,
            y1: self.y1 * h / REF_H,
            x0: self.x0 * w / REF_W,
            x1: self.x1 * w / REF_W,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

pub const HEAD: Region = Region::new(0, 4, 5, 11);
pub const HAT: Region = Region::new(0, 3, 4, 12);
pub const FACE: Region = Region::new(4, 8, 5, 11);
pub const TORSO_ROWS: (usize, usize) = (8, 18);
pub const TORSO_COLS: [(usize, usize); BUILDS] = [(5, 11), (4, 12), (3, 13)];
pub const LEGS: [Region; 2] = [Region::new(18, 28, 5, 7), Region::new(18, 28, 9, 11)];
pub const SHOES: [Region; 2] = [Region::new(28, 32, 4, 7), Region::new(28, 32, 9, 12)];
pub const BAG: Region = Region::new(10, 17, 13, 16);

/// Where each attribute can paint, in reference units.
pub fn attribute_regions(name: &str) -> Vec<Region> {
    let torso = Region::new(TORSO_ROWS.0, TORSO_ROWS.1, TORSO_COLS[BUILDS - 1].0, TORSO_COLS[BUILDS - 1].1);
    match name {
        "top_hue" | "striped" | "build" => vec![torso],
        "bottom_hue" => LEGS.to_vec(),
        "hair_hue" => vec![HEAD],
        "shoe_hue" => SHOES.to_vec(),
        "bag" => vec![BAG],
        "hat" => vec![HAT],
        _ => Vec::new(),
    }
}

fn paint(img: &mut Image, region: Region, rgb: [f64; 3]) {
    let r = region.scaled(img.height(), img.width());
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            img.set_pixel(y, x, &rgb);
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn finish(mut img: Image, view: &ViewParams) -> Image {
    let normal = Normal::new(0.0, view.noise_std.max(f64::MIN_POSITIVE)).expect("valid noise");
    let mut r = rng::stream(&[view.noise_seed]);
    let (h, w, c) = (img.height(), img.width(), img.channels());
    for y in 0..h {
        for x in 0..w {
            let px: Vec<f64> = img
                .pixel(y, x)
                .iter()
                .map(|&v| {
                    let n = if view.noise_std > 0.0 { normal.sample(&mut r) } else { 0.0 };
                    quantize(v * view.gain + n)
                })
                .collect();
            img.set_pixel(y, x, &px[..c]);
        }
    }
    img
}

/// The attribute painting before gain and noise.
fn paint_rgb(a: &Attributes, h: usize, w: usize, background: f64) -> Image {
    let mut img = Image::filled(h, w, 3, background);
    paint(&mut img, HEAD, HAIR_RGB[a.hair_hue]);
    paint(&mut img, FACE, SKIN);
    let (c0, c1) = TORSO_COLS[a.build];
    let top = GARMENT_RGB[a.top_hue];
    for y in TORSO_ROWS.0..TORSO_ROWS.1 {
        let dark = a.striped && (y - TORSO_ROWS.0) % 3 == 2;
        let rgb = if dark { top.map(|v| v * 0.4) } else { top };
        paint(&mut img, Region::new(y, y + 1, c0, c1), rgb);
    }
    for leg in LEGS {
        paint(&mut img, leg, GARMENT_RGB[a.bottom_hue]);
    }
    for shoe in SHOES {
        paint(&mut img, shoe, SHOE_RGB[a.shoe_hue]);
    }
    if a.bag {
        paint(&mut img, BAG, BAG_RGB);
    }
    if a.hat {
        paint(&mut img, HAT, HAT_RGB);
    }
    img
}

/// RGB rendering of `a` under `view`, pixels on the 1/255 grid.
pub fn render_rgb(a: &Attributes, view: &ViewParams, h: usize, w: usize) -> Image {
    finish(paint_rgb(a, h, w, view.background), view)
}

fn luminance(p: &[f64]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

/// Luminance mapped to a thermal-like range, plus noise.
pub fn render_ir(a: &Attributes, view: &ViewParams, h: usize, w: usize) -> Image {
    let rgb = paint_rgb(a, h, w, view.background);
    let data = (0..h * w)
        .map(|i| 0.15 + 0.8 * luminance(rgb.pixel(i / w, i % w)))
        .collect();
    finish(Image::new(h, w, 1, data).expect("valid ir image"), view)
}

/// Hue rotated by a third of a turn and snapped to four levels per channel.
pub fn render_cp(a: &Attributes, view: &ViewParams, h: usize, w: usize) -> Image {
    let rgb = finish(paint_rgb(a, h, w, view.background), view);
    let mut out = Image::filled(h, w, 3, 0.0);
    for y in 0..h {
        for x in 0..w {
            let p = rgb.pixel(y, x);
            let rotated = [p[2], p[0], p[1]];
            out.set_pixel(y, x, &rotated.map(|v| quantize((v * 3.0).round() / 3.0)));
        }
    }
    out
}

/// Share of pixels drawn as strokes in a sketch.
pub const SKETCH_INK: f64 = 0.2;

/// Dark strokes on white along the colour contours of the painting. Pixels
/// are ranked by forward-difference RGB gradient plus per-view jitter and a
/// fixed share is inked, so the mean intensity carries no colour.
pub fn render_sk(a: &Attributes, view: &ViewParams, h: usize, w: usize) -> Image {
    let rgb = paint_rgb(a, h, w, view.background);
    let dist = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
    let normal = Normal::new(0.0, view.noise_std.max(f64::MIN_POSITIVE)).expect("valid noise");
    let mut r = rng::stream(&[view.noise_seed]);
    let mut scores: Vec<(f64, usize)> = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let p = rgb.pixel(y, x);
            let gx = dist(rgb.pixel(y, (x + 1).min(w - 1)), p);
            let gy = dist(rgb.pixel((y + 1).min(h - 1), x), p);
            let jitter = if view.noise_std > 0.0 { normal.sample(&mut r) } else { 0.0 };
            (gx.max(gy) * view.gain + jitter, i)
        })
        .collect();
    scores.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)));
    let ink = (SKETCH_INK * (h * w) as f64).round() as usize;
    let mut data = vec![1.0; h * w];
    for &(_, i) in &scores[..ink] {
        data[i] = 0.0;
    }
    Image::new(h, w, 1, data).expect("valid sketch")
}

/// Attribute description from templates with synonyms. Each clause is kept
/// with probability 0.8 (at least two survive) and clause order is shuffled.
pub fn render_text(a: &Attributes, seed: u64, identity: usize, view: usize) -> Vec<usize> {
    let mut r = rng::stream(&[seed, TAG_TEXT, identity as u64, view as u64]);
    let pick = |r: &mut rand_chacha::ChaCha8Rng, opts: &[&'static str]| opts[r.random_range(0..opts.len())];
    let mut clauses: Vec<Vec<&str>> = Vec::new();
    clauses.push(vec!["a", pick(&mut r, &BUILD_WORDS[a.build]), "person"]);
    let mut top = vec![pick(&mut r, &["wearing", "in"]), GARMENT_WORDS[a.top_hue]];
    if a.striped {
        top.push("striped");
    }
    top.push(pick(&mut r, &["top", "shirt", "jacket"]));
    clauses.push(top);
    clauses.push(vec!["and", GARMENT_WORDS[a.bottom_hue], pick(&mut r, &["pants", "trousers", "jeans"])]);
    clauses.push(vec!["with", SHOE_WORDS[a.shoe_hue], pick(&mut r, &["shoes", "sneakers", "boots"])]);
    clauses.push(vec![HAIR_WORDS[a.hair_hue], "hair"]);
    if a.bag {
        clauses.push(vec!["carrying", "a", pick(&mut r, &["bag", "backpack"])]);
    }
    if a.hat {
        clauses.push(vec!["with", "a", pick(&mut r, &["hat", "cap"])]);
    }
    let mut keep: Vec<Vec<&str>> = clauses.iter().filter(|_| r.random_bool(0.8)).cloned().collect();
    if keep.len() < 2 {
        keep = clauses[..2].to_vec();
    }
    keep.shuffle(&mut r);
    let mut ids = vec![BOS];
    ids.extend(keep.iter().flatten().map(|w| word_id(w)));
    ids.push(EOS);
    ids
}

pub fn render(cfg: &SynthConfig, spec: &IdentitySpec, m: Modality, view: usize) -> Payload {
    let (h, w) = (cfg.height, cfg.width);
    let vp = ViewParams::draw(cfg.seed, spec.id, m, view);
    let a = &spec.attributes;
    match m {
        Modality::Rgb => Payload::Image(render_rgb(a, &vp, h, w)),
        Modality::Infrared => Payload::Image(render_ir(a, &vp, h, w)),
        Modality::ColorPencil => Payload::Image(render_cp(a, &vp, h, w)),
        Modality::Sketch => Payload::Image(render_sk(a, &vp, h, w)),
        Modality::Text => Payload::Text(render_text(a, cfg.seed, spec.id, view)),
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub cfg: SynthConfig,
    pub identities: Vec<IdentitySpec>,
    /// Ordered by identity, then modality, then view.
    pub samples: Vec<SampleRecord>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let ids = identities(cfg.n_identities, cfg.seed);
    let mut samples = Vec::with_capacity(ids.len() * Modality::ALL.len() * cfg.views);
    for spec in &ids {
        for m in Modality::ALL {
            for view in 0..cfg.views {
                samples.push(SampleRecord {
                    identity: spec.id,
                    modality: m,
                    view,
                    camera: view % cfg.n_cameras,
                    payload: render(cfg, spec, m, view),
                });
            }
        }
    }
    Ok(SynthDataset {
        cfg: cfg.clone(),
        identities: ids,
        samples,
    })
}

/// Identity-disjoint split: `round(n · train_fraction)` identities, chosen
/// by a seeded shuffle, go to training. Both lists come back sorted.
pub fn split_identities(ids: &[usize], train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_train = (ids.len() as f64 * train_fraction).round() as usize;
    if !(0.0..=1.0).contains(&train_fraction) || n_train == 0 || n_train >= ids.len() {
        return Err(Error::Config(format!(
            "train fraction {train_fraction} of {} identities leaves a split empty",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut rng::stream(&[seed, TAG_SPLIT]));
    let mut train = shuffled[..n_train].to_vec();
    let mut test = shuffled[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

impl SynthDataset {
    pub fn split(&self, train_fraction: f64) -> Result<(Vec<SampleRecord>, Vec<SampleRecord>)> {
        let ids: Vec<usize> = self.identities.iter().map(|s| s.id).collect();
        let (train, _) = split_identities(&ids, train_fraction, self.cfg.seed)?;
        let train: BTreeSet<usize> = train.into_iter().collect();
        Ok(self.samples.iter().cloned().partition(|s| train.contains(&s.identity)))
    }
}

/// Share of identity pairs a nearest-centroid probe tells apart: centroids
/// come from even views and every odd view must be strictly closer to its
/// own centroid.
pub fn pair_separability(features: &[(usize, usize, Vec<f64>)]) -> f64 {
    let ids: BTreeSet<usize> = features.iter().map(|f| f.0).collect();
    let ids: Vec<usize> = ids.into_iter().collect();
    let centroid = |id: usize| -> Vec<f64> {
        let rows: Vec<&Vec<f64>> = features.iter().filter(|f| f.0 == id && f.1 % 2 == 0).map(|f| &f.2).collect();
        let mut c = vec![0.0; rows[0].len()];
        for r in &rows {
            c.iter_mut().zip(r.iter()).for_each(|(a, b)| *a += b / rows.len() as f64);
        }
        c
    };
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let cents: Vec<Vec<f64>> = ids.iter().map(|&i| centroid(i)).collect();
    let (mut ok, mut total) = (0usize, 0usize);
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            total += 1;
            let separated = features.iter().filter(|f| f.1 % 2 == 1).all(|f| {
                let (own, other) = if f.0 == ids[a] {
                    (&cents[a], &cents[b])
                } else if f.0 == ids[b] {
                    (&cents[b], &cents[a])
                } else {
                    return true;
                };
                dist(&f.2, own) < dist(&f.2, other)
            });
            if separated {
                ok += 1;
            }
        }
    }
    ok as f64 / total.max(1) as f64
}
