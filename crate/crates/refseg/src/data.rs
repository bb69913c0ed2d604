//! Synthetic shapes-and-expressions benchmark.
//!
//! Scenes hold 2-4 colored shapes (squares, circles, triangles in red, green,
//! blue, yellow) on a dark background. Every sample pairs a rendered scene
//! with a templated referring expression that matches exactly one object,
//! that object's visible mask, and its tight box. Each scene carries at least
//! one distractor sharing the target's color or shape; a configurable
//! fraction duplicates both so the expression needs a spatial qualifier.

use crate::error::{Error, Result};
use crate::head::BBox;
use crate::imgio::{read_pgm, read_ppm, write_pgm, write_ppm, GrayImage, Raster};
use crate::lang::Vocabulary;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn word(&self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorName {
    Red,
    Green,
    Blue,
    Yellow,
}

impl ColorName {
    pub const ALL: [ColorName; 4] =
        [ColorName::Red, ColorName::Green, ColorName::Blue, ColorName::Yellow];

    pub fn word(&self) -> &'static str {
        match self {
            ColorName::Red => "red",
            ColorName::Green => "green",
            ColorName::Blue => "blue",
            ColorName::Yellow => "yellow",
        }
    }

    pub fn rgb(&self) -> [u8; 3] {
        match self {
            ColorName::Red => [230, 40, 40],
            ColorName::Green => [40, 200, 40],
            ColorName::Blue => [50, 80, 230],
            ColorName::Yellow => [230, 220, 40],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
    Top,
    Bottom,
    Middle,
}

impl Side {
    pub const ALL: [Side; 5] = [Side::Left, Side::Right, Side::Top, Side::Bottom, Side::Middle];

    pub fn word(&self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::Top => "top",
            Side::Bottom => "bottom",
            Side::Middle => "middle",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    pub color: ColorName,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

impl ObjectSpec {
    pub fn bbox(&self) -> BBox {
        let h = self.size / 2.0;
        BBox::new(self.cx - h, self.cy - h, self.cx + h, self.cy + h)
    }
}

#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background: u8,
    pub objects: Vec<ObjectSpec>,
    pub seed: u64,
}

/// Structured referring expression before serialization to words.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Expression {
    pub color: ColorName,
    pub shape: ShapeKind,
    pub side: Option<Side>,
}

impl Expression {
    pub fn words(&self) -> Vec<String> {
        match self.side {
            None => vec![self.color.word().into(), self.shape.word().into()],
            Some(Side::Middle) => {
                ["the", self.color.word(), self.shape.word(), "in", "the", "middle"]
                    .iter()
                    .map(|s| s.to_string())
                    .collect()
            }
            Some(side) => ["the", self.color.word(), self.shape.word(), "on", "the", side.word()]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

/// Whether object `idx` satisfies the expression within its scene.
/// Spatial words compare against every attribute-matching object: "left"
/// means strictly smallest centroid x, "middle" strictly nearest the image
/// center, and so on.
pub fn expression_matches(scene: &SceneSpec, expr: &Expression, idx: usize) -> bool {
    let o = &scene.objects[idx];
    if o.color != expr.color || o.shape != expr.shape {
        return false;
    }
    let Some(side) = expr.side else { return true };
    let peers: Vec<usize> = (0..scene.objects.len())
        .filter(|&j| {
            scene.objects[j].color == expr.color && scene.objects[j].shape == expr.shape
        })
        .collect();
    let strictly = |better: &dyn Fn(&ObjectSpec, &ObjectSpec) -> bool| {
        peers.iter().all(|&j| j == idx || better(o, &scene.objects[j]))
    };
    let center = (scene.width as f64 / 2.0, scene.height as f64 / 2.0);
    let dist = |obj: &ObjectSpec| (obj.cx - center.0).powi(2) + (obj.cy - center.1).powi(2);
    match side {
        Side::Left => strictly(&|a, b| a.cx < b.cx),
        Side::Right => strictly(&|a, b| a.cx > b.cx),
        Side::Top => strictly(&|a, b| a.cy < b.cy),
        Side::Bottom => strictly(&|a, b| a.cy > b.cy),
        Side::Middle => strictly(&|a, b| dist(a) < dist(b)),
    }
}

/// Minimally discriminative template: bare "<color> <shape>" when unique,
/// otherwise a spatial qualifier chosen among the valid ones; `None` when no
/// unambiguous template exists.
pub fn make_expression<R: Rng>(
    scene: &SceneSpec,
    target: usize,
    rng: &mut R,
) -> Option<Expression> {
    let o = &scene.objects[target];
    let simple = Expression { color: o.color, shape: o.shape, side: None };
    let count =
        (0..scene.objects.len()).filter(|&j| expression_matches(scene, &simple, j)).count();
    if count == 1 {
        return Some(simple);
    }
    let valid: Vec<Expression> = Side::ALL
        .iter()
        .map(|&s| Expression { color: o.color, shape: o.shape, side: Some(s) })
        .filter(|e| {
            let matches: Vec<usize> =
                (0..scene.objects.len()).filter(|&j| expression_matches(scene, e, j)).collect();
            matches == vec![target]
        })
        .collect();
    valid.choose(rng).copied()
}

// ── rasterization ────────────────────────────────────────────────────

fn full_mask(obj: &ObjectSpec, width: usize, height: usize) -> GrayImage {
    let mut m = GrayImage::zeros(width, height);
    let half = obj.size / 2.0;
    for y in 0..height {
        for x in 0..width {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = match obj.shape {
                ShapeKind::Square => (px - obj.cx).abs() < half && (py - obj.cy).abs() < half,
                ShapeKind::Circle => {
                    (px - obj.cx).powi(2) + (py - obj.cy).powi(2) <= half * half
                }
                ShapeKind::Triangle => {
                    let top = obj.cy - half;
                    let dy = py - top;
                    dy >= 0.0 && dy < obj.size && (px - obj.cx).abs() <= dy / 2.0
                }
            };
            if inside {
                m.set(x, y, 255);
            }
        }
    }
    m
}

/// Deterministic painter rasterization; later objects occlude earlier ones.
/// Returns the image and each object's visible mask.
pub fn render(scene: &SceneSpec) -> (Raster, Vec<GrayImage>) {
    let (w, h) = (scene.width, scene.height);
    let mut img = Raster::filled(w, h, [scene.background; 3]);
    let full: Vec<GrayImage> = scene.objects.iter().map(|o| full_mask(o, w, h)).collect();
    let mut visible = full.clone();
    for i in 0..scene.objects.len() {
        for later in full.iter().skip(i + 1) {
            for (v, &f) in visible[i].pixels.iter_mut().zip(&later.pixels) {
                if f > 0 {
                    *v = 0;
                }
            }
        }
    }
    for (obj, mask) in scene.objects.iter().zip(&visible) {
        let rgb = obj.color.rgb();
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) > 0 {
                    img.put(x, y, rgb);
                }
            }
        }
    }
    (img, visible)
}

/// Tight pixel bounding box of a nonempty mask (exclusive upper bounds).
pub fn tight_box(mask: &GrayImage) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) > 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        None
    } else {
        Some(BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
    }
}

// ── scene sampling ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Probability that the forced distractor duplicates the target's color
    /// and shape, making a spatial qualifier necessary.
    pub duplicate_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_train: 2000,
            n_test: 500,
            seed: 7,
            image_size: 64,
            min_objects: 2,
            max_objects: 4,
            min_size: 10,
            max_size: 20,
            duplicate_prob: 0.35,
        }
    }
}

fn place_object<R: Rng>(
    rng: &mut R,
    cfg: &DataConfig,
    placed: &[ObjectSpec],
    shape: ShapeKind,
    color: ColorName,
) -> Result<ObjectSpec> {
    let img = cfg.image_size as f64;
    for _ in 0..100 {
        let size = rng.gen_range(cfg.min_size..=cfg.max_size) as f64;
        let lo = (size / 2.0).ceil() as usize + 1;
        let hi = cfg.image_size - lo;
        let cx = rng.gen_range(lo..=hi) as f64;
        let cy = rng.gen_range(lo..=hi) as f64;
        let cand = ObjectSpec { shape, color, cx, cy, size };
        let b = cand.bbox();
        if b.x0 < 0.0 || b.y0 < 0.0 || b.x1 > img || b.y1 > img {
            continue;
        }
        if placed.iter().all(|o| crate::head::box_iou(&b, &o.bbox()) < 0.2) {
            return Ok(cand);
        }
    }
    Err(Error::Generation("no placement found after 100 rejection samples".into()))
}

fn random_attrs<R: Rng>(rng: &mut R) -> (ShapeKind, ColorName) {
    (*ShapeKind::ALL.choose(rng).expect("non-empty"), *ColorName::ALL.choose(rng).expect("non-empty"))
}

/// One scene with its target index and expression. The first distractor is
/// forced to share attributes with the target (both of them with probability
/// `duplicate_prob`, otherwise color or shape alone).
pub fn sample_scene<R: Rng>(
    rng: &mut R,
    cfg: &DataConfig,
    seed: u64,
) -> Result<(SceneSpec, usize, Expression)> {
    for _ in 0..200 {
        let background = rng.gen_range(0..=30u8);
        let n_objects = rng.gen_range(cfg.min_objects..=cfg.max_objects);
        let (tshape, tcolor) = random_attrs(rng);
        let mut objects = Vec::with_capacity(n_objects);
        let target_obj = match place_object(rng, cfg, &objects, tshape, tcolor) {
            Ok(o) => o,
            Err(_) => continue,
        };
        objects.push(target_obj);

        let (dshape, dcolor) = if rng.gen_bool(cfg.duplicate_prob) {
            (tshape, tcolor)
        } else if rng.gen_bool(0.5) {
            // Share color, differ in shape.
            let others: Vec<ShapeKind> =
                ShapeKind::ALL.iter().copied().filter(|&s| s != tshape).collect();
            (*others.choose(rng).expect("non-empty"), tcolor)
        } else {
            let others: Vec<ColorName> =
                ColorName::ALL.iter().copied().filter(|&c| c != tcolor).collect();
            (tshape, *others.choose(rng).expect("non-empty"))
        };
        let Ok(distractor) = place_object(rng, cfg, &objects, dshape, dcolor) else { continue };
        objects.push(distractor);

        let mut ok = true;
        for _ in 2..n_objects {
            let (s, c) = random_attrs(rng);
            match place_object(rng, cfg, &objects, s, c) {
                Ok(o) => objects.push(o),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }

        // Shuffle painter order; track where the target lands.
        let mut order: Vec<usize> = (0..objects.len()).collect();
        order.shuffle(rng);
        let target = order.iter().position(|&i| i == 0).expect("target present");
        let objects: Vec<ObjectSpec> = order.iter().map(|&i| objects[i]).collect();

        let scene = SceneSpec {
            width: cfg.image_size,
            height: cfg.image_size,
            background,
            objects,
            seed,
        };
        let Some(expr) = make_expression(&scene, target, rng) else { continue };
        // The target must stay visible after occlusion.
        let (_, visible) = render(&scene);
        if visible[target].count_nonzero() == 0 {
            continue;
        }
        return Ok((scene, target, expr));
    }
    Err(Error::Generation("no valid scene after 200 attempts".into()))
}

// ── dataset assembly and serialization ───────────────────────────────

#[derive(Clone, Debug)]
pub struct ReferringSample {
    pub id: String,
    pub image: Raster,
    pub mask: GrayImage,
    pub gt_box: BBox,
    pub words: Vec<String>,
    pub tokens: Vec<usize>,
}

pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<ReferringSample>,
    pub test: Vec<ReferringSample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[ReferringSample]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(Error::InvalidConfig(format!("unknown split '{other}'"))),
        }
    }
}

/// The fixed template vocabulary; independent of any particular dataset.
pub fn dataset_vocab() -> Vocabulary {
    Vocabulary::new([
        "the", "on", "in", "left", "right", "top", "bottom", "middle", "red", "green", "blue",
        "yellow", "square", "circle", "triangle",
    ])
}

fn make_sample(
    rng: &mut ChaCha8Rng,
    cfg: &DataConfig,
    vocab: &Vocabulary,
    id: String,
    seed: u64,
) -> Result<ReferringSample> {
    let (scene, target, expr) = sample_scene(rng, cfg, seed)?;
    let (image, visible) = render(&scene);
    let mask = visible[target].clone();
    let gt_box = tight_box(&mask).expect("sample_scene guarantees a visible target");
    let words = expr.words();
    let tokens = words.iter().map(|w| vocab.lookup(w)).collect();
    Ok(ReferringSample { id, image, mask, gt_box, words, tokens })
}

pub fn generate(cfg: &DataConfig) -> Result<Dataset> {
    let vocab = dataset_vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut train = Vec::with_capacity(cfg.n_train);
    for i in 0..cfg.n_train {
        train.push(make_sample(&mut rng, cfg, &vocab, format!("train_{i:05}"), i as u64)?);
    }
    let mut test = Vec::with_capacity(cfg.n_test);
    for i in 0..cfg.n_test {
        test.push(make_sample(&mut rng, cfg, &vocab, format!("test_{i:05}"), i as u64)?);
    }
    Ok(Dataset { vocab, train, test })
}

fn annotation_line(s: &ReferringSample) -> String {
    let mut line = String::new();
    let _ = write!(
        line,
        "{}\t{}\t{} {} {} {}\timages/{}.ppm\tmasks/{}.pgm",
        s.id,
        s.words.join(" "),
        s.gt_box.x0 as i64,
        s.gt_box.y0 as i64,
        s.gt_box.x1 as i64,
        s.gt_box.y1 as i64,
        s.id,
        s.id
    );
    line
}

/// Writes images, masks, annotation records, the vocabulary and split
/// manifests under `dir`. Regeneration from the same config is byte-exact.
pub fn write_dataset(ds: &Dataset, cfg: &DataConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    ds.vocab.save(&dir.join("vocab.txt"))?;
    let meta = format!(
        "image_size = {}\nseed = {}\nn_train = {}\nn_test = {}\nduplicate_prob = {}\n",
        cfg.image_size, cfg.seed, cfg.n_train, cfg.n_test, cfg.duplicate_prob
    );
    fs::write(dir.join("meta.txt"), meta)?;
    for (split, samples) in [("train", &ds.train), ("test", &ds.test)] {
        let mut manifest = String::new();
        let mut annotations = String::new();
        for s in samples.iter() {
            manifest.push_str(&s.id);
            manifest.push('\n');
            annotations.push_str(&annotation_line(s));
            annotations.push('\n');
            write_ppm(&dir.join(format!("images/{}.ppm", s.id)), &s.image)?;
            write_pgm(&dir.join(format!("masks/{}.pgm", s.id)), &s.mask)?;
        }
        fs::write(dir.join(format!("{split}.txt")), manifest)?;
        fs::write(dir.join(format!("annotations_{split}.tsv")), annotations)?;
    }
    Ok(())
}

fn load_split(dir: &Path, split: &str, vocab: &Vocabulary) -> Result<Vec<ReferringSample>> {
    let text = fs::read_to_string(dir.join(format!("annotations_{split}.tsv")))?;
    let mut samples = Vec::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!("bad annotation record: {line}")));
        }
        let words: Vec<String> = fields[1].split(' ').map(|w| w.to_string()).collect();
        let nums: Vec<f64> =
            fields[2].split(' ').map(|v| v.parse().unwrap_or(f64::NAN)).collect();
        if nums.len() != 4 || nums.iter().any(|v| v.is_nan()) {
            return Err(Error::Parse(format!("bad box in record: {line}")));
        }
        let image = read_ppm(&dir.join(fields[3]))?;
        let mask = read_pgm(&dir.join(fields[4]))?;
        let tokens = words.iter().map(|w| vocab.lookup(w)).collect();
        samples.push(ReferringSample {
            id: fields[0].to_string(),
            image,
            mask,
            gt_box: BBox::new(nums[0], nums[1], nums[2], nums[3]),
            words,
            tokens,
        });
    }
    Ok(samples)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let vocab = Vocabulary::load(&dir.join("vocab.txt"))?;
    let train = load_split(dir, "train", &vocab)?;
    let test = load_split(dir, "test", &vocab)?;
    Ok(Dataset { vocab, train, test })
}

/// Recursively gathers (relative path, bytes) for byte-exactness checks.
pub fn dir_digest(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut files = Vec::new();
    fn walk(base: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) -> Result<()> {
        let mut entries: Vec<_> =
            fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let p = e.path();
            if p.is_dir() {
                walk(base, &p, out)?;
            } else {
                out.push((p.strip_prefix(base).expect("child path").to_path_buf(), fs::read(&p)?));
            }
        }
        Ok(())
    }
    walk(dir, dir, &mut files)?;
    Ok(files)
}
