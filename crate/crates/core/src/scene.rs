//! Synthetic scenes with known per-class object counts.
//!
//! A scene is a set of glyph placements on a small grayscale canvas. Scenes
//! carry their ground truth, so the "detector" here is an oracle with
//! optional miss / false-positive noise.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numbers::NumberWord;
use crate::seed;

pub type ClassId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Grid,
    Scatter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub class: ClassId,
    pub cx: u32,
    pub cy: u32,
    pub size: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub id: String,
    pub counts: BTreeMap<ClassId, u32>,
    pub layout: Layout,
    pub height: u32,
    pub width: u32,
    pub placements: Vec<Placement>,
    pub seed: u64,
}

impl SceneSpec {
    /// The class with the largest count (lowest id on ties) and that count.
    pub fn dominant(&self) -> Option<(ClassId, u32)> {
        max_entry(&self.counts)
    }

    pub fn total_objects(&self) -> u32 {
        self.counts.values().sum()
    }
}

fn max_entry(counts: &BTreeMap<ClassId, u32>) -> Option<(ClassId, u32)> {
    // BTreeMap iterates by ascending class id, so keeping the first maximum
    // implements the lowest-id tie break.
    counts
        .iter()
        .filter(|(_, &n)| n > 0)
        .fold(None, |best, (&c, &n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((c, n)),
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize) -> Self {
        Raster {
            height,
            width,
            pixels: vec![0.0; height * width],
        }
    }

    pub fn nonzero_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0.0).count()
    }

    /// Binary portable graymap (P5), 8-bit.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.pixels
                .iter()
                .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disc,
    Square,
    Triangle,
    Cross,
    Ring,
}

const SHAPES: [(Shape, f64); 5] = [
    (Shape::Disc, 1.0),
    (Shape::Square, 0.55),
    (Shape::Triangle, 0.85),
    (Shape::Cross, 0.7),
    (Shape::Ring, 0.4),
];

fn glyph_for(class: ClassId) -> (Shape, f64) {
    SHAPES[class % SHAPES.len()]
}

/// Whether offset (dx, dy) from the glyph center lies inside the glyph of
/// the given size.
fn glyph_covers(shape: Shape, size: u32, dx: i64, dy: i64) -> bool {
    let r = size as f64 / 2.0;
    let (x, y) = (dx as f64, dy as f64);
    let d = (x * x + y * y).sqrt();
    match shape {
        Shape::Disc => d <= r - 0.3,
        Shape::Square => x.abs() <= r - 0.5 && y.abs() <= r - 0.5,
        // apex at the top, base along the bottom row
        Shape::Triangle => {
            let h = r - 0.5;
            y.abs() <= h && x.abs() <= (y + h) / 2.0 + 0.01
        }
        Shape::Cross => (x.abs() < 0.5 || y.abs() < 0.5) && x.abs() <= r && y.abs() <= r,
        Shape::Ring => d <= r - 0.3 && d >= r - 1.6,
    }
}

pub fn render(scene: &SceneSpec) -> Raster {
    let (h, w) = (scene.height as usize, scene.width as usize);
    let mut raster = Raster::zeros(h, w);
    for p in &scene.placements {
        let (shape, intensity) = glyph_for(p.class);
        let half = p.size as i64 / 2 + 1;
        for dy in -half..=half {
            for dx in -half..=half {
                let (x, y) = (p.cx as i64 + dx, p.cy as i64 + dy);
                if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                    continue;
                }
                if glyph_covers(shape, p.size, dx, dy) {
                    let px = &mut raster.pixels[y as usize * w + x as usize];
                    *px = px.max(intensity);
                }
            }
        }
    }
    raster
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSampler {
    pub class_pool: Vec<ClassId>,
    /// Inclusive range for the dominant class count.
    pub count_min: u32,
    pub count_max: u32,
    /// Relative weight of count `n` is `count_decay^(n - count_min)`;
    /// 1.0 is uniform.
    pub count_decay: f64,
    /// Probability of a grid layout at `count_min`.
    pub grid_prob_base: f64,
    /// Added to the grid probability in proportion to how far the dominant
    /// count sits toward `count_max`.
    pub grid_prob_slope: f64,
    /// Probability that each extra class is added as a distractor.
    pub distractor_prob: f64,
    pub max_distractor_classes: usize,
    pub height: u32,
    pub width: u32,
    pub glyph_size: u32,
}

impl Default for SceneSampler {
    fn default() -> Self {
        SceneSampler {
            class_pool: (0..5).collect(),
            count_min: 2,
            count_max: 10,
            count_decay: 1.0,
            grid_prob_base: 0.2,
            grid_prob_slope: 0.4,
            distractor_prob: 0.25,
            max_distractor_classes: 1,
            height: 32,
            width: 32,
            glyph_size: 5,
        }
    }
}

impl SceneSampler {
    pub fn validate(&self) -> Result<()> {
        if self.class_pool.is_empty() {
            return Err(Error::config("class_pool", "must be non-empty"));
        }
        if self.count_min < 1 || self.count_max > 10 || self.count_min > self.count_max {
            return Err(Error::config(
                "count_min/count_max",
                "must satisfy 1 <= count_min <= count_max <= 10",
            ));
        }
        if !(self.count_decay > 0.0 && self.count_decay.is_finite()) {
            return Err(Error::config("count_decay", "must be positive"));
        }
        for (name, p) in [
            ("grid_prob_base", self.grid_prob_base),
            ("distractor_prob", self.distractor_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        if self.glyph_size < 3 {
            return Err(Error::config("glyph_size", "must be at least 3"));
        }
        if self.cells_x() * self.cells_y() < self.count_max as usize {
            return Err(Error::config(
                "height/width",
                format!(
                    "canvas {}x{} cannot hold {} glyphs of size {}",
                    self.height, self.width, self.count_max, self.glyph_size
                ),
            ));
        }
        Ok(())
    }

    fn pitch(&self) -> u32 {
        self.glyph_size + 1
    }

    fn cells_x(&self) -> usize {
        (self.width.saturating_sub(1) / self.pitch()) as usize
    }

    fn cells_y(&self) -> usize {
        (self.height.saturating_sub(1) / self.pitch()) as usize
    }

    pub fn count_weights(&self) -> Vec<(u32, f64)> {
        (self.count_min..=self.count_max)
            .map(|n| (n, self.count_decay.powi((n - self.count_min) as i32)))
            .collect()
    }

    fn draw_count<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let weights = self.count_weights();
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let mut u = rng.gen::<f64>() * total;
        for (n, w) in &weights {
            if u < *w {
                return *n;
            }
            u -= w;
        }
        self.count_max
    }

    /// Samples a scene from the generator stream `seed`.
    pub fn sample(&self, id: impl Into<String>, seed: u64) -> Result<SceneSpec> {
        self.validate()?;
        let mut rng = seed::rng(seed);
        let capacity = self.cells_x() * self.cells_y();

        let dominant_count = self.draw_count(&mut rng);
        let mut classes = self.class_pool.clone();
        classes.shuffle(&mut rng);
        let mut counts = BTreeMap::new();
        counts.insert(classes[0], dominant_count);
        let mut total = dominant_count as usize;
        for &c in classes.iter().skip(1).take(self.max_distractor_classes) {
            if dominant_count < 2 || !rng.gen_bool(self.distractor_prob) {
                continue;
            }
            let n = rng.gen_range(1..dominant_count).min((capacity - total) as u32);
            if n == 0 {
                break;
            }
            counts.insert(c, n);
            total += n as usize;
        }

        let t = if self.count_max > self.count_min {
            (dominant_count - self.count_min) as f64 / (self.count_max - self.count_min) as f64
        } else {
            0.0
        };
        let grid_p = (self.grid_prob_base + self.grid_prob_slope * t).clamp(0.0, 1.0);
        let layout = if rng.gen_bool(grid_p) {
            Layout::Grid
        } else {
            Layout::Scatter
        };

        let mut labels: Vec<ClassId> = counts
            .iter()
            .flat_map(|(&c, &n)| std::iter::repeat_n(c, n as usize))
            .collect();
        labels.shuffle(&mut rng);
        let centers = match layout {
            Layout::Grid => self.grid_centers(total),
            Layout::Scatter => self.scatter_centers(total, &mut rng),
        };
        let placements = labels
            .into_iter()
            .zip(centers)
            .map(|(class, (cx, cy))| Placement {
                class,
                cx,
                cy,
                size: self.glyph_size,
            })
            .collect();

        Ok(SceneSpec {
            id: id.into(),
            counts,
            layout,
            height: self.height,
            width: self.width,
            placements,
            seed,
        })
    }

    /// Centered regular lattice with `ceil(sqrt(n))` columns.
    fn grid_centers(&self, n: usize) -> Vec<(u32, u32)> {
        if n == 0 {
            return Vec::new();
        }
        let pitch = self.pitch();
        let cols = ((n as f64).sqrt().ceil() as usize).min(self.cells_x());
        let rows = n.div_ceil(cols);
        let x0 = (self.width - cols as u32 * pitch) / 2 + pitch / 2;
        let y0 = (self.height - rows as u32 * pitch) / 2 + pitch / 2;
        (0..n)
            .map(|i| {
                let (r, c) = (i / cols, i % cols);
                (x0 + c as u32 * pitch, y0 + r as u32 * pitch)
            })
            .collect()
    }

    /// Distinct random cells with jitter inside each cell; glyphs never
    /// overlap because every glyph stays within its own cell.
    fn scatter_centers<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(u32, u32)> {
        let pitch = self.pitch();
        let (cx, cy) = (self.cells_x(), self.cells_y());
        let slack_x = self.width - 1 - cx as u32 * pitch;
        let slack_y = self.height - 1 - cy as u32 * pitch;
        let cells = rand::seq::index::sample(rng, cx * cy, n);
        cells
            .into_iter()
            .map(|cell| {
                let (r, c) = (cell / cx, cell % cx);
                let jx = rng.gen_range(0..=slack_x.min(pitch - self.glyph_size));
                let jy = rng.gen_range(0..=slack_y.min(pitch - self.glyph_size));
                (
                    c as u32 * pitch + self.glyph_size / 2 + jx,
                    r as u32 * pitch + self.glyph_size / 2 + jy,
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorNoise {
    pub miss_rate: f64,
    /// Expected number of spurious detections per image.
    pub false_positive_rate: f64,
    /// Classes that spurious detections are drawn from: `0..num_classes`.
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for DetectorNoise {
    fn default() -> Self {
        DetectorNoise::none()
    }
}

impl DetectorNoise {
    pub fn none() -> Self {
        DetectorNoise {
            miss_rate: 0.0,
            false_positive_rate: 0.0,
            num_classes: 5,
            seed: 0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.miss_rate == 0.0 && self.false_positive_rate == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(Error::config("miss_rate", "must lie in [0, 1]"));
        }
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(Error::config("false_positive_rate", "must be non-negative"));
        }
        if self.false_positive_rate > 0.0 && self.num_classes == 0 {
            return Err(Error::config("num_classes", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectionResult {
    pub per_class_counts: BTreeMap<ClassId, u32>,
    /// `None` when nothing was detected.
    pub max_class: Option<ClassId>,
    pub max_count: u32,
}

/// Oracle detector. Each true instance is dropped with `miss_rate`; a
/// Poisson number of spurious detections of uniform random classes is added.
/// The noise stream is keyed on `(noise.seed, scene.seed)`.
pub fn detect(scene: &SceneSpec, noise: &DetectorNoise) -> DetectionResult {
    let mut per_class = scene.counts.clone();
    if !noise.is_zero() {
        let mut rng = seed::rng(seed::mix(noise.seed, scene.seed));
        for n in per_class.values_mut() {
            let kept = (0..*n).filter(|_| !rng.gen_bool(noise.miss_rate)).count();
            *n = kept as u32;
        }
        if noise.false_positive_rate > 0.0 {
            let k = Poisson::new(noise.false_positive_rate)
                .map(|d| d.sample(&mut rng) as u32)
                .unwrap_or(0);
            for _ in 0..k {
                *per_class
                    .entry(rng.gen_range(0..noise.num_classes))
                    .or_insert(0) += 1;
            }
        }
    }
    let (max_class, max_count) = match max_entry(&per_class) {
        Some((c, n)) => (Some(c), n),
        None => (None, 0),
    };
    DetectionResult {
        per_class_counts: per_class,
        max_class,
        max_count,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassName {
    pub singular: String,
    pub plural: String,
}

pub fn default_class_names() -> Vec<ClassName> {
    [
        ("dog", "dogs"),
        ("cat", "cats"),
        ("bird", "birds"),
        ("apple", "apples"),
        ("star", "stars"),
    ]
    .iter()
    .map(|(s, p)| ClassName {
        singular: s.to_string(),
        plural: p.to_string(),
    })
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    TrueCount,
    WrongCount,
    DigitDistractor,
    NonCountNumber,
    AmountModifier,
    NoNumber,
}

impl CaptionMode {
    pub const ALL: [CaptionMode; 6] = [
        CaptionMode::TrueCount,
        CaptionMode::WrongCount,
        CaptionMode::DigitDistractor,
        CaptionMode::NonCountNumber,
        CaptionMode::AmountModifier,
        CaptionMode::NoNumber,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CaptionMode::TrueCount => "true_count",
            CaptionMode::WrongCount => "wrong_count",
            CaptionMode::DigitDistractor => "digit_distractor",
            CaptionMode::NonCountNumber => "non_count_number",
            CaptionMode::AmountModifier => "amount_modifier",
            CaptionMode::NoNumber => "no_number",
        }
    }
}

/// Caption templates per mode. Placeholders: `{n}` spelled number, `{d}`
/// digit numeral, `{objs}` plural class name, `{obj}` singular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplatePool {
    pub count: Vec<String>,
    pub digit: Vec<String>,
    pub non_count: Vec<String>,
    pub modifier: Vec<String>,
    pub no_number: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for TemplatePool {
    fn default() -> Self {
        TemplatePool {
            count: strings(&[
                "a photo of {n} {objs}",
                "{n} {objs} on a plain background",
                "there are {n} {objs} in this picture",
                "an illustration of {n} {objs}",
            ]),
            digit: strings(&[
                "{d} {objs}",
                "{objs} sticker pack version {d}",
                "{objs} wallpaper 1920x1080",
                "photo of {objs} taken on 12/05/2019",
                "{objs} at 10:30 pm",
            ]),
            non_count: strings(&[
                "{objs} drawn by my {n} year old",
                "{objs} at {n} o'clock",
                "chapter {n} of the {obj} book",
                "our {objs} turned {n} today",
            ]),
            modifier: strings(&[
                "a couple of {n} {objs}",
                "{n} dozen {objs}",
                "a pair of {n} {objs}",
                "a few {n} {objs}",
            ]),
            no_number: strings(&[
                "a photo of {objs}",
                "{objs} on a plain background",
                "a picture of some {objs}",
                "an illustration of a {obj}",
            ]),
        }
    }
}

impl TemplatePool {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.count
            .iter()
            .chain(&self.digit)
            .chain(&self.non_count)
            .chain(&self.modifier)
            .chain(&self.no_number)
    }

    fn for_mode(&self, mode: CaptionMode) -> &[String] {
        match mode {
            CaptionMode::TrueCount | CaptionMode::WrongCount => &self.count,
            CaptionMode::DigitDistractor => &self.digit,
            CaptionMode::NonCountNumber => &self.non_count,
            CaptionMode::AmountModifier => &self.modifier,
            CaptionMode::NoNumber => &self.no_number,
        }
    }
}

fn other_number<R: Rng + ?Sized>(count: u32, rng: &mut R) -> NumberWord {
    let others: Vec<NumberWord> = NumberWord::ALL
        .iter()
        .copied()
        .filter(|n| n.value() != count)
        .collect();
    others[rng.gen_range(0..others.len())]
}

/// Writes a caption for the scene's dominant class in the given mode.
///
/// Non-count numbers are always drawn different from the dominant count, so
/// they can never pass count verification by coincidence.
pub fn caption_for_scene<R: Rng + ?Sized>(
    scene: &SceneSpec,
    templates: &TemplatePool,
    class_names: &[ClassName],
    rng: &mut R,
    mode: CaptionMode,
) -> Result<String> {
    let (class, count) = scene
        .dominant()
        .ok_or_else(|| Error::usage(format!("scene {} has no objects", scene.id)))?;
    let name = class_names
        .get(class)
        .ok_or_else(|| Error::usage(format!("no class name for class {class}")))?;
    let pool = templates.for_mode(mode);
    if pool.is_empty() {
        return Err(Error::config("templates", format!("no templates for {}", mode.name())));
    }
    let template = &pool[rng.gen_range(0..pool.len())];
    let spelled = match mode {
        CaptionMode::TrueCount | CaptionMode::AmountModifier => NumberWord::from_value(count)
            .ok_or_else(|| Error::usage(format!("count {count} has no spelled form")))?,
        _ => other_number(count, rng),
    };
    Ok(template
        .replace("{n}", spelled.word())
        .replace("{d}", &count.to_string())
        .replace("{objs}", &name.plural)
        .replace("{obj}", &name.singular))
}
