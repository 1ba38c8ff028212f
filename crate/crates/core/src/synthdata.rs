//! Captioned 16×16 colored shapes with silhouette condition images, and a
//! fixed probe that reads color and shape back from a rendered image.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::tokenize::TextVocab;

pub const CANVAS: usize = 16;
/// Side length of an unjittered shape.
pub const BASE_SIZE: i32 = 6;
/// Pixels above this luminance count as foreground.
pub const FOREGROUND_LUMA: f32 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.8, 0.1],
            Color::Blue => [0.15, 0.25, 0.95],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Cross => "cross",
        }
    }

    /// Whether pixel `(y, x)` is covered when the shape of side `size` is
    /// centered at `(cy, cx)` (coordinates in pixel units, centers at +0.5).
    fn covers(self, y: usize, x: usize, cy: f32, cx: f32, size: i32) -> bool {
        let dy = y as f32 + 0.5 - cy;
        let dx = x as f32 + 0.5 - cx;
        let half = size as f32 / 2.0;
        match self {
            Shape::Square => dy.abs() < half && dx.abs() < half,
            Shape::Circle => dy * dy + dx * dx < (half + 0.5) * (half + 0.5),
            Shape::Cross => {
                let arm = half + 1.0;
                let bar = 1.0f32.max(size as f32 / 6.0);
                (dy.abs() < bar && dx.abs() < arm) || (dx.abs() < bar && dy.abs() < arm)
            }
        }
    }
}

macro_rules! label_parsing {
    ($ty:ty) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                let s = s.trim().to_ascii_lowercase();
                <$ty>::ALL
                    .into_iter()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown label `{s}`")))
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

label_parsing!(Color);
label_parsing!(Shape);

/// Randomization of shape placement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    /// Maximum center offset in pixels along each axis.
    pub max_shift: i32,
    /// Maximum deviation of the side length from [`BASE_SIZE`].
    pub max_size_delta: i32,
}

impl Jitter {
    pub const NONE: Jitter = Jitter {
        max_shift: 0,
        max_size_delta: 0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(0..=3).contains(&self.max_shift) || !(0..=1).contains(&self.max_size_delta) {
            return Err(Error::InvalidArgument(
                "jitter must satisfy 0 <= max_shift <= 3 and 0 <= max_size_delta <= 1".into(),
            ));
        }
        Ok(())
    }
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            max_shift: 3,
            max_size_delta: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `16 × 16 × 3` target.
    pub target: Image,
    /// `16 × 16 × 1` binarized luminance of the target.
    pub cond: Image,
    pub caption: String,
    pub color: Color,
    pub shape: Shape,
}

/// Caption for a label pair.
pub fn caption(color: Color, shape: Shape) -> String {
    format!("{} {}", color.name(), shape.name())
}

fn render(color: Color, shape: Shape, cy: f32, cx: f32, size: i32) -> Image {
    let mut img = Image::zeros(CANVAS, CANVAS, 3);
    let rgb = color.rgb();
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            if shape.covers(y, x, cy, cx, size) {
                for (c, v) in rgb.iter().enumerate() {
                    img.set(y, x, c, *v);
                }
            }
        }
    }
    img
}

/// Binary silhouette of any foreground (luminance above zero).
pub fn silhouette(target: &Image) -> Image {
    let mut cond = Image::zeros(target.height, target.width, 1);
    for y in 0..target.height {
        for x in 0..target.width {
            if target.luminance(y, x) > 0.05 {
                cond.set(y, x, 0, 1.0);
            }
        }
    }
    cond
}

/// Renders one sample. Without jitter the shape sits at the canvas center with
/// side [`BASE_SIZE`].
pub fn make_sample<R: Rng>(color: Color, shape: Shape, jitter: Jitter, rng: &mut R) -> Result<Sample> {
    jitter.validate()?;
    let size = BASE_SIZE + rng.gen_range(-jitter.max_size_delta..=jitter.max_size_delta);
    let dy = rng.gen_range(-jitter.max_shift..=jitter.max_shift);
    let dx = rng.gen_range(-jitter.max_shift..=jitter.max_shift);
    let center = CANVAS as f32 / 2.0;
    let target = render(color, shape, center + dy as f32, center + dx as f32, size);
    Ok(Sample {
        cond: silhouette(&target),
        target,
        caption: caption(color, shape),
        color,
        shape,
    })
}

/// [`make_sample`] from label strings.
pub fn make_sample_named<R: Rng>(color: &str, shape: &str, jitter: Jitter, rng: &mut R) -> Result<Sample> {
    make_sample(color.parse()?, shape.parse()?, jitter, rng)
}

/// All (color, shape) pairs in a fixed order.
pub fn classes() -> Vec<(Color, Shape)> {
    Color::ALL
        .into_iter()
        .flat_map(|c| Shape::ALL.into_iter().map(move |s| (c, s)))
        .collect()
}

/// Stratified dataset: classes cycle in fixed order (so counts differ by at
/// most one), then the list is shuffled.
pub fn make_dataset(n: usize, seed: u64, jitter: Jitter) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = classes();
    let mut samples = (0..n)
        .map(|i| {
            let (c, s) = classes[i % classes.len()];
            make_sample(c, s, jitter, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    samples.shuffle(&mut rng);
    Ok(samples)
}

/// Vocabulary over every caption the dataset can produce.
pub fn vocab() -> TextVocab {
    let captions: Vec<String> = classes().into_iter().map(|(c, s)| caption(c, s)).collect();
    TextVocab::from_captions(captions.iter().map(String::as_str))
}

/// Probe verdict; `None` means nothing recognizable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeResult {
    pub color: Option<Color>,
    pub shape: Option<Shape>,
}

impl ProbeResult {
    pub fn labels(&self) -> (&'static str, &'static str) {
        (
            self.color.map_or("none", Color::name),
            self.shape.map_or("none", Shape::name),
        )
    }

    pub fn matches(&self, color: Color, shape: Shape) -> bool {
        self.color == Some(color) && self.shape == Some(shape)
    }
}

/// Canonical silhouettes of `shape` at every jittered size, centered.
fn templates(shape: Shape) -> Vec<Vec<bool>> {
    let center = CANVAS as f32 / 2.0;
    (BASE_SIZE - 1..=BASE_SIZE + 1)
        .map(|size| {
            (0..CANVAS * CANVAS)
                .map(|i| shape.covers(i / CANVAS, i % CANVAS, center, center, size))
                .collect()
        })
        .collect()
}

/// Best normalized correlation of `mask` with `template` over all integer shifts.
fn best_correlation(mask: &[bool], template: &[bool]) -> f64 {
    let mask_n = mask.iter().filter(|&&m| m).count() as f64;
    let tmpl_n = template.iter().filter(|&&t| t).count() as f64;
    if mask_n == 0.0 || tmpl_n == 0.0 {
        return 0.0;
    }
    let n = CANVAS as i32;
    let mut best = 0usize;
    for sy in -n / 2..=n / 2 {
        for sx in -n / 2..=n / 2 {
            let mut overlap = 0;
            for y in 0..n {
                let ty = y - sy;
                if !(0..n).contains(&ty) {
                    continue;
                }
                for x in 0..n {
                    let tx = x - sx;
                    if (0..n).contains(&tx)
                        && mask[(y * n + x) as usize]
                        && template[(ty * n + tx) as usize]
                    {
                        overlap += 1;
                    }
                }
            }
            best = best.max(overlap);
        }
    }
    best as f64 / (mask_n * tmpl_n).sqrt()
}

/// Reads color (argmax of mean channel over foreground pixels) and shape
/// (nearest canonical silhouette under translation) from a 16×16×3 image.
pub fn probe_classify(image: &Image) -> Result<ProbeResult> {
    if (image.height, image.width, image.channels) != (CANVAS, CANVAS, 3) {
        return Err(Error::Shape(format!(
            "probe expects a {CANVAS}x{CANVAS}x3 image, got {}x{}x{}",
            image.height, image.width, image.channels
        )));
    }
    let mut sums = [0f64; 3];
    let mut mask = vec![false; CANVAS * CANVAS];
    for y in 0..CANVAS {
        for x in 0..CANVAS {
            if image.luminance(y, x) > FOREGROUND_LUMA {
                mask[y * CANVAS + x] = true;
                for (c, s) in sums.iter_mut().enumerate() {
                    *s += image.get(y, x, c) as f64;
                }
            }
        }
    }
    if !mask.iter().any(|&m| m) {
        return Ok(ProbeResult {
            color: None,
            shape: None,
        });
    }
    let color = Color::ALL
        .into_iter()
        .zip(sums)
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| c);
    let shape = Shape::ALL
        .into_iter()
        .map(|s| {
            let score = templates(s)
                .iter()
                .map(|t| best_correlation(&mask, t))
                .fold(0.0, f64::max);
            (s, score)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(s, _)| s);
    Ok(ProbeResult { color, shape })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    target: String,
    cond: String,
    caption: String,
    color: Color,
    shape: Shape,
}

/// Writes `manifest.jsonl` plus one target and one condition PNG per sample.
pub fn export_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::path(dir, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| Error::path(&manifest_path, e))?;
    for (i, s) in samples.iter().enumerate() {
        let record = ManifestRecord {
            target: format!("{i:06}_target.png"),
            cond: format!("{i:06}_cond.png"),
            caption: s.caption.clone(),
            color: s.color,
            shape: s.shape,
        };
        s.target.save_png(&dir.join(&record.target))?;
        s.cond.save_png(&dir.join(&record.cond))?;
        writeln!(manifest, "{}", serde_json::to_string(&record)?)?;
    }
    Ok(())
}

/// Reads a directory written by [`export_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::open(&manifest_path).map_err(|e| Error::path(&manifest_path, e))?;
    let mut samples = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)?;
        if record.caption != caption(record.color, record.shape) {
            return Err(Error::path(&manifest_path, format!("caption `{}` disagrees with labels", record.caption)));
        }
        samples.push(Sample {
            target: Image::load_png(&dir.join(&record.target), 3)?,
            cond: Image::load_png(&dir.join(&record.cond), 1)?,
            caption: record.caption,
            color: record.color,
            shape: record.shape,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_red_square() {
        let s = make_sample_named("red", "square", Jitter::NONE, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.caption, "red square");
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let inside = (5..11).contains(&y) && (5..11).contains(&x);
                assert_eq!(s.target.pixel(y, x), if inside { Color::Red.rgb().to_vec() } else { vec![0.0; 3] });
                assert_eq!(s.cond.get(y, x, 0), if inside { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn all_classes_render_and_caption() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(classes().len(), 9);
        for (c, s) in classes() {
            let sample = make_sample(c, s, Jitter::default(), &mut rng).unwrap();
            assert_eq!(sample.caption, format!("{c} {s}"));
            assert_eq!(sample.cond, silhouette(&sample.target));
            assert!(sample.cond.data.iter().any(|&v| v == 1.0));
            assert!(sample.target.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(make_sample_named("purple", "square", Jitter::NONE, &mut rng).is_err());
        assert!(make_sample_named("red", "hexagon", Jitter::NONE, &mut rng).is_err());
        let wild = Jitter { max_shift: 9, max_size_delta: 0 };
        assert!(make_sample(Color::Red, Shape::Cross, wild, &mut rng).is_err());
    }

    #[test]
    fn jittered_shapes_stay_on_canvas() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let (c, s) = classes()[rng.gen_range(0..9)];
            let sample = make_sample(c, s, Jitter::default(), &mut rng).unwrap();
            for i in 0..CANVAS {
                for edge in [(0, i), (CANVAS - 1, i), (i, 0), (i, CANVAS - 1)] {
                    assert_eq!(sample.cond.get(edge.0, edge.1, 0), 0.0, "{c} {s} touches the border");
                }
            }
        }
    }

    #[test]
    fn dataset_is_seeded_and_balanced() {
        let a = make_dataset(90, 4, Jitter::default()).unwrap();
        let b = make_dataset(90, 4, Jitter::default()).unwrap();
        assert_eq!(a, b);
        for (c, s) in classes() {
            assert_eq!(a.iter().filter(|x| x.color == c && x.shape == s).count(), 10);
        }
        assert_ne!(a, make_dataset(90, 5, Jitter::default()).unwrap());
    }

    #[test]
    fn vocab_covers_captions() {
        let v = vocab();
        assert_eq!(v.size(), 8);
        assert!(classes().iter().all(|(c, s)| v.id(c.name()) > 1 && v.id(s.name()) > 1));
    }

    #[test]
    fn probe_fallbacks_and_identity() {
        let dark = Image::zeros(CANVAS, CANVAS, 3);
        assert_eq!(probe_classify(&dark).unwrap().labels(), ("none", "none"));

        let mut red = Image::zeros(CANVAS, CANVAS, 3);
        for y in 5..11 {
            for x in 5..11 {
                red.set(y, x, 0, 1.0);
            }
        }
        assert_eq!(probe_classify(&red).unwrap().labels(), ("red", "square"));
        assert!(probe_classify(&Image::zeros(8, 8, 3)).is_err());
    }

    #[test]
    fn probe_reads_blue_circles() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let s = make_sample(Color::Blue, Shape::Circle, Jitter::default(), &mut rng).unwrap();
            assert!(probe_classify(&s.target).unwrap().matches(Color::Blue, Shape::Circle));
        }
    }

    #[test]
    fn export_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = make_dataset(9, 0, Jitter::default()).unwrap();
        export_dataset(dir.path(), &samples).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 9);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!((a.color, a.shape, &a.caption), (b.color, b.shape, &b.caption));
            assert_eq!(a.cond, b.cond);
            let err = a.target.data.iter().zip(&b.target.data).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
            assert!(err <= 0.5 / 255.0 + 1e-6);
        }
        let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest.lines().count(), 9);
        assert!(manifest.lines().next().unwrap().contains("\"caption\""));
    }
}
