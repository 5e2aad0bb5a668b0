//! Synthetic shapes dataset and the PPM/PGM files it is stored in.
//!
//! Every image is a flat background with a few filled rectangles, circles
//! and triangles painted over each other. Each foreground class has a fixed
//! shape kind and colour; per-pixel Gaussian noise is added to the colour.
//! Sample `i` of a dataset depends only on `(seed, i)`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Classes including background (label 0).
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Standard deviation of the additive colour noise, in 8-bit units.
    pub noise: f64,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > PALETTE.len() {
            return Err(Error::config(format!(
                "data.classes must be in [2, {}], got {}",
                PALETTE.len(),
                self.num_classes
            )));
        }
        if self.height < 4 || self.width < 4 {
            return Err(Error::config(format!("image {}x{} is too small", self.height, self.width)));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config(format!(
                "min_shapes {} exceeds max_shapes {}",
                self.min_shapes, self.max_shapes
            )));
        }
        if !self.noise.is_finite() || self.noise < 0.0 {
            return Err(Error::config(format!("noise must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Class colours; index 0 is the background.
pub const PALETTE: [[u8; 3]; 8] = [
    [30, 30, 30],
    [220, 60, 50],
    [50, 180, 70],
    [60, 90, 220],
    [230, 200, 40],
    [200, 70, 200],
    [60, 200, 210],
    [240, 240, 240],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
}

impl ShapeKind {
    /// Foreground classes cycle through the three kinds.
    pub fn for_class(class: usize) -> ShapeKind {
        match (class - 1) % 3 {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Circle,
            _ => ShapeKind::Triangle,
        }
    }
}

/// Geometry in continuous pixel coordinates; pixel `(y, x)` is covered when
/// its centre `(y + 0.5, x + 0.5)` is inside.
#[derive(Clone, Debug, PartialEq)]
pub enum Geometry {
    Rectangle { y0: f64, x0: f64, y1: f64, x1: f64 },
    Circle { cy: f64, cx: f64, r: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Geometry {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Geometry::Rectangle { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Geometry::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Geometry::Triangle { pts } => {
                let edge = |(ay, ax): (f64, f64), (by, bx): (f64, f64)| (bx - ax) * (y - ay) - (by - ay) * (x - ax);
                let d = [edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }

    /// Pixel rows and columns that can be covered, clipped to the image.
    fn bounds(&self, h: usize, w: usize) -> (usize, usize, usize, usize) {
        let (y0, x0, y1, x1) = match *self {
            Geometry::Rectangle { y0, x0, y1, x1 } => (y0, x0, y1, x1),
            Geometry::Circle { cy, cx, r } => (cy - r, cx - r, cy + r, cx + r),
            Geometry::Triangle { pts } => pts.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), &(y, x)| (a.min(y), b.min(x), c.max(y), d.max(x)),
            ),
        };
        let clip = |v: f64, n: usize| (v.max(0.0) as usize).min(n);
        (clip(y0.floor(), h), clip(x0.floor(), w), clip(y1.ceil() + 1.0, h), clip(x1.ceil() + 1.0, w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shape {
    pub class: u8,
    pub geometry: Geometry,
}

/// 8-bit RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    /// `[H, W, 3]` tensor with values mapped to roughly `[-2, 2]`.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let data = self.data.iter().map(|&v| F::lit((f64::from(v) - 127.5) / 64.0)).collect();
        Tensor::new(&[self.height, self.width, 3], data).expect("consistent image buffer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub labels: LabelMap,
    pub shapes: Vec<Shape>,
}

fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn random_shape(rng: &mut ChaCha8Rng, class: usize, h: usize, w: usize) -> Geometry {
    let (hf, wf) = (h as f64, w as f64);
    let small = hf.min(wf);
    match ShapeKind::for_class(class) {
        ShapeKind::Rectangle => {
            let sh = rng.random_range(0.25 * small..0.6 * small);
            let sw = rng.random_range(0.25 * small..0.6 * small);
            let y0 = rng.random_range(0.0..hf - sh);
            let x0 = rng.random_range(0.0..wf - sw);
            Geometry::Rectangle {
                y0,
                x0,
                y1: y0 + sh,
                x1: x0 + sw,
            }
        }
        ShapeKind::Circle => {
            let r = rng.random_range(0.15 * small..0.3 * small);
            Geometry::Circle {
                cy: rng.random_range(r..hf - r),
                cx: rng.random_range(r..wf - r),
                r,
            }
        }
        ShapeKind::Triangle => {
            let size = rng.random_range(0.35 * small..0.65 * small);
            let y0 = rng.random_range(0.0..hf - size);
            let x0 = rng.random_range(0.0..wf - size);
            let apex = x0 + rng.random_range(0.0..size);
            Geometry::Triangle {
                pts: [(y0, apex), (y0 + size, x0), (y0 + size, x0 + size)],
            }
        }
    }
}

/// Paint `shapes` in order onto a background label map.
pub fn rasterize(shapes: &[Shape], h: usize, w: usize) -> LabelMap {
    let mut labels = LabelMap::filled(h, w, 0);
    for s in shapes {
        let (ya, xa, yb, xb) = s.geometry.bounds(h, w);
        for y in ya..yb {
            for x in xa..xb {
                if s.geometry.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    labels.labels[y * w + x] = s.class;
                }
            }
        }
    }
    labels
}

/// Sample `index` of the dataset defined by `(cfg, seed)`.
pub fn generate(cfg: &DataConfig, seed: u64, index: u64) -> Result<Sample> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = sample_rng(seed, index);
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let shapes: Vec<Shape> = (0..count)
        .map(|_| {
            let class = rng.random_range(1..cfg.num_classes);
            Shape {
                class: class as u8,
                geometry: random_shape(&mut rng, class, h, w),
            }
        })
        .collect();
    let labels = rasterize(&shapes, h, w);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::config(e.to_string()))?;
    let mut data = Vec::with_capacity(h * w * 3);
    for &l in &labels.labels {
        for &c in &PALETTE[l as usize] {
            let v = f64::from(c) + noise.sample(&mut rng);
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    Ok(Sample {
        image: RgbImage {
            height: h,
            width: w,
            data,
        },
        labels,
        shapes,
    })
}

pub fn generate_range(cfg: &DataConfig, seed: u64, range: std::ops::Range<u64>) -> Result<Vec<Sample>> {
    range.map(|i| generate(cfg, seed, i)).collect()
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut buf = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    buf.extend_from_slice(&img.data);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", labels.width, labels.height).into_bytes();
    buf.extend_from_slice(&labels.labels);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Parse a binary netpbm header (`magic`, width, height, maxval 255) and
/// return the dimensions and pixel bytes.
fn read_netpbm(path: &Path, magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    let mut fields = Vec::new();
    let mut line = String::new();
    while fields.len() < 4 {
        line.clear();
        if reader.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(bad("truncated header"));
        }
        let content = line.split('#').next().unwrap_or("");
        fields.extend(content.split_whitespace().map(str::to_owned));
    }
    if fields.len() != 4 || fields[0] != magic {
        return Err(bad(&format!("expected a {magic} file")));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header"));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit files are supported"));
    }
    let mut data = Vec::new();
    reader.read_to_end(&mut data).map_err(|e| Error::io(path, e))?;
    if data.len() != w * h * channels {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h * channels, data.len())));
    }
    Ok((h, w, data))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let (height, width, data) = read_netpbm(path, "P6", 3)?;
    Ok(RgbImage { height, width, data })
}

pub fn read_pgm(path: &Path) -> Result<LabelMap> {
    let (h, w, data) = read_netpbm(path, "P5", 1)?;
    LabelMap::new(h, w, data)
}

/// Name of the file holding a split's sample count.
pub const COUNT_FILE: &str = "count";

pub fn image_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}.ppm"))
}

pub fn label_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{index:05}.pgm"))
}

/// Write `samples` as numbered PPM/PGM pairs plus a small index file.
pub fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        write_ppm(&image_path(dir, i), &s.image)?;
        write_pgm(&label_path(dir, i), &s.labels)?;
    }
    let index = dir.join(COUNT_FILE);
    let mut f = fs::File::create(&index).map_err(|e| Error::io(&index, e))?;
    writeln!(f, "{}", samples.len()).map_err(|e| Error::io(&index, e))
}

/// Image/label pairs held in memory.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub images: Vec<RgbImage>,
    pub labels: Vec<LabelMap>,
}

impl Dataset {
    pub fn from_samples(samples: Vec<Sample>) -> Self {
        let (images, labels) = samples.into_iter().map(|s| (s.image, s.labels)).unzip();
        Dataset { images, labels }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn read_split(dir: &Path) -> Result<Self> {
        let index = dir.join(COUNT_FILE);
        let text = fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
        let n: usize = text
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("{}: not a count", index.display())))?;
        let mut ds = Dataset::default();
        for i in 0..n {
            let img = read_ppm(&image_path(dir, i))?;
            let lbl = read_pgm(&label_path(dir, i))?;
            if (img.height, img.width) != (lbl.height, lbl.width) {
                return Err(Error::Data(format!("sample {i} in {}: image and label sizes differ", dir.display())));
            }
            ds.images.push(img);
            ds.labels.push(lbl);
        }
        Ok(ds)
    }
}
