//! Labeled image sources: procedural glyphs, IDX (MNIST) files, the
//! generated/real evaluation split, and a bit-exact image-set file format.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorCheckpoint;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    Real,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Generated => "generated",
            Provenance::Real => "real",
        }
    }
}

/// An image in `[-1, 1]` with its class. Generated images also carry the
/// latent vector they were produced from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub id: String,
    pub pixels: Tensor,
    pub label: usize,
    pub provenance: Provenance,
    pub latent: Option<Tensor>,
}

impl LabeledImage {
    pub fn check(&self, num_classes: usize) -> Result<()> {
        if self.label >= num_classes {
            return Err(Error::Dataset(format!(
                "{}: label {} outside [0, {num_classes})",
                self.id, self.label
            )));
        }
        if self.pixels.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Dataset(format!(
                "{}: pixel outside [-1, 1]",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GlyphConfig {
    pub classes: usize,
    /// Square image side in pixels.
    pub size: usize,
    /// Maximum translation as a fraction of the half-width.
    pub shift: f64,
    /// Maximum rotation in degrees.
    pub rotation_deg: f64,
    pub scale: [f64; 2],
    /// Stroke half-width range as a fraction of the half-width.
    pub thickness: [f64; 2],
}

impl Default for GlyphConfig {
    fn default() -> Self {
        GlyphConfig {
            classes: 10,
            size: 32,
            shift: 0.1,
            rotation_deg: 12.0,
            scale: [0.85, 1.1],
            thickness: [0.07, 0.13],
        }
    }
}

impl GlyphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=GLYPH_FAMILIES).contains(&self.classes) {
            return Err(Error::Config(format!(
                "glyph classes must be in 2..={GLYPH_FAMILIES}, got {}",
                self.classes
            )));
        }
        if self.size < 8 {
            return Err(Error::Config(format!("glyph size {} too small", self.size)));
        }
        let ordered = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite();
        if !ordered(self.scale) || !ordered(self.thickness) {
            return Err(Error::Config(
                "scale and thickness ranges must be positive and ordered".into(),
            ));
        }
        if !(self.shift >= 0.0 && self.rotation_deg >= 0.0) {
            return Err(Error::Config(
                "shift and rotation must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [1, self.size, self.size]
    }
}

pub const GLYPH_FAMILIES: usize = 10;

enum Primitive {
    Segment([f64; 2], [f64; 2]),
    Ring(f64),
    Disc(f64),
}

/// Class `k` draws family `k`: ring, vertical bar, horizontal bar, slash,
/// backslash, plus, cross, square, triangle, filled disc.
fn glyph_family(class: usize) -> Vec<Primitive> {
    use Primitive::*;
    let s = |a: [f64; 2], b: [f64; 2]| Segment(a, b);
    match class {
        0 => vec![Ring(0.55)],
        1 => vec![s([0.0, -0.65], [0.0, 0.65])],
        2 => vec![s([-0.65, 0.0], [0.65, 0.0])],
        3 => vec![s([-0.5, 0.5], [0.5, -0.5])],
        4 => vec![s([-0.5, -0.5], [0.5, 0.5])],
        5 => vec![s([0.0, -0.6], [0.0, 0.6]), s([-0.6, 0.0], [0.6, 0.0])],
        6 => vec![
            s([-0.45, -0.45], [0.45, 0.45]),
            s([-0.45, 0.45], [0.45, -0.45]),
        ],
        7 => {
            let c = [[-0.5, -0.5], [0.5, -0.5], [0.5, 0.5], [-0.5, 0.5]];
            (0..4).map(|i| s(c[i], c[(i + 1) % 4])).collect()
        }
        8 => {
            let c = [[0.0, -0.6], [0.55, 0.45], [-0.55, 0.45]];
            (0..3).map(|i| s(c[i], c[(i + 1) % 3])).collect()
        }
        9 => vec![Disc(0.35)],
        _ => unreachable!("glyph family {class}"),
    }
}

fn distance(p: [f64; 2], prim: &Primitive) -> f64 {
    match *prim {
        Primitive::Segment(a, b) => {
            let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
            let t =
                (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            let (ex, ey) = (p[0] - a[0] - t * dx, p[1] - a[1] - t * dy);
            (ex * ex + ey * ey).sqrt()
        }
        Primitive::Ring(r) => ((p[0] * p[0] + p[1] * p[1]).sqrt() - r).abs(),
        // the stroke half-width is added back by the renderer
        Primitive::Disc(r) => ((p[0] * p[0] + p[1] * p[1]).sqrt() - r).max(0.0),
    }
}

/// Renders one glyph of `class` with a random pose drawn from `rng`.
pub fn render_glyph<R: Rng + ?Sized>(config: &GlyphConfig, class: usize, rng: &mut R) -> Tensor {
    let prims = glyph_family(class);
    let shift = [
        rng.random_range(-1.0..=1.0) * config.shift,
        rng.random_range(-1.0..=1.0) * config.shift,
    ];
    let angle = rng.random_range(-1.0..=1.0) * config.rotation_deg.to_radians();
    let scale = rng.random_range(config.scale[0]..=config.scale[1]);
    let half_width = rng.random_range(config.thickness[0]..=config.thickness[1]);
    let (sin, cos) = angle.sin_cos();
    let n = config.size;
    let px = 2.0 / n as f64;
    let mut data = Vec::with_capacity(n * n);
    for row in 0..n {
        for col in 0..n {
            let u = [
                (col as f64 + 0.5) * px - 1.0 - shift[0],
                (row as f64 + 0.5) * px - 1.0 - shift[1],
            ];
            // inverse pose: rotate by -angle, then unscale
            let q = [
                (cos * u[0] + sin * u[1]) / scale,
                (-sin * u[0] + cos * u[1]) / scale,
            ];
            let d = prims
                .iter()
                .map(|p| distance(q, p))
                .fold(f64::INFINITY, f64::min)
                * scale;
            let coverage = ((half_width - d) / px + 0.5).clamp(0.0, 1.0);
            data.push(2.0 * coverage - 1.0);
        }
    }
    Tensor::new(vec![1, n, n], data).expect("square glyph")
}

/// `n_per_class` glyphs of every class, interleaved by class, with ids
/// `glyph-<seed>-<index>`. Deterministic in `seed`.
pub fn synth_glyphs(
    config: &GlyphConfig,
    n_per_class: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    config.validate()?;
    if n_per_class < 1 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = n_per_class * config.classes;
    Ok((0..total)
        .map(|i| {
            let label = i % config.classes;
            LabeledImage {
                id: format!("glyph-{seed}-{i}"),
                pixels: render_glyph(config, label, &mut rng),
                label,
                provenance: Provenance::Real,
                latent: None,
            }
        })
        .collect())
}

/// Per-class mean images; classifies by nearest mean in Euclidean distance.
#[derive(Debug, Clone)]
pub struct NearestClassMean {
    means: Vec<Vec<f64>>,
}

impl NearestClassMean {
    pub fn fit(images: &[LabeledImage], classes: usize) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Empty("classifier training set".into()))?;
        let dim = first.pixels.len();
        let mut sums = vec![vec![0.0; dim]; classes];
        let mut counts = vec![0usize; classes];
        for img in images {
            img.check(classes)?;
            counts[img.label] += 1;
            for (s, v) in sums[img.label].iter_mut().zip(img.pixels.data()) {
                *s += v;
            }
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Dataset(format!("class {k} has no examples")));
        }
        for (s, &c) in sums.iter_mut().zip(&counts) {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
        Ok(NearestClassMean { means: sums })
    }

    pub fn classify(&self, pixels: &Tensor) -> usize {
        let dist = |m: &[f64]| {
            m.iter()
                .zip(pixels.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        };
        let mut best = (0, f64::INFINITY);
        for (k, m) in self.means.iter().enumerate() {
            let d = dist(m);
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    pub fn accuracy(&self, images: &[LabeledImage]) -> f64 {
        let hits = images
            .iter()
            .filter(|img| self.classify(&img.pixels) == img.label)
            .count();
        hits as f64 / images.len() as f64
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Reads an IDX image/label file pair (e.g. MNIST). Pixels are rescaled
/// from `[0, 255]` to `[-1, 1]` and each image is centred on a 32x32 canvas
/// filled with -1.
pub fn read_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<Vec<LabeledImage>> {
    read_idx_padded(images_path, labels_path, 32)
}

pub fn read_idx_padded(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    canvas: usize,
) -> Result<Vec<LabeledImage>> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;

    let be32 = |b: &[u8], at: usize, what: &str| -> Result<u32> {
        b.get(at..at + 4)
            .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
            .ok_or_else(|| Error::Truncated(format!("IDX {what} header")))
    };
    let magic = be32(&images, 0, "image")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic(format!("IDX images: {magic:#010x}")));
    }
    let magic = be32(&labels, 0, "label")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic(format!("IDX labels: {magic:#010x}")));
    }
    let count = be32(&images, 4, "image")? as usize;
    let rows = be32(&images, 8, "image")? as usize;
    let cols = be32(&images, 12, "image")? as usize;
    let label_count = be32(&labels, 4, "label")? as usize;
    if count != label_count {
        return Err(Error::Dataset(format!(
            "{count} images but {label_count} labels"
        )));
    }
    if rows > canvas || cols > canvas || rows == 0 || cols == 0 {
        return Err(Error::Dataset(format!(
            "{rows}x{cols} images do not fit a {canvas}x{canvas} canvas"
        )));
    }
    let plane = rows * cols;
    let pixels = images
        .get(16..16 + count * plane)
        .ok_or_else(|| Error::Truncated(format!("IDX images: {count} x {rows}x{cols} expected")))?;
    let label_bytes = labels
        .get(8..8 + count)
        .ok_or_else(|| Error::Truncated(format!("IDX labels: {count} expected")))?;

    let (top, left) = ((canvas - rows) / 2, (canvas - cols) / 2);
    Ok((0..count)
        .map(|i| {
            let mut data = vec![-1.0; canvas * canvas];
            for r in 0..rows {
                for c in 0..cols {
                    data[(top + r) * canvas + left + c] =
                        pixels[i * plane + r * cols + c] as f64 / 127.5 - 1.0;
                }
            }
            LabeledImage {
                id: format!("idx-{i}"),
                pixels: Tensor::new(vec![1, canvas, canvas], data).unwrap(),
                label: label_bytes[i] as usize,
                provenance: Provenance::Real,
                latent: None,
            }
        })
        .collect())
}

/// Draws `n` generated targets `G(z, one_hot(i mod d_y))` with
/// `z ~ U(-1, 1)` and `n` real targets from `holdout`, both class-balanced.
pub fn split_real_generated(
    ckpt: &GeneratorCheckpoint,
    holdout: &[LabeledImage],
    n: usize,
    seed: u64,
) -> Result<(Vec<LabeledImage>, Vec<LabeledImage>)> {
    let classes = ckpt.cond_dim();
    let generated = generate_targets(ckpt, n, seed)?;

    let mut by_class: BTreeMap<usize, Vec<&LabeledImage>> = BTreeMap::new();
    for img in holdout {
        img.check(classes)?;
        img.pixels
            .ensure_shape(ckpt.image_shape(), "holdout image")?;
        by_class.entry(img.label).or_default().push(img);
    }
    let mut taken = vec![0usize; classes];
    let mut real = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let img = by_class
            .get(&k)
            .and_then(|v| v.get(taken[k]))
            .ok_or_else(|| {
                Error::Dataset(format!(
                    "{n} real targets requested, holdout runs out of class {k}"
                ))
            })?;
        taken[k] += 1;
        real.push(LabeledImage {
            provenance: Provenance::Real,
            latent: None,
            ..(*img).clone()
        });
    }
    Ok((generated, real))
}

/// `n` generated targets with labels `i mod d_y` and ids `gen-<seed>-<i>`.
pub fn generate_targets(
    ckpt: &GeneratorCheckpoint,
    n: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            generated_target(
                ckpt,
                i % ckpt.cond_dim(),
                &mut rng,
                format!("gen-{seed}-{i}"),
            )
        })
        .collect()
}

/// One generated target with its ground-truth latent vector.
pub fn generated_target<R: Rng + ?Sized>(
    ckpt: &GeneratorCheckpoint,
    label: usize,
    rng: &mut R,
    id: String,
) -> Result<LabeledImage> {
    let z = Tensor::vector(
        (0..ckpt.latent_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    let pixels = ckpt.generate(&z, &Tensor::one_hot(ckpt.cond_dim(), label))?;
    Ok(LabeledImage {
        id,
        pixels,
        label,
        provenance: Provenance::Generated,
        latent: Some(z),
    })
}

pub const IMAGE_SET_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ImageSetIndex {
    format_version: u32,
    image_shape: Vec<usize>,
    entries: Vec<ImageSetEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageSetEntry {
    id: String,
    label: usize,
    provenance: Provenance,
    latent_dim: Option<usize>,
}

/// Binary sidecar path next to an image-set index: `x.json` -> `x.f64`.
pub fn sidecar_path(index: &Path) -> PathBuf {
    index.with_extension("f64")
}

/// Writes a JSON index plus a raw little-endian `f64` sidecar holding, per
/// entry, the pixels followed by the latent vector when present.
pub fn save_image_set(index_path: impl AsRef<Path>, images: &[LabeledImage]) -> Result<()> {
    let index_path = index_path.as_ref();
    let first = images
        .first()
        .ok_or_else(|| Error::Empty("image set".into()))?;
    let shape = first.pixels.shape().to_vec();
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(images.len());
    for img in images {
        img.pixels.ensure_shape(&shape, "image set entry")?;
        for v in img
            .pixels
            .data()
            .iter()
            .chain(img.latent.iter().flat_map(|z| z.data()))
        {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(ImageSetEntry {
            id: img.id.clone(),
            label: img.label,
            provenance: img.provenance,
            latent_dim: img.latent.as_ref().map(|z| z.len()),
        });
    }
    let index = ImageSetIndex {
        format_version: IMAGE_SET_VERSION,
        image_shape: shape,
        entries,
    };
    let json = serde_json::to_string_pretty(&index)?;
    fs::write(index_path, json).map_err(|e| Error::io(index_path, e))?;
    let side = sidecar_path(index_path);
    fs::write(&side, blob).map_err(|e| Error::io(&side, e))
}

pub fn load_image_set(index_path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let index_path = index_path.as_ref();
    let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let index: ImageSetIndex = serde_json::from_str(&text)?;
    if index.format_version != IMAGE_SET_VERSION {
        return Err(Error::Version {
            found: index.format_version,
            expected: IMAGE_SET_VERSION,
        });
    }
    let side = sidecar_path(index_path);
    let blob = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let mut values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    if blob.len() % 8 != 0 {
        return Err(Error::Truncated(format!(
            "{}: partial value",
            side.display()
        )));
    }
    let plane: usize = index.image_shape.iter().product();
    let mut take = |n: usize, id: &str| -> Result<Vec<f64>> {
        let v: Vec<f64> = values.by_ref().take(n).collect();
        if v.len() != n {
            return Err(Error::Truncated(format!(
                "{}: data for {id}",
                side.display()
            )));
        }
        Ok(v)
    };
    let mut out = Vec::with_capacity(index.entries.len());
    for e in &index.entries {
        let pixels = Tensor::new(index.image_shape.clone(), take(plane, &e.id)?)?;
        let latent = match e.latent_dim {
            Some(d) => Some(Tensor::new(vec![d], take(d, &e.id)?)?),
            None => None,
        };
        out.push(LabeledImage {
            id: e.id.clone(),
            pixels,
            label: e.label,
            provenance: e.provenance,
            latent,
        });
    }
    if values.next().is_some() {
        return Err(Error::CorruptHeader(format!(
            "{}: trailing data",
            side.display()
        )));
    }
    Ok(out)
}
