//! Synthetic multi-class segmentation data: filled shapes with
//! class-specific intensity bands plus Gaussian noise.
//!
//! Centres and radii are integers, so the mask is an exact lattice
//! rasterization:
//!
//! * ellipse: `dy²·rx² + dx²·ry² ≤ rx²·ry²`
//! * circle: `dy² + dx² ≤ r²`
//! * rectangle: `|dy| ≤ ry` and `|dx| ≤ rx`
//!
//! Sample `i` is drawn from its own generator seeded with `seed ^ i`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Circle,
}

fn default_kinds() -> Vec<ShapeKind> {
    vec![ShapeKind::Ellipse, ShapeKind::Rectangle]
}

fn default_noise() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub image_size: usize,
    pub num_classes: usize,
    /// Inclusive `[min, max]` shape count per image.
    pub shapes_per_image: [usize; 2],
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    pub min_shape_radius: usize,
    pub max_shape_radius: usize,
    #[serde(default)]
    pub overlap_allowed: bool,
    pub count: usize,
    pub seed: u64,
    #[serde(default = "default_kinds")]
    pub kinds: Vec<ShapeKind>,
}

/// Attempts to place a shape on free pixels before it is dropped.
const PLACEMENT_TRIES: usize = 20;
const BAND_JITTER: f64 = 0.05;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.image_size == 0 {
            return fail("image_size must be positive".into());
        }
        let [lo, hi] = self.shapes_per_image;
        if lo > hi {
            return fail(format!("shapes_per_image [{lo}, {hi}] is empty"));
        }
        if self.min_shape_radius > self.max_shape_radius {
            return fail("min_shape_radius exceeds max_shape_radius".into());
        }
        if 2 * self.max_shape_radius + 1 > self.image_size {
            return fail(format!(
                "a shape of radius {} does not fit in a {}-pixel image",
                self.max_shape_radius, self.image_size
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return fail(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if self.kinds.is_empty() {
            return fail("kinds must not be empty".into());
        }
        Ok(())
    }

    /// Checks the image can pass through `stages` 2× downsamplings.
    pub fn check_depth(&self, stages: usize) -> Result<()> {
        if !self.image_size.is_multiple_of(1 << stages) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by 2^{stages}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// Spacing between the intensity centres of consecutive classes.
    pub fn band_spacing(&self) -> f64 {
        (0.8 / (self.num_classes - 1) as f64).min(0.15)
    }

    /// Mean intensity of `class` before jitter and noise.
    pub fn band_centre(&self, class: usize) -> f64 {
        0.1 + self.band_spacing() * class as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub class: usize,
    pub kind: ShapeKind,
    pub cy: usize,
    pub cx: usize,
    pub ry: usize,
    pub rx: usize,
}

impl Shape {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y.abs_diff(self.cy) as u64;
        let dx = x.abs_diff(self.cx) as u64;
        let (ry, rx) = (self.ry as u64, self.rx as u64);
        match self.kind {
            ShapeKind::Ellipse => dy * dy * rx * rx + dx * dx * ry * ry <= rx * rx * ry * ry,
            ShapeKind::Circle => dy * dy + dx * dx <= ry * ry,
            ShapeKind::Rectangle => dy <= ry && dx <= rx,
        }
    }

    fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.cy - self.ry..=self.cy + self.ry)
            .flat_map(move |y| (self.cx - self.rx..=self.cx + self.rx).map(move |x| (y, x)))
            .filter(move |&(y, x)| self.contains(y, x))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `H × W` labels.
    pub mask: Vec<usize>,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

fn draw_shape(spec: &SynthSpec, rng: &mut SeededRng) -> Shape {
    let class = 1 + rng.below(spec.num_classes - 1);
    let kind = spec.kinds[rng.below(spec.kinds.len())];
    let (lo, hi) = (spec.min_shape_radius, spec.max_shape_radius);
    let ry = rng.range_inclusive(lo, hi);
    let rx = if kind == ShapeKind::Circle {
        ry
    } else {
        rng.range_inclusive(lo, hi)
    };
    let s = spec.image_size;
    let cy = rng.range_inclusive(ry, s - 1 - ry);
    let cx = rng.range_inclusive(rx, s - 1 - rx);
    Shape {
        class,
        kind,
        cy,
        cx,
        ry,
        rx,
    }
}

/// Sample `index` of the dataset together with the shapes that were drawn,
/// in draw order.
pub fn generate_sample(spec: &SynthSpec, index: usize) -> Result<(Sample, Vec<Shape>)> {
    spec.validate()?;
    let mut rng = SeededRng::new(spec.seed ^ index as u64);
    let s = spec.image_size;
    let mut mask = vec![0usize; s * s];
    let mut level = vec![0.0; s * s];
    let background = spec.band_centre(0) + rng.uniform(-BAND_JITTER, BAND_JITTER);
    level.fill(background);

    let n = rng.range_inclusive(spec.shapes_per_image[0], spec.shapes_per_image[1]);
    let mut shapes = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = None;
        for _ in 0..if spec.overlap_allowed { 1 } else { PLACEMENT_TRIES } {
            let shape = draw_shape(spec, &mut rng);
            if spec.overlap_allowed || shape.pixels().all(|(y, x)| mask[y * s + x] == 0) {
                placed = Some(shape);
                break;
            }
        }
        let Some(shape) = placed else { continue };
        let intensity = spec.band_centre(shape.class) + rng.uniform(-BAND_JITTER, BAND_JITTER);
        for (y, x) in shape.pixels() {
            mask[y * s + x] = shape.class;
            level[y * s + x] = intensity;
        }
        shapes.push(shape);
    }
    let data = level
        .iter()
        .map(|&v| (v + rng.normal(0.0, spec.noise_std)).clamp(0.0, 1.0))
        .collect();
    let image = Tensor::new(&[1, s, s], data)?;
    Ok((Sample { image, mask }, shapes))
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| generate_sample(spec, i).map(|(s, _)| s))
        .collect()
}

/// The six joint image/mask transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    Identity,
    HFlip,
    VFlip,
    Rot90,
    Rot180,
    Rot270,
}

impl Augment {
    pub const ALL: [Augment; 6] = [
        Augment::Identity,
        Augment::HFlip,
        Augment::VFlip,
        Augment::Rot90,
        Augment::Rot180,
        Augment::Rot270,
    ];

    /// Applies the transform to a row-major `h × w` grid; returns the new
    /// grid and its `(h, w)`. Rotations are clockwise.
    pub fn apply<T: Copy>(self, grid: &[T], h: usize, w: usize) -> (Vec<T>, usize, usize) {
        let (oh, ow) = match self {
            Augment::Rot90 | Augment::Rot270 => (w, h),
            _ => (h, w),
        };
        let mut out = Vec::with_capacity(grid.len());
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = match self {
                    Augment::Identity => (y, x),
                    Augment::HFlip => (y, w - 1 - x),
                    Augment::VFlip => (h - 1 - y, x),
                    Augment::Rot90 => (h - 1 - x, y),
                    Augment::Rot180 => (h - 1 - y, w - 1 - x),
                    Augment::Rot270 => (x, w - 1 - y),
                };
                out.push(grid[sy * w + sx]);
            }
        }
        (out, oh, ow)
    }

    pub fn apply_sample(self, sample: &Sample) -> Sample {
        let (h, w) = (sample.height(), sample.width());
        let (img, oh, ow) = self.apply(sample.image.data(), h, w);
        let (mask, _, _) = self.apply(&sample.mask, h, w);
        Sample {
            image: Tensor::new(&[1, oh, ow], img).expect("transform keeps the pixel count"),
            mask,
        }
    }
}

/// One uniformly chosen transform applied to image and mask alike.
pub fn augment(sample: &Sample, rng: &mut SeededRng) -> Sample {
    Augment::ALL[rng.below(Augment::ALL.len())].apply_sample(sample)
}

/// Stacks images into `[B, 1, H, W]` and concatenates their masks.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor, Vec<usize>)> {
    let first = samples.first().ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(samples.len() * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::dim("collate", s.image.shape(), first.image.shape()));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask);
    }
    Ok((Tensor::new(&[samples.len(), 1, h, w], data)?, labels))
}

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "synergynet-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub spec: SynthSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub samples: Vec<Sample>,
}

fn sample_paths(dir: &Path, i: usize) -> (PathBuf, PathBuf) {
    let base = dir.join("samples");
    (base.join(format!("{i:04}.img")), base.join(format!("{i:04}.msk")))
}

impl Dataset {
    pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
        Ok(Dataset {
            spec: spec.clone(),
            samples: generate(spec)?,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Writes `manifest.json` and `samples/NNNN.{img,msk}`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir.join("samples"))?;
        let manifest = DatasetManifest {
            format: FORMAT.into(),
            version: 1,
            count: self.samples.len(),
            spec: self.spec.clone(),
        };
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        for (i, s) in self.samples.iter().enumerate() {
            let (img, msk) = sample_paths(dir, i);
            s.image.save(img)?;
            let labels = s.mask.iter().map(|&l| l as f64).collect();
            Tensor::new(&[s.height(), s.width()], labels)?.save(msk)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::Integrity {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Integrity {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        if manifest.format != FORMAT || manifest.version != 1 {
            return Err(Error::Integrity {
                path: mpath,
                msg: format!("unsupported format {} v{}", manifest.format, manifest.version),
            });
        }
        let spec = manifest.spec;
        let s = spec.image_size;
        let mut samples = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let (ipath, mpath) = sample_paths(dir, i);
            let bad = |path: &Path, msg: String| Error::Integrity {
                path: path.to_path_buf(),
                msg,
            };
            let read = |path: &Path| Tensor::load(path).map_err(|e| bad(path, e.to_string()));
            let image = read(&ipath)?;
            if image.shape() != [1, s, s] {
                return Err(bad(
                    &ipath,
                    format!("shape {:?}, manifest says [1, {s}, {s}]", image.shape()),
                ));
            }
            if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(bad(&ipath, "intensity outside [0, 1]".into()));
            }
            let mt = read(&mpath)?;
            if mt.shape() != [s, s] {
                return Err(bad(&mpath, format!("shape {:?}, manifest says [{s}, {s}]", mt.shape())));
            }
            let mut mask = Vec::with_capacity(s * s);
            for &v in mt.data() {
                if v.fract() != 0.0 || !(0.0..spec.num_classes as f64).contains(&v) {
                    return Err(bad(&mpath, format!("label {v} is not a class id")));
                }
                mask.push(v as usize);
            }
            samples.push(Sample { image, mask });
        }
        let (extra, _) = sample_paths(dir, manifest.count);
        if extra.exists() {
            return Err(Error::Integrity {
                path: extra,
                msg: format!("manifest lists {} samples but more are present", manifest.count),
            });
        }
        Ok(Dataset { spec, samples })
    }

    /// Pixel count per class over the whole set.
    pub fn class_pixels(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.spec.num_classes];
        for s in &self.samples {
            for &l in &s.mask {
                counts[l] += 1;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec() -> SynthSpec {
        SynthSpec {
            image_size: 16,
            num_classes: 4,
            shapes_per_image: [1, 3],
            noise_std: 0.05,
            min_shape_radius: 2,
            max_shape_radius: 4,
            overlap_allowed: true,
            count: 6,
            seed: 7,
            kinds: default_kinds(),
        }
    }

    #[test]
    fn circle_rasterization_matches_disc_equation() {
        let spec = SynthSpec {
            num_classes: 2,
            shapes_per_image: [1, 1],
            noise_std: 0.0,
            kinds: vec![ShapeKind::Circle],
            ..spec()
        };
        for i in 0..20 {
            let (s, shapes) = generate_sample(&spec, i).unwrap();
            let c = shapes[0];
            for y in 0..16 {
                for x in 0..16 {
                    let (dy, dx) = (y as i64 - c.cy as i64, x as i64 - c.cx as i64);
                    let inside = dy * dy + dx * dx <= (c.ry * c.ry) as i64;
                    assert_eq!(s.mask[y * 16 + x], inside as usize);
                }
            }
            // noise-free: two intensity levels only
            let mut levels: Vec<f64> = s.image.data().to_vec();
            levels.sort_by(f64::total_cmp);
            levels.dedup();
            assert_eq!(levels.len(), 2);
        }
    }

    #[test]
    fn mask_follows_draw_order() {
        let spec = SynthSpec {
            shapes_per_image: [4, 4],
            max_shape_radius: 6,
            ..spec()
        };
        for i in 0..10 {
            let (s, shapes) = generate_sample(&spec, i).unwrap();
            for y in 0..16 {
                for x in 0..16 {
                    let want = shapes
                        .iter()
                        .rev()
                        .find(|sh| sh.contains(y, x))
                        .map_or(0, |sh| sh.class);
                    assert_eq!(s.mask[y * 16 + x], want);
                }
            }
        }
    }

    #[test]
    fn disjoint_placement_never_overwrites() {
        let spec = SynthSpec {
            overlap_allowed: false,
            shapes_per_image: [3, 3],
            ..spec()
        };
        for i in 0..10 {
            let (s, shapes) = generate_sample(&spec, i).unwrap();
            for sh in &shapes {
                assert!(sh.pixels().all(|(y, x)| s.mask[y * 16 + x] == sh.class));
            }
            for (a, sa) in shapes.iter().enumerate() {
                for sb in &shapes[a + 1..] {
                    assert!(sa.pixels().all(|p| !sb.contains(p.0, p.1)));
                }
            }
        }
    }

    #[test]
    fn images_are_bounded_and_labels_valid() {
        let spec = SynthSpec {
            noise_std: 0.5,
            ..spec()
        };
        for s in generate(&spec).unwrap() {
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.iter().all(|&l| l < 4));
        }
    }

    #[test]
    fn empty_and_invalid_specs() {
        assert!(generate(&SynthSpec { count: 0, ..spec() }).unwrap().is_empty());
        assert!(generate(&SynthSpec {
            max_shape_radius: 8,
            ..spec()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            num_classes: 1,
            ..spec()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            shapes_per_image: [3, 1],
            ..spec()
        })
        .is_err());
        assert!(spec().check_depth(4).is_ok());
        assert!(spec().check_depth(5).is_err());
    }

    #[test]
    fn band_layout() {
        let s = spec();
        assert_eq!(s.band_spacing(), 0.15);
        assert!((s.band_centre(3) - 0.55).abs() < 1e-15);
        let many = SynthSpec {
            num_classes: 9,
            ..spec()
        };
        assert_eq!(many.band_spacing(), 0.1);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&spec()).unwrap(), generate(&spec()).unwrap());
        let other = SynthSpec { seed: 8, ..spec() };
        assert_ne!(generate(&spec()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn transforms_compose_as_rotations() {
        let grid: Vec<usize> = (0..6).collect();
        let (r, h, w) = Augment::Rot90.apply(&grid, 2, 3);
        assert_eq!((h, w), (3, 2));
        assert_eq!(r, vec![3, 0, 4, 1, 5, 2]);
        let (r2, h2, w2) = Augment::Rot90.apply(&r, h, w);
        assert_eq!(r2, Augment::Rot180.apply(&grid, 2, 3).0);
        let (r3, _, _) = Augment::Rot90.apply(&r2, h2, w2);
        assert_eq!(r3, Augment::Rot270.apply(&grid, 2, 3).0);
        let (twice, _, _) = Augment::Rot180.apply(&r2, 2, 3);
        assert_eq!(twice, grid);
        assert_eq!(Augment::HFlip.apply(&grid, 2, 3).0, vec![2, 1, 0, 5, 4, 3]);
        assert_eq!(Augment::VFlip.apply(&grid, 2, 3).0, vec![3, 4, 5, 0, 1, 2]);
    }

    #[test]
    fn augment_is_joint_and_count_preserving() {
        let (s, _) = generate_sample(&spec(), 0).unwrap();
        let mut rng = SeededRng::new(1);
        for _ in 0..12 {
            let a = augment(&s, &mut rng);
            let mut x = s.mask.clone();
            let mut y = a.mask.clone();
            x.sort();
            y.sort();
            assert_eq!(x, y);
            // the pixel carrying each label carries the same intensity
            let pairs = |t: &Sample| {
                let mut v: Vec<(usize, u64)> = t
                    .mask
                    .iter()
                    .zip(t.image.data())
                    .map(|(&l, &i)| (l, i.to_bits()))
                    .collect();
                v.sort();
                v
            };
            assert_eq!(pairs(&s), pairs(&a));
        }
        let r = Augment::Rot180.apply_sample(&Augment::Rot180.apply_sample(&s));
        assert_eq!(r, s);
    }

    #[test]
    fn collate_stacks_in_order() {
        let data = generate(&spec()).unwrap();
        let (x, labels) = collate(&[&data[1], &data[0]]).unwrap();
        assert_eq!(x.shape(), &[2, 1, 16, 16]);
        assert_eq!(&x.data()[..256], data[1].image.data());
        assert_eq!(&labels[256..], &data[0].mask[..]);
        assert!(collate(&[]).is_err());
    }

    #[test]
    fn spec_json_rejects_unknown_keys() {
        let mut v = serde_json::to_value(spec()).unwrap();
        let back: SynthSpec = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, spec());
        v["radius"] = 3.into();
        assert!(serde_json::from_value::<SynthSpec>(v).is_err());
    }
}
