//! Deterministic synthetic detection scenes with a controllable rate of
//! inter-object occlusion. Scenes are pure functions of (spec, index); the
//! three dataset splits map to disjoint index ranges.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox};
use crate::scalar::Real;
use crate::tensor::rng::Rng;

/// IoU band that counts as an occluding pair.
pub const OCCLUSION_IOU_LO: f64 = 0.2;
pub const OCCLUSION_IOU_HI: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec<T: Real = f64> {
    pub image_side: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Box side lengths in pixels, drawn per dimension.
    pub min_size: T,
    pub max_size: T,
    /// Fraction of images that contain a pair of boxes with IoU in
    /// [0.2, 0.6].
    pub occlusion_rate: T,
    pub seed: u64,
}

impl<T: Real> Default for SceneSpec<T> {
    /// The "OccBench" benchmark: 64px grayscale, rectangles vs ellipses,
    /// heavy amodal occlusion.
    fn default() -> Self {
        SceneSpec {
            image_side: 64,
            num_classes: 2,
            min_objects: 1,
            max_objects: 3,
            min_size: T::c(12.0),
            max_size: T::c(40.0),
            occlusion_rate: T::c(0.7),
            seed: 42,
        }
    }
}

impl<T: Real> SceneSpec<T> {
    pub fn validate(&self) -> Result<()> {
        if self.image_side < 8 {
            return Err(Error::invalid("image_side must be at least 8"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::invalid("need 1 <= min_objects <= max_objects"));
        }
        let side = T::from_count(self.image_side);
        if self.min_size < T::one() || self.min_size > self.max_size || self.max_size > side {
            return Err(Error::invalid("need 1 <= min_size <= max_size <= image_side"));
        }
        if self.occlusion_rate < T::zero() || self.occlusion_rate > T::one() {
            return Err(Error::invalid("occlusion_rate must be in [0, 1]"));
        }
        if self.occlusion_rate > T::zero() {
            if self.max_objects < 2 {
                return Err(Error::invalid("occlusion needs max_objects >= 2"));
            }
            // the deterministic fallback shifts a max-size box by 0.3 of
            // its side and must stay inside the image
            if self.max_size.to_f64_lossy() * 1.3 > self.image_side as f64 {
                return Err(Error::invalid("occlusion needs 1.3 * max_size <= image_side"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene<T: Real = f64> {
    /// Row-major grayscale pixels in [0, 1], `image_side` squared of them;
    /// shape [1, 1, side, side] when uploaded to a tape.
    pub pixels: Vec<T>,
    pub image_side: usize,
    /// Amodal boxes: the full extent, including over-painted parts.
    pub gts: Vec<(BBox<T>, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    /// Splits draw from disjoint scene-index ranges.
    pub fn index_offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1_000_000,
            Split::Test => 2_000_000,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

const BG_INTENSITY: f64 = 0.08;
const NOISE_STD: f64 = 0.02;

fn class_intensity(class_id: usize) -> f64 {
    match class_id {
        1 => 0.9,
        2 => 0.6,
        m => 0.35 + 0.1 * ((m - 3) % 6) as f64,
    }
}

fn place_random(rng: &mut Rng, side: f64, lo: f64, hi: f64) -> BBox<f64> {
    let w = rng.uniform_in(lo, hi);
    let h = rng.uniform_in(lo, hi);
    let x1 = rng.uniform_in(0.0, side - w);
    let y1 = rng.uniform_in(0.0, side - h);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

fn clamp_into(b: &BBox<f64>, side: f64) -> BBox<f64> {
    let dx = (-b.x1).max(0.0) - (b.x2 - side).max(0.0);
    let dy = (-b.y1).max(0.0) - (b.y2 - side).max(0.0);
    BBox::new(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy)
}

/// A partner overlapping `first` with IoU in the occlusion band. Rejection
/// samples near the first box; the fallback shifts a copy of `first` by 0.3
/// of its own side (IoU 0.7/1.3, inside the band).
fn place_occluder(rng: &mut Rng, side: f64, lo: f64, hi: f64, first: &BBox<f64>) -> BBox<f64> {
    let (cx, cy) = first.center();
    for _ in 0..64 {
        let w = rng.uniform_in(lo, hi);
        let h = rng.uniform_in(lo, hi);
        let ox = rng.uniform_in(-(first.width() + w) / 2.0, (first.width() + w) / 2.0);
        let oy = rng.uniform_in(-(first.height() + h) / 2.0, (first.height() + h) / 2.0);
        let cand = clamp_into(
            &BBox::from_center(cx + ox, cy + oy, w, h),
            side,
        );
        let iou = iou_unchecked(first, &cand);
        if (OCCLUSION_IOU_LO..=OCCLUSION_IOU_HI).contains(&iou) {
            return cand;
        }
    }
    let shifts = [
        (0.3 * first.width(), 0.0),
        (-0.3 * first.width(), 0.0),
        (0.0, 0.3 * first.height()),
        (0.0, -0.3 * first.height()),
    ];
    for (dx, dy) in shifts {
        let cand = BBox::new(first.x1 + dx, first.y1 + dy, first.x2 + dx, first.y2 + dy);
        if cand.x1 >= 0.0 && cand.y1 >= 0.0 && cand.x2 <= side && cand.y2 <= side {
            return cand;
        }
    }
    // validate() guarantees one direction fits
    unreachable!("occlusion fallback requires 1.3 * max_size <= image_side");
}

/// A box overlapping every placed box with IoU below the occlusion band.
/// Retries at the sampled size, then at the minimum size where the IoU
/// against any larger box is bounded by the area ratio.
fn place_clear(rng: &mut Rng, side: f64, lo: f64, hi: f64, placed: &[BBox<f64>]) -> BBox<f64> {
    let clear = |cand: &BBox<f64>| {
        placed.iter().all(|b| iou_unchecked(b, cand) < OCCLUSION_IOU_LO)
    };
    for _ in 0..100 {
        let cand = place_random(rng, side, lo, hi);
        if clear(&cand) {
            return cand;
        }
    }
    let mut last = place_random(rng, side, lo, lo);
    for _ in 0..100 {
        last = place_random(rng, side, lo, lo);
        if clear(&last) {
            return last;
        }
    }
    last
}

fn render_object<T: Real>(
    pixels: &mut [T],
    side: usize,
    b: &BBox<f64>,
    class_id: usize,
    rng: &mut Rng,
) {
    let base = class_intensity(class_id);
    let ellipse = class_id == 2;
    let (cx, cy) = b.center();
    let (a2, b2) = ((b.width() / 2.0).powi(2), (b.height() / 2.0).powi(2));
    let r0 = (b.y1.floor().max(0.0)) as usize;
    let r1 = (b.y2.ceil().min(side as f64)) as usize;
    let c0 = (b.x1.floor().max(0.0)) as usize;
    let c1 = (b.x2.ceil().min(side as f64)) as usize;
    for r in r0..r1 {
        for c in c0..c1 {
            let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
            let inside = if ellipse {
                (x - cx).powi(2) / a2 + (y - cy).powi(2) / b2 <= 1.0
            } else {
                x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2
            };
            if inside {
                let v = (base + NOISE_STD * rng.normal()).clamp(0.0, 1.0);
                pixels[r * side + c] = T::c(v);
            }
        }
    }
}

/// Renders scene `index` of the spec's infinite deterministic sequence.
/// The spec must be valid (see [`SceneSpec::validate`]).
pub fn generate<T: Real>(spec: &SceneSpec<T>, index: u64) -> Scene<T> {
    let mut rng = Rng::derive(spec.seed, index);
    let side = spec.image_side as f64;
    let (lo, hi) = (spec.min_size.to_f64_lossy(), spec.max_size.to_f64_lossy());
    let m = spec.num_classes;

    let occlude = spec.max_objects >= 2 && rng.chance(spec.occlusion_rate.to_f64_lossy());
    let count_lo = if occlude { spec.min_objects.max(2) } else { spec.min_objects };
    let count = count_lo + rng.below(spec.max_objects - count_lo + 1);

    let mut boxes: Vec<BBox<f64>> = Vec::with_capacity(count);
    let mut classes: Vec<usize> = Vec::with_capacity(count);
    for i in 0..count {
        let b = if occlude && i == 1 {
            place_occluder(&mut rng, side, lo, hi, &boxes[0])
        } else if i == 0 {
            place_random(&mut rng, side, lo, hi)
        } else {
            place_clear(&mut rng, side, lo, hi, &boxes)
        };
        let class = if occlude && i == 1 && m >= 2 {
            // occluding pairs cross classes when possible
            let others = 1 + rng.below(m - 1);
            if others >= classes[0] { others + 1 } else { others }
        } else {
            1 + rng.below(m)
        };
        boxes.push(b);
        classes.push(class);
    }

    let n = spec.image_side * spec.image_side;
    let mut pixels: Vec<T> = Vec::with_capacity(n);
    for _ in 0..n {
        pixels.push(T::c((BG_INTENSITY + NOISE_STD * rng.normal()).clamp(0.0, 1.0)));
    }
    for (b, class) in boxes.iter().zip(&classes) {
        render_object(&mut pixels, spec.image_side, b, *class, &mut rng);
    }
    let gts = boxes
        .into_iter()
        .zip(classes)
        .map(|(b, c)| (BBox::new(T::c(b.x1), T::c(b.y1), T::c(b.x2), T::c(b.y2)), c))
        .collect();
    Scene { pixels, image_side: spec.image_side, gts }
}

pub fn dataset<T: Real>(
    spec: &SceneSpec<T>,
    count: usize,
) -> impl Iterator<Item = Scene<T>> + '_ {
    (0..count as u64).map(move |i| generate(spec, i))
}

/// Mirror left-right: pixel columns reverse, box x-extents reflect.
pub fn flip_horizontal<T: Real>(scene: &Scene<T>) -> Scene<T> {
    let side = scene.image_side;
    let mut pixels = Vec::with_capacity(scene.pixels.len());
    for r in 0..side {
        for c in 0..side {
            pixels.push(scene.pixels[r * side + (side - 1 - c)]);
        }
    }
    let w = T::from_count(side);
    let gts = scene
        .gts
        .iter()
        .map(|(b, class)| (BBox::new(w - b.x2, b.y1, w - b.x1, b.y2), *class))
        .collect();
    Scene { pixels, image_side: side, gts }
}

/// Scene `i` of a split; splits never share indices.
pub fn split_scene<T: Real>(spec: &SceneSpec<T>, split: Split, i: usize) -> Scene<T> {
    generate(spec, split.index_offset() + i as u64)
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm<T: Real>(path: &Path, pixels: &[T], side: usize) -> Result<()> {
    if pixels.len() != side * side {
        return Err(Error::invalid("pixel count does not match image side"));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P5\n{side} {side}\n255\n")?;
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|p| (p.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

/// Materializes a split under `dir/<split>/`: one PGM per image plus an
/// `annotations.csv` of image_id,class_id,x1,y1,x2,y2 rows. Returns the
/// total ground-truth count.
pub fn dump_split<T: Real>(
    spec: &SceneSpec<T>,
    split: Split,
    count: usize,
    dir: &Path,
) -> Result<usize> {
    let split_dir = dir.join(split.dir_name());
    std::fs::create_dir_all(&split_dir)?;
    let mut ann = BufWriter::new(std::fs::File::create(split_dir.join("annotations.csv"))?);
    writeln!(ann, "image_id,class_id,x1,y1,x2,y2")?;
    let mut total = 0usize;
    for i in 0..count {
        let scene = split_scene(spec, split, i);
        write_pgm(&split_dir.join(format!("img_{i:05}.pgm")), &scene.pixels, scene.image_side)?;
        for (b, c) in &scene.gts {
            writeln!(
                ann,
                "{i},{c},{:.6},{:.6},{:.6},{:.6}",
                b.x1.to_f64_lossy(),
                b.y1.to_f64_lossy(),
                b.x2.to_f64_lossy(),
                b.y2.to_f64_lossy(),
            )?;
            total += 1;
        }
    }
    ann.flush()?;
    Ok(total)
}
