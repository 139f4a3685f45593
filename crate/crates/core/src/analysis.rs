//! Diagnostics over a frozen model: how regression moves anchor IoU, and how
//! classification scores track localization quality. Sample values are
//! quantized to 6 decimals at collection time so the emitted CSVs are the
//! exact population the statistics describe.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::anchors::generate_anchors;
use crate::config::ExperimentConfig;
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, BBox, Offsets};
use crate::inference::decode_detections;
use crate::scalar::Real;
use crate::synthdata::{split_scene, Split};
use crate::targets::refine_anchors;

/// Round-trips through the 6-decimal text form used by every dump.
pub fn quantize6<T: Real>(x: T) -> T {
    T::c(format!("{:.6}", x.to_f64_lossy()).parse::<f64>().expect("formatted float"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bin<T: Real = f64> {
    pub count: usize,
    pub mean: T,
    /// Population standard deviation.
    pub std: T,
}

/// Statistics of a value binned by a key in [0, 1]. Empty bins stay None.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStats<T: Real = f64> {
    pub width: T,
    pub bins: Vec<Option<Bin<T>>>,
}

pub const DEFAULT_BIN_WIDTH: f64 = 0.05;

impl<T: Real> BinStats<T> {
    /// Bins `(key, value)` samples; keys outside [0, 1] clamp to the edge
    /// bins (a key of exactly 1.0 lands in the last bin).
    pub fn from_samples(samples: &[(T, T)], width: T) -> Result<Self> {
        let w = width.to_f64_lossy();
        if !(w > 0.0 && w <= 1.0) {
            return Err(Error::invalid("bin width must be in (0, 1]"));
        }
        let nbins = (1.0 / w).ceil() as usize;
        let mut sums = vec![(0usize, 0.0f64, 0.0f64); nbins];
        for (key, value) in samples {
            let idx = ((key.to_f64_lossy() / w).floor() as isize).clamp(0, nbins as isize - 1);
            let slot = &mut sums[idx as usize];
            let v = value.to_f64_lossy();
            slot.0 += 1;
            slot.1 += v;
            slot.2 += v * v;
        }
        let bins = sums
            .into_iter()
            .map(|(count, s, s2)| {
                (count > 0).then(|| {
                    let mean = s / count as f64;
                    let var = (s2 / count as f64 - mean * mean).max(0.0);
                    Bin { count, mean: T::c(mean), std: T::c(var.sqrt()) }
                })
            })
            .collect();
        Ok(BinStats { width, bins })
    }

    pub fn total_count(&self) -> usize {
        self.bins.iter().flatten().map(|b| b.count).sum()
    }

    /// The bin covering `key`, if it has samples.
    pub fn bin_for(&self, key: T) -> Option<&Bin<T>> {
        let w = self.width.to_f64_lossy();
        let idx =
            ((key.to_f64_lossy() / w).floor() as isize).clamp(0, self.bins.len() as isize - 1);
        self.bins[idx as usize].as_ref()
    }
}

/// Per-anchor (IoU before, IoU after) against the nearest gt, where nearest
/// means argmax IoU and is recomputed for the refined box. `refined[i]` is
/// anchor i after regression; pass the gt boxes themselves to model a
/// perfect regressor.
pub fn iou_shift_pairs<T: Real>(
    anchors: &[BBox<T>],
    refined: &[BBox<T>],
    gts: &[(BBox<T>, usize)],
) -> Result<Vec<(T, T)>> {
    if anchors.len() != refined.len() {
        return Err(Error::invalid(format!(
            "{} anchors vs {} refined boxes",
            anchors.len(),
            refined.len()
        )));
    }
    if gts.is_empty() {
        return Ok(Vec::new());
    }
    let best = |b: &BBox<T>| {
        gts.iter()
            .map(|(g, _)| iou_unchecked(g, b))
            .fold(T::zero(), |acc, v| if v > acc { v } else { acc })
    };
    Ok(anchors.iter().zip(refined).map(|(a, r)| (best(a), best(r))).collect())
}

fn offset_rows<T: Real>(flat: &[T]) -> Vec<Offsets<T>> {
    flat.chunks_exact(4)
        .map(|c| Offsets { tx: c[0], ty: c[1], tw: c[2], th: c[3] })
        .collect()
}

/// (before, after) pairs over a whole split using the model's first-stage
/// regression, full precision.
pub fn iou_shift_on_split<T: Real>(
    model: &DetectorModel<T>,
    config: &ExperimentConfig<T>,
    split: Split,
    count: usize,
) -> Result<Vec<(T, T)>> {
    let side = config.scene.image_side;
    let anchor_set = generate_anchors(&config.anchors, side, side)?;
    let mut pairs = Vec::new();
    for i in 0..count {
        let scene = split_scene(&config.scene, split, i);
        let outputs = model.forward_image(&scene.pixels, side, side)?;
        let refined =
            refine_anchors(&anchor_set.boxes, &offset_rows(&outputs.offsets_stage1.value()))?;
        pairs.extend(iou_shift_pairs(&anchor_set.boxes, &refined, &scene.gts)?);
    }
    Ok(pairs)
}

/// (IoU with best gt, score) for every post-threshold, pre-NMS detection of
/// a split, full precision. The best gt is class-blind: the pairing measures
/// localization only.
pub fn score_iou_samples_on_split<T: Real>(
    model: &DetectorModel<T>,
    config: &ExperimentConfig<T>,
    split: Split,
    count: usize,
) -> Result<Vec<(T, T)>> {
    let side = config.scene.image_side;
    let anchor_set = generate_anchors(&config.anchors, side, side)?;
    let mut samples = Vec::new();
    for i in 0..count {
        let scene = split_scene(&config.scene, split, i);
        let outputs = model.forward_image(&scene.pixels, side, side)?;
        let dets = decode_detections(&outputs, &anchor_set, &config.inference, side, side)?;
        for d in dets {
            let iou = scene
                .gts
                .iter()
                .map(|(g, _)| iou_unchecked(g, &d.bbox))
                .fold(T::zero(), |acc, v| if v > acc { v } else { acc });
            samples.push((iou, d.score));
        }
    }
    Ok(samples)
}

/// The two conditional-statistics tables: score binned by detection IoU, and
/// post-regression IoU binned by pre-regression IoU. Samples are quantized
/// to the dump precision before binning.
pub fn score_vs_iou_on_split<T: Real>(
    model: &DetectorModel<T>,
    config: &ExperimentConfig<T>,
    split: Split,
    count: usize,
) -> Result<(BinStats<T>, BinStats<T>)> {
    let width = T::c(DEFAULT_BIN_WIDTH);
    let score_samples = quantize_pairs(&score_iou_samples_on_split(model, config, split, count)?);
    let shift_pairs = quantize_pairs(&iou_shift_on_split(model, config, split, count)?);
    Ok((
        BinStats::from_samples(&score_samples, width)?,
        BinStats::from_samples(&shift_pairs, width)?,
    ))
}

pub fn quantize_pairs<T: Real>(pairs: &[(T, T)]) -> Vec<(T, T)> {
    pairs.iter().map(|(a, b)| (quantize6(*a), quantize6(*b))).collect()
}

/// Two-column sample dump at 6 decimals; `header` names the columns.
pub fn write_samples_csv<T: Real>(path: &Path, header: &str, rows: &[(T, T)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{header}")?;
    for (a, b) in rows {
        writeln!(w, "{:.6},{:.6}", a.to_f64_lossy(), b.to_f64_lossy())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_csv<T: Real>(path: &Path) -> Result<Vec<(T, T)>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let (a, b) = line.split_once(',').ok_or_else(|| {
            Error::invalid(format!("{}:{}: expected two columns", path.display(), lineno + 1))
        })?;
        let parse = |s: &str| -> Result<T> {
            s.trim()
                .parse::<f64>()
                .map(T::c)
                .map_err(|_| Error::invalid(format!("bad number {s:?} in {}", path.display())))
        };
        out.push((parse(a)?, parse(b)?));
    }
    Ok(out)
}

/// `bin_lo,bin_hi,count,mean,std` rows for non-empty bins only.
pub fn write_binstats_csv<T: Real>(path: &Path, stats: &BinStats<T>) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "bin_lo,bin_hi,count,mean,std")?;
    let width = stats.width.to_f64_lossy();
    for (i, bin) in stats.bins.iter().enumerate() {
        if let Some(b) = bin {
            writeln!(
                w,
                "{:.2},{:.2},{},{},{}",
                i as f64 * width,
                ((i + 1) as f64 * width).min(1.0),
                b.count,
                b.mean.to_f64_lossy(),
                b.std.to_f64_lossy(),
            )?;
        }
    }
    w.flush()?;
    Ok(())
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 480.0;
const MARGIN: f64 = 56.0;

fn svg_header(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" \
         viewBox=\"0 0 {SVG_W} {SVG_H}\">\n"
    ));
    s.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{SVG_W}\" height=\"{SVG_H}\" fill=\"white\"/>\n"
    ));
    let (x0, y0, x1, y1) = (MARGIN, SVG_H - MARGIN, SVG_W - MARGIN, MARGIN);
    s.push_str(&format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        SVG_W / 2.0
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">{x_label}</text>\n",
        SVG_W / 2.0,
        SVG_H - 16.0
    ));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\" \
         transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        SVG_H / 2.0,
        SVG_H / 2.0
    ));
    for tick in 0..=4 {
        let f = tick as f64 / 4.0;
        let tx = MARGIN + f * (SVG_W - 2.0 * MARGIN);
        let ty = SVG_H - MARGIN - f * (SVG_H - 2.0 * MARGIN);
        s.push_str(&format!(
            "<text x=\"{tx:.1}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{f:.2}</text>\n",
            SVG_H - MARGIN + 16.0
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{ty:.1}\" text-anchor=\"end\" font-size=\"10\">{f:.2}</text>\n",
            MARGIN - 8.0
        ));
    }
    s
}

fn to_px(x: f64, y: f64) -> (f64, f64) {
    (
        MARGIN + x.clamp(0.0, 1.0) * (SVG_W - 2.0 * MARGIN),
        SVG_H - MARGIN - y.clamp(0.0, 1.0) * (SVG_H - 2.0 * MARGIN),
    )
}

/// Self-contained scatter plot over the unit square.
pub fn scatter_svg<T: Real>(
    points: &[(T, T)],
    title: &str,
    x_label: &str,
    y_label: &str,
) -> String {
    let mut s = svg_header(title, x_label, y_label);
    for (x, y) in points {
        let (px, py) = to_px(x.to_f64_lossy(), y.to_f64_lossy());
        s.push_str(&format!(
            "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"2\" fill=\"steelblue\" \
             fill-opacity=\"0.5\"/>\n"
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Bin means as a polyline with one-std whiskers, over the unit square.
pub fn bin_means_svg<T: Real>(
    stats: &BinStats<T>,
    title: &str,
    x_label: &str,
    y_label: &str,
) -> String {
    let mut s = svg_header(title, x_label, y_label);
    let width = stats.width.to_f64_lossy();
    let mut line = String::new();
    for (i, bin) in stats.bins.iter().enumerate() {
        if let Some(b) = bin {
            let cx = (i as f64 + 0.5) * width;
            let mean = b.mean.to_f64_lossy();
            let std = b.std.to_f64_lossy();
            let (px, py) = to_px(cx, mean);
            let (_, phi) = to_px(cx, mean + std);
            let (_, plo) = to_px(cx, mean - std);
            s.push_str(&format!(
                "<line x1=\"{px:.1}\" y1=\"{plo:.1}\" x2=\"{px:.1}\" y2=\"{phi:.1}\" \
                 stroke=\"gray\"/>\n"
            ));
            s.push_str(&format!(
                "<circle cx=\"{px:.1}\" cy=\"{py:.1}\" r=\"3\" fill=\"firebrick\"/>\n"
            ));
            line.push_str(&format!("{px:.1},{py:.1} "));
        }
    }
    if !line.is_empty() {
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"firebrick\"/>\n",
            line.trim_end()
        ));
    }
    s.push_str("</svg>\n");
    s
}
