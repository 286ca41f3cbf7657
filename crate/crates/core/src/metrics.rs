//! Overlap and surface-distance segmentation metrics.
//!
//! A class absent from both masks scores 1 on the overlap metrics and has no
//! surface distances. The 95th percentile uses the nearest-rank rule on the
//! pooled sorted list of directed distances.

use std::fmt::Write as _;

use crate::error::{Error, Result};

fn check(pred: &[u8], gt: &[u8], h: usize, w: usize) -> Result<()> {
    if pred.len() != gt.len() || pred.len() != h * w {
        return Err(Error::dim(format!(
            "masks of {} and {} labels for a {h}x{w} grid",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

fn overlap(pred: &[u8], gt: &[u8], class: u8) -> (usize, usize, usize) {
    let (mut inter, mut p, mut g) = (0, 0, 0);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    (inter, p, g)
}

pub fn dice(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let (inter, p, g) = overlap(pred, gt, class);
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

pub fn iou(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let (inter, p, g) = overlap(pred, gt, class);
    let union = p + g - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pixels of `class` with at least one 8-neighbour outside the class; the
/// image border counts as outside.
pub fn boundary(mask: &[u8], h: usize, w: usize, class: u8) -> Vec<(usize, usize)> {
    let inside = |y: isize, x: isize| {
        y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] == class
    };
    let mut out = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !inside(y, x) {
                continue;
            }
            let edge = (-1..=1).any(|dy| (-1..=1).any(|dx| (dy, dx) != (0, 0) && !inside(y + dy, x + dx)));
            if edge {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

/// Squared distance from each point of `from` to its nearest point of `to`.
fn directed_sq(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<u64> {
    from.iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(v, u)| {
                    let dy = y.abs_diff(v) as u64;
                    let dx = x.abs_diff(u) as u64;
                    dy * dy + dx * dx
                })
                .min()
                .expect("non-empty target")
        })
        .collect()
}

fn pooled_sq(pred: &[u8], gt: &[u8], h: usize, w: usize, class: u8) -> Option<Vec<u64>> {
    let a = boundary(pred, h, w, class);
    let b = boundary(gt, h, w, class);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut d = directed_sq(&a, &b);
    d.extend(directed_sq(&b, &a));
    // sorted so every reduction is independent of argument order
    d.sort_unstable();
    Some(d)
}

/// 95th percentile of symmetric boundary distances, in pixels. `None` when
/// either mask lacks the class.
pub fn hd95(pred: &[u8], gt: &[u8], h: usize, w: usize, class: u8) -> Result<Option<f64>> {
    check(pred, gt, h, w)?;
    Ok(pooled_sq(pred, gt, h, w, class).map(|d| {
        let rank = (0.95 * d.len() as f64).ceil() as usize;
        (d[rank.max(1) - 1] as f64).sqrt()
    }))
}

/// Mean of symmetric boundary distances, in pixels.
pub fn assd(pred: &[u8], gt: &[u8], h: usize, w: usize, class: u8) -> Result<Option<f64>> {
    check(pred, gt, h, w)?;
    Ok(pooled_sq(pred, gt, h, w, class).map(|d| d.iter().map(|&v| (v as f64).sqrt()).sum::<f64>() / d.len() as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScores {
    pub dice: f64,
    pub iou: f64,
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
}

impl ClassScores {
    pub fn compute(pred: &[u8], gt: &[u8], h: usize, w: usize, class: u8) -> Result<Self> {
        check(pred, gt, h, w)?;
        Ok(Self {
            dice: dice(pred, gt, class),
            iou: iou(pred, gt, class),
            hd95: hd95(pred, gt, h, w, class)?,
            assd: assd(pred, gt, h, w, class)?,
        })
    }
}

/// Averages over clips for the foreground classes of one site.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub round: usize,
    pub site: String,
    /// Indexed by class minus one.
    pub per_class: Vec<ClassScores>,
    pub mean: ClassScores,
    pub clips: usize,
}

impl MetricReport {
    pub fn mean_dice(&self) -> f64 {
        self.mean.dice
    }

    /// Rows of `run_id,round,site,class,dice,iou,hd95,assd`.
    pub fn csv_rows(&self, run_id: &str) -> String {
        let mut out = String::new();
        let rows = self
            .per_class
            .iter()
            .enumerate()
            .map(|(i, s)| ((i + 1).to_string(), s))
            .chain(std::iter::once(("mean".to_string(), &self.mean)));
        for (class, s) in rows {
            let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{run_id},{},{},{class},{:.6},{:.6},{},{}",
                self.round,
                self.site,
                s.dice,
                s.iou,
                opt(s.hd95),
                opt(s.assd)
            );
        }
        out
    }
}

pub const CSV_HEADER: &str = "run_id,round,site,class,dice,iou,hd95,assd";

#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    classes: usize,
    h: usize,
    w: usize,
    clips: Vec<Vec<ClassScores>>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let present: Vec<f64> = values.flatten().collect();
    (!present.is_empty()).then(|| mean_of(present.into_iter()))
}

impl MetricAccumulator {
    pub fn new(classes: usize, h: usize, w: usize) -> Self {
        Self {
            classes,
            h,
            w,
            clips: Vec::new(),
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        let scores = (1..self.classes)
            .map(|c| ClassScores::compute(pred, gt, self.h, self.w, c as u8))
            .collect::<Result<Vec<_>>>()?;
        self.clips.push(scores);
        Ok(())
    }

    pub fn report(&self, round: usize, site: &str) -> Result<MetricReport> {
        if self.clips.is_empty() {
            return Err(Error::data(format!("no clips evaluated for {site}")));
        }
        let per_class: Vec<ClassScores> = (0..self.classes - 1)
            .map(|k| ClassScores {
                dice: mean_of(self.clips.iter().map(|c| c[k].dice)),
                iou: mean_of(self.clips.iter().map(|c| c[k].iou)),
                hd95: mean_opt(self.clips.iter().map(|c| c[k].hd95)),
                assd: mean_opt(self.clips.iter().map(|c| c[k].assd)),
            })
            .collect();
        let mean = ClassScores {
            dice: mean_of(per_class.iter().map(|s| s.dice)),
            iou: mean_of(per_class.iter().map(|s| s.iou)),
            hd95: mean_opt(per_class.iter().map(|s| s.hd95)),
            assd: mean_opt(per_class.iter().map(|s| s.assd)),
        };
        Ok(MetricReport {
            round,
            site: site.to_string(),
            per_class,
            mean,
            clips: self.clips.len(),
        })
    }
}

/// Per-pixel arg-max of `[pixels, classes]` logits.
pub fn argmax_labels(logits: &[f64], classes: usize) -> Vec<u8> {
    logits
        .chunks(classes)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}
