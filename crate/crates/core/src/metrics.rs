//! Evaluation metrics on integer label maps: Dice, HD95 and the
//! confusion-table family (IoU, sensitivity, specificity, accuracy).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predicted and ground-truth label maps of equal size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub pred: Vec<usize>,
    pub truth: Vec<usize>,
}

impl MaskPair {
    pub fn new(height: usize, width: usize, num_classes: usize, pred: Vec<usize>, truth: Vec<usize>) -> Result<Self> {
        let n = height * width;
        if n == 0 || pred.len() != n || truth.len() != n {
            return Err(Error::dim("mask_pair", &[pred.len(), truth.len()], &[height, width]));
        }
        if let Some(&l) = pred.iter().chain(&truth).find(|&&l| l >= num_classes) {
            return Err(Error::Domain(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(MaskPair {
            height,
            width,
            num_classes,
            pred,
            truth,
        })
    }

    pub fn swapped(&self) -> MaskPair {
        MaskPair {
            pred: self.truth.clone(),
            truth: self.pred.clone(),
            ..self.clone()
        }
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes {
            return Err(Error::Domain(format!(
                "class {class} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceScore {
    pub value: f64,
    /// The class is absent from both masks; `value` is then 1.
    pub vacuous: bool,
}

/// `2|P ∩ T| / (|P| + |T|)`
pub fn dice_score(pair: &MaskPair, class: usize) -> Result<DiceScore> {
    let c = confusion(pair, class)?;
    let denom = 2 * c.tp + c.fp + c.fn_;
    Ok(if denom == 0 {
        DiceScore {
            value: 1.0,
            vacuous: true,
        }
    } else {
        DiceScore {
            value: (2 * c.tp) as f64 / denom as f64,
            vacuous: false,
        }
    })
}

/// Pixels of `class` with a 4-neighbour outside the class. The image
/// border counts as outside.
pub fn boundary(labels: &[usize], height: usize, width: usize, class: usize) -> Vec<(usize, usize)> {
    let inside = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && (y as usize) < height
            && (x as usize) < width
            && labels[y as usize * width + x as usize] == class
    };
    let mut out = vec![];
    for y in 0..height {
        for x in 0..width {
            let (yi, xi) = (y as isize, x as isize);
            if inside(yi, xi)
                && [(-1, 0), (1, 0), (0, -1), (0, 1)]
                    .iter()
                    .any(|(dy, dx)| !inside(yi + dy, xi + dx))
            {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared Euclidean distance from every pixel to the nearest
/// `seed` pixel: row-wise 1-D distances, then a column-wise minimum.
fn squared_distance_map(seeds: &[(usize, usize)], height: usize, width: usize) -> Vec<u64> {
    let far = (height + width) as u64;
    let mut row = vec![far; height * width];
    let mut seeded = vec![false; height * width];
    for &(y, x) in seeds {
        seeded[y * width + x] = true;
    }
    for y in 0..height {
        let r = &mut row[y * width..(y + 1) * width];
        let s = &seeded[y * width..(y + 1) * width];
        let mut last = None;
        for x in 0..width {
            if s[x] {
                last = Some(x);
            }
            if let Some(l) = last {
                r[x] = (x - l) as u64;
            }
        }
        let mut next = None;
        for x in (0..width).rev() {
            if s[x] {
                next = Some(x);
            }
            if let Some(n) = next {
                r[x] = r[x].min((n - x) as u64);
            }
        }
    }
    let mut out = vec![u64::MAX; height * width];
    for x in 0..width {
        for y in 0..height {
            let mut best = u64::MAX;
            for yy in 0..height {
                let d = row[yy * width + x];
                if d == far {
                    continue;
                }
                let dy = y.abs_diff(yy) as u64;
                best = best.min(dy * dy + d * d);
            }
            out[y * width + x] = best;
        }
    }
    out
}

/// Sorted distances from each point of `from` to the nearest point of `to`.
fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)], height: usize, width: usize) -> Vec<f64> {
    let dist = squared_distance_map(to, height, width);
    let mut d: Vec<f64> = from.iter().map(|&(y, x)| (dist[y * width + x] as f64).sqrt()).collect();
    d.sort_by(f64::total_cmp);
    d
}

/// Nearest-rank percentile of an ascending list: element `ceil(q/100 · n)`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Symmetric `q`-th percentile Hausdorff distance between the class
/// boundaries, in pixels. `None` when the class is empty in either mask.
pub fn hausdorff_percentile(pair: &MaskPair, class: usize, q: f64) -> Result<Option<f64>> {
    pair.check_class(class)?;
    let (h, w) = (pair.height, pair.width);
    let a = boundary(&pair.pred, h, w, class);
    let b = boundary(&pair.truth, h, w, class);
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let ab = nearest_rank(&directed_distances(&a, &b, h, w), q);
    let ba = nearest_rank(&directed_distances(&b, &a, h, w), q);
    Ok(Some(ab.max(ba)))
}

pub fn hausdorff95(pair: &MaskPair, class: usize) -> Result<Option<f64>> {
    hausdorff_percentile(pair, class, 95.0)
}

/// One-vs-rest confusion table of a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

pub fn confusion(pair: &MaskPair, class: usize) -> Result<Confusion> {
    pair.check_class(class)?;
    let mut c = Confusion {
        tp: 0,
        fp: 0,
        fn_: 0,
        tn: 0,
    };
    for (&p, &t) in pair.pred.iter().zip(&pair.truth) {
        match (p == class, t == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Ratios with a zero denominator are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub iou: Option<f64>,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub acc: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl Confusion {
    pub fn metrics(&self) -> ConfusionMetrics {
        let Confusion { tp, fp, fn_, tn } = *self;
        ConfusionMetrics {
            iou: ratio(tp, tp + fp + fn_),
            se: ratio(tp, tp + fn_),
            sp: ratio(tn, tn + fp),
            acc: ratio(tp + tn, tp + fp + fn_ + tn),
        }
    }
}

pub fn confusion_metrics(pair: &MaskPair, class: usize) -> Result<ConfusionMetrics> {
    Ok(confusion(pair, class)?.metrics())
}

/// Metrics of one class in one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCase {
    pub class: usize,
    pub in_truth: bool,
    pub dsc: f64,
    pub dsc_vacuous: bool,
    pub hd95: Option<f64>,
    #[serde(flatten)]
    pub confusion: ConfusionMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: usize,
    pub classes: Vec<ClassCase>,
}

/// Per-class means over the cases where the class occurs in the truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    pub dsc: Option<f64>,
    pub hd95: Option<f64>,
    pub iou: Option<f64>,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub acc: Option<f64>,
    /// Cases contributing to the means.
    pub cases: usize,
    /// Cases skipped because the class is absent from the truth.
    pub excluded_absent: usize,
    /// Contributing cases without an HD95 (class missing from the prediction).
    pub hd95_missing: usize,
}

/// Evaluation report. Means run over foreground classes (label ≥ 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub num_classes: usize,
    pub num_cases: usize,
    pub mean_dsc: Option<f64>,
    pub mean_hd95: Option<f64>,
    pub mean_iou: Option<f64>,
    pub mean_se: Option<f64>,
    pub mean_sp: Option<f64>,
    pub mean_acc: Option<f64>,
    pub classes: Vec<ClassSummary>,
    pub cases: Vec<CaseReport>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

pub fn evaluate_case(pair: &MaskPair, case: usize) -> Result<CaseReport> {
    let mut classes = Vec::with_capacity(pair.num_classes);
    for class in 0..pair.num_classes {
        let c = confusion(pair, class)?;
        let dice = dice_score(pair, class)?;
        classes.push(ClassCase {
            class,
            in_truth: c.tp + c.fn_ > 0,
            dsc: dice.value,
            dsc_vacuous: dice.vacuous,
            hd95: hausdorff95(pair, class)?,
            confusion: c.metrics(),
        });
    }
    Ok(CaseReport { case, classes })
}

pub fn evaluate(pairs: &[MaskPair]) -> Result<MetricReport> {
    let num_classes = pairs.first().map_or(0, |p| p.num_classes);
    if pairs.iter().any(|p| p.num_classes != num_classes) {
        return Err(Error::Config("cases disagree on class count".into()));
    }
    let cases = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| evaluate_case(p, i))
        .collect::<Result<Vec<_>>>()?;
    let classes: Vec<ClassSummary> = (0..num_classes)
        .map(|class| {
            let rows: Vec<&ClassCase> = cases.iter().map(|c| &c.classes[class]).filter(|r| r.in_truth).collect();
            ClassSummary {
                class,
                dsc: mean(rows.iter().map(|r| r.dsc)),
                hd95: mean(rows.iter().filter_map(|r| r.hd95)),
                iou: mean(rows.iter().filter_map(|r| r.confusion.iou)),
                se: mean(rows.iter().filter_map(|r| r.confusion.se)),
                sp: mean(rows.iter().filter_map(|r| r.confusion.sp)),
                acc: mean(rows.iter().filter_map(|r| r.confusion.acc)),
                cases: rows.len(),
                excluded_absent: cases.len() - rows.len(),
                hd95_missing: rows.iter().filter(|r| r.hd95.is_none()).count(),
            }
        })
        .collect();
    let fg = || classes.iter().skip(1);
    Ok(MetricReport {
        num_classes,
        num_cases: pairs.len(),
        mean_dsc: mean(fg().filter_map(|c| c.dsc)),
        mean_hd95: mean(fg().filter_map(|c| c.hd95)),
        mean_iou: mean(fg().filter_map(|c| c.iou)),
        mean_se: mean(fg().filter_map(|c| c.se)),
        mean_sp: mean(fg().filter_map(|c| c.sp)),
        mean_acc: mean(fg().filter_map(|c| c.acc)),
        classes,
        cases,
    })
}
