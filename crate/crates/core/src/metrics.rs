//! Evaluation metrics: Dice overlap and the 95th-percentile Hausdorff
//! distance, per region, plus their aggregation into summary tables.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{labels_to_regions, Geometry, LabelMap, Region, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricConfig {
    /// Dice reported when both masks are empty.
    pub both_empty_dice: f64,
    /// HD95 reported when exactly one mask is empty; `None` uses the image
    /// diagonal in millimetres.
    pub empty_hd95: Option<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            both_empty_dice: 1.0,
            empty_hd95: None,
        }
    }
}

fn check_shapes(a: &Geometry, b: &Geometry) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch(format!(
            "mask shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

/// `2|P∩G| / (|P| + |G|)`, with `both_empty` when both masks are empty.
pub fn dice_score_with(pred: &Volume<bool>, gt: &Volume<bool>, both_empty: f64) -> Result<f64> {
    check_shapes(pred.geometry(), gt.geometry())?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        inter += (a && b) as usize;
        p += a as usize;
        g += b as usize;
    }
    if p + g == 0 {
        return Ok(both_empty);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

pub fn dice_score(pred: &Volume<bool>, gt: &Volume<bool>) -> Result<f64> {
    dice_score_with(pred, gt, MetricConfig::default().both_empty_dice)
}

/// Foreground voxels with at least one face neighbour that is background or
/// outside the volume.
pub fn boundary(mask: &Volume<bool>) -> Volume<bool> {
    let [d, h, w] = mask.shape();
    Volume::from_fn(*mask.geometry(), |i, j, k| {
        if !*mask.get(i, j, k) {
            return false;
        }
        if i == 0 || j == 0 || k == 0 || i + 1 == d || j + 1 == h || k + 1 == w {
            return true;
        }
        !(*mask.get(i - 1, j, k)
            && *mask.get(i + 1, j, k)
            && *mask.get(i, j - 1, k)
            && *mask.get(i, j + 1, k)
            && *mask.get(i, j, k - 1)
            && *mask.get(i, j, k + 1))
    })
}

/// 1D squared distance transform of sampled function `f` on a grid with
/// step `s` (lower envelope of parabolas).
fn edt_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let s2 = s * s;
    // first finite sample starts the envelope
    let Some(first) = f.iter().position(|x| x.is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    let mut k = 0;
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            // intersection of the parabolas rooted at q and p, in grid units
            let sx = ((f[q] + s2 * (q * q) as f64) - (f[p] + s2 * (p * p) as f64)) / (2.0 * s2 * (q - p) as f64);
            if sx <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if sx <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = sx;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = (q as f64 - v[k] as f64) * s;
        *o = dq * dq + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// `true` voxel of `features`, honouring anisotropic spacing. Infinite when
/// there are no features.
pub fn squared_distance_transform(features: &Volume<bool>) -> Vec<f64> {
    let [d, h, w] = features.shape();
    let sp = features.geometry().spacing;
    let mut g: Vec<f64> = features
        .data()
        .iter()
        .map(|&b| if b { 0.0 } else { f64::INFINITY })
        .collect();
    let n = d.max(h).max(w);
    let (mut line, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let dims = [d, h, w];
    let strides = [h * w, w, 1];
    for axis in 0..3 {
        let len = dims[axis];
        let stride = strides[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        for a in 0..dims[others[0]] {
            for b in 0..dims[others[1]] {
                let base = a * strides[others[0]] + b * strides[others[1]];
                for (t, l) in line[..len].iter_mut().enumerate() {
                    *l = g[base + t * stride];
                }
                edt_1d(&line[..len], sp[axis], &mut out[..len], &mut v, &mut z);
                for (t, &o) in out[..len].iter().enumerate() {
                    g[base + t * stride] = o;
                }
            }
        }
    }
    g
}

/// Nearest-rank percentile (`rank = ⌈q·n⌉`) of unsorted values.
pub fn nearest_rank_percentile(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let rank = ((q * values.len() as f64).ceil() as usize).clamp(1, values.len());
    Some(values[rank - 1])
}

fn directed_hd95(from: &Volume<bool>, to_dist: &[f64]) -> f64 {
    let mut d: Vec<f64> = from
        .data()
        .iter()
        .zip(to_dist)
        .filter(|(b, _)| **b)
        .map(|(_, d2)| d2.sqrt())
        .collect();
    nearest_rank_percentile(&mut d, 0.95).unwrap_or(0.0)
}

/// Symmetric 95th-percentile surface distance in millimetres, using the
/// spacing of `gt`.
pub fn hd95_with(pred: &Volume<bool>, gt: &Volume<bool>, config: &MetricConfig) -> Result<f64> {
    check_shapes(pred.geometry(), gt.geometry())?;
    let (np, ng) = (pred.count(), gt.count());
    match (np, ng) {
        (0, 0) => return Ok(0.0),
        (0, _) | (_, 0) => return Ok(config.empty_hd95.unwrap_or_else(|| gt.geometry().diagonal_mm())),
        _ => {}
    }
    let pred = pred.clone().with_spacing(gt.geometry().spacing)?;
    let (bp, bg) = (boundary(&pred), boundary(gt));
    let dist_to_g = squared_distance_transform(&bg);
    let dist_to_p = squared_distance_transform(&bp);
    Ok(directed_hd95(&bp, &dist_to_g).max(directed_hd95(&bg, &dist_to_p)))
}

pub fn hd95(pred: &Volume<bool>, gt: &Volume<bool>) -> Result<f64> {
    hd95_with(pred, gt, &MetricConfig::default())
}

/// Per-case scores in ET, TC, WT order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub dice: [f64; 3],
    pub hd95: [f64; 3],
}

pub fn evaluate_case(case_id: &str, pred: &LabelMap, gt: &LabelMap, config: &MetricConfig) -> Result<CaseMetrics> {
    check_shapes(pred.geometry(), gt.geometry())?;
    let (p, g) = (labels_to_regions(pred), labels_to_regions(gt));
    let mut dice = [0.0; 3];
    let mut hd = [0.0; 3];
    for (r, region) in Region::ALL.into_iter().enumerate() {
        dice[r] = dice_score_with(p.get(region), g.get(region), config.both_empty_dice)?;
        hd[r] = hd95_with(p.get(region), g.get(region), config)?;
    }
    Ok(CaseMetrics {
        case_id: case_id.to_string(),
        dice,
        hd95: hd,
    })
}

/// Per-region means over cases and the mean of those three means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cases: usize,
    pub dice: [f64; 3],
    pub dice_mean: f64,
    pub hd95: [f64; 3],
    pub hd95_mean: f64,
}

pub fn aggregate_report(cases: &[CaseMetrics]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::MissingInput("no cases to aggregate".into()));
    }
    let n = cases.len() as f64;
    let mean = |f: fn(&CaseMetrics) -> [f64; 3]| -> [f64; 3] {
        let mut acc = [0.0; 3];
        for c in cases {
            for (a, v) in acc.iter_mut().zip(f(c)) {
                *a += v;
            }
        }
        acc.map(|a| a / n)
    };
    Ok(report_from_means(cases.len(), mean(|c| c.dice), mean(|c| c.hd95)))
}

/// A report row from already-averaged region values.
pub fn report_from_means(cases: usize, dice: [f64; 3], hd95: [f64; 3]) -> EvalReport {
    EvalReport {
        cases,
        dice,
        dice_mean: dice.iter().sum::<f64>() / 3.0,
        hd95,
        hd95_mean: hd95.iter().sum::<f64>() / 3.0,
    }
}

pub const METRICS_HEADER: [&str; 7] = ["case_id", "dice_et", "dice_tc", "dice_wt", "hd95_et", "hd95_tc", "hd95_wt"];

#[derive(Serialize, Deserialize)]
struct MetricsRow {
    case_id: String,
    dice_et: f64,
    dice_tc: f64,
    dice_wt: f64,
    hd95_et: f64,
    hd95_tc: f64,
    hd95_wt: f64,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::MissingInput(format!("malformed metrics CSV: {other:?}")),
    }
}

/// Writes one row per case; values use the shortest exact decimal form.
pub fn write_metrics_csv(out: impl Write, cases: &[CaseMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in cases {
        w.serialize(MetricsRow {
            case_id: c.case_id.clone(),
            dice_et: c.dice[0],
            dice_tc: c.dice[1],
            dice_wt: c.dice[2],
            hd95_et: c.hd95[0],
            hd95_tc: c.hd95[1],
            hd95_wt: c.hd95[2],
        })
        .map_err(csv_err)?;
    }
    if cases.is_empty() {
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(input: impl Read) -> Result<Vec<CaseMetrics>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != METRICS_HEADER {
        return Err(Error::MissingInput(format!("unexpected metrics CSV header {header:?}")));
    }
    r.deserialize::<MetricsRow>()
        .map(|row| {
            let row = row.map_err(csv_err)?;
            Ok(CaseMetrics {
                case_id: row.case_id,
                dice: [row.dice_et, row.dice_tc, row.dice_wt],
                hd95: [row.hd95_et, row.hd95_tc, row.hd95_wt],
            })
        })
        .collect()
}

/// Plain-text table with one row per labelled report: Dice and HD95 for
/// ET, TC, WT and their mean.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(6);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:width$} | {:>6} {:>6} {:>6} {:>6} | {:>8} {:>8} {:>8} {:>8}",
        "Method", "ET", "TC", "WT", "Mean", "ET", "TC", "WT", "Mean"
    );
    let _ = writeln!(s, "{:width$} | {:^27} | {:^35}", "", "Dice Score", "Hausdorff Distance (95%)");
    for (label, r) in rows {
        let _ = writeln!(
            s,
            "{label:width$} | {:>6.3} {:>6.3} {:>6.3} {:>6.3} | {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            r.dice[0], r.dice[1], r.dice[2], r.dice_mean, r.hd95[0], r.hd95[1], r.hd95[2], r.hd95_mean
        );
    }
    s
}

/// CSV counterpart of [`format_table`].
pub fn summary_csv(rows: &[(String, EvalReport)]) -> String {
    let mut s = String::from("method,cases,dice_et,dice_tc,dice_wt,dice_mean,hd95_et,hd95_tc,hd95_wt,hd95_mean\n");
    for (label, r) in rows {
        let _ = writeln!(
            s,
            "{label},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.cases, r.dice[0], r.dice[1], r.dice[2], r.dice_mean, r.hd95[0], r.hd95[1], r.hd95[2], r.hd95_mean
        );
    }
    s
}
