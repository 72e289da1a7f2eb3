//! Task metrics, rate-distortion curves and Bjontegaard-delta rate.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};

/// Shannon entropy, in bits per symbol, of the empirical level histogram.
pub fn entropy_bits(levels: &[u16]) -> f64 {
    if levels.is_empty() {
        return 0.0;
    }
    let mut counts = vec![0u32; *levels.iter().max().unwrap() as usize + 1];
    for &l in levels {
        counts[l as usize] += 1;
    }
    let n = levels.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    // Avoid reporting -0 for a single symbol.
    h.max(0.0)
}

/// Peak signal-to-noise ratio in dB; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!("psnr on {} and {} samples", a.len(), b.len())));
    }
    if !(peak > 0.0) {
        return Err(Error::contract("psnr peak must be positive"));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Mean over the classes present in `gt` of |pred ∩ gt| / |pred ∪ gt|.
pub fn miou(pred: &[usize], gt: &[usize], classes: usize) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(format!("miou on {} and {} labels", pred.len(), gt.len())));
    }
    if pred.iter().chain(gt).any(|&l| l >= classes) {
        return Err(Error::contract(format!("label out of range for {classes} classes")));
    }
    let mut inter = vec![0usize; classes];
    let mut pred_count = vec![0usize; classes];
    let mut gt_count = vec![0usize; classes];
    for (&p, &g) in pred.iter().zip(gt) {
        pred_count[p] += 1;
        gt_count[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    let (mut sum, mut present) = (0.0, 0);
    for c in 0..classes {
        if gt_count[c] == 0 {
            continue;
        }
        let union = pred_count[c] + gt_count[c] - inter[c];
        sum += inter[c] as f64 / union as f64;
        present += 1;
    }
    Ok(sum / present as f64)
}

/// Lower clamp applied to predicted disparities before inversion.
pub const IRMSE_EPS: f64 = 1e-3;

/// Root-mean-square error between elementwise inverses of disparity maps.
/// Lower is better.
pub fn irmse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::shape(format!("irmse on {} and {} samples", pred.len(), gt.len())));
    }
    if gt.iter().any(|&g| !(g > 0.0)) {
        return Err(Error::contract("ground-truth disparity must be positive"));
    }
    let sq: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let d = 1.0 / p.max(IRMSE_EPS) - 1.0 / g;
            d * d
        })
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MetricKind {
    MIoU,
    Irmse,
    Psnr,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::MIoU, MetricKind::Irmse, MetricKind::Psnr];

    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::Irmse)
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MetricKind::MIoU => "mIoU",
            MetricKind::Irmse => "IRMSE",
            MetricKind::Psnr => "PSNR",
        })
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mIoU" => Ok(MetricKind::MIoU),
            "IRMSE" => Ok(MetricKind::Irmse),
            "PSNR" => Ok(MetricKind::Psnr),
            _ => Err(Error::data(format!("unknown metric kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RdPoint {
    pub codec: String,
    pub quality: Option<u32>,
    pub bpfe: f64,
    pub kind: MetricKind,
    pub metric: f64,
}

/// Points of one metric kind, sorted by increasing BPFE.
#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    kind: MetricKind,
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(kind: MetricKind, mut points: Vec<RdPoint>) -> Result<Self> {
        if points.iter().any(|p| p.kind != kind) {
            return Err(Error::data("RD curve mixes metric kinds"));
        }
        if points.iter().any(|p| !(p.bpfe > 0.0) || !p.bpfe.is_finite()) {
            return Err(Error::data("RD point bpfe must be finite and positive"));
        }
        points.sort_by(|a, b| a.bpfe.total_cmp(&b.bpfe));
        if points.windows(2).any(|w| w[0].bpfe == w[1].bpfe) {
            return Err(Error::data("RD curve has repeated bpfe values"));
        }
        Ok(Self { kind, points })
    }

    /// Builds a curve from `(bpfe, metric)` pairs.
    pub fn from_pairs(kind: MetricKind, pairs: &[(f64, f64)]) -> Result<Self> {
        let points = pairs
            .iter()
            .map(|&(bpfe, metric)| RdPoint { codec: String::new(), quality: None, bpfe, kind, metric })
            .collect();
        Self::new(kind, points)
    }

    pub fn kind(&self) -> MetricKind {
        self.kind
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    /// Points usable for fitting: finite metric, metric axis oriented so that
    /// larger is better. Returns `(quality_axis, log2_rate)`.
    fn fit_data(&self) -> (Vec<f64>, Vec<f64>) {
        let sign = if self.kind.higher_is_better() { 1.0 } else { -1.0 };
        self.points
            .iter()
            .filter(|p| p.metric.is_finite())
            .map(|p| (sign * p.metric, p.bpfe.log2()))
            .unzip()
    }
}

/// Least-squares cubic in a normalized variable `u = (x − center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cubic {
    pub coeffs: [f64; 4],
    pub center: f64,
    pub scale: f64,
}

impl Cubic {
    pub fn eval(&self, x: f64) -> f64 {
        let u = (x - self.center) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * u + c)
    }

    /// Exact integral over `[a, b]` in the original variable.
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        let anti = |x: f64| {
            let u = (x - self.center) / self.scale;
            self.coeffs.iter().enumerate().rev().fold(0.0, |acc, (k, &c)| acc * u + c / (k + 1) as f64) * u
        };
        self.scale * (anti(b) - anti(a))
    }
}

/// Fits `y ≈ c₀ + c₁u + c₂u² + c₃u³` by Householder QR.
pub fn fit_cubic(x: &[f64], y: &[f64]) -> Result<Cubic> {
    let n = x.len();
    if n != y.len() || n < 4 {
        return Err(Error::Eval(format!("cubic fit needs >= 4 points, got {n}")));
    }
    let center = x.iter().sum::<f64>() / n as f64;
    let spread = x.iter().map(|v| (v - center).abs()).fold(0.0, f64::max);
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(Error::Eval("cubic fit: metric values are all equal".into()));
    }
    let scale = spread;
    // Column-major n×4 Vandermonde.
    let mut a: Vec<[f64; 4]> = x
        .iter()
        .map(|&v| {
            let u = (v - center) / scale;
            [1.0, u, u * u, u * u * u]
        })
        .collect();
    let mut b = y.to_vec();
    let mut rdiag = [0.0; 4];
    for k in 0..4 {
        let norm = (k..n).map(|i| a[i][k] * a[i][k]).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Eval("cubic fit is rank deficient".into()));
        }
        let alpha = if a[k][k] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (k..n).map(|i| a[i][k]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        if vnorm2 > 0.0 {
            for j in k..4 {
                let dot: f64 = (k..n).map(|i| v[i - k] * a[i][j]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..n {
                    a[i][j] -= f * v[i - k];
                }
            }
            let dot: f64 = (k..n).map(|i| v[i - k] * b[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                b[i] -= f * v[i - k];
            }
        }
        rdiag[k] = a[k][k];
    }
    let max_diag = rdiag.iter().fold(0.0f64, |m, d| m.max(d.abs()));
    if rdiag.iter().any(|d| d.abs() < 1e-10 * max_diag) {
        return Err(Error::Eval("cubic fit is rank deficient".into()));
    }
    let mut coeffs = [0.0; 4];
    for k in (0..4).rev() {
        let s: f64 = (k + 1..4).map(|j| a[k][j] * coeffs[j]).sum();
        coeffs[k] = (b[k] - s) / a[k][k];
    }
    Ok(Cubic { coeffs, center, scale })
}

/// Bjontegaard-delta rate of `test` against `reference`, in percent.
/// Negative values mean `test` needs fewer bits for the same quality.
pub fn bd_rate(reference: &RdCurve, test: &RdCurve) -> Result<f64> {
    Ok((bd_log2_delta(reference, test)?.exp2() - 1.0) * 100.0)
}

/// Average `log₂` rate difference (test − reference) over the common quality interval.
pub fn bd_log2_delta(reference: &RdCurve, test: &RdCurve) -> Result<f64> {
    if reference.kind != test.kind {
        return Err(Error::Eval(format!("cannot compare {} with {}", reference.kind, test.kind)));
    }
    let (rx, ry) = reference.fit_data();
    let (tx, ty) = test.fit_data();
    let lo = min_of(&rx).max(min_of(&tx));
    let hi = max_of(&rx).min(max_of(&tx));
    if !(hi > lo) {
        return Err(Error::Eval("RD curves have no overlapping quality range".into()));
    }
    let fr = fit_cubic(&rx, &ry)?;
    let ft = fit_cubic(&tx, &ty)?;
    Ok((ft.integral(lo, hi) - fr.integral(lo, hi)) / (hi - lo))
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub const RD_CSV_HEADER: &str = "codec,quality,bpfe,metric_kind,metric";

/// Renders points as CSV with header `codec,quality,bpfe,metric_kind,metric`.
pub fn write_rd_csv(points: &[RdPoint]) -> String {
    let mut out = String::from(RD_CSV_HEADER);
    out.push('\n');
    for p in points {
        let q = p.quality.map(|q| q.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{},{}", p.codec, q, p.bpfe, p.kind, p.metric).unwrap();
    }
    out
}

pub fn parse_rd_csv(text: &str) -> Result<Vec<RdPoint>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == RD_CSV_HEADER => {}
        _ => return Err(Error::data(format!("RD CSV must start with `{RD_CSV_HEADER}`"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::data(format!("RD CSV row {}: {line:?}", i + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(RdPoint {
                codec: f[0].to_string(),
                quality: if f[1].is_empty() { None } else { Some(f[1].parse().map_err(|_| bad())?) },
                bpfe: f[2].parse().map_err(|_| bad())?,
                kind: f[3].parse()?,
                metric: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Groups points into one curve per metric kind (in [`MetricKind::ALL`] order).
pub fn curves_by_kind(points: &[RdPoint]) -> Result<Vec<RdCurve>> {
    MetricKind::ALL
        .iter()
        .filter(|k| points.iter().any(|p| p.kind == **k))
        .map(|&k| RdCurve::new(k, points.iter().filter(|p| p.kind == k).cloned().collect()))
        .collect()
}

/// A matplotlib script that plots every `(label, csv file)` series, one panel per metric.
pub fn plot_script(series: &[(&str, &str)]) -> String {
    let mut s = String::from(
        "#!/usr/bin/env python3\n\
         # Task metric vs. bits per feature element.\n\
         import csv\nimport matplotlib\nmatplotlib.use('Agg')\nimport matplotlib.pyplot as plt\n\n\
         SERIES = [\n",
    );
    for (label, path) in series {
        writeln!(s, "    ({label:?}, {path:?}),").unwrap();
    }
    s.push_str(
        "]\n\nfig, axes = plt.subplots(1, 3, figsize=(15, 4))\n\
         for ax, kind in zip(axes, ['mIoU', 'IRMSE', 'PSNR']):\n\
         \x20   for label, path in SERIES:\n\
         \x20       rows = [r for r in csv.DictReader(open(path)) if r['metric_kind'] == kind]\n\
         \x20       rows.sort(key=lambda r: float(r['bpfe']))\n\
         \x20       ax.plot([float(r['bpfe']) for r in rows], [float(r['metric']) for r in rows], 'o-', label=label)\n\
         \x20   ax.set_xlabel('BPFE')\n\
         \x20   ax.set_ylabel(kind)\n\
         \x20   ax.legend()\n\
         fig.tight_layout()\nfig.savefig('rd_curves.png', dpi=120)\n",
    );
    s
}

/// Text table of BD-rates: one row per encoder, one column per task metric.
pub fn format_bd_table(rows: &[(String, [Option<f64>; 3])]) -> String {
    let mut out = String::new();
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(24);
    write!(out, "{:<label_w$}", "BD-rate vs. benchmark").unwrap();
    for kind in MetricKind::ALL {
        write!(out, " {:>10}", kind.to_string()).unwrap();
    }
    out.push('\n');
    for (label, vals) in rows {
        write!(out, "{label:<label_w$}").unwrap();
        for v in vals {
            match v {
                Some(v) => write!(out, " {:>10}", format!("{v:.2}%")).unwrap(),
                None => write!(out, " {:>10}", "n/a").unwrap(),
            }
        }
        out.push('\n');
    }
    out
}
