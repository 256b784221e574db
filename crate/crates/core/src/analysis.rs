use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use featlens_tensor::Tensor;

use crate::data::{apply_transform, batch_tensor, CanvasPolicy, Dataset, Image};
use crate::error::{Error, Result};
use crate::host::FrozenHost;
use crate::lens::{apply_lens_pipeline, argmax, content_window, Lens, LensRegistry, RotationClassifier, Selection};
use crate::train::Xlayer;
use crate::transform::{LensBin, TransformSpec};

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
struct Sum {
    total: f64,
    comp: f64,
}

impl Sum {
    fn add(&mut self, v: f64) {
        let t = self.total + v;
        if self.total.abs() >= v.abs() {
            self.comp += (self.total - t) + v;
        } else {
            self.comp += (v - t) + self.total;
        }
        self.total = t;
    }

    fn value(&self) -> f64 {
        self.total + self.comp
    }
}

fn mean(v: &[f64]) -> f64 {
    let mut s = Sum::default();
    v.iter().for_each(|&x| s.add(x));
    s.value() / v.len() as f64
}

/// Sample Pearson correlation. Errors on unequal lengths, fewer than two
/// values, or a zero-variance argument.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::config(format!(
            "pearson needs two equal-length vectors of at least 2 values, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (Sum::default(), Sum::default(), Sum::default());
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab.add(dx * dy);
        saa.add(dx * dx);
        sbb.add(dy * dy);
    }
    let (saa, sbb) = (saa.value(), sbb.value());
    if saa <= 0.0 || sbb <= 0.0 {
        return Err(Error::Degenerate("pearson"));
    }
    Ok((sab.value() / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationEntry {
    pub label: String,
    /// Mean over images of r between flattened C x h x w maps.
    pub whole_r: f64,
    /// Mean over images of r between pooled C-length vectors.
    pub channel_r: f64,
    pub samples: usize,
    /// Images dropped because one side had zero variance.
    pub skipped: usize,
}

/// Brings block features of a transformed input back onto the original
/// grid: quarter turns are undone exactly, padded downscalings are cropped
/// to their content window and resized bilinearly.
pub fn align_features(features: &Tensor, spec: &TransformSpec, host: &FrozenHost) -> Result<Tensor> {
    match *spec {
        TransformSpec::Identity => Ok(features.clone()),
        TransformSpec::Rotation { angle_deg } => {
            let k = spec.quarter_turns().ok_or(Error::UnbinnedAngle(angle_deg))?;
            Ok(features.rot90((4 - k) % 4)?)
        }
        TransformSpec::Scaling { scale } => {
            let cfg = host.config();
            let feat = cfg.feature_hw();
            let (t, l, h, w) = content_window(feat, cfg.input_hw, scale);
            Ok(features.crop(t, l, h, w)?.resize_bilinear(feat)?)
        }
    }
}

fn per_image_pairs(x: &Tensor, y: &Tensor, whole: &mut Vec<f64>, channel: &mut Vec<f64>, skipped: &mut usize) -> Result<()> {
    let (n, c, h, w) = x.dims4()?;
    let per = c * h * w;
    for i in 0..n {
        let a: Vec<f64> = x.data()[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = y.data()[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
        let pool = |v: &[f64]| -> Vec<f64> { v.chunks(h * w).map(mean).collect() };
        match (pearson(&a, &b), pearson(&pool(&a), &pool(&b))) {
            (Ok(r1), Ok(r2)) => {
                whole.push(r1);
                channel.push(r2);
            }
            (Err(Error::Degenerate(_)), _) | (_, Err(Error::Degenerate(_))) => *skipped += 1,
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(())
}

fn correlate(
    host: &FrozenHost,
    data: &Dataset,
    spec: &TransformSpec,
    batch: usize,
    label: String,
    reconstruct: impl Fn(&crate::host::Taps) -> Result<Tensor>,
) -> Result<CorrelationEntry> {
    let hw = host.config().input_hw;
    let (mut whole, mut channel, mut skipped) = (Vec::new(), Vec::new(), 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let originals: Vec<Image> = chunk.iter().map(|&i| data.input_image(i, hw)).collect::<Result<_>>()?;
        let moved: Vec<Image> = originals
            .iter()
            .map(|im| apply_transform(im, spec, CanvasPolicy::PadToCanvas))
            .collect::<Result<_>>()?;
        let (_, x) = host.forward_with_taps(&batch_tensor(&originals)?)?;
        let (_, t) = host.forward_with_taps(&batch_tensor(&moved)?)?;
        let y = reconstruct(&t)?;
        per_image_pairs(&x.out, &y, &mut whole, &mut channel, &mut skipped)?;
    }
    if whole.is_empty() {
        return Err(Error::Empty(format!("no non-degenerate images for {label}")));
    }
    Ok(CorrelationEntry {
        label,
        whole_r: mean(&whole),
        channel_r: mean(&channel),
        samples: whole.len(),
        skipped,
    })
}

/// Correlation between block features of originals and the aligned
/// features of their transformed copies.
pub fn feature_correlations(host: &FrozenHost, data: &Dataset, spec: &TransformSpec, batch: usize) -> Result<CorrelationEntry> {
    correlate(host, data, spec, batch, spec.to_string(), |t| align_features(&t.out, spec, host))
}

/// Correlation between block features of originals and a lens's
/// reconstruction from their transformed copies.
pub fn lens_correlations(host: &FrozenHost, lens: &Lens, data: &Dataset, batch: usize) -> Result<CorrelationEntry> {
    let spec = lens.bin().spec();
    correlate(host, data, &spec, batch, format!("lens-{}", lens.bin()), |t| lens.apply(t))
}

/// Anything that labels a batch of host-sized images given their recorded
/// transforms.
pub trait Pipeline {
    fn classify(&self, images: &Tensor, specs: &[TransformSpec]) -> Result<Vec<usize>>;
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits.data().chunks(c).map(argmax).collect()
}

/// The frozen host alone (also used for DataAug hosts).
pub struct PlainPipeline<'a>(pub &'a FrozenHost);

impl Pipeline for PlainPipeline<'_> {
    fn classify(&self, images: &Tensor, _: &[TransformSpec]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.0.forward_with_taps(images)?.0))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectionMode {
    TrueTransform,
    Predicted,
    None,
}

pub struct LensPipeline<'a> {
    pub host: &'a FrozenHost,
    pub registry: &'a LensRegistry,
    pub mode: SelectionMode,
    pub classifier: Option<&'a RotationClassifier>,
}

impl Pipeline for LensPipeline<'_> {
    fn classify(&self, images: &Tensor, specs: &[TransformSpec]) -> Result<Vec<usize>> {
        let logits = match self.mode {
            SelectionMode::None => apply_lens_pipeline(self.host, self.registry, images, Selection::Off)?,
            SelectionMode::TrueTransform => {
                let bins: Vec<LensBin> = specs
                    .iter()
                    .map(|s| s.bin().ok_or_else(|| Error::UnresolvedBin(s.to_string())))
                    .collect::<Result<_>>()?;
                apply_lens_pipeline(self.host, self.registry, images, Selection::Given(&bins))?
            }
            SelectionMode::Predicted => {
                let clf = self
                    .classifier
                    .ok_or_else(|| Error::config("predicted selection needs a rotation classifier"))?;
                apply_lens_pipeline(self.host, self.registry, images, Selection::Predicted(clf))?
            }
        };
        Ok(argmax_rows(&logits))
    }
}

pub struct XlayerPipeline<'a> {
    pub host: &'a FrozenHost,
    pub xlayer: &'a Xlayer,
}

impl Pipeline for XlayerPipeline<'_> {
    fn classify(&self, images: &Tensor, _: &[TransformSpec]) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.xlayer.logits(self.host, images)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSpec {
    /// Inclusive rotation-angle window; images with other rotation angles
    /// are skipped. Non-rotation transforms always pass.
    pub angle_filter: Option<(f64, f64)>,
    pub batch_size: usize,
    pub input_hw: (usize, usize),
    pub policy: CanvasPolicy,
}

impl EvalSpec {
    /// The `[45, 315]` window that drops near-upright images.
    pub fn mnist_rot(input_hw: (usize, usize)) -> EvalSpec {
        EvalSpec {
            angle_filter: Some((45.0, 315.0)),
            batch_size: 128,
            input_hw,
            policy: CanvasPolicy::PadToCanvas,
        }
    }

    pub fn unfiltered(input_hw: (usize, usize)) -> EvalSpec {
        EvalSpec {
            angle_filter: None,
            ..EvalSpec::mnist_rot(input_hw)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((lo, hi)) = self.angle_filter {
            if !(0.0..360.0).contains(&lo) || !(0.0..360.0).contains(&hi) || lo > hi {
                return Err(Error::config(format!("angle filter [{lo}, {hi}] outside [0, 360)")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::config("evaluation batch size must be positive"));
        }
        Ok(())
    }

    fn keeps(&self, spec: &TransformSpec) -> bool {
        match (self.angle_filter, spec) {
            (Some((lo, hi)), TransformSpec::Rotation { angle_deg }) => *angle_deg >= lo && *angle_deg <= hi,
            (Some(_), TransformSpec::Identity) => false,
            _ => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// `(correct, total)` per bin of the recorded transform.
    pub per_bin: BTreeMap<String, (usize, usize)>,
}

/// Top-1 accuracy of `pipeline` over the images of `data` that pass the
/// filter.
pub fn evaluate_accuracy(pipeline: &dyn Pipeline, data: &Dataset, eval: &EvalSpec) -> Result<AccuracyReport> {
    eval.validate()?;
    let kept: Vec<usize> = (0..data.len()).filter(|&i| eval.keeps(&data.spec(i))).collect();
    if kept.is_empty() {
        return Err(Error::Empty("every image was filtered out".into()));
    }
    let mut correct = 0;
    let mut per_bin: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for chunk in kept.chunks(eval.batch_size) {
        let images: Vec<Image> = chunk
            .iter()
            .map(|&i| data.rendered(i, eval.input_hw, eval.policy))
            .collect::<Result<_>>()?;
        let specs: Vec<TransformSpec> = chunk.iter().map(|&i| data.spec(i)).collect();
        let pred = pipeline.classify(&batch_tensor(&images)?, &specs)?;
        for ((&i, p), s) in chunk.iter().zip(pred).zip(&specs) {
            let hit = p == data.label(i);
            correct += hit as usize;
            let key = s.bin().map_or_else(|| s.to_string(), |b| b.name().to_string());
            let e = per_bin.entry(key).or_default();
            e.0 += hit as usize;
            e.1 += 1;
        }
    }
    Ok(AccuracyReport {
        accuracy: correct as f64 / kept.len() as f64,
        correct,
        total: kept.len(),
        per_bin,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    /// Pearson r of the fitted points.
    pub r: f64,
}

/// Least-squares line through `(x, y)` points.
pub fn regress_corr_accuracy(points: &[(f64, f64)]) -> Result<Regression> {
    if points.len() < 2 {
        return Err(Error::config("regression needs at least two points"));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let (mut sxy, mut sxx) = (Sum::default(), Sum::default());
    for (&x, &y) in xs.iter().zip(&ys) {
        sxy.add((x - mx) * (y - my));
        sxx.add((x - mx) * (x - mx));
    }
    if sxx.value() <= 0.0 {
        return Err(Error::Degenerate("regression"));
    }
    let slope = sxy.value() / sxx.value();
    let r = match pearson(&xs, &ys) {
        Ok(r) => r,
        // a flat response is fitted exactly
        Err(Error::Degenerate(_)) => 1.0,
        Err(e) => return Err(e),
    };
    Ok(Regression {
        slope,
        intercept: my - slope * mx,
        r,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub transform: String,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    pub fn new(method: &str, transform: &str, metric: &str, value: f64) -> Self {
        ResultRow {
            method: method.into(),
            transform: transform.into(),
            metric: metric.into(),
            value,
        }
    }
}

pub const CSV_HEADER: &str = "method,transform,metric,value";

pub fn report_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.method, r.transform, r.metric, r.value);
    }
    s
}

pub fn parse_report_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::config(format!("report must start with `{CSV_HEADER}`")));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::ConfigSyntax {
                line: i + 2,
                msg: format!("malformed row `{l}`"),
            };
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(ResultRow::new(f[0], f[1], f[2], f[3].parse().map_err(|_| bad())?))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterPoint {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

/// Standalone SVG scatter of (correlation, accuracy) with an optional
/// fitted line.
pub fn scatter_svg(points: &[ScatterPoint], fit: Option<&Regression>) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    let px = |x: f64| M + x.clamp(0.0, 1.0) * (W - 2.0 * M);
    let py = |y: f64| H - M - y.clamp(0.0, 1.0) * (H - 2.0 * M);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {} H{} M{M} {} V{M}" stroke="black" fill="none"/>"#,
        H - M,
        W - M,
        H - M
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">feature correlation</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">accuracy</text>"#,
        H / 2.0,
        H / 2.0
    );
    if let Some(f) = fit {
        let _ = writeln!(
            s,
            r##"<line class="fit" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#c33" stroke-dasharray="4 3"/>"##,
            px(0.0),
            py(f.intercept),
            px(1.0),
            py(f.intercept + f.slope)
        );
    }
    for p in points {
        let _ = writeln!(
            s,
            r##"<circle class="point" cx="{:.2}" cy="{:.2}" r="4" fill="#1f5fa8"><title>{}</title></circle>"##,
            px(p.x),
            py(p.y),
            p.label
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report.csv` and `scatter.svg` into `dir`.
pub fn emit_report(rows: &[ResultRow], points: &[ScatterPoint], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fit = if points.len() >= 2 {
        let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.x, p.y)).collect();
        regress_corr_accuracy(&xy).ok()
    } else {
        None
    };
    let csv = dir.join("report.csv");
    fs::write(&csv, report_csv(rows)).map_err(|e| Error::io(&csv, e))?;
    let svg = dir.join("scatter.svg");
    fs::write(&svg, scatter_svg(points, fit.as_ref())).map_err(|e| Error::io(&svg, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_hand_example() {
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - 3.0 / (2.0f64 * 14.0 / 3.0).sqrt()).abs() < 1e-12);
        assert!(matches!(pearson(&[1.0, 1.0], &[0.0, 1.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn three_point_fit() {
        let f = regress_corr_accuracy(&[(0.0, 0.0), (0.5, 0.4), (1.0, 1.0)]).unwrap();
        assert!((f.slope - 1.0).abs() < 1e-12);
        assert!((f.intercept + 1.0 / 30.0).abs() < 1e-12);
        assert!((f.r - (225.0f64 / 228.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trips() {
        let rows = vec![ResultRow::new("lenses", "mnist-rot", "accuracy", 0.5)];
        assert_eq!(parse_report_csv(&report_csv(&rows)).unwrap(), rows);
        assert_eq!(report_csv(&[]), "method,transform,metric,value\n");
    }
}
