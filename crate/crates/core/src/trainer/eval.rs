use log::warn;
use rayon::prelude::*;

use crate::dataset::DatasetIndex;
use crate::error::Result;
use crate::imaging::{bicubic_resize, degrade, load_image, psnr, ssim, ImageF32, SamplePair};
use crate::network::{infer, ModelConfig};
use crate::params::ModelParams;

/// What produces the SR estimate during evaluation.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    Model { params: &'a ModelParams<f32>, config: &'a ModelConfig },
    /// Bicubic upscaling of the LR input.
    Bicubic,
    /// The HR reference itself; every score is the ideal value.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub key: String,
    pub class: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub class: String,
    pub count: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub images: Vec<ImageScore>,
    /// One row per class, then the `overall` row.
    pub rows: Vec<ReportRow>,
    pub failures: usize,
}

pub const OVERALL: &str = "overall";

/// Super-resolves a full LR image. The LR input is cropped at the bottom
/// and right to a multiple of the token patch size first.
pub fn super_resolve(params: &ModelParams<f32>, config: &ModelConfig, lr: &ImageF32) -> Result<ImageF32> {
    let (ph, pw) = config.lr_patch();
    let (h, w) = (lr.height - lr.height % ph, lr.width - lr.width % pw);
    if h == 0 || w == 0 {
        return Err(crate::Error::PatchDivisibility { h: lr.height, w: lr.width, ph, pw });
    }
    let lr = if (h, w) == (lr.height, lr.width) { lr.clone() } else { lr.crop(0, 0, h, w) };
    let out = infer(params, config, lr.to_tensor())?;
    Ok(ImageF32::from_tensor(&out, 0)?.clamped())
}

/// SR estimate and the HR reference it should be scored against.
pub fn predict(pair: &SamplePair, predictor: Predictor) -> Result<(ImageF32, ImageF32)> {
    let hr = &pair.hr;
    match predictor {
        Predictor::Identity => Ok((hr.clone(), hr.clone())),
        Predictor::Bicubic => Ok((bicubic_resize(&pair.lr, hr.height, hr.width).clamped(), hr.clone())),
        Predictor::Model { params, config } => {
            let sr = super_resolve(params, config, &pair.lr)?;
            let reference =
                if sr.shape() == hr.shape() { hr.clone() } else { hr.crop(0, 0, sr.height, sr.width) };
            Ok((sr, reference))
        }
    }
}

fn score(pair: &SamplePair, predictor: Predictor) -> Result<(f64, f64)> {
    let (sr, hr) = predict(pair, predictor)?;
    Ok((psnr(&sr, &hr, 1.0)?, ssim(&sr, &hr)?))
}

fn summarize(class: &str, scores: &[&ImageScore]) -> ReportRow {
    let finite: Vec<f64> = scores.iter().map(|s| s.psnr).filter(|p| p.is_finite()).collect();
    let psnr_mean = if finite.is_empty() {
        if scores.is_empty() { f64::NAN } else { f64::INFINITY }
    } else {
        if finite.len() < scores.len() {
            warn!("{class}: {} identical image(s) excluded from the PSNR mean", scores.len() - finite.len());
        }
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let ssim_mean = scores.iter().map(|s| s.ssim).sum::<f64>() / scores.len().max(1) as f64;
    ReportRow { class: class.to_string(), count: scores.len(), psnr_mean, ssim_mean }
}

fn report(scored: Vec<Option<ImageScore>>) -> EvalReport {
    let failures = scored.iter().filter(|s| s.is_none()).count();
    let images: Vec<ImageScore> = scored.into_iter().flatten().collect();
    let mut classes: Vec<&str> = images.iter().map(|s| s.class.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut rows: Vec<ReportRow> = classes
        .iter()
        .map(|c| summarize(c, &images.iter().filter(|s| s.class == *c).collect::<Vec<_>>()))
        .collect();
    rows.push(summarize(OVERALL, &images.iter().collect::<Vec<_>>()));
    EvalReport { images, rows, failures }
}

/// Scores every listed image of `index` at full size.
///
/// Images that fail to load or predict are logged and counted.
pub fn evaluate(index: &DatasetIndex, members: &[usize], scale: usize, predictor: Predictor) -> EvalReport {
    let scored = members
        .par_iter()
        .map(|&i| {
            let entry = &index.entries[i];
            let result = load_image(&entry.path)
                .map_err(crate::Error::from)
                .and_then(|hr| Ok(degrade(&hr, scale)?))
                .and_then(|pair| score(&pair, predictor));
            match result {
                Ok((psnr, ssim)) => Some(ImageScore { key: entry.key(), class: entry.class.clone(), psnr, ssim }),
                Err(e) => {
                    warn!("evaluation skipped {}: {e}", entry.path.display());
                    None
                }
            }
        })
        .collect();
    let report = report(scored);
    if report.failures > 0 {
        warn!("{} image(s) failed and were excluded", report.failures);
    }
    report
}

/// Scores in-memory pairs, all under one class label.
pub fn evaluate_pairs(pairs: &[SamplePair], class: &str, predictor: Predictor) -> EvalReport {
    let scored = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| match score(pair, predictor) {
            Ok((psnr, ssim)) => Some(ImageScore { key: format!("{class}/{i}"), class: class.into(), psnr, ssim }),
            Err(e) => {
                warn!("evaluation skipped pair {i}: {e}");
                None
            }
        })
        .collect();
    report(scored)
}

fn number(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        format!("{v}")
    }
}

impl EvalReport {
    pub fn overall(&self) -> &ReportRow {
        self.rows.last().expect("the overall row is always present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count,psnr_mean,ssim_mean\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.class, r.count, number(r.psnr_mean), number(r.ssim_mean)));
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let width = self.rows.iter().map(|r| r.class.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<width$}  {:>5}  {:>10}  {:>8}\n", "class", "count", "PSNR (dB)", "SSIM");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>5}  {:>10}  {:>8}\n",
                r.class,
                r.count,
                number(r.psnr_mean),
                number(r.ssim_mean)
            ));
        }
        if self.failures > 0 {
            out.push_str(&format!("({} image(s) failed)\n", self.failures));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(seed: usize) -> SamplePair {
        let data = (0..3 * 24 * 24).map(|i| (((i + seed) * 37) % 101) as f32 / 100.0).collect();
        degrade(&ImageF32::new(3, 24, 24, data).unwrap(), 2).unwrap()
    }

    #[test]
    fn identity_scores_are_ideal() {
        let r = evaluate_pairs(&[pair(0), pair(1)], "x", Predictor::Identity);
        assert_eq!(r.rows.len(), 2);
        for s in &r.images {
            assert_eq!(s.psnr, f64::INFINITY);
            assert_eq!(s.ssim, 1.0);
        }
        assert_eq!(r.overall().psnr_mean, f64::INFINITY);
        assert_eq!(r.overall().count, 2);
    }

    #[test]
    fn bicubic_report_schema() {
        let r = evaluate_pairs(&[pair(3)], "x", Predictor::Bicubic);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,count,psnr_mean,ssim_mean");
        assert!(lines[2].starts_with("overall,1,"));
        assert!(r.overall().psnr_mean.is_finite());
    }
}
