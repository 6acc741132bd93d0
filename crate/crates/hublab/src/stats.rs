//! Per-layer experiment statistics: bootstrap confidence intervals and the
//! `LayerCurve` record every analysis emits.
//!
//! CSV schema shared by all curve-producing experiments:
//! `experiment,layer,series,mean,ci_low,ci_high,n`.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::Rng;

use crate::error::HubError;
use crate::rng;

/// One per-layer statistic with a bootstrap confidence interval.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCurve {
    pub experiment: String,
    pub layer: usize,
    pub series: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl LayerCurve {
    pub fn validate(&self) -> Result<(), HubError> {
        if self.n < 1 {
            return Err(HubError::usage("LayerCurve requires n >= 1"));
        }
        if !(self.ci_low <= self.mean && self.mean <= self.ci_high) {
            return Err(HubError::usage(format!(
                "LayerCurve CI does not bracket mean: {} <= {} <= {}",
                self.ci_low, self.mean, self.ci_high
            )));
        }
        Ok(())
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Percentile bootstrap over per-item values: 1000 resamples of the mean,
/// 95% interval. Deterministic for a fixed seed.
pub fn bootstrap_ci(values: &[f64], seed: u64, purpose: &str) -> (f64, f64, f64) {
    bootstrap_ci_stat(values, seed, purpose, mean)
}

/// Bootstrap a custom statistic of the resampled values.
pub fn bootstrap_ci_stat(
    values: &[f64],
    seed: u64,
    purpose: &str,
    stat: impl Fn(&[f64]) -> f64,
) -> (f64, f64, f64) {
    const RESAMPLES: usize = 1000;
    let m = stat(values);
    if values.len() < 2 {
        return (m, m, m);
    }
    let mut rng = rng::stream(seed, purpose);
    let n = values.len();
    let mut stats = Vec::with_capacity(RESAMPLES);
    let mut resample = vec![0.0f64; n];
    for _ in 0..RESAMPLES {
        for slot in resample.iter_mut() {
            *slot = values[rng.random_range(0..n)];
        }
        stats.push(stat(&resample));
    }
    stats.sort_by(|a, b| a.total_cmp(b));
    let lo = stats[(RESAMPLES as f64 * 0.025).floor() as usize];
    let hi = stats[(RESAMPLES as f64 * 0.975).ceil() as usize - 1];
    // Guard against resampling quirks on near-constant data.
    (m, lo.min(m), hi.max(m))
}

/// Build a curve for one (experiment, layer, series) cell from per-item values.
pub fn curve_point(
    experiment: &str,
    layer: usize,
    series: &str,
    values: &[f64],
    seed: u64,
) -> LayerCurve {
    let purpose = format!("bootstrap/{experiment}/{layer}/{series}");
    let (m, lo, hi) = bootstrap_ci(values, seed, &purpose);
    LayerCurve {
        experiment: experiment.to_string(),
        layer,
        series: series.to_string(),
        mean: m,
        ci_low: lo,
        ci_high: hi,
        n: values.len(),
    }
}

pub const LAYER_CURVE_HEADER: &str = "experiment,layer,series,mean,ci_low,ci_high,n";

pub fn curves_to_csv(curves: &[LayerCurve]) -> String {
    let mut out = String::new();
    out.push_str(LAYER_CURVE_HEADER);
    out.push('\n');
    for c in curves {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.experiment, c.layer, c.series, c.mean, c.ci_low, c.ci_high, c.n
        );
    }
    out
}

pub fn write_curves_csv(path: &Path, curves: &[LayerCurve]) -> Result<(), HubError> {
    std::fs::write(path, curves_to_csv(curves))
        .map_err(|e| HubError::io(path.display().to_string(), e))
}

pub fn read_curves_csv(path: &Path) -> Result<Vec<LayerCurve>, HubError> {
    let file = std::fs::File::open(path).map_err(|e| HubError::io(path.display().to_string(), e))?;
    parse_curves(BufReader::new(file), &path.display().to_string())
}

fn parse_curves<R: Read>(reader: BufReader<R>, origin: &str) -> Result<Vec<LayerCurve>, HubError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .transpose()
        .map_err(|e| HubError::io(origin.to_string(), e))?
        .unwrap_or_default();
    if header.trim() != LAYER_CURVE_HEADER {
        return Err(HubError::format(format!(
            "{origin}: expected header `{LAYER_CURVE_HEADER}`, got `{header}`"
        )));
    }
    let mut curves = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| HubError::io(origin.to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(HubError::format(format!(
                "{origin}: line {} has {} fields, expected 7",
                i + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64, HubError> {
            s.parse::<f64>()
                .map_err(|_| HubError::format(format!("{origin}: bad {what} `{s}`")))
        };
        curves.push(LayerCurve {
            experiment: fields[0].to_string(),
            layer: fields[1]
                .parse()
                .map_err(|_| HubError::format(format!("{origin}: bad layer `{}`", fields[1])))?,
            series: fields[2].to_string(),
            mean: parse_f(fields[3], "mean")?,
            ci_low: parse_f(fields[4], "ci_low")?,
            ci_high: parse_f(fields[5], "ci_high")?,
            n: fields[6]
                .parse()
                .map_err(|_| HubError::format(format!("{origin}: bad n `{}`", fields[6])))?,
        });
    }
    Ok(curves)
}
