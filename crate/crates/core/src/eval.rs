//! Metrics and benchmarking: PSNR, the pluggable perceptual-metric
//! interface, and the wall-clock timing harness.

use crate::error::{Error, Result};
use ndarray::ArrayD;
use serde::Serialize;
use std::collections::BTreeMap;

/// PSNR cap reported when the MSE is exactly zero.
pub const PSNR_CAP_DB: f64 = 100.0;

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP_DB`] for identical
/// inputs.
pub fn psnr(a: &ArrayD<f64>, b: &ArrayD<f64>, peak: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr", a.shape(), b.shape()));
    }
    if !(peak > 0.0) {
        return Err(Error::range("psnr peak", format!("must be > 0, got {peak}")));
    }
    let n = a.len() as f64;
    let mse: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR on the 8-bit scale users actually see: both images are quantized
/// through the documented [-1, 1] <-> 8-bit round trip, then compared in
/// floating point with peak 255 over all RGB channels.
pub fn psnr_quantized(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("psnr_quantized", a.shape(), b.shape()));
    }
    let qa = a.mapv(|v| crate::datapipe::quantize_u8(v) as f64);
    let qb = b.mapv(|v| crate::datapipe::quantize_u8(v) as f64);
    psnr(&qa, &qb, 255.0)
}

/// An externally provided full-reference metric (FID/LPIPS-style scores
/// live behind this interface; the core build carries no pretrained
/// networks).
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn compute(&self, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64>;
}

#[derive(Default)]
pub struct MetricRegistry {
    plugins: BTreeMap<String, Box<dyn PerceptualMetric>>,
}

impl MetricRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, plugin: Box<dyn PerceptualMetric>) {
        self.plugins.insert(plugin.name().to_string(), plugin);
    }

    pub fn names(&self) -> Vec<String> {
        self.plugins.keys().cloned().collect()
    }

    /// Delegates to the named plugin; unknown names list what is
    /// registered.
    pub fn perceptual_metric(&self, name: &str, a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
        match self.plugins.get(name) {
            Some(p) => p.compute(a, b),
            None => Err(Error::UnknownMetric {
                name: name.to_string(),
                registered: self.names(),
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub plugins: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_psnr_db: f64,
    pub min_psnr_db: f64,
    pub max_psnr_db: f64,
}

impl MetricReport {
    pub fn from_images(per_image: Vec<ImageMetrics>) -> Self {
        let n = per_image.len().max(1) as f64;
        let mean = per_image.iter().map(|m| m.psnr_db).sum::<f64>() / n;
        let min = per_image.iter().map(|m| m.psnr_db).fold(f64::INFINITY, f64::min);
        let max = per_image.iter().map(|m| m.psnr_db).fold(f64::NEG_INFINITY, f64::max);
        MetricReport {
            per_image,
            mean_psnr_db: mean,
            min_psnr_db: min,
            max_psnr_db: max,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseTimings {
    pub cond_s: f64,
    pub denoise_s: f64,
    pub decode_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingEnvironment {
    pub hardware: String,
    pub repeats: usize,
    pub warmup: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub variant: String,
    pub mean_s: f64,
    pub std_s: f64,
    pub per_phase: PhaseTimings,
    pub denoiser_calls: u64,
    pub env: TimingEnvironment,
}

/// Best-effort CPU model string plus logical core count.
pub fn hardware_string() -> String {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1).map(|v| v.trim().to_string()))
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    format!("{model} x{cores}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerVariant {
    SingleStep,
    Ancestral { num_steps: usize },
}

impl SamplerVariant {
    pub fn name(&self) -> String {
        match self {
            SamplerVariant::SingleStep => "single_step".to_string(),
            SamplerVariant::Ancestral { num_steps } => format!("ancestral_{num_steps}"),
        }
    }
}

/// Times a sampler variant over `repeats` runs after `warmup` discarded
/// iterations. Phase breakdowns and denoiser-call counts come straight
/// from the sampler's instrumentation.
pub fn benchmark_runtime(
    variant: SamplerVariant,
    lr_image: &ndarray::ArrayD<f64>,
    assets: &crate::sampler::SamplerAssets,
    schedule: &crate::schedule::NoiseSchedule,
    repeats: usize,
    warmup: usize,
    seed: u64,
) -> Result<TimingReport> {
    if repeats < 3 {
        return Err(Error::range("repeats", format!("need at least 3, got {repeats}")));
    }
    let run = |i: u64| -> Result<crate::sampler::SampleOutput> {
        match variant {
            SamplerVariant::SingleStep => crate::sampler::sample_single_step(lr_image, assets, schedule, seed + i),
            SamplerVariant::Ancestral { num_steps } => {
                crate::sampler::sample_ancestral(lr_image, assets, schedule, num_steps, seed + i)
            }
        }
    };
    for i in 0..warmup {
        run(i as u64)?;
    }
    let mut totals = Vec::with_capacity(repeats);
    let mut last = None;
    for i in 0..repeats {
        let out = run((warmup + i) as u64)?;
        totals.push(out.total_s);
        last = Some(out);
    }
    let last = last.expect("repeats >= 3");
    Ok(summarize_timing(
        &variant.name(),
        &totals,
        last.phases,
        last.denoiser_calls,
        warmup,
    ))
}

/// Summarizes repeated wall-clock measurements; phase timings and call
/// counts come from the sampler's own instrumentation so the harness
/// cannot disagree with it.
pub fn summarize_timing(
    variant: &str,
    total_seconds: &[f64],
    phases: PhaseTimings,
    denoiser_calls: u64,
    warmup: usize,
) -> TimingReport {
    let n = total_seconds.len().max(1) as f64;
    let mean = total_seconds.iter().sum::<f64>() / n;
    let var = total_seconds.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / n;
    TimingReport {
        variant: variant.to_string(),
        mean_s: mean,
        std_s: var.sqrt(),
        per_phase: phases,
        denoiser_calls,
        env: TimingEnvironment {
            hardware: hardware_string(),
            repeats: total_seconds.len(),
            warmup,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn psnr_identical_inputs_hit_the_cap() {
        let a = ArrayD::from_elem(IxDyn(&[3, 4, 4]), 0.5);
        assert_eq!(psnr(&a, &a, 255.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_uniform_unit_error_on_8bit_scale() {
        // MSE = 1 at peak 255: 20 log10(255) = 48.1308 dB
        let a = ArrayD::from_elem(IxDyn(&[3, 8, 8]), 10.0);
        let b = ArrayD::from_elem(IxDyn(&[3, 8, 8]), 11.0);
        let db = psnr(&a, &b, 255.0).unwrap();
        assert!((db - 48.130803608679344).abs() < 1e-3);
    }

    #[test]
    fn psnr_uniform_peak_error_is_zero_db() {
        let a = ArrayD::from_elem(IxDyn(&[1, 4, 4]), 0.0);
        let b = ArrayD::from_elem(IxDyn(&[1, 4, 4]), 255.0);
        let db = psnr(&a, &b, 255.0).unwrap();
        assert!(db.abs() < 1e-12);
    }

    #[test]
    fn psnr_is_symmetric_and_scale_covariant() {
        let a = crate::rng::normal_tensor(&mut crate::rng::stream_rng(1, "a", 0), &[2, 5, 5]);
        let b = crate::rng::normal_tensor(&mut crate::rng::stream_rng(1, "b", 0), &[2, 5, 5]);
        let ab = psnr(&a, &b, 2.0).unwrap();
        let ba = psnr(&b, &a, 2.0).unwrap();
        assert_eq!(ab, ba);
        let scaled = psnr(&(a.clone() * 3.0), &(b.clone() * 3.0), 6.0).unwrap();
        assert!((ab - scaled).abs() < 1e-9);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        let a = ArrayD::<f64>::zeros(IxDyn(&[1, 4, 4]));
        let b = ArrayD::<f64>::zeros(IxDyn(&[1, 4, 5]));
        assert!(psnr(&a, &b, 255.0).is_err());
    }

    struct ConstMetric(f64);
    impl PerceptualMetric for ConstMetric {
        fn name(&self) -> &str {
            "const"
        }
        fn compute(&self, _a: &ArrayD<f64>, _b: &ArrayD<f64>) -> Result<f64> {
            Ok(self.0)
        }
    }

    #[test]
    fn plugin_registry_contract() {
        let mut reg = MetricRegistry::new();
        let a = ArrayD::zeros(IxDyn(&[1, 2, 2]));

        // no plugins registered: unknown-metric error naming the request
        let err = reg.perceptual_metric("fid", &a, &a).unwrap_err();
        match err {
            Error::UnknownMetric { name, registered } => {
                assert_eq!(name, "fid");
                assert!(registered.is_empty());
            }
            other => panic!("unexpected error {other}"),
        }

        reg.register(Box::new(ConstMetric(0.0)));
        assert_eq!(reg.names(), vec!["const".to_string()]);
        assert_eq!(reg.perceptual_metric("const", &a, &a).unwrap(), 0.0);
    }

    #[test]
    fn timing_summary_math() {
        let report = summarize_timing(
            "single_step",
            &[1.0, 3.0],
            PhaseTimings {
                cond_s: 0.1,
                denoise_s: 0.5,
                decode_s: 0.2,
            },
            1,
            1,
        );
        assert!((report.mean_s - 2.0).abs() < 1e-12);
        assert!((report.std_s - 1.0).abs() < 1e-12);
        assert_eq!(report.denoiser_calls, 1);
    }
}
