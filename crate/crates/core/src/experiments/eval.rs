//! SNR-sweep evaluation and the per-metric CSV files.

use std::fmt::Write as _;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{snr_to_sigma2, unit_noise_batch};
use crate::codec::VariantModel;
use crate::data::{PairDataset, StereoPair};
use crate::image_tensor::ImageTensor;
use crate::metrics::{lpips, ms_ssim, psnr, Aggregate, FeatureNet};
use crate::rng::stream_rng;
use crate::{Error, Result};

const EVAL_BATCH: usize = 32;

/// Metric families, in CSV column naming.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Psnr,
    Msssim,
    Lpips,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Psnr, Metric::Msssim, Metric::Lpips];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr",
            Metric::Msssim => "msssim",
            Metric::Lpips => "lpips",
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Lpips
    }

    /// `model/snr,test/<metric>,test/<metric>_std`
    pub fn csv_header(self) -> String {
        format!("model/snr,test/{0},test/{0}_std", self.name())
    }

    pub fn file_name(self) -> String {
        format!("{}.csv", self.name())
    }
}

/// Aggregates at one evaluation SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub snr_db: f64,
    pub psnr: Aggregate,
    pub msssim: Aggregate,
    pub lpips: Aggregate,
}

impl EvalRecord {
    pub fn get(&self, metric: Metric) -> Aggregate {
        match metric {
            Metric::Psnr => self.psnr,
            Metric::Msssim => self.msssim,
            Metric::Lpips => self.lpips,
        }
    }
}

/// Unit-power noise for (test image `i`, repeat `r`). The same realization is
/// reused at every SNR of the sweep.
fn eval_noise_rng(seed: u64, image: usize, repeat: usize, repeats: usize) -> ChaCha8Rng {
    stream_rng(seed, "eval/noise", (image * repeats + repeat) as u64)
}

/// Sweeps the SNR grid over a test set.
///
/// For every image the metrics are first averaged over the `repeats` noise
/// realizations; mean and std are then taken across images.
pub fn evaluate_model(
    model: &VariantModel,
    test: &dyn PairDataset,
    grid_db: &[f64],
    repeats: usize,
    seed: u64,
    net: &FeatureNet,
) -> Result<Vec<EvalRecord>> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    if repeats == 0 || grid_db.is_empty() {
        return Err(Error::invalid("evaluation needs a nonempty grid and at least one repeat"));
    }
    let sigma2: Vec<f64> = grid_db
        .iter()
        .map(|&s| snr_to_sigma2(s, model.config().p_avg))
        .collect::<Result<_>>()?;
    let pairs: Vec<StereoPair> = (0..test.len()).map(|i| test.pair(i)).collect::<Result<_>>()?;
    let items: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|i| (0..repeats).map(move |r| (i, r)))
        .collect();
    let dtype = model.dtype();
    let k = model.channel_uses();
    let uses_side = model.variant().uses_side_info();

    let mut records = Vec::with_capacity(grid_db.len());
    for (&snr, &s2) in grid_db.iter().zip(&sigma2) {
        let n = pairs.len();
        let mut sums = vec![[0.0f64; 3]; n];
        for chunk in items.chunks(EVAL_BATCH) {
            let xs: Vec<&ImageTensor> = chunk.iter().map(|&(i, _)| &pairs[i].x).collect();
            let x = ImageTensor::stack(xs.iter().copied(), dtype)?;
            let side = if uses_side {
                Some(ImageTensor::stack(chunk.iter().map(|&(i, _)| &pairs[i].x_side), dtype)?)
            } else {
                None
            };
            let mut rngs: Vec<ChaCha8Rng> = chunk
                .iter()
                .map(|&(i, r)| eval_noise_rng(seed, i, r, repeats))
                .collect();
            let noise = unit_noise_batch(&mut rngs, k, dtype)?;
            let out = model.transmit(&x, side.as_ref(), &vec![s2; chunk.len()], &noise)?;
            let recs = ImageTensor::unstack(&out.x_hat)?;
            let refs: Vec<ImageTensor> = xs.iter().map(|&x| x.clone()).collect();
            let lp = lpips(net, &refs, &recs)?;
            for (j, &(i, _)) in chunk.iter().enumerate() {
                sums[i][0] += psnr(&refs[j], &recs[j], 1.0)?;
                sums[i][1] += ms_ssim(&refs[j], &recs[j])?;
                sums[i][2] += lp[j];
            }
        }
        let per_image = |m: usize| -> Vec<f64> { sums.iter().map(|s| s[m] / repeats as f64).collect() };
        records.push(EvalRecord {
            snr_db: snr,
            psnr: Aggregate::of(&per_image(0))?,
            msssim: Aggregate::of(&per_image(1))?,
            lpips: Aggregate::of(&per_image(2))?,
        });
    }
    Ok(records)
}

/// CSV text for one metric family.
pub fn metric_csv(records: &[EvalRecord], metric: Metric) -> String {
    let mut out = metric.csv_header();
    out.push('\n');
    for r in records {
        let a = r.get(metric);
        writeln!(out, "{},{},{}", r.snr_db, a.mean, a.std).expect("writing to a string");
    }
    out
}

/// One parsed metric CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub metric: Metric,
    /// `(snr, mean, std)` rows in file order.
    pub rows: Vec<(f64, f64, f64)>,
}

impl MetricTable {
    /// Strict parser: the header must be one of the three exact headers and
    /// every row must have three finite numbers with a nonnegative std.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default().trim_end_matches('\r');
        let metric = Metric::ALL
            .into_iter()
            .find(|m| m.csv_header() == header)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unrecognized CSV header `{header}`; expected `model/snr,test/<metric>,test/<metric>_std`"
                ))
            })?;
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::invalid(format!(
                    "CSV row {} has {} fields, expected 3: `{line}`",
                    n + 2,
                    fields.len()
                )));
            }
            let num = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::invalid(format!("CSV row {}: `{s}` is not a finite number", n + 2)))
            };
            let (snr, mean, std) = (num(fields[0])?, num(fields[1])?, num(fields[2])?);
            if std < 0.0 {
                return Err(Error::invalid(format!("CSV row {}: negative std {std}", n + 2)));
            }
            rows.push((snr, mean, std));
        }
        Ok(Self { metric, rows })
    }

    pub fn grid(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.0).collect()
    }
}
