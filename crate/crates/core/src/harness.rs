//! Hyperparameter sweeps over `alpha` or `lambda`.

use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::data::{SplitDataset, Which};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_split, MetricsReport};
use crate::train::train_loop;

/// Expands `start:stop:step` into an inclusive grid. Values are rounded to
/// 1e-9 so that `0.0:1.0:0.1` yields exactly the decimal points.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || Error::Config(format!("grid `{spec}`: expected start:stop:step"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    let (start, stop, step) = (nums[0], nums[1], nums[2]);
    if !step.is_finite() || step <= 0.0 || !start.is_finite() || !stop.is_finite() || stop < start {
        return Err(bad());
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((start + i as f64 * step) * 1e9).round() / 1e9).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    Alpha,
    Lambda,
}

impl SweepParam {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Lambda => "lambda",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "lambda" => Ok(SweepParam::Lambda),
            other => Err(Error::Config(format!("sweep param must be alpha or lambda, got `{other}`"))),
        }
    }

    fn apply(self, config: &TrainConfig, value: f64) -> TrainConfig {
        let mut c = config.clone();
        match self {
            SweepParam::Alpha => c.alpha = value,
            SweepParam::Lambda => c.lambda = value,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub best_epoch: usize,
    pub test: MetricsReport,
}

/// Trains one model per grid value with the base seed and reports test
/// metrics of each run's best-validation checkpoint. `parallel > 1` runs
/// grid points concurrently; results are the same either way.
pub fn run_sweep(
    split: &SplitDataset,
    base: &TrainConfig,
    param: SweepParam,
    grid: &[f64],
    parallel: usize,
) -> Result<Vec<SweepRow>> {
    let run = |&value: &f64| -> Result<SweepRow> {
        let config = param.apply(base, value);
        config.validate()?;
        let outcome = train_loop(split, &config)?;
        let test = evaluate_split(&outcome.model, split, Which::Test)?;
        Ok(SweepRow {
            value,
            best_epoch: outcome.best_epoch,
            test,
        })
    };
    if parallel <= 1 {
        return grid.iter().map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| grid.par_iter().map(run).collect())
}

pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut out = format!("{},hr5,hr10,ndcg5,ndcg10\n", param.as_str());
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value,
            r.test.hr(5),
            r.test.hr(10),
            r.test.ndcg(5),
            r.test.ndcg(10)
        ));
    }
    out
}
