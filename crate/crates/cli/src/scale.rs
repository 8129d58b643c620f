use std::fmt::Write as _;

use rehub_core::metrics::{measure_scaling, peak_slope, ScalingRecord, SCALING_CSV_HEADER};
use rehub_core::{Arch, ModelConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{prepare_out, write, write_json, Failure};

pub struct ScaleOutcome {
    pub records: Vec<ScalingRecord>,
    pub rehub_slope: f64,
    pub dense_slope: f64,
}

#[derive(Serialize)]
struct Slopes {
    rehub_slope: f64,
    dense_slope: f64,
}

fn sizes(rc: &RunConfig, key: &str) -> Result<Vec<usize>, Failure> {
    let s: Vec<usize> = rc.get_list(key)?;
    if s.is_empty() || s.windows(2).any(|w| w[0] >= w[1]) || s[0] < 4 {
        return Err(Failure::Config(format!(
            "key `{key}`: sizes must be strictly ascending and at least 4"
        )));
    }
    Ok(s)
}

pub fn run(rc: &RunConfig) -> Result<ScaleOutcome, Failure> {
    let seed = rc.seed()?;
    let rehub_sizes = sizes(rc, "sizes")?;
    let dense_sizes = sizes(rc, "dense_sizes")?;
    let budget: usize = rc.get("dense_budget")?;
    let base = ModelConfig {
        input_dim: rc.get("input_dim")?,
        hidden_dim: rc.get("hidden_dim")?,
        heads: rc.get("heads")?,
        layers: rc.get("layers")?,
        hub_ratio: rc.get("hub_ratio")?,
        k: rc.get("k")?,
        seed,
        ..ModelConfig::default()
    };
    base.validate()?;
    let dense = ModelConfig {
        arch: Arch::DenseReference,
        ..base.clone()
    };
    let out = prepare_out(rc)?;

    let mut records = measure_scaling(&base, &rehub_sizes, seed, None)?;
    let dense_records = measure_scaling(&dense, &dense_sizes, seed, Some(budget))?;
    let rehub_slope = peak_slope(&records)?;
    let dense_slope = peak_slope(&dense_records)?;
    records.extend(dense_records);

    let mut csv = format!("{SCALING_CSV_HEADER}\n");
    for r in &records {
        writeln!(csv, "{}", r.csv_row()).unwrap();
    }
    write(&out.join("scaling.csv"), csv)?;
    write_json(&out.join("slopes.json"), &Slopes { rehub_slope, dense_slope })?;
    Ok(ScaleOutcome {
        records,
        rehub_slope,
        dense_slope,
    })
}
