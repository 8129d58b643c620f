use std::fmt::Write as _;

use rehub_core::checkpoint;
use rehub_core::hubs::{AssignmentStrategy, HubInit, ReassignStrategy};
use rehub_core::metrics::UtilizationReport;
use rehub_core::model::{train_with, HeadKind};
use rehub_core::{Arch, ClusterStrategy, ModelConfig, ModelState, TrainConfig};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{batches, check_task, evaluate, token_graphs, utilization, Seeds};
use crate::{prepare_out, write, write_json, Failure};

pub struct TrainOutcome {
    pub accuracy: f64,
    pub losses: Vec<f64>,
    pub report: UtilizationReport,
    pub state: ModelState,
}

#[derive(Serialize)]
struct Metrics<'a> {
    accuracy: f64,
    model: &'a str,
    steps: usize,
    final_loss: f64,
    test_graphs: usize,
}

#[derive(Serialize)]
struct UtilizationFile<'a> {
    median_pct: Option<f64>,
    #[serde(flatten)]
    report: &'a UtilizationReport,
}

/// Model settings from a train config; `input_dim` comes from the data.
pub fn model_config(rc: &RunConfig, input_dim: usize, seed: u64) -> Result<ModelConfig, Failure> {
    let arch: Arch = rc.get("model")?;
    if arch == Arch::DenseReference {
        return Err(Failure::Config("key `model`: dense_reference is only for scale-bench".into()));
    }
    let cfg = ModelConfig {
        arch,
        input_dim,
        hidden_dim: rc.get("hidden_dim")?,
        heads: rc.get("heads")?,
        layers: rc.get("layers")?,
        hub_ratio: rc.get("hub_ratio")?,
        static_hubs: rc.get_opt("static_hubs")?,
        k: rc.get("k")?,
        spoke_encoder: rc.get("spoke_encoder")?,
        hub_init: rc.get::<HubInit>("hub_init")?,
        clustering: rc.get::<ClusterStrategy>("clustering")?,
        assignment: rc.get::<AssignmentStrategy>("assignment")?,
        reassignment: rc.get::<ReassignStrategy>("reassignment")?,
        fc_mode: rc.get("fc_mode")?,
        head: HeadKind::NodeClass,
        out_dim: 2,
        layernorm: rc.get("layernorm")?,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(rc: &RunConfig) -> Result<TrainOutcome, Failure> {
    run_with(rc, |_, _| {})
}

/// [`run`] with a callback after every optimizer step.
pub fn run_with(rc: &RunConfig, on_step: impl FnMut(usize, f64)) -> Result<TrainOutcome, Failure> {
    check_task(rc)?;
    let seeds = Seeds::from_master(rc.seed()?);
    let path_len: usize = rc.get("path_len")?;
    let batch_size: usize = rc.get("batch_size")?;
    let train_graphs = token_graphs(rc.get("train_graphs")?, path_len, seeds.train_data)?;
    let test_graphs = token_graphs(rc.get("test_graphs")?, path_len, seeds.test_data)?;
    let cfg = model_config(rc, train_graphs[0].feature_dim(), seeds.model)?;
    let tcfg = TrainConfig {
        lr: rc.get("lr")?,
        steps: rc.get("steps")?,
        seed: seeds.shuffle,
        ..TrainConfig::default()
    };
    if !(tcfg.lr >= 0.0 && tcfg.lr.is_finite()) {
        return Err(Failure::Config(format!("key `lr`: must be a non-negative number, got {}", tcfg.lr)));
    }
    let out = prepare_out(rc)?;

    let train_data = batches(&train_graphs, batch_size, &cfg, seeds.train_data)?;
    let test_data = batches(&test_graphs, batch_size, &cfg, seeds.test_data)?;
    let mut state = ModelState::new(&cfg)?;
    let losses = train_with(&mut state, &train_data, &tcfg, on_step)?;
    let (accuracy, traces) = evaluate(&state, &test_data)?;
    let report = utilization(&traces);

    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(csv, "{i},{l}").unwrap();
    }
    write(&out.join("loss.csv"), csv)?;
    write_json(
        &out.join("metrics.json"),
        &Metrics {
            accuracy,
            model: cfg.arch.as_str(),
            steps: tcfg.steps,
            final_loss: losses.last().copied().unwrap_or(f64::NAN),
            test_graphs: test_graphs.len(),
        },
    )?;
    write_json(
        &out.join("utilization.json"),
        &UtilizationFile {
            median_pct: report.median_pct(),
            report: &report,
        },
    )?;
    checkpoint::save(&state, out.join("checkpoint.json"))?;
    Ok(TrainOutcome {
        accuracy,
        losses,
        report,
        state,
    })
}
