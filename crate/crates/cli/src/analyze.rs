use std::fmt::Write as _;
use std::path::PathBuf;

use rehub_core::checkpoint;
use rehub_core::metrics::{bhattacharyya_percentage, UtilizationReport, HISTOGRAM_BINS};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{batches, check_task, evaluate, token_graphs, utilization, Seeds};
use crate::{prepare_out, write, write_json, Failure};

pub struct AnalyzeOutcome {
    pub report: UtilizationReport,
    /// `(graph, layer, percentage)` for every evaluation graph.
    pub bhattacharyya: Vec<(usize, usize, f64)>,
    pub accuracy: f64,
}

#[derive(Serialize)]
struct Summary {
    median_utilization_pct: Option<f64>,
    accuracy: f64,
    graphs: usize,
    layers: usize,
}

pub fn run(rc: &RunConfig) -> Result<AnalyzeOutcome, Failure> {
    check_task(rc)?;
    let ckpt = match rc.raw("checkpoint") {
        "" => rc.out_dir().join("checkpoint.json"),
        p => PathBuf::from(p),
    };
    if !ckpt.is_file() {
        return Err(Failure::MissingArtifact(format!("checkpoint {} not found", ckpt.display())));
    }
    let state = checkpoint::load(&ckpt)?;
    let seeds = Seeds::from_master(rc.seed()?);
    let graphs = token_graphs(rc.get("test_graphs")?, rc.get("path_len")?, seeds.test_data)?;
    let data = batches(&graphs, rc.get("batch_size")?, state.config(), seeds.test_data)?;
    let out = prepare_out(rc)?;

    let (accuracy, traces) = evaluate(&state, &data)?;
    let report = utilization(&traces);
    let mut bhattacharyya = Vec::new();
    let mut graph = 0;
    for t in &traces {
        for (l, layer) in t.layers.iter().enumerate() {
            for (g, a) in layer.assignments.iter().enumerate() {
                bhattacharyya.push((graph + g, l, bhattacharyya_percentage(a)?));
            }
        }
        graph += t.hub_counts.len();
    }
    bhattacharyya.sort_by_key(|&(g, l, _)| (g, l));

    let mut hist = String::from("layer,bin_lower_pct,bin_upper_pct,share_pct\n");
    let width = 100 / HISTOGRAM_BINS;
    for layer in &report.layers {
        for (b, share) in layer.histogram.iter().enumerate() {
            writeln!(hist, "{},{},{},{share}", layer.layer, b * width, (b + 1) * width).unwrap();
        }
    }
    write(&out.join("utilization_histogram.csv"), hist)?;
    let mut bc = String::from("graph,layer,bhattacharyya_pct\n");
    for (g, l, p) in &bhattacharyya {
        writeln!(bc, "{g},{l},{p}").unwrap();
    }
    write(&out.join("bhattacharyya.csv"), bc)?;
    write_json(
        &out.join("analysis.json"),
        &Summary {
            median_utilization_pct: report.median_pct().map(|m| 100.0 * m),
            accuracy,
            graphs: graphs.len(),
            layers: report.layers.len(),
        },
    )?;
    Ok(AnalyzeOutcome {
        report,
        bhattacharyya,
        accuracy,
    })
}
