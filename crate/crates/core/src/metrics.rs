//! Hub utilization, load balance and scaling measurements.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{batch, random_regular_with_dims};
use crate::hubs::AssignmentMatrix;
use crate::model::{Arch, ModelConfig, ModelState, PreparedBatch};
use crate::tensor::Tape;

/// Number of hubs wired to at least one spoke, and that count over `N_h`.
pub fn hub_utilization(a: &AssignmentMatrix) -> (usize, f64) {
    let used = a.hub_loads().iter().filter(|&&l| l > 0).count();
    let pct = if a.n_hubs() == 0 { 0.0 } else { used as f64 / a.n_hubs() as f64 };
    (used, pct)
}

/// Fraction of all connections landing on each hub.
pub fn spoke_load_distribution(a: &AssignmentMatrix) -> Vec<f64> {
    let total = a.num_connections() as f64;
    a.hub_loads().into_iter().map(|l| l as f64 / total).collect()
}

/// Bhattacharyya coefficient `sum sqrt(p q)`.
pub fn bhattacharyya(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Contract(format!("distributions of length {} and {}", p.len(), q.len())));
    }
    for (name, d) in [("P", p), ("Q", q)] {
        if d.iter().any(|&x| x.is_nan() || x < 0.0) {
            return Err(Error::Contract(format!("{name} has a negative or NaN entry")));
        }
        let s: f64 = d.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("{name} sums to {s}")));
        }
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a * b).sqrt()).sum())
}

/// Similarity of an assignment's load distribution to uniform, in percent.
pub fn bhattacharyya_percentage(a: &AssignmentMatrix) -> Result<f64> {
    let p = spoke_load_distribution(a);
    let u = vec![1.0 / a.n_hubs() as f64; a.n_hubs()];
    Ok(100.0 * bhattacharyya(&p, &u)?)
}

pub const HISTOGRAM_BINS: usize = 10;

/// Bin index for a utilization fraction; 10% wide bins with 100% in the last.
pub fn utilization_bin(pct: f64) -> usize {
    ((pct * HISTOGRAM_BINS as f64).floor() as usize).min(HISTOGRAM_BINS - 1)
}

/// Utilization of every graph at one layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerUtilization {
    pub layer: usize,
    pub used: Vec<usize>,
    pub pct: Vec<f64>,
    /// Share of graphs per 10% bin, in percent.
    pub histogram: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UtilizationReport {
    pub layers: Vec<LayerUtilization>,
}

impl UtilizationReport {
    /// `assignments[l][g]` is graph `g`'s assignment at layer `l`.
    pub fn from_assignments(assignments: &[Vec<&AssignmentMatrix>]) -> Self {
        let layers = assignments
            .iter()
            .enumerate()
            .map(|(layer, graphs)| {
                let (used, pct): (Vec<_>, Vec<_>) = graphs.iter().map(|a| hub_utilization(a)).unzip();
                let mut histogram = vec![0.0; HISTOGRAM_BINS];
                for &p in &pct {
                    histogram[utilization_bin(p)] += 100.0 / pct.len() as f64;
                }
                LayerUtilization {
                    layer,
                    used,
                    pct,
                    histogram,
                }
            })
            .collect();
        Self { layers }
    }

    /// Median utilization fraction over every graph and layer.
    pub fn median_pct(&self) -> Option<f64> {
        let mut all: Vec<f64> = self.layers.iter().flat_map(|l| l.pct.iter().copied()).collect();
        if all.is_empty() {
            return None;
        }
        all.sort_by(f64::total_cmp);
        let m = all.len() / 2;
        Some(if all.len() % 2 == 1 { all[m] } else { (all[m - 1] + all[m]) / 2.0 })
    }
}

/// One forward pass at one graph size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRecord {
    pub n_nodes: usize,
    pub peak_elems: usize,
    pub op_count: u64,
    pub wall_ms: f64,
    pub mode: Arch,
    /// Set when the run was skipped because it would not fit the element
    /// budget; the numeric fields are then zero.
    pub budget_exceeded: bool,
}

pub const SCALING_CSV_HEADER: &str = "n_nodes,peak_elems,op_count,wall_ms,mode";

impl ScalingRecord {
    pub fn csv_row(&self) -> String {
        let mode = if self.budget_exceeded {
            format!("{}_budget_exceeded", self.mode)
        } else {
            self.mode.to_string()
        };
        format!("{},{},{},{:.3},{}", self.n_nodes, self.peak_elems, self.op_count, self.wall_ms, mode)
    }
}

pub const SCALING_DEGREE: usize = 3;

/// Builds a `d = 3` random regular graph for each size and records the
/// allocation high-water mark and op count of one forward pass.
///
/// `budget` caps the estimated element count of a run; larger runs are
/// recorded as budget-exceeded without being executed.
pub fn measure_scaling(cfg: &ModelConfig, sizes: &[usize], seed: u64, budget: Option<usize>) -> Result<Vec<ScalingRecord>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("sizes must be strictly ascending".into()));
    }
    let state = ModelState::new(cfg)?;
    let mut out = Vec::with_capacity(sizes.len());
    for (i, &n) in sizes.iter().enumerate() {
        if budget.is_some_and(|b| estimated_elements(cfg, n) > b) {
            out.push(ScalingRecord {
                n_nodes: n,
                peak_elems: 0,
                op_count: 0,
                wall_ms: 0.0,
                mode: cfg.arch,
                budget_exceeded: true,
            });
            continue;
        }
        let g = random_regular_with_dims(n, SCALING_DEGREE, cfg.input_dim, 1, seed.wrapping_add(i as u64))?;
        let prepared = PreparedBatch::new(batch(&[g])?, cfg, seed)?;
        let mut tape = Tape::new();
        let start = Instant::now();
        tape.reset_peak();
        let vars = state.bind(&mut tape);
        state.forward(&mut tape, &vars, &prepared, None)?;
        let wall_ms = start.elapsed().as_secs_f64() * 1e3;
        out.push(ScalingRecord {
            n_nodes: n,
            peak_elems: tape.peak_elements(),
            op_count: tape.op_count(),
            wall_ms,
            mode: cfg.arch,
            budget_exceeded: false,
        });
    }
    Ok(out)
}

/// Upper estimate used only to decide whether a run fits the budget: the
/// dense reference keeps two `n x n` matrices per head and layer.
pub fn estimated_elements(cfg: &ModelConfig, n: usize) -> usize {
    let linear = n * (cfg.input_dim + 64 * cfg.hidden_dim * cfg.layers);
    match cfg.arch {
        Arch::DenseReference => linear + 2 * cfg.heads * cfg.layers * n * n,
        _ => linear,
    }
}

/// Ordinary least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 points, got {}", points.len())));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0)) {
        return Err(Error::InvalidParameter("log-log fit needs positive values".into()));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("all x values identical".into()));
    }
    Ok(sxy / sxx)
}

/// Fewest sizes a scaling slope is fitted over.
pub const MIN_SLOPE_POINTS: usize = 5;

/// Slope of peak elements over the records that actually ran.
pub fn peak_slope(records: &[ScalingRecord]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| !r.budget_exceeded)
        .map(|r| (r.n_nodes as f64, r.peak_elems as f64))
        .collect();
    if pts.len() < MIN_SLOPE_POINTS {
        return Err(Error::InvalidParameter(format!(
            "{} sizes ran, a slope needs at least {MIN_SLOPE_POINTS}",
            pts.len()
        )));
    }
    loglog_slope(&pts)
}
