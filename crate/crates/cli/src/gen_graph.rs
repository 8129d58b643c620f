use std::path::PathBuf;

use rehub_core::graph::{random_regular, save_graph};

use crate::config::RunConfig;
use crate::{prepare_out, Failure};

pub fn run(rc: &RunConfig) -> Result<PathBuf, Failure> {
    let n: usize = rc.get("n")?;
    let d: usize = rc.get("d")?;
    if !(n * d).is_multiple_of(2) {
        return Err(Failure::Config(format!("n*d = {} must be even", n * d)));
    }
    if d >= n {
        return Err(Failure::Config(format!("degree {d} must be below n = {n}")));
    }
    let g = random_regular(n, d, rc.seed()?)?;
    let path = prepare_out(rc)?.join(rc.raw("file"));
    save_graph(&g, &path)?;
    Ok(path)
}
