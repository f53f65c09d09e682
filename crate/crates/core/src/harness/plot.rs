//! CSV series for sampling-path and convergence plots.

use std::fs;
use std::path::{Path, PathBuf};

use crate::datagen::csv_to_file;
use crate::error::{Error, Result};
use crate::harness::report::quartiles;
use crate::sampler::Trajectory;

/// Writes `objective_summary.csv` (`step,t,median,q25,q75` across samples)
/// and one `trajectories/sample_<i>.csv` (`step,t,x_1..x_n,f_of_mu`) per
/// sample. `grid` holds the time index of every recorded state. Returns the
/// paths written; an empty trajectory list writes nothing.
pub fn emit_plot_data(trajectories: &[Trajectory], grid: &[usize], dir: &Path) -> Result<Vec<PathBuf>> {
    if trajectories.is_empty() {
        return Ok(Vec::new());
    }
    for tr in trajectories {
        if tr.states.len() != grid.len() || tr.objective_trace.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "trajectory has {} states for a grid of {}",
                tr.states.len(),
                grid.len()
            )));
        }
    }
    let traj_dir = dir.join("trajectories");
    fs::create_dir_all(&traj_dir).map_err(|e| Error::file(&traj_dir, e))?;
    let mut written = Vec::with_capacity(trajectories.len() + 1);

    let summary = dir.join("objective_summary.csv");
    let mut w = csv::Writer::from_path(&summary).map_err(|e| csv_to_file(&summary, e))?;
    w.write_record(["step", "t", "median", "q25", "q75"])?;
    for (k, t) in grid.iter().enumerate() {
        let column: Vec<f64> = trajectories.iter().map(|tr| tr.objective_trace[k]).collect();
        let (med, q25, q75) = quartiles(&column);
        w.write_record([k.to_string(), t.to_string(), format!("{med:?}"), format!("{q25:?}"), format!("{q75:?}")])?;
    }
    w.flush()?;
    written.push(summary);

    let n = trajectories[0].states[0].len();
    for (i, tr) in trajectories.iter().enumerate() {
        let path = traj_dir.join(format!("sample_{i}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_to_file(&path, e))?;
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((1..=n).map(|j| format!("x_{j}")));
        header.push("f_of_mu".into());
        w.write_record(&header)?;
        for (k, (state, f)) in tr.states.iter().zip(&tr.objective_trace).enumerate() {
            let mut rec = vec![k.to_string(), grid[k].to_string()];
            rec.extend(state.iter().map(|v| format!("{v:?}")));
            rec.push(format!("{f:?}"));
            w.write_record(&rec)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
