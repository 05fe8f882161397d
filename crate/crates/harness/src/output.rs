//! Run directories and the CSV / JSON / SVG files written into them.
//!
//! CSV schemas (UTF-8, comma separated, header row always present):
//!
//! * `record.csv`: `iter,t,residual_norm,inner_residual_norm,forwards,backwards,state_0..`
//!   (`inner_residual_norm` empty when there is no inner phase; passes are cumulative).
//! * `samples.csv`: `label,x_0..` (`label` empty for unconditional draws).
//! * `trajectories.csv`: `traj,step,t,x_0..`.
//! * `losses.csv`: `step,loss`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::Array2;
use rfprior::sampler::Trajectory;
use rfprior::RunRecord;
use serde::Serialize;

use crate::plot::Plot;

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Self { root })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Subdirectory for one seed of a fan-out.
    pub fn child(&self, name: &str) -> Result<Self> {
        Self::create(self.root.join(name))
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<()> {
        let p = self.file(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        self.write_text(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    pub fn write_svg(&self, name: &str, plot: &Plot) -> Result<()> {
        self.write_text(name, &plot.to_svg())
    }

    fn csv(&self, name: &str) -> Result<csv::Writer<fs::File>> {
        let p = self.file(name);
        csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_record(&self, name: &str, rec: &RunRecord, state_dim: usize) -> Result<()> {
        let mut w = self.csv(name)?;
        let mut header: Vec<String> =
            ["iter", "t", "residual_norm", "inner_residual_norm", "forwards", "backwards"].map(String::from).to_vec();
        header.extend((0..state_dim).map(|i| format!("state_{i}")));
        w.write_record(&header)?;
        for r in &rec.rows {
            let mut row = vec![
                r.iter.to_string(),
                r.t.to_string(),
                r.residual_norm.to_string(),
                r.inner_residual_norm.map(|v| v.to_string()).unwrap_or_default(),
                r.passes.forwards.to_string(),
                r.passes.backwards.to_string(),
            ];
            row.extend(r.state.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_samples(&self, name: &str, x: &Array2<f64>, labels: &[Option<usize>]) -> Result<()> {
        let mut w = self.csv(name)?;
        let mut header = vec!["label".to_string()];
        header.extend((0..x.ncols()).map(|i| format!("x_{i}")));
        w.write_record(&header)?;
        for (i, row) in x.rows().into_iter().enumerate() {
            let mut out = vec![labels.get(i).copied().flatten().map(|l| l.to_string()).unwrap_or_default()];
            out.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&out)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_trajectories(&self, name: &str, trajs: &[Trajectory]) -> Result<()> {
        let mut w = self.csv(name)?;
        let dim = trajs.first().and_then(|t| t.first()).map_or(0, |(_, x)| x.len());
        let mut header = ["traj", "step", "t"].map(String::from).to_vec();
        header.extend((0..dim).map(|i| format!("x_{i}")));
        w.write_record(&header)?;
        for (k, traj) in trajs.iter().enumerate() {
            for (step, (t, x)) in traj.iter().enumerate() {
                let mut row = vec![k.to_string(), step.to_string(), t.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_losses(&self, name: &str, losses: &[f64]) -> Result<()> {
        let mut w = self.csv(name)?;
        w.write_record(["step", "loss"])?;
        for (i, l) in losses.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// First two coordinates of every row.
pub fn xy(x: &Array2<f64>) -> Vec<(f64, f64)> {
    x.rows().into_iter().map(|r| (r[0], if r.len() > 1 { r[1] } else { 0.0 })).collect()
}
