use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{evaluate_model, train_on, TrainConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{Aggregate, ThresholdSweep};

/// One ablation configuration; `None` keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub ffs_count: Option<usize>,
    pub use_ffm: Option<bool>,
    pub enable_body: Option<bool>,
    pub enable_bound: Option<bool>,
}

impl AblationCell {
    pub fn apply(&self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut c = base.clone();
        if let Some(n) = self.ffs_count {
            c.model.ffs.count = n;
        }
        if let Some(v) = self.use_ffm {
            c.model.ffs.use_ffm = v;
        }
        if let Some(v) = self.enable_body {
            c.loss.enable_body = v;
        }
        if let Some(v) = self.enable_bound {
            c.loss.enable_bound = v;
        }
        // Without FFS blocks there are no body/boundary heads to supervise.
        if c.model.ffs.count == 0 {
            c.loss.enable_body = false;
            c.loss.enable_bound = false;
        }
        c.validate()?;
        Ok(c)
    }

    fn slug(&self) -> String {
        self.label
            .chars()
            .map(|ch| if ch.is_ascii_alphanumeric() { ch.to_ascii_lowercase() } else { '_' })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GridSpec {
    /// Baseline, then one or two FFS blocks without and with FFM.
    Modules,
    /// Segmentation loss alone, plus body, plus boundary, plus both.
    LossTerms,
    /// Cartesian product of named axes.
    Axes(Vec<(String, Vec<String>)>),
}

fn parse_flag(axis: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Parameter(format!("axis {axis}: expected on/off, got {v:?}"))),
    }
}

/// `modules`, `losses`, or axes like `ffs_count=0,1,2;use_ffm=on,off`.
pub fn parse_grid(text: &str) -> Result<GridSpec> {
    match text.trim() {
        "modules" => return Ok(GridSpec::Modules),
        "losses" => return Ok(GridSpec::LossTerms),
        _ => {}
    }
    let mut axes = Vec::new();
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, values) = part
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("grid axis {part:?} is not name=values")))?;
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
        axes.push((name.trim().to_string(), values));
    }
    if axes.is_empty() {
        return Err(Error::Parameter("empty ablation grid".into()));
    }
    let grid = GridSpec::Axes(axes);
    grid.cells()?;
    Ok(grid)
}

impl GridSpec {
    pub fn cells(&self) -> Result<Vec<AblationCell>> {
        let cell = |label: &str, n: usize, ffm: bool, body: bool, bound: bool| AblationCell {
            label: label.into(),
            ffs_count: Some(n),
            use_ffm: Some(ffm),
            enable_body: Some(body),
            enable_bound: Some(bound),
        };
        match self {
            GridSpec::Modules => Ok(vec![
                cell("baseline", 0, false, false, false),
                cell("ffs x1", 1, false, true, true),
                cell("ffs x2", 2, false, true, true),
                cell("ffs x1 + ffm", 1, true, true, true),
                cell("ffs x2 + ffm", 2, true, true, true),
            ]),
            GridSpec::LossTerms => Ok(vec![
                cell("seg", 2, true, false, false),
                cell("seg + body", 2, true, true, false),
                cell("seg + bound", 2, true, false, true),
                cell("seg + body + bound", 2, true, true, true),
            ]),
            GridSpec::Axes(axes) => {
                let mut cells = vec![AblationCell::default()];
                for (name, values) in axes {
                    if values.is_empty() {
                        return Err(Error::Parameter(format!("axis {name} has no values")));
                    }
                    let mut next = Vec::new();
                    for c in &cells {
                        for v in values {
                            let mut c = c.clone();
                            match name.as_str() {
                                "ffs_count" => {
                                    let n: usize = v
                                        .parse()
                                        .ok()
                                        .filter(|n| *n <= 2)
                                        .ok_or_else(|| Error::Parameter(format!("ffs_count must be 0, 1 or 2, got {v:?}")))?;
                                    c.ffs_count = Some(n);
                                }
                                "use_ffm" => c.use_ffm = Some(parse_flag(name, v)?),
                                "enable_body" => c.enable_body = Some(parse_flag(name, v)?),
                                "enable_bound" => c.enable_bound = Some(parse_flag(name, v)?),
                                other => return Err(Error::Parameter(format!("unknown ablation axis {other:?}"))),
                            }
                            let sep = if c.label.is_empty() { "" } else { ", " };
                            c.label = format!("{}{sep}{name}={v}", c.label);
                            next.push(c);
                        }
                    }
                    cells = next;
                }
                Ok(cells)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub ffs_count: usize,
    pub use_ffm: bool,
    pub enable_body: bool,
    pub enable_bound: bool,
    pub seeds: Vec<u64>,
    /// Mean validation DSC of each seed's run.
    pub dsc_per_seed: Vec<f64>,
    pub hd_per_seed: Vec<Option<f64>>,
    pub dsc: Aggregate,
    pub hd: Aggregate,
    /// Final lambda values (FFS-1, FFS-2) of each seed's run.
    pub lambdas: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub dataset: String,
    pub fold: usize,
    pub rows: Vec<AblationRow>,
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell.label == label)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Config | FFS | FFM | L_seg | L_body | L_bound | DSC (%) | HD |");
        let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "| {} | {} | {} | x | {} | {} | {} | {} |",
                r.cell.label,
                r.ffs_count,
                mark(r.use_ffm),
                mark(r.enable_body),
                mark(r.enable_bound),
                r.dsc,
                r.hd
            );
        }
        s
    }

    /// Learned lambda per run, one line per (config, seed).
    pub fn lambda_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "| Config | Fold | Seed | lambda FFS-1 | lambda FFS-2 |");
        let _ = writeln!(s, "|---|---|---|---|---|");
        for r in self.rows.iter().filter(|r| r.ffs_count > 0) {
            for (seed, l) in r.seeds.iter().zip(&r.lambdas) {
                let fmt = |i: usize| l.get(i).map_or("-".to_string(), |v| format!("{v:.4}"));
                let _ = writeln!(s, "| {} | {} | {seed} | {} | {} |", r.cell.label, self.fold, fmt(0), fmt(1));
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("ablation.md", self.to_markdown()),
            ("lambdas.md", self.lambda_markdown()),
            ("ablation.json", serde_json::to_string_pretty(self)?),
        ] {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Trains and evaluates every cell once per seed with the base config's
/// fold, writing each run under `out_dir/<cell>/seed<k>`.
pub fn ablate(
    base: &TrainConfig,
    cells: &[AblationCell],
    seeds: &[u64],
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<AblationTable> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Parameter("ablation needs at least one cell and one seed".into()));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for cell in cells {
        let cfg = cell.apply(base)?;
        let mut dsc_per_seed = Vec::new();
        let mut hd_per_seed = Vec::new();
        let mut lambdas = Vec::new();
        for &seed in seeds {
            let run_dir = out_dir.join(cell.slug()).join(format!("seed{seed}"));
            let run_cfg = TrainConfig {
                seed,
                checkpoint_dir: run_dir.clone(),
                ..cfg.clone()
            };
            log::info!("ablation cell {:?}, seed {seed}", cell.label);
            let outcome = train_on(&run_cfg, dataset)?;
            let report = evaluate_model(
                &outcome.model,
                dataset,
                &outcome.val_ids,
                Some(run_cfg.fold),
                &ThresholdSweep::default(),
            )?;
            report.write(&run_dir)?;
            dsc_per_seed.push(report.dsc.mean);
            hd_per_seed.push((report.hd.count > 0).then_some(report.hd.mean));
            lambdas.push(outcome.model.lambda_values()?);
        }
        rows.push(AblationRow {
            cell: cell.clone(),
            ffs_count: cfg.model.ffs.count,
            use_ffm: cfg.model.ffs.use_ffm,
            enable_body: cfg.loss.enable_body,
            enable_bound: cfg.loss.enable_bound,
            seeds: seeds.to_vec(),
            dsc: Aggregate::from_values(dsc_per_seed.iter().map(|&v| Some(v))),
            hd: Aggregate::from_values(hd_per_seed.iter().copied()),
            dsc_per_seed,
            hd_per_seed,
            lambdas,
        });
    }
    let table = AblationTable {
        dataset: dataset.spec().name.clone(),
        fold: base.fold,
        rows,
    };
    table.write(out_dir)?;
    Ok(table)
}
