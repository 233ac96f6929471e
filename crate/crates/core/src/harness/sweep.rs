//! Ablation grids over buffer design, placement, stage subset and α.

use crate::adapt::{Method, Objective, ParamGroup};
use crate::buffer::{Design, Placement, Selection};
use crate::error::{Error, Result};
use crate::model::Backbone;

use super::config::ExperimentConfig;
use super::run::{run_arm, run_parallel, thread_count, ArmPlan, ExperimentData};

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub sweep: &'static str,
    pub design: Design,
    pub placement: Placement,
    pub stages: String,
    pub alpha: f64,
    pub bs: usize,
    pub samples: usize,
    pub err: f64,
    pub step0_err: f64,
    /// Step-0 error of the same stream without buffers under the same
    /// normalization mode (α sweep only).
    pub ref_step0_err: Option<f64>,
}

pub const SWEEP_HEADER: &str = "sweep,design,placement,stages,alpha,bs,samples,err,step0_err,ref_step0_err";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:e},{},{},{:.6},{:.6},{}\n",
            r.sweep,
            r.design.number(),
            r.placement.roman(),
            r.stages,
            r.alpha,
            r.bs,
            r.samples,
            r.err,
            r.step0_err,
            r.ref_step0_err.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ));
    }
    out
}

/// The buffer-using arm a sweep adapts with: the first configured one, or
/// TENT@Buffer.
fn sweep_method(cfg: &ExperimentConfig) -> Method {
    cfg.arms
        .iter()
        .copied()
        .find(|m| m.uses_buffers())
        .unwrap_or(Method::Adapt(Objective::Tent, ParamGroup::Buffer))
}

struct Cell {
    sweep: &'static str,
    plan: ArmPlan,
}

fn run_cells(cfg: &ExperimentConfig, base: &Backbone, cells: Vec<Cell>) -> Result<Vec<SweepRow>> {
    if cells.is_empty() {
        return Err(Error::config("sweep", "grid is empty"));
    }
    cfg.validate()?;
    let mut data_cfg = cfg.clone();
    data_cfg.arms = vec![sweep_method(cfg)];
    data_cfg.probe.every = 0;
    let data = ExperimentData::for_config(&data_cfg, base.config.num_classes)?;
    let results = run_parallel(&cells, thread_count(), |c| run_arm(&data_cfg, base, &data, &c.plan))?;
    Ok(cells
        .iter()
        .zip(results)
        .map(|(c, r)| {
            let spec = r.spec.clone().expect("sweep arms use buffers");
            SweepRow {
                sweep: c.sweep,
                design: spec.design,
                placement: spec.placement,
                stages: spec.selection.label(),
                alpha: spec.alpha_init,
                bs: c.plan.batch_size,
                samples: r.samples(),
                err: r.mean_err(),
                step0_err: r.step0_err(),
                ref_step0_err: None,
            }
        })
        .collect())
}

fn cell(cfg: &ExperimentConfig, sweep: &'static str, bs: usize, edit: impl FnOnce(&mut crate::buffer::BufferSpec)) -> Cell {
    let mut spec = cfg.buffer_spec(bs);
    edit(&mut spec);
    Cell {
        sweep,
        plan: ArmPlan {
            method: sweep_method(cfg),
            batch_size: bs,
            run_id: format!("{sweep}-s{}", cfg.seed),
            spec: Some(spec),
            probes: false,
        },
    }
}

/// Designs ①–④ × placements (i)–(iii) at every sweep batch size.
pub fn sweep_module_design(cfg: &ExperimentConfig, base: &Backbone) -> Result<Vec<SweepRow>> {
    let mut cells = Vec::new();
    for bs in cfg.sweep_batch_sizes() {
        for design in Design::ALL {
            for placement in Placement::ALL {
                cells.push(cell(cfg, "module", bs, |s| {
                    s.design = design;
                    s.placement = placement;
                }));
            }
        }
    }
    run_cells(cfg, base, cells)
}

/// Every nonempty subset of stages.
pub fn sweep_placement(cfg: &ExperimentConfig, base: &Backbone) -> Result<Vec<SweepRow>> {
    let mut cells = Vec::new();
    for bs in cfg.sweep_batch_sizes() {
        for sel in Selection::all_stage_subsets() {
            let sel: Selection = match sel {
                Selection::Stages(s) => Selection::Stages(s.into_iter().filter(|&i| i < base.config.stages).collect()),
                other => other,
            };
            if matches!(&sel, Selection::Stages(s) if s.is_empty()) {
                continue;
            }
            cells.push(cell(cfg, "placement", bs, |s| s.selection = sel));
        }
    }
    run_cells(cfg, base, cells)
}

/// α = β over the grid plus an α = 0 control per batch size. Control rows
/// also carry the buffer-free step-0 error.
pub fn sweep_alpha(cfg: &ExperimentConfig, base: &Backbone) -> Result<Vec<SweepRow>> {
    if cfg.sweep_alpha.is_empty() {
        return Err(Error::config("sweep.alpha", "grid is empty"));
    }
    let mut cells = Vec::new();
    for bs in cfg.sweep_batch_sizes() {
        for &alpha in std::iter::once(&0.0).chain(&cfg.sweep_alpha) {
            cells.push(cell(cfg, "alpha", bs, |s| {
                s.alpha_init = alpha;
                s.beta_init = alpha;
            }));
        }
    }
    let mut rows = run_cells(cfg, base, cells)?;
    let mut ref_cfg = cfg.clone();
    ref_cfg.arms = vec![Method::BnStats];
    ref_cfg.probe.every = 0;
    let data = ExperimentData::for_config(&ref_cfg, base.config.num_classes)?;
    for row in rows.iter_mut().filter(|r| r.alpha == 0.0) {
        let plan = ArmPlan {
            method: Method::BnStats,
            batch_size: row.bs,
            spec: None,
            run_id: "alpha-ref".into(),
            probes: false,
        };
        row.ref_step0_err = Some(run_first_batch(&ref_cfg, base, &data, &plan)?);
    }
    Ok(rows)
}

fn run_first_batch(cfg: &ExperimentConfig, base: &Backbone, data: &ExperimentData, plan: &ArmPlan) -> Result<f64> {
    let mut short = cfg.clone();
    short.per_domain = plan.batch_size.min(cfg.per_domain);
    short.order = vec![cfg.domain_order()[0]];
    Ok(run_arm(&short, base, data, plan)?.step0_err())
}

/// Dispatches on an ablation scenario.
pub fn run_sweep(cfg: &ExperimentConfig, base: &Backbone) -> Result<Vec<SweepRow>> {
    use super::config::Scenario;
    match cfg.scenario {
        Scenario::AblationModule => sweep_module_design(cfg, base),
        Scenario::AblationPlacement => sweep_placement(cfg, base),
        Scenario::AblationAlpha => sweep_alpha(cfg, base),
        other => Err(Error::config("scenario", format!("`{other}` is not a sweep"))),
    }
}
