//! Subcommand drivers shared by the binary and the tests. Each returns a
//! JSON report and writes its files below `output_dir`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};

use super::config::RunConfig;
use super::files::{
    read_field_vtk, summary_json, write_atomic, write_field_vtk, write_history_csv, FieldSet,
};
use crate::deflation::{deflate, DeflationResult, Minimizer, PhaseSummary};
use crate::error::{Error, Result};
use crate::fem::ElementwiseField;
use crate::mesh::{build_unit_square_mesh, BoundaryTag, TriMesh};
use crate::objective::{evaluate_objective, fulfillment_fraction};
use crate::optimizer::{
    alpha_from_characteristic, fluid_volume, Design, OptimizeStatus, Optimizer,
};
use crate::physics::{boundary_flux, FlowSolver, FlowState, InflowProfile, SmoothedVelocity};

#[derive(Debug, Clone, PartialEq)]
pub enum Command {
    /// Forward solve for a stored shape.
    Solve { shape: PathBuf },
    /// Single minimizer from the default initial shape.
    Optimize,
    /// Deflation campaign.
    Deflate,
    /// Objective and fulfillment of a stored shape.
    Eval { shape: PathBuf },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Solve { .. } => "solve",
            Command::Optimize => "optimize",
            Command::Deflate => "deflate",
            Command::Eval { .. } => "eval",
        }
    }
}

/// Validates everything, echoes the config, then runs `command`.
pub fn run(command: &Command, config: &RunConfig) -> Result<Value> {
    config.validate()?;
    config.optimizer_settings().validate()?;
    config.design_problem().validate()?;
    config.penalty_params().validate()?;
    let mesh = Arc::new(build_unit_square_mesh(config.mesh_n)?);
    let shape = match command {
        Command::Solve { shape } | Command::Eval { shape } => Some(read_shape(shape, &mesh)?),
        _ => None,
    };
    let out = PathBuf::from(&config.output_dir);
    write_atomic(&out.join("config.resolved"), config.to_text().as_bytes())?;
    let mut solver = FlowSolver::new(mesh.clone(), config.dt, InflowProfile::default())?;
    match (command, shape) {
        (Command::Solve { .. }, Some(chi)) => run_solve(&mut solver, config, &chi, &out),
        (Command::Eval { .. }, Some(chi)) => run_eval(&mut solver, config, &chi, &out),
        (Command::Optimize, _) => run_optimize(&mut solver, config, &out),
        (Command::Deflate, _) => run_deflate(&mut solver, config, &out),
        _ => unreachable!("shape commands always carry a shape"),
    }
}

/// Reads the `chi` cell array of a field file written for `mesh`.
pub fn read_shape(path: &Path, mesh: &TriMesh) -> Result<ElementwiseField> {
    let data = read_field_vtk(path)?;
    data.check_mesh(mesh, path)?;
    let chi = data.fields.cell_array("chi").ok_or_else(|| Error::Format {
        path: path.into(),
        message: "no cell array named `chi`".into(),
    })?;
    if let Some(bad) = chi.iter().find(|&&c| c != 0.0 && c != 1.0) {
        return Err(Error::Format {
            path: path.into(),
            message: format!("`chi` must contain only 0 and 1, found {bad}"),
        });
    }
    Ok(ElementwiseField {
        values: chi.to_vec(),
    })
}

/// Vertex values of the state fields plus the given shape arrays.
pub fn design_fields(
    mesh: &TriMesh,
    psi: Option<&[f64]>,
    chi: &ElementwiseField,
    alpha: &ElementwiseField,
    flow: &FlowState,
    smoothed: &SmoothedVelocity,
) -> FieldSet {
    let nv = mesh.n_vertices();
    let mut fields = FieldSet::default();
    if let Some(psi) = psi {
        fields = fields.with_point("psi", psi.to_vec());
    }
    fields
        .with_point("velocity_norm", flow.u.dof_norms()[..nv].to_vec())
        .with_point(
            "smoothed_velocity_norm",
            smoothed.u_s.dof_norms()[..nv].to_vec(),
        )
        .with_cell("chi", chi.values.clone())
        .with_cell("alpha", alpha.values.clone())
}

fn design_vtk(mesh: &TriMesh, d: &Design, path: &Path) -> Result<()> {
    let fields = design_fields(
        mesh,
        Some(d.levelset.values()),
        &d.chi,
        &d.alpha,
        &d.flow,
        &d.smoothed,
    );
    write_field_vtk(mesh, &fields, path)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Consistency(format!("json serialization: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn shape_state(
    solver: &mut FlowSolver,
    config: &RunConfig,
    chi: &ElementwiseField,
) -> Result<(ElementwiseField, FlowState, SmoothedVelocity)> {
    let alpha = alpha_from_characteristic(chi, config.alpha_l, config.alpha_u);
    let flow = solver.solve_flow(&alpha)?;
    let smoothed = solver.solve_smoothing(&flow.u)?;
    Ok((alpha, flow, smoothed))
}

fn run_solve(
    solver: &mut FlowSolver,
    config: &RunConfig,
    chi: &ElementwiseField,
    out: &Path,
) -> Result<Value> {
    let mesh = solver.mesh_arc();
    let (alpha, flow, smoothed) = shape_state(solver, config, chi)?;
    let fields = design_fields(&mesh, None, chi, &alpha, &flow, &smoothed);
    write_field_vtk(&mesh, &fields, &out.join("solve.vtk"))?;
    let report = json!({
        "command": "solve",
        "inlet_flux": boundary_flux(&mesh, &flow.u, BoundaryTag::Inlet),
        "outlet_flux": boundary_flux(&mesh, &flow.u, BoundaryTag::Outlet),
        "J": evaluate_objective(&mesh, &smoothed, config.u_t)?,
        "fulfillment": fulfillment_fraction(&mesh, &smoothed, config.u_t)?,
        "volume": fluid_volume(&mesh, chi),
    });
    write_json(&out.join("solve.json"), &report)?;
    Ok(report)
}

fn run_eval(
    solver: &mut FlowSolver,
    config: &RunConfig,
    chi: &ElementwiseField,
    out: &Path,
) -> Result<Value> {
    let mesh = solver.mesh_arc();
    let (_, _, smoothed) = shape_state(solver, config, chi)?;
    let report = json!({
        "command": "eval",
        "J": evaluate_objective(&mesh, &smoothed, config.u_t)?,
        "fulfillment": fulfillment_fraction(&mesh, &smoothed, config.u_t)?,
        "volume": fluid_volume(&mesh, chi),
    });
    write_json(&out.join("eval.json"), &report)?;
    Ok(report)
}

fn run_optimize(solver: &mut FlowSolver, config: &RunConfig, out: &Path) -> Result<Value> {
    let mesh = solver.mesh_arc();
    let mut opt = Optimizer::new(solver, config.optimizer_settings(), config.design_problem())?;
    let start = opt.initial_levelset()?;
    let r = opt.optimize(&start, None, |rec| {
        log::info!(
            "iter {} J {:.6e} theta {:.4} volume {:.4} fulfillment {:.4}",
            rec.iteration,
            rec.objective,
            rec.theta,
            rec.volume,
            rec.fulfillment
        )
    })?;
    if r.status == OptimizeStatus::IterationCap {
        log::warn!("iteration cap reached with theta = {:.4}", r.theta);
    }
    write_history_csv(&r.history, &out.join("history.csv"))?;
    design_vtk(&mesh, &r.design, &out.join("design.vtk"))?;
    let report = json!({
        "command": "optimize",
        "converged": r.status == OptimizeStatus::Converged,
        "iterations": r.iterations(),
        "theta": r.theta,
        "J": r.design.objective,
        "fulfillment": r.design.fulfillment,
        "volume": r.design.volume,
    });
    write_json(&out.join("result.json"), &report)?;
    Ok(report)
}

fn phase_csv(round: usize, name: &str, phase: &PhaseSummary, out: &Path) -> Result<()> {
    write_history_csv(
        &phase.history,
        &out.join(format!("history_{round}_{name}.csv")),
    )
}

fn run_deflate(solver: &mut FlowSolver, config: &RunConfig, out: &Path) -> Result<Value> {
    let mesh = solver.mesh_arc();
    let mut found: Vec<Minimizer> = Vec::new();
    let result = deflate(
        solver,
        config.optimizer_settings(),
        config.design_problem(),
        config.deflation_settings(),
        |m, archive| {
            found.push(m.clone());
            let r = m.round;
            let psi = m.levelset.values();
            let alpha = alpha_from_characteristic(&m.chi, config.alpha_l, config.alpha_u);
            let fields = FieldSet::default()
                .with_point("psi", psi.to_vec())
                .with_cell("chi", m.chi.values.clone())
                .with_cell("alpha", alpha.values);
            write_field_vtk(&mesh, &fields, &out.join(format!("minimizer_{r}.vtk")))?;
            if let Some(d) = &m.deflated {
                phase_csv(r, "deflated", d, out)?;
            }
            phase_csv(
                r,
                if r == 0 { "initial" } else { "restart" },
                &m.restart,
                out,
            )?;
            let partial = DeflationResult {
                solutions: found.clone(),
                archive: archive.clone(),
            };
            super::files::write_summary_json(&partial, &mesh, &out.join("summary.json"))
        },
    )?;
    let summary = summary_json(&result, &mesh)?;
    serde_json::to_value(&summary)
        .map(|mut v| {
            v["command"] = json!("deflate");
            v
        })
        .map_err(|e| Error::Consistency(format!("json serialization: {e}")))
}
