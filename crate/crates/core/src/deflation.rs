//! Deflation loop: find a minimizer, then repeatedly escape from all
//! archived minimizers with the penalized objective and polish the escaped
//! iterate with the plain objective.

use crate::error::Result;
use crate::fem::ElementwiseField;
use crate::objective::{shape_distance, ArchiveEntry, PenaltyParams, ShapeArchive};
use crate::optimizer::{
    DesignProblem, IterationRecord, LevelSet, OptimizeResult, OptimizeStatus, Optimizer,
    OptimizerSettings, PenaltyContext,
};
use crate::physics::FlowSolver;
use crate::topderiv::PenaltyTdVariant;

/// Outcome of one optimizer run inside the campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSummary {
    pub status: OptimizeStatus,
    pub iterations: usize,
    pub theta: f64,
    pub history: Vec<IterationRecord>,
}

impl PhaseSummary {
    fn from_result(r: &OptimizeResult) -> Self {
        PhaseSummary {
            status: r.status,
            iterations: r.iterations(),
            theta: r.theta,
            history: r.history.clone(),
        }
    }

    pub fn converged(&self) -> bool {
        self.status == OptimizeStatus::Converged
    }
}

/// One archived minimizer.
#[derive(Debug, Clone)]
pub struct Minimizer {
    pub round: usize,
    pub levelset: LevelSet,
    pub chi: ElementwiseField,
    pub objective: f64,
    pub fulfillment: f64,
    pub volume: f64,
    /// Penalized escape phase; `None` for the first minimizer.
    pub deflated: Option<PhaseSummary>,
    /// Plain-objective phase (the initial solve for round 0, else the
    /// restart).
    pub restart: PhaseSummary,
}

#[derive(Debug, Clone)]
pub struct DeflationResult {
    pub solutions: Vec<Minimizer>,
    pub archive: ShapeArchive,
}

impl DeflationResult {
    /// Symmetric matrix of pairwise shape distances.
    pub fn distances(&self, mesh: &crate::mesh::TriMesh) -> Result<Vec<Vec<f64>>> {
        let k = self.solutions.len();
        let mut d = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..i {
                let r = shape_distance(mesh, &self.solutions[i].chi, &self.solutions[j].chi)?;
                d[i][j] = r;
                d[j][i] = r;
            }
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeflationSettings {
    pub rounds: usize,
    pub penalty: PenaltyParams,
    pub variant: PenaltyTdVariant,
}

impl Default for DeflationSettings {
    fn default() -> Self {
        DeflationSettings {
            rounds: 2,
            penalty: PenaltyParams::default(),
            variant: PenaltyTdVariant::Paper,
        }
    }
}

/// Computes `1 + settings.rounds` minimizers. `on_round` runs after each
/// archived minimizer, with the archive already extended.
pub fn deflate(
    solver: &mut FlowSolver,
    optimizer_settings: OptimizerSettings,
    problem: DesignProblem,
    settings: DeflationSettings,
    mut on_round: impl FnMut(&Minimizer, &ShapeArchive) -> Result<()>,
) -> Result<DeflationResult> {
    settings.penalty.validate()?;
    let mut opt = Optimizer::new(solver, optimizer_settings, problem)?;
    let mut archive = ShapeArchive::new();
    let mut solutions: Vec<Minimizer> = Vec::with_capacity(settings.rounds + 1);

    let start = opt.initial_levelset()?;
    let first = opt.optimize(&start, None, |_| {})?;
    log_phase(0, "initial", &first);
    let m = archive_minimizer(&mut archive, 0, None, &first)?;
    on_round(&m, &archive)?;
    solutions.push(m);

    for i in 0..settings.rounds {
        let round = i + 1;
        let previous = solutions[i].levelset.clone();
        let ctx = PenaltyContext {
            archive: &archive,
            params: settings.penalty,
            variant: settings.variant,
        };
        let escaped = opt.optimize(&previous, Some(&ctx), |_| {})?;
        log_phase(round, "deflated", &escaped);
        let restart = opt.optimize(&escaped.design.levelset, None, |_| {})?;
        log_phase(round, "restart", &restart);
        let m = archive_minimizer(
            &mut archive,
            round,
            Some(PhaseSummary::from_result(&escaped)),
            &restart,
        )?;
        on_round(&m, &archive)?;
        solutions.push(m);
    }
    Ok(DeflationResult { solutions, archive })
}

fn log_phase(round: usize, phase: &str, r: &OptimizeResult) {
    if r.status == OptimizeStatus::Converged {
        log::info!(
            "round {round} {phase}: converged after {} iterations, J = {:.6e}, fulfillment = {:.4}",
            r.iterations(),
            r.design.objective,
            r.design.fulfillment
        );
    } else {
        log::warn!(
            "round {round} {phase}: iteration cap reached (theta = {:.4}), continuing with the last iterate",
            r.theta
        );
    }
}

fn archive_minimizer(
    archive: &mut ShapeArchive,
    round: usize,
    deflated: Option<PhaseSummary>,
    restart: &OptimizeResult,
) -> Result<Minimizer> {
    let d = &restart.design;
    archive.push(ArchiveEntry {
        chi: d.chi.clone(),
        round,
        objective: d.objective,
        fulfillment: d.fulfillment,
    })?;
    Ok(Minimizer {
        round,
        levelset: d.levelset.clone(),
        chi: d.chi.clone(),
        objective: d.objective,
        fulfillment: d.fulfillment,
        volume: d.volume,
        deflated,
        restart: PhaseSummary::from_result(restart),
    })
}
