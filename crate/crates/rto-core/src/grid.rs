//! Design domains: rectangular grids, density fields, boundary conditions,
//! passive masks and the built-in problem presets.
//!
//! All flattened per-element and per-node data is row-major with the origin at
//! the top-left pixel; coordinates are x-right, y-up.

use crate::{Result, RtoError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which physics the finite element kernel solves on the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Physics {
    /// Plane-stress elasticity, 2 DOF per node.
    Elasticity,
    /// Steady-state heat conduction, 1 DOF per node.
    HeatConduction,
}

impl Physics {
    pub fn dofs_per_node(&self) -> usize {
        match self {
            Physics::Elasticity => 2,
            Physics::HeatConduction => 1,
        }
    }
}

/// Regular rectangular grid of square elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Element count, horizontal.
    pub nx: usize,
    /// Element count, vertical.
    pub ny: usize,
    /// Physical edge length of one element.
    pub element_size: f64,
}

impl GridSpec {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(RtoError::Geometry(format!(
                "grid must be at least 2x2, got {nx}x{ny}"
            )));
        }
        Ok(GridSpec { nx, ny, element_size: 1.0 })
    }

    pub fn element_count(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node_count(&self) -> usize {
        (self.nx + 1) * (self.ny + 1)
    }

    /// Node index for node row `r` (0 = top) and column `c`.
    pub fn node_index(&self, r: usize, c: usize) -> usize {
        r * (self.nx + 1) + c
    }

    /// Element index for element row `r` (0 = top) and column `c`.
    pub fn element_index(&self, r: usize, c: usize) -> usize {
        r * self.nx + c
    }
}

/// Per-element material densities, the design variable.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: GridSpec,
    /// Row-major from the top-left element.
    pub values: Vec<f64>,
}

impl DensityField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.element_count() {
            return Err(RtoError::Shape(format!(
                "density field has {} values for a {}x{} grid",
                values.len(),
                grid.nx,
                grid.ny
            )));
        }
        Ok(DensityField { grid, values })
    }

    pub fn uniform(grid: GridSpec, value: f64) -> Self {
        DensityField { grid, values: vec![value; grid.element_count()] }
    }

    /// Mean density over all elements.
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Flags elements outside the designable region; passive elements stay pinned
/// at the minimum density for the whole optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct PassiveMask {
    pub grid: GridSpec,
    pub flags: Vec<bool>,
}

impl PassiveMask {
    pub fn none(grid: GridSpec) -> Self {
        PassiveMask { grid, flags: vec![false; grid.element_count()] }
    }

    pub fn designable_count(&self) -> usize {
        self.flags.iter().filter(|&&f| !f).count()
    }
}

/// The uncertain load acting on the structure, parameterized by a scalar ξ.
#[derive(Debug, Clone, PartialEq)]
pub enum LoadModel {
    /// Point load of fixed magnitude at one node; ξ is the angle measured
    /// counter-clockwise from the downward vertical.
    PointLoadRandomAngle { node: usize, magnitude: f64, angle_range: (f64, f64) },
    /// Distributed nodal load F = Fx·cos ξ + Fy·sin ξ.
    FieldLoadRandomPhase { fx: Vec<f64>, fy: Vec<f64>, phase_range: (f64, f64) },
}

impl LoadModel {
    pub fn xi_range(&self) -> (f64, f64) {
        match self {
            LoadModel::PointLoadRandomAngle { angle_range, .. } => *angle_range,
            LoadModel::FieldLoadRandomPhase { phase_range, .. } => *phase_range,
        }
    }
}

/// Material constants; only `poisson` is elasticity-specific.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Material {
    /// Young's modulus (elasticity) or conductivity (conduction) of solid material.
    pub prop0: f64,
    pub poisson: f64,
}

impl Default for Material {
    fn default() -> Self {
        Material { prop0: 1.0, poisson: 0.3 }
    }
}

/// Full problem description: physics, geometry, constraints, loads.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub physics: Physics,
    pub grid: GridSpec,
    /// Constrained node-DOF indices, all fixed to zero.
    pub dirichlet: Vec<usize>,
    pub load_model: LoadModel,
    pub passive: PassiveMask,
    pub volume_fraction: f64,
    pub penalty: f64,
    pub theta_min: f64,
    pub material: Material,
}

impl ProblemSpec {
    pub fn dof_count(&self) -> usize {
        self.grid.node_count() * self.physics.dofs_per_node()
    }

    /// Checks the structural invariants that every generated spec must hold.
    pub fn validate(&self) -> Result<()> {
        if self.dirichlet.is_empty() {
            return Err(RtoError::Geometry("no Dirichlet constraints".into()));
        }
        let ndof = self.dof_count();
        if let Some(&bad) = self.dirichlet.iter().find(|&&d| d >= ndof) {
            return Err(RtoError::Geometry(format!(
                "Dirichlet index {bad} out of range (ndof = {ndof})"
            )));
        }
        if self.passive.designable_count() == 0 {
            return Err(RtoError::Geometry("no designable elements".into()));
        }
        if !(self.volume_fraction > 0.0 && self.volume_fraction <= 1.0) {
            return Err(RtoError::Parameter(format!(
                "volume fraction {} outside (0, 1]",
                self.volume_fraction
            )));
        }
        if let LoadModel::FieldLoadRandomPhase { fx, fy, .. } = &self.load_model {
            if fx.len() != self.grid.node_count() || fy.len() != self.grid.node_count() {
                return Err(RtoError::Shape("field load length != node count".into()));
            }
        }
        let (lo, hi) = self.load_model.xi_range();
        if !(lo < hi) {
            return Err(RtoError::Parameter("empty xi range".into()));
        }
        Ok(())
    }
}

/// L-shaped bracket under a point load with uncertain angle.
///
/// The L is carved from an `n`×`n` grid: the top-right block (columns ≥
/// `arm_fraction·n`, rows < `(1-arm_fraction)·n`) is passive. The top edge of
/// the vertical arm is fully fixed and the load acts at the mid-height node of
/// the right edge of the horizontal arm, with angle uniform on [0, π].
pub fn make_l_bracket(n: usize, arm_fraction: f64, magnitude: f64) -> Result<ProblemSpec> {
    if n < 10 {
        return Err(RtoError::Parameter(format!("n = {n} < 10")));
    }
    if !(arm_fraction > 0.0 && arm_fraction < 1.0) {
        return Err(RtoError::Parameter(format!("arm_fraction {arm_fraction} outside (0, 1)")));
    }
    let grid = GridSpec::new(n, n)?;
    let arm = (arm_fraction * n as f64).round() as usize;
    if arm == 0 || arm >= n {
        return Err(RtoError::Geometry("empty passive region is not an L".into()));
    }
    let mut flags = vec![false; grid.element_count()];
    for r in 0..(n - arm) {
        for c in arm..n {
            flags[grid.element_index(r, c)] = true;
        }
    }
    let passive = PassiveMask { grid, flags };
    if passive.designable_count() == 0 {
        return Err(RtoError::Geometry("empty designable region".into()));
    }

    // Fix both DOFs of every node on the top edge of the vertical arm.
    let mut dirichlet = Vec::new();
    for c in 0..=arm {
        let node = grid.node_index(0, c);
        dirichlet.push(2 * node);
        dirichlet.push(2 * node + 1);
    }

    // Load at mid-height of the horizontal arm's right edge.
    let arm_top = n - arm;
    let load_row = arm_top + arm / 2;
    let load_node = grid.node_index(load_row, n);

    Ok(ProblemSpec {
        physics: Physics::Elasticity,
        grid,
        dirichlet,
        load_model: LoadModel::PointLoadRandomAngle {
            node: load_node,
            magnitude,
            angle_range: (0.0, std::f64::consts::PI),
        },
        passive,
        volume_fraction: 0.4,
        penalty: 3.0,
        theta_min: 1e-3,
        material: Material::default(),
    })
}

/// Heat sink: distributed uncertain heating on an `n`×`n` conduction domain
/// with temperature fixed to zero on a centered segment of the left edge.
///
/// The nodal load coefficients Fx and Fy are independent U[0,1] draws from
/// `field_seed` and the load is F = Fx·cos ξ + Fy·sin ξ with ξ ~ U[0, π/2].
pub fn make_heat_sink(n: usize, sink_fraction: f64, field_seed: u64) -> Result<ProblemSpec> {
    if n < 10 {
        return Err(RtoError::Parameter(format!("n = {n} < 10")));
    }
    if !(sink_fraction > 0.0 && sink_fraction <= 1.0) {
        return Err(RtoError::Parameter(format!("sink_fraction {sink_fraction} outside (0, 1]")));
    }
    let grid = GridSpec::new(n, n)?;
    let edge_nodes = n + 1;
    let sink_count = ((sink_fraction * edge_nodes as f64).round() as usize).clamp(1, edge_nodes);
    let start = (edge_nodes - sink_count) / 2;
    let dirichlet: Vec<usize> =
        (start..start + sink_count).map(|r| grid.node_index(r, 0)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(field_seed);
    let nn = grid.node_count();
    let fx: Vec<f64> = (0..nn).map(|_| rng.gen::<f64>()).collect();
    let fy: Vec<f64> = (0..nn).map(|_| rng.gen::<f64>()).collect();

    Ok(ProblemSpec {
        physics: Physics::HeatConduction,
        grid,
        dirichlet,
        load_model: LoadModel::FieldLoadRandomPhase {
            fx,
            fy,
            phase_range: (0.0, std::f64::consts::FRAC_PI_2),
        },
        passive: PassiveMask::none(grid),
        volume_fraction: 0.4,
        penalty: 3.0,
        theta_min: 1e-3,
        material: Material { prop0: 1.0, poisson: 0.0 },
    })
}

/// Cantilever beam: left edge fully fixed, point load at the mid-height node
/// of the right edge. The load angle range is [0, π] like the L-bracket.
pub fn make_cantilever(nx: usize, ny: usize, magnitude: f64) -> Result<ProblemSpec> {
    let grid = GridSpec::new(nx, ny)?;
    let mut dirichlet = Vec::new();
    for r in 0..=ny {
        let node = grid.node_index(r, 0);
        dirichlet.push(2 * node);
        dirichlet.push(2 * node + 1);
    }
    let load_node = grid.node_index(ny / 2, nx);
    Ok(ProblemSpec {
        physics: Physics::Elasticity,
        grid,
        dirichlet,
        load_model: LoadModel::PointLoadRandomAngle {
            node: load_node,
            magnitude,
            angle_range: (0.0, std::f64::consts::PI),
        },
        passive: PassiveMask::none(grid),
        volume_fraction: 0.5,
        penalty: 3.0,
        theta_min: 1e-3,
        material: Material::default(),
    })
}

/// Returns a copy of `theta` with masked entries forced to `theta_min`.
pub fn apply_passive(theta: &DensityField, mask: &PassiveMask, theta_min: f64) -> Result<DensityField> {
    if theta.values.len() != mask.flags.len() {
        return Err(RtoError::Shape(format!(
            "density field has {} values, mask has {} flags",
            theta.values.len(),
            mask.flags.len()
        )));
    }
    let values = theta
        .values
        .iter()
        .zip(&mask.flags)
        .map(|(&v, &passive)| if passive { theta_min } else { v })
        .collect();
    Ok(DensityField { grid: theta.grid, values })
}
