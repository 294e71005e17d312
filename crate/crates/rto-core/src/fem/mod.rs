//! Bilinear-quadrilateral finite element kernel on regular grids: exact
//! element matrices for plane-stress elasticity and steady-state conduction,
//! SIMP-penalized assembly with symmetric Dirichlet elimination, SPD solves
//! and compliance evaluation.

mod sparse;

pub use sparse::{pcg_jacobi, BandedCholesky, SparseSpdMatrix};

use crate::grid::{DensityField, LoadModel, Physics, ProblemSpec};
use crate::{Result, RtoError};

/// Direct factorization is used up to this many DOFs, PCG above.
pub const DIRECT_SOLVE_DOF_LIMIT: usize = 20_000;
/// Relative tolerance of the iterative solver.
pub const CG_TOLERANCE: f64 = 1e-8;
/// Fraction of solid-material property retained by fully void elements.
pub const PROP_FLOOR_RATIO: f64 = 1e-9;

/// Unit-property element matrix: 8×8 for elasticity, 4×4 for conduction.
#[derive(Debug, Clone)]
pub struct ElementMatrix {
    pub dim: usize,
    /// Row-major entries.
    pub entries: Vec<f64>,
}

impl ElementMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    /// uᵀ K u for an element-local vector.
    pub fn energy(&self, u: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.dim {
            let mut row = 0.0;
            for j in 0..self.dim {
                row += self.entries[i * self.dim + j] * u[j];
            }
            acc += row * u[i];
        }
        acc
    }
}

/// Exact integral of the bilinear shape-function stiffness over a unit square
/// element. Local node order is counter-clockwise from the bottom-left corner
/// (BL, BR, TR, TL); elasticity DOFs interleave as (ux, uy) per node.
pub fn element_stiffness(physics: Physics, prop0: f64, poisson: f64) -> Result<ElementMatrix> {
    match physics {
        Physics::HeatConduction => {
            let a = 2.0 / 3.0 * prop0;
            let b = -1.0 / 6.0 * prop0;
            let c = -1.0 / 3.0 * prop0;
            #[rustfmt::skip]
            let entries = vec![
                a, b, c, b,
                b, a, b, c,
                c, b, a, b,
                b, c, b, a,
            ];
            Ok(ElementMatrix { dim: 4, entries })
        }
        Physics::Elasticity => {
            let nu = poisson;
            if !(0.0..0.5).contains(&nu) {
                return Err(RtoError::Parameter(format!("Poisson ratio {nu} outside [0, 0.5)")));
            }
            let k = [
                0.5 - nu / 6.0,
                0.125 + nu / 8.0,
                -0.25 - nu / 12.0,
                -0.125 + 3.0 * nu / 8.0,
                -0.25 + nu / 12.0,
                -0.125 - nu / 8.0,
                nu / 6.0,
                0.125 - 3.0 * nu / 8.0,
            ];
            #[rustfmt::skip]
            let pattern: [[usize; 8]; 8] = [
                [0, 1, 2, 3, 4, 5, 6, 7],
                [1, 0, 7, 6, 5, 4, 3, 2],
                [2, 7, 0, 5, 6, 3, 4, 1],
                [3, 6, 5, 0, 7, 2, 1, 4],
                [4, 5, 6, 7, 0, 1, 2, 3],
                [5, 4, 3, 2, 1, 0, 7, 6],
                [6, 3, 4, 1, 2, 7, 0, 5],
                [7, 2, 1, 4, 3, 6, 5, 0],
            ];
            let scale = prop0 / (1.0 - nu * nu);
            let mut entries = vec![0.0; 64];
            for i in 0..8 {
                for j in 0..8 {
                    entries[i * 8 + j] = scale * k[pattern[i][j]];
                }
            }
            Ok(ElementMatrix { dim: 8, entries })
        }
    }
}

/// Modified SIMP power law: prop_min + θ^p (prop0 − prop_min).
pub fn material_interpolation(theta_e: f64, penalty: f64, prop0: f64, prop_min: f64) -> f64 {
    prop_min + theta_e.powf(penalty) * (prop0 - prop_min)
}

/// Derivative of [`material_interpolation`] with respect to θ.
pub fn material_interpolation_deriv(theta_e: f64, penalty: f64, prop0: f64, prop_min: f64) -> f64 {
    penalty * theta_e.powf(penalty - 1.0) * (prop0 - prop_min)
}

/// Global DOF indices for element (row r, col c), matching the local node
/// order of [`element_stiffness`].
pub fn element_dofs(spec: &ProblemSpec, r: usize, c: usize) -> Vec<usize> {
    let g = &spec.grid;
    let nodes = [
        g.node_index(r + 1, c),     // BL
        g.node_index(r + 1, c + 1), // BR
        g.node_index(r, c + 1),     // TR
        g.node_index(r, c),         // TL
    ];
    match spec.physics {
        Physics::HeatConduction => nodes.to_vec(),
        Physics::Elasticity => nodes.iter().flat_map(|&n| [2 * n, 2 * n + 1]).collect(),
    }
}

/// Assembles the SIMP-penalized global stiffness K(θ) with Dirichlet DOFs
/// eliminated symmetrically (rows/columns zeroed, unit diagonal).
pub fn assemble(theta: &DensityField, spec: &ProblemSpec) -> Result<SparseSpdMatrix> {
    if theta.values.len() != spec.grid.element_count() {
        return Err(RtoError::Shape("density field does not match problem grid".into()));
    }
    let ke = element_stiffness(spec.physics, 1.0, spec.material.poisson)?;
    let prop0 = spec.material.prop0;
    let prop_min = PROP_FLOOR_RATIO * prop0;
    let ndof = spec.dof_count();
    let mut fixed = vec![false; ndof];
    for &d in &spec.dirichlet {
        fixed[d] = true;
    }

    let mut triplets = Vec::with_capacity(spec.grid.element_count() * ke.dim * ke.dim + ndof);
    for r in 0..spec.grid.ny {
        for c in 0..spec.grid.nx {
            let e = spec.grid.element_index(r, c);
            let scale = material_interpolation(theta.values[e], spec.penalty, prop0, prop_min);
            let dofs = element_dofs(spec, r, c);
            for (i, &di) in dofs.iter().enumerate() {
                if fixed[di] {
                    continue;
                }
                for (j, &dj) in dofs.iter().enumerate() {
                    if fixed[dj] {
                        continue;
                    }
                    triplets.push((di, dj, scale * ke.get(i, j)));
                }
            }
        }
    }
    for d in 0..ndof {
        if fixed[d] {
            triplets.push((d, d, 1.0));
        }
    }
    Ok(SparseSpdMatrix::from_triplets(ndof, triplets))
}

/// Nodal solution of one SPD solve plus its compliance F·x.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub field: Vec<f64>,
    pub compliance: f64,
    pub solver_iterations: usize,
    pub residual: f64,
}

/// Solves K x = F with the size-appropriate solver.
pub fn solve(matrix: &SparseSpdMatrix, f: &[f64], tol: f64) -> Result<SolveResult> {
    if f.len() != matrix.dim {
        return Err(RtoError::Shape("load vector length != matrix dimension".into()));
    }
    if f.iter().all(|&v| v == 0.0) {
        return Ok(SolveResult {
            field: vec![0.0; matrix.dim],
            compliance: 0.0,
            solver_iterations: 0,
            residual: 0.0,
        });
    }
    let (field, iterations, residual) = if matrix.dim <= DIRECT_SOLVE_DOF_LIMIT {
        let chol = BandedCholesky::factor(matrix)?;
        let x = chol.solve(f);
        let res = matrix.relative_residual(&x, f);
        (x, 0, res)
    } else {
        pcg_jacobi(matrix, f, tol, 20 * matrix.dim)?
    };
    let compliance = f.iter().zip(&field).map(|(a, b)| a * b).sum();
    Ok(SolveResult { field, compliance, solver_iterations: iterations, residual })
}

/// Builds the load vector F(ξ) with Dirichlet entries zeroed.
pub fn build_load(spec: &ProblemSpec, xi: f64) -> Vec<f64> {
    let mut f = vec![0.0; spec.dof_count()];
    match &spec.load_model {
        LoadModel::PointLoadRandomAngle { node, magnitude, .. } => {
            // Angle measured counter-clockwise from the downward vertical in
            // x-right, y-up coordinates.
            f[2 * node] = magnitude * xi.sin();
            f[2 * node + 1] = -magnitude * xi.cos();
        }
        LoadModel::FieldLoadRandomPhase { fx, fy, .. } => {
            let (c, s) = (xi.cos(), xi.sin());
            for (i, (a, b)) in fx.iter().zip(fy).enumerate() {
                f[i] = a * c + b * s;
            }
        }
    }
    for &d in &spec.dirichlet {
        f[d] = 0.0;
    }
    f
}

/// Assembled and (when small enough) pre-factorized stiffness for one design,
/// reused across many load realizations ξ.
pub struct CompliancePlan<'a> {
    pub spec: &'a ProblemSpec,
    pub matrix: SparseSpdMatrix,
    factor: Option<BandedCholesky>,
}

impl<'a> CompliancePlan<'a> {
    pub fn new(theta: &DensityField, spec: &'a ProblemSpec) -> Result<Self> {
        let matrix = assemble(theta, spec)?;
        let factor = if matrix.dim <= DIRECT_SOLVE_DOF_LIMIT {
            Some(BandedCholesky::factor(&matrix)?)
        } else {
            None
        };
        Ok(CompliancePlan { spec, matrix, factor })
    }

    /// Solves at one load realization.
    pub fn eval(&self, xi: f64) -> Result<SolveResult> {
        let f = build_load(self.spec, xi);
        if f.iter().all(|&v| v == 0.0) {
            return Ok(SolveResult {
                field: vec![0.0; self.matrix.dim],
                compliance: 0.0,
                solver_iterations: 0,
                residual: 0.0,
            });
        }
        let (field, iterations, residual) = match &self.factor {
            Some(chol) => {
                let x = chol.solve(&f);
                let res = self.matrix.relative_residual(&x, &f);
                (x, 0, res)
            }
            None => pcg_jacobi(&self.matrix, &f, CG_TOLERANCE, 20 * self.matrix.dim)?,
        };
        let compliance = f.iter().zip(&field).map(|(a, b)| a * b).sum();
        Ok(SolveResult { field, compliance, solver_iterations: iterations, residual })
    }
}

/// Compliance F(ξ)ᵀ U(θ, ξ) of one design at one load realization.
pub fn compliance(theta: &DensityField, spec: &ProblemSpec, xi: f64) -> Result<f64> {
    let plan = CompliancePlan::new(theta, spec)?;
    Ok(plan.eval(xi)?.compliance)
}
