//! Periodic linear-elastic homogenization on voxel meshes.
//!
//! Each voxel is a trilinear 8-node brick of unit size. The displacement is
//! split into an affine part driven by the macro strain and a periodic
//! fluctuation; nodes are identified modulo the cell edge so node `(x, y, z)`
//! is the lower corner of voxel `(x, y, z)`. The fluctuation system is solved
//! matrix-free with Jacobi-preconditioned conjugate gradients, with node 0
//! pinned to remove rigid translations.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::{sample_material, DatasetManifest, ManifestRow, MaterialSample};
use crate::voxel::{load_grid, VoxelGrid};

/// Voigt order: xx, yy, zz, yz, xz, xy with engineering shear strains.
pub type Voigt = [f64; 6];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElasticProps {
    #[serde(rename = "E")]
    pub e: f64,
    pub nu: f64,
    #[serde(rename = "G")]
    pub g: f64,
}

impl ElasticProps {
    pub fn bulk_modulus(&self) -> Result<f64> {
        bulk_modulus(self)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            e: self.e * factor,
            nu: self.nu,
            g: self.g * factor,
        }
    }
}

pub fn bulk_modulus(props: &ElasticProps) -> Result<f64> {
    bulk_from(props.e, props.nu)
}

/// Bulk modulus of an isotropic solid, rejecting near-incompressible ratios.
pub fn bulk_from(e: f64, nu: f64) -> Result<f64> {
    let margin = 1.0 - 2.0 * nu;
    if margin <= 1e-9 {
        return Err(Error::IncompressibleLimit(margin));
    }
    Ok(e / (3.0 * margin))
}

/// Imposed macro strain, symmetric, tensor (not engineering) components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadCase {
    pub macro_strain: [[f64; 3]; 3],
}

impl LoadCase {
    pub fn new(macro_strain: [[f64; 3]; 3]) -> Result<Self> {
        for i in 0..3 {
            for j in 0..3 {
                if (macro_strain[i][j] - macro_strain[j][i]).abs() > 1e-12 {
                    return Err(Error::config("macro strain must be symmetric"));
                }
                if macro_strain[i][j].abs() > 1.0 {
                    return Err(Error::config("macro strain components must be at most 1"));
                }
            }
        }
        Ok(Self { macro_strain })
    }

    pub fn normal(axis: usize) -> Self {
        let mut m = [[0.0; 3]; 3];
        m[axis][axis] = 1.0;
        Self { macro_strain: m }
    }

    /// Unit engineering shear strain in the plane of axes `a` and `b`.
    pub fn shear(a: usize, b: usize) -> Self {
        let mut m = [[0.0; 3]; 3];
        m[a][b] = 0.5;
        m[b][a] = 0.5;
        Self { macro_strain: m }
    }

    pub fn voigt(&self) -> Voigt {
        let m = &self.macro_strain;
        [m[0][0], m[1][1], m[2][2], 2.0 * m[1][2], 2.0 * m[0][2], 2.0 * m[0][1]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Relative residual target.
    pub cg_tolerance: f64,
    /// `None` means `10 * sqrt(n_dof)`.
    pub max_iterations: Option<usize>,
    /// Void stiffness as a fraction of the base modulus.
    pub soft_void_stiffness: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            cg_tolerance: 1e-8,
            max_iterations: None,
            soft_void_stiffness: 1e-9,
        }
    }
}

impl SolverConfig {
    fn iteration_cap(&self, n_dof: usize) -> usize {
        self.max_iterations
            .unwrap_or_else(|| (10.0 * (n_dof as f64).sqrt()).ceil() as usize)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldSolution {
    /// Periodic fluctuation displacement per node.
    pub periodic_displacements: Vec<[f64; 3]>,
    pub converged: bool,
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Per-element Young's moduli sharing one Poisson ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseField {
    pub edge: usize,
    pub moduli: Vec<f64>,
    pub poisson_ratio: f64,
}

impl PhaseField {
    pub fn from_grid(grid: &VoxelGrid, material: &MaterialSample, cfg: &SolverConfig) -> Result<Self> {
        if !grid.is_binary() {
            return Err(Error::config("homogenization needs a binary grid"));
        }
        if grid.solid_count() == 0 {
            return Err(Error::EmptyStructure);
        }
        let soft = cfg.soft_void_stiffness * material.youngs_modulus;
        Ok(Self {
            edge: grid.edge(),
            moduli: grid
                .values()
                .iter()
                .map(|&v| if v == 1.0 { material.youngs_modulus } else { soft })
                .collect(),
            poisson_ratio: material.poisson_ratio,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.edge < 2 {
            return Err(Error::config("homogenization needs edge >= 2"));
        }
        if self.moduli.len() != self.edge.pow(3) {
            return Err(Error::shape("phase field length does not match edge"));
        }
        if self.moduli.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::config("element moduli must be positive"));
        }
        Ok(())
    }
}

/// Isotropic constitutive matrix (Voigt, engineering shear).
pub fn constitutive(e: f64, nu: f64) -> [[f64; 6]; 6] {
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    let mut d = [[0.0; 6]; 6];
    for i in 0..3 {
        for j in 0..3 {
            d[i][j] = lambda;
        }
        d[i][i] = lambda + 2.0 * mu;
        d[i + 3][i + 3] = mu;
    }
    d
}

/// Strain-displacement matrix of the unit brick at local point `xi` in
/// `[-1, 1]^3`. Local node `a = bx + 2 by + 4 bz`.
pub fn strain_displacement(xi: [f64; 3]) -> [[f64; 24]; 6] {
    let mut b = [[0.0; 24]; 6];
    for a in 0..8 {
        let s = [
            if a & 1 == 1 { 1.0 } else { -1.0 },
            if a & 2 == 2 { 1.0 } else { -1.0 },
            if a & 4 == 4 { 1.0 } else { -1.0 },
        ];
        let f = |i: usize| 0.5 * (1.0 + s[i] * xi[i]);
        // d/dx = 2 d/dxi for a unit element; 0.5 * s * 2 = s
        let dx = s[0] * f(1) * f(2);
        let dy = f(0) * s[1] * f(2);
        let dz = f(0) * f(1) * s[2];
        let c = 3 * a;
        b[0][c] = dx;
        b[1][c + 1] = dy;
        b[2][c + 2] = dz;
        b[3][c + 1] = dz;
        b[3][c + 2] = dy;
        b[4][c] = dz;
        b[4][c + 2] = dx;
        b[5][c] = dy;
        b[5][c + 1] = dx;
    }
    b
}

/// Element stiffness of the unit brick with unit Young's modulus, by 2x2x2
/// Gauss quadrature.
pub fn element_stiffness(nu: f64) -> Vec<[f64; 24]> {
    let d = constitutive(1.0, nu);
    let g = 1.0 / 3f64.sqrt();
    let mut k = vec![[0.0; 24]; 24];
    for gp in 0..8 {
        let xi = [
            if gp & 1 == 1 { g } else { -g },
            if gp & 2 == 2 { g } else { -g },
            if gp & 4 == 4 { g } else { -g },
        ];
        let b = strain_displacement(xi);
        let mut db = [[0.0; 24]; 6];
        for i in 0..6 {
            for j in 0..24 {
                db[i][j] = (0..6).map(|m| d[i][m] * b[m][j]).sum();
            }
        }
        // Jacobian determinant 1/8, unit weights.
        for i in 0..24 {
            for j in 0..24 {
                k[i][j] += 0.125 * (0..6).map(|m| b[m][i] * db[m][j]).sum::<f64>();
            }
        }
    }
    k
}

/// Local node offsets.
fn local_offset(a: usize) -> [usize; 3] {
    [a & 1, (a >> 1) & 1, (a >> 2) & 1]
}

/// Affine displacement `E x` at the local nodes of the unit element.
fn affine_element_displacement(case: &LoadCase) -> [f64; 24] {
    let mut u = [0.0; 24];
    for a in 0..8 {
        let o = local_offset(a);
        for i in 0..3 {
            u[3 * a + i] = (0..3).map(|j| case.macro_strain[i][j] * o[j] as f64).sum();
        }
    }
    u
}

/// The assembled periodic operator for one phase field.
pub struct PeriodicOperator {
    edge: usize,
    moduli: Vec<f64>,
    ke: Vec<[f64; 24]>,
    d_unit: [[f64; 6]; 6],
    scale: f64,
}

impl PeriodicOperator {
    pub fn new(field: &PhaseField) -> Result<Self> {
        field.validate()?;
        let scale = field.moduli.iter().cloned().fold(0.0, f64::max);
        Ok(Self {
            edge: field.edge,
            moduli: field.moduli.iter().map(|m| m / scale).collect(),
            ke: element_stiffness(field.poisson_ratio),
            d_unit: constitutive(1.0, field.poisson_ratio),
            scale,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.edge.pow(3)
    }

    #[inline]
    fn wrap(&self, v: usize, d: usize) -> usize {
        let s = v + d;
        if s >= self.edge {
            s - self.edge
        } else {
            s
        }
    }

    #[inline]
    fn element_nodes(&self, x: usize, y: usize, z: usize) -> [usize; 8] {
        let l = self.edge;
        let mut n = [0; 8];
        for (a, slot) in n.iter_mut().enumerate() {
            let o = local_offset(a);
            *slot = (self.wrap(z, o[2]) * l + self.wrap(y, o[1])) * l + self.wrap(x, o[0]);
        }
        n
    }

    /// `out = K u` on the normalized moduli. Node-gather form so each output
    /// node is written by exactly one task.
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let l = self.edge;
        out.par_chunks_mut(3 * l * l).enumerate().for_each(|(z, slab)| {
            let mut ue = [0.0; 24];
            for y in 0..l {
                for x in 0..l {
                    let mut acc = [0.0; 3];
                    for a in 0..8 {
                        // element whose local node `a` is this node
                        let o = local_offset(a);
                        let ex = (x + l - o[0]) % l;
                        let ey = (y + l - o[1]) % l;
                        let ez = (z + l - o[2]) % l;
                        let e = (ez * l + ey) * l + ex;
                        let nodes = self.element_nodes(ex, ey, ez);
                        for (b, &n) in nodes.iter().enumerate() {
                            ue[3 * b..3 * b + 3].copy_from_slice(&u[3 * n..3 * n + 3]);
                        }
                        let m = self.moduli[e];
                        for (i, acc_i) in acc.iter_mut().enumerate() {
                            let row = &self.ke[3 * a + i];
                            let mut s = 0.0;
                            for j in 0..24 {
                                s += row[j] * ue[j];
                            }
                            *acc_i += m * s;
                        }
                    }
                    let base = 3 * (y * l + x);
                    slab[base..base + 3].copy_from_slice(&acc);
                }
            }
        });
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let l = self.edge;
        let mut diag = vec![0.0; 3 * self.n_nodes()];
        for z in 0..l {
            for y in 0..l {
                for x in 0..l {
                    let e = (z * l + y) * l + x;
                    for (a, &n) in self.element_nodes(x, y, z).iter().enumerate() {
                        for i in 0..3 {
                            diag[3 * n + i] += self.moduli[e] * self.ke[3 * a + i][3 * a + i];
                        }
                    }
                }
            }
        }
        diag
    }

    /// Right-hand side `-sum_e K_e (E x)_e`, assembled.
    pub fn load_vector(&self, case: &LoadCase) -> Vec<f64> {
        let ua = affine_element_displacement(case);
        let fe: Vec<f64> = (0..24)
            .map(|i| (0..24).map(|j| self.ke[i][j] * ua[j]).sum())
            .collect();
        let l = self.edge;
        let mut b = vec![0.0; 3 * self.n_nodes()];
        for z in 0..l {
            for y in 0..l {
                for x in 0..l {
                    let m = self.moduli[(z * l + y) * l + x];
                    for (a, &n) in self.element_nodes(x, y, z).iter().enumerate() {
                        for i in 0..3 {
                            b[3 * n + i] -= m * fe[3 * a + i];
                        }
                    }
                }
            }
        }
        b
    }

    /// Volume-averaged stress (in the original modulus units).
    pub fn average_stress(&self, case: &LoadCase, fluct: &[f64]) -> Voigt {
        let l = self.edge;
        let bc = strain_displacement([0.0; 3]);
        let macro_strain = case.voigt();
        let d = &self.d_unit;
        let mut total = [0.0; 6];
        for z in 0..l {
            for y in 0..l {
                for x in 0..l {
                    let nodes = self.element_nodes(x, y, z);
                    let mut strain = macro_strain;
                    for (r, s) in strain.iter_mut().enumerate() {
                        for (b, &n) in nodes.iter().enumerate() {
                            for i in 0..3 {
                                *s += bc[r][3 * b + i] * fluct[3 * n + i];
                            }
                        }
                    }
                    let m = self.moduli[(z * l + y) * l + x];
                    for (r, t) in total.iter_mut().enumerate() {
                        *t += m * (0..6).map(|c| d[r][c] * strain[c]).sum::<f64>();
                    }
                }
            }
        }
        let n = self.n_nodes() as f64;
        total.map(|t| t * self.scale / n)
    }
}

/// Jacobi-preconditioned CG on the pinned periodic system.
pub fn solve_operator(op: &PeriodicOperator, case: &LoadCase, cfg: &SolverConfig) -> Result<FieldSolution> {
    let n = 3 * op.n_nodes();
    let mut b = op.load_vector(case);
    b[..3].fill(0.0);
    let b_norm = norm(&b);
    let cap = cfg.iteration_cap(n);
    let mut x = vec![0.0; n];
    if b_norm <= 1e-12 * (n as f64).sqrt() {
        return Ok(FieldSolution {
            periodic_displacements: vec![[0.0; 3]; op.n_nodes()],
            converged: true,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();
    let apply = |v: &[f64], out: &mut [f64]| {
        op.apply(v, out);
        out[..3].copy_from_slice(&v[..3]);
    };
    let mut r = b.clone();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    z[..3].fill(0.0);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut rel = 1.0;
    for it in 1..=cap {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0 && pap.is_finite()) {
            return Err(Error::NotConverged {
                residual: rel,
                iterations: it,
            });
        }
        let alpha = rz / pap;
        x.par_iter_mut().zip(&p).for_each(|(xi, pi)| *xi += alpha * pi);
        r.par_iter_mut().zip(&ap).for_each(|(ri, api)| *ri -= alpha * api);
        rel = norm(&r) / b_norm;
        if rel <= cfg.cg_tolerance {
            return Ok(FieldSolution {
                periodic_displacements: x.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
                converged: true,
                iterations: it,
                relative_residual: rel,
            });
        }
        z.par_iter_mut()
            .zip(&r)
            .zip(&inv_diag)
            .for_each(|((zi, ri), di)| *zi = ri * di);
        z[..3].fill(0.0);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut().zip(&z).for_each(|(pi, zi)| *pi = zi + beta * *pi);
    }
    Err(Error::NotConverged {
        residual: rel,
        iterations: cap,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn solve_case(
    grid: &VoxelGrid,
    material: &MaterialSample,
    case: &LoadCase,
    cfg: &SolverConfig,
) -> Result<FieldSolution> {
    let field = PhaseField::from_grid(grid, material, cfg)?;
    let op = PeriodicOperator::new(&field)?;
    solve_operator(&op, case, cfg)
}

fn flatten(sol: &FieldSolution) -> Vec<f64> {
    sol.periodic_displacements.iter().flatten().copied().collect()
}

/// Normal-block stiffness and shear response of one homogenization run.
#[derive(Clone, Debug, PartialEq)]
pub struct Homogenized {
    /// `normal_stiffness[i][j]`: average normal stress `i` under unit strain `j`.
    pub normal_stiffness: [[f64; 3]; 3],
    /// Average xy shear stress under unit engineering xy shear.
    pub shear_modulus: f64,
    pub total_iterations: usize,
}

impl Homogenized {
    /// Uniaxial-stress response along each axis with the transverse faces
    /// traction-free (shear strains held at zero).
    pub fn compliance(&self) -> [[f64; 3]; 3] {
        invert3(&self.normal_stiffness)
    }

    pub fn directional_moduli(&self) -> [f64; 3] {
        let s = self.compliance();
        [1.0 / s[0][0], 1.0 / s[1][1], 1.0 / s[2][2]]
    }

    pub fn props(&self) -> ElasticProps {
        let s = self.compliance();
        ElasticProps {
            e: 1.0 / s[0][0],
            nu: -s[1][0] / s[0][0],
            g: self.shear_modulus,
        }
    }
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

/// Three normal unit-strain cases and one shear case.
pub fn homogenize(field: &PhaseField, cfg: &SolverConfig) -> Result<Homogenized> {
    let op = PeriodicOperator::new(field)?;
    let mut normal_stiffness = [[0.0; 3]; 3];
    let mut total_iterations = 0;
    for j in 0..3 {
        let case = LoadCase::normal(j);
        let sol = solve_operator(&op, &case, cfg)?;
        total_iterations += sol.iterations;
        let stress = op.average_stress(&case, &flatten(&sol));
        for i in 0..3 {
            normal_stiffness[i][j] = stress[i];
        }
    }
    let case = LoadCase::shear(0, 1);
    let sol = solve_operator(&op, &case, cfg)?;
    total_iterations += sol.iterations;
    let shear_modulus = op.average_stress(&case, &flatten(&sol))[5];
    Ok(Homogenized {
        normal_stiffness,
        shear_modulus,
        total_iterations,
    })
}

/// Effective E (x axis), nu (xy) and G (xy) of a binary unit.
pub fn effective_properties(
    grid: &VoxelGrid,
    material: &MaterialSample,
    cfg: &SolverConfig,
) -> Result<ElasticProps> {
    let field = PhaseField::from_grid(grid, material, cfg)?;
    Ok(homogenize(&field, cfg)?.props())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation (`n - 1`); std is 0 for one value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AleatoricStudy {
    #[serde(rename = "E")]
    pub e: Stat,
    pub nu: Stat,
    #[serde(rename = "G")]
    pub g: Stat,
    #[serde(rename = "K")]
    pub k: Stat,
    pub draws: Vec<ElasticProps>,
}

pub(crate) fn draw_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut h = seed ^ 0x243F_6A88_85A3_08D3;
    for v in [a, b] {
        h = (h ^ v).wrapping_mul(0x1000_0000_01B3).rotate_left(29) ^ v.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
    h
}

/// Repeats the homogenization under `n` material draws.
pub fn true_aleatoric_study(
    grid: &VoxelGrid,
    base: &MaterialSample,
    n: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<AleatoricStudy> {
    if n < 2 {
        return Err(Error::InvalidSampleCount(n));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| draw_seed(seed, 0, i)).collect();
    aleatoric_study_with_seeds(grid, base, &seeds, cfg)
}

pub fn aleatoric_study_with_seeds(
    grid: &VoxelGrid,
    base: &MaterialSample,
    seeds: &[u64],
    cfg: &SolverConfig,
) -> Result<AleatoricStudy> {
    if seeds.len() < 2 {
        return Err(Error::InvalidSampleCount(seeds.len()));
    }
    // Effective moduli are linear in the base modulus, so one unit-modulus
    // solve per distinct Poisson draw is reused for every E draw.
    let draws = seeds
        .par_iter()
        .map(|&s| {
            let m = sample_material(base, s)?;
            let unit = MaterialSample {
                youngs_modulus: 1.0,
                poisson_ratio: m.poisson_ratio,
            };
            Ok(effective_properties(grid, &unit, cfg)?.scaled(m.youngs_modulus))
        })
        .collect::<Result<Vec<ElasticProps>>>()?;
    let pick = |f: fn(&ElasticProps) -> f64| draws.iter().map(f).collect::<Vec<_>>();
    let ks = draws
        .iter()
        .map(|p| p.bulk_modulus())
        .collect::<Result<Vec<_>>>()?;
    Ok(AleatoricStudy {
        e: Stat::of(&pick(|p| p.e)),
        nu: Stat::of(&pick(|p| p.nu)),
        g: Stat::of(&pick(|p| p.g)),
        k: Stat::of(&ks),
        draws,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub id: String,
    pub family: String,
    pub spec_json: String,
    pub edge_voxels: usize,
    pub volume_fraction: f64,
    pub voxel_path: String,
    #[serde(rename = "E_mean")]
    pub e_mean: f64,
    pub nu_mean: f64,
    #[serde(rename = "G_mean")]
    pub g_mean: f64,
    #[serde(rename = "E_std")]
    pub e_std: f64,
    pub nu_std: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledDataset {
    pub rows: Vec<LabeledRow>,
}

impl LabeledDataset {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        w.write_record([
            "id",
            "family",
            "spec_json",
            "edge_voxels",
            "volume_fraction",
            "voxel_path",
            "E_mean",
            "nu_mean",
            "G_mean",
            "E_std",
            "nu_std",
        ])?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<LabeledRow>, _>>()?;
        Ok(Self { rows })
    }
}

/// Material draws per unit: `n_draws` independent samples, each homogenized.
pub fn label_unit(
    grid: &VoxelGrid,
    base: &MaterialSample,
    n_draws: usize,
    seed: u64,
    unit_index: u64,
    cfg: &SolverConfig,
) -> Result<[Stat; 3]> {
    let seeds: Vec<u64> = (0..n_draws.max(1) as u64)
        .map(|d| draw_seed(seed, unit_index + 1, d))
        .collect();
    let draws = seeds
        .iter()
        .map(|&s| {
            let m = sample_material(base, s)?;
            let unit = MaterialSample {
                youngs_modulus: 1.0,
                poisson_ratio: m.poisson_ratio,
            };
            Ok(effective_properties(grid, &unit, cfg)?.scaled(m.youngs_modulus))
        })
        .collect::<Result<Vec<ElasticProps>>>()?;
    let e: Vec<f64> = draws.iter().map(|p| p.e).collect();
    let nu: Vec<f64> = draws.iter().map(|p| p.nu).collect();
    let g: Vec<f64> = draws.iter().map(|p| p.g).collect();
    Ok([Stat::of(&e), Stat::of(&nu), Stat::of(&g)])
}

/// Labels every manifest row; rows whose voxel file cannot be read or
/// solved are skipped and counted as warnings.
pub fn label_manifest(
    manifest_path: &Path,
    base: &MaterialSample,
    n_draws: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> Result<(LabeledDataset, usize)> {
    let manifest = DatasetManifest::read_csv(manifest_path)?;
    let results: Vec<Option<LabeledRow>> = manifest
        .rows
        .par_iter()
        .enumerate()
        .map(|(i, row)| {
            let labeled = load_grid(&DatasetManifest::resolve(manifest_path, row))
                .and_then(|grid| label_unit(&grid, base, n_draws, seed, i as u64, cfg))
                .map(|stats| labeled_row(row, &stats));
            match labeled {
                Ok(r) => Some(r),
                Err(e) => {
                    log::error!("skipping {}: {e}", row.id);
                    None
                }
            }
        })
        .collect();
    let warnings = results.iter().filter(|r| r.is_none()).count();
    Ok((
        LabeledDataset {
            rows: results.into_iter().flatten().collect(),
        },
        warnings,
    ))
}

pub fn labeled_row(row: &ManifestRow, stats: &[Stat; 3]) -> LabeledRow {
    LabeledRow {
        id: row.id.clone(),
        family: row.family.clone(),
        spec_json: row.spec_json.clone(),
        edge_voxels: row.edge_voxels,
        volume_fraction: row.volume_fraction,
        voxel_path: row.voxel_path.clone(),
        e_mean: stats[0].mean,
        nu_mean: stats[1].mean,
        g_mean: stats[2].mean,
        e_std: stats[0].std,
        nu_std: stats[1].std,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generators::{generate_units, FamilyMix, GeneratorConfig};
    use crate::voxel::{largest_component, Connectivity};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn al() -> MaterialSample {
        MaterialSample::aluminum()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn element_matrix_reproduces_affine_energy() {
        let nu = 0.3;
        let ke = element_stiffness(nu);
        for row in &ke {
            for i in 0..3 {
                let s: f64 = (0..8).map(|a| row[3 * a + i]).sum();
                assert!(s.abs() < 1e-12, "translation is not stress free");
            }
        }
        let case = LoadCase::new([[0.3, 0.1, -0.2], [0.1, -0.5, 0.05], [-0.2, 0.05, 0.7]]).unwrap();
        let u = affine_element_displacement(&case);
        let energy: f64 = (0..24)
            .map(|i| u[i] * (0..24).map(|j| ke[i][j] * u[j]).sum::<f64>())
            .sum();
        let eps = case.voigt();
        let d = constitutive(1.0, nu);
        let expect: f64 = (0..6)
            .map(|i| eps[i] * (0..6).map(|j| d[i][j] * eps[j]).sum::<f64>())
            .sum();
        assert!((energy - expect).abs() < 1e-12);
    }

    #[test]
    fn solid_cube_returns_base_material() {
        let grid = VoxelGrid::filled(4, true);
        let sol = solve_case(&grid, &al(), &LoadCase::normal(0), &SolverConfig::default()).unwrap();
        assert!(sol.converged && sol.iterations <= 2);
        assert!(sol.periodic_displacements.iter().flatten().all(|v| v.abs() < 1e-12));
        let p = effective_properties(&grid, &al(), &SolverConfig::default()).unwrap();
        assert!(rel(p.e, 68_300.0) < 1e-3);
        assert!((p.nu - 0.3).abs() < 1e-3);
        assert!(rel(p.g, 68_300.0 / 2.6) < 1e-3);
    }

    #[test]
    fn bulk_modulus_examples() {
        let k = bulk_modulus(&ElasticProps { e: 68_300.0, nu: 0.3, g: 0.0 }).unwrap();
        assert!((k - 56_916.666_666_666_67).abs() < 1e-6);
        let k0 = bulk_modulus(&ElasticProps { e: 9.0, nu: 0.0, g: 0.0 }).unwrap();
        assert_eq!(k0, 3.0);
        assert!(matches!(
            bulk_modulus(&ElasticProps { e: 1.0, nu: 0.5, g: 0.0 }),
            Err(Error::IncompressibleLimit(_))
        ));
    }

    /// Dense assembly of the same pinned periodic system.
    fn dense_system(field: &PhaseField, case: &LoadCase) -> (Vec<Vec<f64>>, Vec<f64>) {
        let l = field.edge;
        let n = 3 * l * l * l;
        let ke = element_stiffness(field.poisson_ratio);
        let scale = field.moduli.iter().cloned().fold(0.0, f64::max);
        let mut k = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        let ua = affine_element_displacement(case);
        for z in 0..l {
            for y in 0..l {
                for x in 0..l {
                    let m = field.moduli[(z * l + y) * l + x] / scale;
                    let nodes: Vec<usize> = (0..8)
                        .map(|a| {
                            let (bx, by, bz) = (a & 1, (a >> 1) & 1, (a >> 2) & 1);
                            (((z + bz) % l) * l + (y + by) % l) * l + (x + bx) % l
                        })
                        .collect();
                    for a in 0..8 {
                        for i in 0..3 {
                            let r = 3 * nodes[a] + i;
                            for c in 0..8 {
                                for j in 0..3 {
                                    k[r][3 * nodes[c] + j] += m * ke[3 * a + i][3 * c + j];
                                    b[r] -= m * ke[3 * a + i][3 * c + j] * ua[3 * c + j];
                                }
                            }
                        }
                    }
                }
            }
        }
        for i in 0..3 {
            for j in 0..n {
                k[i][j] = 0.0;
                k[j][i] = 0.0;
            }
            k[i][i] = 1.0;
            b[i] = 0.0;
        }
        (k, b)
    }

    fn cholesky_solve(mut a: Vec<Vec<f64>>, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        for j in 0..n {
            let mut d = a[j][j];
            for k in 0..j {
                d -= a[j][k] * a[j][k];
            }
            let d = d.sqrt();
            a[j][j] = d;
            for i in j + 1..n {
                let mut s = a[i][j];
                for k in 0..j {
                    s -= a[i][k] * a[j][k];
                }
                a[i][j] = s / d;
            }
        }
        let mut y = vec![0.0; n];
        for i in 0..n {
            let s: f64 = (0..i).map(|k| a[i][k] * y[k]).sum();
            y[i] = (b[i] - s) / a[i][i];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| a[k][i] * x[k]).sum();
            x[i] = (y[i] - s) / a[i][i];
        }
        x
    }

    #[test]
    fn single_void_residual_recomputed_densely() {
        let grid = VoxelGrid::from_fn(4, |x, y, z| (x, y, z) != (1, 2, 3));
        let cfg = SolverConfig::default();
        let case = LoadCase::normal(0);
        let sol = solve_case(&grid, &al(), &case, &cfg).unwrap();
        let field = PhaseField::from_grid(&grid, &al(), &cfg).unwrap();
        let (k, b) = dense_system(&field, &case);
        let u: Vec<f64> = sol.periodic_displacements.iter().flatten().copied().collect();
        let r: Vec<f64> = (0..b.len())
            .map(|i| b[i] - (0..b.len()).map(|j| k[i][j] * u[j]).sum::<f64>())
            .collect();
        let res = norm(&r) / norm(&b);
        assert!(res <= cfg.cg_tolerance * 1.01, "residual {res}");
    }

    #[test]
    fn matches_dense_direct_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = VoxelGrid::from_fn(6, |_, _, _| rng.random_bool(0.6));
        let (grid, _) = largest_component(&raw, Connectivity::Face).unwrap();
        let cfg = SolverConfig {
            cg_tolerance: 1e-12,
            max_iterations: Some(20_000),
            ..Default::default()
        };
        for case in [LoadCase::normal(1), LoadCase::shear(0, 2)] {
            let sol = solve_case(&grid, &al(), &case, &cfg).unwrap();
            let field = PhaseField::from_grid(&grid, &al(), &cfg).unwrap();
            let (k, b) = dense_system(&field, &case);
            let direct = cholesky_solve(k, &b);
            // Nodes touching solid carry the load path; void-only nodes are
            // only determined up to the soft-void conditioning.
            let l = 6;
            let mut max_err: f64 = 0.0;
            let mut max_u: f64 = 0.0;
            for n in 0..l * l * l {
                let (x, y, z) = (n % l, (n / l) % l, n / (l * l));
                let touches = (0..8).any(|a: usize| {
                    let (bx, by, bz) = (a & 1, (a >> 1) & 1, (a >> 2) & 1);
                    grid.get((x + l - bx) % l, (y + l - by) % l, (z + l - bz) % l) == 1.0
                });
                if touches {
                    for i in 0..3 {
                        max_err = max_err.max((sol.periodic_displacements[n][i] - direct[3 * n + i]).abs());
                        max_u = max_u.max(direct[3 * n + i].abs());
                    }
                }
            }
            assert!(max_err <= 1e-6 * max_u.max(1.0), "err {max_err} vs scale {max_u}");
        }
    }

    #[test]
    fn laminate_matches_series_modulus() {
        // Layers normal to x, two stiff planes then two compliant planes.
        let (e1, e2) = (1000.0, 100.0);
        let l = 4;
        let moduli = (0..l * l * l)
            .map(|i| if i % l < 2 { e1 } else { e2 })
            .collect();
        let field = PhaseField {
            edge: l,
            moduli,
            poisson_ratio: 0.0,
        };
        let h = homogenize(&field, &SolverConfig::default()).unwrap();
        let reuss = 1.0 / (0.5 / e1 + 0.5 / e2);
        let voigt = 0.5 * (e1 + e2);
        let p = h.props();
        assert!(rel(p.e, reuss) < 0.02, "{} vs {}", p.e, reuss);
        // In-plane loading follows the parallel (Voigt) mixture.
        assert!(rel(h.directional_moduli()[1], voigt) < 0.02);
    }

    fn desk_units(count: usize, seed: u64) -> Vec<crate::generators::GeneratedUnit> {
        generate_units(
            &GeneratorConfig {
                edge_voxels: 12,
                count,
                seed,
                ..Default::default()
            },
            &FamilyMix::default(),
        )
        .unwrap()
    }

    #[test]
    fn voigt_bound_and_positive_energy() {
        let cfg = SolverConfig::default();
        for u in desk_units(6, 2) {
            let field = PhaseField::from_grid(&u.grid, &al(), &cfg).unwrap();
            let op = PeriodicOperator::new(&field).unwrap();
            for case in [LoadCase::normal(0), LoadCase::normal(2), LoadCase::shear(1, 2)] {
                let sol = solve_operator(&op, &case, &cfg).unwrap();
                let s = op.average_stress(&case, &flatten(&sol));
                let e = case.voigt();
                assert!((0..6).map(|i| s[i] * e[i]).sum::<f64>() >= 0.0);
            }
            let p = homogenize(&field, &cfg).unwrap().props();
            let vf = u.volume_fraction;
            let bound = vf * 68_300.0 + (1.0 - vf) * 68_300.0 * cfg.soft_void_stiffness;
            assert!(p.e <= bound * (1.0 + 1e-9), "{} > {}", p.e, bound);
            assert!(p.e >= 0.0 && p.g >= 0.0);
        }
    }

    #[test]
    fn linear_in_base_modulus() {
        let cfg = SolverConfig::default();
        let unit = &desk_units(1, 8)[0];
        let a = effective_properties(&unit.grid, &al(), &cfg).unwrap();
        let double = MaterialSample::new(2.0 * 68_300.0, 0.3).unwrap();
        let b = effective_properties(&unit.grid, &double, &cfg).unwrap();
        assert!(rel(b.e, 2.0 * a.e) < 1e-6);
        assert!(rel(b.bulk_modulus().unwrap(), 2.0 * a.bulk_modulus().unwrap()) < 1e-6);
        assert!((a.nu - b.nu).abs() < 1e-6);
    }

    #[test]
    fn cubic_units_are_isotropic_along_axes() {
        use crate::generators::{generate_strut, StrutFamily, StrutSpec};
        let grid = generate_strut(&StrutSpec { family: StrutFamily::Octet, radius: 1.4 }, 12).unwrap();
        let field = PhaseField::from_grid(&grid, &al(), &SolverConfig::default()).unwrap();
        let e = homogenize(&field, &SolverConfig::default()).unwrap().directional_moduli();
        assert!(rel(e[1], e[0]) < 0.005 && rel(e[2], e[0]) < 0.005, "{e:?}");
    }

    #[test]
    fn aleatoric_study_contracts() {
        let cfg = SolverConfig::default();
        let cube = VoxelGrid::filled(2, true);
        let same = aleatoric_study_with_seeds(&cube, &al(), &[7, 7], &cfg).unwrap();
        assert_eq!(same.e.std, 0.0);
        assert_eq!(same.nu.std, 0.0);
        assert!(matches!(
            true_aleatoric_study(&cube, &al(), 1, 0, &cfg),
            Err(Error::InvalidSampleCount(1))
        ));
        let study = true_aleatoric_study(&cube, &al(), 64, 3, &cfg).unwrap();
        let cv = study.e.std / study.e.mean;
        assert!((cv - 0.01).abs() <= 0.3 * 0.01, "cv {cv}");
    }

    #[test]
    fn empty_and_continuous_grids_are_rejected() {
        let cfg = SolverConfig::default();
        assert!(matches!(
            effective_properties(&VoxelGrid::filled(4, false), &al(), &cfg),
            Err(Error::EmptyStructure)
        ));
        let soft = VoxelGrid::from_values(2, vec![0.5; 8]).unwrap();
        assert!(effective_properties(&soft, &al(), &cfg).is_err());
    }
}
