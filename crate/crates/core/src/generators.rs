//! Procedural unit-cell generators and base-material sampling.
//!
//! Every generator rasterizes the low octant of the cell and mirrors it, so
//! generated units are exactly invariant under the three mid-plane
//! reflections. Coordinates are in cell units: `0` is the cell boundary and
//! `0.5` the cell center.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::{
    largest_component, mirror_eighth, save_grid, Connectivity, EighthCell, VoxelGrid,
};

/// Aluminum reference values.
pub const BASE_YOUNGS_MODULUS: f64 = 68_300.0;
pub const BASE_POISSON_RATIO: f64 = 0.3;
/// Material scatter as a fraction of the mean.
pub const MATERIAL_STD_FACTOR: f64 = 0.01;
const MAX_REDRAWS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrutFamily {
    Octet,
    Octahedral,
    Bcc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrutSpec {
    pub family: StrutFamily,
    /// Strut radius in voxels.
    pub radius: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelSetFamily {
    Gyroid,
    SchwarzP,
    Diamond,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSetSpec {
    pub family: LevelSetFamily,
    pub iso_level: f64,
    pub shell: bool,
    pub shell_thickness: f64,
}

/// In-house parametric template set. All parameters live in `[0, 1]`.
/// `p2` and `p3` stretch the thickness (or width) along y and z by up to
/// 1.8x, so zero values give the cubic shapes below.
///
/// | template      | p0                  | p1                      | all-zero shape                          |
/// |---------------|---------------------|-------------------------|-----------------------------------------|
/// | `FacePlates`  | plate thickness     | face-centered hole radius | closed cube of thin face plates        |
/// | `EdgeFrame`   | beam half-width     | corner node radius      | thin cubic edge frame with small nodes  |
/// | `MidPlates`   | plate thickness     | hole radius (4 per plate) | three thin orthogonal mid-plane plates |
/// | `CenterCross` | beam half-width     | center node radius      | thin axial cross with small center node |
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    FacePlates,
    EdgeFrame,
    MidPlates,
    CenterCross,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::FacePlates,
        TemplateId::EdgeFrame,
        TemplateId::MidPlates,
        TemplateId::CenterCross,
    ];

    pub fn param_count(self) -> usize {
        4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSpec {
    pub template: TemplateId,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnitSpec {
    Strut(StrutSpec),
    LevelSet(LevelSetSpec),
    Template(TemplateSpec),
}

impl UnitSpec {
    pub fn family_name(&self) -> &'static str {
        match self {
            UnitSpec::Strut(_) => "strut",
            UnitSpec::LevelSet(_) => "levelset",
            UnitSpec::Template(_) => "template",
        }
    }

    pub fn generate(&self, edge: usize) -> Result<VoxelGrid> {
        match self {
            UnitSpec::Strut(s) => generate_strut(s, edge),
            UnitSpec::LevelSet(s) => generate_levelset(s, edge),
            UnitSpec::Template(s) => generate_template(s, edge),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialSample {
    pub youngs_modulus: f64,
    pub poisson_ratio: f64,
}

impl MaterialSample {
    pub fn new(youngs_modulus: f64, poisson_ratio: f64) -> Result<Self> {
        let m = Self {
            youngs_modulus,
            poisson_ratio,
        };
        if !m.is_physical() {
            return Err(Error::config(format!(
                "non-physical material E={youngs_modulus}, nu={poisson_ratio}"
            )));
        }
        Ok(m)
    }

    pub fn aluminum() -> Self {
        Self {
            youngs_modulus: BASE_YOUNGS_MODULUS,
            poisson_ratio: BASE_POISSON_RATIO,
        }
    }

    pub fn is_physical(&self) -> bool {
        self.youngs_modulus > 0.0
            && self.youngs_modulus.is_finite()
            && self.poisson_ratio > -1.0
            && self.poisson_ratio < 0.5
    }
}

fn check_edge(edge: usize) -> Result<()> {
    if edge < 2 || edge % 2 != 0 {
        return Err(Error::config(format!("edge must be even and >= 2, got {edge}")));
    }
    Ok(())
}

/// Rasterizes the low octant with `inside(u)` evaluated at voxel centers in
/// cell units, then mirrors.
fn rasterize(edge: usize, inside: impl Fn([f64; 3]) -> bool) -> VoxelGrid {
    let h = edge / 2;
    let c = |i: usize| (i as f64 + 0.5) / edge as f64;
    let eighth = VoxelGrid::from_fn(h, |x, y, z| inside([c(x), c(y), c(z)]));
    mirror_eighth(&EighthCell::new(eighth))
}

fn check_degenerate(grid: VoxelGrid) -> Result<VoxelGrid> {
    let vf = grid.volume_fraction();
    if vf <= 0.0 || vf >= 1.0 {
        return Err(Error::DegenerateGeometry(vf));
    }
    Ok(grid)
}

pub fn strut_segments(family: StrutFamily) -> Vec<([f64; 3], [f64; 3])> {
    let corners: Vec<[f64; 3]> = (0..8)
        .map(|k| [(k & 1) as f64, ((k >> 1) & 1) as f64, ((k >> 2) & 1) as f64])
        .collect();
    let face_centers: Vec<[f64; 3]> = (0..3)
        .flat_map(|axis| {
            [0.0, 1.0].into_iter().map(move |v| {
                let mut p = [0.5; 3];
                p[axis] = v;
                p
            })
        })
        .collect();
    let dist2 = |a: &[f64; 3], b: &[f64; 3]| (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>();
    let mut segs = Vec::new();
    match family {
        StrutFamily::Bcc => {
            for c in &corners {
                segs.push((*c, [0.5; 3]));
            }
        }
        StrutFamily::Octahedral | StrutFamily::Octet => {
            for (i, a) in face_centers.iter().enumerate() {
                for b in &face_centers[i + 1..] {
                    if (dist2(a, b) - 0.5).abs() < 1e-12 {
                        segs.push((*a, *b));
                    }
                }
            }
            if family == StrutFamily::Octet {
                for f in &face_centers {
                    for c in &corners {
                        if (dist2(f, c) - 0.5).abs() < 1e-12 {
                            segs.push((*f, *c));
                        }
                    }
                }
            }
        }
    }
    segs
}

fn dist2_point_segment(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum()
}

/// Solid wherever a voxel center lies within `radius` voxels of the family's
/// skeleton, including skeleton images in neighboring cells.
pub fn generate_strut(spec: &StrutSpec, edge: usize) -> Result<VoxelGrid> {
    check_edge(edge)?;
    if !(spec.radius > 0.0 && spec.radius < edge as f64 / 2.0) {
        return Err(Error::config(format!(
            "strut radius {} outside (0, {})",
            spec.radius,
            edge as f64 / 2.0
        )));
    }
    let l = edge as f64;
    let mut segs = Vec::new();
    for (a, b) in strut_segments(spec.family) {
        for sx in -1..=1 {
            for sy in -1..=1 {
                for sz in -1..=1 {
                    let s = [sx as f64, sy as f64, sz as f64];
                    segs.push((
                        [(a[0] + s[0]) * l, (a[1] + s[1]) * l, (a[2] + s[2]) * l],
                        [(b[0] + s[0]) * l, (b[1] + s[1]) * l, (b[2] + s[2]) * l],
                    ));
                }
            }
        }
    }
    let r2 = spec.radius * spec.radius;
    let grid = rasterize(edge, |u| {
        let p = [u[0] * l, u[1] * l, u[2] * l];
        segs.iter().any(|&(a, b)| dist2_point_segment(p, a, b) <= r2)
    });
    check_degenerate(grid)
}

/// Structure-factor field with one full period per octant edge; `t` in radians.
pub fn levelset_field(family: LevelSetFamily, t: [f64; 3]) -> f64 {
    let (x, y, z) = (t[0], t[1], t[2]);
    match family {
        LevelSetFamily::Gyroid => x.sin() * y.cos() + y.sin() * z.cos() + z.sin() * x.cos(),
        LevelSetFamily::SchwarzP => x.cos() + y.cos() + z.cos(),
        LevelSetFamily::Diamond => {
            x.sin() * y.sin() * z.sin()
                + x.sin() * y.cos() * z.cos()
                + x.cos() * y.sin() * z.cos()
                + x.cos() * y.cos() * z.sin()
        }
    }
}

pub fn generate_levelset(spec: &LevelSetSpec, edge: usize) -> Result<VoxelGrid> {
    check_edge(edge)?;
    if spec.shell && spec.shell_thickness <= 0.0 {
        return Err(Error::config("shell variant needs a positive thickness"));
    }
    // The octant spans u in [0, 0.5); map it onto one field period.
    let grid = rasterize(edge, |u| {
        let t = [4.0 * PI * u[0], 4.0 * PI * u[1], 4.0 * PI * u[2]];
        let f = levelset_field(spec.family, t);
        if spec.shell {
            (f - spec.iso_level).abs() < spec.shell_thickness
        } else {
            f > spec.iso_level
        }
    });
    check_degenerate(grid)
}

fn template_inside(template: TemplateId, p: &[f64], u: [f64; 3]) -> bool {
    let stretch = [1.0, 1.0 + 0.8 * p[2], 1.0 + 0.8 * p[3]];
    let count = |f: &dyn Fn(usize) -> bool| (0..3).filter(|&a| f(a)).count();
    match template {
        TemplateId::FacePlates => {
            let t = 0.05 + 0.11 * p[0];
            let hole = 0.45 * p[1];
            (0..3).any(|a| {
                let (b, c) = ((a + 1) % 3, (a + 2) % 3);
                let r = ((u[b] - 0.5).powi(2) + (u[c] - 0.5).powi(2)).sqrt();
                u[a] < t * stretch[a] && r >= hole
            })
        }
        TemplateId::EdgeFrame => {
            let w = 0.05 + 0.15 * p[0];
            let node = 0.06 + 0.2 * p[1];
            let r = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            count(&|a| u[a] < w * stretch[a]) >= 2 || r < node
        }
        TemplateId::MidPlates => {
            let t = 0.05 + 0.08 * p[0];
            let hole = 0.2 * p[1];
            (0..3).any(|a| {
                let (b, c) = ((a + 1) % 3, (a + 2) % 3);
                let r = ((u[b] - 0.25).powi(2) + (u[c] - 0.25).powi(2)).sqrt();
                u[a] > 0.5 - t * stretch[a] && r >= hole
            })
        }
        TemplateId::CenterCross => {
            let w = 0.05 + 0.11 * p[0];
            let node = 0.08 + 0.25 * p[1];
            let r = u.iter().map(|v| (v - 0.5).powi(2)).sum::<f64>().sqrt();
            count(&|a| u[a] > 0.5 - w * stretch[a]) >= 2 || r < node
        }
    }
}

pub fn generate_template(spec: &TemplateSpec, edge: usize) -> Result<VoxelGrid> {
    check_edge(edge)?;
    if spec.params.len() != spec.template.param_count() {
        return Err(Error::config(format!(
            "template {:?} takes {} params, got {}",
            spec.template,
            spec.template.param_count(),
            spec.params.len()
        )));
    }
    if spec.params.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::config("template params must lie in [0, 1]"));
    }
    let grid = rasterize(edge, |u| template_inside(spec.template, &spec.params, u));
    check_degenerate(grid)
}

pub fn sample_material(base: &MaterialSample, rng_seed: u64) -> Result<MaterialSample> {
    sample_material_scaled(base, rng_seed, MATERIAL_STD_FACTOR)
}

/// Gaussian draw with `std = std_factor * base` per property, redrawn until
/// physical.
pub fn sample_material_scaled(
    base: &MaterialSample,
    rng_seed: u64,
    std_factor: f64,
) -> Result<MaterialSample> {
    if !base.is_physical() {
        return Err(Error::NonPhysicalBase {
            youngs_modulus: base.youngs_modulus,
            poisson_ratio: base.poisson_ratio,
        });
    }
    if std_factor == 0.0 {
        return Ok(*base);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let e_dist = Normal::new(base.youngs_modulus, (std_factor * base.youngs_modulus).abs())
        .map_err(|e| Error::config(e.to_string()))?;
    let nu_dist = Normal::new(base.poisson_ratio, (std_factor * base.poisson_ratio).abs())
        .map_err(|e| Error::config(e.to_string()))?;
    for _ in 0..MAX_REDRAWS {
        let draw = MaterialSample {
            youngs_modulus: e_dist.sample(&mut rng),
            poisson_ratio: nu_dist.sample(&mut rng),
        };
        if draw.is_physical() {
            return Ok(draw);
        }
    }
    Err(Error::NonPhysicalBase {
        youngs_modulus: base.youngs_modulus,
        poisson_ratio: base.poisson_ratio,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub edge_voxels: usize,
    pub vf_min: f64,
    pub vf_max: f64,
    pub seed: u64,
    pub count: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            edge_voxels: 16,
            vf_min: 0.05,
            vf_max: 0.4,
            seed: 0,
            count: 100,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        check_edge(self.edge_voxels)?;
        if !(0.0 < self.vf_min && self.vf_min < self.vf_max && self.vf_max < 1.0) {
            return Err(Error::config(format!(
                "volume-fraction window ({}, {}) invalid",
                self.vf_min, self.vf_max
            )));
        }
        Ok(())
    }
}

/// Relative weights of the strut, level-set and template families.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyMix {
    pub strut: f64,
    pub levelset: f64,
    pub template: f64,
}

impl Default for FamilyMix {
    fn default() -> Self {
        Self {
            strut: 1.0 / 3.0,
            levelset: 1.0 / 3.0,
            template: 1.0 / 3.0,
        }
    }
}

impl FamilyMix {
    fn validate(&self) -> Result<()> {
        let w = [self.strut, self.levelset, self.template];
        if w.iter().any(|&x| x < 0.0) || ((w.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::config("family weights must be non-negative and sum to 1"));
        }
        Ok(())
    }
}

/// Draws a random unit specification for one family (0 strut, 1 level set,
/// 2 template) with ranges tuned to land mostly in the default volume window.
pub fn random_spec<R: Rng>(family: usize, edge: usize, rng: &mut R) -> UnitSpec {
    match family {
        0 => {
            let family = [StrutFamily::Octet, StrutFamily::Octahedral, StrutFamily::Bcc]
                [rng.random_range(0..3)];
            let max_r = match family {
                StrutFamily::Octet => 0.09,
                StrutFamily::Octahedral => 0.14,
                StrutFamily::Bcc => 0.16,
            } * edge as f64;
            UnitSpec::Strut(StrutSpec {
                family,
                radius: rng.random_range(0.9..max_r.max(1.0)),
            })
        }
        1 => {
            let family = [
                LevelSetFamily::Gyroid,
                LevelSetFamily::SchwarzP,
                LevelSetFamily::Diamond,
            ][rng.random_range(0..3)];
            let shell = rng.random_bool(0.5);
            let (iso_level, shell_thickness) = if shell {
                (rng.random_range(-0.4..0.4), rng.random_range(0.15..0.45))
            } else {
                let iso = match family {
                    LevelSetFamily::Gyroid => rng.random_range(0.35..1.1),
                    LevelSetFamily::SchwarzP => rng.random_range(0.5..1.8),
                    LevelSetFamily::Diamond => rng.random_range(0.3..1.0),
                };
                (iso, 0.0)
            };
            UnitSpec::LevelSet(LevelSetSpec {
                family,
                iso_level,
                shell,
                shell_thickness,
            })
        }
        _ => {
            let template = TemplateId::ALL[rng.random_range(0..TemplateId::ALL.len())];
            UnitSpec::Template(TemplateSpec {
                template,
                params: (0..template.param_count())
                    .map(|_| rng.random_range(0.0..=1.0))
                    .collect(),
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratedUnit {
    pub id: String,
    pub spec: UnitSpec,
    pub grid: VoxelGrid,
    pub volume_fraction: f64,
}

fn candidate_seed(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ k.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn try_candidate(config: &GeneratorConfig, mix: &FamilyMix, k: u64) -> Option<(UnitSpec, VoxelGrid)> {
    let mut rng = ChaCha8Rng::seed_from_u64(candidate_seed(config.seed, k));
    let pick: f64 = rng.random();
    let family = if pick < mix.strut {
        0
    } else if pick < mix.strut + mix.levelset {
        1
    } else {
        2
    };
    let spec = random_spec(family, config.edge_voxels, &mut rng);
    let grid = match spec.generate(config.edge_voxels) {
        Ok(g) => g,
        Err(e) => {
            log::debug!("candidate {k} rejected: {e}");
            return None;
        }
    };
    let (grid, _) = largest_component(&grid, Connectivity::Face).ok()?;
    let vf = grid.volume_fraction();
    (vf >= config.vf_min && vf <= config.vf_max).then_some((spec, grid))
}

/// Generates `config.count` connected units inside the volume window.
/// Candidates are evaluated in parallel but accepted in index order, so the
/// output depends only on the seed.
pub fn generate_units(config: &GeneratorConfig, mix: &FamilyMix) -> Result<Vec<GeneratedUnit>> {
    config.validate()?;
    mix.validate()?;
    let mut units = Vec::with_capacity(config.count);
    let max_candidates = 200 * config.count.max(1) as u64;
    let chunk = 64u64;
    let mut next = 0u64;
    let mut seen = std::collections::HashSet::new();
    while units.len() < config.count {
        if next >= max_candidates {
            return Err(Error::config(format!(
                "only {} of {} units landed in the volume window",
                units.len(),
                config.count
            )));
        }
        let batch: Vec<_> = (next..next + chunk)
            .into_par_iter()
            .map(|k| try_candidate(config, mix, k))
            .collect();
        next += chunk;
        for (spec, grid) in batch.into_iter().flatten() {
            if units.len() == config.count {
                break;
            }
            // Distinct specs can rasterize to the same grid; keep the first.
            if !seen.insert(grid.values().iter().map(|v| *v > 0.5).collect::<Vec<bool>>()) {
                continue;
            }
            let id = format!("u{:05}", units.len());
            let volume_fraction = grid.volume_fraction();
            units.push(GeneratedUnit {
                id,
                spec,
                grid,
                volume_fraction,
            });
        }
    }
    Ok(units)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub family: String,
    pub spec_json: String,
    pub edge_voxels: usize,
    pub volume_fraction: f64,
    pub voxel_path: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub rows: Vec<ManifestRow>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        // Header is written explicitly so an empty manifest still has one.
        w.write_record([
            "id",
            "family",
            "spec_json",
            "edge_voxels",
            "volume_fraction",
            "voxel_path",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.id.clone(),
                r.family.clone(),
                r.spec_json.clone(),
                r.edge_voxels.to_string(),
                format!("{:.6}", r.volume_fraction),
                r.voxel_path.clone(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Resolves a row's voxel path relative to the manifest's directory.
    pub fn resolve(manifest_path: &Path, row: &ManifestRow) -> PathBuf {
        let p = PathBuf::from(&row.voxel_path);
        if p.is_absolute() {
            p
        } else {
            manifest_path.parent().unwrap_or(Path::new(".")).join(p)
        }
    }
}

/// Generates units, writes `voxels/<id>.vox` files under `out_dir` and
/// returns the manifest (also written to `out_dir/manifest.csv`).
pub fn build_dataset(config: &GeneratorConfig, mix: &FamilyMix, out_dir: &Path) -> Result<DatasetManifest> {
    let units = generate_units(config, mix)?;
    let vox_dir = out_dir.join("voxels");
    std::fs::create_dir_all(&vox_dir)?;
    let mut rows = Vec::with_capacity(units.len());
    for u in &units {
        let rel = format!("voxels/{}.vox", u.id);
        save_grid(&u.grid, &out_dir.join(&rel))?;
        rows.push(ManifestRow {
            id: u.id.clone(),
            family: u.spec.family_name().to_string(),
            spec_json: serde_json::to_string(&u.spec)?,
            edge_voxels: config.edge_voxels,
            volume_fraction: u.volume_fraction,
            voxel_path: rel,
        });
    }
    let manifest = DatasetManifest { rows };
    manifest.write_csv(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxel::volume_fraction;

    fn symmetric(g: &VoxelGrid) -> bool {
        (0..3).all(|a| &g.reflect(a) == g)
    }

    #[test]
    fn bcc_connects_with_large_radius() {
        let g = generate_strut(
            &StrutSpec {
                family: StrutFamily::Bcc,
                radius: 2.0,
            },
            16,
        )
        .unwrap();
        assert!(symmetric(&g));
        let (_, removed) = largest_component(&g, Connectivity::Face).unwrap();
        assert_eq!(removed, 0);
    }

    #[test]
    fn octet_volume_grows_with_radius() {
        let mut last = 0.0;
        for r in [0.8, 1.2, 1.6, 2.0, 2.4] {
            let g = generate_strut(
                &StrutSpec {
                    family: StrutFamily::Octet,
                    radius: r,
                },
                16,
            )
            .unwrap();
            let vf = volume_fraction(&g);
            assert!(vf >= last);
            last = vf;
        }
    }

    #[test]
    fn bcc_matches_capsule_oracle() {
        // Independent oracle: explicit corner-to-center capsules over the
        // full grid with all periodic images.
        let l = 16usize;
        let r = 1.5f64;
        let g = generate_strut(
            &StrutSpec {
                family: StrutFamily::Bcc,
                radius: r,
            },
            l,
        )
        .unwrap();
        let lf = l as f64;
        let mut solid = 0usize;
        for z in 0..l {
            for y in 0..l {
                for x in 0..l {
                    let p = [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5];
                    let mut hit = false;
                    'outer: for cell in 0..27 {
                        let off = [
                            (cell % 3) as f64 - 1.0,
                            ((cell / 3) % 3) as f64 - 1.0,
                            (cell / 9) as f64 - 1.0,
                        ];
                        let center = [(0.5 + off[0]) * lf, (0.5 + off[1]) * lf, (0.5 + off[2]) * lf];
                        for k in 0..8 {
                            let corner = [
                                ((k & 1) as f64 + off[0]) * lf,
                                (((k >> 1) & 1) as f64 + off[1]) * lf,
                                (((k >> 2) & 1) as f64 + off[2]) * lf,
                            ];
                            let d: Vec<f64> = (0..3).map(|i| center[i] - corner[i]).collect();
                            let w: Vec<f64> = (0..3).map(|i| p[i] - corner[i]).collect();
                            let dd: f64 = d.iter().map(|v| v * v).sum();
                            let t = (w.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>() / dd).clamp(0.0, 1.0);
                            let dist2: f64 = (0..3).map(|i| (w[i] - t * d[i]).powi(2)).sum();
                            if dist2 <= r * r {
                                hit = true;
                                break 'outer;
                            }
                        }
                    }
                    if hit {
                        solid += 1;
                    }
                }
            }
        }
        let oracle = solid as f64 / (l * l * l) as f64;
        assert!((volume_fraction(&g) - oracle).abs() < 1e-12, "{} vs {}", volume_fraction(&g), oracle);
    }

    #[test]
    fn gyroid_zero_level_is_half_full() {
        // Oracle: midpoint-rule integral of the field sign over one period.
        let n = 96;
        let mut pos = 0usize;
        for k in 0..n * n * n {
            let (i, j, m) = (k % n, (k / n) % n, k / (n * n));
            let t = |a: usize| 2.0 * PI * (a as f64 + 0.5) / n as f64;
            if levelset_field(LevelSetFamily::Gyroid, [t(i), t(j), t(m)]) > 0.0 {
                pos += 1;
            }
        }
        let oracle = pos as f64 / (n * n * n) as f64;
        assert!((oracle - 0.5).abs() < 0.01);
        let g = generate_levelset(
            &LevelSetSpec {
                family: LevelSetFamily::Gyroid,
                iso_level: 0.0,
                shell: false,
                shell_thickness: 0.0,
            },
            32,
        )
        .unwrap();
        assert!((volume_fraction(&g) - oracle).abs() <= 0.02);
    }

    #[test]
    fn schwarz_volume_non_increasing_in_iso() {
        let mut last = 1.0;
        for k in 0..12 {
            let iso = -2.5 + 0.4 * k as f64;
            let spec = LevelSetSpec {
                family: LevelSetFamily::SchwarzP,
                iso_level: iso,
                shell: false,
                shell_thickness: 0.0,
            };
            let vf = match generate_levelset(&spec, 16) {
                Ok(g) => volume_fraction(&g),
                Err(Error::DegenerateGeometry(v)) => v,
                Err(e) => panic!("{e}"),
            };
            assert!(vf <= last);
            last = vf;
        }
    }

    #[test]
    fn levelsets_are_periodic_and_symmetric() {
        for family in [LevelSetFamily::Gyroid, LevelSetFamily::SchwarzP, LevelSetFamily::Diamond] {
            for shell in [false, true] {
                let g = generate_levelset(
                    &LevelSetSpec {
                        family,
                        iso_level: 0.3,
                        shell,
                        shell_thickness: 0.3,
                    },
                    16,
                )
                .unwrap();
                assert_eq!(g.translate(16, 0, 0), g);
                assert_eq!(g.translate(0, 16, -16), g);
                assert!(symmetric(&g));
            }
        }
        // The raw field repeats with period 2*pi along each axis.
        let t = [0.3, 1.1, 2.9];
        for family in [LevelSetFamily::Gyroid, LevelSetFamily::SchwarzP, LevelSetFamily::Diamond] {
            let a = levelset_field(family, t);
            let b = levelset_field(family, [t[0] + 2.0 * PI, t[1], t[2] + 2.0 * PI]);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn template_base_shapes_and_symmetry() {
        for t in TemplateId::ALL {
            let g = generate_template(
                &TemplateSpec {
                    template: t,
                    params: vec![0.0; 4],
                },
                16,
            )
            .unwrap();
            assert!(symmetric(&g), "{t:?}");
            let (_, removed) = largest_component(&g, Connectivity::Face).unwrap();
            assert_eq!(removed, 0, "{t:?} base shape is connected");
        }
        // FacePlates at zero: one voxel layer on each face pair.
        let g = generate_template(
            &TemplateSpec {
                template: TemplateId::FacePlates,
                params: vec![0.0; 4],
            },
            16,
        )
        .unwrap();
        let expect = 1.0 - (14.0f64 / 16.0).powi(3);
        assert!((volume_fraction(&g) - expect).abs() < 1e-12);
    }

    #[test]
    fn hole_sweep_decreases_volume() {
        for template in [TemplateId::FacePlates, TemplateId::MidPlates] {
            let vfs: Vec<f64> = (0..=10)
                .map(|k| {
                    let g = generate_template(
                        &TemplateSpec {
                            template,
                            params: vec![0.5, k as f64 / 10.0, 0.0, 0.0],
                        },
                        24,
                    )
                    .unwrap();
                    volume_fraction(&g)
                })
                .collect();
            assert!(vfs.windows(2).all(|w| w[1] <= w[0]), "{template:?}: {vfs:?}");
            assert!(vfs[10] < vfs[0]);
        }
    }

    #[test]
    fn template_params_are_checked() {
        let bad = TemplateSpec {
            template: TemplateId::EdgeFrame,
            params: vec![1.5, 0.0, 0.0, 0.0],
        };
        assert!(generate_template(&bad, 16).is_err());
    }

    #[test]
    fn material_scatter_statistics() {
        let base = MaterialSample::aluminum();
        let n = 10_000;
        let draws: Vec<MaterialSample> = (0..n).map(|s| sample_material(&base, s).unwrap()).collect();
        let mean = draws.iter().map(|d| d.youngs_modulus).sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d.youngs_modulus - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        assert!((std - 683.0).abs() < 0.05 * 683.0, "std {std}");
        assert!((mean - 68_300.0).abs() < 3.0 * 683.0 / (n as f64).sqrt());
        let nu_mean = draws.iter().map(|d| d.poisson_ratio).sum::<f64>() / n as f64;
        assert!((nu_mean - 0.3).abs() < 3.0 * 0.003 / (n as f64).sqrt());
    }

    #[test]
    fn zero_scatter_and_determinism() {
        let base = MaterialSample::aluminum();
        assert_eq!(sample_material_scaled(&base, 5, 0.0).unwrap(), base);
        assert_eq!(sample_material(&base, 42).unwrap(), sample_material(&base, 42).unwrap());
        assert_ne!(sample_material(&base, 42).unwrap(), sample_material(&base, 43).unwrap());
    }

    #[test]
    fn near_incompressible_base_aborts() {
        // nu = 0.4999 with 30% scatter lands above 0.5 often but not always.
        let base = MaterialSample {
            youngs_modulus: 1.0,
            poisson_ratio: 0.4999,
        };
        assert!(sample_material_scaled(&base, 1, 0.3).is_ok());
        let bad = MaterialSample {
            youngs_modulus: 1.0,
            poisson_ratio: 0.6,
        };
        assert!(matches!(sample_material(&bad, 1), Err(Error::NonPhysicalBase { .. })));
    }

    #[test]
    fn dataset_respects_volume_window_and_seed() {
        let cfg = GeneratorConfig {
            edge_voxels: 16,
            count: 100,
            seed: 11,
            ..Default::default()
        };
        let units = generate_units(&cfg, &FamilyMix::default()).unwrap();
        assert_eq!(units.len(), 100);
        for u in &units {
            assert!((0.05..=0.4).contains(&u.volume_fraction));
            assert!(symmetric(&u.grid));
        }
        let again = generate_units(&cfg, &FamilyMix::default()).unwrap();
        assert!(units.iter().zip(&again).all(|(a, b)| a.grid == b.grid && a.spec == b.spec));
        let families: std::collections::HashSet<_> = units.iter().map(|u| u.spec.family_name()).collect();
        assert_eq!(families.len(), 3);
        let distinct: std::collections::HashSet<Vec<u64>> = units
            .iter()
            .map(|u| u.grid.values().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), units.len());
    }

    #[test]
    fn empty_dataset_and_manifest_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig {
            count: 0,
            ..Default::default()
        };
        let m = build_dataset(&cfg, &FamilyMix::default(), dir.path()).unwrap();
        assert!(m.is_empty());
        let text = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        assert_eq!(text.trim(), "id,family,spec_json,edge_voxels,volume_fraction,voxel_path");

        let cfg = GeneratorConfig {
            count: 6,
            seed: 3,
            ..Default::default()
        };
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        build_dataset(&cfg, &FamilyMix::default(), &a).unwrap();
        let m = build_dataset(&cfg, &FamilyMix::default(), &b).unwrap();
        assert_eq!(
            std::fs::read(a.join("manifest.csv")).unwrap(),
            std::fs::read(b.join("manifest.csv")).unwrap()
        );
        let back = DatasetManifest::read_csv(&b.join("manifest.csv")).unwrap();
        assert_eq!(back.len(), 6);
        let grid = crate::voxel::load_grid(&DatasetManifest::resolve(&b.join("manifest.csv"), &back.rows[0])).unwrap();
        assert!((grid.volume_fraction() - m.rows[0].volume_fraction).abs() < 1e-6);
    }
}
