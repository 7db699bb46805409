//! Voxel representation of metamaterial unit cells.
//!
//! Grids are cubic with `edge` voxels per axis and are stored row-major with
//! `x` varying fastest: `index = (z * edge + y) * edge + x`.

use std::collections::VecDeque;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    edge: usize,
    occupancy: Vec<f64>,
    binary: bool,
}

impl VoxelGrid {
    /// Builds a grid from raw occupancy values, clamping nothing: values
    /// outside `[0, 1]` are rejected.
    pub fn from_values(edge: usize, occupancy: Vec<f64>) -> Result<Self> {
        if edge == 0 {
            return Err(Error::shape("edge must be positive"));
        }
        if occupancy.len() != edge * edge * edge {
            return Err(Error::shape(format!(
                "expected {} values for edge {}, got {}",
                edge * edge * edge,
                edge,
                occupancy.len()
            )));
        }
        if let Some(v) = occupancy.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Format(format!("occupancy value {v} outside [0, 1]")));
        }
        let binary = occupancy.iter().all(|&v| v == 0.0 || v == 1.0);
        Ok(Self {
            edge,
            occupancy,
            binary,
        })
    }

    pub fn from_fn(edge: usize, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut occupancy = Vec::with_capacity(edge * edge * edge);
        for z in 0..edge {
            for y in 0..edge {
                for x in 0..edge {
                    occupancy.push(if f(x, y, z) { 1.0 } else { 0.0 });
                }
            }
        }
        Self {
            edge,
            occupancy,
            binary: true,
        }
    }

    pub fn filled(edge: usize, value: bool) -> Self {
        Self::from_fn(edge, |_, _, _| value)
    }

    pub fn edge(&self) -> usize {
        self.edge
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn values(&self) -> &[f64] {
        &self.occupancy
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.edge + y) * self.edge + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.occupancy[self.index(x, y, z)]
    }

    #[inline]
    pub fn is_solid(&self, x: usize, y: usize, z: usize) -> bool {
        self.get(x, y, z) >= DEFAULT_THRESHOLD
    }

    /// Value at integer coordinates taken modulo the cell edge.
    pub fn get_periodic(&self, x: i64, y: i64, z: i64) -> f64 {
        let l = self.edge as i64;
        self.get(
            x.rem_euclid(l) as usize,
            y.rem_euclid(l) as usize,
            z.rem_euclid(l) as usize,
        )
    }

    pub fn solid_count(&self) -> usize {
        self.occupancy.iter().filter(|&&v| v >= DEFAULT_THRESHOLD).count()
    }

    pub fn volume_fraction(&self) -> f64 {
        volume_fraction(self)
    }

    /// The low octant `[0, edge/2)^3`.
    pub fn eighth(&self) -> Result<EighthCell> {
        if self.edge % 2 != 0 {
            return Err(Error::shape(format!(
                "cannot take an eighth of odd edge {}",
                self.edge
            )));
        }
        let h = self.edge / 2;
        let mut values = Vec::with_capacity(h * h * h);
        for z in 0..h {
            for y in 0..h {
                for x in 0..h {
                    values.push(self.get(x, y, z));
                }
            }
        }
        Ok(EighthCell(VoxelGrid {
            edge: h,
            occupancy: values,
            binary: self.binary,
        }))
    }

    /// Reflection across the mid-plane normal to `axis` (0 = x, 1 = y, 2 = z).
    pub fn reflect(&self, axis: usize) -> VoxelGrid {
        let l = self.edge;
        let mut out = self.clone();
        for z in 0..l {
            for y in 0..l {
                for x in 0..l {
                    let (sx, sy, sz) = match axis {
                        0 => (l - 1 - x, y, z),
                        1 => (x, l - 1 - y, z),
                        _ => (x, y, l - 1 - z),
                    };
                    let i = out.index(x, y, z);
                    out.occupancy[i] = self.get(sx, sy, sz);
                }
            }
        }
        out
    }

    /// Periodic translation by an integer voxel offset.
    pub fn translate(&self, dx: i64, dy: i64, dz: i64) -> VoxelGrid {
        let l = self.edge;
        let mut out = self.clone();
        for z in 0..l {
            for y in 0..l {
                for x in 0..l {
                    let i = out.index(x, y, z);
                    out.occupancy[i] =
                        self.get_periodic(x as i64 - dx, y as i64 - dy, z as i64 - dz);
                }
            }
        }
        out
    }

    pub fn into_values(self) -> Vec<f64> {
        self.occupancy
    }
}

/// One octant of a mirror-symmetric unit cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EighthCell(VoxelGrid);

impl EighthCell {
    pub fn new(grid: VoxelGrid) -> Self {
        Self(grid)
    }

    pub fn from_values(edge: usize, values: Vec<f64>) -> Result<Self> {
        VoxelGrid::from_values(edge, values).map(Self)
    }

    pub fn edge(&self) -> usize {
        self.0.edge
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.0
    }

    pub fn into_grid(self) -> VoxelGrid {
        self.0
    }
}

/// Mirrors an octant three times into the full cell; edge doubles.
pub fn mirror_eighth(eighth: &EighthCell) -> VoxelGrid {
    let h = eighth.edge();
    let l = 2 * h;
    let fold = |i: usize| if i < h { i } else { l - 1 - i };
    let src = eighth.grid();
    let mut occupancy = Vec::with_capacity(l * l * l);
    for z in 0..l {
        for y in 0..l {
            for x in 0..l {
                occupancy.push(src.get(fold(x), fold(y), fold(z)));
            }
        }
    }
    VoxelGrid {
        edge: l,
        occupancy,
        binary: src.binary,
    }
}

pub fn volume_fraction(grid: &VoxelGrid) -> f64 {
    grid.occupancy.iter().sum::<f64>() / grid.occupancy.len() as f64
}

pub fn binarize(grid: &VoxelGrid, threshold: f64) -> VoxelGrid {
    let occupancy = grid
        .occupancy
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    VoxelGrid {
        edge: grid.edge,
        occupancy,
        binary: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Connectivity {
    #[default]
    Face,
    Full,
}

impl Connectivity {
    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            6 => Ok(Connectivity::Face),
            26 => Ok(Connectivity::Full),
            other => Err(Error::config(format!("connectivity must be 6 or 26, got {other}"))),
        }
    }

    fn offsets(self) -> Vec<(i64, i64, i64)> {
        let mut out = Vec::new();
        for dz in -1..=1i64 {
            for dy in -1..=1i64 {
                for dx in -1..=1i64 {
                    let manhattan = dx.abs() + dy.abs() + dz.abs();
                    let keep = match self {
                        Connectivity::Face => manhattan == 1,
                        Connectivity::Full => manhattan > 0,
                    };
                    if keep {
                        out.push((dx, dy, dz));
                    }
                }
            }
        }
        out
    }
}

/// Labels solid voxels by periodic connected component. Returns per-voxel
/// labels (`usize::MAX` for void) and the size of each component in order of
/// discovery (lowest flat index first).
pub fn label_components(grid: &VoxelGrid, connectivity: Connectivity) -> (Vec<usize>, Vec<usize>) {
    let l = grid.edge as i64;
    let offsets = connectivity.offsets();
    let mut labels = vec![usize::MAX; grid.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..grid.len() {
        if labels[start] != usize::MAX || grid.occupancy[start] < DEFAULT_THRESHOLD {
            continue;
        }
        let label = sizes.len();
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let x = (i % grid.edge) as i64;
            let y = ((i / grid.edge) % grid.edge) as i64;
            let z = (i / (grid.edge * grid.edge)) as i64;
            for &(dx, dy, dz) in &offsets {
                let nx = (x + dx).rem_euclid(l) as usize;
                let ny = (y + dy).rem_euclid(l) as usize;
                let nz = (z + dz).rem_euclid(l) as usize;
                let j = grid.index(nx, ny, nz);
                if labels[j] == usize::MAX && grid.occupancy[j] >= DEFAULT_THRESHOLD {
                    labels[j] = label;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    (labels, sizes)
}

/// Keeps only the largest solid component under periodic adjacency.
/// Ties go to the component containing the lowest flat index.
pub fn largest_component(
    grid: &VoxelGrid,
    connectivity: Connectivity,
) -> Result<(VoxelGrid, usize)> {
    let (labels, sizes) = label_components(grid, connectivity);
    let Some((keep, &kept)) = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
    else {
        return Err(Error::EmptyStructure);
    };
    let total: usize = sizes.iter().sum();
    let occupancy = labels
        .iter()
        .map(|&lab| if lab == keep { 1.0 } else { 0.0 })
        .collect();
    Ok((
        VoxelGrid {
            edge: grid.edge,
            occupancy,
            binary: true,
        },
        total - kept,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    Rle,
    Raw,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FileHeader {
    edge_voxels: usize,
    binary_flag: bool,
    encoding: Encoding,
}

/// Writes the voxel file format: one JSON header line, then the payload.
/// Binary grids use run-length pairs `(u8 value, u32 LE count)`; continuous
/// grids use little-endian `f32` values in storage order.
pub fn write_grid<W: Write>(grid: &VoxelGrid, mut out: W) -> Result<()> {
    let encoding = if grid.binary {
        Encoding::Rle
    } else {
        Encoding::Raw
    };
    let header = FileHeader {
        edge_voxels: grid.edge,
        binary_flag: grid.binary,
        encoding,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    match encoding {
        Encoding::Rle => {
            let mut iter = grid.occupancy.iter().map(|&v| v as u8).peekable();
            while let Some(value) = iter.next() {
                let mut run: u32 = 1;
                while iter.peek() == Some(&value) && run < u32::MAX {
                    iter.next();
                    run += 1;
                }
                out.write_all(&[value])?;
                out.write_all(&run.to_le_bytes())?;
            }
        }
        Encoding::Raw => {
            for &v in &grid.occupancy {
                out.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_grid<R: Read>(mut input: R) -> Result<VoxelGrid> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing voxel header line".into()))?;
    let header: FileHeader = serde_json::from_slice(&bytes[..newline])?;
    let payload = &bytes[newline + 1..];
    let n = header.edge_voxels.pow(3);
    let mut values = Vec::with_capacity(n);
    match header.encoding {
        Encoding::Rle => {
            if payload.len() % 5 != 0 {
                return Err(Error::Format("truncated run-length payload".into()));
            }
            for chunk in payload.chunks_exact(5) {
                let run = u32::from_le_bytes([chunk[1], chunk[2], chunk[3], chunk[4]]) as usize;
                values.extend(std::iter::repeat_n(chunk[0] as f64, run));
            }
        }
        Encoding::Raw => {
            if payload.len() != 4 * n {
                return Err(Error::Format(format!(
                    "expected {} payload bytes, got {}",
                    4 * n,
                    payload.len()
                )));
            }
            for chunk in payload.chunks_exact(4) {
                values.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
            }
        }
    }
    let grid = VoxelGrid::from_values(header.edge_voxels, values)?;
    if header.binary_flag && !grid.binary {
        return Err(Error::Format("header claims binary but payload is not".into()));
    }
    Ok(grid)
}

pub fn save_grid(grid: &VoxelGrid, path: &std::path::Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_grid(grid, std::io::BufWriter::new(file))
}

pub fn load_grid(path: &std::path::Path) -> Result<VoxelGrid> {
    let file = std::fs::File::open(path)?;
    read_grid(std::io::BufReader::new(file))
}
