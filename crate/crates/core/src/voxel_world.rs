//! Sparse labeled voxel grid, its preprocessing into a renderable shell, and
//! the shared corner-vertex feature registry with trilinear lookup.
//!
//! Conventions: unit voxels aligned to the coordinate axes, world origin at
//! the (0,0,0) corner of voxel (0,0,0), z is up. Voxel (x,y,z) spans
//! `[x,x+1) x [y,y+1) x [z,z+1)` in world units.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::label_semantics::{AbstractClass, LabelScheme};

/// Integer grid index of a voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelCoord {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl VoxelCoord {
    pub fn new(x: i32, y: i32, z: i32) -> Self {
        VoxelCoord { x, y, z }
    }

    pub fn offset(self, dx: i32, dy: i32, dz: i32) -> Self {
        VoxelCoord::new(self.x + dx, self.y + dy, self.z + dz)
    }
}

/// Integer lattice coordinate of a voxel corner. A key exists iff at least
/// one occupied voxel touches it; adjacent voxels share the identical key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VertexKey {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

const FACE_NEIGHBORS: [(i32, i32, i32); 6] = [
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
];

/// Sparse labeled occupancy grid.
#[derive(Debug, Clone)]
pub struct VoxelWorld {
    dims: [usize; 3],
    occupancy: HashMap<VoxelCoord, AbstractClass>,
}

/// Largest accepted grid dimension when loading from a file.
pub const MAX_DIM: usize = 4096;

impl VoxelWorld {
    pub fn new(dims: [usize; 3]) -> Self {
        VoxelWorld {
            dims,
            occupancy: HashMap::new(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Number of occupied voxels.
    pub fn occupied_count(&self) -> usize {
        self.occupancy.len()
    }

    pub fn in_bounds(&self, c: VoxelCoord) -> bool {
        c.x >= 0
            && c.y >= 0
            && c.z >= 0
            && (c.x as usize) < self.dims[0]
            && (c.y as usize) < self.dims[1]
            && (c.z as usize) < self.dims[2]
    }

    pub fn label_at(&self, c: VoxelCoord) -> Option<AbstractClass> {
        self.occupancy.get(&c).copied()
    }

    pub fn is_occupied(&self, c: VoxelCoord) -> bool {
        self.occupancy.contains_key(&c)
    }

    /// Inserts a voxel, replacing any previous label at that coordinate.
    pub fn set(&mut self, c: VoxelCoord, class: AbstractClass) {
        debug_assert!(self.in_bounds(c));
        self.occupancy.insert(c, class);
    }

    pub fn iter(&self) -> impl Iterator<Item = (VoxelCoord, AbstractClass)> + '_ {
        self.occupancy.iter().map(|(&c, &l)| (c, l))
    }

    /// Voxel containing the continuous point `p`, if occupied.
    pub fn voxel_at(&self, p: [f64; 3]) -> Option<(VoxelCoord, AbstractClass)> {
        let c = VoxelCoord::new(
            p[0].floor() as i32,
            p[1].floor() as i32,
            p[2].floor() as i32,
        );
        self.label_at(c).map(|l| (c, l))
    }

    /// Highest occupied z in column (x, y), if any.
    pub fn column_top(&self, x: i32, y: i32) -> Option<i32> {
        (0..self.dims[2] as i32)
            .rev()
            .find(|&z| self.is_occupied(VoxelCoord::new(x, y, z)))
    }

    fn neighbor_is_air(&self, c: VoxelCoord, d: (i32, i32, i32)) -> bool {
        let n = c.offset(d.0, d.1, d.2);
        !self.in_bounds(n) || !self.is_occupied(n)
    }

    /// True if the voxel has at least one face exposed to empty space or the
    /// grid boundary.
    pub fn is_surface(&self, c: VoxelCoord) -> bool {
        FACE_NEIGHBORS.iter().any(|&d| self.neighbor_is_air(c, d))
    }
}

/// Parses the GVOX text format: header `gvox 1 <dx> <dy> <dz>`, then one
/// voxel per line as `x y z label_name`. `#` starts a comment.
pub fn load_world(path: &Path) -> Result<VoxelWorld> {
    let text = std::fs::read_to_string(path)?;
    parse_gvox(&text, &LabelScheme::default())
}

pub fn load_world_with_scheme(path: &Path, scheme: &LabelScheme) -> Result<VoxelWorld> {
    let text = std::fs::read_to_string(path)?;
    parse_gvox(&text, scheme)
}

pub fn parse_gvox(text: &str, scheme: &LabelScheme) -> Result<VoxelWorld> {
    let err = |offset: usize, msg: String| Error::Parse { offset, msg };
    let mut offset = 0usize;
    let mut world: Option<VoxelWorld> = None;
    for line in text.split('\n') {
        let line_offset = offset;
        offset += line.len() + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        match &mut world {
            None => {
                if fields.len() != 5 || fields[0] != "gvox" || fields[1] != "1" {
                    return Err(err(
                        line_offset,
                        "expected header 'gvox 1 <dim_x> <dim_y> <dim_z>'".into(),
                    ));
                }
                let mut dims = [0usize; 3];
                for (i, f) in fields[2..].iter().enumerate() {
                    let d: usize = f
                        .parse()
                        .map_err(|_| err(line_offset, format!("bad dimension '{f}'")))?;
                    if d == 0 {
                        return Err(err(line_offset, "dimensions must be positive".into()));
                    }
                    if d > MAX_DIM {
                        return Err(err(
                            line_offset,
                            format!("dimension {d} exceeds maximum {MAX_DIM}"),
                        ));
                    }
                    dims[i] = d;
                }
                world = Some(VoxelWorld::new(dims));
            }
            Some(world) => {
                if fields.len() != 4 {
                    return Err(err(line_offset, "expected 'x y z label_name'".into()));
                }
                let mut xyz = [0i32; 3];
                for (i, f) in fields[..3].iter().enumerate() {
                    xyz[i] = f
                        .parse()
                        .map_err(|_| err(line_offset, format!("bad coordinate '{f}'")))?;
                }
                let c = VoxelCoord::new(xyz[0], xyz[1], xyz[2]);
                if !world.in_bounds(c) {
                    return Err(err(
                        line_offset,
                        format!("voxel ({}, {}, {}) outside grid", c.x, c.y, c.z),
                    ));
                }
                if !scheme.knows(fields[3]) {
                    return Err(err(line_offset, format!("unknown label id '{}'", fields[3])));
                }
                if world.is_occupied(c) {
                    return Err(err(
                        line_offset,
                        format!("duplicate voxel ({}, {}, {})", c.x, c.y, c.z),
                    ));
                }
                world.set(c, scheme.translate(fields[3]));
            }
        }
    }
    let world = world.ok_or_else(|| err(offset, "missing gvox header".into()))?;
    if world.occupied_count() == 0 {
        return Err(err(offset, "world contains no voxels".into()));
    }
    Ok(world)
}

/// Writes a world back out as GVOX text (abstract class names as labels).
pub fn write_world(world: &VoxelWorld, path: &Path) -> Result<()> {
    let mut voxels: Vec<(VoxelCoord, AbstractClass)> = world.iter().collect();
    voxels.sort_by_key(|(c, _)| (c.z, c.y, c.x));
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let d = world.dims();
    writeln!(out, "gvox 1 {} {} {}", d[0], d[1], d[2])?;
    for (c, class) in voxels {
        writeln!(out, "{} {} {} {}", c.x, c.y, c.z, class.name())?;
    }
    Ok(())
}

/// Removes interior voxels, keeping the crust within `thickness` voxels of
/// air by 6-connected distance. Grid boundaries count as air. Every voxel
/// with an exposed face is distance 1 and therefore always retained.
pub fn shell_extract(world: &VoxelWorld, thickness: usize) -> VoxelWorld {
    assert!(thickness >= 1, "shell thickness must be at least 1");
    let mut dist: HashMap<VoxelCoord, usize> = HashMap::new();
    let mut queue = VecDeque::new();
    for (c, _) in world.iter() {
        if world.is_surface(c) {
            dist.insert(c, 1);
            queue.push_back(c);
        }
    }
    while let Some(c) = queue.pop_front() {
        let d = dist[&c];
        if d >= thickness {
            continue;
        }
        for &(dx, dy, dz) in &FACE_NEIGHBORS {
            let n = c.offset(dx, dy, dz);
            if world.is_occupied(n) && !dist.contains_key(&n) {
                dist.insert(n, d + 1);
                queue.push_back(n);
            }
        }
    }
    let mut out = VoxelWorld::new(world.dims());
    for (c, class) in world.iter() {
        if dist.contains_key(&c) {
            out.set(c, class);
        }
    }
    out
}

/// Shared corner-vertex feature registry. Rows of `values` are the learnable
/// vectors, one per distinct corner of the occupied voxels; the index maps a
/// lattice corner to its row so adjacent voxels interpolate from the same
/// storage.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    dim: usize,
    index: HashMap<VertexKey, usize>,
    keys: Vec<VertexKey>,
    pub values: Array2<f64>,
}

impl FeatureTable {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_vertices(&self) -> usize {
        self.keys.len()
    }

    pub fn row_of(&self, key: VertexKey) -> Option<usize> {
        self.index.get(&key).copied()
    }

    pub fn keys(&self) -> &[VertexKey] {
        &self.keys
    }

    pub fn from_parts(keys: Vec<VertexKey>, values: Array2<f64>) -> Self {
        let index = keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        FeatureTable {
            dim: values.ncols(),
            index,
            keys,
            values,
        }
    }
}

/// One feature row per distinct corner, drawn i.i.d. uniform in
/// [-init_scale, init_scale]. Deterministic given the seed: rows are
/// allocated in sorted corner order.
pub fn init_features(world: &VoxelWorld, dim: usize, seed: u64) -> FeatureTable {
    init_features_scaled(world, dim, seed, 0.1)
}

pub fn init_features_scaled(
    world: &VoxelWorld,
    dim: usize,
    seed: u64,
    init_scale: f64,
) -> FeatureTable {
    assert!(dim >= 2, "feature dim must be at least 2");
    let mut keys: Vec<VertexKey> = Vec::new();
    {
        let mut seen = HashMap::new();
        for (c, _) in world.iter() {
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let k = VertexKey {
                            x: c.x + dx,
                            y: c.y + dy,
                            z: c.z + dz,
                        };
                        seen.entry(k).or_insert(());
                    }
                }
            }
        }
        keys.extend(seen.keys().copied());
    }
    keys.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Array2::zeros((keys.len(), dim));
    for mut row in values.rows_mut() {
        for v in row.iter_mut() {
            *v = rng.random_range(-init_scale..init_scale);
        }
    }
    FeatureTable::from_parts(keys, values)
}

/// Corner feature rows and trilinear weights for a point inside a voxel.
/// Corner order: bit 0 = +x, bit 1 = +y, bit 2 = +z.
pub fn corner_rows_and_weights(
    table: &FeatureTable,
    voxel: VoxelCoord,
    p: [f64; 3],
) -> ([usize; 8], [f64; 8]) {
    let fx = (p[0] - voxel.x as f64).clamp(0.0, 1.0);
    let fy = (p[1] - voxel.y as f64).clamp(0.0, 1.0);
    let fz = (p[2] - voxel.z as f64).clamp(0.0, 1.0);
    let mut rows = [0usize; 8];
    let mut weights = [0f64; 8];
    for corner in 0..8 {
        let cx = (corner & 1) as i32;
        let cy = ((corner >> 1) & 1) as i32;
        let cz = ((corner >> 2) & 1) as i32;
        let key = VertexKey {
            x: voxel.x + cx,
            y: voxel.y + cy,
            z: voxel.z + cz,
        };
        rows[corner] = table
            .row_of(key)
            .expect("occupied voxel corner missing from feature table");
        let wx = if cx == 1 { fx } else { 1.0 - fx };
        let wy = if cy == 1 { fy } else { 1.0 - fy };
        let wz = if cz == 1 { fz } else { 1.0 - fz };
        weights[corner] = wx * wy * wz;
    }
    (rows, weights)
}

/// Trilinear interpolation of the shared corner features at `p`, plus the
/// voxel's label. Returns `None` when `p` is not inside an occupied voxel.
pub fn location_code(
    world: &VoxelWorld,
    table: &FeatureTable,
    p: [f64; 3],
) -> Option<(Vec<f64>, AbstractClass)> {
    let (voxel, label) = world.voxel_at(p)?;
    let (rows, weights) = corner_rows_and_weights(table, voxel, p);
    let mut code = vec![0.0; table.dim()];
    for (row, w) in rows.iter().zip(weights.iter()) {
        let feat = table.values.row(*row);
        for (c, f) in code.iter_mut().zip(feat.iter()) {
            *c += w * f;
        }
    }
    Some((code, label))
}
