//! Ray traversal over the sparse grid: exact in-voxel intervals via an
//! Amanatides-Woo style voxel walk, truncation by accumulated in-voxel
//! distance, and stratified sampling of the surviving intervals.

use rand::Rng;

use crate::label_semantics::AbstractClass;
use crate::voxel_world::{VoxelCoord, VoxelWorld};

/// Origin plus unit direction, in block units.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: [f64; 3],
    pub dir: [f64; 3],
}

impl Ray {
    /// Normalizes the direction. Panics on a zero-length direction.
    pub fn new(origin: [f64; 3], dir: [f64; 3]) -> Self {
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        assert!(norm > 0.0, "ray direction must be nonzero");
        Ray {
            origin,
            dir: [dir[0] / norm, dir[1] / norm, dir[2] / norm],
        }
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.dir[0],
            self.origin[1] + t * self.dir[1],
            self.origin[2] + t * self.dir[2],
        ]
    }
}

/// One maximal interval of the ray inside a single occupied voxel.
#[derive(Debug, Clone, Copy)]
pub struct Segment {
    pub t_enter: f64,
    pub t_exit: f64,
    pub voxel: VoxelCoord,
    pub label: AbstractClass,
    /// (axis, travel sign) of the face the ray entered through; `None` when
    /// the ray started inside the voxel. The outward face normal points
    /// opposite the travel sign.
    pub entry_face: Option<(usize, i8)>,
}

impl Segment {
    pub fn length(&self) -> f64 {
        self.t_exit - self.t_enter
    }
}

/// Ordered in-voxel intervals of one ray.
#[derive(Debug, Clone, Default)]
pub struct SegmentList {
    pub segments: Vec<Segment>,
    pub truncated: bool,
    /// Ray parameter where truncation cut the ray, if it did.
    pub t_max: Option<f64>,
}

impl SegmentList {
    /// Total in-voxel arclength (distance outside voxels does not count).
    pub fn total_length(&self) -> f64 {
        self.segments.iter().map(Segment::length).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// One stratified sample point with its quadrature weight ingredients.
#[derive(Debug, Clone, Copy)]
pub struct Sample {
    pub position: [f64; 3],
    /// Ray parameter of the sample point.
    pub t_mid: f64,
    /// In-voxel arclength assigned to this sample (bin width).
    pub delta: f64,
    pub voxel: VoxelCoord,
    pub label: AbstractClass,
}

#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
}

/// Walks the ray through the grid, emitting every maximal in-voxel interval
/// in order. Starting inside a voxel clamps that interval's entry to t = 0.
/// Ties at edges and corners advance the axis with the smallest next
/// crossing, breaking exact ties in x, y, z order.
pub fn traverse(world: &VoxelWorld, ray: &Ray) -> SegmentList {
    let dims = world.dims();
    let dims_f = [dims[0] as f64, dims[1] as f64, dims[2] as f64];
    let mut list = SegmentList::default();

    // Clip to the grid box.
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    let mut entry_face: Option<(usize, i8)> = None;
    for axis in 0..3 {
        let o = ray.origin[axis];
        let v = ray.dir[axis];
        if v.abs() < 1e-15 {
            if o < 0.0 || o > dims_f[axis] {
                return list;
            }
            continue;
        }
        let ta = (0.0 - o) / v;
        let tb = (dims_f[axis] - o) / v;
        let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
        if lo > t0 {
            t0 = lo;
            entry_face = Some((axis, if v > 0.0 { 1 } else { -1 }));
        }
        t1 = t1.min(hi);
    }
    if t0 > t1 {
        return list;
    }
    if t0 == 0.0 {
        entry_face = None; // origin inside the grid
    }

    // Voxel containing the entry point; nudge forward to resolve boundaries.
    let p = ray.at(t0 + 1e-12);
    let mut voxel = [0i32; 3];
    for axis in 0..3 {
        voxel[axis] = (p[axis].floor() as i32).clamp(0, dims[axis] as i32 - 1);
    }

    // Next plane crossing per axis.
    let mut t_next = [f64::INFINITY; 3];
    let mut step = [0i32; 3];
    for axis in 0..3 {
        let v = ray.dir[axis];
        if v > 1e-15 {
            step[axis] = 1;
            t_next[axis] = ((voxel[axis] + 1) as f64 - ray.origin[axis]) / v;
        } else if v < -1e-15 {
            step[axis] = -1;
            t_next[axis] = (voxel[axis] as f64 - ray.origin[axis]) / v;
        }
    }

    let mut t_cur = t0;
    let max_steps = 3 * (dims[0] + dims[1] + dims[2]) + 16;
    for _ in 0..max_steps {
        // Smallest next crossing; ties resolved x -> y -> z.
        let mut axis = 0;
        for k in 1..3 {
            if t_next[k] < t_next[axis] {
                axis = k;
            }
        }
        let t_exit = t_next[axis];
        let coord = VoxelCoord::new(voxel[0], voxel[1], voxel[2]);
        if let Some(label) = world.label_at(coord) {
            if t_exit > t_cur {
                list.segments.push(Segment {
                    t_enter: t_cur,
                    t_exit,
                    voxel: coord,
                    label,
                    entry_face,
                });
            }
        }
        voxel[axis] += step[axis];
        entry_face = Some((axis, step[axis] as i8));
        t_cur = t_exit;
        t_next[axis] += 1.0 / ray.dir[axis].abs();
        if voxel[axis] < 0 || voxel[axis] >= dims[axis] as i32 {
            break;
        }
    }
    list
}

/// Caps cumulative in-voxel length at `d_max`, shortening the segment the
/// cap lands in. The truncated flag is set iff the cap was reached.
pub fn truncate(list: &SegmentList, d_max: f64) -> SegmentList {
    assert!(d_max > 0.0, "truncation distance must be positive");
    let mut out = SegmentList::default();
    let mut remaining = d_max;
    for seg in &list.segments {
        let len = seg.length();
        if len < remaining {
            out.segments.push(*seg);
            remaining -= len;
        } else {
            let t_cut = seg.t_enter + remaining;
            if remaining > 0.0 {
                let mut cut = *seg;
                cut.t_exit = t_cut;
                out.segments.push(cut);
            }
            out.truncated = true;
            out.t_max = Some(t_cut);
            return out;
        }
    }
    out
}

/// Jitter source for stratified sampling. `Midpoint` forces every sample to
/// its bin center, which turns the quadrature into a deterministic midpoint
/// rule (used by convergence tests and anywhere reproducibility without an
/// rng stream is wanted).
pub enum Jitter<'a, R: Rng> {
    Rng(&'a mut R),
    Midpoint,
}

/// Divides the total in-voxel arclength into `n` equal bins and places one
/// point in each. Empty gaps between voxels cost no samples: bins live in
/// cumulative-arclength space and are mapped back to ray parameters.
pub fn stratified_sample<R: Rng>(
    ray: &Ray,
    list: &SegmentList,
    n: usize,
    jitter: Jitter<'_, R>,
) -> SampleSet {
    assert!(n >= 1, "sample count must be at least 1");
    let mut set = SampleSet::default();
    if list.is_empty() {
        return set;
    }
    let total: f64 = list.total_length();
    if total <= 0.0 {
        return set;
    }
    // Cumulative arclength at segment starts.
    let mut cum = Vec::with_capacity(list.segments.len() + 1);
    let mut acc = 0.0;
    for seg in &list.segments {
        cum.push(acc);
        acc += seg.length();
    }
    cum.push(acc);

    let bin = total / n as f64;
    let mut rng = jitter;
    let mut seg_idx = 0usize;
    for k in 0..n {
        let u = match &mut rng {
            Jitter::Rng(r) => r.random::<f64>(),
            Jitter::Midpoint => 0.5,
        };
        let s = (k as f64 + u) * bin;
        while seg_idx + 1 < cum.len() - 1 && s >= cum[seg_idx + 1] {
            seg_idx += 1;
        }
        let seg = &list.segments[seg_idx];
        let t = (seg.t_enter + (s - cum[seg_idx])).min(seg.t_exit - 1e-12);
        set.samples.push(Sample {
            position: ray.at(t),
            t_mid: t,
            delta: bin,
            voxel: seg.voxel,
            label: seg.label,
        });
    }
    set
}

/// Dense fixed-step marching reference for the traversal, kept independent
/// of `traverse` so the two can check each other. Also backs the
/// `bench traverse` mismatch report.
pub mod oracle {
    use super::*;

    /// Dense occupancy snapshot, so the reference march is not bottlenecked
    /// on hash lookups.
    pub struct DenseGrid {
        dims: [usize; 3],
        occ: Vec<bool>,
    }

    impl DenseGrid {
        pub fn from_world(world: &VoxelWorld) -> Self {
            let dims = world.dims();
            let mut occ = vec![false; dims[0] * dims[1] * dims[2]];
            for (c, _) in world.iter() {
                let idx = (c.z as usize * dims[1] + c.y as usize) * dims[0] + c.x as usize;
                occ[idx] = true;
            }
            DenseGrid { dims, occ }
        }

        #[inline]
        pub fn occupied(&self, x: i32, y: i32, z: i32) -> bool {
            if x < 0
                || y < 0
                || z < 0
                || x as usize >= self.dims[0]
                || y as usize >= self.dims[1]
                || z as usize >= self.dims[2]
            {
                return false;
            }
            self.occ[(z as usize * self.dims[1] + y as usize) * self.dims[0] + x as usize]
        }

        /// Ray parameter at which the ray has certainly left the grid.
        pub fn exit_t(&self, ray: &Ray) -> f64 {
            let diag = (self.dims[0] + self.dims[1] + self.dims[2]) as f64;
            let off = ray.origin.iter().map(|o| o.abs()).sum::<f64>();
            diag + off + 1.0
        }
    }

    /// Counts march points whose in/out-of-voxel membership disagrees with
    /// the segment list, ignoring points within `tol` of a segment boundary.
    pub fn membership_mismatches(
        grid: &DenseGrid,
        ray: &Ray,
        list: &SegmentList,
        step: f64,
        tol: f64,
    ) -> usize {
        let t_end = grid.exit_t(ray);
        let mut mismatches = 0usize;
        let mut seg_idx = 0usize;
        let steps = (t_end / step).ceil() as usize;
        for i in 0..steps {
            let t = i as f64 * step;
            let p = ray.at(t);
            let vx = p[0].floor() as i32;
            let vy = p[1].floor() as i32;
            let vz = p[2].floor() as i32;
            let oracle_inside = grid.occupied(vx, vy, vz);

            while seg_idx < list.segments.len() && list.segments[seg_idx].t_exit < t {
                seg_idx += 1;
            }
            let seg = list.segments.get(seg_idx);
            let claimed = match seg {
                Some(s) => t >= s.t_enter && t < s.t_exit,
                None => false,
            };
            if claimed == oracle_inside {
                // Membership agrees; additionally check the voxel identity.
                if claimed {
                    let s = seg.unwrap();
                    let near_boundary =
                        (t - s.t_enter).abs() <= tol || (s.t_exit - t).abs() <= tol;
                    if !near_boundary && (s.voxel.x != vx || s.voxel.y != vy || s.voxel.z != vz)
                    {
                        mismatches += 1;
                    }
                }
                continue;
            }
            // Disagreement is tolerated only right next to a boundary.
            let near_boundary = list.segments.iter().any(|s| {
                (t - s.t_enter).abs() <= tol + step || (t - s.t_exit).abs() <= tol + step
            });
            if !near_boundary {
                mismatches += 1;
            }
        }
        mismatches
    }
}
