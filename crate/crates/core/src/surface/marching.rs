use std::collections::{BTreeSet, HashMap};

use nalgebra::Vector3;
use rayon::prelude::*;

use super::tables::{EDGE_TABLE, TRI_TABLE};
use super::{SurfaceError, TriangleMesh};
use crate::volume::{log_odds_to_probability, VoxelGrid};

/// Corner offsets of a cube, in table order.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

/// Corner pairs joined by each cube edge.
const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [3, 2],
    [0, 3],
    [4, 5],
    [5, 6],
    [7, 6],
    [4, 7],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Pages processed per batch; bounds the memory of gathered blocks.
const BATCH: usize = 64;

struct Block {
    base: [usize; 3],
    /// Number of cube origins along each axis.
    cubes: [usize; 3],
    /// Probabilities on `(cubes + 1)` samples per axis, x fastest.
    probs: Vec<f64>,
}

/// Extracts the `iso` level set of the occupancy probability with marching
/// cubes. Voxel centers are the sample points. A corner counts as inside
/// when its probability is strictly above `iso`, so unknown space (exactly
/// 0.5) sides with free space at the default level.
///
/// Every sub-volume is processed with a one-voxel overlap band into its
/// neighbours; vertices computed on shared edges are bit-identical and are
/// merged by exact position.
pub fn extract_isosurface(grid: &mut VoxelGrid, iso: f64) -> Result<TriangleMesh, SurfaceError> {
    let dims = grid.dims();
    let edge = grid.sub_volume_edge();
    let [px, py, _] = grid.pages_per_axis();

    // Pages owning cubes that can touch stored data.
    let mut owners = BTreeSet::new();
    for page in grid.page_indices() {
        let base = grid.page_origin_voxel(page);
        let pc = [base[0] / edge, base[1] / edge, base[2] / edge];
        for d in 0..8usize {
            let (dx, dy, dz) = (d & 1, (d >> 1) & 1, (d >> 2) & 1);
            if pc[0] >= dx && pc[1] >= dy && pc[2] >= dz {
                owners.insert((pc[0] - dx) + px * ((pc[1] - dy) + py * (pc[2] - dz)));
            }
        }
    }
    let owners: Vec<usize> = owners.into_iter().collect();

    let origin = grid.origin();
    let vs = grid.voxel_size();
    let mut soup: Vec<[Vector3<f64>; 3]> = Vec::new();
    for batch in owners.chunks(BATCH) {
        let mut blocks = Vec::with_capacity(batch.len());
        for &page in batch {
            let base = grid.page_origin_voxel(page);
            let cubes = [
                edge.min(dims[0].saturating_sub(base[0] + 1)),
                edge.min(dims[1].saturating_sub(base[1] + 1)),
                edge.min(dims[2].saturating_sub(base[2] + 1)),
            ];
            if cubes.iter().any(|c| *c == 0) {
                continue;
            }
            let extent = [cubes[0] + 1, cubes[1] + 1, cubes[2] + 1];
            let raw = grid.read_block(base, extent)?;
            blocks.push(Block {
                base,
                cubes,
                probs: raw.into_iter().map(log_odds_to_probability).collect(),
            });
        }
        let tris: Vec<Vec<[Vector3<f64>; 3]>> = blocks
            .par_iter()
            .map(|b| march_block(b, origin, vs, iso))
            .collect();
        soup.extend(tris.into_iter().flatten());
    }

    let mut index: HashMap<[u64; 3], u32> = HashMap::new();
    let mut positions: Vec<Vector3<f64>> = Vec::new();
    let mut triangles = Vec::with_capacity(soup.len());
    for tri in soup {
        let mut ids = [0u32; 3];
        for (i, p) in tri.iter().enumerate() {
            let key = [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()];
            ids[i] = *index.entry(key).or_insert_with(|| {
                positions.push(*p);
                (positions.len() - 1) as u32
            });
        }
        if ids[0] == ids[1] || ids[1] == ids[2] || ids[0] == ids[2] {
            continue;
        }
        triangles.push(ids);
    }
    if triangles.is_empty() {
        return Err(SurfaceError::EmptyVolume);
    }
    Ok(TriangleMesh::from_positions(positions, triangles))
}

fn march_block(b: &Block, origin: Vector3<f64>, vs: f64, iso: f64) -> Vec<[Vector3<f64>; 3]> {
    let (sx, sy) = (b.cubes[0] + 1, b.cubes[1] + 1);
    let at = |x: usize, y: usize, z: usize| b.probs[x + sx * (y + sy * z)];
    let mut out = Vec::new();
    for z in 0..b.cubes[2] {
        for y in 0..b.cubes[1] {
            for x in 0..b.cubes[0] {
                let mut vals = [0.0f64; 8];
                let mut case = 0usize;
                for (i, c) in CORNERS.iter().enumerate() {
                    vals[i] = at(x + c[0], y + c[1], z + c[2]);
                    if vals[i] <= iso {
                        case |= 1 << i;
                    }
                }
                let mask = EDGE_TABLE[case];
                if mask == 0 {
                    continue;
                }
                let mut verts = [Vector3::zeros(); 12];
                for (e, [ca, cb]) in EDGES.iter().enumerate() {
                    if mask & (1 << e) == 0 {
                        continue;
                    }
                    // EDGES lists the lower corner first on every axis.
                    let lo = [
                        b.base[0] + x + CORNERS[*ca][0],
                        b.base[1] + y + CORNERS[*ca][1],
                        b.base[2] + z + CORNERS[*ca][2],
                    ];
                    let axis = (0..3).find(|a| CORNERS[*ca][*a] != CORNERS[*cb][*a]).unwrap();
                    verts[e] = edge_vertex(origin, vs, lo, axis, vals[*ca], vals[*cb], iso);
                }
                let row = &TRI_TABLE[case];
                let mut i = 0;
                while i < 16 && row[i] >= 0 {
                    out.push([
                        verts[row[i] as usize],
                        verts[row[i + 1] as usize],
                        verts[row[i + 2] as usize],
                    ]);
                    i += 3;
                }
            }
        }
    }
    out
}

/// Vertex on the axis-aligned edge starting at voxel `lo`. Computed from the
/// global voxel index only, so neighbouring pages produce identical bits.
#[inline]
fn edge_vertex(
    origin: Vector3<f64>,
    vs: f64,
    lo: [usize; 3],
    axis: usize,
    p_lo: f64,
    p_hi: f64,
    iso: f64,
) -> Vector3<f64> {
    let mut p = Vector3::new(
        origin.x + (lo[0] as f64 + 0.5) * vs,
        origin.y + (lo[1] as f64 + 0.5) * vs,
        origin.z + (lo[2] as f64 + 0.5) * vs,
    );
    let t = (iso - p_lo) / (p_hi - p_lo);
    if t >= 1.0 {
        p[axis] = origin[axis] + (lo[axis] as f64 + 1.5) * vs;
    } else if t > 0.0 {
        p[axis] += t * vs;
    }
    p
}
