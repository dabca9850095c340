//! Paged log-odds occupancy volume fused from posed depth images.
//!
//! The volume is split into cubic sub-volumes ("pages"). Pages are created on
//! first write, can be evicted to a [`PageStore`] and are reloaded on demand,
//! so the resident footprint is bounded by an optional page budget while the
//! contents stay byte-identical to an unbounded run.
//!
//! The grid is single-writer: concurrent integration is only sound for frames
//! touching disjoint page sets, which this type does not check. Read-only
//! access through `&self` helpers never reloads pages.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{Intrinsics, Pose6D};
use crate::io::{self, FormatError};
use crate::raster::DepthImage;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("depth image has no pixels")]
    EmptyDepthImage,
    #[error("depth image is {got:?}, intrinsics expect {expected:?}")]
    DimensionMismatch {
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("backing store failure: {0}")]
    BackingStoreFailure(String),
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Log-odds update constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationParams {
    pub l_occ: f32,
    pub l_free: f32,
    pub l_min: f32,
    pub l_max: f32,
    /// Depth readings beyond this range (meters) are ignored.
    pub max_range: f64,
    /// Integrate every `pixel_stride`-th pixel in both directions.
    pub pixel_stride: usize,
}

impl Default for IntegrationParams {
    fn default() -> Self {
        Self {
            l_occ: 0.85,
            l_free: -0.40,
            l_min: -3.5,
            l_max: 3.5,
            max_range: 5.0,
            pixel_stride: 1,
        }
    }
}

impl IntegrationParams {
    pub fn validate(&self) -> Result<(), VolumeError> {
        if !(self.l_occ > 0.0 && self.l_free < 0.0 && self.l_min < 0.0 && self.l_max > 0.0) {
            return Err(VolumeError::InvalidGrid(
                "need l_occ > 0 > l_free and l_min < 0 < l_max".into(),
            ));
        }
        if self.pixel_stride == 0 || !(self.max_range > 0.0) {
            return Err(VolumeError::InvalidGrid("bad stride or range".into()));
        }
        Ok(())
    }
}

/// Storage for evicted pages.
pub trait PageStore: Send + Sync {
    fn write(&mut self, index: usize, bytes: &[u8]) -> Result<(), VolumeError>;
    fn read(&self, index: usize) -> Result<Vec<u8>, VolumeError>;
}

/// Keeps evicted pages as byte buffers in memory.
#[derive(Debug, Default)]
pub struct MemoryStore {
    blocks: BTreeMap<usize, Vec<u8>>,
}

impl PageStore for MemoryStore {
    fn write(&mut self, index: usize, bytes: &[u8]) -> Result<(), VolumeError> {
        self.blocks.insert(index, bytes.to_vec());
        Ok(())
    }

    fn read(&self, index: usize) -> Result<Vec<u8>, VolumeError> {
        self.blocks
            .get(&index)
            .cloned()
            .ok_or_else(|| VolumeError::BackingStoreFailure(format!("page {index} not stored")))
    }
}

/// One raw little-endian `f32` file per page: `<dir>/page_<index>.bin`.
#[derive(Debug, Clone)]
pub struct DirectoryStore {
    dir: PathBuf,
}

impl DirectoryStore {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, VolumeError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)
            .map_err(|e| VolumeError::BackingStoreFailure(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    fn path(&self, index: usize) -> PathBuf {
        self.dir.join(format!("page_{index}.bin"))
    }
}

impl PageStore for DirectoryStore {
    fn write(&mut self, index: usize, bytes: &[u8]) -> Result<(), VolumeError> {
        let p = self.path(index);
        fs::write(&p, bytes)
            .map_err(|e| VolumeError::BackingStoreFailure(format!("{}: {e}", p.display())))
    }

    fn read(&self, index: usize) -> Result<Vec<u8>, VolumeError> {
        let p = self.path(index);
        fs::read(&p).map_err(|e| VolumeError::BackingStoreFailure(format!("{}: {e}", p.display())))
    }
}

/// One cubic block of log-odds values.
#[derive(Debug, Clone)]
pub struct SubVolume {
    values: Option<Vec<f32>>,
    last_access: u64,
}

impl SubVolume {
    pub fn is_resident(&self) -> bool {
        self.values.is_some()
    }

    pub fn last_access(&self) -> u64 {
        self.last_access
    }
}

/// Summary of one depth integration.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IntegrationStats {
    pub rays: usize,
    pub occupied_updates: usize,
    pub free_updates: usize,
}

const MARK_FREE: u8 = 1;
const MARK_OCC: u8 = 2;

pub struct VoxelGrid {
    origin: Vector3<f64>,
    voxel_size: f64,
    dims: [usize; 3],
    edge: usize,
    pages: BTreeMap<usize, SubVolume>,
    store: Box<dyn PageStore>,
    clock: u64,
    budget: Option<usize>,
}

impl std::fmt::Debug for VoxelGrid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VoxelGrid")
            .field("origin", &self.origin)
            .field("voxel_size", &self.voxel_size)
            .field("dims", &self.dims)
            .field("sub_volume_edge", &self.edge)
            .field("pages", &self.pages.len())
            .field("budget", &self.budget)
            .finish()
    }
}

#[inline]
pub fn log_odds_to_probability(l: f32) -> f64 {
    1.0 / (1.0 + (-(l as f64)).exp())
}

impl VoxelGrid {
    pub fn new(
        origin: Vector3<f64>,
        voxel_size: f64,
        dims: [usize; 3],
        sub_volume_edge: usize,
    ) -> Result<Self, VolumeError> {
        if !(voxel_size > 0.0) {
            return Err(VolumeError::InvalidGrid("voxel_size must be positive".into()));
        }
        if sub_volume_edge == 0 || dims.iter().any(|d| *d == 0 || d % sub_volume_edge != 0) {
            return Err(VolumeError::InvalidGrid(format!(
                "dims {dims:?} must be positive multiples of sub_volume_edge {sub_volume_edge}"
            )));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
            edge: sub_volume_edge,
            pages: BTreeMap::new(),
            store: Box::new(MemoryStore::default()),
            clock: 0,
            budget: None,
        })
    }

    /// Replaces the backing store. Must be called before any eviction.
    pub fn with_store(mut self, store: Box<dyn PageStore>) -> Self {
        self.store = store;
        self
    }

    /// Caps the number of resident pages; enforced after every page access.
    pub fn set_page_budget(&mut self, budget: Option<usize>) -> Result<(), VolumeError> {
        if budget == Some(0) {
            return Err(VolumeError::InvalidGrid("page budget must be ≥ 1".into()));
        }
        self.budget = budget;
        if let Some(b) = budget {
            self.evict_pages(b)?;
        }
        Ok(())
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn sub_volume_edge(&self) -> usize {
        self.edge
    }

    pub fn pages_per_axis(&self) -> [usize; 3] {
        [
            self.dims[0] / self.edge,
            self.dims[1] / self.edge,
            self.dims[2] / self.edge,
        ]
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn resident_count(&self) -> usize {
        self.pages.values().filter(|p| p.is_resident()).count()
    }

    pub fn page_indices(&self) -> Vec<usize> {
        self.pages.keys().copied().collect()
    }

    pub fn page(&self, index: usize) -> Option<&SubVolume> {
        self.pages.get(&index)
    }

    /// Upper corner of the grid in world coordinates.
    pub fn max_corner(&self) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                self.dims[0] as f64,
                self.dims[1] as f64,
                self.dims[2] as f64,
            ) * self.voxel_size
    }

    /// Voxel containing a world point, if inside the grid.
    pub fn voxel_of(&self, point: &Vector3<f64>) -> Option<[usize; 3]> {
        let g = (point - self.origin) / self.voxel_size;
        let mut out = [0usize; 3];
        for a in 0..3 {
            let f = g[a].floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    pub fn voxel_center(&self, v: [usize; 3]) -> Vector3<f64> {
        self.origin
            + Vector3::new(v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5)
                * self.voxel_size
    }

    #[inline]
    fn split(&self, v: [usize; 3]) -> (usize, usize) {
        let e = self.edge;
        let [px, py, _] = self.pages_per_axis();
        let page = v[0] / e + px * (v[1] / e + py * (v[2] / e));
        let local = v[0] % e + e * (v[1] % e + e * (v[2] % e));
        (page, local)
    }

    /// First voxel of a page.
    pub fn page_origin_voxel(&self, page: usize) -> [usize; 3] {
        let [px, py, _] = self.pages_per_axis();
        [
            (page % px) * self.edge,
            ((page / px) % py) * self.edge,
            (page / (px * py)) * self.edge,
        ]
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Makes `page` resident (creating or reloading it) and returns its values.
    fn page_mut(&mut self, page: usize) -> Result<&mut Vec<f32>, VolumeError> {
        let now = self.tick();
        let len = self.edge.pow(3);
        let resident = self.pages.get(&page).map(SubVolume::is_resident);
        if resident.is_none() {
            self.pages.insert(
                page,
                SubVolume {
                    values: Some(vec![0.0; len]),
                    last_access: now,
                },
            );
        } else if resident == Some(false) {
            let bytes = self.store.read(page)?;
            if bytes.len() != len * 4 {
                return Err(VolumeError::BackingStoreFailure(format!(
                    "page {page} has {} bytes, expected {}",
                    bytes.len(),
                    len * 4
                )));
            }
            let values = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            self.pages.get_mut(&page).unwrap().values = Some(values);
        }
        self.pages.get_mut(&page).unwrap().last_access = now;
        if let Some(b) = self.budget {
            self.evict_except(b, Some(page))?;
        }
        Ok(self.pages.get_mut(&page).unwrap().values.as_mut().unwrap())
    }

    /// Evicts least-recently-accessed pages until at most `budget` remain
    /// resident.
    pub fn evict_pages(&mut self, budget: usize) -> Result<(), VolumeError> {
        if budget == 0 {
            return Err(VolumeError::InvalidGrid("page budget must be ≥ 1".into()));
        }
        self.evict_except(budget, None)
    }

    fn evict_except(&mut self, budget: usize, keep: Option<usize>) -> Result<(), VolumeError> {
        let resident: Vec<(u64, usize)> = self
            .pages
            .iter()
            .filter(|(_, p)| p.is_resident())
            .map(|(i, p)| (p.last_access, *i))
            .collect();
        if resident.len() <= budget {
            return Ok(());
        }
        let mut victims: Vec<(u64, usize)> =
            resident.into_iter().filter(|(_, i)| Some(*i) != keep).collect();
        victims.sort_unstable();
        let excess = self.resident_count() - budget;
        for (_, idx) in victims.into_iter().take(excess) {
            let values = self.pages.get_mut(&idx).unwrap().values.take().unwrap();
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            if let Err(e) = self.store.write(idx, &bytes) {
                self.pages.get_mut(&idx).unwrap().values = Some(values);
                return Err(e);
            }
        }
        Ok(())
    }

    /// Log-odds of one voxel; untouched voxels read 0.
    pub fn log_odds(&mut self, v: [usize; 3]) -> Result<f32, VolumeError> {
        let (page, local) = self.split(v);
        if !self.pages.contains_key(&page) {
            return Ok(0.0);
        }
        Ok(self.page_mut(page)?[local])
    }

    pub fn set_log_odds(&mut self, v: [usize; 3], value: f32) -> Result<(), VolumeError> {
        let (page, local) = self.split(v);
        self.page_mut(page)?[local] = value;
        Ok(())
    }

    /// Occupancy probability at a world point; 0.5 for unknown or outside.
    pub fn occupancy_probability(&mut self, point: &Vector3<f64>) -> Result<f64, VolumeError> {
        match self.voxel_of(point) {
            None => Ok(0.5),
            Some(v) => Ok(log_odds_to_probability(self.log_odds(v)?)),
        }
    }

    /// Sets every voxel from a function of its center, page by page.
    pub fn fill_log_odds<F>(&mut self, f: F) -> Result<(), VolumeError>
    where
        F: Fn(&Vector3<f64>) -> f32 + Sync,
    {
        let [px, py, pz] = self.pages_per_axis();
        let e = self.edge;
        for page in 0..px * py * pz {
            let base = self.page_origin_voxel(page);
            let origin = self.origin;
            let vs = self.voxel_size;
            let values: Vec<f32> = (0..e * e * e)
                .into_par_iter()
                .map(|local| {
                    let v = [
                        base[0] + local % e,
                        base[1] + (local / e) % e,
                        base[2] + local / (e * e),
                    ];
                    let c = origin
                        + Vector3::new(v[0] as f64 + 0.5, v[1] as f64 + 0.5, v[2] as f64 + 0.5)
                            * vs;
                    f(&c)
                })
                .collect();
            *self.page_mut(page)? = values;
        }
        Ok(())
    }

    /// Reads a box of voxels `[start, start + extent)`; voxels outside the
    /// grid or in untouched pages read 0. Layout is x-fastest.
    pub fn read_block(
        &mut self,
        start: [usize; 3],
        extent: [usize; 3],
    ) -> Result<Vec<f32>, VolumeError> {
        let mut out = vec![0.0f32; extent[0] * extent[1] * extent[2]];
        let e = self.edge;
        // Visit the pages overlapping the box one at a time.
        let end = [
            (start[0] + extent[0]).min(self.dims[0]),
            (start[1] + extent[1]).min(self.dims[1]),
            (start[2] + extent[2]).min(self.dims[2]),
        ];
        if (0..3).any(|a| start[a] >= end[a]) {
            return Ok(out);
        }
        for pzv in (start[2] / e)..=((end[2] - 1) / e) {
            for pyv in (start[1] / e)..=((end[1] - 1) / e) {
                for pxv in (start[0] / e)..=((end[0] - 1) / e) {
                    let (page, _) = self.split([pxv * e, pyv * e, pzv * e]);
                    if !self.pages.contains_key(&page) {
                        continue;
                    }
                    let lo = [
                        start[0].max(pxv * e),
                        start[1].max(pyv * e),
                        start[2].max(pzv * e),
                    ];
                    let hi = [
                        end[0].min((pxv + 1) * e),
                        end[1].min((pyv + 1) * e),
                        end[2].min((pzv + 1) * e),
                    ];
                    let values = self.page_mut(page)?;
                    for z in lo[2]..hi[2] {
                        for y in lo[1]..hi[1] {
                            for x in lo[0]..hi[0] {
                                let local = x % e + e * (y % e + e * (z % e));
                                let o = (x - start[0])
                                    + extent[0] * ((y - start[1]) + extent[1] * (z - start[2]));
                                out[o] = values[local];
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Serialized contents: every page in index order as `(index, LE f32s)`.
    /// Equal for any paging history that saw the same updates.
    pub fn content_bytes(&mut self) -> Result<Vec<u8>, VolumeError> {
        let mut out = Vec::new();
        for idx in self.page_indices() {
            out.extend_from_slice(&(idx as u64).to_le_bytes());
            let values = self.page_mut(idx)?;
            for v in values.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Fuses one depth image. Each voxel is updated at most once per frame:
    /// voxels containing a measured surface point receive `l_occ`, voxels
    /// pierced by a camera-to-surface segment (and not occupied in this
    /// frame) receive `l_free`.
    pub fn integrate_depth(
        &mut self,
        depth: &DepthImage,
        pose: &Pose6D,
        k: &Intrinsics,
        params: &IntegrationParams,
    ) -> Result<IntegrationStats, VolumeError> {
        params.validate()?;
        if depth.width == 0 || depth.height == 0 || depth.data.is_empty() {
            return Err(VolumeError::EmptyDepthImage);
        }
        if depth.width != k.width as usize || depth.height != k.height as usize {
            return Err(VolumeError::DimensionMismatch {
                got: (depth.width, depth.height),
                expected: (k.width as usize, k.height as usize),
            });
        }
        let center = pose.camera_center();
        let start = (center - self.origin) / self.voxel_size;
        let stride = params.pixel_stride;
        let rows: Vec<usize> = (0..depth.height).step_by(stride).collect();
        let e = self.edge;
        let dims = self.dims;
        let page_len = e * e * e;
        let pages_xy = self.pages_per_axis();

        // Dense mark pages per rayon fold, merged with max (occupied wins).
        let n_pages = pages_xy.iter().product();
        let merge = |mut a: (Vec<Option<Vec<u8>>>, usize), b: (Vec<Option<Vec<u8>>>, usize)| {
            for (dst, src) in a.0.iter_mut().zip(b.0) {
                match (dst.as_mut(), src) {
                    (_, None) => {}
                    (None, Some(s)) => *dst = Some(s),
                    (Some(d), Some(s)) => d.iter_mut().zip(s).for_each(|(x, y)| *x = (*x).max(y)),
                }
            }
            (a.0, a.1 + b.1)
        };
        let (marks, rays) = rows
            .par_chunks(8)
            .fold(
                || (vec![None; n_pages], 0usize),
                |(mut marks, mut rays): (Vec<Option<Vec<u8>>>, usize), chunk| {
                    let mut mark = |v: [usize; 3], m: u8| {
                        let page = v[0] / e + pages_xy[0] * (v[1] / e + pages_xy[1] * (v[2] / e));
                        let local = v[0] % e + e * (v[1] % e + e * (v[2] % e));
                        let block = marks[page].get_or_insert_with(|| vec![0u8; page_len]);
                        if block[local] < m {
                            block[local] = m;
                        }
                    };
                    for &y in chunk {
                        for x in (0..depth.width).step_by(stride) {
                            let d = depth.get(x, y);
                            if !(d > 0.0) || d > params.max_range {
                                continue;
                            }
                            rays += 1;
                            let pc = k.unproject(&Vector2::new(x as f64, y as f64)) * d;
                            let pw = pose.inverse_transform(&pc);
                            let end = (pw - self.origin) / self.voxel_size;
                            traverse_segment(&start, &end, dims, |v, is_end| {
                                mark(v, if is_end { MARK_OCC } else { MARK_FREE })
                            });
                        }
                    }
                    (marks, rays)
                },
            )
            .reduce(|| (vec![None; n_pages], 0), merge);

        let mut stats = IntegrationStats {
            rays,
            ..Default::default()
        };
        let merged = marks.into_iter().enumerate().filter_map(|(i, m)| m.map(|m| (i, m)));
        for (page, block) in merged {
            let values = self.page_mut(page)?;
            for (v, m) in values.iter_mut().zip(block) {
                match m {
                    MARK_OCC => {
                        *v = (*v + params.l_occ).clamp(params.l_min, params.l_max);
                        stats.occupied_updates += 1;
                    }
                    MARK_FREE => {
                        *v = (*v + params.l_free).clamp(params.l_min, params.l_max);
                        stats.free_updates += 1;
                    }
                    _ => {}
                }
            }
        }
        Ok(stats)
    }

    /// Writes the manifest and every page into `dir` (`grid.txt`, `pages/`).
    pub fn save(&mut self, dir: &Path) -> Result<(), VolumeError> {
        let mut store = DirectoryStore::new(dir.join("pages"))?;
        let mut listed = Vec::new();
        for idx in self.page_indices() {
            let values = self.page_mut(idx)?;
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            store.write(idx, &bytes)?;
            listed.push(idx.to_string());
        }
        let manifest = format!(
            "origin={},{},{}\nvoxel_size={}\ndims={},{},{}\nsub_volume_edge={}\npages={}\n",
            self.origin.x,
            self.origin.y,
            self.origin.z,
            self.voxel_size,
            self.dims[0],
            self.dims[1],
            self.dims[2],
            self.edge,
            listed.join(",")
        );
        io::write_text(&dir.join("grid.txt"), &manifest)?;
        Ok(())
    }

    /// Opens a saved grid with every page evicted; pages load on access.
    pub fn open(dir: &Path) -> Result<Self, VolumeError> {
        let path = dir.join("grid.txt");
        let text = io::read_text(&path)?;
        let kv = io::parse_key_values(&path, &text)?;
        let triple = |key: &str| -> Result<Vec<String>, VolumeError> {
            let v: String = io::kv_get(&path, &kv, key)?;
            Ok(v.split(',').map(|s| s.trim().to_string()).collect())
        };
        let bad = |m: &str| VolumeError::from(FormatError::parse(&path, 0, m.to_string()));
        let o: Vec<f64> = triple("origin")?
            .iter()
            .map(|s| s.parse().map_err(|_| bad("origin")))
            .collect::<Result<_, _>>()?;
        let d: Vec<usize> = triple("dims")?
            .iter()
            .map(|s| s.parse().map_err(|_| bad("dims")))
            .collect::<Result<_, _>>()?;
        if o.len() != 3 || d.len() != 3 {
            return Err(bad("origin and dims need three components"));
        }
        let mut grid = VoxelGrid::new(
            Vector3::new(o[0], o[1], o[2]),
            io::kv_get(&path, &kv, "voxel_size")?,
            [d[0], d[1], d[2]],
            io::kv_get(&path, &kv, "sub_volume_edge")?,
        )?
        .with_store(Box::new(DirectoryStore::new(dir.join("pages"))?));
        let pages: String = io::kv_get(&path, &kv, "pages").unwrap_or_default();
        for p in pages.split(',').filter(|s| !s.is_empty()) {
            let idx: usize = p.parse().map_err(|_| bad("pages"))?;
            grid.pages.insert(
                idx,
                SubVolume {
                    values: None,
                    last_access: 0,
                },
            );
        }
        Ok(grid)
    }
}

/// Visits every voxel pierced by the segment `start → end` (grid units),
/// clipped to `[0, dims)`. The callback's flag is true for the voxel
/// containing `end`, which terminates the walk.
pub fn traverse_segment<F>(start: &Vector3<f64>, end: &Vector3<f64>, dims: [usize; 3], mut visit: F)
where
    F: FnMut([usize; 3], bool),
{
    let dir = end - start;
    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for a in 0..3 {
        let hi = dims[a] as f64;
        if dir[a] == 0.0 {
            if !(start[a] >= 0.0 && start[a] < hi) {
                return;
            }
        } else {
            let ta = (0.0 - start[a]) / dir[a];
            let tb = (hi - start[a]) / dir[a];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 > t1 {
        return;
    }
    let end_voxel = [end.x.floor(), end.y.floor(), end.z.floor()];
    let entry = start + dir * t0;
    let mut v = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for a in 0..3 {
        v[a] = (entry[a].floor() as i64).clamp(0, dims[a] as i64 - 1);
        if dir[a] > 0.0 {
            step[a] = 1;
            t_max[a] = ((v[a] + 1) as f64 - start[a]) / dir[a];
            t_delta[a] = 1.0 / dir[a];
        } else if dir[a] < 0.0 {
            step[a] = -1;
            t_max[a] = (v[a] as f64 - start[a]) / dir[a];
            t_delta[a] = -1.0 / dir[a];
        }
    }
    let max_steps = dims[0] + dims[1] + dims[2] + 3;
    for _ in 0..max_steps {
        let is_end = (0..3).all(|a| v[a] as f64 == end_voxel[a]);
        visit([v[0] as usize, v[1] as usize, v[2] as usize], is_end);
        if is_end {
            return;
        }
        let a = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
            0
        } else if t_max[1] <= t_max[2] {
            1
        } else {
            2
        };
        if t_max[a] > t1 {
            return;
        }
        v[a] += step[a];
        if v[a] < 0 || v[a] >= dims[a] as i64 {
            return;
        }
        t_max[a] += t_delta[a];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_pixel_setup(depth_m: f64) -> (VoxelGrid, DepthImage, Intrinsics) {
        let grid = VoxelGrid::new(Vector3::new(-0.5, -0.5, -0.5), 0.1, [16, 16, 32], 16).unwrap();
        let k = Intrinsics::new(100.0, 100.0, 0.0, 0.0, 1, 1).unwrap();
        let mut d = DepthImage::new(1, 1);
        d.set(0, 0, depth_m);
        (grid, d, k)
    }

    #[test]
    fn single_ray_marks_free_then_occupied() {
        let (mut grid, d, k) = single_pixel_setup(1.0);
        let p = IntegrationParams::default();
        let stats = grid.integrate_depth(&d, &Pose6D::identity(), &k, &p).unwrap();
        assert_eq!(stats.rays, 1);
        assert_eq!(stats.occupied_updates, 1);
        let surf = grid.voxel_of(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(grid.log_odds(surf).unwrap(), 0.85);
        let cam = grid.voxel_of(&Vector3::zeros()).unwrap();
        for z in cam[2]..surf[2] {
            assert_eq!(grid.log_odds([surf[0], surf[1], z]).unwrap(), -0.40);
        }
        assert_eq!(stats.free_updates, surf[2] - cam[2]);
        assert_eq!(grid.log_odds([surf[0], surf[1], cam[2] - 1]).unwrap(), 0.0);
        assert_eq!(grid.log_odds([surf[0], surf[1], surf[2] + 1]).unwrap(), 0.0);
        assert_eq!(grid.log_odds([0, 0, 0]).unwrap(), 0.0);
        grid.integrate_depth(&d, &Pose6D::identity(), &k, &p).unwrap();
        assert_eq!(grid.log_odds(surf).unwrap(), 2.0 * 0.85);
    }

    #[test]
    fn clamping_and_probability_queries() {
        let (mut grid, d, k) = single_pixel_setup(1.0);
        let p = IntegrationParams::default();
        for _ in 0..10 {
            grid.integrate_depth(&d, &Pose6D::identity(), &k, &p).unwrap();
        }
        let pr = grid.occupancy_probability(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert!((pr - 1.0 / (1.0 + (-3.5f64).exp())).abs() < 1e-12);
        assert!((pr - 0.970_687_769_248_643_6).abs() < 1e-12);
        let free = grid.occupancy_probability(&Vector3::new(0.0, 0.0, 0.5)).unwrap();
        assert!((free - 1.0 / (1.0 + 3.5f64.exp())).abs() < 1e-12);
        assert_eq!(grid.occupancy_probability(&Vector3::new(0.3, 0.3, 1.0)).unwrap(), 0.5);
        assert_eq!(grid.occupancy_probability(&Vector3::new(9.0, 0.0, 0.0)).unwrap(), 0.5);
    }

    #[test]
    fn invalid_inputs() {
        let (mut grid, _, k) = single_pixel_setup(1.0);
        let p = IntegrationParams::default();
        let empty = DepthImage::new(0, 0);
        assert!(matches!(
            grid.integrate_depth(&empty, &Pose6D::identity(), &k, &p),
            Err(VolumeError::EmptyDepthImage)
        ));
        let wrong = DepthImage::new(2, 1);
        assert!(matches!(
            grid.integrate_depth(&wrong, &Pose6D::identity(), &k, &p),
            Err(VolumeError::DimensionMismatch { .. })
        ));
        assert!(VoxelGrid::new(Vector3::zeros(), 0.1, [10, 16, 16], 16).is_err());
        assert!(VoxelGrid::new(Vector3::zeros(), 0.0, [16, 16, 16], 16).is_err());
    }

    #[test]
    fn pose_outside_grid_is_clipped() {
        let (mut grid, d, k) = single_pixel_setup(3.0);
        let pose = Pose6D::from_axis_angle(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.5));
        // Camera at z = -1.5, outside the grid; surface at z = 1.5.
        let stats = grid.integrate_depth(&d, &pose, &k, &IntegrationParams::default()).unwrap();
        assert_eq!(stats.occupied_updates, 1);
        assert_eq!(stats.free_updates, 20);
    }

    #[test]
    fn budget_one_keeps_one_resident() {
        let mut grid = VoxelGrid::new(Vector3::zeros(), 1.0, [8, 8, 8], 4).unwrap();
        grid.set_page_budget(Some(1)).unwrap();
        for v in [[0, 0, 0], [5, 0, 0], [0, 5, 5]] {
            grid.set_log_odds(v, 1.0).unwrap();
            assert_eq!(grid.resident_count(), 1);
        }
        assert_eq!(grid.page_count(), 3);
        for v in [[0, 0, 0], [5, 0, 0], [0, 5, 5]] {
            assert_eq!(grid.log_odds(v).unwrap(), 1.0);
            assert_eq!(grid.resident_count(), 1);
        }
    }

    #[test]
    fn eviction_budget_equal_to_pages_is_noop() {
        let mut grid = VoxelGrid::new(Vector3::zeros(), 1.0, [8, 8, 8], 4).unwrap();
        grid.set_log_odds([0, 0, 0], 1.0).unwrap();
        grid.set_log_odds([7, 7, 7], 2.0).unwrap();
        grid.evict_pages(grid.page_count()).unwrap();
        assert_eq!(grid.resident_count(), 2);
    }

    struct FailingStore;
    impl PageStore for FailingStore {
        fn write(&mut self, _: usize, _: &[u8]) -> Result<(), VolumeError> {
            Err(VolumeError::BackingStoreFailure("disk full".into()))
        }
        fn read(&self, _: usize) -> Result<Vec<u8>, VolumeError> {
            Err(VolumeError::BackingStoreFailure("unreadable".into()))
        }
    }

    #[test]
    fn store_failure_surfaces_and_keeps_data() {
        let mut grid = VoxelGrid::new(Vector3::zeros(), 1.0, [8, 8, 8], 4)
            .unwrap()
            .with_store(Box::new(FailingStore));
        grid.set_log_odds([0, 0, 0], 1.0).unwrap();
        grid.set_log_odds([7, 7, 7], 2.0).unwrap();
        assert!(matches!(grid.evict_pages(1), Err(VolumeError::BackingStoreFailure(_))));
        assert_eq!(grid.log_odds([0, 0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn save_and_open_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut grid = VoxelGrid::new(Vector3::new(0.5, -1.0, 0.0), 0.25, [8, 8, 8], 4).unwrap();
        grid.set_log_odds([1, 2, 3], 1.5).unwrap();
        grid.set_log_odds([7, 0, 6], -0.4).unwrap();
        grid.save(dir.path()).unwrap();
        let mut back = VoxelGrid::open(dir.path()).unwrap();
        assert_eq!(back.resident_count(), 0);
        assert_eq!(back.content_bytes().unwrap(), grid.content_bytes().unwrap());
        assert_eq!(back.voxel_size(), 0.25);
    }

    #[test]
    fn traversal_visits_face_connected_chain() {
        let mut seen = Vec::new();
        traverse_segment(
            &Vector3::new(0.5, 0.5, 0.5),
            &Vector3::new(3.7, 2.2, 0.9),
            [8, 8, 8],
            |v, end| seen.push((v, end)),
        );
        assert_eq!(seen.first().unwrap().0, [0, 0, 0]);
        assert_eq!(*seen.last().unwrap(), ([3, 2, 0], true));
        for w in seen.windows(2) {
            let d: usize = (0..3).map(|a| w[0].0[a].abs_diff(w[1].0[a])).sum();
            assert_eq!(d, 1);
        }
    }
}
