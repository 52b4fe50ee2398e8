//! Per-object and scene-level volumetric models: truncated signed distance
//! fusion, ray casting with gray/depth/normal output, Phong shading and
//! triangle-mesh extraction.

mod mc_tables;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::{ColorImage, DepthImage, GrayImage, Grid, Mask};
use mc_tables::{CORNER_OFFSETS, EDGE_CORNERS, TRI_TABLE};
use nalgebra::Vector3;
use rayon::prelude::*;
use std::io::{BufRead, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReconError {
    #[error("volume has no fused observations")]
    UninitializedVolume,
    #[error("volume is empty, nothing to mesh")]
    EmptyVolume,
    #[error("invalid volume parameters: {0}")]
    InvalidVolume(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad volume file: {0}")]
    BadVolumeFile(String),
}

/// An n x n x n truncated signed distance volume with per-voxel weight and
/// intensity. The local frame spans [-r, r] on each axis; `pose` maps local
/// to world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TsdfVolume {
    n: usize,
    radius: f64,
    voxel_size: f64,
    /// Truncation band in meters.
    mu: f64,
    w_max: f32,
    pub pose: Pose,
    tsdf: Vec<f32>,
    weight: Vec<f32>,
    intensity: Vec<f32>,
    fused_any: bool,
}

/// Default truncation, in voxels.
pub const DEFAULT_MU_VOXELS: f64 = 4.0;
pub const DEFAULT_W_MAX: f32 = 64.0;

impl TsdfVolume {
    pub fn new(n: usize, radius: f64, pose: Pose) -> Result<Self, ReconError> {
        if n < 2 {
            return Err(ReconError::InvalidVolume(format!("n={n} too small")));
        }
        if !(radius > 0.0) {
            return Err(ReconError::InvalidVolume(format!("radius={radius}")));
        }
        let voxel_size = 2.0 * radius / n as f64;
        Ok(Self {
            n,
            radius,
            voxel_size,
            mu: DEFAULT_MU_VOXELS * voxel_size,
            w_max: DEFAULT_W_MAX,
            pose,
            tsdf: vec![1.0; n * n * n],
            weight: vec![0.0; n * n * n],
            intensity: vec![0.0; n * n * n],
            fused_any: false,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.mu
    }

    pub fn has_data(&self) -> bool {
        self.fused_any
    }

    #[inline]
    fn idx(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.n + y) * self.n + x
    }

    /// Center of voxel (x, y, z) in the local frame.
    #[inline]
    fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        Vector3::new(
            -self.radius + (x as f64 + 0.5) * self.voxel_size,
            -self.radius + (y as f64 + 0.5) * self.voxel_size,
            -self.radius + (z as f64 + 0.5) * self.voxel_size,
        )
    }

    pub fn voxel(&self, x: usize, y: usize, z: usize) -> (f32, f32, f32) {
        let i = self.idx(x, y, z);
        (self.tsdf[i], self.weight[i], self.intensity[i])
    }

    /// Fuse one depth + gray observation taken from camera pose `t_wl`
    /// (camera-to-world). Only pixels inside `mask` (when given) contribute.
    /// Pixels observed at grazing incidence are skipped: their projective
    /// distance is heavily biased and would bulge the reconstructed surface.
    pub fn fuse(
        &mut self,
        depth: &DepthImage,
        gray: &GrayImage,
        t_wl: &Pose,
        k: &CameraIntrinsics,
        mask: Option<&Mask>,
    ) {
        let usable = fusion_validity(depth, k, mask);
        let world_to_cam = self.pose.invert().compose(t_wl).invert();
        // world_to_cam maps volume-local points straight into the camera:
        // local -> world (volume pose), world -> camera (inverse of t_wl).
        let n = self.n;
        let mu = self.mu;
        let w_max = self.w_max;
        let radius = self.radius;
        let voxel_size = self.voxel_size;
        let any: Vec<bool> = self
            .tsdf
            .par_chunks_mut(n * n)
            .zip(self.weight.par_chunks_mut(n * n))
            .zip(self.intensity.par_chunks_mut(n * n))
            .enumerate()
            .map(|(z, ((tsdf_slab, weight_slab), int_slab))| {
                let mut any = false;
                for y in 0..n {
                    for x in 0..n {
                        let local = Vector3::new(
                            -radius + (x as f64 + 0.5) * voxel_size,
                            -radius + (y as f64 + 0.5) * voxel_size,
                            -radius + (z as f64 + 0.5) * voxel_size,
                        );
                        let cam = world_to_cam.transform(local);
                        if cam.z <= 0.0 {
                            continue;
                        }
                        let u = (k.fx * cam.x / cam.z + k.cx).round();
                        let v = (k.fy * cam.y / cam.z + k.cy).round();
                        if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
                            continue;
                        }
                        let (ui, vi) = (u as usize, v as usize);
                        if !*usable.get(ui, vi) {
                            continue;
                        }
                        let d = *depth.get(ui, vi) as f64;
                        let sdf = d - cam.z;
                        if sdf < -mu {
                            continue;
                        }
                        let val = (sdf / mu).min(1.0) as f32;
                        let i = y * n + x;
                        let w = weight_slab[i];
                        tsdf_slab[i] = (w * tsdf_slab[i] + val) / (w + 1.0);
                        int_slab[i] = (w * int_slab[i] + *gray.get(ui, vi)) / (w + 1.0);
                        weight_slab[i] = (w + 1.0).min(w_max);
                        any = true;
                    }
                }
                any
            })
            .collect();
        if any.iter().any(|&a| a) {
            self.fused_any = true;
        }
    }

    /// Trilinear TSDF sample at a local-frame point; `None` when the stencil
    /// leaves the grid or touches an unobserved voxel.
    fn sample_tsdf(&self, p: &Vector3<f64>) -> Option<f64> {
        self.sample_field(p, &self.tsdf)
    }

    fn sample_intensity(&self, p: &Vector3<f64>) -> Option<f64> {
        self.sample_field(p, &self.intensity)
    }

    fn sample_field(&self, p: &Vector3<f64>, field: &[f32]) -> Option<f64> {
        let q = (p + Vector3::repeat(self.radius)) / self.voxel_size - Vector3::repeat(0.5);
        let x0 = q.x.floor();
        let y0 = q.y.floor();
        let z0 = q.z.floor();
        if x0 < 0.0 || y0 < 0.0 || z0 < 0.0 {
            return None;
        }
        let (xi, yi, zi) = (x0 as usize, y0 as usize, z0 as usize);
        if xi + 1 >= self.n || yi + 1 >= self.n || zi + 1 >= self.n {
            return None;
        }
        let (fx, fy, fz) = (q.x - x0, q.y - y0, q.z - z0);
        let mut acc = 0.0f64;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let i = self.idx(xi + dx, yi + dy, zi + dz);
                    if self.weight[i] <= 0.0 {
                        return None;
                    }
                    let wx = if dx == 1 { fx } else { 1.0 - fx };
                    let wy = if dy == 1 { fy } else { 1.0 - fy };
                    let wz = if dz == 1 { fz } else { 1.0 - fz };
                    acc += wx * wy * wz * field[i] as f64;
                }
            }
        }
        Some(acc)
    }

    /// TSDF gradient by central differences of trilinear samples; local frame.
    fn tsdf_gradient(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let h = self.voxel_size;
        let mut g = Vector3::zeros();
        for axis in 0..3 {
            let mut dp = Vector3::zeros();
            dp[axis] = h;
            let a = self.sample_tsdf(&(p + dp))?;
            let b = self.sample_tsdf(&(p - dp))?;
            g[axis] = (a - b) / (2.0 * h);
        }
        Some(g)
    }

    /// Ray cast the zero level set from a virtual camera at `t_wc`
    /// (camera-to-world). Returns gray, depth and camera-frame normal images;
    /// pixels without a crossing are invalid (depth 0).
    pub fn raycast(&self, t_wc: &Pose, k: &CameraIntrinsics) -> Result<Raycast, ReconError> {
        if !self.fused_any {
            return Err(ReconError::UninitializedVolume);
        }
        let cam_to_local = self.pose.invert().compose(t_wc);
        let origin = cam_to_local.translation;
        let rot_to_cam = cam_to_local.rotation.transpose();

        let rows: Vec<Vec<(f32, f32, [f32; 3])>> = (0..k.height)
            .into_par_iter()
            .map(|y| {
                let mut row = Vec::with_capacity(k.width);
                for x in 0..k.width {
                    let dir_cam =
                        Vector3::new((x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0);
                    let dir = cam_to_local.rotate(dir_cam);
                    row.push(self.cast_single(&origin, &dir, &rot_to_cam));
                }
                row
            })
            .collect();

        let mut out = Raycast {
            gray: GrayImage::new(k.width, k.height),
            depth: DepthImage::new(k.width, k.height),
            normals: Grid::filled(k.width, k.height, [0.0f32; 3]),
            valid: Mask::new(k.width, k.height),
        };
        for (y, row) in rows.into_iter().enumerate() {
            for (x, (g, d, nrm)) in row.into_iter().enumerate() {
                if d > 0.0 {
                    out.gray.set(x, y, g);
                    out.depth.set(x, y, d);
                    out.normals.set(x, y, nrm);
                    out.valid.set(x, y, true);
                }
            }
        }
        Ok(out)
    }

    /// March one ray (local frame, `t` is camera z-depth because `dir` has
    /// unit camera-frame z). Returns (gray, depth, normal) or depth 0.
    fn cast_single(
        &self,
        origin: &Vector3<f64>,
        dir: &Vector3<f64>,
        rot_to_cam: &nalgebra::Matrix3<f64>,
    ) -> (f32, f32, [f32; 3]) {
        const MISS: (f32, f32, [f32; 3]) = (0.0, 0.0, [0.0; 3]);
        // Entry/exit of the local AABB.
        let mut t0 = 1e-6f64;
        let mut t1 = f64::INFINITY;
        for axis in 0..3 {
            let inv = 1.0 / dir[axis];
            if !inv.is_finite() {
                if origin[axis].abs() >= self.radius {
                    return MISS;
                }
                continue;
            }
            let mut a = (-self.radius - origin[axis]) * inv;
            let mut b = (self.radius - origin[axis]) * inv;
            if a > b {
                std::mem::swap(&mut a, &mut b);
            }
            t0 = t0.max(a);
            t1 = t1.min(b);
        }
        if t0 >= t1 {
            return MISS;
        }
        let step = 0.5 * self.voxel_size / dir.norm();
        let mut prev: Option<(f64, f64)> = None;
        let mut t = t0;
        while t <= t1 {
            let p = origin + dir * t;
            match self.sample_tsdf(&p) {
                Some(f) => {
                    if let Some((tp, fp)) = prev {
                        if fp > 0.0 && f <= 0.0 {
                            let tc = tp + (t - tp) * fp / (fp - f);
                            let pc = origin + dir * tc;
                            let gray = self.sample_intensity(&pc).unwrap_or(0.0);
                            let normal_local = self
                                .tsdf_gradient(&pc)
                                .filter(|g| g.norm() > 1e-12)
                                .map(|g| g.normalize())
                                .unwrap_or_else(|| -dir.normalize());
                            let mut n_cam = rot_to_cam * normal_local;
                            if n_cam.z > 0.0 {
                                n_cam = -n_cam;
                            }
                            return (
                                gray as f32,
                                tc as f32,
                                [n_cam.x as f32, n_cam.y as f32, n_cam.z as f32],
                            );
                        }
                    }
                    prev = Some((t, f));
                }
                None => prev = None,
            }
            t += step;
        }
        MISS
    }

    /// Marching cubes over observed cells; mesh vertices in world frame.
    pub fn extract_mesh(&self) -> Result<TriangleMesh, ReconError> {
        if !self.fused_any {
            return Err(ReconError::EmptyVolume);
        }
        let mut mesh = TriangleMesh::default();
        let mut edge_cache: std::collections::HashMap<(usize, usize, usize, u8), u32> =
            std::collections::HashMap::new();
        for z in 0..self.n - 1 {
            for y in 0..self.n - 1 {
                for x in 0..self.n - 1 {
                    self.polygonize_cell(x, y, z, &mut mesh, &mut edge_cache);
                }
            }
        }
        if mesh.triangles.is_empty() {
            return Err(ReconError::EmptyVolume);
        }
        Ok(mesh)
    }

    fn polygonize_cell(
        &self,
        x: usize,
        y: usize,
        z: usize,
        mesh: &mut TriangleMesh,
        edge_cache: &mut std::collections::HashMap<(usize, usize, usize, u8), u32>,
    ) {
        let mut values = [0.0f32; 8];
        for (c, &(dx, dy, dz)) in CORNER_OFFSETS.iter().enumerate() {
            let i = self.idx(x + dx, y + dy, z + dz);
            if self.weight[i] <= 0.0 {
                return;
            }
            values[c] = self.tsdf[i];
        }
        let mut case = 0usize;
        for (c, &v) in values.iter().enumerate() {
            if v < 0.0 {
                case |= 1 << c;
            }
        }
        if case == 0 || case == 255 {
            return;
        }
        let tri = &TRI_TABLE[case];
        let mut e = 0;
        while tri[e] >= 0 {
            let mut ids = [0u32; 3];
            for (slot, &edge) in tri[e..e + 3].iter().enumerate() {
                let edge = edge as usize;
                let (ca, cb) = EDGE_CORNERS[edge];
                let (oa, ob) = (CORNER_OFFSETS[ca], CORNER_OFFSETS[cb]);
                let ga = (x + oa.0, y + oa.1, z + oa.2);
                let gb = (x + ob.0, y + ob.1, z + ob.2);
                // Canonical key: lexicographically smaller endpoint + axis.
                let (lo, _hi, axis) = if ga <= gb {
                    (ga, gb, differing_axis(oa, ob))
                } else {
                    (gb, ga, differing_axis(oa, ob))
                };
                let key = (lo.0, lo.1, lo.2, axis);
                let id = if let Some(&id) = edge_cache.get(&key) {
                    id
                } else {
                    let (fa, fb) = (values[ca] as f64, values[cb] as f64);
                    let t = if (fa - fb).abs() < 1e-12 {
                        0.5
                    } else {
                        (fa / (fa - fb)).clamp(0.0, 1.0)
                    };
                    let pa = self.voxel_center(ga.0, ga.1, ga.2);
                    let pb = self.voxel_center(gb.0, gb.1, gb.2);
                    let local = pa + (pb - pa) * t;
                    let world = self.pose.transform(local);
                    let normal = self
                        .tsdf_gradient(&local)
                        .filter(|g| g.norm() > 1e-12)
                        .map(|g| self.pose.rotate(g.normalize()))
                        .unwrap_or_else(Vector3::zeros);
                    let gray = self.sample_intensity(&local).unwrap_or(0.0) as f32;
                    let id = mesh.vertices.len() as u32;
                    mesh.vertices.push([world.x, world.y, world.z]);
                    mesh.normals.push([normal.x, normal.y, normal.z]);
                    mesh.gray.push(gray);
                    edge_cache.insert(key, id);
                    id
                };
                ids[slot] = id;
            }
            if ids[0] != ids[1] && ids[1] != ids[2] && ids[0] != ids[2] {
                mesh.triangles.push(ids);
            }
            e += 3;
        }
    }

    // -- binary dump: 8-byte magic, u32 n, f32 r, 12 x f32 pose (row-major
    // rotation then translation), f32 mu, f32 w_max, then per voxel
    // (tsdf, weight, intensity) as little-endian f32, x fastest.

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReconError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(VOLUME_MAGIC)?;
        f.write_all(&(self.n as u32).to_le_bytes())?;
        f.write_all(&(self.radius as f32).to_le_bytes())?;
        for v in self.pose.to_row_major() {
            f.write_all(&(v as f32).to_le_bytes())?;
        }
        f.write_all(&(self.mu as f32).to_le_bytes())?;
        f.write_all(&self.w_max.to_le_bytes())?;
        for i in 0..self.tsdf.len() {
            f.write_all(&self.tsdf[i].to_le_bytes())?;
            f.write_all(&self.weight[i].to_le_bytes())?;
            f.write_all(&self.intensity[i].to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReconError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != VOLUME_MAGIC {
            return Err(ReconError::BadVolumeFile("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        let mut read_f32 = |f: &mut dyn BufRead| -> Result<f32, ReconError> {
            f.read_exact(&mut b4)?;
            Ok(f32::from_le_bytes(b4))
        };
        let mut nb = [0u8; 4];
        f.read_exact(&mut nb)?;
        let n = u32::from_le_bytes(nb) as usize;
        let radius = read_f32(&mut f)? as f64;
        let mut pose_vals = [0f64; 12];
        for v in pose_vals.iter_mut() {
            *v = read_f32(&mut f)? as f64;
        }
        let mu = read_f32(&mut f)? as f64;
        let w_max = read_f32(&mut f)?;
        let mut vol = TsdfVolume::new(n, radius, Pose::from_row_major(&pose_vals))?;
        vol.mu = mu;
        vol.w_max = w_max;
        let mut buf = vec![0u8; n * n * n * 12];
        f.read_exact(&mut buf)?;
        for i in 0..n * n * n {
            vol.tsdf[i] = f32::from_le_bytes(buf[i * 12..i * 12 + 4].try_into().unwrap());
            vol.weight[i] = f32::from_le_bytes(buf[i * 12 + 4..i * 12 + 8].try_into().unwrap());
            vol.intensity[i] =
                f32::from_le_bytes(buf[i * 12 + 8..i * 12 + 12].try_into().unwrap());
        }
        vol.fused_any = vol.weight.iter().any(|&w| w > 0.0);
        Ok(vol)
    }

    /// Bit-stable dump of the voxel arrays (tsdf, then weight, then
    /// intensity) for determinism checks and registry serialization.
    pub fn raw_bits(&self) -> impl Iterator<Item = u32> + '_ {
        self.tsdf
            .iter()
            .chain(self.weight.iter())
            .chain(self.intensity.iter())
            .map(|f| f.to_bits())
    }

    /// A volume with new placement/size whose contents are resampled from
    /// this one (weight-weighted trilinear), used to grow object volumes
    /// when tracked geometry outgrows the initial guess.
    pub fn resampled(&self, n: usize, radius: f64, pose: Pose) -> Result<Self, ReconError> {
        let mut out = TsdfVolume::new(n, radius, pose)?;
        out.mu = DEFAULT_MU_VOXELS * out.voxel_size;
        let to_old_local = self.pose.invert().compose(&out.pose);
        let mut any = false;
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let p_new = out.voxel_center(x, y, z);
                    let p_old = to_old_local.transform(p_new);
                    if let Some((t, w, i)) = self.sample_weighted(&p_old) {
                        if w > 0.0 {
                            let idx = out.idx(x, y, z);
                            out.tsdf[idx] = t as f32;
                            out.weight[idx] = w as f32;
                            out.intensity[idx] = i as f32;
                            any = true;
                        }
                    }
                }
            }
        }
        out.fused_any = any;
        Ok(out)
    }

    /// Weight-weighted trilinear sample of (tsdf, weight, intensity); unlike
    /// [`Self::sample_tsdf`] it tolerates unobserved corners.
    fn sample_weighted(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let q = (p + Vector3::repeat(self.radius)) / self.voxel_size - Vector3::repeat(0.5);
        let x0 = q.x.floor();
        let y0 = q.y.floor();
        let z0 = q.z.floor();
        if x0 < 0.0 || y0 < 0.0 || z0 < 0.0 {
            return None;
        }
        let (xi, yi, zi) = (x0 as usize, y0 as usize, z0 as usize);
        if xi + 1 >= self.n || yi + 1 >= self.n || zi + 1 >= self.n {
            return None;
        }
        let (fx, fy, fz) = (q.x - x0, q.y - y0, q.z - z0);
        let mut wsum = 0.0f64;
        let mut t_acc = 0.0f64;
        let mut i_acc = 0.0f64;
        let mut w_acc = 0.0f64;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = self.idx(xi + dx, yi + dy, zi + dz);
                    let wx = if dx == 1 { fx } else { 1.0 - fx };
                    let wy = if dy == 1 { fy } else { 1.0 - fy };
                    let wz = if dz == 1 { fz } else { 1.0 - fz };
                    let corner = wx * wy * wz;
                    w_acc += corner * self.weight[idx] as f64;
                    if self.weight[idx] > 0.0 {
                        wsum += corner;
                        t_acc += corner * self.tsdf[idx] as f64;
                        i_acc += corner * self.intensity[idx] as f64;
                    }
                }
            }
        }
        if wsum <= 1e-9 {
            return None;
        }
        Some((t_acc / wsum, w_acc, i_acc / wsum))
    }

    /// Restore voxel arrays from a [`Self::raw_bits`] dump.
    pub fn set_raw_bits(&mut self, bits: &[u32]) {
        let n3 = self.n * self.n * self.n;
        assert_eq!(bits.len(), 3 * n3);
        for i in 0..n3 {
            self.tsdf[i] = f32::from_bits(bits[i]);
            self.weight[i] = f32::from_bits(bits[n3 + i]);
            self.intensity[i] = f32::from_bits(bits[2 * n3 + i]);
        }
        self.fused_any = self.weight.iter().any(|&w| w > 0.0);
    }
}

const VOLUME_MAGIC: &[u8; 8] = b"ODTSDF01";

/// Minimum |cos| between the viewing ray and the surface normal for a depth
/// pixel to be fused.
const MIN_FUSE_INCIDENCE: f64 = 0.25;

/// Per-pixel fusion validity: valid depth, inside the optional mask, and not
/// seen at grazing incidence (normals from image-space central differences).
fn fusion_validity(depth: &DepthImage, k: &CameraIntrinsics, mask: Option<&Mask>) -> Mask {
    let (w, h) = (depth.width, depth.height);
    let point = |x: usize, y: usize| -> Option<Vector3<f64>> {
        let d = *depth.get(x, y) as f64;
        (d > 0.0).then(|| {
            Vector3::new(
                (x as f64 - k.cx) * d / k.fx,
                (y as f64 - k.cy) * d / k.fy,
                d,
            )
        })
    };
    let mut ok = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                if !*m.get(x, y) {
                    continue;
                }
            }
            let Some(p) = point(x, y) else { continue };
            let dx = match (
                (x + 1 < w).then(|| point(x + 1, y)).flatten(),
                (x > 0).then(|| point(x - 1, y)).flatten(),
            ) {
                (Some(a), Some(b)) => a - b,
                (Some(a), None) => (a - p) * 2.0,
                (None, Some(b)) => (p - b) * 2.0,
                (None, None) => continue,
            };
            let dy = match (
                (y + 1 < h).then(|| point(x, y + 1)).flatten(),
                (y > 0).then(|| point(x, y - 1)).flatten(),
            ) {
                (Some(a), Some(b)) => a - b,
                (Some(a), None) => (a - p) * 2.0,
                (None, Some(b)) => (p - b) * 2.0,
                (None, None) => continue,
            };
            let normal = dx.cross(&dy);
            let nn = normal.norm();
            if nn < 1e-12 {
                continue;
            }
            let cos = (normal / nn).dot(&p.normalize()).abs();
            if cos >= MIN_FUSE_INCIDENCE {
                ok.set(x, y, true);
            }
        }
    }
    ok
}

fn differing_axis(a: (usize, usize, usize), b: (usize, usize, usize)) -> u8 {
    if a.0 != b.0 {
        0
    } else if a.1 != b.1 {
        1
    } else {
        2
    }
}

/// Output of [`TsdfVolume::raycast`].
#[derive(Debug, Clone)]
pub struct Raycast {
    pub gray: GrayImage,
    pub depth: DepthImage,
    /// Camera-frame unit normals where valid.
    pub normals: Grid<[f32; 3]>,
    pub valid: Mask,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub normals: Vec<[f64; 3]>,
    pub gray: Vec<f32>,
    pub triangles: Vec<[u32; 3]>,
}

impl TriangleMesh {
    /// V - E + F with edges counted once per undirected pair.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    pub fn save_ply(&self, path: impl AsRef<Path>) -> Result<(), ReconError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "ply")?;
        writeln!(f, "format ascii 1.0")?;
        writeln!(f, "element vertex {}", self.vertices.len())?;
        for p in ["x", "y", "z", "nx", "ny", "nz"] {
            writeln!(f, "property float {p}")?;
        }
        writeln!(f, "property float gray")?;
        writeln!(f, "element face {}", self.triangles.len())?;
        writeln!(f, "property list uchar int vertex_indices")?;
        writeln!(f, "end_header")?;
        for i in 0..self.vertices.len() {
            let v = self.vertices[i];
            let n = self.normals[i];
            writeln!(
                f,
                "{} {} {} {} {} {} {}",
                v[0] as f32, v[1] as f32, v[2] as f32, n[0] as f32, n[1] as f32, n[2] as f32,
                self.gray[i]
            )?;
        }
        for t in &self.triangles {
            writeln!(f, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        Ok(())
    }
}

/// Phong-shade a raycast result: ambient 0.15, diffuse 0.65, specular 0.2,
/// shininess 32. `light_dir` is the direction light travels, camera frame.
/// Invalid pixels take the background color.
pub fn shade_phong(
    normals: &Grid<[f32; 3]>,
    depth: &DepthImage,
    light_dir: Vector3<f64>,
    background: [u8; 3],
) -> ColorImage {
    const AMBIENT: f64 = 0.15;
    const DIFFUSE: f64 = 0.65;
    const SPECULAR: f64 = 0.2;
    const SHININESS: i32 = 32;
    let l = -light_dir.normalize(); // toward the light
    let view = Vector3::new(0.0, 0.0, -1.0); // toward the camera
    let half = (l + view).normalize();
    let mut img = ColorImage::new(depth.width, depth.height);
    for y in 0..depth.height {
        for x in 0..depth.width {
            if *depth.get(x, y) <= 0.0 {
                img.set(x, y, background);
                continue;
            }
            let nr = normals.get(x, y);
            let n = Vector3::new(nr[0] as f64, nr[1] as f64, nr[2] as f64);
            let diff = n.dot(&l).max(0.0);
            let spec = if diff > 0.0 {
                n.dot(&half).max(0.0).powi(SHININESS)
            } else {
                0.0
            };
            let intensity = (AMBIENT + DIFFUSE * diff + SPECULAR * spec).clamp(0.0, 1.0);
            let v = (intensity * 255.0).round() as u8;
            img.set(x, y, [v, v, v]);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;

    fn test_k() -> CameraIntrinsics {
        CameraIntrinsics::new(120.0, 120.0, 80.0, 60.0, 160, 120).unwrap()
    }

    /// Depth image of the plane z = `z0` seen from the origin camera.
    fn plane_depth(k: &CameraIntrinsics, z0: f32) -> (DepthImage, GrayImage) {
        let mut d = DepthImage::new(k.width, k.height);
        d.data.fill(z0);
        let mut g = GrayImage::new(k.width, k.height);
        g.data.fill(0.5);
        (d, g)
    }

    #[test]
    fn fuse_plane_tsdf_values() {
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let mut vol = TsdfVolume::new(64, 0.5, pose).unwrap();
        let k = test_k();
        let (d, g) = plane_depth(&k, 1.0);
        vol.fuse(&d, &g, &Pose::identity(), &k, None);
        assert!(vol.has_data());
        let vm = vol.voxel_size();
        let mu = vol.truncation();
        // Voxel closest to the plane along the optical axis.
        let zi = (((1.0 - (pose.translation.z - vol.radius())) / vm) - 0.5).round() as usize;
        let (t, w, i) = vol.voxel(32, 32, zi);
        assert!(w > 0.0);
        assert!((t as f64).abs() <= vm / mu + 1e-6, "tsdf on plane = {t}");
        assert!((i - 0.5).abs() < 1e-6);
        // A voxel 2 mu in front of the surface is fully truncated to 1.
        let z_front = 1.0 - 2.0 * mu;
        let zi_front = (((z_front - (pose.translation.z - vol.radius())) / vm) - 0.5).round() as usize;
        let (t, w, _) = vol.voxel(32, 32, zi_front);
        assert!(w > 0.0);
        assert_eq!(t, 1.0);
    }

    #[test]
    fn double_fusion_is_idempotent_with_doubled_weights() {
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let mut vol = TsdfVolume::new(32, 0.4, pose).unwrap();
        let k = test_k();
        let (d, g) = plane_depth(&k, 1.0);
        vol.fuse(&d, &g, &Pose::identity(), &k, None);
        let first = vol.clone();
        vol.fuse(&d, &g, &Pose::identity(), &k, None);
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let (t1, w1, i1) = first.voxel(x, y, z);
                    let (t2, w2, i2) = vol.voxel(x, y, z);
                    assert!((t1 - t2).abs() < 1e-9);
                    assert!((i1 - i2).abs() < 1e-9);
                    if w1 > 0.0 {
                        assert_eq!(w2, w1 * 2.0);
                    }
                }
            }
        }
    }

    #[test]
    fn all_invalid_depth_leaves_volume_untouched() {
        let mut vol = TsdfVolume::new(16, 0.2, Pose::identity()).unwrap();
        let k = test_k();
        let d = DepthImage::new(k.width, k.height);
        let g = GrayImage::new(k.width, k.height);
        let before: Vec<u32> = vol.raw_bits().collect();
        vol.fuse(&d, &g, &Pose::identity(), &k, None);
        let after: Vec<u32> = vol.raw_bits().collect();
        assert_eq!(before, after);
        assert!(!vol.has_data());
    }

    #[test]
    fn raycast_on_empty_volume_fails() {
        let vol = TsdfVolume::new(16, 0.2, Pose::identity()).unwrap();
        assert!(matches!(
            vol.raycast(&Pose::identity(), &test_k()),
            Err(ReconError::UninitializedVolume)
        ));
    }

    #[test]
    fn plane_fuse_raycast_round_trip() {
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let mut vol = TsdfVolume::new(64, 0.5, pose).unwrap();
        let k = test_k();
        let (d, g) = plane_depth(&k, 1.0);
        vol.fuse(&d, &g, &Pose::identity(), &k, None);
        let rc = vol.raycast(&Pose::identity(), &k).unwrap();
        let vm = vol.voxel_size() as f32;
        let center = *rc.depth.get(80, 60);
        assert!(center > 0.0, "principal pixel must hit");
        assert!((center - 1.0).abs() < vm, "depth {center}");
        // RMS over all valid pixels that see the plane inside the volume.
        let mut sq = 0.0f64;
        let mut cnt = 0usize;
        for i in 0..rc.depth.data.len() {
            if rc.valid.data[i] {
                sq += ((rc.depth.data[i] - d.data[i]) as f64).powi(2);
                cnt += 1;
            }
        }
        assert!(cnt > 2000);
        let rms = (sq / cnt as f64).sqrt();
        assert!(rms < vm as f64, "rms {rms}");
        // Gray should reproduce the fused intensity.
        let gray_center = *rc.gray.get(80, 60);
        assert!((gray_center - 0.5).abs() < 1e-3);
    }

    /// Analytic sphere depth image from a camera pose looking at it.
    fn sphere_depth(
        k: &CameraIntrinsics,
        cam: &Pose,
        center: Vector3<f64>,
        radius: f64,
    ) -> (DepthImage, GrayImage, Mask) {
        let mut d = DepthImage::new(k.width, k.height);
        let mut g = GrayImage::new(k.width, k.height);
        let mut m = Mask::new(k.width, k.height);
        for y in 0..k.height {
            for x in 0..k.width {
                let dir = cam.rotate(Vector3::new(
                    (x as f64 - k.cx) / k.fx,
                    (y as f64 - k.cy) / k.fy,
                    1.0,
                ));
                let oc = cam.translation - center;
                let a = dir.dot(&dir);
                let b = 2.0 * oc.dot(&dir);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc > 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    if t > 0.0 {
                        d.set(x, y, t as f32);
                        g.set(x, y, 0.8);
                        m.set(x, y, true);
                    }
                }
            }
        }
        (d, g, m)
    }

    /// Fibonacci-sphere viewpoints so every side (poles included) is seen.
    fn fused_sphere(views: usize) -> (TsdfVolume, Vector3<f64>, f64, CameraIntrinsics) {
        let k = test_k();
        let center = Vector3::new(0.0, 0.0, 0.0);
        let radius = 0.1;
        let mut vol = TsdfVolume::new(64, 0.2, Pose::identity()).unwrap();
        let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
        for i in 0..views {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / views as f64;
            let r = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            let dir = Vector3::new(r * a.cos(), r * a.sin(), z);
            let eye = center + dir * 0.6;
            let up = if dir.z.abs() > 0.9 {
                Vector3::new(0.0, 1.0, 0.0)
            } else {
                Vector3::new(0.0, 0.0, 1.0)
            };
            let cam = Pose::look_at(eye, center, up);
            let (d, g, m) = sphere_depth(&k, &cam, center, radius);
            vol.fuse(&d, &g, &cam, &k, Some(&m));
        }
        (vol, center, radius, k)
    }

    #[test]
    fn sphere_raycast_novel_view_accuracy() {
        let (vol, center, radius, k) = fused_sphere(20);
        let vm = vol.voxel_size();
        // Novel viewpoint not in the fusion set.
        let cam = Pose::look_at(
            Vector3::new(0.35, 0.25, 0.4),
            center,
            Vector3::new(0.0, 0.0, 1.0),
        );
        let rc = vol.raycast(&cam, &k).unwrap();
        let (gt_depth, _, _) = sphere_depth(&k, &cam, center, radius);
        let mut ok = 0usize;
        let mut total = 0usize;
        for i in 0..rc.depth.data.len() {
            if rc.valid.data[i] && gt_depth.data[i] > 0.0 {
                total += 1;
                if (rc.depth.data[i] - gt_depth.data[i]).abs() < vm as f32 {
                    ok += 1;
                }
            }
        }
        assert!(total > 500, "sphere too small in view: {total}");
        let frac = ok as f64 / total as f64;
        assert!(frac >= 0.95, "only {frac:.3} of pixels within v_m");
    }

    #[test]
    fn sphere_mesh_radial_error_and_topology() {
        let (vol, center, radius, _) = fused_sphere(20);
        let mesh = vol.extract_mesh().unwrap();
        assert!(mesh.vertices.len() > 100);
        let vm = vol.voxel_size();
        let mean_err: f64 = mesh
            .vertices
            .iter()
            .map(|v| ((Vector3::new(v[0], v[1], v[2]) - center).norm() - radius).abs())
            .sum::<f64>()
            / mesh.vertices.len() as f64;
        assert!(mean_err < vm, "mean radial error {mean_err}");
        assert_eq!(mesh.euler_characteristic(), 2);
    }

    #[test]
    fn empty_volume_mesh_fails() {
        let vol = TsdfVolume::new(16, 0.2, Pose::identity()).unwrap();
        assert!(matches!(vol.extract_mesh(), Err(ReconError::EmptyVolume)));
    }

    #[test]
    fn tsdf_bounds_and_weight_cap_hold() {
        let pose = Pose::from_translation(Vector3::new(0.0, 0.0, 1.0));
        let mut vol = TsdfVolume::new(24, 0.3, pose).unwrap();
        let k = test_k();
        for i in 0..70 {
            let z = 0.9 + 0.01 * (i % 5) as f32;
            let (d, g) = plane_depth(&k, z);
            vol.fuse(&d, &g, &Pose::identity(), &k, None);
        }
        for z in 0..24 {
            for y in 0..24 {
                for x in 0..24 {
                    let (t, w, _) = vol.voxel(x, y, z);
                    assert!((-1.0..=1.0).contains(&t));
                    assert!((0.0..=DEFAULT_W_MAX).contains(&w));
                }
            }
        }
    }

    #[test]
    fn volume_translation_equivariance() {
        let k = test_k();
        let (d, g) = plane_depth(&k, 1.0);
        let shift = Vector3::new(0.13, -0.2, 0.4);

        let mut a = TsdfVolume::new(32, 0.4, Pose::from_translation(Vector3::new(0.0, 0.0, 1.0)))
            .unwrap();
        a.fuse(&d, &g, &Pose::identity(), &k, None);

        let mut b = TsdfVolume::new(
            32,
            0.4,
            Pose::from_translation(Vector3::new(0.0, 0.0, 1.0) + shift),
        )
        .unwrap();
        b.fuse(&d, &g, &Pose::from_translation(shift), &k, None);

        let bits_a: Vec<u32> = a.raw_bits().collect();
        let bits_b: Vec<u32> = b.raw_bits().collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn volume_save_load_round_trip() {
        let (vol, _, _, _) = fused_sphere(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.tsdf");
        vol.save(&path).unwrap();
        let back = TsdfVolume::load(&path).unwrap();
        assert_eq!(back.n(), vol.n());
        assert_eq!(back.tsdf, vol.tsdf);
        assert_eq!(back.weight, vol.weight);
        assert_eq!(back.intensity, vol.intensity);
        assert!((back.radius() - vol.radius()).abs() < 1e-6);
    }

    #[test]
    fn phong_extremes() {
        let mut normals: Grid<[f32; 3]> = Grid::filled(2, 1, [0.0; 3]);
        let mut depth = DepthImage::new(2, 1);
        depth.set(0, 0, 1.0);
        depth.set(1, 0, 1.0);
        // Light travels +z; normal facing the light (and the default view).
        normals.set(0, 0, [0.0, 0.0, -1.0]);
        normals.set(1, 0, [1.0, 0.0, 0.0]);
        let img = shade_phong(&normals, &depth, Vector3::new(0.0, 0.0, 1.0), [7, 7, 7]);
        assert_eq!(img.get(0, 0), [255, 255, 255]);
        let ambient = (0.15f64 * 255.0).round() as u8;
        assert_eq!(img.get(1, 0), [ambient, ambient, ambient]);
        // Invalid pixel takes background.
        let mut depth2 = DepthImage::new(2, 1);
        depth2.set(0, 0, 1.0);
        let img2 = shade_phong(&normals, &depth2, Vector3::new(0.0, 0.0, 1.0), [7, 8, 9]);
        assert_eq!(img2.get(1, 0), [7, 8, 9]);
    }

    #[test]
    fn raycast_respects_rotation_of_volume_pose() {
        // A plane fused into a rotated volume must still render correctly.
        let rot = so3_exp(Vector3::new(0.0, 0.3, 0.1));
        let pose = Pose::new(rot, Vector3::new(0.0, 0.0, 1.0));
        let mut vol = TsdfVolume::new(48, 0.5, pose).unwrap();
        let k = test_k();
        let (d, g) = plane_depth(&k, 1.0);
        vol.fuse(&d, &g, &Pose::identity(), &k, None);
        let rc = vol.raycast(&Pose::identity(), &k).unwrap();
        let c = *rc.depth.get(80, 60);
        assert!(c > 0.0 && (c - 1.0).abs() < vol.voxel_size() as f32);
    }
}
