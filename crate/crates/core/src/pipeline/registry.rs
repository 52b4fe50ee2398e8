//! The object registry: dominant scene model plus per-object 2D/3D state,
//! with a bit-exact binary serialization for determinism checks.

use crate::geometry::Pose;
use crate::reconstruction::TsdfVolume;
use crate::tracking2d::{AppearanceModel, Histogram, ObjectModel2D, Sdf2D};
use crate::image::Grid;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct TrackedObject {
    pub id: u32,
    pub model2d: ObjectModel2D,
    pub volume: TsdfVolume,
    /// Camera pose in the object's model frame (the world frame at the
    /// moment of creation).
    pub pose: Pose,
    /// Per-frame camera motion in the model frame; predicts the next pose.
    pub velocity: Pose,
    pub last_seen: usize,
    pub dormant: bool,
    /// (reference pose, estimated relative pose) of the latest update; their
    /// composition is exactly `pose`.
    pub last_update: Option<(Pose, Pose)>,
    /// Image-space centroid history for the motion cue.
    pub prev_centroid: Option<(f64, f64)>,
    /// Foreground cloud of the last sighting (transient tracking state, not
    /// serialized).
    pub prev_cloud: Option<crate::tracking3d::OrientedColoredCloud>,
}

#[derive(Debug, Clone)]
pub struct ObjectRegistry {
    pub dominant: TsdfVolume,
    /// Current camera pose in the world (= first-frame camera) frame.
    pub camera_pose: Pose,
    /// Frame-to-frame camera motion estimate.
    pub camera_velocity: Pose,
    pub objects: Vec<TrackedObject>,
    pub frames_processed: usize,
    pub next_object_id: u32,
}

impl ObjectRegistry {
    pub fn active_objects(&self) -> impl Iterator<Item = &TrackedObject> {
        self.objects.iter().filter(|o| !o.dormant)
    }

    /// World pose of object `idx` relative to its creation configuration.
    pub fn object_world_pose(&self, idx: usize) -> Pose {
        self.camera_pose.compose(&self.objects[idx].pose.invert())
    }

    /// Bit-exact binary dump of the full registry state.
    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"ODREG001")?;
        write_pose(&mut f, &self.camera_pose)?;
        write_pose(&mut f, &self.camera_velocity)?;
        f.write_all(&(self.frames_processed as u64).to_le_bytes())?;
        f.write_all(&self.next_object_id.to_le_bytes())?;
        write_volume(&mut f, &self.dominant)?;
        f.write_all(&(self.objects.len() as u32).to_le_bytes())?;
        for obj in &self.objects {
            f.write_all(&obj.id.to_le_bytes())?;
            write_pose(&mut f, &obj.pose)?;
            write_pose(&mut f, &obj.velocity)?;
            f.write_all(&(obj.last_seen as u64).to_le_bytes())?;
            f.write_all(&[obj.dormant as u8])?;
            write_volume(&mut f, &obj.volume)?;
            write_sdf(&mut f, &obj.model2d.sdf)?;
            write_hist(&mut f, &obj.model2d.appearance.fg)?;
            write_hist(&mut f, &obj.model2d.appearance.bg)?;
        }
        Ok(())
    }

    /// Digest of the serialized registry, for cheap equality checks.
    pub fn digest(&self) -> u64 {
        struct Fnv(u64);
        impl Write for Fnv {
            fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
                for &b in buf {
                    self.0 ^= b as u64;
                    self.0 = self.0.wrapping_mul(0x100000001b3);
                }
                Ok(buf.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let mut h = Fnv(0xcbf29ce484222325);
        write_pose(&mut h, &self.camera_pose).unwrap();
        write_pose(&mut h, &self.camera_velocity).unwrap();
        h.write_all(&(self.frames_processed as u64).to_le_bytes()).unwrap();
        write_volume(&mut h, &self.dominant).unwrap();
        for obj in &self.objects {
            h.write_all(&obj.id.to_le_bytes()).unwrap();
            write_pose(&mut h, &obj.pose).unwrap();
            write_pose(&mut h, &obj.velocity).unwrap();
            write_volume(&mut h, &obj.volume).unwrap();
            write_sdf(&mut h, &obj.model2d.sdf).unwrap();
            write_hist(&mut h, &obj.model2d.appearance.fg).unwrap();
            write_hist(&mut h, &obj.model2d.appearance.bg).unwrap();
        }
        h.0
    }
}

fn write_pose(f: &mut impl Write, p: &Pose) -> std::io::Result<()> {
    for v in p.to_row_major() {
        f.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn write_volume(f: &mut impl Write, v: &TsdfVolume) -> std::io::Result<()> {
    f.write_all(&(v.n() as u32).to_le_bytes())?;
    f.write_all(&v.radius().to_bits().to_le_bytes())?;
    write_pose(f, &v.pose)?;
    for bits in v.raw_bits() {
        f.write_all(&bits.to_le_bytes())?;
    }
    Ok(())
}

fn write_sdf(f: &mut impl Write, s: &Sdf2D) -> std::io::Result<()> {
    f.write_all(&(s.x0 as u32).to_le_bytes())?;
    f.write_all(&(s.y0 as u32).to_le_bytes())?;
    f.write_all(&(s.grid.width as u32).to_le_bytes())?;
    f.write_all(&(s.grid.height as u32).to_le_bytes())?;
    for v in &s.grid.data {
        f.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn write_hist(f: &mut impl Write, h: &Histogram) -> std::io::Result<()> {
    for v in &h.bins {
        f.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

/// Rebuild a registry saved by [`ObjectRegistry::save`]; used by tests and
/// the render tooling, not by the pipeline itself.
pub fn load_registry(path: impl AsRef<Path>) -> std::io::Result<ObjectRegistry> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != b"ODREG001" {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "bad registry magic",
        ));
    }
    let camera_pose = read_pose(&mut f)?;
    let camera_velocity = read_pose(&mut f)?;
    let frames_processed = read_u64(&mut f)? as usize;
    let next_object_id = read_u32(&mut f)?;
    let dominant = read_volume(&mut f)?;
    let n_objects = read_u32(&mut f)? as usize;
    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let id = read_u32(&mut f)?;
        let pose = read_pose(&mut f)?;
        let velocity = read_pose(&mut f)?;
        let last_seen = read_u64(&mut f)? as usize;
        let mut flag = [0u8; 1];
        f.read_exact(&mut flag)?;
        let volume = read_volume(&mut f)?;
        let sdf = read_sdf(&mut f)?;
        let fg = read_hist(&mut f)?;
        let bg = read_hist(&mut f)?;
        objects.push(TrackedObject {
            id,
            model2d: ObjectModel2D {
                id,
                sdf,
                appearance: AppearanceModel { fg, bg },
                predicted_centroid: None,
            },
            volume,
            pose,
            velocity,
            last_seen,
            dormant: flag[0] != 0,
            last_update: None,
            prev_centroid: None,
            prev_cloud: None,
        });
    }
    Ok(ObjectRegistry {
        dominant,
        camera_pose,
        camera_velocity,
        objects,
        frames_processed,
        next_object_id,
    })
}

fn read_u32(f: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(f: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(f: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(f64::from_bits(u64::from_le_bytes(b)))
}

fn read_pose(f: &mut impl Read) -> std::io::Result<Pose> {
    let mut vals = [0f64; 12];
    for v in vals.iter_mut() {
        *v = read_f64(f)?;
    }
    Ok(Pose::from_row_major(&vals))
}

fn read_volume(f: &mut impl Read) -> std::io::Result<TsdfVolume> {
    let n = read_u32(f)? as usize;
    let radius = read_f64(f)?;
    let pose = read_pose(f)?;
    let mut vol = TsdfVolume::new(n, radius, pose)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
    let count = n * n * n * 3;
    let mut buf = vec![0u8; count * 4];
    f.read_exact(&mut buf)?;
    let bits: Vec<u32> = buf
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    vol.set_raw_bits(&bits);
    Ok(vol)
}

fn read_sdf(f: &mut impl Read) -> std::io::Result<Sdf2D> {
    let x0 = read_u32(f)? as usize;
    let y0 = read_u32(f)? as usize;
    let w = read_u32(f)? as usize;
    let h = read_u32(f)? as usize;
    let mut grid: Grid<f64> = Grid::new(w, h);
    for v in &mut grid.data {
        *v = read_f64(f)?;
    }
    Ok(Sdf2D { x0, y0, grid })
}

fn read_hist(f: &mut impl Read) -> std::io::Result<Histogram> {
    let mut bins = vec![0.0f64; crate::tracking2d::BIN_COUNT];
    for v in &mut bins {
        *v = read_f64(f)?;
    }
    Ok(Histogram { bins })
}
