//! On-disk artifacts of a pipeline run: per-frame masks, pose CSV, meshes,
//! metrics and the registry snapshot.

use super::registry::ObjectRegistry;
use crate::geometry::Pose;
use crate::image::{save_label_png, LabelImage};
use std::io::Write;
use std::path::Path;

pub struct RunOutput {
    pub registry: ObjectRegistry,
    /// Per-frame label image of tracked objects (0 = background).
    pub masks: Vec<LabelImage>,
    /// Per-frame (object id, world pose relative to creation).
    pub object_poses: Vec<Vec<(u32, Pose)>>,
    pub camera_poses: Vec<Pose>,
}

/// Write masks/, poses.csv, meshes/*.ply, dominant.ply, metrics.json and
/// registry.bin under `dir`.
pub fn write_run_outputs(out: &RunOutput, dir: impl AsRef<Path>) -> std::io::Result<()> {
    let dir = dir.as_ref();
    let masks_dir = dir.join("masks");
    let meshes_dir = dir.join("meshes");
    std::fs::create_dir_all(&masks_dir)?;
    std::fs::create_dir_all(&meshes_dir)?;

    for (i, mask) in out.masks.iter().enumerate() {
        save_label_png(mask, masks_dir.join(format!("mask_{i:05}.png")))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }

    let mut poses = std::io::BufWriter::new(std::fs::File::create(dir.join("poses.csv"))?);
    writeln!(
        poses,
        "frame,object,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz"
    )?;
    for (frame, per_frame) in out.object_poses.iter().enumerate() {
        for (id, pose) in per_frame {
            let v = pose.to_row_major();
            write!(poses, "{frame},{id}")?;
            for x in v {
                write!(poses, ",{x}")?;
            }
            writeln!(poses)?;
        }
    }
    let mut cam = std::io::BufWriter::new(std::fs::File::create(dir.join("camera.csv"))?);
    writeln!(
        cam,
        "frame,r00,r01,r02,r10,r11,r12,r20,r21,r22,tx,ty,tz"
    )?;
    for (frame, pose) in out.camera_poses.iter().enumerate() {
        write!(cam, "{frame}")?;
        for x in pose.to_row_major() {
            write!(cam, ",{x}")?;
        }
        writeln!(cam)?;
    }

    if let Ok(mesh) = out.registry.dominant.extract_mesh() {
        mesh.save_ply(dir.join("dominant.ply"))
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    let mut mesh_counts = Vec::new();
    for obj in &out.registry.objects {
        if let Ok(mesh) = obj.volume.extract_mesh() {
            mesh.save_ply(meshes_dir.join(format!("object_{:03}.ply", obj.id)))
                .map_err(|e| std::io::Error::other(e.to_string()))?;
            mesh_counts.push((obj.id, mesh.vertices.len(), mesh.triangles.len()));
        }
    }

    out.registry.save(dir.join("registry.bin"))?;

    let metrics = serde_json::json!({
        "frames": out.masks.len(),
        "objects": out.registry.objects.iter().map(|o| {
            serde_json::json!({
                "id": o.id,
                "dormant": o.dormant,
                "last_seen": o.last_seen,
                "volume_n": o.volume.n(),
                "volume_radius": o.volume.radius(),
            })
        }).collect::<Vec<_>>(),
        "meshes": mesh_counts.iter().map(|(id, v, t)| {
            serde_json::json!({"id": id, "vertices": v, "triangles": t})
        }).collect::<Vec<_>>(),
        "registry_digest": format!("{:016x}", out.registry.digest()),
    });
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    Ok(())
}
