//! On-disk scene layout:
//!
//! ```text
//! <root>/<scene_id>/meta.json    boxes, cameras, lighting, format_version
//! <root>/<scene_id>/points.f32   little-endian f32 (x, y, z, intensity), 16 bytes/point
//! <root>/<scene_id>/image_<k>.ppm binary P6, 8-bit
//! <root>/<scene_id>/depth_<k>.f32 little-endian f32, row-major HxW, 0 = miss
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Box3D, CameraModel, PointCloud};

use super::{CameraFrame, Lighting, RgbImage, Scene};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct CameraMeta {
    intrinsics: Vec<f64>,
    extrinsic: Vec<f64>,
    height: usize,
    width: usize,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u64,
    scene_id: String,
    boxes: Vec<Box3D>,
    cameras: Vec<CameraMeta>,
    lighting: Lighting,
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn f32_bytes(v: impl IntoIterator<Item = f32>) -> Vec<u8> {
    v.into_iter().flat_map(f32::to_le_bytes).collect()
}

fn f32_values(path: &Path, bytes: &[u8], record: usize) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(record) {
        return Err(Error::corrupt(
            path,
            format!("length {} is not a multiple of {record} bytes", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<RgbImage> {
    let mut fields = Vec::with_capacity(4);
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::corrupt(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // Exactly one whitespace byte separates the header from the raster.
    i += 1;
    if fields[0] != "P6" {
        return Err(Error::corrupt(
            path,
            format!("expected P6 magic, found {:?}", fields[0]),
        ));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::corrupt(path, format!("bad PPM header field {s:?}")))
    };
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::corrupt(path, format!("unsupported maxval {maxval}")));
    }
    let need = width * height * 3;
    if bytes.len() < i || bytes.len() - i != need {
        return Err(Error::corrupt(
            path,
            format!("expected {need} raster bytes, found {}", bytes.len().saturating_sub(i)),
        ));
    }
    Ok(RgbImage {
        height,
        width,
        data: bytes[i..].to_vec(),
    })
}

/// Writes `scene` into `root/<scene_id>/`, returning that directory.
pub fn write_scene(scene: &Scene, root: &Path) -> Result<PathBuf> {
    let dir = root.join(&scene.scene_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let meta = Meta {
        format_version: FORMAT_VERSION,
        scene_id: scene.scene_id.clone(),
        boxes: scene.boxes.clone(),
        cameras: scene
            .cameras
            .iter()
            .map(|f| CameraMeta {
                intrinsics: f.camera.intrinsic_rows().to_vec(),
                extrinsic: f.camera.extrinsic_rows().to_vec(),
                height: f.camera.height,
                width: f.camera.width,
            })
            .collect(),
        lighting: scene.lighting,
    };
    let json = serde_json::to_vec_pretty(&meta).expect("meta serializes");
    write(&dir.join("meta.json"), &json)?;
    write(
        &dir.join("points.f32"),
        &f32_bytes(scene.cloud.points.iter().flatten().copied()),
    )?;
    for (k, f) in scene.cameras.iter().enumerate() {
        write(&dir.join(format!("image_{k}.ppm")), &encode_ppm(&f.rgb))?;
        write(&dir.join(format!("depth_{k}.f32")), &f32_bytes(f.depth.iter().copied()))?;
    }
    Ok(dir)
}

/// Reads a scene directory written by [`write_scene`].
pub fn read_scene(dir: &Path) -> Result<Scene> {
    let meta_path = dir.join("meta.json");
    let raw = read(&meta_path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&raw).map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::corrupt(&meta_path, "missing format_version"))?;
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: meta_path,
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta: Meta = serde_json::from_value(value).map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
    for b in &meta.boxes {
        b.validate().map_err(|e| Error::corrupt(&meta_path, e.to_string()))?;
    }

    let pts_path = dir.join("points.f32");
    let vals = f32_values(&pts_path, &read(&pts_path)?, 16)?;
    let cloud = PointCloud {
        points: vals.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
    };

    let mut cameras = Vec::with_capacity(meta.cameras.len());
    for (k, cm) in meta.cameras.iter().enumerate() {
        let camera = CameraModel::from_rows(&cm.intrinsics, &cm.extrinsic, cm.height, cm.width)
            .map_err(|e| Error::corrupt(&meta_path, format!("camera {k}: {e}")))?;
        let img_path = dir.join(format!("image_{k}.ppm"));
        let rgb = decode_ppm(&img_path, &read(&img_path)?)?;
        if (rgb.height, rgb.width) != (cm.height, cm.width) {
            return Err(Error::corrupt(
                &img_path,
                format!(
                    "image is {}x{}, meta says {}x{}",
                    rgb.height, rgb.width, cm.height, cm.width
                ),
            ));
        }
        let depth_path = dir.join(format!("depth_{k}.f32"));
        let depth = f32_values(&depth_path, &read(&depth_path)?, 4)?;
        if depth.len() != cm.height * cm.width {
            return Err(Error::corrupt(
                &depth_path,
                format!("expected {} depth values, found {}", cm.height * cm.width, depth.len()),
            ));
        }
        cameras.push(CameraFrame { camera, rgb, depth });
    }
    Ok(Scene {
        scene_id: meta.scene_id,
        cloud,
        cameras,
        boxes: meta.boxes,
        lighting: meta.lighting,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, SceneConfig};

    fn scene() -> Scene {
        generate_scene(&SceneConfig {
            seed: 1,
            n_cameras: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let tmp = tempfile::tempdir().unwrap();
        let s = scene();
        let dir = write_scene(&s, tmp.path()).unwrap();
        let back = read_scene(&dir).unwrap();
        assert_eq!(s, back);
        let bits = |sc: &Scene| -> Vec<u32> { sc.cloud.points.iter().flatten().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&s), bits(&back));
    }

    #[test]
    fn truncated_points_are_corrupt() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_scene(&scene(), tmp.path()).unwrap();
        let p = dir.join("points.f32");
        let mut b = fs::read(&p).unwrap();
        b.truncate(b.len() - 3);
        fs::write(&p, b).unwrap();
        match read_scene(&dir) {
            Err(Error::Corrupt { path, .. }) => assert!(path.ends_with("points.f32")),
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_scene(&scene(), tmp.path()).unwrap();
        let p = dir.join("meta.json");
        let text = fs::read_to_string(&p)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&p, text).unwrap();
        assert!(matches!(read_scene(&dir), Err(Error::Version { found: 7, .. })));
    }

    #[test]
    fn missing_file_names_the_file() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_scene(&scene(), tmp.path()).unwrap();
        fs::remove_file(dir.join("depth_1.f32")).unwrap();
        let err = read_scene(&dir).unwrap_err();
        assert!(err.to_string().contains("depth_1.f32"), "{err}");
    }
}
