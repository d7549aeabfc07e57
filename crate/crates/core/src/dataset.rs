//! Training-data generation for local grasp regression: random object
//! rotations, single-view rendering, visible-grasp filtering, perturbed
//! references and fixed-size local crops in the camera frame.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{extract_object_cloud, look_at, render_view, Intrinsics};
use crate::geometry::{random_rotation, tva_from_pose, Pose};
use crate::local_grasp::{
    crop_local_in_frame, filter_visible_grasps, perturb_reference, GraspAnnotation,
    DEFAULT_PERTURB_RADIUS, DEFAULT_VISIBILITY_THRESHOLD,
};
use crate::mesh::{Mesh, MeshError};
use crate::rng::SeedStream;
use crate::scene::{Scene, SceneObject};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("no annotated objects")]
    Empty,
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedObject {
    pub id: u32,
    pub mesh: Mesh,
    pub annotations: Vec<GraspAnnotation>,
}

/// On-disk annotation record: a mesh path (relative to the file) and its
/// object-frame grasps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub id: u32,
    pub mesh: String,
    pub grasps: Vec<GraspAnnotation>,
}

impl AnnotatedObject {
    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| io_err(path, e))?;
        let mesh_path = path.parent().unwrap_or(Path::new(".")).join(&file.mesh);
        Ok(AnnotatedObject {
            id: file.id,
            mesh: Mesh::load(&mesh_path)?,
            annotations: file.grasps,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub rotations: usize,
    pub seed: u64,
    pub intrinsics: Intrinsics,
    pub visibility_threshold: f64,
    pub perturb_radius: f64,
    pub train_fraction: f64,
    /// Cap on samples per rendered view (all visible grasps when `None`).
    pub max_samples_per_view: Option<usize>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            rotations: 10,
            seed: 0,
            intrinsics: Intrinsics {
                fx: 280.0,
                fy: 280.0,
                cx: 160.0,
                cy: 120.0,
                width: 320,
                height: 240,
            },
            visibility_threshold: DEFAULT_VISIBILITY_THRESHOLD,
            perturb_radius: DEFAULT_PERTURB_RADIUS,
            train_fraction: 0.7,
            max_samples_per_view: None,
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub crop: String,
    pub t: Vector3<f64>,
    pub v: Vector3<f64>,
    pub alpha: f64,
    pub object_id: u32,
    pub rotation_index: usize,
    pub grasp_index: usize,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub objects: usize,
    pub rotations: usize,
    pub samples: usize,
    /// (object id, samples) in input order.
    pub per_object: Vec<(u32, usize)>,
    pub train_objects: Vec<u32>,
    pub test_objects: Vec<u32>,
}

/// Object-level split: a seeded shuffle, the first `round(fraction · n)`
/// ids train. Both lists are returned sorted.
pub fn split_objects(ids: &[u32], train_fraction: f64, seed: u64) -> (Vec<u32>, Vec<u32>) {
    let mut shuffled = ids.to_vec();
    shuffled.sort_unstable();
    shuffled.dedup();
    let mut rng = SeedStream::new(seed).rng("dataset-split");
    shuffled.shuffle(&mut rng);
    let n_train = ((shuffled.len() as f64) * train_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut train = shuffled[..n_train].to_vec();
    let mut test = shuffled[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

struct Sample {
    record: SampleRecord,
    ply: String,
}

fn samples_for(
    obj: &AnnotatedObject,
    rotation: usize,
    opts: &DatasetOptions,
    split: Split,
) -> Vec<Sample> {
    let seeds = SeedStream::new(opts.seed)
        .child("dataset-object", obj.id as u64)
        .child("rotation", rotation as u64);
    let mut rng = seeds.rng("so3");
    let r = random_rotation(&mut rng);
    let (lo, hi) = obj.mesh.bounds();
    let center = (lo + hi) * 0.5;
    // rotate about the bounding-box centre, which lands at the origin
    let obj_pose = Pose::new(r, -(r * center));
    let size = (hi - lo).norm().max(0.05);
    let eye = Vector3::new(-(2.5 * size).max(0.6), 0.0, 0.0);
    let cam = look_at(eye, Vector3::zeros());
    let scene = Scene {
        objects: vec![SceneObject {
            id: 1,
            label: "object".into(),
            template: "mesh".into(),
            mesh: obj.mesh.clone(),
            shapes: Vec::new(),
            pose: obj_pose,
            mass: 1.0,
            friction: 0.5,
            watertight: obj.mesh.is_watertight(),
            com_local: center,
        }],
        floor_height: f64::NEG_INFINITY,
    };
    let view = render_view(&scene, &cam, &opts.intrinsics);
    let Ok(world_cloud) = extract_object_cloud(std::slice::from_ref(&view), "object") else {
        return Vec::new();
    };
    let object_cloud = world_cloud.transformed(&obj_pose.inverse());
    let visible = filter_visible_grasps(&obj.annotations, &object_cloud, opts.visibility_threshold);
    let limit = opts.max_samples_per_view.unwrap_or(usize::MAX);
    let mut out = Vec::new();
    for (k, ann) in obj.annotations.iter().enumerate() {
        if out.len() >= limit || !visible.contains(ann) {
            continue;
        }
        // the contact nearer to the observed surface anchors the reference
        let nearest = |c: &Vector3<f64>| {
            object_cloud
                .points
                .iter()
                .map(|p| (p - c).norm_squared())
                .fold(f64::INFINITY, f64::min)
        };
        let contact = if nearest(&ann.contacts[0]) <= nearest(&ann.contacts[1]) {
            ann.contacts[0]
        } else {
            ann.contacts[1]
        };
        let reference_obj = perturb_reference(
            &contact,
            opts.perturb_radius,
            seeds.child("grasp", k as u64).seed(),
        );
        let reference = obj_pose.transform_point(&reference_obj);
        let Ok(crop) = crop_local_in_frame(
            &world_cloud,
            &reference,
            &cam.rotation,
            Some(cam.translation),
        ) else {
            continue;
        };
        let target_pose = crop
            .frame
            .inverse()
            .compose(&obj_pose)
            .compose(&ann.grasp.to_pose());
        let Ok(target) = tva_from_pose(&target_pose) else {
            continue;
        };
        let name = format!("crops/o{}_r{}_g{}.ply", obj.id, rotation, k);
        out.push(Sample {
            record: SampleRecord {
                crop: name,
                t: target.translation,
                v: target.approach.into_inner(),
                alpha: target.inplane,
                object_id: obj.id,
                rotation_index: rotation,
                grasp_index: k,
                split,
            },
            ply: crop.to_cloud().to_ply(),
        });
    }
    out
}

/// Generates the dataset under `out_dir`: `crops/*.ply`, `manifest.jsonl`
/// (one [`SampleRecord`] per line) and `summary.json`.
pub fn generate_dataset(
    objects: &[AnnotatedObject],
    opts: &DatasetOptions,
    out_dir: &Path,
) -> Result<DatasetSummary, DatasetError> {
    if objects.is_empty() {
        return Err(DatasetError::Empty);
    }
    let crops = out_dir.join("crops");
    fs::create_dir_all(&crops).map_err(|e| io_err(&crops, e))?;
    let ids: Vec<u32> = objects.iter().map(|o| o.id).collect();
    let (train, test) = split_objects(&ids, opts.train_fraction, opts.seed);
    let per_object: Vec<Vec<Sample>> = objects
        .par_iter()
        .map(|o| {
            let split = if train.binary_search(&o.id).is_ok() {
                Split::Train
            } else {
                Split::Test
            };
            (0..opts.rotations)
                .flat_map(|r| samples_for(o, r, opts, split))
                .collect()
        })
        .collect();

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| io_err(&manifest_path, e))?;
    let mut total = 0;
    for samples in &per_object {
        for s in samples {
            let path: PathBuf = out_dir.join(&s.record.crop);
            fs::write(&path, &s.ply).map_err(|e| io_err(&path, e))?;
            let line = serde_json::to_string(&s.record).map_err(|e| io_err(&manifest_path, e))?;
            writeln!(manifest, "{line}").map_err(|e| io_err(&manifest_path, e))?;
            total += 1;
        }
    }
    let summary = DatasetSummary {
        objects: objects.len(),
        rotations: opts.rotations,
        samples: total,
        per_object: objects
            .iter()
            .zip(&per_object)
            .map(|(o, s)| (o.id, s.len()))
            .collect(),
        train_objects: train,
        test_objects: test,
    };
    let summary_path = out_dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary).map_err(|e| io_err(&summary_path, e))?;
    fs::write(&summary_path, text).map_err(|e| io_err(&summary_path, e))?;
    Ok(summary)
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleRecord>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| io_err(path, e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_object_level_and_disjoint() {
        let ids: Vec<u32> = (0..752).collect();
        let (train, test) = split_objects(&ids, 0.7, 3);
        assert_eq!(train.len(), 526);
        assert_eq!(test.len(), 226);
        assert!(train.iter().all(|i| test.binary_search(i).is_err()));
        assert_eq!(split_objects(&ids, 0.7, 3), (train, test));
    }
}
