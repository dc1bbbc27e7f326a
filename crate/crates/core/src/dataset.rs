//! On-disk synthetic datasets.
//!
//! ```text
//! <dir>/manifest.json            counts, seeds, config and its hash
//! <dir>/frame_00000/rig.json     cameras of the frame
//! <dir>/frame_00000/gt.json      scene parameters, root, vertices, joints
//! <dir>/frame_00000/keypoints.json  exact 2D joints per view, input of `fit`
//! <dir>/frame_00000/grid_0.bin   feature grid of view 0
//! <dir>/frame_00000/heat_0.bin   heatmap of view 0
//! ```
//!
//! Grid files: magic `POEMGRID`, then little-endian `u32` version, `u32`
//! stride, `u32` rank, `u64` extents, and the `f64` values in row-major order.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fitting::{project_keypoints, KeypointFile};
use crate::geometry::{Rig, Vec3};
use crate::hand::ToyHand;
use crate::io::{read_json, write_atomic, write_json};
use crate::root_stage::{BackboneConfig, FeatureGrid, Heatmap};
use crate::synth::{derive_seed, make_staged_rig, render_frame, FrameBundle, Handedness, RigOptions, Scene, SceneOptions};
use crate::tensor::Tensor;

pub const GRID_MAGIC: &[u8; 8] = b"POEMGRID";
pub const GRID_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

/// Everything that determines a generated dataset apart from its seed and size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub rig: RigOptions,
    /// Draw a fresh rig for every frame instead of sharing one.
    pub rig_per_frame: bool,
    pub scene: SceneOptions,
    pub backbone: BackboneConfig,
    /// Toy-hand vertex count (query points are this plus 21 joints).
    pub n_vertices: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            rig: RigOptions::default(),
            rig_per_frame: true,
            scene: SceneOptions::default(),
            backbone: BackboneConfig::default(),
            n_vertices: crate::hand::DEFAULT_VERTICES,
        }
    }
}

impl GenConfig {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Seed of the rig used by frame `index`.
    fn rig_seed(&self, seed: u64, index: u64) -> u64 {
        if self.rig_per_frame {
            derive_seed(derive_seed(seed, index), 1)
        } else {
            derive_seed(seed, u64::MAX)
        }
    }

    /// Scene and rendered bundle of frame `index`.
    pub fn frame(&self, hand: &ToyHand, seed: u64, index: u64) -> Result<(Scene, FrameBundle)> {
        // Scenes are drawn in stage coordinates so no camera is privileged.
        let (rig, stage) = make_staged_rig(&self.rig, self.rig_seed(seed, index))?;
        let scene = Scene::sample(&self.scene, &Vec3::zeros(), derive_seed(seed, index)).transformed(&stage);
        let bundle = render_frame(&scene, &rig, hand, &self.backbone)?;
        Ok((scene, bundle))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub id: String,
    pub seed: u64,
    pub n_views: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_frames: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: GenConfig,
    pub frames: Vec<FrameEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub handedness: Handedness,
    pub root: [f64; 3],
    pub theta: Vec<[f64; 3]>,
    pub beta: Vec<f64>,
    pub vertices: Vec<[f64; 3]>,
    pub joints: Vec<[f64; 3]>,
}

pub fn frame_id(index: usize) -> String {
    format!("frame_{index:05}")
}

fn arr(p: &Vec3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

/// Encodes a grid tensor with its stride.
pub fn encode_grid(t: &Tensor, stride: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 8 * t.rank() + 8 * t.numel());
    out.extend(GRID_MAGIC);
    out.extend(GRID_VERSION.to_le_bytes());
    out.extend((stride as u32).to_le_bytes());
    out.extend((t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend((e as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend(v.to_le_bytes());
    }
    out
}

/// Decodes a grid file; `path` only labels errors.
pub fn decode_grid(bytes: &[u8], path: &Path) -> Result<(Tensor, usize)> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated grid file"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != GRID_MAGIC {
        return Err(bad("not a grid file"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != GRID_VERSION {
        return Err(bad(&format!("unsupported grid version {version}")));
    }
    let stride = u32_at(take(4)?) as usize;
    let rank = u32_at(take(4)?) as usize;
    if rank > 8 {
        return Err(bad("implausible grid rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
    }
    let n: usize = shape.iter().product();
    let body = take(n.checked_mul(8).ok_or_else(|| bad("grid too large"))?)?;
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if pos != bytes.len() {
        return Err(bad("trailing bytes after grid data"));
    }
    Ok((Tensor::new(&shape, data)?, stride))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Writes one frame directory.
pub fn write_frame(dir: &Path, scene: Option<&Scene>, frame: &FrameBundle) -> Result<()> {
    frame.rig.save(&dir.join("rig.json"))?;
    let gt = GroundTruthFile {
        handedness: frame.handedness,
        root: arr(&frame.gt_root),
        theta: scene.map(|s| s.theta.clone()).unwrap_or_default(),
        beta: scene.map(|s| s.beta.clone()).unwrap_or_default(),
        vertices: frame.gt_vertices().iter().map(arr).collect(),
        joints: frame.gt_joints().iter().map(arr).collect(),
    };
    write_json(&dir.join("gt.json"), &gt)?;
    let keypoints = KeypointFile {
        views: project_keypoints(frame.gt_joints(), &frame.rig),
    };
    write_json(&dir.join("keypoints.json"), &keypoints)?;
    for (i, (f, h)) in frame.features.iter().zip(&frame.heatmaps).enumerate() {
        write_atomic(&dir.join(format!("grid_{i}.bin")), &encode_grid(&f.grid, f.stride))?;
        write_atomic(&dir.join(format!("heat_{i}.bin")), &encode_grid(&h.grid, h.stride))?;
    }
    Ok(())
}

/// Reads one frame directory.
pub fn read_frame(dir: &Path) -> Result<FrameBundle> {
    let rig = Rig::load(&dir.join("rig.json"))?;
    let gt: GroundTruthFile = read_json(&dir.join("gt.json"))?;
    let mut features = Vec::with_capacity(rig.len());
    let mut heatmaps = Vec::with_capacity(rig.len());
    for i in 0..rig.len() {
        let gp = dir.join(format!("grid_{i}.bin"));
        let (grid, stride) = decode_grid(&read_bytes(&gp)?, &gp)?;
        if grid.rank() != 3 || stride == 0 {
            return Err(Error::Format {
                path: gp,
                reason: format!("feature grid must be 3-D with positive stride, got {:?} / {stride}", grid.shape()),
            });
        }
        features.push(FeatureGrid { grid, stride });
        let hp = dir.join(format!("heat_{i}.bin"));
        let (grid, stride) = decode_grid(&read_bytes(&hp)?, &hp)?;
        heatmaps.push(Heatmap::new(grid, stride).map_err(|e| Error::Format {
            path: hp,
            reason: e.to_string(),
        })?);
    }
    let gt_points = gt.vertices.iter().chain(&gt.joints).map(|&p| Vec3::from(p)).collect();
    Ok(FrameBundle {
        rig,
        features,
        heatmaps,
        gt_points,
        gt_root: Vec3::from(gt.root),
        handedness: gt.handedness,
    })
}

/// Generates `n_frames` frames into `out`. The dataset is assembled in a
/// sibling temporary directory and renamed into place, so a failure leaves
/// `out` untouched. An existing dataset at `out` is replaced; any other
/// non-empty directory is refused.
pub fn write_dataset(out: &Path, config: &GenConfig, n_frames: usize, seed: u64) -> Result<Manifest> {
    if out.exists() {
        let mut entries = std::fs::read_dir(out).map_err(|e| Error::io(format!("listing {}", out.display()), e))?;
        if entries.next().is_some() && !out.join(MANIFEST).exists() {
            return Err(Error::InvalidInput(format!(
                "{} exists and is not a dataset; refusing to overwrite",
                out.display()
            )));
        }
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    let staging = tempfile::Builder::new()
        .prefix(".poemkit-gen-")
        .tempdir_in(&parent)
        .map_err(|e| Error::io(format!("creating staging directory in {}", parent.display()), e))?;
    let hand = ToyHand::new(config.n_vertices)?;
    let frames: Vec<FrameEntry> = (0..n_frames)
        .into_par_iter()
        .map(|i| {
            let (scene, bundle) = config.frame(&hand, seed, i as u64)?;
            let id = frame_id(i);
            let dir = staging.path().join(&id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            write_frame(&dir, Some(&scene), &bundle)?;
            Ok(FrameEntry {
                id,
                seed: scene.seed,
                n_views: bundle.n_views(),
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest {
        n_frames,
        seed,
        config_hash: config.hash(),
        config: config.clone(),
        frames,
    };
    write_json(&staging.path().join(MANIFEST), &manifest)?;
    if out.exists() {
        std::fs::remove_dir_all(out).map_err(|e| Error::io(format!("replacing {}", out.display()), e))?;
    }
    let staged = staging.keep();
    std::fs::rename(&staged, out).map_err(|e| Error::io(format!("moving dataset into {}", out.display()), e))?;
    Ok(manifest)
}

/// A loaded dataset: manifest plus every frame in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub frames: Vec<FrameBundle>,
}

impl Dataset {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.manifest.frames.iter().map(|f| f.id.as_str())
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::io(
            format!("reading {}", path.display()),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no dataset manifest"),
        ));
    }
    let m: Manifest = read_json(&path)?;
    if m.frames.len() != m.n_frames {
        return Err(Error::Format {
            path,
            reason: format!("manifest lists {} frames but n_frames is {}", m.frames.len(), m.n_frames),
        });
    }
    Ok(m)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let frames = manifest
        .frames
        .par_iter()
        .map(|f| read_frame(&dir.join(&f.id)))
        .collect::<Result<_>>()?;
    Ok(Dataset { manifest, frames })
}
