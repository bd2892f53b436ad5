//! Dataset generation and persistence.
//!
//! On-disk layout (all paths relative to the dataset root):
//!
//! ```text
//! manifest.toml            versioned manifest (camera, counts, seed, sigma)
//! train/NNNNNN.img.tns     f64 [H, W] image in [0, 1]   (tensorfile format)
//! train/NNNNNN.mask.tns    u8  [H, W] binary mask
//! train/NNNNNN.meta.toml   pose, keypoints, box, visibility, checksums
//! val/..., test/...        same layout per split
//! ```
//!
//! Splits are 70/20/10 with the train split absorbing the rounding
//! remainder. Every sample is generated from its own rng seeded with
//! `dataset_seed XOR sample_index`, so regeneration is bit-reproducible and
//! order-independent. Heatmaps are not stored; they are re-encoded from the
//! keypoints at training time with the manifest's `heatmap_sigma_px`.

use crate::geometry::{CameraModel, Pose, Quat};
use crate::heatmap;
use crate::losses::BBox;
use crate::model::{build_target_model, KEYPOINT_COUNT};
use crate::render::{render, sample_pose, RenderError, SampleRecord};
use crate::tensorfile;
use nalgebra::{Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_VERSION: u32 = 1;
pub const META_VERSION: u32 = 1;
pub const MODEL_NAME: &str = "standin-sat-v1";
const RENDER_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest parse error: {0}")]
    ManifestParse(String),
    #[error("unsupported manifest version {0}")]
    Version(u32),
    #[error("manifest declares {0} keypoints; this workbench requires {KEYPOINT_COUNT}")]
    KeypointCount(usize),
    #[error("dataset needs at least 10 samples for non-empty splits, got {0}")]
    TooSmall(usize),
    #[error("output directory {0} already exists and is not empty")]
    OutputNotEmpty(PathBuf),
    #[error("sample {sample}: {reason}")]
    Corrupt { sample: String, reason: String },
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 70/20/10 split; `val` and `test` round down, train takes the rest.
    pub fn for_total(n: usize) -> Result<Self, DatasetError> {
        if n < 10 {
            return Err(DatasetError::TooSmall(n));
        }
        let val = n * 2 / 10;
        let test = n / 10;
        Ok(Self { train: n - val - test, val, test })
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Paper-reported optics, stored for reference only; the effective focal
/// length in pixels is always derived from the field of view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraReference {
    pub focal_mm: f64,
    pub pixel_pitch_um: f64,
    pub fov_deg: f64,
}

impl Default for CameraReference {
    fn default() -> Self {
        Self { focal_mm: 39.47, pixel_pitch_um: 5.86, fov_deg: 35.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub image_size: u32,
    pub keypoint_count: usize,
    pub model_name: String,
    pub heatmap_sigma_px: f64,
    pub distance_min_m: f64,
    pub distance_max_m: f64,
    pub camera: CameraModel,
    pub camera_reference: CameraReference,
    pub counts: SplitCounts,
    pub split_dirs: SplitDirs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDirs {
    pub train: String,
    pub val: String,
    pub test: String,
}

impl Default for SplitDirs {
    fn default() -> Self {
        Self { train: "train".into(), val: "val".into(), test: "test".into() }
    }
}

impl SplitDirs {
    fn get(&self, split: Split) -> &str {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

impl DatasetManifest {
    pub fn from_toml_str(text: &str) -> Result<Self, DatasetError> {
        let manifest: DatasetManifest =
            toml::from_str(text).map_err(|e| DatasetError::ManifestParse(e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(DatasetError::Version(manifest.version));
        }
        if manifest.keypoint_count != KEYPOINT_COUNT {
            return Err(DatasetError::KeypointCount(manifest.keypoint_count));
        }
        Ok(manifest)
    }
}

/// Per-sample metadata record stored beside the tensor files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub version: u32,
    /// Scalar-first unit quaternion (w, x, y, z).
    pub pose_q: [f64; 4],
    pub pose_t: [f64; 3],
    pub bbox: BBox,
    pub keypoints_px: Vec<[f64; 2]>,
    pub visibility: Vec<bool>,
    pub image_sha256: String,
    pub mask_sha256: String,
}

impl SampleMeta {
    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }
}

#[derive(Debug, Clone)]
pub struct GenerateConfig {
    pub out_dir: PathBuf,
    pub total: usize,
    pub seed: u64,
    pub image_size: u32,
    pub distance_min_m: f64,
    pub distance_max_m: f64,
    pub fov_deg: f64,
}

impl GenerateConfig {
    pub fn new(out_dir: impl Into<PathBuf>, total: usize, seed: u64, image_size: u32) -> Self {
        Self {
            out_dir: out_dir.into(),
            total,
            seed,
            image_size,
            distance_min_m: 1.0,
            distance_max_m: 25.0,
            fov_deg: 35.0,
        }
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))?;
    Ok(())
}

/// Generate one sample from its dedicated rng, retrying degenerate draws.
fn generate_sample(
    camera: &CameraModel,
    config: &GenerateConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampleRecord, DatasetError> {
    let model = build_target_model();
    for _ in 0..RENDER_ATTEMPTS {
        let pose = sample_pose(rng, config.distance_min_m, config.distance_max_m, camera)?;
        match render(camera, &pose, &model, rng) {
            Ok(record) => return Ok(record),
            Err(RenderError::DegenerateSample) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(RenderError::PoseRejection(RENDER_ATTEMPTS).into())
}

/// Generate the dataset on disk. The output directory must be empty or
/// absent; on failure all partial output is removed.
pub fn generate_dataset(config: &GenerateConfig) -> Result<DatasetManifest, DatasetError> {
    let out = &config.out_dir;
    if out.exists() {
        let non_empty =
            fs::read_dir(out).map_err(io_err(out))?.next().is_some();
        if non_empty {
            return Err(DatasetError::OutputNotEmpty(out.clone()));
        }
    }
    match generate_into(config) {
        Ok(manifest) => Ok(manifest),
        Err(e) => {
            let _ = fs::remove_dir_all(out);
            Err(e)
        }
    }
}

fn generate_into(config: &GenerateConfig) -> Result<DatasetManifest, DatasetError> {
    let counts = SplitCounts::for_total(config.total)?;
    let camera = CameraModel::from_fov(config.image_size, config.image_size, config.fov_deg)?;
    let split_dirs = SplitDirs::default();
    for split in Split::ALL {
        let dir = config.out_dir.join(split_dirs.get(split));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }

    let mut produced = SplitCounts { train: 0, val: 0, test: 0 };
    for index in 0..config.total {
        let (split, local) = if index < counts.train {
            (Split::Train, index)
        } else if index < counts.train + counts.val {
            (Split::Val, index - counts.train)
        } else {
            (Split::Test, index - counts.train - counts.val)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ index as u64);
        let record = generate_sample(&camera, config, &mut rng)?;
        write_sample(&config.out_dir, &split_dirs, split, local, &record)?;
        match split {
            Split::Train => produced.train += 1,
            Split::Val => produced.val += 1,
            Split::Test => produced.test += 1,
        }
    }
    debug_assert_eq!(produced, counts);

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed: config.seed,
        image_size: config.image_size,
        keypoint_count: KEYPOINT_COUNT,
        model_name: MODEL_NAME.to_string(),
        heatmap_sigma_px: heatmap::sigma_for_size(config.image_size),
        distance_min_m: config.distance_min_m,
        distance_max_m: config.distance_max_m,
        camera,
        camera_reference: CameraReference::default(),
        counts,
        split_dirs,
    };
    let text = toml::to_string_pretty(&manifest)
        .map_err(|e| DatasetError::ManifestParse(e.to_string()))?;
    write_file(&config.out_dir.join("manifest.toml"), text.as_bytes())?;
    Ok(manifest)
}

fn sample_stem(local: usize) -> String {
    format!("{local:06}")
}

fn write_sample(
    root: &Path,
    dirs: &SplitDirs,
    split: Split,
    local: usize,
    record: &SampleRecord,
) -> Result<(), DatasetError> {
    let dir = root.join(dirs.get(split));
    let stem = sample_stem(local);
    let img_bytes = tensorfile::encode_f64(&[record.height, record.width], &record.image);
    let mask_bytes = tensorfile::encode_u8(&[record.height, record.width], &record.mask);
    let meta = SampleMeta {
        version: META_VERSION,
        pose_q: record.pose.quat().to_array(),
        pose_t: [
            record.pose.translation().x,
            record.pose.translation().y,
            record.pose.translation().z,
        ],
        bbox: record.bbox,
        keypoints_px: record.keypoints_px.iter().map(|p| [p.x, p.y]).collect(),
        visibility: record.visibility.clone(),
        image_sha256: sha256_hex(&img_bytes),
        mask_sha256: sha256_hex(&mask_bytes),
    };
    let meta_text = toml::to_string_pretty(&meta)
        .map_err(|e| DatasetError::ManifestParse(e.to_string()))?;
    write_file(&dir.join(format!("{stem}.img.tns")), &img_bytes)?;
    write_file(&dir.join(format!("{stem}.mask.tns")), &mask_bytes)?;
    write_file(&dir.join(format!("{stem}.meta.toml")), meta_text.as_bytes())?;
    Ok(())
}

/// An opened dataset: parsed manifest plus the root directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    root: PathBuf,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, DatasetError> {
        let root = root.into();
        let path = root.join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest = DatasetManifest::from_toml_str(&text)?;
        Ok(Self { manifest, root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Load and fully validate one split. Any checksum, shape or invariant
    /// failure is reported with the offending sample's path stem.
    pub fn load_split(&self, split: Split) -> Result<Vec<SampleRecord>, DatasetError> {
        let count = self.manifest.counts.get(split);
        let dir = self.root.join(self.manifest.split_dirs.get(split));
        let size = self.manifest.image_size as usize;
        let mut records = Vec::with_capacity(count);
        for local in 0..count {
            let stem = sample_stem(local);
            let sample_name = format!("{}/{stem}", split.dir_name());
            let corrupt = |reason: String| DatasetError::Corrupt {
                sample: sample_name.clone(),
                reason,
            };

            let img_path = dir.join(format!("{stem}.img.tns"));
            let img_bytes = fs::read(&img_path).map_err(io_err(&img_path))?;
            let mask_path = dir.join(format!("{stem}.mask.tns"));
            let mask_bytes = fs::read(&mask_path).map_err(io_err(&mask_path))?;
            let meta_path = dir.join(format!("{stem}.meta.toml"));
            let meta_text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
            let meta: SampleMeta =
                SampleMeta::from_toml_str(&meta_text).map_err(|e| corrupt(e.to_string()))?;
            if meta.version != META_VERSION {
                return Err(corrupt(format!("unsupported meta version {}", meta.version)));
            }
            if sha256_hex(&img_bytes) != meta.image_sha256 {
                return Err(corrupt("image checksum mismatch".into()));
            }
            if sha256_hex(&mask_bytes) != meta.mask_sha256 {
                return Err(corrupt("mask checksum mismatch".into()));
            }

            let img = tensorfile::decode(&img_bytes).map_err(|e| corrupt(e.to_string()))?;
            let mask = tensorfile::decode(&mask_bytes).map_err(|e| corrupt(e.to_string()))?;
            if img.shape != [size, size] {
                return Err(corrupt(format!("image shape {:?}, expected [{size}, {size}]", img.shape)));
            }
            if mask.shape != [size, size] {
                return Err(corrupt(format!("mask shape {:?}, expected [{size}, {size}]", mask.shape)));
            }
            let image = img
                .as_f64()
                .ok_or_else(|| corrupt("image dtype is not f64".into()))?
                .to_vec();
            let mask = mask
                .as_u8()
                .ok_or_else(|| corrupt("mask dtype is not u8".into()))?
                .to_vec();
            if meta.keypoints_px.len() != KEYPOINT_COUNT {
                return Err(corrupt(format!("{} keypoints in metadata", meta.keypoints_px.len())));
            }

            let pose = Pose::new(
                Quat::from_array(meta.pose_q),
                Vector3::new(meta.pose_t[0], meta.pose_t[1], meta.pose_t[2]),
            )
            .map_err(|e| corrupt(e.to_string()))?;
            let record = SampleRecord {
                width: size,
                height: size,
                image,
                mask,
                pose,
                keypoints_px: meta
                    .keypoints_px
                    .iter()
                    .map(|p| Vector2::new(p[0], p[1]))
                    .collect(),
                visibility: meta.visibility.clone(),
                bbox: meta.bbox,
            };
            record.validate().map_err(|e| corrupt(e.to_string()))?;
            records.push(record);
        }
        Ok(records)
    }
}
