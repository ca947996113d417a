//! Dataset build and load: voxel files, rendered views and a JSON manifest.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::{render_view, RenderMode};
use super::shapes::{generate_shape, Archetype};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::seed::{derive_seed, Stream};
use crate::voxel::OccupancyGrid;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub path: String,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: String,
    pub archetype: Archetype,
    pub voxel_path: String,
    pub views: Vec<ViewEntry>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub grid_side: usize,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    /// Objects to generate per archetype, in this order.
    pub counts: Vec<(Archetype, usize)>,
    pub grid_side: usize,
    pub image_side: usize,
    pub azimuths_deg: Vec<f64>,
    pub elevation_deg: f64,
    pub mode: RenderMode,
    pub seed: u64,
    /// Fraction of objects labelled `train`, in `(0,1)`.
    pub train_fraction: f64,
}

impl DatasetConfig {
    /// `objects` spread round-robin over all archetypes, with `views` azimuths
    /// evenly spaced over the full circle.
    pub fn balanced(objects: usize, views: usize, seed: u64) -> Self {
        let mut counts: Vec<(Archetype, usize)> = Archetype::ALL.iter().map(|&a| (a, 0)).collect();
        for i in 0..objects {
            counts[i % Archetype::ALL.len()].1 += 1;
        }
        DatasetConfig {
            counts,
            grid_side: 16,
            image_side: 32,
            azimuths_deg: even_azimuths(views),
            elevation_deg: 20.0,
            mode: RenderMode::Depth,
            seed,
            train_fraction: 0.8,
        }
    }

    pub fn object_count(&self) -> usize {
        self.counts.iter().map(|c| c.1).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.object_count() == 0 {
            return Err(Error::Config("dataset needs at least one object".into()));
        }
        if self.grid_side < 8 {
            return Err(Error::Config(format!(
                "grid side must be >= 8, got {}",
                self.grid_side
            )));
        }
        if self.image_side == 0 || self.azimuths_deg.is_empty() {
            return Err(Error::Config(
                "image side and view count must be positive".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0,1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

pub fn even_azimuths(views: usize) -> Vec<f64> {
    (0..views)
        .map(|i| 360.0 * i as f64 / views as f64)
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Generates every object, writes its files under `out`, and writes the
/// manifest last. Output depends only on `config`.
pub fn build_dataset(config: &DatasetConfig, out: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    let total = config.object_count();
    let n_train =
        ((total as f64 * config.train_fraction).round() as usize).clamp(1.min(total), total);
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        config.seed,
        Stream::Data,
        u64::MAX,
    )));
    let mut splits = vec![Split::Test; total];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }

    let archetypes = config
        .counts
        .iter()
        .flat_map(|&(a, c)| std::iter::repeat_n(a, c));
    let mut objects = Vec::with_capacity(total);
    for (i, archetype) in archetypes.enumerate() {
        let id = format!("obj-{i:04}");
        let (_, grid) = generate_shape(
            derive_seed(config.seed, Stream::Data, i as u64),
            archetype,
            config.grid_side,
        )?;
        let voxel_path = format!("voxels/{id}.voxg");
        write_file(&out.join(&voxel_path), &grid.to_bytes())?;
        let mut views = Vec::with_capacity(config.azimuths_deg.len());
        for (vi, &az) in config.azimuths_deg.iter().enumerate() {
            let view = render_view(
                &grid,
                az,
                config.elevation_deg,
                config.image_side,
                config.image_side,
                config.mode,
            )?;
            let path = format!("views/{id}/view-{vi:02}.pgm");
            write_file(&out.join(&path), &view.to_image().to_pgm())?;
            views.push(ViewEntry {
                path,
                azimuth_deg: az,
                elevation_deg: config.elevation_deg,
            });
        }
        objects.push(ObjectEntry {
            id,
            archetype,
            voxel_path,
            views,
            split: splits[i],
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        grid_side: config.grid_side,
        objects,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&out.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedObject {
    pub entry: ObjectEntry,
    pub grid: OccupancyGrid,
    pub views: Vec<GrayImage>,
}

/// A manifest with every referenced file parsed.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub objects: Vec<LoadedObject>,
}

impl Dataset {
    /// Loads from a manifest file or a directory containing `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let manifest_path = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = manifest_path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::format("manifest", &manifest_path, e.to_string()))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(
                "manifest",
                &manifest_path,
                format!("unsupported version {}", manifest.version),
            ));
        }
        let mut objects = Vec::with_capacity(manifest.objects.len());
        for entry in &manifest.objects {
            let grid = OccupancyGrid::read(&root.join(&entry.voxel_path))?;
            if grid.side() != manifest.grid_side {
                return Err(Error::format(
                    "manifest",
                    root.join(&entry.voxel_path),
                    format!(
                        "grid side {} differs from manifest {}",
                        grid.side(),
                        manifest.grid_side
                    ),
                ));
            }
            let views = entry
                .views
                .iter()
                .map(|v| GrayImage::read(&root.join(&v.path)))
                .collect::<Result<Vec<_>>>()?;
            objects.push(LoadedObject {
                entry: entry.clone(),
                grid,
                views,
            });
        }
        Ok(Dataset {
            root,
            manifest,
            objects,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&LoadedObject> {
        self.objects
            .iter()
            .filter(|o| o.entry.split == split)
            .collect()
    }
}
