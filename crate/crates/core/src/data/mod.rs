//! Dataset ingestion and the synthetic generators used for desk-scale
//! experiments. Rasters are square, single-channel, values in `[0, 1]` with
//! white (1.0) background and dark strokes.

mod augment;
mod cloud;
mod folds;
mod synthetic;

pub use augment::{apply_augment, augment, draw_augment, variant_count, AugmentDraw, BACKGROUND};
pub use cloud::{generate_feature_cloud, generate_feature_cloud_with, FeatureCloud};
pub use folds::{make_folds, FoldPlan};
pub use synthetic::{generate_synthetic_sketches, max_synthetic_classes};

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Square single-channel image, row-major, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub side: usize,
    pub pixels: Vec<f64>,
}

impl Raster {
    pub fn new(side: usize, pixels: Vec<f64>) -> Result<Raster> {
        if pixels.len() != side * side {
            return Err(Error::Dimension(format!(
                "raster {side}x{side} expects {} pixels, got {}",
                side * side,
                pixels.len()
            )));
        }
        Ok(Raster { side, pixels })
    }

    pub fn filled(side: usize, value: f64) -> Raster {
        Raster {
            side,
            pixels: vec![value; side * side],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.side + x] = v;
    }

    /// `[1, side, side]` tensor view of the raster.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.side, self.side], self.pixels.clone()).expect("raster tensor")
    }
}

/// One labeled sketch.
#[derive(Debug, Clone)]
pub struct SketchSample {
    pub raster: Raster,
    pub label: usize,
    pub id: String,
}

/// Samples plus the class registry (deterministically ordered by name).
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<SketchSample>,
    pub classes: Vec<String>,
    /// Unreadable files skipped during loading.
    pub skipped: usize,
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes.len()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }
}

/// Load a directory-per-class dataset of PNG/PGM rasters, converting to
/// grayscale and resizing to `side`. Classes are ordered by directory name;
/// unreadable files are skipped with a warning, an empty class is an error.
pub fn load_dataset(root: &Path, side: usize) -> Result<Dataset> {
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Load(format!("no class directories under {}", root.display())));
    }

    let mut samples = Vec::new();
    let mut classes = Vec::new();
    let mut skipped = 0usize;
    for (label, dir) in class_dirs.iter().enumerate() {
        let class_name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut loaded_any = false;
        for file in files {
            match load_raster(&file, side) {
                Ok(raster) => {
                    loaded_any = true;
                    samples.push(SketchSample {
                        raster,
                        label,
                        id: format!("{}/{}", class_name, file.file_name().unwrap().to_string_lossy()),
                    });
                }
                Err(e) => {
                    log::warn!("skipping unreadable {}: {e}", file.display());
                    skipped += 1;
                }
            }
        }
        if !loaded_any {
            return Err(Error::Load(format!("class directory {class_name} holds no readable images")));
        }
        classes.push(class_name);
    }
    Ok(Dataset {
        samples,
        classes,
        skipped,
    })
}

fn load_raster(path: &Path, side: usize) -> Result<Raster> {
    let img = image::open(path).map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    let gray = img.to_luma8();
    let gray = if gray.width() as usize == side && gray.height() as usize == side {
        gray
    } else {
        image::imageops::resize(
            &gray,
            side as u32,
            side as u32,
            image::imageops::FilterType::Triangle,
        )
    };
    let pixels = gray.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
    Raster::new(side, pixels)
}

/// Export a dataset in the same directory-per-class layout as 8-bit PNGs.
pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let mut per_class_index = vec![0usize; dataset.classes.len()];
    for sample in &dataset.samples {
        let class = &dataset.classes[sample.label];
        let dir = root.join(class);
        std::fs::create_dir_all(&dir)?;
        let idx = per_class_index[sample.label];
        per_class_index[sample.label] += 1;
        let path = dir.join(format!("{idx:04}.png"));
        let side = sample.raster.side as u32;
        let bytes: Vec<u8> = sample
            .raster
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = image::GrayImage::from_raw(side, side, bytes)
            .ok_or_else(|| Error::Load("raster does not fit its declared side".into()))?;
        img.save(&path)
            .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raster_checks_pixel_count() {
        assert!(Raster::new(4, vec![0.0; 15]).is_err());
        assert!(Raster::new(4, vec![0.0; 16]).is_ok());
    }

    #[test]
    fn single_class_round_trip() {
        let dir = std::env::temp_dir().join("hiernet-data-test-single");
        let _ = std::fs::remove_dir_all(&dir);
        let mut raster = Raster::filled(32, 1.0);
        for i in 8..24 {
            raster.set(i, 16, 0.0);
        }
        let ds = Dataset {
            samples: vec![SketchSample {
                raster,
                label: 0,
                id: "line/0000".into(),
            }],
            classes: vec!["line".into()],
            skipped: 0,
        };
        save_dataset(&ds, &dir).unwrap();
        let loaded = load_dataset(&dir, 32).unwrap();
        assert_eq!(loaded.classes, vec!["line".to_string()]);
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded.samples[0].raster, ds.samples[0].raster);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn empty_class_directory_names_the_class() {
        let dir = std::env::temp_dir().join("hiernet-data-test-empty");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(dir.join("vacant")).unwrap();
        let err = load_dataset(&dir, 32).unwrap_err();
        match err {
            Error::Load(msg) => assert!(msg.contains("vacant"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
