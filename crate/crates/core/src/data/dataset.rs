use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::io::{read_image, read_mask, resize_image};
use super::{DatasetSpec, Sample};
use crate::error::{Error, Result};
use crate::labelgen::split_labels_with;

/// Files skipped while indexing a dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub missing_masks: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Indexed dataset with a lazy, optionally cached, per-sample loader.
pub struct Dataset {
    spec: DatasetSpec,
    ids: Vec<String>,
    images: HashMap<String, PathBuf>,
    masks: HashMap<String, PathBuf>,
    report: LoadReport,
    cache: Option<Mutex<HashMap<String, Arc<Sample>>>>,
}

fn png_stems(dir: &Path) -> Result<HashMap<String, PathBuf>> {
    let mut out = HashMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

impl Dataset {
    pub fn open(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let images = png_stems(&spec.image_dir)?;
        let masks = png_stems(&spec.mask_dir)?;
        let mut report = LoadReport::default();
        let mut ids: Vec<String> = Vec::with_capacity(images.len());
        for (stem, path) in &images {
            if masks.contains_key(stem) {
                ids.push(stem.clone());
            } else {
                report.missing_masks.push(path.clone());
            }
        }
        ids.sort();
        report.missing_masks.sort();
        if !report.missing_masks.is_empty() {
            let msg = format!("{}: {} images without masks skipped", spec.name, report.missing_masks.len());
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
        if ids.is_empty() {
            let msg = format!("{}: no samples found in {}", spec.name, spec.image_dir.display());
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
        Ok(Self {
            spec,
            ids,
            images,
            masks,
            report,
            cache: Some(Mutex::new(HashMap::new())),
        })
    }

    /// Disables the in-memory sample cache (large datasets).
    pub fn without_cache(mut self) -> Self {
        self.cache = None;
        self
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn report(&self) -> &LoadReport {
        &self.report
    }

    pub fn load(&self, id: &str) -> Result<Arc<Sample>> {
        if let Some(cache) = &self.cache {
            if let Some(s) = cache.lock().expect("cache poisoned").get(id) {
                return Ok(Arc::clone(s));
            }
        }
        let sample = Arc::new(self.read(id)?);
        if let Some(cache) = &self.cache {
            cache.lock().expect("cache poisoned").insert(id.to_string(), Arc::clone(&sample));
        }
        Ok(sample)
    }

    /// Loads several samples on scoped worker threads; order follows `ids`.
    pub fn load_many(&self, ids: &[String], workers: usize) -> Result<Vec<Arc<Sample>>> {
        let workers = workers.clamp(1, ids.len().max(1));
        if workers == 1 {
            return ids.iter().map(|id| self.load(id)).collect();
        }
        let chunk = ids.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = ids
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|id| self.load(id)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(ids.len());
            for h in handles {
                out.extend(h.join().expect("loader thread panicked")?);
            }
            Ok(out)
        })
    }

    fn read(&self, id: &str) -> Result<Sample> {
        let lookup = |map: &HashMap<String, PathBuf>, kind: &str| {
            map.get(id)
                .cloned()
                .ok_or_else(|| Error::Config(format!("{}: unknown {kind} id {id:?}", self.spec.name)))
        };
        let [h, w] = self.spec.target_size;
        let image = read_image(&lookup(&self.images, "image")?, self.spec.normalization)?;
        let image = if (image.height, image.width) == (h, w) {
            image
        } else {
            resize_image(&image, h, w)
        };
        let mask = read_mask(&lookup(&self.masks, "mask")?)?.resize_nearest(h, w)?;
        let labels = split_labels_with(&mask, self.spec.alpha, self.spec.distance_metric)?;
        Ok(Sample {
            id: id.to_string(),
            image,
            labels,
        })
    }
}
