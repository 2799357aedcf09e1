//! Synthetic ultrasound-like dataset: dark speckle background with one or two
//! bright, soft-edged ellipses and their exact masks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::io::{write_gray, write_mask};
use crate::error::{Error, Result};
use crate::labelgen::BinaryMask;
use crate::network::EncoderSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub size: [usize; 2],
    pub seed: u64,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let m = h.min(w) as f64;
        let ry = rng.random_range(0.10..0.24) * m;
        let rx = rng.random_range(0.10..0.24) * m;
        let r = ry.max(rx) + 2.0;
        let cy = rng.random_range(r..(h as f64 - r).max(r + 1.0));
        let cx = rng.random_range(r..(w as f64 - r).max(r + 1.0));
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        Self {
            cy,
            cx,
            ry,
            rx,
            cos: theta.cos(),
            sin: theta.sin(),
        }
    }

    /// Normalized radius at a pixel centre; <= 1 inside.
    fn radius(&self, y: usize, x: usize) -> f64 {
        let dy = y as f64 - self.cy;
        let dx = x as f64 - self.cx;
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt()
    }
}

fn render(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<(Vec<u8>, BinaryMask)> {
    let count = rng.random_range(1..=2);
    let ellipses: Vec<Ellipse> = (0..count).map(|_| Ellipse::random(rng, h, w)).collect();
    let speckle = Normal::new(0.0, 1.0).expect("unit normal");
    let brightness: Vec<f64> = ellipses.iter().map(|_| rng.random_range(0.55..0.75)).collect();
    let softness = 0.12;

    let mut raw = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            // Rayleigh-distributed speckle from two Gaussian components.
            let a: f64 = speckle.sample(rng);
            let b: f64 = speckle.sample(rng);
            let noise = (a * a + b * b).sqrt() / 1.25;
            let mut lesion = 0.0f64;
            for (e, &br) in ellipses.iter().zip(&brightness) {
                let t = 1.0 / (1.0 + ((e.radius(y, x) - 1.0) / softness * 4.0).exp());
                lesion = lesion.max(br * t);
            }
            let v = 0.12 * noise + lesion * (0.8 + 0.2 * noise);
            raw.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mask = BinaryMask::from_fn(h, w, |y, x| ellipses.iter().any(|e| e.radius(y, x) <= 1.0))?;
    Ok((raw, mask))
}

/// Writes `n` image/mask pairs to `out_dir/images` and `out_dir/masks`.
/// Output is byte-identical for a given `(n, size, seed)`.
pub fn synth_generate(out_dir: &Path, n: usize, size: [usize; 2], seed: u64) -> Result<SynthManifest> {
    let s = EncoderSpec::OUTPUT_STRIDE;
    let [h, w] = size;
    if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Parameter(format!("synthetic size {h}x{w} must be a positive multiple of {s}")));
    }
    let images = out_dir.join("images");
    let masks = out_dir.join("masks");
    for dir in [&images, &masks] {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.as_path(), e))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(n);
    for i in 0..n {
        let id = format!("synth_{i:04}");
        let (raw, mask) = render(&mut rng, h, w)?;
        write_gray(&images.join(format!("{id}.png")), h, w, raw)?;
        write_mask(&masks.join(format!("{id}.png")), &mask)?;
        ids.push(id);
    }
    let manifest = SynthManifest {
        root: out_dir.to_path_buf(),
        ids,
        size,
        seed,
    };
    let path = out_dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::read_mask;
    use crate::labelgen::split_labels;

    #[test]
    fn deterministic_and_nonempty() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = synth_generate(a.path(), 8, [64, 48], 7).unwrap();
        synth_generate(b.path(), 8, [64, 48], 7).unwrap();
        assert_eq!(ma.ids.len(), 8);
        for id in &ma.ids {
            for sub in ["images", "masks"] {
                let fa = fs::read(a.path().join(sub).join(format!("{id}.png"))).unwrap();
                let fb = fs::read(b.path().join(sub).join(format!("{id}.png"))).unwrap();
                assert_eq!(fa, fb);
            }
            let mask = read_mask(&a.path().join("masks").join(format!("{id}.png"))).unwrap();
            assert!(!mask.is_empty());
            split_labels(&mask, 1.0).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn rejects_indivisible_size() {
        let d = tempfile::tempdir().unwrap();
        assert!(synth_generate(d.path(), 1, [60, 64], 0).is_err());
    }
}
