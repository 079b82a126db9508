//! Class-wise blending of real and generated RGB-D images for data
//! augmentation.
//!
//! For each sample a random subset of the classes present in its label map
//! is chosen; pixels of those classes are copied from the generated pair,
//! everything else stays real. Annotations are left untouched.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    sample_noise, write_depth, write_label, write_rgb, DatasetIndex, DepthMap, LabelMap, RgbImage, VOID,
};
use crate::error::{contract, Error, Result};
use crate::generator::{GeneratedPair, Generator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Depth,
    Rgb,
    Rgbd,
}

impl Modality {
    pub fn mixes_rgb(self) -> bool {
        matches!(self, Modality::Rgb | Modality::Rgbd)
    }

    pub fn mixes_depth(self) -> bool {
        matches!(self, Modality::Depth | Modality::Rgbd)
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "depth" => Ok(Modality::Depth),
            "rgb" => Ok(Modality::Rgb),
            "rgbd" => Ok(Modality::Rgbd),
            other => Err(Error::Config(format!("unknown modality `{other}` (rgb, depth, rgbd)"))),
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Depth => "depth",
            Modality::Rgb => "rgb",
            Modality::Rgbd => "rgbd",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    /// Fraction of the present classes to replace.
    pub ratio: f64,
    pub modality: Modality,
    pub seed: u64,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("mix ratio {} outside [0, 1]", self.ratio)));
        }
        Ok(())
    }
}

/// Number of classes replaced out of `present`.
pub fn classes_to_replace(ratio: f64, present: usize) -> usize {
    let k = (ratio * present as f64).round() as usize;
    if ratio > 0.0 && present > 0 {
        k.clamp(1, present)
    } else {
        k.min(present)
    }
}

/// Picks the replaced classes for one label map, in ascending order.
pub fn choose_classes<R: Rng>(label: &LabelMap, ratio: f64, rng: &mut R) -> Vec<u8> {
    let present = label.present_classes();
    let k = classes_to_replace(ratio, present.len());
    let mut chosen: Vec<u8> = present.choose_multiple(rng, k).copied().collect();
    chosen.sort_unstable();
    chosen
}

#[derive(Debug, Clone)]
pub struct MixedSample {
    pub rgb: RgbImage,
    pub depth: DepthMap,
    pub label: LabelMap,
    pub chosen: Vec<u8>,
}

/// Replaces the pixels of `chosen` classes with generated content in the
/// selected modalities.
pub fn mix_with_classes(
    real_rgb: &RgbImage,
    real_depth: &DepthMap,
    generated: &GeneratedPair,
    label: &LabelMap,
    modality: Modality,
    chosen: &[u8],
) -> Result<MixedSample> {
    let size = (label.height(), label.width());
    for (what, s) in [
        ("real rgb", (real_rgb.height(), real_rgb.width())),
        ("real depth", (real_depth.height(), real_depth.width())),
        ("generated rgb", (generated.rgb.height(), generated.rgb.width())),
        ("generated depth", (generated.depth.height(), generated.depth.width())),
    ] {
        if s != size {
            contract!("{what} is {}x{}, label map is {}x{}", s.0, s.1, size.0, size.1);
        }
    }
    if chosen.contains(&VOID) {
        contract!("VOID cannot be replaced");
    }
    let selected: BTreeSet<u8> = chosen.iter().copied().collect();
    let plane = size.0 * size.1;
    let mut rgb = real_rgb.clone();
    let mut depth = real_depth.clone();
    for (i, c) in label.classes().iter().enumerate() {
        if !selected.contains(c) {
            continue;
        }
        if modality.mixes_rgb() {
            for ch in 0..3 {
                rgb.data_mut()[ch * plane + i] = generated.rgb.data()[ch * plane + i];
            }
        }
        if modality.mixes_depth() {
            depth.set(i, generated.depth.values()[i], true);
        }
    }
    Ok(MixedSample {
        rgb,
        depth,
        label: label.clone(),
        chosen: chosen.to_vec(),
    })
}

pub fn mix_sample<R: Rng>(
    real: (&RgbImage, &DepthMap),
    generated: &GeneratedPair,
    label: &LabelMap,
    spec: &MixSpec,
    rng: &mut R,
) -> Result<MixedSample> {
    spec.validate()?;
    let chosen = choose_classes(label, spec.ratio, rng);
    mix_with_classes(real.0, real.1, generated, label, spec.modality, &chosen)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub present: Vec<u8>,
    pub chosen: Vec<u8>,
    /// Stream of the per-sample generator seeded with the run seed.
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixFailure {
    pub name: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixManifest {
    pub seed: u64,
    pub ratio: f64,
    pub modality: Modality,
    pub samples: Vec<ManifestEntry>,
    pub failures: Vec<MixFailure>,
}

/// Generates, mixes and writes every sample of `index` under `out_root` in
/// the usual `rgb/`, `depth/`, `label/` layout, plus `manifest.json`.
///
/// Each sample draws its noise and class choice from its own stream, so
/// results do not depend on which other samples succeed.
pub fn mix_dataset(
    index: &DatasetIndex,
    generator: &Generator,
    spec: &MixSpec,
    max_depth_m: f32,
    out_root: &Path,
) -> Result<MixManifest> {
    spec.validate()?;
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let size = generator.config().image_size;
    let mut manifest = MixManifest {
        seed: spec.seed,
        ratio: spec.ratio,
        modality: spec.modality,
        samples: Vec::with_capacity(index.len()),
        failures: Vec::new(),
    };
    for (i, paths) in index.samples().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        let result = (|| -> Result<ManifestEntry> {
            let sample = index.load(i, size, max_depth_m)?;
            let noise = sample_noise(
                &mut rng,
                generator.config().noise_channels,
                size.0,
                size.1,
                generator.dtype(),
                generator.device(),
            )?;
            let generated = generator.generate(&sample.label, &noise, max_depth_m)?;
            let mixed = mix_sample((&sample.rgb, &sample.depth), &generated, &sample.label, spec, &mut rng)?;
            let file = format!("{}.png", paths.name);
            write_rgb(&out_root.join("rgb").join(&file), &mixed.rgb)?;
            write_depth(&out_root.join("depth").join(&file), &mixed.depth)?;
            write_label(&out_root.join("label").join(&file), &mixed.label)?;
            Ok(ManifestEntry {
                name: paths.name.clone(),
                present: sample.label.present_classes(),
                chosen: mixed.chosen,
                stream: i as u64,
            })
        })();
        match result {
            Ok(entry) => manifest.samples.push(entry),
            Err(e) => {
                log::warn!("skipping {}: {e}", paths.name);
                manifest.failures.push(MixFailure {
                    name: paths.name.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    let path = out_root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_rule() {
        assert_eq!(classes_to_replace(0.0, 5), 0);
        assert_eq!(classes_to_replace(0.01, 5), 1);
        assert_eq!(classes_to_replace(0.7, 10), 7);
        assert_eq!(classes_to_replace(0.5, 3), 2);
        assert_eq!(classes_to_replace(1.0, 4), 4);
        assert_eq!(classes_to_replace(0.5, 0), 0);
    }

    #[test]
    fn modality_parsing() {
        assert_eq!("RGB".parse::<Modality>().unwrap(), Modality::Rgb);
        assert_eq!("rgbd".parse::<Modality>().unwrap(), Modality::Rgbd);
        assert!("ir".parse::<Modality>().is_err());
    }
}
