//! Synthetic lesion images with controllable tone and diagnosis signals.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;
use tonescope_core::records::{Diagnosis, Fst, ImageRecord, Tone};

use crate::metadata::{save_metadata, MetadataError, METADATA_FILE};

/// Added to every channel of light-tone images under [`ToneSignal::BrightnessShift`].
pub const BRIGHTNESS_SHIFT: f64 = 40.0;
const SKIN: [f64; 3] = [170.0, 125.0, 105.0];
const MOLE: [f64; 3] = [120.0, 80.0, 60.0];
const BLOB: [f64; 3] = [20.0, 10.0, 15.0];
const NOISE: f64 = 12.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellCounts {
    pub benign_light: usize,
    pub benign_dark: usize,
    pub malignant_light: usize,
    pub malignant_dark: usize,
}

impl CellCounts {
    pub fn uniform(n: usize) -> Self {
        Self {
            benign_light: n,
            benign_dark: n,
            malignant_light: n,
            malignant_dark: n,
        }
    }

    pub fn total(&self) -> usize {
        self.benign_light + self.benign_dark + self.malignant_light + self.malignant_dark
    }

    fn cells(&self) -> [(Diagnosis, Tone, usize); 4] {
        [
            (Diagnosis::Benign, Tone::Light, self.benign_light),
            (Diagnosis::Benign, Tone::Dark, self.benign_dark),
            (Diagnosis::Malignant, Tone::Light, self.malignant_light),
            (Diagnosis::Malignant, Tone::Dark, self.malignant_dark),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToneSignal {
    None,
    BrightnessShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagnosisSignal {
    None,
    /// High-contrast disc on every malignant image.
    Blob,
    /// Disc on light-tone malignant images only.
    BlobLightOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureSpec {
    pub counts: CellCounts,
    pub tone_signal: ToneSignal,
    pub diagnosis_signal: DiagnosisSignal,
    pub side: u32,
    pub seed: u64,
}

impl FixtureSpec {
    /// 400 images where only light-tone malignancy is visible.
    pub fn biased(seed: u64) -> Self {
        Self {
            counts: CellCounts {
                benign_light: 100,
                benign_dark: 140,
                malignant_light: 100,
                malignant_dark: 60,
            },
            tone_signal: ToneSignal::BrightnessShift,
            diagnosis_signal: DiagnosisSignal::BlobLightOnly,
            side: 64,
            seed,
        }
    }

    /// 400 images, 100 per cell, malignancy visible on both tones.
    pub fn unbiased(seed: u64) -> Self {
        Self {
            counts: CellCounts::uniform(100),
            tone_signal: ToneSignal::None,
            diagnosis_signal: DiagnosisSignal::Blob,
            side: 64,
            seed,
        }
    }
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot encode {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Metadata(#[from] MetadataError),
}

fn disc(img: &mut RgbImage, cx: f64, cy: f64, r: f64, color: [f64; 3], rng: &mut ChaCha8Rng) {
    let (w, h) = img.dimensions();
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                let px = img.get_pixel_mut(x, y);
                for c in 0..3 {
                    px[c] = (color[c] + rng.gen_range(-NOISE..NOISE)).clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
}

/// One image. Everything except the two signals is drawn identically for
/// every cell.
pub fn render(
    spec: &FixtureSpec,
    diagnosis: Diagnosis,
    tone: Tone,
    rng: &mut ChaCha8Rng,
) -> RgbImage {
    let side = spec.side.max(1);
    let s = f64::from(side);
    let shift = match (spec.tone_signal, tone) {
        (ToneSignal::BrightnessShift, Tone::Light) => BRIGHTNESS_SHIFT,
        _ => 0.0,
    };
    let jitter: f64 = rng.gen_range(-10.0..10.0);
    let mut img = RgbImage::from_fn(side, side, |_, _| {
        Rgb(core::array::from_fn(|c| {
            (SKIN[c] + shift + jitter + rng.gen_range(-NOISE..NOISE)).clamp(0.0, 255.0) as u8
        }))
    });

    // A benign-looking mole on every image.
    let r = rng.gen_range(0.12..0.22) * s;
    let (cx, cy) = (rng.gen_range(r..s - r), rng.gen_range(r..s - r));
    let mole = MOLE.map(|v| v + shift);
    disc(&mut img, cx, cy, r, mole, rng);

    let blob = match spec.diagnosis_signal {
        DiagnosisSignal::None => false,
        DiagnosisSignal::Blob => diagnosis == Diagnosis::Malignant,
        DiagnosisSignal::BlobLightOnly => diagnosis == Diagnosis::Malignant && tone == Tone::Light,
    };
    if blob {
        let r = 0.12 * s;
        let (bx, by) = (rng.gen_range(r..s - r), rng.gen_range(r..s - r));
        disc(&mut img, bx, by, r, BLOB, rng);
    }
    img
}

fn fst_for(tone: Tone, i: usize) -> Fst {
    match (tone, i % 2) {
        (Tone::Light, 0) => Fst::I,
        (Tone::Light, _) => Fst::II,
        (Tone::Dark, 0) => Fst::III,
        (Tone::Dark, _) => Fst::IV,
    }
}

/// Records for `spec` without rendering anything.
pub fn fixture_records(spec: &FixtureSpec) -> Vec<ImageRecord> {
    let mut out = Vec::with_capacity(spec.counts.total());
    for (diagnosis, tone, n) in spec.counts.cells() {
        for i in 0..n {
            let id = format!("fx_{:05}", out.len());
            let path = format!("images/{id}.png");
            out.push(ImageRecord::new(id, diagnosis, fst_for(tone, i), path));
        }
    }
    out
}

/// Rendered image for the `index`-th record of `spec`.
pub fn render_record(spec: &FixtureSpec, record: &ImageRecord, index: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let tone = record.tone().expect("fixture records carry a tone");
    render(spec, record.diagnosis, tone, &mut rng)
}

/// Writes `images/*.png` and `metadata.csv` under `dir`.
pub fn generate_fixture(dir: &Path, spec: &FixtureSpec) -> Result<Vec<ImageRecord>, FixtureError> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|source| FixtureError::Io {
        path: images.clone(),
        source,
    })?;
    let records = fixture_records(spec);
    for (i, r) in records.iter().enumerate() {
        let path = dir.join(&r.image_path);
        render_record(spec, r, i)
            .save(&path)
            .map_err(|source| FixtureError::Encode { path, source })?;
    }
    save_metadata(&dir.join(METADATA_FILE), &records)?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(img: &RgbImage) -> f64 {
        img.as_raw().iter().map(|&v| f64::from(v)).sum::<f64>() / img.as_raw().len() as f64
    }

    #[test]
    fn brightness_shift_lifts_light_images() {
        let spec = FixtureSpec {
            diagnosis_signal: DiagnosisSignal::None,
            ..FixtureSpec::biased(1)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let light: f64 = (0..20)
            .map(|_| mean(&render(&spec, Diagnosis::Benign, Tone::Light, &mut rng)))
            .sum();
        let dark: f64 = (0..20)
            .map(|_| mean(&render(&spec, Diagnosis::Benign, Tone::Dark, &mut rng)))
            .sum();
        assert!(light / 20.0 - dark / 20.0 > 30.0);
    }

    #[test]
    fn blob_darkens_malignant_images() {
        let spec = FixtureSpec::unbiased(2);
        let img = render(
            &spec,
            Diagnosis::Malignant,
            Tone::Dark,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        let darkest = img.pixels().filter(|p| p[0] < 50).count();
        assert!(darkest > 20, "{darkest}");
        let light_only = FixtureSpec::biased(2);
        let img = render(
            &light_only,
            Diagnosis::Malignant,
            Tone::Dark,
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        assert_eq!(img.pixels().filter(|p| p[0] < 50).count(), 0);
    }

    #[test]
    fn records_follow_cell_counts() {
        let spec = FixtureSpec::biased(0);
        let rs = fixture_records(&spec);
        let s = tonescope_core::records::summarize(&rs).unwrap();
        assert_eq!(
            (
                s.benign_light,
                s.benign_dark,
                s.malignant_light,
                s.malignant_dark
            ),
            (100, 140, 100, 60)
        );
    }

    #[test]
    fn rendering_is_deterministic_per_seed() {
        let spec = FixtureSpec::unbiased(9);
        let rs = fixture_records(&spec);
        assert_eq!(
            render_record(&spec, &rs[5], 5),
            render_record(&spec, &rs[5], 5)
        );
        let other = FixtureSpec { seed: 10, ..spec };
        assert_ne!(
            render_record(&spec, &rs[5], 5),
            render_record(&other, &rs[5], 5)
        );
    }
}
