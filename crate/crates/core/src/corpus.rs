//! Seeded synthetic JPEG corpus: 12 aspect ratios at 3 resolutions, with
//! a workload manifest and region captions for every drawn shape.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{BenchError, ManifestRecord};
use crate::boxcodec::{BBoxN, RegionCaption};
use crate::imgproc::{encode_jpeg, ImageBuffer};

pub const ASPECT_RATIOS: [(u32, u32); 12] =
    [(1, 1), (4, 3), (3, 4), (3, 2), (2, 3), (16, 9), (9, 16), (2, 1), (1, 2), (21, 9), (9, 21), (5, 4)];

/// Pixel areas of the three resolution classes.
pub const AREAS: [u32; 3] = [512 * 512, 768 * 768, 1024 * 1024];

const PROMPTS: [&str; 5] = [
    "Describe this image.",
    "What objects are visible?",
    "Locate every shape in the picture.",
    "Summarize the scene in one sentence.",
    "How many shapes are there?",
];

const COLORS: [(&str, [u8; 3]); 10] = [
    ("red", [220, 40, 40]),
    ("green", [40, 180, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [235, 215, 40]),
    ("purple", [140, 50, 170]),
    ("orange", [245, 140, 30]),
    ("white", [245, 245, 245]),
    ("black", [15, 15, 15]),
    ("gray", [128, 128, 128]),
    ("cyan", [40, 200, 210]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub count: usize,
    pub seed: u64,
    pub quality: u8,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { count: 500, seed: 0x5eed_2024, quality: 90 }
    }
}

/// Size of image `i`: aspect ratio cycles fastest, then resolution.
pub fn image_dims(i: usize) -> (u32, u32) {
    let (a, b) = ASPECT_RATIOS[i % ASPECT_RATIOS.len()];
    let area = f64::from(AREAS[(i / ASPECT_RATIOS.len()) % AREAS.len()]);
    let snap = |v: f64| ((v / 8.0).round() as u32).max(1) * 8;
    (snap((area * f64::from(a) / f64::from(b)).sqrt()), snap((area * f64::from(b) / f64::from(a)).sqrt()))
}

fn mix(a: [u8; 3], b: [u8; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|c| f32::from(a[c]) * (1.0 - t) + f32::from(b[c]) * t)
}

fn noise(x: u32, y: u32, salt: u32) -> f32 {
    let mut h = x.wrapping_mul(0x9e37_79b1) ^ y.wrapping_mul(0x85eb_ca77) ^ salt;
    h ^= h >> 15;
    h = h.wrapping_mul(0x2c1b_3c6d);
    h ^= h >> 12;
    (h & 0xf) as f32 - 7.5
}

/// Draws a gradient background with 3 to 6 colored boxes and ellipses.
pub fn render_image(width: u32, height: u32, rng: &mut impl Rng) -> (ImageBuffer, Vec<RegionCaption>) {
    let top = COLORS[rng.gen_range(0..COLORS.len())].1;
    let bottom = COLORS[rng.gen_range(0..COLORS.len())].1;
    let salt: u32 = rng.gen();
    let (w, h) = (width as usize, height as usize);
    let mut px = vec![0f32; w * h * 3];
    for y in 0..h {
        let row = mix(top, bottom, y as f32 / h as f32);
        for x in 0..w {
            px[(y * w + x) * 3..][..3].copy_from_slice(&row);
        }
    }
    let mut regions = Vec::new();
    for _ in 0..rng.gen_range(3..=6) {
        let (name, color) = COLORS[rng.gen_range(0..COLORS.len())];
        let ellipse = rng.gen_bool(0.5);
        let bw = rng.gen_range(0.08..0.5);
        let bh = rng.gen_range(0.08..0.5);
        let x1: f64 = rng.gen_range(0.0..1.0 - bw);
        let y1: f64 = rng.gen_range(0.0..1.0 - bh);
        let bbox = BBoxN::new(x1, y1, x1 + bw, y1 + bh).expect("box inside the unit square");
        let (px1, py1) = ((x1 * w as f64) as usize, (y1 * h as f64) as usize);
        let (px2, py2) = (((x1 + bw) * w as f64) as usize, ((y1 + bh) * h as f64) as usize);
        let (cx, cy) = ((px1 + px2) as f64 / 2.0, (py1 + py2) as f64 / 2.0);
        let (rx, ry) = ((px2 - px1) as f64 / 2.0, (py2 - py1) as f64 / 2.0);
        for y in py1..py2.min(h) {
            for x in px1..px2.min(w) {
                if ellipse {
                    let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                    if dx * dx + dy * dy > 1.0 {
                        continue;
                    }
                }
                px[(y * w + x) * 3..][..3].copy_from_slice(&color.map(f32::from));
            }
        }
        let shape = if ellipse { "circle" } else { "box" };
        regions.push(RegionCaption { bbox, caption: format!("a {name} {shape}") });
    }
    let data = px
        .chunks_exact(3)
        .enumerate()
        .flat_map(|(i, p)| {
            let n = noise((i % w) as u32, (i / w) as u32, salt);
            [p[0] + n, p[1] + n, p[2] + n].map(|v| v.round().clamp(0.0, 255.0) as u8)
        })
        .collect();
    (ImageBuffer::from_u8(width, height, 3, data).expect("sized buffer"), regions)
}

/// Writes `images/img_NNNN.jpg` and `manifest.jsonl` under `dir` and
/// returns the manifest path. Output is identical for identical specs.
pub fn generate_corpus(dir: &Path, spec: &CorpusSpec) -> Result<PathBuf, BenchError> {
    let io = |e: std::io::Error| BenchError::Data(format!("writing corpus to {}: {e}", dir.display()));
    fs::create_dir_all(dir.join("images")).map_err(io)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path).map_err(io)?;
    for i in 0..spec.count {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(i as u64));
        let (w, h) = image_dims(i);
        let (img, regions) = render_image(w, h, &mut rng);
        let jpeg = encode_jpeg(&img, spec.quality).map_err(|e| BenchError::Data(e.to_string()))?;
        let rel = PathBuf::from(format!("images/img_{i:04}.jpg"));
        fs::write(dir.join(&rel), jpeg).map_err(io)?;
        let rec = ManifestRecord {
            image_path: rel,
            prompt: PROMPTS[i % PROMPTS.len()].to_owned(),
            expected_regions: Some(regions),
        };
        writeln!(manifest, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(io)?;
    }
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::{decode_image, PreprocessConfig};

    #[test]
    fn dims_cover_ratios_and_areas() {
        assert_eq!(image_dims(0), (512, 512));
        assert_eq!(image_dims(24), (1024, 1024));
        let (w, h) = image_dims(7);
        assert!((f64::from(w) / f64::from(h) - 2.0).abs() < 0.05);
        for i in 0..36 {
            let (w, h) = image_dims(i);
            let area = f64::from(w * h);
            let target = f64::from(AREAS[i / 12]);
            assert!((area / target - 1.0).abs() < 0.05, "{i}: {w}x{h}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = CorpusSpec { count: 3, seed: 7, quality: 80 };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = generate_corpus(a.path(), &spec).unwrap();
        let mb = generate_corpus(b.path(), &spec).unwrap();
        assert_eq!(fs::read(&ma).unwrap(), fs::read(&mb).unwrap());
        for i in 0..3 {
            let rel = format!("images/img_{i:04}.jpg");
            let bytes = fs::read(a.path().join(&rel)).unwrap();
            assert_eq!(bytes, fs::read(b.path().join(&rel)).unwrap());
            let img = decode_image(&bytes, &PreprocessConfig::default()).unwrap();
            assert_eq!((img.width(), img.height()), image_dims(i));
        }
    }
}
