use half::bf16;

use super::{ElemType, ImageBuffer, ImgError, PixelData, PreprocessConfig, TileSet};

#[inline]
fn normalize_value(v: f32, mean: f32, std: f32) -> f32 {
    (v - mean) / std
}

/// Per-channel lookup of `(x/255 − mean_c)/std_c` for every uint8 value.
fn build_lut(cfg: &PreprocessConfig, channels: usize) -> Vec<[f32; 256]> {
    (0..channels)
        .map(|c| {
            let mut lut = [0f32; 256];
            for (v, slot) in lut.iter_mut().enumerate() {
                *slot = normalize_value(v as f32 / 255.0, cfg.mean[c], cfg.std[c]);
            }
            lut
        })
        .collect()
}

/// Single pass through a lookup table.
fn normalize_lut(src: &[u8], channels: usize, cfg: &PreprocessConfig) -> PixelData {
    let lut = build_lut(cfg, channels);
    match cfg.normalize_elem() {
        ElemType::Bfloat16 => {
            let lut16: Vec<[bf16; 256]> = lut.iter().map(|t| t.map(bf16::from_f32)).collect();
            let mut out = Vec::with_capacity(src.len());
            for px in src.chunks_exact(channels) {
                out.extend(px.iter().zip(&lut16).map(|(&v, t)| t[v as usize]));
            }
            PixelData::Bf16(out)
        }
        _ => {
            let mut out = Vec::with_capacity(src.len());
            for px in src.chunks_exact(channels) {
                out.extend(px.iter().zip(&lut).map(|(&v, t)| t[v as usize]));
            }
            PixelData::F32(out)
        }
    }
}

/// Element-wise route: scale to [0,1] into a float buffer, then subtract
/// and divide in a second pass, then narrow if needed.
fn normalize_two_pass(src: &[u8], channels: usize, cfg: &PreprocessConfig) -> PixelData {
    let mut scaled: Vec<f32> = src.iter().map(|&v| v as f32 / 255.0).collect();
    for (i, v) in scaled.iter_mut().enumerate() {
        let c = i % channels;
        *v = normalize_value(*v, cfg.mean[c], cfg.std[c]);
    }
    match cfg.normalize_elem() {
        ElemType::Bfloat16 => PixelData::Bf16(scaled.into_iter().map(bf16::from_f32).collect()),
        _ => PixelData::F32(scaled),
    }
}

fn normalize_slice(src: &[u8], channels: usize, cfg: &PreprocessConfig) -> PixelData {
    if cfg.contiguous_tensor_path {
        normalize_lut(src, channels, cfg)
    } else {
        normalize_two_pass(src, channels, cfg)
    }
}

/// Normalizes interleaved uint8 samples with `channels` channels.
pub fn normalize_raw(src: &[u8], channels: usize, cfg: &PreprocessConfig) -> Result<PixelData, ImgError> {
    cfg.validate()?;
    if channels == 0 || channels > 3 || src.len() % channels != 0 {
        return Err(ImgError::InvalidBuffer(format!("{} samples do not split into {channels} channels", src.len())));
    }
    Ok(normalize_slice(src, channels, cfg))
}

/// `(x/255 − mean_c)/std_c` per element, into float32 or bfloat16.
pub fn normalize(img: &ImageBuffer, cfg: &PreprocessConfig) -> Result<ImageBuffer, ImgError> {
    cfg.validate()?;
    let src = img.require_u8()?;
    let data = normalize_slice(src, img.channels() as usize, cfg);
    ImageBuffer::new(img.width(), img.height(), img.channels(), data)
}

/// Normalizes every tile, keeping the set's storage layout.
pub fn normalize_tiles(tiles: &TileSet, cfg: &PreprocessConfig) -> Result<TileSet, ImgError> {
    match tiles {
        TileSet::Packed { edge, count, buffer } => Ok(TileSet::Packed {
            edge: *edge,
            count: *count,
            buffer: normalize(buffer, cfg)?,
        }),
        TileSet::Split(v) => Ok(TileSet::Split(
            v.iter().map(|t| normalize(t, cfg)).collect::<Result<_, _>>()?,
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_pixel(v: u8, cfg: &PreprocessConfig) -> Vec<f32> {
        let img = ImageBuffer::from_u8(1, 1, 3, vec![v; 3]).unwrap();
        normalize(&img, cfg).unwrap().data().as_slice().to_f32_vec()
    }

    #[test]
    fn endpoints() {
        for contiguous_tensor_path in [false, true] {
            for reduced_precision_normalize in [false, true] {
                let cfg = PreprocessConfig {
                    contiguous_tensor_path,
                    reduced_precision_normalize,
                    ..Default::default()
                };
                assert_eq!(one_pixel(255, &cfg), vec![1.0; 3]);
                assert_eq!(one_pixel(0, &cfg), vec![-1.0; 3]);
            }
        }
    }

    #[test]
    fn both_routes_agree_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let px: Vec<u8> = (0..3 * 4096).map(|_| rng.gen()).collect();
        let img = ImageBuffer::from_u8(64, 64, 3, px).unwrap();
        let cfg = PreprocessConfig { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225], ..Default::default() };
        for reduced in [false, true] {
            let a = normalize(&img, &PreprocessConfig { reduced_precision_normalize: reduced, ..cfg.clone() }).unwrap();
            let b = normalize(
                &img,
                &PreprocessConfig { reduced_precision_normalize: reduced, contiguous_tensor_path: true, ..cfg.clone() },
            )
            .unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bf16_within_tolerance_of_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let px: Vec<u8> = (0..1_000_000).map(|_| rng.gen()).collect();
        let img = ImageBuffer::from_u8(1000, 1000, 1, px).unwrap();
        let cfg = PreprocessConfig { contiguous_tensor_path: true, ..Default::default() };
        let full = normalize(&img, &cfg).unwrap().data().as_slice().to_f32_vec();
        let cfg16 = PreprocessConfig { reduced_precision_normalize: true, ..cfg };
        let half = normalize(&img, &cfg16).unwrap();
        assert_eq!(half.elem(), ElemType::Bfloat16);
        let half = half.data().as_slice().to_f32_vec();
        let tol = 2f32.powi(-7);
        for (a, b) in full.iter().zip(&half) {
            assert!((a - b).abs() <= tol * (a.abs() + 1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_float_input() {
        let img = ImageBuffer::new(1, 1, 1, PixelData::F32(vec![0.0])).unwrap();
        assert!(normalize(&img, &PreprocessConfig::default()).is_err());
    }
}
