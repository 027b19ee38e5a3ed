use std::time::{Duration, Instant};

use super::{ImageBuffer, ImgError, PixelData, PreprocessConfig, TilePlan, TileSet};
use crate::profile::span_scope;

/// Fixed-point weight scale: 8 fractional bits per axis.
const WEIGHT_BITS: u32 = 8;
const ONE: u32 = 1 << WEIGHT_BITS;

/// Source taps and weight for each output coordinate along one axis,
/// using half-pixel centers.
pub(crate) struct AxisMap {
    lo: Vec<u32>,
    hi: Vec<u32>,
    /// Weight of `hi`, in `0..=ONE`.
    frac: Vec<u32>,
}

impl AxisMap {
    pub(crate) fn new(in_len: u32, out_len: u32) -> Self {
        let scale = f64::from(in_len) / f64::from(out_len);
        let max = f64::from(in_len - 1);
        let mut map = Self {
            lo: Vec::with_capacity(out_len as usize),
            hi: Vec::with_capacity(out_len as usize),
            frac: Vec::with_capacity(out_len as usize),
        };
        for o in 0..out_len {
            let src = ((f64::from(o) + 0.5) * scale - 0.5).clamp(0.0, max);
            let lo = src.floor();
            map.lo.push(lo as u32);
            map.hi.push((lo as u32 + 1).min(in_len - 1));
            map.frac.push(((src - lo) * f64::from(ONE)).round() as u32);
        }
        map
    }
}

/// Horizontal pass over one source row: `ONE`-scaled values.
fn blend_row(row: &[u8], taps: &[(u32, u32, u32)], out: &mut [u16]) {
    for (o, &(a, b, w)) in out.iter_mut().zip(taps) {
        let (a, b) = (u32::from(row[a as usize]), u32::from(row[b as usize]));
        *o = (a * (ONE - w) + b * w) as u16;
    }
}

/// Resamples output rows `ys` and columns `xs` of the virtual resized image
/// into `dst`, which is laid out as a `xs.len()`-wide row-major region.
/// Integer arithmetic throughout; every call with the same maps produces
/// the same pixel for the same output coordinate.
fn resample_region(
    src: &[u8],
    src_w: u32,
    channels: usize,
    xmap: &AxisMap,
    ymap: &AxisMap,
    xs: std::ops::Range<u32>,
    ys: std::ops::Range<u32>,
    dst: &mut [u8],
) {
    let stride = src_w as usize * channels;
    let w = xs.len() * channels;
    let taps: Vec<(u32, u32, u32)> = xs
        .flat_map(|x| {
            let x = x as usize;
            let (x0, x1, f) = (xmap.lo[x] as usize * channels, xmap.hi[x] as usize * channels, xmap.frac[x]);
            (0..channels).map(move |c| ((x0 + c) as u32, (x1 + c) as u32, f))
        })
        .collect();
    // Two cached horizontal rows, tagged with their source row.
    let mut rows = [(usize::MAX, vec![0u16; w]), (usize::MAX, vec![0u16; w])];
    let round = 1u32 << (2 * WEIGHT_BITS - 1);
    for (ry, y) in ys.enumerate() {
        let y = y as usize;
        let (lo, hi) = (ymap.lo[y] as usize, ymap.hi[y] as usize);
        for want in [lo, hi] {
            if rows[0].0 != want && rows[1].0 != want {
                let slot = usize::from(rows[0].0 == lo || rows[0].0 == hi);
                blend_row(&src[want * stride..][..stride], &taps, &mut rows[slot].1);
                rows[slot].0 = want;
            }
        }
        let pick = |r: usize| if rows[0].0 == r { &rows[0].1 } else { &rows[1].1 };
        let (top, bot) = (pick(lo), pick(hi));
        let fy = ymap.frac[y];
        let out = &mut dst[ry * w..][..w];
        for ((o, &t), &b) in out.iter_mut().zip(top).zip(bot) {
            *o = ((u32::from(t) * (ONE - fy) + u32::from(b) * fy + round) >> (2 * WEIGHT_BITS)) as u8;
        }
    }
}

/// Bilinear resize with half-pixel centers and 8-bit fixed-point weights.
pub fn resize_bilinear(img: &ImageBuffer, out_w: u32, out_h: u32) -> Result<ImageBuffer, ImgError> {
    let src = img.require_u8()?;
    if out_w == 0 || out_h == 0 {
        return Err(ImgError::InvalidBuffer(format!("resize target {out_w}x{out_h}")));
    }
    let c = img.channels() as usize;
    let xmap = AxisMap::new(img.width(), out_w);
    let ymap = AxisMap::new(img.height(), out_h);
    let mut out = vec![0u8; out_w as usize * out_h as usize * c];
    resample_region(src, img.width(), c, &xmap, &ymap, 0..out_w, 0..out_h, &mut out);
    ImageBuffer::from_u8(out_w, out_h, img.channels(), out)
}

fn check_plan(img: &ImageBuffer, plan: &TilePlan, cfg: &PreprocessConfig) -> Result<(), ImgError> {
    img.require_u8()?;
    let ok = plan.tile_edge == cfg.tile_edge
        && plan.rows >= 1
        && plan.cols >= 1
        && plan.grid_tiles() <= cfg.max_tiles
        && plan.resized_width == plan.cols * plan.tile_edge
        && plan.resized_height == plan.rows * plan.tile_edge
        && plan.include_thumbnail == (plan.grid_tiles() > 1);
    if ok {
        Ok(())
    } else {
        Err(ImgError::Config(format!("tile plan {plan:?} does not fit the config")))
    }
}

/// Resizes and cuts `img` per `plan`, honoring the fused-transform and
/// avoid-split toggles. Tiles are row-major, thumbnail last. Opens `resize`
/// and `tile` spans.
pub fn tile_set(img: &ImageBuffer, plan: &TilePlan, cfg: &PreprocessConfig) -> Result<TileSet, ImgError> {
    let (set, _, _) = tile_set_timed(img, plan, cfg)?;
    Ok(set)
}

/// Same as [`tile_set`], also returning the `resize` and `tile` stage times.
pub(crate) fn tile_set_timed(
    img: &ImageBuffer,
    plan: &TilePlan,
    cfg: &PreprocessConfig,
) -> Result<(TileSet, Duration, Duration), ImgError> {
    check_plan(img, plan, cfg)?;
    let src = img.require_u8()?;
    let c = img.channels() as usize;
    let edge = plan.tile_edge;
    let tile_len = edge as usize * edge as usize * c;
    let count = plan.image_count() as usize;
    let mut slots = if cfg.avoid_per_item_split {
        Slots::Packed(vec![0u8; tile_len * count])
    } else {
        Slots::Split(Vec::with_capacity(count))
    };

    // resize: the thumbnail, plus the full resized image unless fused.
    let t0 = Instant::now();
    let resized = {
        let _g = span_scope("resize");
        if plan.include_thumbnail {
            let xmap = AxisMap::new(img.width(), edge);
            let ymap = AxisMap::new(img.height(), edge);
            let dst = slots.slot(count - 1, tile_len);
            resample_region(src, img.width(), c, &xmap, &ymap, 0..edge, 0..edge, dst);
        }
        if cfg.fused_transform {
            None
        } else {
            Some(resize_bilinear(img, plan.resized_width, plan.resized_height)?)
        }
    };
    let resize_time = t0.elapsed();

    let t1 = Instant::now();
    {
        let _g = span_scope("tile");
        let xmap = AxisMap::new(img.width(), plan.resized_width);
        let ymap = AxisMap::new(img.height(), plan.resized_height);
        for r in 0..plan.rows {
            for col in 0..plan.cols {
                let dst = slots.slot((r * plan.cols + col) as usize, tile_len);
                let xs = col * edge..(col + 1) * edge;
                let ys = r * edge..(r + 1) * edge;
                match &resized {
                    None => resample_region(src, img.width(), c, &xmap, &ymap, xs, ys, dst),
                    Some(full) => crop_into(full, xs, ys, dst),
                }
            }
        }
    }
    let tile_time = t1.elapsed();
    Ok((slots.finish(edge, img.channels(), count), resize_time, tile_time))
}

fn crop_into(full: &ImageBuffer, xs: std::ops::Range<u32>, ys: std::ops::Range<u32>, dst: &mut [u8]) {
    let c = full.channels() as usize;
    let stride = full.width() as usize * c;
    let src = full.as_u8().expect("resized image is uint8");
    let w = xs.len() * c;
    for (ry, y) in ys.enumerate() {
        let start = y as usize * stride + xs.start as usize * c;
        dst[ry * w..(ry + 1) * w].copy_from_slice(&src[start..start + w]);
    }
}

enum Slots {
    Packed(Vec<u8>),
    Split(Vec<Option<Vec<u8>>>),
}

impl Slots {
    /// Destination for tile `i`; split slots are allocated on first use.
    fn slot(&mut self, i: usize, tile_len: usize) -> &mut [u8] {
        match self {
            Slots::Packed(buf) => &mut buf[i * tile_len..(i + 1) * tile_len],
            Slots::Split(v) => {
                if v.len() <= i {
                    v.resize(i + 1, None);
                }
                v[i].get_or_insert_with(|| vec![0u8; tile_len])
            }
        }
    }

    fn finish(self, edge: u32, channels: u8, count: usize) -> TileSet {
        match self {
            Slots::Packed(buf) => TileSet::Packed {
                edge,
                count,
                buffer: ImageBuffer::new(edge, edge * count as u32, channels, PixelData::U8(buf))
                    .expect("packed tile geometry"),
            },
            Slots::Split(v) => TileSet::Split(
                v.into_iter()
                    .map(|t| t.expect("every tile slot is written"))
                    .map(|t| ImageBuffer::from_u8(edge, edge, channels, t).expect("tile geometry"))
                    .collect(),
            ),
        }
    }
}

/// Tiles as owned buffers: grid tiles row-major, then the thumbnail.
pub fn tile_image(img: &ImageBuffer, plan: &TilePlan, cfg: &PreprocessConfig) -> Result<Vec<ImageBuffer>, ImgError> {
    Ok(tile_set(img, plan, cfg)?.to_images())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tile_edge: u32, max_tiles: u32) -> PreprocessConfig {
        PreprocessConfig { tile_edge, max_tiles, ..Default::default() }
    }

    fn noise(w: u32, h: u32, seed: u32) -> ImageBuffer {
        let mut s = seed.wrapping_mul(2654435761).max(1);
        let data = (0..w * h * 3)
            .map(|_| {
                s ^= s << 13;
                s ^= s >> 17;
                s ^= s << 5;
                (s >> 24) as u8
            })
            .collect();
        ImageBuffer::from_u8(w, h, 3, data).unwrap()
    }

    #[test]
    fn identity_resize() {
        let img = noise(17, 9, 1);
        assert_eq!(resize_bilinear(&img, 17, 9).unwrap(), img);
    }

    #[test]
    fn checkerboard_to_one_pixel() {
        let img = ImageBuffer::from_u8(2, 2, 1, vec![0, 255, 255, 0]).unwrap();
        assert_eq!(resize_bilinear(&img, 1, 1).unwrap().as_u8().unwrap(), &[128]);
    }

    #[test]
    fn solid_color_is_preserved() {
        let img = ImageBuffer::filled(13, 7, [200, 17, 255]);
        for (w, h) in [(1, 1), (5, 30), (64, 3), (13, 7)] {
            let out = resize_bilinear(&img, w, h).unwrap();
            assert!(out.as_u8().unwrap().chunks(3).all(|p| p == [200, 17, 255]));
        }
    }

    #[test]
    fn single_tile_is_noop_geometry() {
        let img = noise(32, 32, 2);
        let plan = TilePlan::new(1, 1, 32);
        let tiles = tile_image(&img, &plan, &cfg(32, 4)).unwrap();
        assert_eq!(tiles, vec![img]);
    }

    #[test]
    fn halves_split_cleanly() {
        let (w, h) = (200u32, 100u32);
        let mut data = Vec::with_capacity((w * h * 3) as usize);
        for _y in 0..h {
            for x in 0..w {
                let v = if x < w / 2 { 0 } else { 255 };
                data.extend_from_slice(&[v, v, v]);
            }
        }
        let img = ImageBuffer::from_u8(w, h, 3, data).unwrap();
        let plan = TilePlan::new(1, 2, 64);
        let tiles = tile_image(&img, &plan, &cfg(64, 4)).unwrap();
        assert_eq!(tiles.len(), 3);
        let mean = |t: &ImageBuffer| {
            let px = t.as_u8().unwrap();
            px.iter().map(|&v| f64::from(v)).sum::<f64>() / px.len() as f64
        };
        assert!(mean(&tiles[0]) < 8.0);
        assert!(mean(&tiles[1]) > 247.0);
    }

    #[test]
    fn four_tiles_plus_thumbnail() {
        let img = noise(64, 64, 3);
        let plan = TilePlan::new(2, 2, 16);
        assert_eq!(tile_image(&img, &plan, &cfg(16, 4)).unwrap().len(), 5);
    }

    #[test]
    fn layouts_and_fusion_agree() {
        let img = noise(123, 57, 4);
        let base = cfg(24, 6);
        let plan = crate::imgproc::select_tile_plan(123, 57, &base);
        let mut outs = Vec::new();
        for fused_transform in [false, true] {
            for avoid_per_item_split in [false, true] {
                let c = PreprocessConfig { fused_transform, avoid_per_item_split, ..base.clone() };
                let set = tile_set(&img, &plan, &c).unwrap();
                assert_eq!(set.is_contiguous(), avoid_per_item_split);
                outs.push(set.to_images());
            }
        }
        assert!(outs.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn rejects_foreign_plan() {
        let img = noise(10, 10, 5);
        assert!(tile_image(&img, &TilePlan::new(1, 1, 32), &cfg(16, 4)).is_err());
        assert!(tile_image(&img, &TilePlan::new(3, 3, 16), &cfg(16, 4)).is_err());
    }
}
