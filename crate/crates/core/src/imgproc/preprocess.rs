use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::resize::tile_set_timed;
use super::{decode_image, normalize_tiles, select_tile_plan, ImgError, PreprocessConfig, TilePlan, TileSet};
use crate::profile::span_scope;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub ns: u64,
}

#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub plan: TilePlan,
    /// Normalized floats, or uint8 when normalization is deferred.
    pub tiles: TileSet,
    /// One validity mask per tile, when materialized.
    pub masks: Option<Vec<Vec<u8>>>,
    pub source_width: u32,
    pub source_height: u32,
    pub stages: Vec<StageTiming>,
}

impl Preprocessed {
    pub fn stage_ns(&self, stage: &str) -> Option<u64> {
        self.stages.iter().find(|s| s.stage == stage).map(|s| s.ns)
    }

    pub fn total_ns(&self) -> u64 {
        self.stages.iter().map(|s| s.ns).sum()
    }
}

/// Validity mask of each tile: 1 where the tile covers resized image
/// content. Aspect-ratio tiling never pads, so every entry ends up 1.
fn pixel_masks(plan: &TilePlan, count: usize) -> Vec<Vec<u8>> {
    let edge = plan.tile_edge as usize;
    (0..count)
        .map(|i| {
            let (valid_w, valid_h) = if i < plan.grid_tiles() as usize {
                let (r, c) = (i / plan.cols as usize, i % plan.cols as usize);
                (
                    (plan.resized_width as usize - c * edge).min(edge),
                    (plan.resized_height as usize - r * edge).min(edge),
                )
            } else {
                (edge, edge)
            };
            let mut mask = vec![0u8; edge * edge];
            for (y, row) in mask.chunks_exact_mut(edge).enumerate() {
                for (x, m) in row.iter_mut().enumerate() {
                    *m = u8::from(x < valid_w && y < valid_h);
                }
            }
            mask
        })
        .collect()
}

fn push(stages: &mut Vec<StageTiming>, stage: &str, ns: u128) {
    stages.push(StageTiming { stage: stage.to_owned(), ns: ns as u64 });
}

/// decode → plan → resize/tile → mask? → normalize (or defer).
///
/// Every toggle combination yields the same tile values; bfloat16 output
/// differs from float32 only by rounding.
pub fn preprocess(payload: &[u8], cfg: &PreprocessConfig) -> Result<Preprocessed, ImgError> {
    cfg.validate()?;
    let _g = span_scope("preprocess");
    let mut stages = Vec::with_capacity(6);

    let t = Instant::now();
    let img = decode_image(payload, cfg)?;
    push(&mut stages, "decode", t.elapsed().as_nanos());

    let t = Instant::now();
    let plan = {
        let _g = span_scope("plan");
        select_tile_plan(img.width(), img.height(), cfg)
    };
    push(&mut stages, "plan", t.elapsed().as_nanos());

    let (tiles, resize_time, tile_time) = tile_set_timed(&img, &plan, cfg)?;
    push(&mut stages, "resize", resize_time.as_nanos());
    push(&mut stages, "tile", tile_time.as_nanos());

    let masks = if cfg.skip_pixel_mask {
        None
    } else {
        let t = Instant::now();
        let masks = {
            let _g = span_scope("mask");
            pixel_masks(&plan, tiles.len())
        };
        push(&mut stages, "mask", t.elapsed().as_nanos());
        Some(masks)
    };

    let t = Instant::now();
    let tiles = if cfg.defer_normalize {
        let _g = span_scope("defer");
        push(&mut stages, "defer", t.elapsed().as_nanos());
        tiles
    } else {
        let out = {
            let _g = span_scope("normalize");
            normalize_tiles(&tiles, cfg)?
        };
        push(&mut stages, "normalize", t.elapsed().as_nanos());
        out
    };

    Ok(Preprocessed {
        plan,
        tiles,
        masks,
        source_width: img.width(),
        source_height: img.height(),
        stages,
    })
}
