use std::cmp::Ordering;

use super::{PreprocessConfig, TilePlan};

/// Distortion of fitting a `w:h` image onto a `cols:rows` grid, as the exact
/// ratio `max(a, b) / min(a, b)` with `a = w·rows`, `b = h·cols`. Ordering by
/// this ratio is ordering by `|ln(w/h) − ln(cols/rows)|`.
#[derive(Debug, Clone, Copy)]
struct Distortion {
    num: u128,
    den: u128,
}

impl Distortion {
    fn new(width: u32, height: u32, rows: u32, cols: u32) -> Self {
        let a = u128::from(width) * u128::from(rows);
        let b = u128::from(height) * u128::from(cols);
        Self { num: a.max(b), den: a.min(b) }
    }

    fn cmp(&self, other: &Self) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

/// Picks the grid whose aspect ratio is closest to the image's in log
/// space. Ties go to fewer tiles, then fewer rows.
pub fn select_tile_plan(width: u32, height: u32, cfg: &PreprocessConfig) -> TilePlan {
    let (width, height) = (width.max(1), height.max(1));
    let max_tiles = cfg.max_tiles.max(1);
    let mut best: Option<(Distortion, u32, u32)> = None;
    for rows in 1..=max_tiles {
        for cols in 1..=max_tiles / rows {
            let d = Distortion::new(width, height, rows, cols);
            let better = match &best {
                None => true,
                Some((bd, br, bc)) => d
                    .cmp(bd)
                    .then((rows * cols).cmp(&(br * bc)))
                    .then(rows.cmp(br))
                    .is_lt(),
            };
            if better {
                best = Some((d, rows, cols));
            }
        }
    }
    let (_, rows, cols) = best.expect("at least the 1x1 candidate exists");
    TilePlan::new(rows, cols, cfg.tile_edge)
}
