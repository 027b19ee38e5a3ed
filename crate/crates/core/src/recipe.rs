//! The twelve latency recipes and cumulative recipe sets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Recipe {
    /// ① resize and crop in one traversal.
    FusedTransform,
    /// ② contiguous single-pass tensor normalization.
    ContiguousTensorPath,
    /// ③ normalization placed after the transfer boundary.
    DeviceNormalize,
    /// ④ pre-allocated aligned staging arena.
    PinnedMemory,
    /// ⑤ a single decode pass.
    DecodeOnce,
    /// ⑥ normalize into bfloat16.
    ReducedPrecisionNormalize,
    /// ⑦ image placeholders expanded after tokenization.
    CompactPlaceholders,
    /// ⑧ uint8 pixels cross the transfer boundary.
    Uint8Transfer,
    /// ⑨ format-specific decoder writing straight into the output buffer.
    SimdDecode,
    /// ⑩ no validity mask for fully valid images.
    SkipPixelMask,
    /// ⑪ all tiles in one allocation.
    AvoidPerItemSplit,
    /// ⑫ one packed host-to-device copy.
    PackTransfers,
}

pub const ALL_RECIPES: [Recipe; 12] = [
    Recipe::FusedTransform,
    Recipe::ContiguousTensorPath,
    Recipe::DeviceNormalize,
    Recipe::PinnedMemory,
    Recipe::DecodeOnce,
    Recipe::ReducedPrecisionNormalize,
    Recipe::CompactPlaceholders,
    Recipe::Uint8Transfer,
    Recipe::SimdDecode,
    Recipe::SkipPixelMask,
    Recipe::AvoidPerItemSplit,
    Recipe::PackTransfers,
];

/// The recipes that only affect image preprocessing.
pub const IMGPROC_RECIPES: [Recipe; 7] = [
    Recipe::FusedTransform,
    Recipe::ContiguousTensorPath,
    Recipe::DecodeOnce,
    Recipe::ReducedPrecisionNormalize,
    Recipe::SimdDecode,
    Recipe::SkipPixelMask,
    Recipe::AvoidPerItemSplit,
];

const GLYPHS: [char; 12] = ['①', '②', '③', '④', '⑤', '⑥', '⑦', '⑧', '⑨', '⑩', '⑪', '⑫'];

impl Recipe {
    /// 1-based recipe number.
    pub fn number(self) -> u8 {
        ALL_RECIPES.iter().position(|&r| r == self).unwrap() as u8 + 1
    }

    pub fn from_number(n: u8) -> Option<Self> {
        ALL_RECIPES.get(usize::from(n).checked_sub(1)?).copied()
    }

    pub fn glyph(self) -> char {
        GLYPHS[usize::from(self.number() - 1)]
    }

    pub fn from_glyph(c: char) -> Option<Self> {
        let i = GLYPHS.iter().position(|&g| g == c)?;
        Some(ALL_RECIPES[i])
    }

    pub fn name(self) -> &'static str {
        match self {
            Recipe::FusedTransform => "fused_transform",
            Recipe::ContiguousTensorPath => "contiguous_tensor_path",
            Recipe::DeviceNormalize => "device_normalize",
            Recipe::PinnedMemory => "pinned_memory",
            Recipe::DecodeOnce => "decode_once",
            Recipe::ReducedPrecisionNormalize => "reduced_precision_normalize",
            Recipe::CompactPlaceholders => "compact_placeholders",
            Recipe::Uint8Transfer => "uint8_transfer",
            Recipe::SimdDecode => "simd_decode",
            Recipe::SkipPixelMask => "skip_pixel_mask",
            Recipe::AvoidPerItemSplit => "avoid_per_item_split",
            Recipe::PackTransfers => "pack_transfers",
        }
    }

    /// Row label used in ladder tables.
    pub fn label(self) -> &'static str {
        match self {
            Recipe::FusedTransform => "Reduce img transform",
            Recipe::ContiguousTensorPath => "Tensor img process",
            Recipe::DeviceNormalize => "Device preprocess",
            Recipe::PinnedMemory => "Pin memory",
            Recipe::DecodeOnce => "Reduce decoding",
            Recipe::ReducedPrecisionNormalize => "BF16 img normalize",
            Recipe::CompactPlaceholders => "Tokenizer",
            Recipe::Uint8Transfer => "UInt8",
            Recipe::SimdDecode => "SIMD decode",
            Recipe::SkipPixelMask => "Remove pixel mask",
            Recipe::AvoidPerItemSplit => "Avoid split",
            Recipe::PackTransfers => "Pack H2D transfer",
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.glyph())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("unknown recipe `{0}`")]
pub struct UnknownRecipe(pub String);

impl FromStr for Recipe {
    type Err = UnknownRecipe;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let mut chars = t.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            if let Some(r) = Recipe::from_glyph(c) {
                return Ok(r);
            }
        }
        if let Ok(n) = t.parse::<u8>() {
            return Recipe::from_number(n).ok_or_else(|| UnknownRecipe(s.to_owned()));
        }
        ALL_RECIPES
            .iter()
            .copied()
            .find(|r| r.name() == t)
            .ok_or_else(|| UnknownRecipe(s.to_owned()))
    }
}

/// A set of enabled recipes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RecipeSet(u16);

impl RecipeSet {
    pub const NONE: RecipeSet = RecipeSet(0);

    pub fn all() -> Self {
        ALL_RECIPES.iter().copied().collect()
    }

    pub fn contains(self, r: Recipe) -> bool {
        self.0 & (1 << (r.number() - 1)) != 0
    }

    pub fn insert(&mut self, r: Recipe) {
        self.0 |= 1 << (r.number() - 1);
    }

    pub fn with(mut self, r: Recipe) -> Self {
        self.insert(r);
        self
    }

    pub fn union(self, other: RecipeSet) -> Self {
        RecipeSet(self.0 | other.0)
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Recipe> {
        ALL_RECIPES.into_iter().filter(move |&r| self.contains(r))
    }

    /// Toggle vector in recipe order, as stored in reports.
    pub fn toggles(self) -> [bool; 12] {
        ALL_RECIPES.map(|r| self.contains(r))
    }
}

impl FromIterator<Recipe> for RecipeSet {
    fn from_iter<I: IntoIterator<Item = Recipe>>(iter: I) -> Self {
        let mut set = RecipeSet::NONE;
        for r in iter {
            set.insert(r);
        }
        set
    }
}

impl fmt::Display for RecipeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in self.iter() {
            write!(f, "{r}")?;
        }
        Ok(())
    }
}

/// Parses one ladder rung: a run of glyphs (`①②`), or `+`-joined numbers or
/// names (`1+2`, `fused_transform+contiguous_tensor_path`).
pub fn parse_rung(s: &str) -> Result<RecipeSet, UnknownRecipe> {
    let t = s.trim();
    if t.is_empty() {
        return Err(UnknownRecipe(s.to_owned()));
    }
    if t.chars().all(|c| Recipe::from_glyph(c).is_some()) {
        return Ok(t.chars().filter_map(Recipe::from_glyph).collect());
    }
    t.split('+').map(str::parse::<Recipe>).collect()
}

/// Parses a comma-separated ladder, e.g. `⑤,⑨,①②,⑧`.
pub fn parse_ladder(s: &str) -> Result<Vec<RecipeSet>, UnknownRecipe> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(parse_rung).collect()
}

/// The ladder used for the desk-scale acceptance run.
pub fn reference_ladder() -> Vec<RecipeSet> {
    parse_ladder("⑤,⑨,①②,⑧,⑩,⑪,⑫").expect("static ladder")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyph_number_name_agree() {
        for r in ALL_RECIPES {
            assert_eq!(Recipe::from_glyph(r.glyph()), Some(r));
            assert_eq!(Recipe::from_number(r.number()), Some(r));
            assert_eq!(r.name().parse::<Recipe>(), Ok(r));
        }
        assert_eq!(Recipe::from_number(0), None);
        assert_eq!(Recipe::from_number(13), None);
    }

    #[test]
    fn ladder_parsing() {
        let ladder = parse_ladder("⑤,⑨,①②,8,10+11,pack_transfers").unwrap();
        assert_eq!(ladder.len(), 6);
        assert_eq!(
            ladder[2],
            RecipeSet::NONE.with(Recipe::FusedTransform).with(Recipe::ContiguousTensorPath)
        );
        assert_eq!(ladder[4].iter().count(), 2);
        assert!(parse_ladder("").unwrap().is_empty());
        assert!(parse_ladder("⑤,bogus").is_err());
        assert!(parse_ladder("13").is_err());
    }

    #[test]
    fn display_roundtrip() {
        let set = RecipeSet::all();
        assert_eq!(set.to_string().chars().count(), 12);
        assert_eq!(parse_rung(&set.to_string()).unwrap(), set);
    }
}
