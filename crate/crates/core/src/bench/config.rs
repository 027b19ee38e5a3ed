use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::BenchError;
use crate::backend::{LatencyModel, TokenReduction};
use crate::imgproc::PreprocessConfig;
use crate::recipe::{parse_rung, RecipeSet};
use crate::transfer::{TransferCosts, DEFAULT_ALIGNMENT};

pub const ENV_PREFIX: &str = "VLMFP_";

/// Harness configuration: one JSON object, every field optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    #[serde(with = "recipe_names")]
    pub recipes: RecipeSet,
    pub tile_edge: u32,
    pub max_tiles: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
    pub token_reduction: TokenReduction,
    pub latency: LatencyModel,
    pub transfer: TransferCosts,
    pub alignment: usize,
    pub arena_capacity: usize,
    pub vocab_path: Option<PathBuf>,
    pub backend: String,
    pub decode_tokens: usize,
    pub warmup: usize,
    /// Measured requests; defaults to one per manifest record.
    pub requests: Option<usize>,
    pub pipelined: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        let pre = PreprocessConfig::default();
        Self {
            recipes: RecipeSet::NONE,
            tile_edge: pre.tile_edge,
            max_tiles: 6,
            mean: pre.mean,
            std: pre.std,
            token_reduction: TokenReduction::default(),
            latency: LatencyModel::default(),
            transfer: TransferCosts::default(),
            alignment: DEFAULT_ALIGNMENT,
            arena_capacity: 64 << 20,
            vocab_path: None,
            backend: "mock".into(),
            decode_tokens: 16,
            warmup: 20,
            requests: None,
            pipelined: false,
        }
    }
}

impl HarnessConfig {
    /// Reads `path` (or starts from defaults) and applies `VLMFP_*`
    /// variables from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, BenchError> {
        let value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| BenchError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| BenchError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        Self::from_value(value, std::env::vars())
    }

    /// Deserializes `value` after applying overrides. `VLMFP_A__B=v` sets
    /// key `b` inside object `a`; values parse as JSON when they can and
    /// are taken as strings otherwise.
    pub fn from_value(mut value: Value, vars: impl IntoIterator<Item = (String, String)>) -> Result<Self, BenchError> {
        for (key, raw) in vars {
            let Some(path) = key.strip_prefix(ENV_PREFIX) else { continue };
            let segments: Vec<String> = path.split("__").map(str::to_lowercase).collect();
            let parsed = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
            set_path(&mut value, &segments, parsed).map_err(|e| BenchError::Config(format!("{key}: {e}")))?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| BenchError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        let config = |e: &dyn std::fmt::Display| BenchError::Config(e.to_string());
        self.preprocess().validate().map_err(|e| config(&e))?;
        self.latency.validate().map_err(|e| config(&e))?;
        self.transfer.validate().map_err(|e| config(&e))?;
        self.token_reduction.tokens_per_tile(self.tile_edge).map_err(|e| config(&e))?;
        if !self.alignment.is_power_of_two() {
            return Err(BenchError::Config(format!("alignment {} is not a power of two", self.alignment)));
        }
        if self.requests == Some(0) {
            return Err(BenchError::Config("requests must be at least 1".into()));
        }
        Ok(())
    }

    /// Image-side parameters with toggles taken from `recipes`.
    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            tile_edge: self.tile_edge,
            max_tiles: self.max_tiles,
            mean: self.mean,
            std: self.std,
            ..PreprocessConfig::default()
        }
        .with_recipes(self.recipes)
    }

    pub fn with_recipes(&self, recipes: RecipeSet) -> Self {
        Self { recipes, ..self.clone() }
    }

    /// Short SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn set_path(value: &mut Value, path: &[String], new: Value) -> Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = value;
    for seg in parents {
        let obj = cur.as_object_mut().ok_or_else(|| format!("`{seg}` is not inside an object"))?;
        cur = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    cur.as_object_mut().ok_or_else(|| format!("`{last}` is not inside an object"))?.insert(last.clone(), new);
    Ok(())
}

/// Recipes as a list of names, or a single rung string such as `"⑤⑨"`.
mod recipe_names {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Rung(String),
        List(Vec<String>),
    }

    pub fn serialize<S: Serializer>(set: &RecipeSet, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(set.iter().map(|r| r.name()))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<RecipeSet, D::Error> {
        let parts = match Repr::deserialize(d)? {
            Repr::Rung(s) if s.trim().is_empty() => return Ok(RecipeSet::NONE),
            Repr::Rung(s) => vec![s],
            Repr::List(v) => v,
        };
        let mut set = RecipeSet::NONE;
        for p in parts {
            set = set.union(parse_rung(&p).map_err(serde::de::Error::custom)?);
        }
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recipe::Recipe;

    fn vars(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn defaults_and_recipes() {
        let cfg = HarnessConfig::from_value(serde_json::json!({}), vec![]).unwrap();
        assert_eq!(cfg, HarnessConfig::default());
        let cfg = HarnessConfig::from_value(serde_json::json!({"recipes": ["decode_once", "⑨"]}), vec![]).unwrap();
        assert!(cfg.recipes.contains(Recipe::DecodeOnce) && cfg.recipes.contains(Recipe::SimdDecode));
        let cfg = HarnessConfig::from_value(serde_json::json!({"recipes": "①②"}), vec![]).unwrap();
        assert!(cfg.preprocess().fused_transform && cfg.preprocess().contiguous_tensor_path);
        let back: HarnessConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn env_overrides() {
        let cfg = HarnessConfig::from_value(
            serde_json::json!({"warmup": 3}),
            vars(&[
                ("VLMFP_WARMUP", "7"),
                ("VLMFP_LATENCY__SCHED_OVERHEAD_S", "0.5"),
                ("VLMFP_RECIPES", "⑤⑫"),
                ("VLMFP_VOCAB_PATH", "/tmp/v.txt"),
                ("OTHER", "x"),
            ]),
        )
        .unwrap();
        assert_eq!(cfg.warmup, 7);
        assert_eq!(cfg.latency.sched_overhead_s, 0.5);
        assert_eq!(cfg.latency.decode_per_token_s, LatencyModel::default().decode_per_token_s);
        assert!(cfg.recipes.contains(Recipe::PackTransfers));
        assert_eq!(cfg.vocab_path.as_deref(), Some(Path::new("/tmp/v.txt")));
    }

    #[test]
    fn config_errors() {
        let bad = [
            serde_json::json!({"tile_edg": 448}),
            serde_json::json!({"recipes": ["warp_drive"]}),
            serde_json::json!({"tile_edge": 450}),
            serde_json::json!({"latency": {"sched_overhead_s": -1.0}}),
            serde_json::json!({"requests": 0}),
        ];
        for v in bad {
            assert!(matches!(HarnessConfig::from_value(v.clone(), vec![]), Err(BenchError::Config(_))), "{v}");
        }
    }

    #[test]
    fn hash_is_stable() {
        let a = HarnessConfig::default();
        assert_eq!(a.hash(), HarnessConfig::default().hash());
        assert_ne!(a.hash(), a.with_recipes(RecipeSet::all()).hash());
        assert_eq!(a.hash().len(), 16);
    }
}
