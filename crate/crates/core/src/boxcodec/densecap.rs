use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{iou, BBoxN, BoxError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCaption {
    #[serde(rename = "box")]
    pub bbox: BBoxN,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image_id: String,
    pub region: RegionCaption,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub region: RegionCaption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseCapThresholds {
    pub iou: Vec<f64>,
    pub sim: Vec<f64>,
}

impl Default for DenseCapThresholds {
    fn default() -> Self {
        Self { iou: vec![0.3, 0.4, 0.5, 0.6, 0.7], sim: vec![0.0, 0.5, 1.0] }
    }
}

/// Token F1 over lowercased whitespace tokens, counting multiplicity.
pub fn caption_similarity(a: &str, b: &str) -> f64 {
    let count = |s: &str| {
        let mut m: HashMap<String, usize> = HashMap::new();
        for t in s.split_whitespace() {
            *m.entry(t.to_lowercase()).or_default() += 1;
        }
        m
    };
    let (ca, cb) = (count(a), count(b));
    let na: usize = ca.values().sum();
    let nb: usize = cb.values().sum();
    if na == 0 && nb == 0 {
        return 1.0;
    }
    let common: usize = ca.iter().map(|(t, &n)| n.min(cb.get(t).copied().unwrap_or(0))).sum();
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / na as f64;
    let r = common as f64 / nb as f64;
    2.0 * p * r / (p + r)
}

/// Pairwise IoU and caption similarity for predictions against the ground
/// truths of the same image.
struct Affinity {
    order: Vec<usize>,
    /// Per prediction: (gt index, iou, similarity).
    candidates: Vec<Vec<(usize, f64, f64)>>,
    n_gt: usize,
}

impl Affinity {
    fn build(preds: &[Prediction], gts: &[GroundTruth]) -> Result<Self, BoxError> {
        if gts.is_empty() {
            return Err(BoxError::Eval("average precision is undefined without ground truth".into()));
        }
        if let Some(g) = gts.iter().find(|g| g.region.caption.trim().is_empty()) {
            return Err(BoxError::Eval(format!("ground truth in image {:?} has an empty caption", g.image_id)));
        }
        if let Some(p) = preds.iter().find(|p| !p.score.is_finite()) {
            return Err(BoxError::Eval(format!("prediction in image {:?} has score {}", p.image_id, p.score)));
        }
        let mut by_image: HashMap<&str, Vec<usize>> = HashMap::new();
        for (j, g) in gts.iter().enumerate() {
            by_image.entry(g.image_id.as_str()).or_default().push(j);
        }
        let candidates = preds
            .iter()
            .map(|p| {
                by_image
                    .get(p.image_id.as_str())
                    .map(|js| {
                        js.iter()
                            .map(|&j| {
                                let g = &gts[j].region;
                                (j, iou(&p.region.bbox, &g.bbox), caption_similarity(&p.region.caption, &g.caption))
                            })
                            .collect()
                    })
                    .unwrap_or_default()
            })
            .collect();
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
        Ok(Self { order, candidates, n_gt: gts.len() })
    }

    fn ap(&self, iou_t: f64, sim_t: f64) -> f64 {
        let mut matched = vec![false; self.n_gt];
        let mut hits = Vec::with_capacity(self.order.len());
        for &i in &self.order {
            let mut best: Option<(usize, f64)> = None;
            for &(j, ov, sim) in &self.candidates[i] {
                if matched[j] || ov < iou_t || sim < sim_t {
                    continue;
                }
                if best.map_or(true, |(_, b)| ov > b) {
                    best = Some((j, ov));
                }
            }
            if let Some((j, _)) = best {
                matched[j] = true;
            }
            hits.push(best.is_some());
        }
        interpolated_ap(&hits, self.n_gt)
    }
}

/// Area under the precision envelope, summed at each recall step.
fn interpolated_ap(hits: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(hits.len());
    for (k, &hit) in hits.iter().enumerate() {
        tp += usize::from(hit);
        points.push((tp, tp as f64 / (k + 1) as f64));
    }
    let mut envelope = 0.0f64;
    let mut area = 0.0;
    for k in (0..points.len()).rev() {
        envelope = envelope.max(points[k].1);
        if hits[k] {
            area += envelope;
        }
    }
    area / n_gt as f64
}

/// AP at a single (IoU, similarity) threshold pair.
pub fn average_precision(preds: &[Prediction], gts: &[GroundTruth], iou_t: f64, sim_t: f64) -> Result<f64, BoxError> {
    Ok(Affinity::build(preds, gts)?.ap(iou_t, sim_t))
}

/// Mean AP over every threshold pair. Predictions are ranked by score
/// across all images; equal scores keep input order.
pub fn densecap_map(preds: &[Prediction], gts: &[GroundTruth], thresholds: &DenseCapThresholds) -> Result<f64, BoxError> {
    if thresholds.iou.is_empty() || thresholds.sim.is_empty() {
        return Err(BoxError::Eval("threshold grid is empty".into()));
    }
    let aff = Affinity::build(preds, gts)?;
    let mut total = 0.0;
    for &t in &thresholds.iou {
        for &s in &thresholds.sim {
            total += aff.ap(t, s);
        }
    }
    Ok(total / (thresholds.iou.len() * thresholds.sim.len()) as f64)
}

/// One JSONL line: all regions of one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub boxes: Vec<BBoxN>,
    pub captions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl ImageRecord {
    fn regions(&self) -> Result<impl Iterator<Item = RegionCaption> + '_, BoxError> {
        if self.boxes.len() != self.captions.len() {
            return Err(BoxError::Eval(format!(
                "image {:?}: {} boxes but {} captions",
                self.image_id,
                self.boxes.len(),
                self.captions.len()
            )));
        }
        Ok(self.boxes.iter().zip(&self.captions).map(|(b, c)| RegionCaption { bbox: *b, caption: c.clone() }))
    }

    pub fn predictions(&self) -> Result<Vec<Prediction>, BoxError> {
        let scores = self
            .scores
            .as_ref()
            .ok_or_else(|| BoxError::Eval(format!("image {:?}: predictions need scores", self.image_id)))?;
        if scores.len() != self.boxes.len() {
            return Err(BoxError::Eval(format!(
                "image {:?}: {} boxes but {} scores",
                self.image_id,
                self.boxes.len(),
                scores.len()
            )));
        }
        Ok(self
            .regions()?
            .zip(scores)
            .map(|(region, &score)| Prediction { image_id: self.image_id.clone(), region, score })
            .collect())
    }

    pub fn ground_truths(&self) -> Result<Vec<GroundTruth>, BoxError> {
        Ok(self.regions()?.map(|region| GroundTruth { image_id: self.image_id.clone(), region }).collect())
    }
}

pub fn parse_jsonl(text: &str) -> Result<Vec<ImageRecord>, BoxError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| BoxError::Parse { position: i + 1, reason: format!("line {}: {e}", i + 1) })
        })
        .collect()
}

pub fn load_jsonl(path: &Path) -> Result<Vec<ImageRecord>, BoxError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| BoxError::Eval(format!("cannot read {}: {e}", path.display())))?;
    parse_jsonl(&text)
}
