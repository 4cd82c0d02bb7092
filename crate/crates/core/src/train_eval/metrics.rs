//! Video-level metrics, gate statistics and their file outputs.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::argmax;

/// Clip-averaged prediction for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    pub label: usize,
    pub probs: Array1<f64>,
    /// Gate averaged over channels, frames and clips.
    pub gate_mean: Option<f64>,
}

impl VideoPrediction {
    pub fn top1(&self) -> usize {
        argmax(&self.probs)
    }
}

/// Class indices of the `k` largest probabilities; ties keep index order.
pub fn top_k(probs: &Array1<f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    idx.truncate(k);
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub split: String,
    pub num_videos: usize,
    pub top1: f64,
    /// Top-k accuracy with `k = min(5, classes - 1)`.
    pub top5: f64,
    pub top_k: usize,
    pub per_class_top1: BTreeMap<usize, f64>,
    pub gate_mean: Option<f64>,
    pub gate_var: Option<f64>,
    pub per_class_gate_mean: Option<BTreeMap<usize, f64>>,
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

impl MetricsReport {
    pub fn from_predictions(name: &str, split: &str, preds: &[VideoPrediction], num_classes: usize) -> Self {
        let k = 5.min(num_classes.saturating_sub(1)).max(1);
        let mut hits1 = 0;
        let mut hitsk = 0;
        let mut class_hits = vec![0usize; num_classes];
        let mut class_total = vec![0usize; num_classes];
        for p in preds {
            let ok = p.top1() == p.label;
            hits1 += ok as usize;
            hitsk += top_k(&p.probs, k).contains(&p.label) as usize;
            class_total[p.label] += 1;
            class_hits[p.label] += ok as usize;
        }
        let per_class_top1 = (0..num_classes)
            .filter(|&c| class_total[c] > 0)
            .map(|c| (c, percent(class_hits[c], class_total[c])))
            .collect();
        let gates = gate_statistics_of(preds, num_classes).ok();
        Self {
            name: name.to_string(),
            split: split.to_string(),
            num_videos: preds.len(),
            top1: percent(hits1, preds.len()),
            top5: percent(hitsk, preds.len()),
            top_k: k,
            per_class_top1,
            gate_mean: gates.as_ref().map(|g| g.mean),
            gate_var: gates.as_ref().map(|g| g.variance),
            per_class_gate_mean: gates.map(|g| g.per_class),
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        serde_json::to_writer_pretty(std::io::BufWriter::new(std::fs::File::create(path)?), self)?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, num_classes: usize) -> Result<()> {
        write_reports_csv(path, std::slice::from_ref(self), num_classes)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One CSV row per report, with per-class accuracy and gate columns.
pub fn write_reports_csv(path: &Path, reports: &[MetricsReport], num_classes: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let mut header = vec!["name".to_string(), "split".into(), "num_videos".into(), "top1".into(), "top5".into()];
    header.extend(["gate_mean".to_string(), "gate_var".into()]);
    header.extend((0..num_classes).map(|c| format!("top1_class{c}")));
    header.extend((0..num_classes).map(|c| format!("gate_class{c}")));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for r in reports {
        let mut row = vec![
            r.name.clone(),
            r.split.clone(),
            r.num_videos.to_string(),
            format!("{}", r.top1),
            format!("{}", r.top5),
            opt(r.gate_mean),
            opt(r.gate_var),
        ];
        row.extend((0..num_classes).map(|c| opt(r.per_class_top1.get(&c).copied())));
        row.extend((0..num_classes).map(|c| opt(r.per_class_gate_mean.as_ref().and_then(|m| m.get(&c).copied()))));
        w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateStats {
    pub mean: f64,
    /// Population variance of the per-video gate means.
    pub variance: f64,
    pub per_class: BTreeMap<usize, f64>,
    pub per_video: Vec<f64>,
}

/// Dataset-level statistics of per-video gate means.
pub fn gate_statistics_of(preds: &[VideoPrediction], num_classes: usize) -> Result<GateStats> {
    let values: Vec<(usize, f64)> = preds
        .iter()
        .map(|p| p.gate_mean.map(|g| (p.label, g)))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::Config("gate statistics need a gated variant".into()))?;
    if values.is_empty() {
        return Err(Error::Empty("no videos for gate statistics"));
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|v| v.1).sum::<f64>() / n;
    let variance = values.iter().map(|v| (v.1 - mean).powi(2)).sum::<f64>() / n;
    let mut sums = vec![(0.0, 0usize); num_classes];
    for &(c, g) in &values {
        sums[c].0 += g;
        sums[c].1 += 1;
    }
    let per_class = sums
        .iter()
        .enumerate()
        .filter(|(_, s)| s.1 > 0)
        .map(|(c, s)| (c, s.0 / s.1 as f64))
        .collect();
    Ok(GateStats {
        mean,
        variance,
        per_class,
        per_video: values.iter().map(|v| v.1).collect(),
    })
}

/// Percentage of videos that either model classifies correctly.
pub fn oracle_selection(preds_a: &[VideoPrediction], preds_p: &[VideoPrediction], labels: &[usize]) -> Result<f64> {
    if preds_a.len() != preds_p.len() || preds_a.len() != labels.len() {
        return Err(shape_err("oracle inputs", preds_a.len(), (preds_p.len(), labels.len())));
    }
    let hits = preds_a
        .iter()
        .zip(preds_p)
        .zip(labels)
        .filter(|((a, p), &y)| a.top1() == y || p.top1() == y)
        .count();
    Ok(percent(hits, labels.len()))
}

/// Per-video gate means as CSV rows `video_id,action,context,split,gate_mean`.
pub fn write_gate_csv(path: &Path, rows: &[(String, usize, usize, String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    w.write_record(["video_id", "action", "context", "split", "gate_mean"])
        .map_err(|e| Error::Format(e.to_string()))?;
    for (id, a, c, s, g) in rows {
        w.write_record([id.clone(), a.to_string(), c.to_string(), s.clone(), format!("{g}")])
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Renders overlaid histograms (one color per series) of values in [0, 1].
pub fn write_gate_histogram(path: &Path, series: &[(&str, &[f64])], bins: usize) -> Result<()> {
    let (width, height) = (480u32, 240u32);
    let colors = [[220u8, 60, 60], [60, 90, 220], [40, 160, 80], [200, 140, 20]];
    let mut img = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    let bins = bins.max(1);
    let counts: Vec<Vec<usize>> = series
        .iter()
        .map(|(_, vals)| {
            let mut c = vec![0usize; bins];
            for &v in vals.iter() {
                c[((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)] += 1;
            }
            c
        })
        .collect();
    let peak = counts.iter().flatten().copied().max().unwrap_or(1).max(1);
    let bin_w = width as usize / bins;
    for (s, c) in counts.iter().enumerate() {
        let color = colors[s % colors.len()];
        for (b, &n) in c.iter().enumerate() {
            let bar = (n * (height as usize - 10) / peak) as u32;
            let x0 = (b * bin_w) as u32;
            for x in x0 + 1..(x0 + bin_w as u32).min(width) {
                for y in height - bar..height {
                    let px = img.get_pixel_mut(x, y);
                    // blend so overlapping series stay visible
                    for k in 0..3 {
                        px.0[k] = ((px.0[k] as u16 + color[k] as u16) / 2) as u8;
                    }
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    fn vp(label: usize, probs: &[f64], gate: Option<f64>) -> VideoPrediction {
        VideoPrediction {
            label,
            probs: arr1(probs),
            gate_mean: gate,
        }
    }

    #[test]
    fn constant_predictor_scores_chance() {
        let preds: Vec<_> = (0..4).map(|c| vp(c, &[0.25; 4], None)).collect();
        let r = MetricsReport::from_predictions("c0", "val", &preds, 4);
        assert_eq!(r.top1, 25.0);
        assert_eq!(r.top_k, 3);
        assert_eq!(r.top5, 75.0);
        assert!(r.gate_mean.is_none());
        let three: Vec<_> = (0..3).map(|c| vp(c, &[1.0 / 3.0; 3], None)).collect();
        assert_eq!(MetricsReport::from_predictions("c0", "val", &three, 3).top_k, 2);
    }

    #[test]
    fn top_k_covering_all_classes_is_perfect() {
        let preds = vec![vp(1, &[0.7, 0.1, 0.2], None), vp(2, &[0.5, 0.4, 0.1], None)];
        assert_eq!(top_k(&preds[0].probs, 3).len(), 3);
        assert!(preds.iter().all(|p| top_k(&p.probs, 3).contains(&p.label)));
    }

    #[test]
    fn oracle_is_union() {
        let labels = [0, 0, 0, 0];
        let right = || vp(0, &[0.9, 0.1], None);
        let wrong = || vp(0, &[0.1, 0.9], None);
        let a = vec![right(), right(), wrong(), wrong()];
        let p = vec![wrong(), right(), right(), wrong()];
        assert_eq!(oracle_selection(&a, &p, &labels).unwrap(), 75.0);
        assert_eq!(oracle_selection(&a, &a, &labels).unwrap(), 50.0);
        assert!(oracle_selection(&a, &p[..2], &labels).is_err());
    }

    #[test]
    fn gate_stats_algebra() {
        let preds = vec![vp(0, &[1.0, 0.0], Some(0.2)), vp(0, &[1.0, 0.0], Some(0.4)), vp(1, &[0.0, 1.0], Some(0.9))];
        let g = gate_statistics_of(&preds, 2).unwrap();
        assert!((g.mean - 0.5).abs() < 1e-12);
        let weighted = (g.per_class[&0] * 2.0 + g.per_class[&1]) / 3.0;
        assert!((weighted - g.mean).abs() < 1e-12);
        let constant = vec![vp(0, &[1.0, 0.0], Some(0.3)); 5];
        let c = gate_statistics_of(&constant, 2).unwrap();
        assert!((c.mean - 0.3).abs() < 1e-15 && c.variance < 1e-30);
        assert!(gate_statistics_of(&[vp(0, &[1.0, 0.0], None)], 2).is_err());
    }
}
