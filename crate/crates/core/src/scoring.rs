//! Anomaly maps, image scores, AUROC and heatmap output.

use std::fmt;
use std::path::Path;

use maae_tensor::{Tensor, TensorError};

use crate::error::{MaaeError, Result};
use crate::resample;

/// Per-pixel anomaly scores at evaluation resolution, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub image_id: String,
}

/// Upsampled per-token residual norms of `y − x_ref` (both `N×C`).
pub fn anomaly_map(
    y: &Tensor<f32>,
    x_ref: &Tensor<f32>,
    grid: (usize, usize),
    out_hw: (usize, usize),
    image_id: impl Into<String>,
) -> Result<AnomalyMap> {
    y.check_same_shape(x_ref, "anomaly_map")?;
    let (n, c) = y.dims2("anomaly_map")?;
    if n != grid.0 * grid.1 || out_hw.0 < grid.0 || out_hw.1 < grid.1 {
        return Err(TensorError::ShapeMismatch {
            op: "anomaly_map",
            lhs: vec![n, c],
            rhs: vec![grid.0, grid.1, out_hw.0, out_hw.1],
        }
        .into());
    }
    let norms: Vec<f32> = y
        .data()
        .chunks(c)
        .zip(x_ref.data().chunks(c))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f32>().sqrt())
        .collect();
    Ok(AnomalyMap {
        height: out_hw.0,
        width: out_hw.1,
        values: resample::bilinear(&norms, grid.0, grid.1, out_hw.0, out_hw.1, true),
        image_id: image_id.into(),
    })
}

/// Image score: the map maximum.
pub fn anomaly_score(map: &AnomalyMap) -> Result<f32> {
    map.values.iter().copied().reduce(f32::max).ok_or(MaaeError::EmptyMap)
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MaaeError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut positive_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let midrank = (i + j + 1) as f64 / 2.0;
        let tied_positives = order[i..j].iter().filter(|&&k| labels[k]).count();
        positive_rank_sum += midrank * tied_positives as f64;
        i = j;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Pools every pixel of every map against its mask.
pub fn pixel_auroc(maps: &[AnomalyMap], masks: &[Vec<bool>]) -> Result<f64> {
    assert_eq!(maps.len(), masks.len(), "one mask per map");
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if mask.len() != map.values.len() {
            return Err(MaaeError::BadDims {
                height: map.height,
                width: map.width,
                reason: "mask size differs from the anomaly map",
            });
        }
        scores.extend(map.values.iter().map(|&v| v as f64));
        labels.extend_from_slice(mask);
    }
    auroc(&scores, &labels)
}

/// Min-max normalized 8-bit grayscale PGM (P5); a constant map is mid-gray.
pub fn heatmap_pgm(map: &AnomalyMap) -> Vec<u8> {
    let lo = map.values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = map.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(map.values.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            128
        }
    }));
    out
}

pub fn emit_heatmap(map: &AnomalyMap, path: &Path) -> Result<()> {
    std::fs::write(path, heatmap_pgm(map)).map_err(|e| MaaeError::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassResult {
    pub class_name: String,
    pub image_auroc: f64,
    /// `None` when the class has no anomalous pixels to rank.
    pub pixel_auroc: Option<f64>,
    pub num_normal: usize,
    pub num_anomalous: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassResult>,
    pub config_digest: String,
}

impl EvalReport {
    pub fn mean_image_auroc(&self) -> f64 {
        self.classes.iter().map(|c| c.image_auroc).sum::<f64>() / self.classes.len() as f64
    }

    pub fn mean_pixel_auroc(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.classes.iter().map(|c| c.pixel_auroc).collect();
        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pix = |p: Option<f64>| p.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        writeln!(f, "class\timage_auroc\tpixel_auroc")?;
        for c in &self.classes {
            writeln!(f, "{}\t{:.6}\t{}", c.class_name, c.image_auroc, pix(c.pixel_auroc))?;
        }
        writeln!(f, "average\t{:.6}\t{}", self.mean_image_auroc(), pix(self.mean_pixel_auroc()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Vec<f32>, h: usize, w: usize) -> AnomalyMap {
        AnomalyMap {
            height: h,
            width: w,
            values,
            image_id: "m".into(),
        }
    }

    #[test]
    fn map_of_exact_reconstruction_is_zero() {
        let x = Tensor::from_fn(&[16, 5], |i| i as f32);
        let m = anomaly_map(&x, &x, (4, 4), (16, 16), "a").unwrap();
        assert!(m.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_map_is_constant_norm() {
        let y = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let x = Tensor::zeros(&[1, 2]);
        let m = anomaly_map(&y, &x, (1, 1), (8, 8), "a").unwrap();
        assert!(m.values.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn score_is_maximum() {
        assert_eq!(anomaly_score(&map(vec![0.0; 4], 2, 2)).unwrap(), 0.0);
        assert_eq!(anomaly_score(&map(vec![0.0, 7.5, 1.0, 0.0], 2, 2)).unwrap(), 7.5);
        assert!(matches!(anomaly_score(&map(vec![], 0, 0)), Err(MaaeError::EmptyMap)));
    }

    #[test]
    fn auroc_basic_cases() {
        assert_eq!(auroc(&[0.1, 0.9], &[false, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.4; 6], &[false, true, false, true, true, false]).unwrap(), 0.5);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(MaaeError::DegenerateLabels)));
    }

    #[test]
    fn pixel_auroc_extremes() {
        let mask = vec![false, true, false, false];
        let exact = map(mask.iter().map(|&b| b as u8 as f32).collect(), 2, 2);
        let inverse = map(mask.iter().map(|&b| 1.0 - b as u8 as f32).collect(), 2, 2);
        assert_eq!(pixel_auroc(&[exact], std::slice::from_ref(&mask)).unwrap(), 1.0);
        assert_eq!(pixel_auroc(&[inverse], &[mask]).unwrap(), 0.0);
    }

    #[test]
    fn heatmap_normalization() {
        let bytes = heatmap_pgm(&map(vec![2.0; 4], 2, 2));
        assert_eq!(&bytes[bytes.len() - 4..], &[128; 4]);
        let bytes = heatmap_pgm(&map(vec![1.0, 3.0, 2.0, 5.0], 2, 2));
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 128, 64, 255]);
    }

    #[test]
    fn report_text_has_average_row() {
        let r = EvalReport {
            classes: vec![
                ClassResult {
                    class_name: "a".into(),
                    image_auroc: 1.0,
                    pixel_auroc: Some(0.5),
                    num_normal: 1,
                    num_anomalous: 1,
                },
                ClassResult {
                    class_name: "b".into(),
                    image_auroc: 0.5,
                    pixel_auroc: Some(1.0),
                    num_normal: 1,
                    num_anomalous: 1,
                },
            ],
            config_digest: String::new(),
        };
        let text = r.to_string();
        assert!(text.ends_with("average\t0.750000\t0.750000\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
