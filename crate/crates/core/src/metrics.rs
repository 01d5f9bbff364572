//! Referring-segmentation metrics: overall IoU (area-weighted), mean IoU,
//! precision at IoU thresholds, and the pixelwise AUROC of an uncertainty map
//! against the error map.
//!
//! Conventions: an empty union counts as IoU 1; `Pr@X` counts samples with
//! IoU strictly above `X`.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::maps::check_binary;

pub const PR_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

fn counts_of(pred: &Tensor, gt: &Tensor) -> Result<(Vec<u64>, Vec<u64>)> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape("iou", format!("{:?}", gt.dims()), format!("{:?}", pred.dims())));
    }
    check_binary(pred, "prediction mask")?;
    check_binary(gt, "ground-truth mask")?;
    let b = pred.dims()[0];
    let p = pred.to_dtype(DType::F64)?.reshape((b, ()))?;
    let g = gt.to_dtype(DType::F64)?.reshape((b, ()))?;
    let inter = p.mul(&g)?;
    let union = ((&p + &g)? - &inter)?;
    let to_counts = |t: Tensor| -> Result<Vec<u64>> {
        Ok(t.sum(1)?.to_vec1::<f64>()?.into_iter().map(|v| v as u64).collect())
    };
    Ok((to_counts(inter)?, to_counts(union)?))
}

fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// IoU of a single pair of binary masks (any shape, batch of one or flat).
pub fn sample_iou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (i, u) = counts_of(&pred.unsqueeze(0)?, &gt.unsqueeze(0)?)?;
    Ok(ratio(i[0], u[0]))
}

/// Per-sample intersection/union counts plus optional per-sample AUROC.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub intersections: Vec<u64>,
    pub unions: Vec<u64>,
    /// AUROC of the uncertainty map against the error map, for samples where
    /// both classes are present.
    pub aurocs: Vec<f64>,
}

impl EvalReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, inter: u64, union: u64) {
        debug_assert!(inter <= union);
        self.intersections.push(inter);
        self.unions.push(union);
    }

    /// Adds a batch of binary masks `(B, ...)`.
    pub fn add_batch(&mut self, pred: &Tensor, gt: &Tensor) -> Result<()> {
        let (i, u) = counts_of(pred, gt)?;
        for (i, u) in i.into_iter().zip(u) {
            self.push(i, u);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalReport) {
        self.intersections.extend_from_slice(&other.intersections);
        self.unions.extend_from_slice(&other.unions);
        self.aurocs.extend_from_slice(&other.aurocs);
    }

    pub fn len(&self) -> usize {
        self.unions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.unions.is_empty()
    }

    pub fn ious(&self) -> Vec<f64> {
        self.intersections.iter().zip(&self.unions).map(|(&i, &u)| ratio(i, u)).collect()
    }

    pub fn oiou(&self) -> f64 {
        ratio(self.intersections.iter().sum(), self.unions.iter().sum())
    }

    pub fn miou(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.ious().iter().sum::<f64>() / self.len() as f64
    }

    pub fn precision_at(&self, x: f64) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.ious().iter().filter(|&&v| v > x).count() as f64 / self.len() as f64
    }

    pub fn mean_auroc(&self) -> Option<f64> {
        if self.aurocs.is_empty() {
            None
        } else {
            Some(self.aurocs.iter().sum::<f64>() / self.aurocs.len() as f64)
        }
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            precision: PR_THRESHOLDS.map(|x| self.precision_at(x)),
            oiou: self.oiou(),
            miou: self.miou(),
            auroc: self.mean_auroc(),
            samples: self.len(),
        }
    }
}

/// Scalar metrics derived from an [`EvalReport`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSummary {
    pub precision: [f64; 5],
    pub oiou: f64,
    pub miou: f64,
    pub auroc: Option<f64>,
    pub samples: usize,
}

impl MetricSummary {
    /// `(name, value)` pairs in report order.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = PR_THRESHOLDS
            .iter()
            .zip(self.precision)
            .map(|(x, v)| (format!("pr@{x:.1}"), v))
            .collect();
        out.push(("oiou".into(), self.oiou));
        out.push(("miou".into(), self.miou));
        if let Some(a) = self.auroc {
            out.push(("auroc".into(), a));
        }
        out
    }

    /// Machine-readable `name = value` lines, 6 decimal places.
    pub fn to_key_values(&self) -> String {
        let mut s = format!("samples = {}\n", self.samples);
        for (k, v) in self.entries() {
            writeln!(s, "{k} = {v:.6}").unwrap();
        }
        s
    }

    /// Parses the output of [`MetricSummary::to_key_values`].
    pub fn from_key_values(text: &str) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed report line {line:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value in report line {line:?}")))?;
            map.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| map.get(k).copied().ok_or_else(|| Error::Config(format!("report missing {k}")));
        let mut precision = [0.0; 5];
        for (p, x) in precision.iter_mut().zip(PR_THRESHOLDS) {
            *p = get(&format!("pr@{x:.1}"))?;
        }
        Ok(Self {
            precision,
            oiou: get("oiou")?,
            miou: get("miou")?,
            auroc: map.get("auroc").copied(),
            samples: get("samples")? as usize,
        })
    }

    /// One-row text table with a header, values in percent.
    pub fn to_table(&self) -> String {
        let entries = self.entries();
        let header: Vec<String> = entries.iter().map(|(k, _)| format!("{k:>8}")).collect();
        let row: Vec<String> = entries.iter().map(|(_, v)| format!("{:>8.2}", 100.0 * v)).collect();
        format!("{}\n{}\n", header.join(" "), row.join(" "))
    }
}

/// Area under the ROC curve of `scores` for separating positive from negative
/// labels (Mann-Whitney statistic, ties counted as one half). `None` when one
/// class is absent.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::splitmix64;
    use candle_core::Device;
    use proptest::prelude::*;

    fn mask(v: &[u8], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v.iter().map(|&x| x as f32).collect::<Vec<_>>(), (1, h, w), &Device::Cpu).unwrap()
    }

    fn brute(p: &[u8], g: &[u8]) -> (u64, u64) {
        let mut i = 0;
        let mut u = 0;
        for k in 0..p.len() {
            if p[k] == 1 && g[k] == 1 {
                i += 1;
            }
            if p[k] == 1 || g[k] == 1 {
                u += 1;
            }
        }
        (i, u)
    }

    fn report(pairs: &[(u64, u64)]) -> EvalReport {
        let mut r = EvalReport::new();
        for &(i, u) in pairs {
            r.push(i, u);
        }
        r
    }

    #[test]
    fn sample_iou_examples() {
        let a = [1, 1, 0, 0];
        assert_eq!(sample_iou(&mask(&a, 2, 2), &mask(&a, 2, 2)).unwrap(), 1.0);
        assert_eq!(sample_iou(&mask(&[1, 1, 0, 0], 2, 2), &mask(&[0, 0, 1, 1], 2, 2)).unwrap(), 0.0);
        assert_eq!(sample_iou(&mask(&[0; 4], 2, 2), &mask(&[0; 4], 2, 2)).unwrap(), 1.0);
        // 2x2 blocks in a 3x3 grid offset by one column: I = 2, U = 6.
        let p = [1, 1, 0, 1, 1, 0, 0, 0, 0];
        let g = [0, 1, 1, 0, 1, 1, 0, 0, 0];
        assert!((sample_iou(&mask(&p, 3, 3), &mask(&g, 3, 3)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let soft = Tensor::new(&[[0.5f32, 1.0]], &Device::Cpu).unwrap();
        assert!(matches!(sample_iou(&soft, &soft), Err(Error::NotBinary { .. })));
    }

    #[test]
    fn aggregate_examples() {
        assert_eq!(report(&[(2, 4), (3, 6)]).oiou(), 0.5);
        assert_eq!(report(&[(5, 5), (7, 7)]).oiou(), 1.0);
        assert_eq!(report(&[(0, 0)]).oiou(), 1.0);
        // Large perfect sample dominates the area-weighted ratio.
        let r = report(&[(1000, 1000), (0, 10)]);
        assert!((r.oiou() - 1000.0 / 1010.0).abs() < 1e-15);
        assert_eq!(r.miou(), 0.5);
        assert!(r.oiou() > r.miou() + 0.4);

        assert_eq!(report(&[(1, 2), (2, 4)]).miou(), 0.5);
        let r = report(&[(6, 10), (4, 10), (5, 10)]);
        assert!((r.precision_at(0.5) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn batch_counts_match_brute_force_on_random_pairs() {
        let mut s = 42u64;
        let mut bits = |n: usize| -> Vec<u8> {
            (0..n)
                .map(|_| {
                    s = splitmix64(s);
                    (s % 2) as u8
                })
                .collect()
        };
        let mut vec_report = EvalReport::new();
        let mut oracle = Vec::new();
        for _ in 0..200 {
            let (p, g) = (bits(64), bits(64));
            vec_report.add_batch(&mask(&p, 8, 8), &mask(&g, 8, 8)).unwrap();
            oracle.push(brute(&p, &g));
        }
        let brute_report = report(&oracle);
        assert_eq!(vec_report, brute_report);
        let (si, su): (u64, u64) = oracle.iter().fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        assert_eq!(vec_report.oiou(), si as f64 / su as f64);
    }

    #[test]
    fn merge_is_order_independent_in_scalars() {
        let a = report(&[(1, 3), (4, 4)]);
        let b = report(&[(0, 2)]);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab.oiou(), ba.oiou());
        assert!((ab.miou() - ba.miou()).abs() < 1e-15);
        assert_eq!(ab.precision_at(0.3), ba.precision_at(0.3));
    }

    #[test]
    fn key_values_round_trip() {
        let mut r = report(&[(6, 10), (4, 10), (5, 10)]);
        r.aurocs = vec![0.75, 0.5];
        let s = r.summary();
        let text = s.to_key_values();
        assert!(text.contains("miou = 0.500000"));
        assert!(text.contains("auroc = 0.625000"));
        let back = MetricSummary::from_key_values(&text).unwrap();
        assert_eq!(back.samples, 3);
        assert!((back.miou - s.miou).abs() < 1e-6);
        assert!(s.to_table().lines().count() == 2);
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), Some(0.0));
        assert_eq!(auroc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(auroc(&[0.1, 0.2], &[true, true]), None);
        // One positive ranked above one of two negatives.
        assert_eq!(auroc(&[0.3, 0.1, 0.5], &[true, false, false]), Some(0.5));
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_counting(v in proptest::collection::vec((0u8..5, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = v.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<bool> = v.iter().map(|(_, l)| *l).collect();
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if labels[i] && !labels[j] {
                        pairs += 1.0;
                        wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                    }
                }
            }
            let got = auroc(&scores, &labels);
            if pairs == 0.0 {
                prop_assert!(got.is_none());
            } else {
                prop_assert!((got.unwrap() - wins / pairs).abs() < 1e-12);
            }
        }

        #[test]
        fn precision_is_monotone_and_oiou_is_a_mediant(v in proptest::collection::vec((0u64..50, 1u64..50), 1..30)) {
            let pairs: Vec<(u64, u64)> = v.iter().map(|&(i, u)| (i.min(u), u)).collect();
            let r = report(&pairs);
            let pr = r.summary().precision;
            for k in 1..pr.len() {
                prop_assert!(pr[k - 1] >= pr[k]);
            }
            let ious = r.ious();
            let lo = ious.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = ious.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(r.oiou() >= lo - 1e-15 && r.oiou() <= hi + 1e-15);
        }
    }
}
