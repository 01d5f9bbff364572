//! Uncertainty-map export: PNG renders plus a plain-text grid of `U^p`.
//!
//! For sample `k` of a split, writes into the output directory:
//!
//! - `k_input.png`, `k_gt.png`, `k_pred.png` (input with mask overlays)
//! - `k_unc.png`: `U^p` normalised to the sample's min/max, cold to warm
//! - `k_error.png`: white where the prediction differs from the ground truth
//! - `k_unc.txt`: `U^p` row-major, one image row per line, 6 decimals

use std::path::{Path, PathBuf};

use candle_core::DType;
use image::{Rgb, RgbImage};
use riskseg_core::model::Model;
use riskseg_core::synthdata::{Batch, SampleRecord};

use crate::error::{HarnessError, Result};
use crate::eval::{error_map, predict};

/// Cold-to-warm ramp: 0 → dark blue, 0.5 → yellow-ish, 1 → red.
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let stops: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.5, 1.0]),
        (0.5, [0.5, 1.0, 0.5]),
        (0.75, [1.0, 0.8, 0.0]),
        (1.0, [0.8, 0.0, 0.0]),
    ];
    let i = stops.iter().rposition(|(s, _)| *s <= t).unwrap().min(stops.len() - 2);
    let (s0, c0) = stops[i];
    let (s1, c1) = stops[i + 1];
    let f = (t - s0) / (s1 - s0);
    std::array::from_fn(|k| ((c0[k] + (c1[k] - c0[k]) * f) * 255.0).round() as u8)
}

/// Normalises `values` to `[0, 1]` by their own min and max; a constant map
/// becomes all zeros.
pub fn normalise(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values.iter().map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect()
}

pub fn format_grid(values: &[f64], w: usize) -> String {
    let mut s = String::new();
    for row in values.chunks(w) {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        s += &line.join(" ");
        s.push('\n');
    }
    s
}

pub fn parse_grid(text: &str) -> Option<Vec<f64>> {
    text.split_whitespace().map(|x| x.parse().ok()).collect()
}

fn render_input(rec: &SampleRecord) -> RgbImage {
    let n = rec.size;
    RgbImage::from_fn(n as u32, n as u32, |x, y| {
        let i = y as usize * n + x as usize;
        Rgb(std::array::from_fn(|c| (rec.image[c * n * n + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn overlay(base: &RgbImage, mask: &[bool], color: [u8; 3]) -> RgbImage {
    let w = base.width() as usize;
    let mut img = base.clone();
    for (x, y, p) in img.enumerate_pixels_mut() {
        if mask[y as usize * w + x as usize] {
            *p = Rgb(std::array::from_fn(|c| ((p[c] as u16 + color[c] as u16) / 2) as u8));
        }
    }
    img
}

fn gray(mask: &[bool], n: usize) -> RgbImage {
    RgbImage::from_fn(n as u32, n as u32, |x, y| if mask[y as usize * n + x as usize] { Rgb([255; 3]) } else { Rgb([0; 3]) })
}

/// Files written for one sample.
#[derive(Debug, Clone)]
pub struct Exported {
    pub index: usize,
    pub files: Vec<PathBuf>,
    /// In-memory `U^p` the sidecar was written from.
    pub u_p: Vec<f64>,
    pub error: Vec<bool>,
}

/// Exports the listed sample indices of `records`. Indices out of range are
/// skipped with a warning.
pub fn export_uncertainty(model: &Model, records: &[SampleRecord], ids: &[usize], out_dir: &Path) -> Result<Vec<Exported>> {
    if model.rus.is_none() {
        return Err(HarnessError::Config("this model has no uncertainty scorer; enable use_ugf, use_udlr or use_unc_loss".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(HarnessError::io(out_dir))?;
    let mut done = Vec::new();
    for &k in ids {
        let Some(rec) = records.get(k) else {
            log::warn!("sample {k} does not exist (split has {}), skipping", records.len());
            continue;
        };
        let batch = Batch::from_records(&[rec], model.dtype())?;
        let p = predict(model, &batch)?;
        let n = rec.size;
        let u_p: Vec<f64> = p.u_p.as_ref().unwrap().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
        let pred: Vec<bool> = p.pred.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?.iter().map(|&v| v > 0.5).collect();
        let error: Vec<bool> = error_map(&p.pred, &batch.masks)?.flatten_all()?.to_vec1::<f32>()?.iter().map(|&v| v > 0.5).collect();
        let gt: Vec<bool> = rec.mask.iter().map(|&m| m > 0).collect();

        let input = render_input(rec);
        let heat = normalise(&u_p);
        let unc = RgbImage::from_fn(n as u32, n as u32, |x, y| Rgb(heat_color(heat[y as usize * n + x as usize])));
        let images = [
            ("input", input.clone()),
            ("gt", overlay(&input, &gt, [0, 255, 0])),
            ("pred", overlay(&input, &pred, [255, 0, 255])),
            ("unc", unc),
            ("error", gray(&error, n)),
        ];
        let mut files = Vec::new();
        for (tag, img) in images {
            let path = out_dir.join(format!("{k}_{tag}.png"));
            img.save(&path).map_err(|e| HarnessError::Io {
                path: path.clone(),
                source: std::io::Error::other(e),
            })?;
            files.push(path);
        }
        let path = out_dir.join(format!("{k}_unc.txt"));
        std::fs::write(&path, format_grid(&u_p, n)).map_err(HarnessError::io(&path))?;
        files.push(path);
        done.push(Exported { index: k, files, u_p, error });
    }
    Ok(done)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_endpoints_and_normalisation() {
        assert_eq!(heat_color(0.0), [0, 0, 128]);
        assert_eq!(heat_color(1.0), [204, 0, 0]);
        assert_eq!(heat_color(-3.0), heat_color(0.0));
        let n = normalise(&[0.2, 0.6, 0.4]);
        assert_eq!((n[0], n[1]), (0.0, 1.0));
        assert!((n[2] - 0.5).abs() < 1e-12);
        assert_eq!(normalise(&[0.3, 0.3]), vec![0.0, 0.0]);
    }

    #[test]
    fn grid_round_trip() {
        let v = vec![0.1234564, 1.0, 0.0, 0.5];
        let text = format_grid(&v, 2);
        assert_eq!(text, "0.123456 1.000000\n0.000000 0.500000\n");
        let back = parse_grid(&text).unwrap();
        for (a, b) in v.iter().zip(back) {
            assert!((a - b).abs() <= 5e-7);
        }
    }
}
