//! Evaluation over a split: IoU counts and uncertainty/error AUROC.

use candle_core::{DType, Tensor};
use riskseg_core::metrics::{auroc, EvalReport};
use riskseg_core::model::{ForwardOutput, Model};
use riskseg_core::synthdata::{Batch, SampleRecord};

use crate::error::Result;

/// Per-batch results of an eval-mode forward pass.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub out: ForwardOutput,
    /// Binary `(B, 1, H, W)`.
    pub pred: Tensor,
    /// Full-resolution `σ` of the uncertainty logits when the model has a scorer.
    pub u_p: Option<Tensor>,
}

pub fn predict(model: &Model, batch: &Batch) -> Result<Prediction> {
    let out = model.forward(&batch.images, &batch.tokens, None)?;
    let pred = out.prediction()?;
    let u_p = model.uncertainty_prob(&out)?.map(|p| p.values().clone());
    Ok(Prediction { out, pred, u_p })
}

/// `1` where the prediction disagrees with the ground truth.
pub fn error_map(pred: &Tensor, gt: &Tensor) -> Result<Tensor> {
    Ok(pred.ne(&gt.to_dtype(pred.dtype())?)?.to_dtype(DType::F32)?)
}

fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.flatten_from(1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

/// Runs the model in eval mode over `records`. With `with_auroc`, each sample
/// whose error map has both classes also contributes the AUROC of its
/// uncertainty map against that error map.
pub fn evaluate(model: &Model, records: &[SampleRecord], batch_size: usize, with_auroc: bool) -> Result<EvalReport> {
    let mut report = EvalReport::new();
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&SampleRecord> = chunk.iter().collect();
        let batch = Batch::from_records(&refs, model.dtype())?;
        let p = predict(model, &batch)?;
        report.add_batch(&p.pred, &batch.masks)?;
        if let (true, Some(u)) = (with_auroc, &p.u_p) {
            let err = rows_f64(&error_map(&p.pred, &batch.masks)?)?;
            for (scores, e) in rows_f64(u)?.iter().zip(err) {
                let labels: Vec<bool> = e.iter().map(|&v| v > 0.5).collect();
                if let Some(a) = auroc(scores, &labels) {
                    report.aurocs.push(a);
                }
            }
        }
    }
    Ok(report)
}
