use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use riskseg_core::maps::all_finite;
use riskseg_core::metrics::EvalReport;
use riskseg_core::model::{Flags, Model, ModelConfig};
use riskseg_core::synthdata::manifest::{parse_manifest, write_manifest};
use riskseg_core::synthdata::{make_split, regenerate, Batch, SceneConfig, SplitKind};

fn batch(n: usize) -> Batch {
    let (_, recs) = make_split(n, &SceneConfig::default(), 11, SplitKind::Val).unwrap();
    Batch::from_records(&recs.iter().collect::<Vec<_>>(), DType::F32).unwrap()
}

#[test]
fn every_flag_combination_runs_end_to_end() {
    let b = batch(2);
    for bits in 0..8u8 {
        let flags = Flags {
            use_ugf: bits & 1 != 0,
            use_udlr: bits & 2 != 0,
            use_unc_loss: bits & 4 != 0,
        };
        let m = Model::new(&ModelConfig { flags, ..Default::default() }, 3, DType::F32).unwrap();
        let out = m.forward(&b.images, &b.tokens, None).unwrap();
        assert_eq!(out.p_ref.dims(), (2, 64, 64), "{flags:?}");
        assert!(all_finite(out.p_ref.values()).unwrap());
        assert_eq!(out.u.is_some(), flags.needs_scorer());
        assert_eq!(out.delta.is_some(), flags.use_udlr);
        let again = m.forward(&b.images, &b.tokens, None).unwrap();
        assert_eq!(
            out.p_ref.values().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            again.p_ref.values().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let l = m.losses(&out, &b.masks, 10_000).unwrap();
        assert!(l.total.to_scalar::<f32>().unwrap().is_finite());
    }
}

#[test]
fn manifest_text_regenerates_identical_pixels() {
    let (manifest, records) = make_split(12, &SceneConfig::default(), 5, SplitKind::Test).unwrap();
    let text = write_manifest(&manifest);
    let parsed = parse_manifest(&text).unwrap();
    assert_eq!(parsed, manifest);
    let again = regenerate(&parsed).unwrap();
    for (a, b) in records.iter().zip(&again) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
        assert_eq!(a.tokens, b.tokens);
    }
}

fn masks(v: &[(bool, bool)]) -> (Tensor, Tensor) {
    let p: Vec<f32> = v.iter().map(|x| x.0 as u8 as f32).collect();
    let g: Vec<f32> = v.iter().map(|x| x.1 as u8 as f32).collect();
    let n = v.len() / 4;
    (
        Tensor::from_vec(p, (n, 1, 2, 2), &Device::Cpu).unwrap(),
        Tensor::from_vec(g, (n, 1, 2, 2), &Device::Cpu).unwrap(),
    )
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(v in proptest::collection::vec((any::<bool>(), any::<bool>()), 4..=64)) {
        let v = &v[..v.len() / 4 * 4];
        let (p, g) = masks(v);
        let mut a = EvalReport::new();
        a.add_batch(&p, &g).unwrap();
        let mut b = EvalReport::new();
        b.add_batch(&g, &p).unwrap();
        prop_assert_eq!(&a.ious(), &b.ious());
        let lo = a.ious().iter().copied().fold(1.0, f64::min);
        let hi = a.ious().iter().copied().fold(0.0, f64::max);
        prop_assert!((0.0..=1.0).contains(&a.miou()));
        prop_assert!(a.miou() >= lo - 1e-12 && a.miou() <= hi + 1e-12);
    }
}
