//! Browser bindings: generate a synthetic sample, show what each encoder
//! stage of a freshly initialized network sees, score a hand-painted
//! prediction, and count parameters/FLOPs for a configuration.

use wasm_bindgen::prelude::*;

use lucf::data::{gen_sample, DatasetSpec, ShapeFamily};
use lucf::metrics::{dsc, hausdorff, iou, Mask, Spacing};
use lucf::model::{complexity, LucfNet, ModelConfig};
use lucf::nn::Mode;
use lucf::tensor::Tensor;

fn js(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn family(name: &str) -> Result<ShapeFamily, JsValue> {
    match name {
        "ellipses" => Ok(ShapeFamily::Ellipses),
        "polygons" => Ok(ShapeFamily::Polygons),
        "nested" => Ok(ShapeFamily::Nested),
        other => Err(js(format!("unknown shape family {other:?}"))),
    }
}

/// A square single-channel sample: 8-bit intensities and class labels.
#[wasm_bindgen]
pub struct Sample {
    size: usize,
    image: Vec<u8>,
    labels: Vec<u8>,
}

#[wasm_bindgen]
impl Sample {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn image(&self) -> Vec<u8> {
        self.image.clone()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.labels.clone()
    }
}

#[wasm_bindgen]
pub fn synth_sample(seed: u64, shape_family: &str, size: usize) -> Result<Sample, JsValue> {
    let spec = DatasetSpec {
        num_samples: 1,
        size: (size, size),
        num_classes: 4,
        shape_family: family(shape_family)?,
        seed,
        ..DatasetSpec::default()
    };
    spec.validate().map_err(js)?;
    let s = gen_sample(&spec, 0).map_err(js)?;
    Ok(Sample {
        size,
        image: s.image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
        labels: s.label.data().iter().map(|&l| l as u8).collect(),
    })
}

/// Channel-averaged encoder features of a randomly initialized network,
/// stages 1-4 concatenated (each `size / 2^stage` square, 0-255).
#[wasm_bindgen]
pub fn feature_maps(image: &[u8], size: usize, base_width: usize, seed: u64) -> Result<Vec<u8>, JsValue> {
    if image.len() != size * size {
        return Err(js(format!("expected {} pixels, got {}", size * size, image.len())));
    }
    let cfg = ModelConfig {
        base_width,
        heads: [1, 1, 1, 1],
        input_size: (size, size),
        ..ModelConfig::default()
    };
    let net = LucfNet::new(&cfg, seed).map_err(js)?;
    let x = Tensor::new(&[1, 1, size, size], image.iter().map(|&v| f64::from(v) / 255.0).collect()).map_err(js)?;
    let mut out = Vec::new();
    for stage in 1..=4 {
        let map = net.dump_features(&x, stage, Mode::Eval).map_err(js)?;
        out.extend(map.data().iter().map(|v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

/// `[dsc, iou, hd95, hd100]` of two binary masks (nonzero = foreground).
#[wasm_bindgen]
pub fn mask_metrics(pred: &[u8], gt: &[u8], size: usize) -> Result<Vec<f64>, JsValue> {
    let mask = |m: &[u8]| Mask::new(size, size, m.iter().map(|&v| v != 0).collect()).map_err(js);
    let (p, g) = (mask(pred)?, mask(gt)?);
    let sp = Spacing::default();
    Ok(vec![
        dsc(&p, &g).map_err(js)?,
        iou(&p, &g).map_err(js)?,
        hausdorff(&p, &g, 95.0, sp).map_err(js)?,
        hausdorff(&p, &g, 100.0, sp).map_err(js)?,
    ])
}

/// JSON `{params, flops}` for a 4-class model at `size x size`.
#[wasm_bindgen]
pub fn model_summary(base_width: usize, lg_enabled: bool, fusion_depth: usize, size: usize) -> Result<String, JsValue> {
    let cfg = ModelConfig {
        base_width,
        lg_enabled,
        fusion_depth,
        input_size: (size, size),
        ..ModelConfig::default()
    };
    cfg.validate().map_err(js)?;
    cfg.check_input_size(size, size).map_err(js)?;
    Ok(serde_json::to_string(&complexity(&cfg, (size, size))).expect("counts serialize"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_and_features() {
        let s = synth_sample(1, "nested", 32).unwrap();
        assert_eq!(s.image().len(), 32 * 32);
        assert!(s.labels().iter().all(|&l| l < 4));
        let f = feature_maps(&s.image(), 32, 2, 0).unwrap();
        assert_eq!(f.len(), 16 * 16 + 8 * 8 + 4 * 4 + 2 * 2);
    }

    #[test]
    fn metrics_of_identical_masks() {
        let m: Vec<u8> = (0..64).map(|i| u8::from(i % 3 == 0)).collect();
        assert_eq!(mask_metrics(&m, &m, 8).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn summary_is_json() {
        let v: serde_json::Value = serde_json::from_str(&model_summary(4, true, 4, 64).unwrap()).unwrap();
        assert!(v["params"].as_u64().unwrap() > 0);
    }
}
