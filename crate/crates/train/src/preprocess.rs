//! Resize to the backbone's input and apply its family preprocessing.

use candle_core::{Device, Tensor};
use spillsense_core::frame::Frame;
use spillsense_core::geometry::resize_frame;

use crate::registry::{BackboneSpec, PreprocessId};
use crate::TrainError;

/// ImageNet channel means in BGR order, 0..255 scale.
pub const CAFFE_MEAN_BGR: [f32; 3] = [103.939, 116.779, 123.68];
pub const TORCH_MEAN_RGB: [f32; 3] = [0.485, 0.456, 0.406];
pub const TORCH_STD_RGB: [f32; 3] = [0.229, 0.224, 0.225];

/// CHW values for one frame.
pub fn preprocess_values(frame: &Frame, spec: &BackboneSpec) -> Result<Vec<f32>, TrainError> {
    if frame.pixels().len() != (frame.width() * frame.height() * 3) as usize {
        return Err(TrainError::Channels);
    }
    let (w, h) = spec.native_input;
    let resized;
    let f = if frame.dims() == (w, h) {
        frame
    } else {
        resized = resize_frame(frame, w, h)?;
        &resized
    };
    let plane = (w * h) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in f.pixels().chunks_exact(3).enumerate() {
        for c in 0..3 {
            let v = px[c] as f32;
            let (dst, val) = match spec.preprocess_id {
                // RGB -> BGR, mean subtracted
                PreprocessId::Caffe => (2 - c, v - CAFFE_MEAN_BGR[2 - c]),
                PreprocessId::Tf => (c, v / 127.5 - 1.0),
                PreprocessId::Torch => (c, (v / 255.0 - TORCH_MEAN_RGB[c]) / TORCH_STD_RGB[c]),
                PreprocessId::Passthrough => (c, v),
            };
            out[dst * plane + i] = val;
        }
    }
    Ok(out)
}

/// Tensor of shape `(n, 3, h, w)`.
pub fn preprocess_batch(frames: &[&Frame], spec: &BackboneSpec, device: &Device) -> Result<Tensor, TrainError> {
    let (w, h) = spec.native_input;
    let mut data = Vec::with_capacity(frames.len() * 3 * (w * h) as usize);
    for f in frames {
        data.extend(preprocess_values(f, spec)?);
    }
    Ok(Tensor::from_vec(data, (frames.len(), 3, h as usize, w as usize), device)?)
}

pub fn preprocess(frame: &Frame, spec: &BackboneSpec) -> Result<Tensor, TrainError> {
    preprocess_batch(&[frame], spec, &Device::Cpu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{find_backbone, list_backbones};
    use spillsense_core::frame::Modality;

    fn thermal() -> Frame {
        let mut f = Frame::filled(256, 192, Modality::Thermal, [0; 3]);
        for (i, v) in f.pixels_mut().iter_mut().enumerate() {
            *v = (i * 7 % 256) as u8;
        }
        f
    }

    #[test]
    fn deterministic_and_native_sized() {
        let spec = find_backbone("VGG19").unwrap();
        let a = preprocess(&thermal(), &spec).unwrap();
        let b = preprocess(&thermal(), &spec).unwrap();
        assert_eq!(a.dims(), [1, 3, 224, 224]);
        let av: Vec<f32> = a.flatten_all().unwrap().to_vec1().unwrap();
        let bv: Vec<f32> = b.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(av, bv);
    }

    #[test]
    fn all_families_give_finite_floats() {
        for spec in list_backbones() {
            for fill in [0u8, 255] {
                let f = Frame::filled(256, 192, Modality::Thermal, [fill; 3]);
                let v = preprocess_values(&f, &spec).unwrap();
                assert_eq!(v.len(), 3 * (spec.native_input.0 * spec.native_input.1) as usize);
                assert!(v.iter().all(|x| x.is_finite()), "{}", spec.name);
            }
        }
    }

    #[test]
    fn caffe_swaps_to_bgr_and_subtracts_means() {
        let spec = find_backbone("VGG19").unwrap();
        let f = Frame::filled(224, 224, Modality::Rgb, [10, 20, 30]);
        let v = preprocess_values(&f, &spec).unwrap();
        let plane = 224 * 224;
        assert_eq!(v[0], 30.0 - 103.939);
        assert_eq!(v[plane], 20.0 - 116.779);
        assert_eq!(v[2 * plane], 10.0 - 123.68);
    }

    #[test]
    fn tf_maps_to_unit_range() {
        let spec = find_backbone("InceptionV3").unwrap();
        let lo = preprocess_values(&Frame::filled(299, 299, Modality::Rgb, [0; 3]), &spec).unwrap();
        let hi = preprocess_values(&Frame::filled(299, 299, Modality::Rgb, [255; 3]), &spec).unwrap();
        assert_eq!(lo[0], -1.0);
        assert_eq!(hi[0], 1.0);
    }
}
