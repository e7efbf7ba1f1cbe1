//! The fixed set of supported backbones.

use serde::{Deserialize, Serialize};

use crate::TrainError;

/// Family-canonical input preprocessing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreprocessId {
    /// BGR channel order, ImageNet mean subtracted, no scaling.
    Caffe,
    /// Scale to [-1, 1].
    Tf,
    /// Scale to [0, 1], then ImageNet mean/std normalisation.
    Torch,
    /// Raw 0..255; the network rescales internally.
    Passthrough,
}

impl PreprocessId {
    pub fn as_str(self) -> &'static str {
        match self {
            PreprocessId::Caffe => "caffe",
            PreprocessId::Tf => "tf",
            PreprocessId::Torch => "torch",
            PreprocessId::Passthrough => "passthrough",
        }
    }
}

impl std::str::FromStr for PreprocessId {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "caffe" => Ok(PreprocessId::Caffe),
            "tf" => Ok(PreprocessId::Tf),
            "torch" => Ok(PreprocessId::Torch),
            "passthrough" => Ok(PreprocessId::Passthrough),
            other => Err(TrainError::UnknownPreprocess(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Vgg,
    ResNet,
    ResNetV2,
    EfficientNet,
    Inception,
    InceptionResNet,
    Xception,
    DenseNet,
    NasNet,
    EfficientNetV2,
    ConvNeXt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BackboneSpec {
    pub name: &'static str,
    /// (width, height) in pixels.
    pub native_input: (u32, u32),
    pub preprocess_id: PreprocessId,
    pub family: Family,
}

const REGISTRY: [BackboneSpec; 11] = [
    spec("VGG19", 224, PreprocessId::Caffe, Family::Vgg),
    spec("ResNet50", 224, PreprocessId::Caffe, Family::ResNet),
    spec("ResNet50V2", 224, PreprocessId::Tf, Family::ResNetV2),
    spec("EfficientNetB3", 300, PreprocessId::Passthrough, Family::EfficientNet),
    spec("InceptionV3", 299, PreprocessId::Tf, Family::Inception),
    spec("InceptionResNetV2", 299, PreprocessId::Tf, Family::InceptionResNet),
    spec("Xception", 299, PreprocessId::Tf, Family::Xception),
    spec("DenseNet121", 224, PreprocessId::Torch, Family::DenseNet),
    spec("NASNetMobile", 224, PreprocessId::Tf, Family::NasNet),
    spec("EfficientNetV2B3", 300, PreprocessId::Passthrough, Family::EfficientNetV2),
    spec("ConvNeXtBase", 224, PreprocessId::Passthrough, Family::ConvNeXt),
];

const fn spec(name: &'static str, side: u32, preprocess_id: PreprocessId, family: Family) -> BackboneSpec {
    BackboneSpec {
        name,
        native_input: (side, side),
        preprocess_id,
        family,
    }
}

/// All supported backbones in benchmark-table order.
pub fn list_backbones() -> Vec<BackboneSpec> {
    REGISTRY.to_vec()
}

/// Case-insensitive lookup; `_` and `-` are ignored so `nasnet_mobile`
/// finds NASNetMobile.
pub fn find_backbone(name: &str) -> Result<BackboneSpec, TrainError> {
    let norm = |s: &str| s.chars().filter(|c| *c != '_' && *c != '-').collect::<String>().to_ascii_lowercase();
    let wanted = norm(name);
    REGISTRY
        .iter()
        .find(|s| norm(s.name) == wanted)
        .copied()
        .ok_or_else(|| TrainError::UnknownBackbone(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_order_and_contents() {
        let all = list_backbones();
        assert_eq!(all.len(), 11);
        assert_eq!(all[0].name, "VGG19");
        assert!(all.iter().any(|s| s.name == "NASNetMobile"));
        let mut names: Vec<_> = all.iter().map(|s| s.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 11);
        assert!(all.iter().all(|s| s.native_input.0 >= 32 && s.native_input.1 >= 32));
    }

    #[test]
    fn lookup_is_forgiving() {
        assert_eq!(find_backbone("nasnet_mobile").unwrap().name, "NASNetMobile");
        assert_eq!(find_backbone("vgg19").unwrap().name, "VGG19");
        assert!(matches!(find_backbone("AlexNet"), Err(TrainError::UnknownBackbone(_))));
    }

    #[test]
    fn preprocess_ids_parse() {
        for id in [PreprocessId::Caffe, PreprocessId::Tf, PreprocessId::Torch, PreprocessId::Passthrough] {
            assert_eq!(id.as_str().parse::<PreprocessId>().unwrap(), id);
        }
        assert!(matches!("yolo".parse::<PreprocessId>(), Err(TrainError::UnknownPreprocess(_))));
    }
}
