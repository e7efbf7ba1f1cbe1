//! Backbone + binary head with a partial freeze.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::arch::{layers_for, output_channels, Act, ConvSpec, LayerDef, Wiring};
use crate::registry::BackboneSpec;
use crate::weights::{bias_key, kernel_key, WeightsStore};
use crate::{TrainError, TRAINABLE_TAIL_LAYERS};

pub const HEAD_KERNEL: &str = "head/kernel";
pub const HEAD_BIAS: &str = "head/bias";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerStatus {
    pub name: String,
    pub params: usize,
    pub trainable: bool,
}

/// Which backbone layers are trainable. The head is listed separately and
/// is always trainable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FreezeReport {
    pub backbone: String,
    pub layers: Vec<LayerStatus>,
    pub head_params: usize,
}

impl FreezeReport {
    pub fn unfrozen(&self) -> Vec<&str> {
        self.layers.iter().filter(|l| l.trainable).map(|l| l.name.as_str()).collect()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params).sum::<usize>() + self.head_params
    }

    pub fn trainable_params(&self) -> usize {
        self.layers.iter().filter(|l| l.trainable).map(|l| l.params).sum::<usize>() + self.head_params
    }
}

pub struct SpillNet {
    spec: BackboneSpec,
    layers: Vec<LayerDef>,
    /// Per layer, `[kernel0, bias0, kernel1, bias1, ...]`.
    params: Vec<Vec<Tensor>>,
    head_w: Tensor,
    head_b: Tensor,
    trainable_from: usize,
    vars: Vec<Var>,
    device: Device,
}

impl std::fmt::Debug for SpillNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SpillNet")
            .field("backbone", &self.spec.name)
            .field("layers", &self.layers.len())
            .field("trainable_from", &self.trainable_from)
            .finish()
    }
}

fn glorot_head(channels: usize, seed: u64, device: &Device) -> Result<(Tensor, Tensor), TrainError> {
    let limit = (6.0 / (channels + 1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f32> = (0..channels).map(|_| rng.gen_range(-limit..limit) as f32).collect();
    Ok((Tensor::from_vec(w, (1, channels), device)?, Tensor::zeros(1, DType::F32, device)?))
}

impl SpillNet {
    /// Pretrained backbone, fresh head, all but the last
    /// [`TRAINABLE_TAIL_LAYERS`] backbone layers frozen.
    pub fn build(spec: &BackboneSpec, store: &WeightsStore, head_seed: u64) -> Result<Self, TrainError> {
        let device = Device::Cpu;
        let mut tensors = store.load(spec, &device)?;
        let c = output_channels(&layers_for(spec));
        let (w, b) = glorot_head(c, head_seed, &device)?;
        tensors.insert(HEAD_KERNEL.into(), w);
        tensors.insert(HEAD_BIAS.into(), b);
        Self::from_tensors(spec, tensors, &device)
    }

    /// Rebuild from a full tensor map (backbone plus head).
    pub fn from_tensors(
        spec: &BackboneSpec,
        mut tensors: HashMap<String, Tensor>,
        device: &Device,
    ) -> Result<Self, TrainError> {
        let layers = layers_for(spec);
        let trainable_from = layers.len().saturating_sub(TRAINABLE_TAIL_LAYERS);
        let mismatch = |reason: String| TrainError::WeightsMismatch {
            backbone: spec.name.to_string(),
            path: "<memory>".into(),
            reason,
        };
        let mut take = |key: String| tensors.remove(&key).ok_or_else(|| mismatch(format!("missing {key}")));
        let mut vars = Vec::new();
        let mut params = Vec::with_capacity(layers.len());
        for (li, l) in layers.iter().enumerate() {
            let mut p = Vec::new();
            for (i, _) in l.convs.iter().enumerate() {
                for t in [take(kernel_key(&l.name, i))?, take(bias_key(&l.name, i))?] {
                    p.push(if li >= trainable_from { track(&mut vars, &t)? } else { t.detach() });
                }
            }
            params.push(p);
        }
        let head_w = track(&mut vars, &take(HEAD_KERNEL.into())?)?;
        let head_b = track(&mut vars, &take(HEAD_BIAS.into())?)?;
        let c = output_channels(&layers);
        if head_w.dims() != [1, c] {
            return Err(mismatch(format!("head kernel {:?}, expected [1, {c}]", head_w.dims())));
        }
        Ok(Self {
            spec: *spec,
            layers,
            params,
            head_w,
            head_b,
            trainable_from,
            vars,
            device: device.clone(),
        })
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn layers(&self) -> &[LayerDef] {
        &self.layers
    }

    /// Index of the first trainable backbone layer.
    pub fn trainable_from(&self) -> usize {
        self.trainable_from
    }

    /// Trainable parameters: tail layers then head kernel and bias.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn freeze_report(&self) -> FreezeReport {
        FreezeReport {
            backbone: self.spec.name.to_string(),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LayerStatus {
                    name: l.name.clone(),
                    params: l.param_count(),
                    trainable: i >= self.trainable_from,
                })
                .collect(),
            head_params: self.head_w.elem_count() + self.head_b.elem_count(),
        }
    }

    /// Frozen layers only. Carries no gradient.
    pub fn forward_prefix(&self, x: &Tensor) -> Result<Tensor, TrainError> {
        let mut h = x.clone();
        for i in 0..self.trainable_from {
            h = self.forward_layer(i, &h)?;
        }
        Ok(h.detach())
    }

    /// Trainable layers, pooling and head on a prefix output. Returns
    /// logits of shape `(n, 1)`.
    pub fn forward_tail(&self, h: &Tensor) -> Result<Tensor, TrainError> {
        let pooled = self.pooled_tail(h)?;
        Ok(pooled.matmul(&self.head_w.t()?)?.broadcast_add(&self.head_b)?)
    }

    fn pooled_tail(&self, h: &Tensor) -> Result<Tensor, TrainError> {
        let mut h = h.clone();
        for i in self.trainable_from..self.layers.len() {
            h = self.forward_layer(i, &h)?;
        }
        Ok(h.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    /// Globally pooled backbone features, shape `(n, channels)`.
    pub fn pooled(&self, x: &Tensor) -> Result<Tensor, TrainError> {
        self.pooled_tail(&self.forward_prefix(x)?)
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor, TrainError> {
        self.forward_tail(&self.forward_prefix(x)?)
    }

    /// Sigmoid outputs, shape `(n, 1)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, TrainError> {
        Ok(candle_nn::ops::sigmoid(&self.logits(x)?)?)
    }

    fn conv(&self, spec: &ConvSpec, w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor, TrainError> {
        let y = x
            .conv2d(w, spec.pad, spec.stride, 1, 1)?
            .broadcast_add(&b.reshape((1, spec.cout, 1, 1))?)?;
        Ok(match spec.act {
            Act::Relu => y.relu()?,
            Act::Linear => y,
        })
    }

    fn forward_layer(&self, index: usize, x: &Tensor) -> Result<Tensor, TrainError> {
        let l = &self.layers[index];
        let p = &self.params[index];
        let conv = |i: usize, x: &Tensor| self.conv(&l.convs[i], &p[2 * i], &p[2 * i + 1], x);
        Ok(match &l.wiring {
            Wiring::Sequential => {
                let mut h = x.clone();
                for i in 0..l.convs.len() {
                    h = conv(i, &h)?;
                }
                h
            }
            Wiring::Residual { projection, post_act } => {
                let body_len = l.convs.len() - usize::from(*projection);
                let mut h = x.clone();
                for i in 0..body_len {
                    h = conv(i, &h)?;
                }
                let shortcut = if *projection { conv(body_len, x)? } else { x.clone() };
                let y = (h + shortcut)?;
                if *post_act {
                    y.relu()?
                } else {
                    y
                }
            }
            Wiring::Branches(sizes) => {
                let mut outs = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for n in sizes {
                    let mut h = x.clone();
                    for i in start..start + n {
                        h = conv(i, &h)?;
                    }
                    outs.push(h);
                    start += n;
                }
                Tensor::cat(&outs, 1)?
            }
            Wiring::DenseConcat => {
                let mut h = x.clone();
                for i in 0..l.convs.len() {
                    let y = conv(i, &h)?;
                    h = Tensor::cat(&[&h, &y], 1)?;
                }
                h
            }
            Wiring::MaxPool { k, stride } => x.max_pool2d_with_stride(*k, *stride)?,
            Wiring::AvgPool { k, stride } => x.avg_pool2d_with_stride(*k, *stride)?,
            Wiring::Relu => x.relu()?,
            Wiring::Rescale { scale, offset } => x.affine(*scale as f64, *offset as f64)?,
        })
    }

    /// Every parameter by name, frozen and trainable.
    pub fn tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (l, p) in self.layers.iter().zip(&self.params) {
            for i in 0..l.convs.len() {
                out.insert(kernel_key(&l.name, i), p[2 * i].detach());
                out.insert(bias_key(&l.name, i), p[2 * i + 1].detach());
            }
        }
        out.insert(HEAD_KERNEL.into(), self.head_w.detach());
        out.insert(HEAD_BIAS.into(), self.head_b.detach());
        out
    }

    /// Deep copies of the trainable parameters.
    pub fn snapshot(&self) -> Result<Vec<Tensor>, TrainError> {
        Ok(self.vars.iter().map(|v| v.as_tensor().copy()).collect::<Result<_, _>>()?)
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<(), TrainError> {
        for (v, t) in self.vars.iter().zip(snapshot) {
            v.set(t)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        candle_core::safetensors::save(&self.tensors(), path).map_err(|e| TrainError::Save {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(spec: &BackboneSpec, path: &Path) -> Result<Self, TrainError> {
        let device = Device::Cpu;
        let tensors = candle_core::safetensors::load(path, &device).map_err(|e| TrainError::io(path, e))?;
        Self::from_tensors(spec, tensors, &device)
    }

    /// Rough bytes of activations for one training step at `batch`,
    /// traced with a single zero image. Used for the pre-flight memory
    /// check.
    pub fn activation_bytes(&self, batch: usize) -> Result<u64, TrainError> {
        let (w, h) = self.spec.native_input;
        let mut x = Tensor::zeros((1, 3, h as usize, w as usize), DType::F32, &self.device)?;
        let mut total = x.elem_count() as u64;
        for i in 0..self.layers.len() {
            x = self.forward_layer(i, &x)?;
            // every conv keeps its output and an im2col buffer of similar size
            total += x.elem_count() as u64 * (2 * self.layers[i].convs.len().max(1)) as u64;
        }
        // forward values, gradients and optimizer slack
        Ok(total * 4 * batch as u64 * 3)
    }

    /// Values of every frozen parameter, in layer order.
    pub fn frozen_values(&self) -> Result<Vec<Vec<f32>>, TrainError> {
        let mut out = Vec::new();
        for p in &self.params[..self.trainable_from] {
            for t in p {
                out.push(t.flatten_all()?.to_vec1()?);
            }
        }
        Ok(out)
    }

    pub fn trainable_values(&self) -> Result<Vec<Vec<f32>>, TrainError> {
        self.vars
            .iter()
            .map(|v| Ok(v.as_tensor().flatten_all()?.to_vec1()?))
            .collect()
    }
}

fn track(vars: &mut Vec<Var>, t: &Tensor) -> Result<Tensor, TrainError> {
    let v = Var::from_tensor(&t.detach())?;
    let out = v.as_tensor().clone();
    vars.push(v);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{find_backbone, list_backbones};

    fn store() -> (tempfile::TempDir, WeightsStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = WeightsStore::new(dir.path(), true);
        (dir, s)
    }

    #[test]
    fn vgg_freeze_report() {
        let (_d, s) = store();
        let net = SpillNet::build(&find_backbone("VGG19").unwrap(), &s, 0).unwrap();
        let r = net.freeze_report();
        assert_eq!(
            r.unfrozen(),
            ["block5_conv1", "block5_conv2", "block5_conv3", "block5_conv4", "block5_pool"]
        );
        assert!(r.trainable_params() < r.total_params());
        assert!(r.trainable_params() > 0);
        // 4 convs x (kernel, bias) + head kernel + head bias
        assert_eq!(net.vars().len(), 10);
    }

    #[test]
    fn every_backbone_builds_and_outputs_probabilities() {
        let (_d, s) = store();
        for spec in list_backbones() {
            let net = SpillNet::build(&spec, &s, 1).unwrap();
            assert_eq!(net.freeze_report().unfrozen().len(), 5, "{}", spec.name);
            let (w, h) = spec.native_input;
            let x = Tensor::rand(0f32, 1f32, (1, 3, h as usize, w as usize), &Device::Cpu).unwrap();
            let y: Vec<f32> = net.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(y.len(), 1, "{}", spec.name);
            assert!(y[0] >= 0.0 && y[0] <= 1.0 && y[0].is_finite(), "{} gave {}", spec.name, y[0]);
        }
    }

    #[test]
    fn batch_of_eight_gives_eight_by_one() {
        let (_d, s) = store();
        let net = SpillNet::build(&find_backbone("VGG19").unwrap(), &s, 0).unwrap();
        let x = Tensor::rand(-100f32, 100f32, (8, 3, 224, 224), &Device::Cpu).unwrap();
        let y = net.forward(&x).unwrap();
        assert_eq!(y.dims(), [8, 1]);
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)), "{v:?}");
    }

    #[test]
    fn save_load_round_trip() {
        let (d, s) = store();
        let spec = find_backbone("VGG19").unwrap();
        let net = SpillNet::build(&spec, &s, 3).unwrap();
        let path = d.path().join("model.weights");
        net.save(&path).unwrap();
        let back = SpillNet::load(&spec, &path).unwrap();
        let x = Tensor::rand(-50f32, 50f32, (2, 3, 224, 224), &Device::Cpu).unwrap();
        let a: Vec<f32> = net.logits(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = back.logits(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }
}
