//! Declarative network specifications and their forward passes.
//!
//! Two architectures are supported: a small convolutional classifier for
//! quality assessment and a configurable U-shaped encoder-decoder for FAZ
//! segmentation. Both are built from the same layer vocabulary:
//! conv / instance-norm / relu / maxpool / nearest-upsample / linear.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::init::Initializer;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

const NORM_EPS: f32 = 1e-5;

/// Configuration of the U-shaped segmentation network. The full-scale
/// template is patch 512x512 with 7 poolings; the desk-scale default is
/// patch 64x64 with 4 poolings (both bottom out at a 4x4 bottleneck).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub patch_h: usize,
    pub patch_w: usize,
    pub poolings: usize,
    pub kernel_size: usize,
    pub base_channels: usize,
    pub growth_factor: usize,
    pub max_channels: usize,
    /// CE weight in the combined loss; the Dice term gets `1 - lambda`.
    pub lambda: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            patch_h: 64,
            patch_w: 64,
            poolings: 4,
            kernel_size: 3,
            base_channels: 8,
            growth_factor: 2,
            max_channels: 64,
            lambda: 0.5,
        }
    }
}

impl UNetConfig {
    /// Table-style full-scale template: 512x512 patch, 7 poolings.
    pub fn full_scale() -> Self {
        UNetConfig {
            patch_h: 512,
            patch_w: 512,
            poolings: 7,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1usize
            .checked_shl(self.poolings as u32)
            .ok_or_else(|| Error::Config("too many poolings".into()))?;
        if self.patch_h % div != 0 || self.patch_w % div != 0 {
            return Err(Error::Config(format!(
                "patch {}x{} not divisible by 2^{} poolings",
                self.patch_h, self.patch_w, self.poolings
            )));
        }
        if self.kernel_size % 2 == 0 || self.kernel_size == 0 {
            return Err(Error::Config("kernel size must be odd".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("lambda must lie in [0,1]".into()));
        }
        if self.base_channels == 0 || self.growth_factor == 0 || self.max_channels == 0 {
            return Err(Error::Config("channel configuration must be positive".into()));
        }
        Ok(())
    }

    pub fn channels_at(&self, depth: usize) -> usize {
        let mut c = self.base_channels;
        for _ in 0..depth {
            c = (c * self.growth_factor).min(self.max_channels);
        }
        c.min(self.max_channels)
    }

    pub fn bottleneck_size(&self) -> (usize, usize) {
        (self.patch_h >> self.poolings, self.patch_w >> self.poolings)
    }
}

/// Configuration of the desk-scale quality classifier:
/// `stages` x [conv3x3 -> instance-norm -> relu -> maxpool2] then linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierSpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub stages: usize,
    pub base_channels: usize,
    pub growth_factor: usize,
    pub num_classes: usize,
}

impl Default for ClassifierSpec {
    fn default() -> Self {
        ClassifierSpec {
            input_size: 64,
            in_channels: 1,
            stages: 4,
            base_channels: 8,
            growth_factor: 2,
            num_classes: 3,
        }
    }
}

impl ClassifierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("classifier needs at least 2 classes".into()));
        }
        if self.input_size % (1 << self.stages) != 0 {
            return Err(Error::Config(format!(
                "input size {} not divisible by 2^{} stages",
                self.input_size, self.stages
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.growth_factor == 0 {
            return Err(Error::Config("channel configuration must be positive".into()));
        }
        Ok(())
    }

    pub fn channels_at(&self, stage: usize) -> usize {
        let mut c = self.base_channels;
        for _ in 0..stage {
            c *= self.growth_factor;
        }
        c
    }

    fn flat_dim(&self) -> usize {
        let s = self.input_size >> self.stages;
        self.channels_at(self.stages - 1) * s * s
    }
}

/// Declarative layer graph; the checkpoint embeds this as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum NetSpec {
    Classifier(ClassifierSpec),
    UNet(UNetConfig),
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            NetSpec::Classifier(s) => s.validate(),
            NetSpec::UNet(c) => c.validate(),
        }
    }
}

/// Named parameter block of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub name: String,
    pub weight: Tensor<f32>,
    pub bias: Option<Tensor<f32>>,
}

/// A network: spec plus materialized parameters.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetSpec,
    pub layers: Vec<LayerParams>,
}

struct BoundLayer {
    w: Var,
    b: Option<Var>,
}

impl Network {
    /// Builds a network with He-uniform weights from a deterministic seed.
    pub fn build(spec: NetSpec, seed: u64) -> Result<Network> {
        spec.validate()?;
        let mut init = Initializer::new(seed);
        let mut layers: Vec<LayerParams> = Vec::new();
        fn conv(
            layers: &mut Vec<LayerParams>,
            init: &mut Initializer,
            name: String,
            cout: usize,
            cin: usize,
            k: usize,
        ) {
            layers.push(LayerParams {
                name,
                weight: init.he_uniform(vec![cout, cin, k, k], cin * k * k),
                bias: Some(Tensor::zeros(vec![cout])),
            });
        }
        match &spec {
            NetSpec::Classifier(cs) => {
                for i in 0..cs.stages {
                    let cin = if i == 0 {
                        cs.in_channels
                    } else {
                        cs.channels_at(i - 1)
                    };
                    conv(&mut layers, &mut init, format!("stage{i}.conv"), cs.channels_at(i), cin, 3);
                }
                let dim = cs.flat_dim();
                layers.push(LayerParams {
                    name: "head".into(),
                    weight: init.he_uniform(vec![cs.num_classes, dim], dim),
                    bias: Some(Tensor::zeros(vec![cs.num_classes])),
                });
            }
            NetSpec::UNet(uc) => {
                let k = uc.kernel_size;
                for d in 0..uc.poolings {
                    let cin = if d == 0 { 1 } else { uc.channels_at(d - 1) };
                    let c = uc.channels_at(d);
                    conv(&mut layers, &mut init, format!("enc{d}.conv0"), c, cin, k);
                    conv(&mut layers, &mut init, format!("enc{d}.conv1"), c, c, k);
                }
                let cb = uc.channels_at(uc.poolings);
                let clast = uc.channels_at(uc.poolings - 1);
                conv(&mut layers, &mut init, "bottleneck.conv0".into(), cb, clast, k);
                conv(&mut layers, &mut init, "bottleneck.conv1".into(), cb, cb, k);
                for d in (0..uc.poolings).rev() {
                    let c = uc.channels_at(d);
                    let cabove = if d + 1 == uc.poolings {
                        cb
                    } else {
                        uc.channels_at(d + 1)
                    };
                    conv(&mut layers, &mut init, format!("dec{d}.up"), c, cabove, k);
                    conv(&mut layers, &mut init, format!("dec{d}.conv0"), c, 2 * c, k);
                    conv(&mut layers, &mut init, format!("dec{d}.conv1"), c, c, k);
                }
                conv(&mut layers, &mut init, "head".into(), 2, uc.channels_at(0), 1);
            }
        }
        Ok(Network { spec, layers })
    }

    pub fn layer(&self, name: &str) -> Option<&LayerParams> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LayerParams> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Flat tensor view in deterministic order (weight then bias per layer).
    pub fn flat_tensors(&self) -> Vec<&Tensor<f32>> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(&l.weight).chain(l.bias.as_ref()))
            .collect()
    }

    pub fn flat_tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.layers
            .iter_mut()
            .flat_map(|l| std::iter::once(&mut l.weight).chain(l.bias.as_mut()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.flat_tensors().iter().map(|t| t.len()).sum()
    }

    fn bind(&self, tape: &mut Tape<f32>, requires_grad: bool) -> Result<Vec<BoundLayer>> {
        self.layers
            .iter()
            .map(|l| {
                Ok(BoundLayer {
                    w: tape.leaf(l.weight.clone(), requires_grad)?,
                    b: match &l.bias {
                        Some(b) => Some(tape.leaf(b.clone(), requires_grad)?),
                        None => None,
                    },
                })
            })
            .collect()
    }

    /// Runs the forward pass on `tape`, returning the logits var together
    /// with the bound parameter vars in flat-tensor order (for gradient
    /// extraction after `backward`).
    pub fn forward(
        &self,
        tape: &mut Tape<f32>,
        input: Var,
        requires_grad: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let bound = self.bind(tape, requires_grad)?;
        let flat: Vec<Var> = bound
            .iter()
            .flat_map(|b| std::iter::once(b.w).chain(b.b))
            .collect();
        let mut li = 0usize;
        let mut next = || {
            let l = &bound[li];
            li += 1;
            (l.w, l.b)
        };
        let logits = match &self.spec {
            NetSpec::Classifier(cs) => {
                let mut x = input;
                for _ in 0..cs.stages {
                    let (w, b) = next();
                    x = tape.conv2d(x, w, b, 1, 1)?;
                    x = tape.instance_norm(x, NORM_EPS)?;
                    x = tape.relu(x)?;
                    x = tape.maxpool2d(x, 2, 2)?;
                }
                let n = tape.data(x).len();
                x = tape.reshape(x, vec![n])?;
                let (w, b) = next();
                tape.linear(x, w, b.expect("head has bias"))?
            }
            NetSpec::UNet(uc) => {
                let pad = uc.kernel_size / 2;
                let conv_block = |tape: &mut Tape<f32>, x: Var, w: Var, b: Option<Var>| {
                    let y = tape.conv2d(x, w, b, 1, pad)?;
                    let y = tape.instance_norm(y, NORM_EPS)?;
                    tape.relu(y)
                };
                let mut skips = Vec::with_capacity(uc.poolings);
                let mut x = input;
                for _ in 0..uc.poolings {
                    let (w0, b0) = next();
                    x = conv_block(tape, x, w0, b0)?;
                    let (w1, b1) = next();
                    x = conv_block(tape, x, w1, b1)?;
                    skips.push(x);
                    x = tape.maxpool2d(x, 2, 2)?;
                }
                let (w0, b0) = next();
                x = conv_block(tape, x, w0, b0)?;
                let (w1, b1) = next();
                x = conv_block(tape, x, w1, b1)?;
                for d in (0..uc.poolings).rev() {
                    x = tape.upsample2x(x)?;
                    let (wu, bu) = next();
                    x = conv_block(tape, x, wu, bu)?;
                    x = tape.concat_channels(skips[d], x)?;
                    let (wa, ba) = next();
                    x = conv_block(tape, x, wa, ba)?;
                    let (wb, bb) = next();
                    x = conv_block(tape, x, wb, bb)?;
                }
                let (wh, bh) = next();
                tape.conv2d(x, wh, bh, 1, 0)?
            }
        };
        Ok((logits, flat))
    }
}
