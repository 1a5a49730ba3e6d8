use serde::{Deserialize, Serialize};

use crate::tensor::pooled_len;
use crate::{Error, Result};

pub const CLASSIFIER: &str = "softmax_classifier";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    /// Square kernel side.
    pub kernel: usize,
    pub filters: usize,
}

/// Declarative description of the conv/pool stack and the classifier head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Side of the square network input.
    pub input_size: usize,
    pub input_channels: usize,
    /// Each convolution (stride 1, no padding) is followed by max pooling.
    pub convs: Vec<ConvSpec>,
    pub pool_size: usize,
    pub pool_stride: usize,
    /// Insert a ReLU between each convolution and its pooling layer.
    #[serde(default)]
    pub conv_relu: bool,
    pub fc_width: usize,
    /// Dropout rate after the hidden fully-connected layer; 0 disables it.
    pub dropout: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 300,
            input_channels: 3,
            convs: vec![
                ConvSpec { kernel: 5, filters: 32 },
                ConvSpec { kernel: 5, filters: 64 },
                ConvSpec { kernel: 3, filters: 128 },
                ConvSpec { kernel: 3, filters: 256 },
            ],
            pool_size: 2,
            pool_stride: 2,
            conv_relu: false,
            fc_width: 500,
            dropout: 0.5,
        }
    }
}

/// Shape after one named layer, excluding the batch axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeStep {
    pub layer: String,
    pub shape: Vec<usize>,
}

impl NetworkConfig {
    /// Canonical text used for the config digest.
    pub fn canonical(&self, num_classes: usize) -> String {
        let convs: Vec<String> = self
            .convs
            .iter()
            .map(|c| format!("{0}x{0}/{1}", c.kernel, c.filters))
            .collect();
        format!(
            "leafnet-v1;input={0}x{0}x{1};conv={2};pool={3}/{4};conv_relu={5};fc={6};dropout={7:?};classes={8}",
            self.input_size,
            self.input_channels,
            convs.join(","),
            self.pool_size,
            self.pool_stride,
            self.conv_relu,
            self.fc_width,
            self.dropout,
            num_classes
        )
    }

    /// 64-bit FNV-1a of [`Self::canonical`].
    pub fn digest(&self, num_classes: usize) -> u64 {
        fnv1a64(self.canonical(num_classes).as_bytes())
    }

    /// Walks the shape rules layer by layer, failing on the first layer that
    /// cannot accept its input.
    pub fn shape_chain(&self, num_classes: usize) -> Result<Vec<ShapeStep>> {
        let fail = |layer: &str, message: String| Error::Config {
            layer: layer.to_string(),
            message,
        };
        if self.input_size == 0 || self.input_channels == 0 {
            return Err(fail("input", "input size and channels must be positive".into()));
        }
        if self.convs.is_empty() {
            return Err(fail("conv1", "at least one convolution block is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(fail("dropout", format!("rate {} outside [0, 1)", self.dropout)));
        }
        if num_classes < 2 {
            return Err(fail(CLASSIFIER, format!("need at least 2 classes, got {num_classes}")));
        }
        let mut steps = vec![ShapeStep {
            layer: "input".into(),
            shape: vec![self.input_channels, self.input_size, self.input_size],
        }];
        let mut side = self.input_size;
        for (i, conv) in self.convs.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            if conv.kernel == 0 || conv.filters == 0 {
                return Err(fail(&name, "kernel and filter count must be positive".into()));
            }
            if conv.kernel > side {
                return Err(fail(&name, format!("kernel {0}x{0} exceeds the {1}x{1} feature map", conv.kernel, side)));
            }
            side = side - conv.kernel + 1;
            steps.push(ShapeStep {
                layer: name,
                shape: vec![conv.filters, side, side],
            });
            let pool = format!("pool{}", i + 1);
            side = pooled_len(side, self.pool_size, self.pool_stride).ok_or_else(|| {
                fail(
                    &pool,
                    format!("window {0}x{0} (stride {1}) exceeds the {2}x{2} feature map", self.pool_size, self.pool_stride, side),
                )
            })?;
            steps.push(ShapeStep {
                layer: pool,
                shape: vec![conv.filters, side, side],
            });
        }
        if self.fc_width == 0 {
            return Err(fail("fc1", "width must be positive".into()));
        }
        steps.push(ShapeStep {
            layer: "fc1".into(),
            shape: vec![self.fc_width],
        });
        steps.push(ShapeStep {
            layer: CLASSIFIER.into(),
            shape: vec![num_classes],
        });
        Ok(steps)
    }

    /// Number of features entering the first fully-connected layer.
    pub fn flattened_features(&self, num_classes: usize) -> Result<usize> {
        let chain = self.shape_chain(num_classes)?;
        Ok(chain[chain.len() - 3].shape.iter().product())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
