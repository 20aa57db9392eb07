//! Network architecture descriptions and the two production architectures.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// One layer of a network.
///
/// Convolutions are stride-1 zero-padded to preserve spatial dims; pooling
/// layers use kernel 2, stride 2, with ceil-mode output extents (partial
/// border windows pool over their actual extent).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Averaging pre-pool of a 3-D input by integer factors (depth, height,
    /// width); ceil-mode like the other pools. No parameters.
    Prepool3 { f: (usize, usize, usize) },
    /// 3x3x3 convolution, same padding.
    Conv3 { cin: usize, cout: usize },
    /// 3x3 convolution, same padding.
    Conv2 { cin: usize, cout: usize },
    /// 2x2x2 average pooling, stride 2, ceil mode.
    AvgPool3,
    /// 2x2 max pooling, stride 2, ceil mode; argmax switches are cached for
    /// backward and for deconvolution feedback.
    MaxPool2,
    /// Mean over all spatial positions per channel: [n, c, ...] -> [n, c].
    GlobalAvgPool3,
    /// [n, c, h, w] -> [n, c*h*w].
    Flatten,
    /// Fully connected.
    Dense { nin: usize, nout: usize },
    /// Batch normalisation over `n` features. `spatial` pools statistics
    /// over batch and spatial positions (after convolutions); otherwise over
    /// the batch only (after dense layers).
    BatchNorm { n: usize, spatial: bool },
    /// Exponential linear unit, alpha = 1.
    Elu,
    /// Elementwise tanh.
    Tanh,
}

impl LayerSpec {
    /// Number of learnable parameters.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv3 { cin, cout } => cout * cin * 27 + cout,
            LayerSpec::Conv2 { cin, cout } => cout * cin * 9 + cout,
            LayerSpec::Dense { nin, nout } => nout * nin + nout,
            LayerSpec::BatchNorm { n, .. } => 2 * n,
            _ => 0,
        }
    }

    /// Fan-in used for weight initialisation.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv3 { cin, .. } => cin * 27,
            LayerSpec::Conv2 { cin, .. } => cin * 9,
            LayerSpec::Dense { nin, .. } => nin,
            _ => 0,
        }
    }

    /// Number of batchnorm features, zero for other layers.
    pub fn bn_features(&self) -> usize {
        match *self {
            LayerSpec::BatchNorm { n, .. } => n,
            _ => 0,
        }
    }
}

/// Ordered layer list plus derived parameter layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetSpec {
    /// Layers in forward order.
    pub layers: Vec<LayerSpec>,
}

impl NetSpec {
    /// Spec from a layer list.
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Self { layers }
    }

    /// Total learnable parameter count.
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Byte-order-stable parameter offset of each layer in the flat vector.
    pub fn param_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.param_count();
        }
        offsets
    }

    /// Total batchnorm feature count (for running-stat storage).
    pub fn bn_feature_count(&self) -> usize {
        self.layers.iter().map(|l| l.bn_features()).sum()
    }

    /// Offset of each layer's features in the flat running-stat vectors.
    pub fn bn_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = 0;
        for l in &self.layers {
            offsets.push(at);
            at += l.bn_features();
        }
        offsets
    }

    /// Index of the layer whose output feeds deconvolution feedback: the
    /// last max-pool layer.
    pub fn last_maxpool(&self) -> Option<usize> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::MaxPool2))
    }

    /// The registration architecture: an averaging pre-pool (6 x 6 in
    /// plane, `fz` axially), three blocks of 32-channel 3x3x3 convolution
    /// with ELU and 2x2x2 average pooling, two more convolution blocks,
    /// global average pooling, two 64-unit fully connected layers, and six
    /// linear outputs. No batch normalisation.
    pub fn registration(fz: usize) -> Result<Self> {
        if fz == 0 {
            return Err(CoreError::invalid("axial pre-pool factor must be nonzero"));
        }
        use LayerSpec::*;
        Ok(Self::new(vec![
            Prepool3 { f: (fz, 6, 6) },
            Conv3 { cin: 1, cout: 32 },
            Elu,
            AvgPool3,
            Conv3 { cin: 32, cout: 32 },
            Elu,
            AvgPool3,
            Conv3 { cin: 32, cout: 32 },
            Elu,
            AvgPool3,
            Conv3 { cin: 32, cout: 32 },
            Elu,
            Conv3 { cin: 32, cout: 32 },
            Elu,
            GlobalAvgPool3,
            Dense { nin: 32, nout: 64 },
            Elu,
            Dense { nin: 64, nout: 64 },
            Elu,
            Dense { nin: 64, nout: 6 },
        ]))
    }

    /// The slice-scoring architecture for 224 x 224 inputs: six blocks of
    /// 32-channel 3x3 convolution with batch normalisation, ELU, and 2x2
    /// max pooling, then two 64-unit fully connected layers (each with
    /// batch normalisation and ELU) and `n_out` linear outputs.
    pub fn scoring(n_out: usize) -> Result<Self> {
        if n_out == 0 {
            return Err(CoreError::invalid("scoring head needs at least one output"));
        }
        use LayerSpec::*;
        let mut layers = Vec::new();
        let mut cin = 1;
        for _ in 0..6 {
            layers.push(Conv2 { cin, cout: 32 });
            layers.push(BatchNorm {
                n: 32,
                spatial: true,
            });
            layers.push(Elu);
            layers.push(MaxPool2);
            cin = 32;
        }
        layers.push(Flatten);
        layers.push(Dense {
            nin: 32 * 4 * 4,
            nout: 64,
        });
        layers.push(BatchNorm {
            n: 64,
            spatial: false,
        });
        layers.push(Elu);
        layers.push(Dense { nin: 64, nout: 64 });
        layers.push(BatchNorm {
            n: 64,
            spatial: false,
        });
        layers.push(Elu);
        layers.push(Dense {
            nin: 64,
            nout: n_out,
        });
        Ok(Self::new(layers))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_spec_shape() {
        let spec = NetSpec::registration(1).unwrap();
        let convs = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv3 { .. }))
            .count();
        assert_eq!(convs, 5);
        let pools = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::AvgPool3))
            .count();
        assert_eq!(pools, 3);
        assert!(matches!(
            spec.layers.last(),
            Some(LayerSpec::Dense { nout: 6, .. })
        ));
        assert!(!spec
            .layers
            .iter()
            .any(|l| matches!(l, LayerSpec::BatchNorm { .. })));
        // 1->32 conv (896) + 4 x 32->32 convs (27,680) + 32->64 + 64->64
        // + 64->6 dense layers.
        assert_eq!(
            spec.param_count(),
            896 + 4 * 27_680 + (32 * 64 + 64) + (64 * 64 + 64) + (64 * 6 + 6)
        );
    }

    #[test]
    fn scoring_spec_shape() {
        let spec = NetSpec::scoring(1).unwrap();
        let convs = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::Conv2 { .. }))
            .count();
        assert_eq!(convs, 6);
        let pools = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::MaxPool2))
            .count();
        assert_eq!(pools, 6);
        let bns = spec
            .layers
            .iter()
            .filter(|l| matches!(l, LayerSpec::BatchNorm { .. }))
            .count();
        assert_eq!(bns, 8);
        assert_eq!(spec.last_maxpool(), Some(23));
        assert!(matches!(
            spec.layers.last(),
            Some(LayerSpec::Dense { nin: 64, nout: 1 })
        ));
    }

    #[test]
    fn param_offsets_are_cumulative() {
        let spec = NetSpec::scoring(3).unwrap();
        let offsets = spec.param_offsets();
        let mut at = 0;
        for (o, l) in offsets.iter().zip(spec.layers.iter()) {
            assert_eq!(*o, at);
            at += l.param_count();
        }
        assert_eq!(at, spec.param_count());
    }
}
