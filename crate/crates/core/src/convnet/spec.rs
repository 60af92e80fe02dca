use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    /// Flattens a spatial input first.
    Dense {
        in_features: usize,
        out_features: usize,
    },
}

/// Named activation taken after layer `after`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tap {
    pub name: String,
    pub after: usize,
}

/// Layer list over a `[channels, height, width]` input.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<Layer>,
    pub taps: Vec<Tap>,
}

/// Input footprint of one output site: top-left offset, stride between
/// neighboring sites, and side length, all in input pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    pub offset: isize,
    pub jump: usize,
    pub size: usize,
}

impl NetworkSpec {
    /// The default small network: three conv/ReLU/pool stages, a hidden
    /// dense layer, and the classifier.
    pub fn s_net(num_classes: usize, resolution: [usize; 2]) -> Self {
        Self::s_net_with(num_classes, resolution, [16, 32, 64], 128)
    }

    pub fn s_net_with(
        num_classes: usize,
        resolution: [usize; 2],
        widths: [usize; 3],
        hidden: usize,
    ) -> Self {
        let [h, w] = resolution;
        let conv = |i, o, k| Layer::Conv {
            in_channels: i,
            out_channels: o,
            kernel: k,
            stride: 1,
            pad: k / 2,
        };
        let pool = || Layer::MaxPool {
            window: 2,
            stride: 2,
        };
        let layers = vec![
            conv(3, widths[0], 5),
            Layer::Relu,
            pool(),
            conv(widths[0], widths[1], 3),
            Layer::Relu,
            pool(),
            conv(widths[1], widths[2], 3),
            Layer::Relu,
            pool(),
            Layer::Dense {
                in_features: widths[2] * (h / 8) * (w / 8),
                out_features: hidden,
            },
            Layer::Relu,
            Layer::Dense {
                in_features: hidden,
                out_features: num_classes,
            },
        ];
        let tap = |name: &str, after| Tap {
            name: name.into(),
            after,
        };
        Self {
            input: [3, h, w],
            layers,
            taps: vec![
                tap("shallow", 2),
                tap("mid", 5),
                tap("deep", 8),
                tap("embed", 10),
            ],
        }
    }

    /// Output shape of every layer; errors on the first incompatibility.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut cur = self.input.to_vec();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |detail: String| Error::shape("network", format!("layer {i}: {detail}"));
            cur = match *layer {
                Layer::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    pad,
                } => {
                    if cur.len() != 3 || cur[0] != in_channels {
                        return Err(bad(format!(
                            "conv expects {in_channels} input channels, got {cur:?}"
                        )));
                    }
                    if stride == 0 || cur[1] + 2 * pad < kernel || cur[2] + 2 * pad < kernel {
                        return Err(bad(format!("kernel {kernel} does not fit input {cur:?}")));
                    }
                    vec![
                        out_channels,
                        (cur[1] + 2 * pad - kernel) / stride + 1,
                        (cur[2] + 2 * pad - kernel) / stride + 1,
                    ]
                }
                Layer::Relu => cur,
                Layer::MaxPool { window, stride } => {
                    if cur.len() != 3 || stride == 0 || cur[1] < window || cur[2] < window {
                        return Err(bad(format!(
                            "pool window {window} does not fit input {cur:?}"
                        )));
                    }
                    vec![
                        cur[0],
                        (cur[1] - window) / stride + 1,
                        (cur[2] - window) / stride + 1,
                    ]
                }
                Layer::Dense {
                    in_features,
                    out_features,
                } => {
                    let n: usize = cur.iter().product();
                    if n != in_features {
                        return Err(bad(format!(
                            "dense expects {in_features} features, got {n} from {cur:?}"
                        )));
                    }
                    vec![out_features]
                }
            };
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shapes = self.shapes()?;
        match (self.layers.last(), shapes.last()) {
            (Some(Layer::Dense { .. }), Some(s)) if s.len() == 1 => {}
            _ => return Err(Error::invalid("network must end in a dense output layer")),
        }
        for tap in &self.taps {
            if tap.after >= self.layers.len() {
                return Err(Error::invalid(format!(
                    "tap `{}` points past the last layer",
                    tap.name
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Dense { out_features, .. }) => *out_features,
            _ => 0,
        }
    }

    pub fn tap(&self, name: &str) -> Result<usize> {
        self.taps
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.after)
            .ok_or_else(|| {
                let known: Vec<&str> = self.taps.iter().map(|t| t.name.as_str()).collect();
                Error::invalid(format!(
                    "unknown tap `{name}` (known: {})",
                    known.join(", ")
                ))
            })
    }

    /// Receptive field of one site at the output of layer `after`.
    pub fn receptive_field(&self, after: usize) -> Result<ReceptiveField> {
        let mut rf = ReceptiveField {
            offset: 0,
            jump: 1,
            size: 1,
        };
        for layer in &self.layers[..=after] {
            match *layer {
                Layer::Conv {
                    kernel,
                    stride,
                    pad,
                    ..
                } => {
                    rf.offset -= (pad * rf.jump) as isize;
                    rf.size += (kernel - 1) * rf.jump;
                    rf.jump *= stride;
                }
                Layer::MaxPool { window, stride } => {
                    rf.size += (window - 1) * rf.jump;
                    rf.jump *= stride;
                }
                Layer::Relu => {}
                Layer::Dense { .. } => {
                    return Err(Error::invalid(format!(
                        "layer {after} has no spatial extent"
                    )));
                }
            }
        }
        Ok(rf)
    }
}
