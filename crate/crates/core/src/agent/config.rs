use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_output_extent;

/// One strided convolution of the vision core (followed by ReLU).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

/// Where attention queries come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Queries produced from the previous policy-LSTM state.
    #[default]
    TopDown,
    /// Queries are a learned constant tensor.
    FixedQuery,
    /// Logits are the per-location L2 norm of K̃; no queries at all.
    L2NormKey,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::TopDown => "top_down",
            Variant::FixedQuery => "fixed_query",
            Variant::L2NormKey => "l2_norm_key",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub obs_height: usize,
    pub obs_width: usize,
    pub obs_channels: usize,
    pub conv_layers: Vec<ConvSpec>,
    pub convlstm_kernel: usize,
    /// c_K
    pub key_channels: usize,
    /// c_V
    pub value_channels: usize,
    /// U: cosine frequencies per axis.
    pub basis_even: usize,
    /// V: sine frequencies per axis.
    pub basis_odd: usize,
    /// N
    pub heads: usize,
    /// Hidden widths of the query MLP; its output layer is implied.
    pub query_hidden: Vec<usize>,
    pub answer_hidden: Vec<usize>,
    pub policy_lstm: usize,
    pub output_hidden: usize,
    pub num_actions: usize,
    #[serde(default)]
    pub variant: Variant,
}

impl AgentConfig {
    /// Sizes of the full-scale agent on 210×160 RGB frames.
    pub fn appendix(num_actions: usize) -> Self {
        AgentConfig {
            obs_height: 210,
            obs_width: 160,
            obs_channels: 3,
            conv_layers: vec![
                ConvSpec { kernel: 8, stride: 4, channels: 32 },
                ConvSpec { kernel: 4, stride: 2, channels: 64 },
            ],
            convlstm_kernel: 3,
            key_channels: 8,
            value_channels: 120,
            basis_even: 4,
            basis_odd: 4,
            heads: 4,
            query_hidden: vec![256, 128],
            answer_hidden: vec![512, 256],
            policy_lstm: 256,
            output_hidden: 128,
            num_actions,
            variant: Variant::TopDown,
        }
    }

    /// Small configuration used by gradient checks: 20×16×3 frames, c = 12,
    /// c_K = 4, two heads, U = V = 2, four actions.
    pub fn tiny(variant: Variant) -> Self {
        AgentConfig {
            obs_height: 20,
            obs_width: 16,
            obs_channels: 3,
            conv_layers: vec![
                ConvSpec { kernel: 4, stride: 2, channels: 4 },
                ConvSpec { kernel: 3, stride: 2, channels: 6 },
            ],
            convlstm_kernel: 3,
            key_channels: 4,
            value_channels: 8,
            basis_even: 2,
            basis_odd: 2,
            heads: 2,
            query_hidden: vec![8],
            answer_hidden: vec![12],
            policy_lstm: 8,
            output_hidden: 8,
            num_actions: 4,
            variant,
        }
    }

    /// Desk-scale agent for 40×30 sprite worlds (10×8 attention grid).
    pub fn toy(num_actions: usize, variant: Variant) -> Self {
        AgentConfig {
            obs_height: 40,
            obs_width: 30,
            obs_channels: 3,
            conv_layers: vec![
                ConvSpec { kernel: 8, stride: 4, channels: 16 },
                ConvSpec { kernel: 3, stride: 2, channels: 32 },
            ],
            convlstm_kernel: 3,
            key_channels: 4,
            value_channels: 12,
            basis_even: 2,
            basis_odd: 2,
            heads: 2,
            query_hidden: vec![32],
            answer_hidden: vec![64],
            policy_lstm: 64,
            output_hidden: 32,
            num_actions,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("obs_height", self.obs_height),
            ("obs_width", self.obs_width),
            ("obs_channels", self.obs_channels),
            ("convlstm_kernel", self.convlstm_kernel),
            ("key_channels", self.key_channels),
            ("basis_even", self.basis_even),
            ("basis_odd", self.basis_odd),
            ("heads", self.heads),
            ("policy_lstm", self.policy_lstm),
            ("output_hidden", self.output_hidden),
            ("num_actions", self.num_actions),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("agent.{name} must be positive")));
            }
        }
        for (i, c) in self.conv_layers.iter().enumerate() {
            if c.kernel == 0 || c.stride == 0 || c.channels == 0 {
                return Err(Error::Config(format!(
                    "agent.conv_layers[{i}] needs positive kernel, stride and channels"
                )));
            }
        }
        if self.query_hidden.contains(&0) || self.answer_hidden.contains(&0) {
            return Err(Error::Config("MLP widths must be positive".into()));
        }
        Ok(())
    }

    /// Spatial extent of the vision-core output.
    pub fn vision_map(&self) -> (usize, usize) {
        self.conv_layers.iter().fold((self.obs_height, self.obs_width), |(h, w), c| {
            (conv_output_extent(h, c.stride), conv_output_extent(w, c.stride))
        })
    }

    /// c = c_K + c_V, the ConvLSTM output channels.
    pub fn vision_channels(&self) -> usize {
        self.key_channels + self.value_channels
    }

    /// c_S = (U + V)².
    pub fn spatial_channels(&self) -> usize {
        (self.basis_even + self.basis_odd).pow(2)
    }

    pub fn query_len(&self) -> usize {
        self.key_channels + self.spatial_channels()
    }

    pub fn answer_len(&self) -> usize {
        self.value_channels + self.spatial_channels()
    }

    fn conv_input_channels(&self) -> usize {
        self.conv_layers.last().map_or(self.obs_channels, |c| c.channels)
    }

    /// Width of the answer-processor input.
    pub fn core_input_len(&self) -> usize {
        let queries = match self.variant {
            Variant::L2NormKey => 0,
            _ => self.heads * self.query_len(),
        };
        self.heads * self.answer_len() + queries + self.num_actions + 1
    }

    /// Every parameter with its shape and fan-in, in definition order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut cin = self.obs_channels;
        for (i, c) in self.conv_layers.iter().enumerate() {
            let fan_in = c.kernel * c.kernel * cin;
            out.push(ParamSpec::weight(format!("vision/conv{i}/w"), vec![c.kernel, c.kernel, cin, c.channels], fan_in));
            out.push(ParamSpec::bias(format!("vision/conv{i}/b"), c.channels));
            cin = c.channels;
        }
        let c = self.vision_channels();
        let k = self.convlstm_kernel;
        let lstm_in = self.conv_input_channels() + c;
        out.push(ParamSpec::weight("vision/convlstm/w".into(), vec![k, k, lstm_in, 4 * c], k * k * lstm_in));
        out.push(ParamSpec::lstm_bias("vision/convlstm/b".into(), c));

        match self.variant {
            Variant::TopDown => {
                let mut width = self.policy_lstm;
                for (i, &hdim) in self.query_hidden.iter().enumerate() {
                    out.push(ParamSpec::weight(format!("query/fc{i}/w"), vec![width, hdim], width));
                    out.push(ParamSpec::bias(format!("query/fc{i}/b"), hdim));
                    width = hdim;
                }
                let q = self.heads * self.query_len();
                out.push(ParamSpec::weight("query/out/w".into(), vec![width, q], width));
                out.push(ParamSpec::bias("query/out/b".into(), q));
            }
            Variant::FixedQuery => {
                out.push(ParamSpec::weight(
                    "query/fixed".into(),
                    vec![self.heads, self.query_len()],
                    self.query_len(),
                ));
            }
            Variant::L2NormKey => {}
        }

        let mut width = self.core_input_len();
        for (i, &hdim) in self.answer_hidden.iter().enumerate() {
            out.push(ParamSpec::weight(format!("answer/fc{i}/w"), vec![width, hdim], width));
            out.push(ParamSpec::bias(format!("answer/fc{i}/b"), hdim));
            width = hdim;
        }
        let m = self.policy_lstm;
        out.push(ParamSpec::weight("policy/lstm/w".into(), vec![width + m, 4 * m], width + m));
        out.push(ParamSpec::lstm_bias("policy/lstm/b".into(), m));
        out.push(ParamSpec::weight("output/fc/w".into(), vec![m, self.output_hidden], m));
        out.push(ParamSpec::bias("output/fc/b".into(), self.output_hidden));
        out.push(ParamSpec::weight(
            "output/policy/w".into(),
            vec![self.output_hidden, self.num_actions],
            self.output_hidden,
        ));
        out.push(ParamSpec::bias("output/policy/b".into(), self.num_actions));
        out.push(ParamSpec::weight("output/value/w".into(), vec![self.output_hidden, 1], self.output_hidden));
        out.push(ParamSpec::bias("output/value/b".into(), 1));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(|p| p.shape.iter().product::<usize>()).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamInit {
    /// Uniform in `±sqrt(3 / fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    /// Zeros except the forget-gate quarter, which is one.
    LstmBias,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        ParamSpec {
            name,
            shape,
            init: ParamInit::Uniform { fan_in },
        }
    }

    fn bias(name: String, len: usize) -> Self {
        ParamSpec {
            name,
            shape: vec![len],
            init: ParamInit::Zeros,
        }
    }

    fn lstm_bias(name: String, width: usize) -> Self {
        ParamSpec {
            name,
            shape: vec![4 * width],
            init: ParamInit::LstmBias,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn appendix_geometry() {
        let c = AgentConfig::appendix(18);
        assert_eq!(c.vision_map(), (27, 20));
        assert_eq!(c.vision_channels(), 128);
        assert_eq!(c.spatial_channels(), 64);
        assert_eq!(c.query_len(), 72);
        assert_eq!(c.answer_len(), 184);
        assert_eq!(c.heads * c.query_len(), 288);
    }

    #[test]
    fn toy_shape_rule() {
        let mut c = AgentConfig::toy(5, Variant::TopDown);
        c.conv_layers[0].stride = 4;
        c.conv_layers[1].stride = 2;
        assert_eq!(c.vision_map(), (5, 4));
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = AgentConfig::tiny(Variant::FixedQuery);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"fixed_query\""));
        let back: AgentConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
