use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{AgentConfig, ParamInit, Variant};
use crate::attention::{self, head_on_graph, AttentionHeadResult, HeadNodes, LogitSource, SpatialBasis};
use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, NodeId, ParamSet, Tensor};

/// Deterministic parameter initialisation for `config`.
pub fn init_params(config: &AgentConfig, seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for spec in config.param_specs() {
        let numel: usize = spec.shape.iter().product();
        let data = match spec.init {
            ParamInit::Uniform { fan_in } => {
                let bound = (3.0 / fan_in.max(1) as f64).sqrt() as f32;
                (0..numel).map(|_| rng.random_range(-bound..=bound)).collect()
            }
            ParamInit::Zeros => vec![0.0; numel],
            ParamInit::LstmBias => {
                let width = numel / 4;
                (0..numel)
                    .map(|i| if (width..2 * width).contains(&i) { 1.0 } else { 0.0 })
                    .collect()
            }
        };
        params
            .insert(spec.name, Tensor::new(spec.shape, data).expect("spec shape"))
            .expect("unique names");
    }
    params
}

/// Recurrent carry: ConvLSTM state of the vision core and the policy LSTM state.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentState<T: Float = f32> {
    pub vis_h: Tensor<T>,
    pub vis_c: Tensor<T>,
    pub lstm_h: Tensor<T>,
    pub lstm_c: Tensor<T>,
}

impl<T: Float> AgentState<T> {
    pub fn zeros(config: &AgentConfig) -> Self {
        let (h, w) = config.vision_map();
        let c = config.vision_channels();
        let m = config.policy_lstm;
        AgentState {
            vis_h: Tensor::zeros(&[h, w, c]),
            vis_c: Tensor::zeros(&[h, w, c]),
            lstm_h: Tensor::zeros(&[m]),
            lstm_c: Tensor::zeros(&[m]),
        }
    }

    pub fn cast<U: Float>(&self) -> AgentState<U> {
        AgentState {
            vis_h: self.vis_h.cast(),
            vis_c: self.vis_c.cast(),
            lstm_h: self.lstm_h.cast(),
            lstm_c: self.lstm_c.cast(),
        }
    }
}

/// Graph handles for an [`AgentState`].
#[derive(Clone, Copy, Debug)]
pub struct StateNodes {
    pub vis_h: NodeId,
    pub vis_c: NodeId,
    pub lstm_h: NodeId,
    pub lstm_c: NodeId,
}

impl StateNodes {
    pub fn constant<T: Float>(g: &mut Graph<T>, state: &AgentState<T>) -> Self {
        StateNodes {
            vis_h: g.constant(state.vis_h.clone()),
            vis_c: g.constant(state.vis_c.clone()),
            lstm_h: g.constant(state.lstm_h.clone()),
            lstm_c: g.constant(state.lstm_c.clone()),
        }
    }

    pub fn read<T: Float>(&self, g: &Graph<T>) -> AgentState<T> {
        AgentState {
            vis_h: g.value(self.vis_h).clone(),
            vis_c: g.value(self.vis_c).clone(),
            lstm_h: g.value(self.lstm_h).clone(),
            lstm_c: g.value(self.lstm_c).clone(),
        }
    }
}

/// Inputs to one agent step besides the recurrent state.
#[derive(Clone, Debug)]
pub struct StepInput<'a> {
    pub obs: &'a Tensor<f32>,
    /// `None` at the start of an episode (all-zero one-hot).
    pub prev_action: Option<usize>,
    pub prev_reward: f32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepOptions {
    /// Hard attention threshold applied to every head before the spatial sum.
    pub threshold: Option<f64>,
}

/// Graph handles produced by one recorded step.
#[derive(Clone, Debug)]
pub struct StepNodes {
    pub logits: NodeId,
    pub value: NodeId,
    pub heads: Vec<HeadNodes>,
    /// Raw keys K (before the spatial basis is appended).
    pub keys: NodeId,
    pub state: StateNodes,
}

/// Result of one forward step with concrete tensors.
#[derive(Clone, Debug)]
pub struct StepOutput<T: Float = f32> {
    pub logits: Tensor<T>,
    pub value: T,
    pub heads: Vec<AttentionHeadResult<T>>,
    pub keys: Tensor<T>,
    pub state: AgentState<T>,
}

/// Queries or logits supplied by a bottom-up variant.
#[derive(Clone, Debug, PartialEq)]
pub enum AblationQueries<T: Float> {
    Queries(Vec<Tensor<T>>),
    Logits(Tensor<T>),
}

/// The attention agent: configuration plus the fixed spatial basis.
#[derive(Clone, Debug)]
pub struct Agent {
    config: AgentConfig,
    basis: SpatialBasis,
}

impl Agent {
    pub fn new(config: AgentConfig) -> Result<Self> {
        config.validate()?;
        let (h, w) = config.vision_map();
        let basis = SpatialBasis::new(h, w, config.basis_even, config.basis_odd)?;
        Ok(Agent { config, basis })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn basis(&self) -> &SpatialBasis {
        &self.basis
    }

    pub fn init_params(&self, seed: u64) -> ParamSet<f32> {
        init_params(&self.config, seed)
    }

    pub fn initial_state<T: Float>(&self) -> AgentState<T> {
        AgentState::zeros(&self.config)
    }

    fn check_obs(&self, obs: &Tensor<f32>) -> Result<()> {
        let want = [self.config.obs_height, self.config.obs_width, self.config.obs_channels];
        if obs.shape() != want {
            return Err(Error::shape(
                "vision_core",
                format!("observation {:?}, expected {want:?}", obs.shape()),
            ));
        }
        Ok(())
    }

    /// Convolutions + ConvLSTM on the graph; returns `(o_vis, h', c')`.
    pub fn vision_core_on_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        obs: &Tensor<f32>,
        vis_h: NodeId,
        vis_c: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        self.check_obs(obs)?;
        let mut x = g.constant(obs.cast());
        for (i, c) in self.config.conv_layers.iter().enumerate() {
            let w = g.param(params, &format!("vision/conv{i}/w"))?;
            let b = g.param(params, &format!("vision/conv{i}/b"))?;
            let y = g.conv2d(x, w, b, c.stride)?;
            x = g.relu(y);
        }
        let w = g.param(params, "vision/convlstm/w")?;
        let b = g.param(params, "vision/convlstm/b")?;
        let (h, c) = g.convlstm_cell(x, vis_h, vis_c, w, b)?;
        Ok((h, h, c))
    }

    /// One vision-core step with concrete tensors: `(o_vis, (h', c'))`.
    pub fn vision_core_forward<T: Float>(
        &self,
        obs: &Tensor<f32>,
        vis_h: &Tensor<T>,
        vis_c: &Tensor<T>,
        params: &ParamSet<T>,
    ) -> Result<(Tensor<T>, (Tensor<T>, Tensor<T>))> {
        let mut g = Graph::new();
        let h0 = g.constant(vis_h.clone());
        let c0 = g.constant(vis_c.clone());
        let (o, h, c) = self.vision_core_on_graph(&mut g, params, obs, h0, c0)?;
        Ok((g.value(o).clone(), (g.value(h).clone(), g.value(c).clone())))
    }

    /// The top-down query MLP applied to the previous policy-LSTM hidden
    /// state; returns one node per head.
    pub fn queries_on_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        lstm_h: NodeId,
    ) -> Result<Vec<NodeId>> {
        let mut x = lstm_h;
        for i in 0..self.config.query_hidden.len() {
            let w = g.param(params, &format!("query/fc{i}/w"))?;
            let b = g.param(params, &format!("query/fc{i}/b"))?;
            let y = g.dense(x, w, b)?;
            x = g.relu(y);
        }
        let w = g.param(params, "query/out/w")?;
        let b = g.param(params, "query/out/b")?;
        let flat = g.dense(x, w, b)?;
        self.split_heads(g, flat)
    }

    fn split_heads<T: Float>(&self, g: &mut Graph<T>, flat: NodeId) -> Result<Vec<NodeId>> {
        let len = self.config.query_len();
        let flat = g.reshape(flat, &[self.config.heads * len])?;
        (0..self.config.heads)
            .map(|n| g.slice_last(flat, n * len, len))
            .collect()
    }

    /// Query vectors from the previous policy-LSTM hidden state alone.
    pub fn query_network<T: Float>(&self, lstm_h: &Tensor<T>, params: &ParamSet<T>) -> Result<Vec<Tensor<T>>> {
        if self.config.variant != Variant::TopDown {
            return Err(Error::invalid(format!(
                "query network is only defined for top_down, not {}",
                self.config.variant
            )));
        }
        let mut g = Graph::new();
        let h = g.constant(lstm_h.clone());
        let qs = self.queries_on_graph(&mut g, params, h)?;
        Ok(qs.into_iter().map(|q| g.value(q).clone()).collect())
    }

    /// Queries (fixed_query) or logits (l2_norm_key) used by the bottom-up
    /// variants. `keys` is K̃, keys with the spatial basis appended.
    pub fn ablation_queries<T: Float>(&self, params: &ParamSet<T>, keys: &Tensor<T>) -> Result<AblationQueries<T>> {
        match self.config.variant {
            Variant::TopDown => Err(Error::invalid("ablation_queries called for the top_down variant")),
            Variant::FixedQuery => {
                let mut g = Graph::new();
                let q = g.param(params, "query/fixed")?;
                let qs = self.split_heads(&mut g, q)?;
                Ok(AblationQueries::Queries(qs.into_iter().map(|q| g.value(q).clone()).collect()))
            }
            Variant::L2NormKey => Ok(AblationQueries::Logits(attention::l2_norm_logits(keys)?)),
        }
    }

    /// Record a full agent step on `g`.
    pub fn step_on_graph<T: Float>(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        input: &StepInput<'_>,
        state: StateNodes,
        options: StepOptions,
    ) -> Result<StepNodes> {
        let cfg = &self.config;
        let (o_vis, vis_h, vis_c) = self.vision_core_on_graph(g, params, input.obs, state.vis_h, state.vis_c)?;
        let keys = g.slice_last(o_vis, 0, cfg.key_channels)?;
        let values = g.slice_last(o_vis, cfg.key_channels, cfg.value_channels)?;
        let basis = g.constant(self.basis.tensor());
        let keys_t = g.concat(&[keys, basis])?;
        let values_t = g.concat(&[values, basis])?;

        let heads: Vec<HeadNodes> = match cfg.variant {
            Variant::TopDown | Variant::FixedQuery => {
                let queries = if cfg.variant == Variant::TopDown {
                    self.queries_on_graph(g, params, state.lstm_h)?
                } else {
                    let q = g.param(params, "query/fixed")?;
                    self.split_heads(g, q)?
                };
                queries
                    .into_iter()
                    .map(|q| head_on_graph(g, LogitSource::Query(q), keys_t, values_t, options.threshold))
                    .collect::<Result<_>>()?
            }
            Variant::L2NormKey => {
                let logits = g.channel_l2_norm(keys_t);
                (0..cfg.heads)
                    .map(|_| head_on_graph(g, LogitSource::Logits(logits), keys_t, values_t, options.threshold))
                    .collect::<Result<_>>()?
            }
        };

        let mut core_in: Vec<NodeId> = heads.iter().map(|h| h.answer).collect();
        core_in.extend(heads.iter().filter_map(|h| h.query));
        let mut one_hot = Tensor::zeros(&[cfg.num_actions]);
        if let Some(a) = input.prev_action {
            if a >= cfg.num_actions {
                return Err(Error::invalid(format!("previous action {a} out of range")));
            }
            one_hot.data_mut()[a] = T::one();
        }
        core_in.push(g.constant(one_hot));
        core_in.push(g.constant(Tensor::from_slice(&[1], &[T::of(input.prev_reward as f64)])?));
        let mut x = g.concat(&core_in)?;
        for i in 0..cfg.answer_hidden.len() {
            let w = g.param(params, &format!("answer/fc{i}/w"))?;
            let b = g.param(params, &format!("answer/fc{i}/b"))?;
            let y = g.dense(x, w, b)?;
            x = g.relu(y);
        }
        let w = g.param(params, "policy/lstm/w")?;
        let b = g.param(params, "policy/lstm/b")?;
        let (lstm_h, lstm_c) = g.lstm_cell(x, state.lstm_h, state.lstm_c, w, b)?;

        let w = g.param(params, "output/fc/w")?;
        let b = g.param(params, "output/fc/b")?;
        let hidden = g.dense(lstm_h, w, b)?;
        let hidden = g.relu(hidden);
        let w = g.param(params, "output/policy/w")?;
        let b = g.param(params, "output/policy/b")?;
        let logits = g.dense(hidden, w, b)?;
        let w = g.param(params, "output/value/w")?;
        let b = g.param(params, "output/value/b")?;
        let value = g.dense(hidden, w, b)?;

        Ok(StepNodes {
            logits,
            value,
            heads,
            keys,
            state: StateNodes {
                vis_h,
                vis_c,
                lstm_h,
                lstm_c,
            },
        })
    }

    /// One forward step with concrete tensors.
    pub fn step<T: Float>(
        &self,
        params: &ParamSet<T>,
        input: &StepInput<'_>,
        state: &AgentState<T>,
        options: StepOptions,
    ) -> Result<StepOutput<T>> {
        let mut g = Graph::new();
        let nodes = StateNodes::constant(&mut g, state);
        let out = self.step_on_graph(&mut g, params, input, nodes, options)?;
        Ok(self.read_step(&g, &out))
    }

    pub fn read_step<T: Float>(&self, g: &Graph<T>, out: &StepNodes) -> StepOutput<T> {
        let heads = out
            .heads
            .iter()
            .map(|h| AttentionHeadResult {
                query: h.query.map_or_else(|| Tensor::zeros(&[0]), |q| g.value(q).clone()),
                logits: g.value(h.logits).clone(),
                map: g.value(h.map).clone(),
                answer: g.value(h.answer).clone(),
            })
            .collect();
        StepOutput {
            logits: g.value(out.logits).clone(),
            value: g.value(out.value).data()[0],
            heads,
            keys: g.value(out.keys).clone(),
            state: out.state.read(g),
        }
    }
}
