//! Navigation policies: the similarity network, the embedding-concatenation
//! baseline and the uniform random policy.
//!
//! The similarity network reads one row per seen or irrelevant class,
//! `[v, x_c, y_c, area, cs]`. Rows are embedded by a shared linear map,
//! mixed by self-attention over the class axis, flattened in class order
//! and fed through an LSTM into actor and critic heads.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use ssnav_tensor::nn::{lstm_cell, self_attention, AttentionParams, Linear, LstmParams};
use ssnav_tensor::{Graph, ParamStore, Tensor, TensorError, Var};

use crate::semantic::{similarity_column, ClassSplit, EmbeddingTable, SemanticError};
use crate::world::{detection_matrix, visible_objects, Action, GridWorld, Pose, WorldError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("observation does not match the {0} model")]
    WrongObservation(&'static str),
    #[error("model expects {expected} detection rows, class split has {found}")]
    RowMismatch { expected: usize, found: usize },
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Columns of a detection-matrix input row.
pub const ROW_FEATURES: usize = 5;
/// Side of the egocentric window used by the baseline's visual feature.
pub const VIEW_WINDOW: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    SsNet,
    ZsBaseline,
    Random,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::SsNet => "ssnet",
            ModelKind::ZsBaseline => "zs_baseline",
            ModelKind::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ssnet" => Some(ModelKind::SsNet),
            "zs_baseline" => Some(ModelKind::ZsBaseline),
            "random" => Some(ModelKind::Random),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// When false the attention block is replaced by a per-row linear layer.
    pub self_attention: bool,
    /// Per-row embedding width.
    pub d_in: usize,
    /// Attention key/value width and per-row output width.
    pub d_attn: usize,
    /// LSTM hidden size.
    pub hidden: usize,
    /// Width of the baseline's visual encoder.
    pub d_visual: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::SsNet,
            self_attention: true,
            d_in: 16,
            d_attn: 16,
            hidden: 64,
            d_visual: 64,
        }
    }
}

/// Model input for one time step.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    /// `[rows, 5]` detection matrix with the similarity column appended.
    Detection(Tensor),
    /// Flattened egocentric view and the target's raw embedding.
    Visual { feature: Tensor, target: Tensor },
    /// The random policy ignores its input.
    Blind,
}

/// Per-episode constants needed to build observations.
#[derive(Debug, Clone)]
pub struct EpisodeContext<'a> {
    pub world: &'a GridWorld,
    pub split: &'a ClassSplit,
    pub target: &'a str,
    /// Similarity of every model class to the target.
    pub cs_column: Vec<f64>,
    pub target_embedding: Vec<f64>,
}

impl<'a> EpisodeContext<'a> {
    pub fn new(
        world: &'a GridWorld,
        split: &'a ClassSplit,
        table: &EmbeddingTable,
        target: &'a str,
    ) -> Result<Self> {
        Ok(Self {
            world,
            split,
            target,
            cs_column: similarity_column(table, split, target)?,
            target_embedding: table.get(target)?.to_vec(),
        })
    }

    /// Detection rows plus the similarity column.
    pub fn detection_input(&self, pose: &Pose) -> Result<Tensor> {
        let m = detection_matrix(self.world, pose, self.split)?;
        let mut data = Vec::with_capacity(m.rows.len() * ROW_FEATURES);
        for (row, cs) in m.rows.iter().zip(&self.cs_column) {
            data.extend_from_slice(&row.features());
            data.push(*cs);
        }
        Ok(Tensor::matrix(m.rows.len(), ROW_FEATURES, data)?)
    }

    /// One-hot class channels over a 7x7 window in the agent's frame
    /// (forward 0..7 cells, lateral -3..=3), filled from visible objects.
    pub fn visual_feature(&self, pose: &Pose) -> Tensor {
        let channels = self.split.num_model_classes();
        let cells = VIEW_WINDOW * VIEW_WINDOW;
        let mut data = vec![0.0; cells * channels];
        let (hx, hy) = pose.direction();
        let hn = ((hx * hx + hy * hy) as f64).sqrt();
        let half = (VIEW_WINDOW / 2) as f64;
        for (obj, _) in visible_objects(self.world, pose) {
            let Some(ch) = self.split.model_row(&obj.class_name) else {
                continue;
            };
            let (dx, dy) = ((obj.x - pose.x) as f64, (obj.y - pose.y) as f64);
            let forward = ((dx * hx as f64 + dy * hy as f64) / hn).round().clamp(0.0, (VIEW_WINDOW - 1) as f64);
            let lateral = ((dx * hy as f64 - dy * hx as f64) / hn).round().clamp(-half, half);
            let cell = forward as usize * VIEW_WINDOW + (lateral + half) as usize;
            data[ch * cells + cell] = 1.0;
        }
        Tensor::row(data)
    }

    pub fn observe(&self, kind: ModelKind, pose: &Pose) -> Result<Observation> {
        Ok(match kind {
            ModelKind::SsNet => Observation::Detection(self.detection_input(pose)?),
            ModelKind::ZsBaseline => Observation::Visual {
                feature: self.visual_feature(pose),
                target: Tensor::row(self.target_embedding.clone()),
            },
            ModelKind::Random => Observation::Blind,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum Mixer {
    Attention(AttentionParams),
    RowWise(Linear),
}

/// Parameter indices of a network, in [`ParamStore`] order.
#[derive(Debug, Clone, PartialEq)]
enum Layout {
    SsNet {
        embed_w: usize,
        embed_b: usize,
        mixer: MixerLayout,
    },
    ZsBaseline {
        visual_w: usize,
        visual_b: usize,
    },
    Random,
}

#[derive(Debug, Clone, PartialEq)]
enum MixerLayout {
    Attention { q: usize, k: usize, v: usize, o: usize },
    RowWise { w: usize, b: usize },
}

#[derive(Debug, Clone, PartialEq)]
struct RecurrentLayout {
    lstm_w: usize,
    lstm_b: usize,
    actor_w: usize,
    actor_b: usize,
    critic_w: usize,
    critic_b: usize,
}

/// Architecture description. Parameters live in a separate [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    /// Number of detection rows (seen + irrelevant classes).
    pub rows: usize,
    /// Target embedding width (baseline only).
    pub embedding_dim: usize,
    layout: Layout,
    recurrent: Option<RecurrentLayout>,
}

/// Graph handles produced by one forward step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    /// `[1, 6]`
    pub logits: Var,
    /// `[1, 1]`
    pub value: Var,
    pub h: Var,
    pub c: Var,
    /// Per-row features before flattening, `[rows, d_attn]` (similarity network only).
    pub row_features: Option<Var>,
    pub attention: Option<Var>,
}

/// Plain-value policy output.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub logits: [f64; 6],
    pub value: f64,
    pub hidden: (Vec<f64>, Vec<f64>),
}

impl PolicyOutput {
    pub fn probabilities(&self) -> [f64; 6] {
        let max = self.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = self.logits.map(|l| (l - max).exp());
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= sum);
        p
    }
}

impl Network {
    /// Creates the architecture and registers freshly initialized
    /// parameters in a new store.
    pub fn new<R: Rng>(
        config: ModelConfig,
        rows: usize,
        embedding_dim: usize,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        if rows == 0 || config.d_in == 0 || config.d_attn == 0 || config.hidden == 0 || config.d_visual == 0 {
            return Err(ModelError::Config(format!("zero width in {config:?} with {rows} rows")));
        }
        let mut store = ParamStore::new();
        let (d_in, d_attn, hidden) = (config.d_in, config.d_attn, config.hidden);
        let (layout, lstm_input) = match config.kind {
            ModelKind::Random => {
                return Ok((
                    Self {
                        config,
                        rows,
                        embedding_dim,
                        layout: Layout::Random,
                        recurrent: None,
                    },
                    store,
                ))
            }
            ModelKind::SsNet => {
                let embed_w = store.init_uniform("embed.w", &[ROW_FEATURES, d_in], ROW_FEATURES, rng)?;
                let embed_b = store.init_uniform("embed.b", &[d_in], ROW_FEATURES, rng)?;
                let mixer = if config.self_attention {
                    MixerLayout::Attention {
                        q: store.init_uniform("attn.q", &[d_in, d_attn], d_in, rng)?,
                        k: store.init_uniform("attn.k", &[d_in, d_attn], d_in, rng)?,
                        v: store.init_uniform("attn.v", &[d_in, d_attn], d_in, rng)?,
                        o: store.init_uniform("attn.o", &[d_attn, d_attn], d_attn, rng)?,
                    }
                } else {
                    MixerLayout::RowWise {
                        w: store.init_uniform("rowwise.w", &[d_in, d_attn], d_in, rng)?,
                        b: store.init_uniform("rowwise.b", &[d_attn], d_in, rng)?,
                    }
                };
                (
                    Layout::SsNet {
                        embed_w,
                        embed_b,
                        mixer,
                    },
                    rows * d_attn,
                )
            }
            ModelKind::ZsBaseline => {
                let n_in = VIEW_WINDOW * VIEW_WINDOW * rows;
                let d_vis = config.d_visual;
                (
                    Layout::ZsBaseline {
                        visual_w: store.init_uniform("visual.w", &[n_in, d_vis], n_in, rng)?,
                        visual_b: store.init_uniform("visual.b", &[d_vis], n_in, rng)?,
                    },
                    d_vis + embedding_dim,
                )
            }
        };
        let fan = lstm_input + hidden;
        let recurrent = RecurrentLayout {
            lstm_w: store.init_uniform("lstm.w", &[fan, 4 * hidden], fan, rng)?,
            lstm_b: store.init_uniform("lstm.b", &[4 * hidden], fan, rng)?,
            actor_w: store.init_uniform("actor.w", &[hidden, Action::COUNT], hidden, rng)?,
            actor_b: store.init_uniform("actor.b", &[Action::COUNT], hidden, rng)?,
            critic_w: store.init_uniform("critic.w", &[hidden, 1], hidden, rng)?,
            critic_b: store.init_uniform("critic.b", &[1], hidden, rng)?,
        };
        Ok((
            Self {
                config,
                rows,
                embedding_dim,
                layout,
                recurrent: Some(recurrent),
            },
            store,
        ))
    }

    /// Checkpoint tags describing this architecture.
    pub fn to_meta(&self) -> IndexMap<String, String> {
        let c = &self.config;
        let mut m = IndexMap::new();
        m.insert("model".to_string(), c.kind.as_str().to_string());
        m.insert("self_attention".to_string(), c.self_attention.to_string());
        m.insert("rows".to_string(), self.rows.to_string());
        m.insert("embedding_dim".to_string(), self.embedding_dim.to_string());
        m.insert("d_in".to_string(), c.d_in.to_string());
        m.insert("d_attn".to_string(), c.d_attn.to_string());
        m.insert("hidden".to_string(), c.hidden.to_string());
        m.insert("d_visual".to_string(), c.d_visual.to_string());
        m
    }

    /// Rebuilds the architecture from checkpoint tags and checks that the
    /// stored parameters have the expected names and shapes.
    pub fn from_meta(meta: &IndexMap<String, String>, params: &ParamStore) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .ok_or_else(|| ModelError::Config(format!("checkpoint lacks `{k}` tag")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| ModelError::Config(format!("bad `{k}` tag")))
        };
        let kind = ModelKind::parse(get("model")?)
            .ok_or_else(|| ModelError::Config(format!("unknown model kind `{}`", meta["model"])))?;
        let self_attention = match get("self_attention")?.as_str() {
            "true" => true,
            "false" => false,
            other => return Err(ModelError::Config(format!("bad self_attention tag `{other}`"))),
        };
        let config = ModelConfig {
            kind,
            self_attention,
            d_in: num("d_in")?,
            d_attn: num("d_attn")?,
            hidden: num("hidden")?,
            d_visual: num("d_visual")?,
        };
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let (net, fresh) = Network::new(config, num("rows")?, num("embedding_dim")?, &mut rng)?;
        let layout_ok = fresh.len() == params.len()
            && fresh
                .iter()
                .zip(params.iter())
                .all(|((a, ta), (b, tb))| a == b && ta.shape() == tb.shape());
        if !layout_ok {
            return Err(ModelError::Config(
                "checkpoint parameters do not match the tagged architecture".into(),
            ));
        }
        Ok(net)
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    /// Zero `(h, c)` for the start of an episode.
    pub fn initial_hidden(&self) -> (Tensor, Tensor) {
        let h = self.config.hidden;
        (Tensor::zeros(&[1, h]), Tensor::zeros(&[1, h]))
    }

    /// Checks that `split` yields the row count this network was built for.
    pub fn check_split(&self, split: &ClassSplit) -> Result<()> {
        if split.num_model_classes() != self.rows {
            return Err(ModelError::RowMismatch {
                expected: self.rows,
                found: split.num_model_classes(),
            });
        }
        Ok(())
    }

    /// One recurrent step on the graph. `params` are the store's bound vars.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &[Var],
        obs: &Observation,
        h: Var,
        c: Var,
    ) -> Result<StepVars> {
        let (lstm_in, row_features, attention) = match (&self.layout, obs) {
            (Layout::Random, _) => {
                let logits = g.constant(Tensor::zeros(&[1, Action::COUNT]));
                let value = g.constant(Tensor::zeros(&[1, 1]));
                return Ok(StepVars {
                    logits,
                    value,
                    h,
                    c,
                    row_features: None,
                    attention: None,
                });
            }
            (
                Layout::SsNet {
                    embed_w,
                    embed_b,
                    mixer,
                },
                Observation::Detection(x),
            ) => {
                if x.dims2() != Some((self.rows, ROW_FEATURES)) {
                    return Err(ModelError::RowMismatch {
                        expected: self.rows,
                        found: x.shape()[0],
                    });
                }
                let x = g.constant(x.clone());
                let embed = Linear {
                    weight: params[*embed_w],
                    bias: Some(params[*embed_b]),
                };
                let e = embed.forward(g, x)?;
                let (mixed, attention) = match self.mixer(mixer, params) {
                    Mixer::Attention(p) => {
                        let out = self_attention(g, e, &p)?;
                        (out.output, Some(out.weights))
                    }
                    Mixer::RowWise(lin) => (lin.forward(g, e)?, None),
                };
                let flat = g.reshape(mixed, &[1, self.rows * self.config.d_attn])?;
                (flat, Some(mixed), attention)
            }
            (Layout::ZsBaseline { visual_w, visual_b }, Observation::Visual { feature, target }) => {
                let f = g.constant(feature.clone());
                let t = g.constant(target.clone());
                let enc = Linear {
                    weight: params[*visual_w],
                    bias: Some(params[*visual_b]),
                }
                .forward(g, f)?;
                (g.concat(&[enc, t], 1)?, None, None)
            }
            (Layout::SsNet { .. }, _) => return Err(ModelError::WrongObservation("ssnet")),
            (Layout::ZsBaseline { .. }, _) => return Err(ModelError::WrongObservation("zs_baseline")),
        };
        let r = self.recurrent.as_ref().expect("learned models have recurrent layers");
        let lstm = LstmParams {
            weight: params[r.lstm_w],
            bias: params[r.lstm_b],
        };
        let (h, c) = lstm_cell(g, lstm_in, h, c, &lstm)?;
        let logits = Linear {
            weight: params[r.actor_w],
            bias: Some(params[r.actor_b]),
        }
        .forward(g, h)?;
        let value = Linear {
            weight: params[r.critic_w],
            bias: Some(params[r.critic_b]),
        }
        .forward(g, h)?;
        Ok(StepVars {
            logits,
            value,
            h,
            c,
            row_features,
            attention,
        })
    }

    fn mixer(&self, layout: &MixerLayout, params: &[Var]) -> Mixer {
        match *layout {
            MixerLayout::Attention { q, k, v, o } => Mixer::Attention(AttentionParams {
                query: params[q],
                key: params[k],
                value: params[v],
                output: params[o],
            }),
            MixerLayout::RowWise { w, b } => Mixer::RowWise(Linear {
                weight: params[w],
                bias: Some(params[b]),
            }),
        }
    }

    /// Stand-alone forward pass returning plain values.
    pub fn predict(
        &self,
        params: &ParamStore,
        obs: &Observation,
        hidden: &(Tensor, Tensor),
    ) -> Result<PolicyOutput> {
        let mut g = Graph::new();
        let vars = params.bind_frozen(&mut g);
        let h = g.constant(hidden.0.clone());
        let c = g.constant(hidden.1.clone());
        let out = self.forward(&mut g, &vars, obs, h, c)?;
        Ok(step_output(&g, &out))
    }
}

/// Reads plain values out of a forward step.
pub fn step_output(g: &Graph, out: &StepVars) -> PolicyOutput {
    let mut logits = [0.0; 6];
    logits.copy_from_slice(g.value(out.logits).data());
    PolicyOutput {
        logits,
        value: g.value(out.value).item(),
        hidden: (g.value(out.h).data().to_vec(), g.value(out.c).data().to_vec()),
    }
}

/// The similarity network forward pass on plain values.
pub fn ssnet_forward(
    network: &Network,
    params: &ParamStore,
    input: &Tensor,
    hidden: &(Tensor, Tensor),
) -> Result<PolicyOutput> {
    if network.kind() != ModelKind::SsNet {
        return Err(ModelError::WrongObservation("ssnet"));
    }
    network.predict(params, &Observation::Detection(input.clone()), hidden)
}

/// The baseline forward pass on plain values.
pub fn zs_baseline_forward(
    network: &Network,
    params: &ParamStore,
    visual_feature: &Tensor,
    target_embedding: &Tensor,
    hidden: &(Tensor, Tensor),
) -> Result<PolicyOutput> {
    if network.kind() != ModelKind::ZsBaseline {
        return Err(ModelError::WrongObservation("zs_baseline"));
    }
    let obs = Observation::Visual {
        feature: visual_feature.clone(),
        target: target_embedding.clone(),
    };
    network.predict(params, &obs, hidden)
}

/// Uniform logits, zero value.
pub fn random_policy() -> PolicyOutput {
    PolicyOutput {
        logits: [0.0; 6],
        value: 0.0,
        hidden: (Vec::new(), Vec::new()),
    }
}

/// The parameter-free uniform policy over `rows` detection rows.
pub fn random_network(rows: usize, embedding_dim: usize) -> Result<(Network, ParamStore)> {
    let config = ModelConfig {
        kind: ModelKind::Random,
        ..ModelConfig::default()
    };
    Network::new(config, rows, embedding_dim, &mut rand::rngs::mock::StepRng::new(0, 1))
}

/// Builds an SSNet variant with or without the attention block.
pub fn make_ablated_ssnet<R: Rng>(
    config: &ModelConfig,
    rows: usize,
    disable_attention: bool,
    rng: &mut R,
) -> Result<(Network, ParamStore)> {
    let config = ModelConfig {
        kind: ModelKind::SsNet,
        self_attention: !disable_attention,
        ..config.clone()
    };
    Network::new(config, rows, 0, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

impl ActMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ActMode::Sample => "sample",
            ActMode::Greedy => "greedy",
        }
    }
}

/// Chooses an action from logits. Greedy ties go to the lowest index.
pub fn act(logits: &[f64; 6], mode: ActMode, rng: &mut ChaCha8Rng) -> Action {
    match mode {
        ActMode::Greedy => {
            let mut best = 0;
            for i in 1..6 {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            Action::from_index(best).unwrap()
        }
        ActMode::Sample => {
            let out = PolicyOutput {
                logits: *logits,
                value: 0.0,
                hidden: (Vec::new(), Vec::new()),
            };
            let p = out.probabilities();
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, pi) in p.iter().enumerate() {
                acc += pi;
                if u < acc {
                    return Action::from_index(i).unwrap();
                }
            }
            // Rounding left u above the final cumulative sum.
            let last = p.iter().rposition(|&x| x > 0.0).unwrap_or(5);
            Action::from_index(last).unwrap()
        }
    }
}
