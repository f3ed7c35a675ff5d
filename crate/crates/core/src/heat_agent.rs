//! The learning resource allocator: a shared transformer encoder producing
//! per-node global features, a branch-headed actor, twin online critics,
//! twin offline critics and twin value nets.
//!
//! Offline training fits the value nets to an upper expectile of the offline
//! critics and bootstraps those critics from the value nets, so it never
//! queries actions outside the buffer. Online training regresses the online
//! critics on an enumerated max over the joint action space and moves the
//! actor with an on-policy lesson plus an offline lesson weighted by how much
//! the offline critics beat the online ones.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mdp_env::{feature_dim, sample_hybrid, Action4, Agent, BufferError, GlobalBatch, NodeState5, Observation, Origin, ReplayBuffer, Transition};
use crate::neural::{expectile, leaky_relu, Adam, AdamConfig, Dense, Encoder, EncoderConfig, Gradients, Graph, NeuralError, ParamId, ParamStore, Tensor, Var};
use crate::node_mac::ParameterSets;
use crate::sim_engine::{policy_stream, stream_rng};

/// Stream used for weight initialisation, apart from node and policy streams.
pub const INIT_STREAM: u64 = 0xFFFF_FFFE;
pub const ENT_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum HeatError {
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("non-finite {phase} loss at update {update}: {detail}")]
    NonFinite { phase: &'static str, update: u64, detail: String },
    #[error("invalid agent config: {0}")]
    Config(String),
    #[error("checkpoint does not match this agent: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatConfig {
    pub encoder: EncoderConfig,
    /// Widths of the per-node state path, increasing.
    pub state_widths: Vec<usize>,
    /// Widths of the global-feature path, decreasing.
    pub global_widths: Vec<usize>,
    pub trunk_width: usize,
    pub rho: f64,
    pub alpha: f64,
    pub beta_off: f64,
    pub gamma_start: f64,
    pub gamma_max: f64,
    pub gamma_ramp_updates: u64,
    pub lr: f64,
    /// Offline updates interleaved before each online update.
    pub offline_per_online: usize,
    pub pretrain_steps: usize,
    /// Online updates on the offline buffer alone, after pretraining and
    /// before the first interaction.
    pub warmup_steps: usize,
    /// Completed transitions between training rounds.
    pub train_every: usize,
    pub online_capacity: usize,
    pub offline_enabled: bool,
    /// Minimise `mean(Lesson_on − Lesson_off)` instead of maximising the sum.
    pub alg2_literal_sign: bool,
    /// Actions drawn from the policy per state for the online lesson.
    pub policy_samples: usize,
    /// Subtract the policy-weighted mean of the online critic from the
    /// sampled action values.
    pub policy_baseline: bool,
    /// Joint action spaces larger than this use coordinate ascent for the max.
    pub max_enumerated_actions: usize,
    pub act_mode: ActMode,
}

impl Default for HeatConfig {
    fn default() -> Self {
        HeatConfig {
            encoder: EncoderConfig::default(),
            state_widths: vec![32, 64],
            global_widths: vec![24, 16],
            trunk_width: 64,
            rho: 0.7,
            alpha: 0.05,
            beta_off: 1.0,
            gamma_start: 0.5,
            gamma_max: 0.99,
            gamma_ramp_updates: 1000,
            lr: 3e-4,
            offline_per_online: 1,
            pretrain_steps: 1000,
            warmup_steps: 1000,
            train_every: 4,
            online_capacity: 20_000,
            offline_enabled: true,
            alg2_literal_sign: false,
            policy_samples: 16,
            policy_baseline: true,
            max_enumerated_actions: 864,
            act_mode: ActMode::Sample,
        }
    }
}

impl HeatConfig {
    /// The ablation without the offline module: no offline nets, no
    /// pretraining, no offline trainer steps and no offline lesson.
    pub fn online_only(&self) -> Self {
        HeatConfig { beta_off: 0.0, offline_enabled: false, pretrain_steps: 0, warmup_steps: 0, offline_per_online: 0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), HeatError> {
        self.encoder.validate()?;
        let bad = |m: &str| Err(HeatError::Config(m.to_string()));
        if !(self.rho > 0.5 && self.rho < 1.0) {
            return bad("rho must lie in (0.5, 1)");
        }
        if !(self.gamma_start > 0.0 && self.gamma_start <= 1.0 && self.gamma_max > 0.0 && self.gamma_max <= 1.0) {
            return bad("gamma values must lie in (0, 1]");
        }
        if self.alpha < 0.0 || self.beta_off < 0.0 {
            return bad("alpha and beta must be non-negative");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.state_widths.is_empty() || self.global_widths.is_empty() || self.trunk_width == 0 {
            return bad("network widths must be non-empty");
        }
        if self.state_widths.iter().chain(&self.global_widths).any(|w| *w == 0) {
            return bad("network widths must be positive");
        }
        if self.train_every == 0 || self.policy_samples == 0 || self.online_capacity == 0 {
            return bad("train_every, policy_samples and online_capacity must be positive");
        }
        Ok(())
    }

    /// Linear ramp from `gamma_start` to `gamma_max` over the first updates.
    pub fn gamma(&self, updates: u64) -> f64 {
        if self.gamma_ramp_updates == 0 || updates >= self.gamma_ramp_updates {
            return self.gamma_max;
        }
        let frac = updates as f64 / self.gamma_ramp_updates as f64;
        self.gamma_start + (self.gamma_max - self.gamma_start) * frac
    }
}

pub fn mar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Mean expectile loss of `targets − predictions`.
pub fn expectile_loss(residuals: &[f64], rho: f64) -> f64 {
    residuals.iter().map(|&x| expectile(x, rho)).sum::<f64>() / residuals.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
struct FeatureStack {
    layers: Vec<Dense>,
}

impl FeatureStack {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut prev = input;
        let layers = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let d = Dense::new(store, &format!("{name}.{i}"), prev, w, rng);
                prev = w;
                d
            })
            .collect();
        FeatureStack { layers }
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var, NeuralError> {
        let mut h = x;
        for layer in &self.layers {
            let z = layer.forward(g, h)?;
            h = g.leaky_relu(z);
        }
        Ok(h)
    }

    fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim)
    }

    fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

/// π_θ: four softmax heads over USF, power, DSF and window.
#[derive(Clone, Debug, PartialEq)]
pub struct ActorNet {
    state: FeatureStack,
    global: FeatureStack,
    trunk: Dense,
    heads: Vec<Dense>,
}

impl ActorNet {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &NetDims, config: &HeatConfig, rng: &mut R) -> Self {
        let state = FeatureStack::new(store, &format!("{name}.state"), dims.state, &config.state_widths, rng);
        let global = FeatureStack::new(store, &format!("{name}.global"), dims.global, &config.global_widths, rng);
        let trunk = Dense::new(store, &format!("{name}.trunk"), state.out_dim() + global.out_dim(), config.trunk_width, rng);
        let heads = dims
            .branches
            .iter()
            .enumerate()
            .map(|(b, &size)| Dense::new(store, &format!("{name}.head{b}"), config.trunk_width, size, rng))
            .collect();
        ActorNet { state, global, trunk, heads }
    }

    /// Per-branch log-probabilities, each `N × branch size`.
    pub fn log_probs(&self, g: &mut Graph<'_>, s: Var, gf: Var) -> Result<Vec<Var>, NeuralError> {
        let hs = self.state.forward(g, s)?;
        let hg = self.global.forward(g, gf)?;
        let x = g.concat_cols(hs, hg);
        let t = self.trunk.forward(g, x)?;
        let t = g.leaky_relu(t);
        self.heads
            .iter()
            .map(|h| {
                let logits = h.forward(g, t)?;
                Ok(g.log_softmax_rows(logits))
            })
            .collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.state.params();
        p.extend(self.global.params());
        p.extend(self.trunk.params());
        p.extend(self.heads.iter().flat_map(|h| h.params()));
        p
    }
}

/// Q(s, a, 𝒢) with a one-hot action input.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticNet {
    state: FeatureStack,
    global: FeatureStack,
    trunk: Dense,
    head: Dense,
    branches: [usize; 4],
}

impl CriticNet {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &NetDims, config: &HeatConfig, rng: &mut R) -> Self {
        let state = FeatureStack::new(store, &format!("{name}.state"), dims.state, &config.state_widths, rng);
        let global = FeatureStack::new(store, &format!("{name}.global"), dims.global, &config.global_widths, rng);
        let action_dim: usize = dims.branches.iter().sum();
        let trunk = Dense::new(
            store,
            &format!("{name}.trunk"),
            state.out_dim() + global.out_dim() + action_dim,
            config.trunk_width,
            rng,
        );
        let head = Dense::new(store, &format!("{name}.head"), config.trunk_width, 1, rng);
        CriticNet { state, global, trunk, head, branches: dims.branches }
    }

    pub fn forward(&self, g: &mut Graph<'_>, s: Var, gf: Var, a_onehot: Var) -> Result<Var, NeuralError> {
        let hs = self.state.forward(g, s)?;
        let hg = self.global.forward(g, gf)?;
        let x = g.concat_cols(hs, hg);
        let x = g.concat_cols(x, a_onehot);
        let t = self.trunk.forward(g, x)?;
        let t = g.leaky_relu(t);
        self.head.forward(g, t)
    }

    /// Values of every joint action for every row, `N × joint`, indexed as
    /// [`ParameterSets::joint_index`]. The first trunk layer is split into a
    /// state part and one weight row per action component; the additions are
    /// done in the same order as the one-hot forward, so results match it
    /// bit for bit.
    pub fn q_all(&self, store: &ParamStore, s: &Tensor, gf: &Tensor) -> Result<Vec<Vec<f64>>, NeuralError> {
        let (hs, hg) = {
            let mut g = Graph::new(store);
            let sv = g.input(s.clone());
            let gv = g.input(gf.clone());
            let hs = self.state.forward(&mut g, sv)?;
            let hg = self.global.forward(&mut g, gv)?;
            (g.value(hs).clone(), g.value(hg).clone())
        };
        let w = store.get(self.trunk.weight);
        let b = store.get(self.trunk.bias).data();
        let w2 = store.get(self.head.weight).data();
        let b2 = store.get(self.head.bias).data()[0];
        let width = w.cols();
        let feat = hs.cols() + hg.cols();
        let action_rows = |branch: usize, index: usize| -> &[f64] {
            let offset: usize = feat + self.branches[..branch].iter().sum::<usize>();
            w.row(offset + index)
        };
        let [nu, np, nd, nw] = self.branches;
        let mut out = Vec::with_capacity(s.rows());
        let mut x = vec![0.0; feat];
        let mut hidden = vec![0.0; 4 * width];
        for r in 0..s.rows() {
            x[..hs.cols()].copy_from_slice(hs.row(r));
            x[hs.cols()..].copy_from_slice(hg.row(r));
            let mut base = vec![0.0; width];
            for (p, &xp) in x.iter().enumerate() {
                if xp == 0.0 {
                    continue;
                }
                for (o, &wv) in base.iter_mut().zip(w.row(p)) {
                    *o += xp * wv;
                }
            }
            let mut q = Vec::with_capacity(nu * np * nd * nw);
            let add = |acc: &[f64], row: &[f64]| -> Vec<f64> { acc.iter().zip(row).map(|(a, b)| a + b).collect() };
            for u in 0..nu {
                let t_u = add(&base, action_rows(0, u));
                for p in 0..np {
                    let t_p = add(&t_u, action_rows(1, p));
                    for d in 0..nd {
                        let t_d = add(&t_p, action_rows(2, d));
                        // four windows at a time; each sum keeps the forward pass's order
                        let mut wi = 0;
                        while wi < nw {
                            let m = (nw - wi).min(4);
                            let rows: [&[f64]; 4] = std::array::from_fn(|k| action_rows(3, wi + k.min(m - 1)));
                            for h in 0..width {
                                let t = t_d[h];
                                for k in 0..4 {
                                    hidden[4 * h + k] = leaky_relu((t + rows[k][h]) + b[h]);
                                }
                            }
                            let mut acc = [0.0f64; 4];
                            for h in 0..width {
                                let wh = w2[h];
                                for k in 0..4 {
                                    acc[k] += hidden[4 * h + k] * wh;
                                }
                            }
                            q.extend(acc[..m].iter().map(|a| a + b2));
                            wi += m;
                        }
                    }
                }
            }
            out.push(q);
        }
        Ok(out)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.state.params();
        p.extend(self.global.params());
        p.extend(self.trunk.params());
        p.extend(self.head.params());
        p
    }
}

/// V(s, 𝒢).
#[derive(Clone, Debug, PartialEq)]
pub struct ValueNet {
    state: FeatureStack,
    global: FeatureStack,
    trunk: Dense,
    head: Dense,
}

impl ValueNet {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dims: &NetDims, config: &HeatConfig, rng: &mut R) -> Self {
        let state = FeatureStack::new(store, &format!("{name}.state"), dims.state, &config.state_widths, rng);
        let global = FeatureStack::new(store, &format!("{name}.global"), dims.global, &config.global_widths, rng);
        let trunk = Dense::new(store, &format!("{name}.trunk"), state.out_dim() + global.out_dim(), config.trunk_width, rng);
        let head = Dense::new(store, &format!("{name}.head"), config.trunk_width, 1, rng);
        ValueNet { state, global, trunk, head }
    }

    pub fn forward(&self, g: &mut Graph<'_>, s: Var, gf: Var) -> Result<Var, NeuralError> {
        let hs = self.state.forward(g, s)?;
        let hg = self.global.forward(g, gf)?;
        let x = g.concat_cols(hs, hg);
        let t = self.trunk.forward(g, x)?;
        let t = g.leaky_relu(t);
        self.head.forward(g, t)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.state.params();
        p.extend(self.global.params());
        p.extend(self.trunk.params());
        p.extend(self.head.params());
        p
    }
}

struct NetDims {
    state: usize,
    global: usize,
    branches: [usize; 4],
}

/// Offline critics ϕ, value nets ψ and their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineNets {
    pub q: [CriticNet; 2],
    pub q_targ: [CriticNet; 2],
    pub v: [ValueNet; 2],
    pub v_targ: [ValueNet; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatNets {
    pub encoder: Encoder,
    pub actor: ActorNet,
    pub q: [CriticNet; 2],
    pub q_targ: [CriticNet; 2],
    pub offline: Option<OfflineNets>,
}

impl HeatNets {
    pub fn build(store: &mut ParamStore, sets: &ParameterSets, config: &HeatConfig, rng: &mut ChaCha8Rng) -> Result<Self, HeatError> {
        let dims = NetDims { state: feature_dim(sets), global: config.encoder.model_dim, branches: sets.branch_sizes() };
        let encoder = Encoder::new(store, "encoder", dims.state, &config.encoder, rng)?;
        let actor = ActorNet::new(store, "actor", &dims, config, rng);
        let q = [CriticNet::new(store, "q_on1", &dims, config, rng), CriticNet::new(store, "q_on2", &dims, config, rng)];
        let q_targ = [
            CriticNet::new(store, "q_on1_targ", &dims, config, rng),
            CriticNet::new(store, "q_on2_targ", &dims, config, rng),
        ];
        let offline = config.offline_enabled.then(|| OfflineNets {
            q: [CriticNet::new(store, "q_off1", &dims, config, rng), CriticNet::new(store, "q_off2", &dims, config, rng)],
            q_targ: [
                CriticNet::new(store, "q_off1_targ", &dims, config, rng),
                CriticNet::new(store, "q_off2_targ", &dims, config, rng),
            ],
            v: [ValueNet::new(store, "v1", &dims, config, rng), ValueNet::new(store, "v2", &dims, config, rng)],
            v_targ: [ValueNet::new(store, "v1_targ", &dims, config, rng), ValueNet::new(store, "v2_targ", &dims, config, rng)],
        });
        let nets = HeatNets { encoder, actor, q, q_targ, offline };
        nets.sync_online_targets(store);
        nets.sync_offline_targets(store);
        Ok(nets)
    }

    pub fn online_params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        p.extend(self.actor.params());
        p.extend(self.q.iter().flat_map(|c| c.params()));
        p
    }

    pub fn offline_params(&self) -> Vec<ParamId> {
        let mut p = self.encoder.params();
        if let Some(off) = &self.offline {
            p.extend(off.q.iter().flat_map(|c| c.params()));
            p.extend(off.v.iter().flat_map(|v| v.params()));
        }
        p
    }

    pub fn sync_online_targets(&self, store: &mut ParamStore) {
        for (src, dst) in self.q.iter().zip(&self.q_targ) {
            store.copy_params(&src.params(), &dst.params());
        }
    }

    pub fn sync_offline_targets(&self, store: &mut ParamStore) {
        if let Some(off) = &self.offline {
            for (src, dst) in off.q.iter().zip(&off.q_targ) {
                store.copy_params(&src.params(), &dst.params());
            }
            for (src, dst) in off.v.iter().zip(&off.v_targ) {
                store.copy_params(&src.params(), &dst.params());
            }
        }
    }
}

/// Features of a set of node states, one row each.
pub fn state_matrix(states: &[NodeState5], sets: &ParameterSets, radius_m: f64) -> Tensor {
    let dim = feature_dim(sets);
    let mut data = vec![0.0; states.len() * dim];
    for (row, s) in data.chunks_mut(dim).zip(states) {
        s.write_features(sets, radius_m, row);
    }
    Tensor::new(states.len(), dim, data).expect("consistent shape")
}

pub fn action_one_hot(actions: &[Action4], sets: &ParameterSets) -> Tensor {
    let sizes = sets.branch_sizes();
    let dim: usize = sizes.iter().sum();
    let mut t = Tensor::zeros(actions.len(), dim);
    for (r, a) in actions.iter().enumerate() {
        let mut offset = 0;
        for (index, size) in a.indices().into_iter().zip(sizes) {
            t.set(r, offset + index, 1.0);
            offset += size;
        }
    }
    t
}

/// 𝒢 for a batch of node states.
pub fn encode_global(store: &ParamStore, encoder: &Encoder, states: &Tensor) -> Result<Tensor, NeuralError> {
    let mut g = Graph::new(store);
    let x = g.input(states.clone());
    let y = encoder.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}

fn column(values: Vec<f64>) -> Tensor {
    let n = values.len();
    Tensor::new(n, 1, values).expect("column shape")
}

/// `r + γ·min_i max_q Q_i(s′, q)` given the per-action values of both critics.
pub fn q_target_from_tables(r: &[f64], gamma: f64, q1: &[Vec<f64>], q2: &[Vec<f64>]) -> Vec<f64> {
    r.iter()
        .zip(q1.iter().zip(q2))
        .map(|(&r, (a, b))| {
            let m1 = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let m2 = b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            r + gamma * m1.min(m2)
        })
        .collect()
}

/// Constants of one offline update, computed before any gradient.
#[derive(Clone, Debug)]
pub struct OfflineFrozen {
    pub s: Tensor,
    pub a_onehot: Tensor,
    pub y_q: Tensor,
    pub y_v: Tensor,
    pub gamma: f64,
}

/// Constants of one online update, computed before any gradient.
#[derive(Clone, Debug)]
pub struct OnlineFrozen {
    pub s: Tensor,
    pub a_buffer: Vec<Action4>,
    pub a_onehot: Tensor,
    pub y_q: Tensor,
    /// Policy samples per state: `samples[k][row]`.
    pub samples: Vec<Vec<Action4>>,
    /// Online-critic weight of each sample, after the optional baseline.
    pub sample_weights: Vec<Tensor>,
    /// `β·Mar(Q^μ − Q^π)` at the buffer action.
    pub off_weights: Tensor,
    pub gamma: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OfflineLosses {
    pub critic: f64,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OnlineLosses {
    pub critic: f64,
    pub policy: f64,
    /// Whether any row had a positive offline margin.
    pub offline_lesson_active: bool,
}

pub struct HeatAgent {
    config: HeatConfig,
    sets: ParameterSets,
    radius_m: f64,
    n_nodes: usize,
    store: ParamStore,
    nets: HeatNets,
    adam: Adam,
    offline: Option<ReplayBuffer>,
    online: ReplayBuffer,
    rng: ChaCha8Rng,
    offline_updates: u64,
    online_updates: u64,
    since_train: usize,
    failure: Option<HeatError>,
}

impl HeatAgent {
    pub fn new(config: HeatConfig, sets: &ParameterSets, n_nodes: usize, radius_m: f64, seed: u64) -> Result<Self, HeatError> {
        config.validate()?;
        if n_nodes == 0 {
            return Err(HeatError::Config("at least one node is required".into()));
        }
        let mut init = stream_rng(seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let nets = HeatNets::build(&mut store, sets, &config, &mut init)?;
        let adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, store.len());
        Ok(HeatAgent {
            online: ReplayBuffer::new(n_nodes, config.online_capacity, Origin::Online),
            config,
            sets: sets.clone(),
            radius_m,
            n_nodes,
            store,
            nets,
            adam,
            offline: None,
            rng: policy_stream(seed, 0),
            offline_updates: 0,
            online_updates: 0,
            since_train: 0,
            failure: None,
        })
    }

    pub fn config(&self) -> &HeatConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn nets(&self) -> &HeatNets {
        &self.nets
    }

    pub fn online_buffer(&self) -> &ReplayBuffer {
        &self.online
    }

    pub fn offline_buffer(&self) -> Option<&ReplayBuffer> {
        self.offline.as_ref()
    }

    pub fn offline_updates(&self) -> u64 {
        self.offline_updates
    }

    pub fn online_updates(&self) -> u64 {
        self.online_updates
    }

    pub fn failure(&self) -> Option<&HeatError> {
        self.failure.as_ref()
    }

    pub fn set_act_mode(&mut self, mode: ActMode) {
        self.config.act_mode = mode;
    }

    /// Buffer sampled by both trainers; it is never written during the run.
    pub fn attach_offline(&mut self, buffer: ReplayBuffer) -> Result<(), HeatError> {
        if buffer.n_nodes() != self.n_nodes {
            return Err(HeatError::Config(format!(
                "offline buffer has {} nodes, agent has {}",
                buffer.n_nodes(),
                self.n_nodes
            )));
        }
        self.offline = Some(buffer);
        Ok(())
    }

    pub fn features(&self, states: &[NodeState5]) -> Tensor {
        state_matrix(states, &self.sets, self.radius_m)
    }

    pub fn encode(&self, states: &[NodeState5]) -> Result<Tensor, HeatError> {
        Ok(encode_global(&self.store, &self.nets.encoder, &self.features(states))?)
    }

    /// Per-branch probabilities for every node of a global state.
    pub fn policy(&self, global: &[NodeState5]) -> Result<Vec<Tensor>, HeatError> {
        let s = self.features(global);
        let gf = encode_global(&self.store, &self.nets.encoder, &s)?;
        self.policy_given(&s, &gf)
    }

    fn policy_given(&self, s: &Tensor, gf: &Tensor) -> Result<Vec<Tensor>, HeatError> {
        let mut g = Graph::new(&self.store);
        let sv = g.input(s.clone());
        let gv = g.input(gf.clone());
        let lps = self.nets.actor.log_probs(&mut g, sv, gv)?;
        Ok(lps.into_iter().map(|lp| exp_tensor(g.value(lp))).collect())
    }

    /// Chooses parameters for `node` given the whole network's state.
    pub fn act_node(&mut self, global: &[NodeState5], node: usize, mode: ActMode) -> Result<Action4, HeatError> {
        let probs = self.policy(global)?;
        let mut idx = [0usize; 4];
        for (b, p) in probs.iter().enumerate() {
            let row = p.row(node);
            idx[b] = match mode {
                ActMode::Greedy => argmax(row),
                ActMode::Sample => sample_categorical(row, &mut self.rng),
            };
        }
        Ok(Action4::from_indices(idx))
    }

    fn sample_batch(&mut self, offline_only: bool) -> Result<GlobalBatch, HeatError> {
        let batch = match (&self.offline, offline_only) {
            (Some(off), true) => off.sample_global_batch(&mut self.rng)?,
            (None, true) => return Err(BufferError::Empty.into()),
            (Some(off), false) => sample_hybrid(off, &self.online, &mut self.rng)?,
            (None, false) => self.online.sample_global_batch(&mut self.rng)?,
        };
        Ok(batch)
    }

    /// Row-wise `min_i max_q Q_i(s′, q, 𝒢′)` over the given twin critics.
    fn max_min_q(&self, critics: &[CriticNet; 2], s: &Tensor, gf: &Tensor) -> Result<Vec<f64>, HeatError> {
        let joint = self.sets.joint_size();
        let zeros = vec![0.0; s.rows()];
        if joint <= self.config.max_enumerated_actions {
            let q1 = critics[0].q_all(&self.store, s, gf)?;
            let q2 = critics[1].q_all(&self.store, s, gf)?;
            return Ok(q_target_from_tables(&zeros, 1.0, &q1, &q2));
        }
        let m1 = self.coordinate_max(&critics[0], s, gf)?;
        let m2 = self.coordinate_max(&critics[1], s, gf)?;
        Ok(m1.into_iter().zip(m2).map(|(a, b)| a.min(b)).collect())
    }

    /// Approximate max: two sweeps of per-branch coordinate ascent.
    fn coordinate_max(&self, critic: &CriticNet, s: &Tensor, gf: &Tensor) -> Result<Vec<f64>, HeatError> {
        let sizes = self.sets.branch_sizes();
        let mut best: Vec<[usize; 4]> = vec![[0; 4]; s.rows()];
        let mut values = self.critic_values(critic, s, gf, &best.iter().map(|i| Action4::from_indices(*i)).collect::<Vec<_>>())?;
        for _ in 0..2 {
            for b in 0..4 {
                for choice in 0..sizes[b] {
                    let trial: Vec<Action4> = best
                        .iter()
                        .map(|i| {
                            let mut i = *i;
                            i[b] = choice;
                            Action4::from_indices(i)
                        })
                        .collect();
                    let q = self.critic_values(critic, s, gf, &trial)?;
                    for r in 0..s.rows() {
                        if q[r] > values[r] {
                            values[r] = q[r];
                            best[r][b] = choice;
                        }
                    }
                }
            }
        }
        Ok(values)
    }

    fn critic_values(&self, critic: &CriticNet, s: &Tensor, gf: &Tensor, actions: &[Action4]) -> Result<Vec<f64>, HeatError> {
        let mut g = Graph::new(&self.store);
        let sv = g.input(s.clone());
        let gv = g.input(gf.clone());
        let av = g.input(action_one_hot(actions, &self.sets));
        let q = critic.forward(&mut g, sv, gv, av)?;
        Ok(g.value(q).data().to_vec())
    }

    fn twin_min(&self, critics: &[CriticNet; 2], s: &Tensor, gf: &Tensor, actions: &[Action4]) -> Result<Vec<f64>, HeatError> {
        let a = self.critic_values(&critics[0], s, gf, actions)?;
        let b = self.critic_values(&critics[1], s, gf, actions)?;
        Ok(a.into_iter().zip(b).map(|(x, y)| x.min(y)).collect())
    }

    /// Online TD target `r + γ·min_i max_q Q_targ,i(s′, q, 𝒢′)`.
    pub fn online_q_target(&self, r: &[f64], s_next: &Tensor, g_next: &Tensor, gamma: f64) -> Result<Vec<f64>, HeatError> {
        let m = self.max_min_q(&self.nets.q_targ, s_next, g_next)?;
        Ok(r.iter().zip(m).map(|(r, m)| r + gamma * m).collect())
    }

    pub fn prepare_offline(&mut self, batch: &GlobalBatch) -> Result<OfflineFrozen, HeatError> {
        let off = self.nets.offline.as_ref().ok_or_else(|| HeatError::Config("offline module is disabled".into()))?;
        let gamma = self.config.gamma(self.offline_updates);
        let s = self.features(&batch.states());
        let s_next = self.features(&batch.next_states());
        let gf = encode_global(&self.store, &self.nets.encoder, &s)?;
        let g_next = encode_global(&self.store, &self.nets.encoder, &s_next)?;
        let actions: Vec<Action4> = batch.rows.iter().map(|t| t.a).collect();
        let v_next = {
            let mut g = Graph::new(&self.store);
            let sv = g.input(s_next.clone());
            let gv = g.input(g_next.clone());
            let v1 = off.v_targ[0].forward(&mut g, sv, gv)?;
            let v2 = off.v_targ[1].forward(&mut g, sv, gv)?;
            g.value(v1).data().iter().zip(g.value(v2).data()).map(|(a, b)| a.min(*b)).collect::<Vec<f64>>()
        };
        let y_q: Vec<f64> = batch.rows.iter().zip(v_next).map(|(t, v)| t.r + gamma * v).collect();
        let y_v = self.twin_min(&off.q_targ, &s, &gf, &actions)?;
        Ok(OfflineFrozen { a_onehot: action_one_hot(&actions, &self.sets), s, y_q: column(y_q), y_v: column(y_v), gamma })
    }

    /// `(J_ϕ, J_ψ)`: summed twin MSE to `Y_q` and summed expectile loss of `Y_v − V`.
    pub fn offline_loss(&self, g: &mut Graph<'_>, f: &OfflineFrozen) -> Result<(Var, Var), HeatError> {
        let off = self.nets.offline.as_ref().ok_or_else(|| HeatError::Config("offline module is disabled".into()))?;
        let s = g.input(f.s.clone());
        let gf = self.nets.encoder.forward(g, s)?;
        let a = g.input(f.a_onehot.clone());
        let y_q = g.input(f.y_q.clone());
        let y_v = g.input(f.y_v.clone());
        let mut critic: Option<Var> = None;
        for q in &off.q {
            let pred = q.forward(g, s, gf, a)?;
            let diff = g.sub(y_q, pred);
            let sq = g.square(diff);
            let l = g.mean(sq);
            critic = Some(match critic {
                None => l,
                Some(c) => g.add(c, l),
            });
        }
        let mut value: Option<Var> = None;
        for v in &off.v {
            let pred = v.forward(g, s, gf)?;
            let diff = g.sub(y_v, pred);
            let e = g.expectile(diff, self.config.rho);
            let l = g.mean(e);
            value = Some(match value {
                None => l,
                Some(c) => g.add(c, l),
            });
        }
        Ok((critic.expect("twin critics"), value.expect("twin values")))
    }

    /// One offline step on ϕ, ψ and ϑ followed by a hard target copy.
    pub fn offline_update(&mut self) -> Result<OfflineLosses, HeatError> {
        let batch = self.sample_batch(true)?;
        let frozen = self.prepare_offline(&batch)?;
        self.offline_step(&frozen)
    }

    /// Gradient step of the offline losses on already computed targets.
    pub fn offline_step(&mut self, frozen: &OfflineFrozen) -> Result<OfflineLosses, HeatError> {
        let (losses, grads) = {
            let mut g = Graph::new(&self.store);
            let (jc, jv) = self.offline_loss(&mut g, frozen)?;
            let total = g.add(jc, jv);
            let losses = OfflineLosses { critic: g.value(jc).item(), value: g.value(jv).item() };
            (losses, g.backward(total))
        };
        if !(losses.critic.is_finite() && losses.value.is_finite()) {
            return Err(HeatError::NonFinite {
                phase: "offline",
                update: self.offline_updates,
                detail: format!("critic {} value {} gamma {}", losses.critic, losses.value, frozen.gamma),
            });
        }
        self.apply(grads, &self.nets.offline_params())?;
        self.nets.sync_offline_targets(&mut self.store);
        self.offline_updates += 1;
        Ok(losses)
    }

    pub fn prepare_online(&mut self, batch: &GlobalBatch) -> Result<OnlineFrozen, HeatError> {
        let gamma = self.config.gamma(self.online_updates);
        let s = self.features(&batch.states());
        let s_next = self.features(&batch.next_states());
        let gf = encode_global(&self.store, &self.nets.encoder, &s)?;
        let g_next = encode_global(&self.store, &self.nets.encoder, &s_next)?;
        let r: Vec<f64> = batch.rows.iter().map(|t| t.r).collect();
        let y_q = self.online_q_target(&r, &s_next, &g_next, gamma)?;
        let a_buffer: Vec<Action4> = batch.rows.iter().map(|t| t.a).collect();

        let probs = self.policy_given(&s, &gf)?;
        let n = s.rows();
        let samples: Vec<Vec<Action4>> = (0..self.config.policy_samples)
            .map(|_| {
                (0..n)
                    .map(|row| {
                        let mut idx = [0usize; 4];
                        for (b, p) in probs.iter().enumerate() {
                            idx[b] = sample_categorical(p.row(row), &mut self.rng);
                        }
                        Action4::from_indices(idx)
                    })
                    .collect()
            })
            .collect();

        let joint = self.sets.joint_size();
        let enumerate = joint <= self.config.max_enumerated_actions;
        let (q_sample, baseline, q_pi_buffer) = if enumerate {
            let t1 = self.nets.q[0].q_all(&self.store, &s, &gf)?;
            let t2 = self.nets.q[1].q_all(&self.store, &s, &gf)?;
            let qmin: Vec<Vec<f64>> = t1.iter().zip(&t2).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x.min(*y)).collect()).collect();
            let q_sample: Vec<Vec<f64>> =
                samples.iter().map(|ks| ks.iter().enumerate().map(|(r, a)| qmin[r][self.sets.joint_index(a)]).collect()).collect();
            let baseline: Vec<f64> = (0..n)
                .map(|r| {
                    let mut total = 0.0;
                    for (j, q) in qmin[r].iter().enumerate() {
                        let a = self.sets.action_from_joint(j);
                        let p: f64 = a.indices().iter().enumerate().map(|(b, &i)| probs[b].get(r, i)).product();
                        total += p * q;
                    }
                    total
                })
                .collect();
            let q_pi_buffer: Vec<f64> = a_buffer.iter().enumerate().map(|(r, a)| qmin[r][self.sets.joint_index(a)]).collect();
            (q_sample, baseline, q_pi_buffer)
        } else {
            let q_sample = samples.iter().map(|ks| self.twin_min(&self.nets.q, &s, &gf, ks)).collect::<Result<Vec<_>, _>>()?;
            let baseline = (0..n).map(|r| q_sample.iter().map(|k| k[r]).sum::<f64>() / q_sample.len() as f64).collect();
            let q_pi_buffer = self.twin_min(&self.nets.q, &s, &gf, &a_buffer)?;
            (q_sample, baseline, q_pi_buffer)
        };
        let sample_weights = q_sample
            .into_iter()
            .map(|k| {
                let w = k
                    .iter()
                    .zip(&baseline)
                    .map(|(q, b)| if self.config.policy_baseline { q - b } else { *q })
                    .collect();
                column(w)
            })
            .collect();
        let off_weights = match (&self.nets.offline, self.config.beta_off > 0.0) {
            (Some(off), true) => {
                let q_mu = self.twin_min(&off.q, &s, &gf, &a_buffer)?;
                q_mu.iter().zip(&q_pi_buffer).map(|(m, p)| self.config.beta_off * mar(m - p)).collect()
            }
            _ => vec![0.0; n],
        };
        Ok(OnlineFrozen {
            a_onehot: action_one_hot(&a_buffer, &self.sets),
            s,
            a_buffer,
            y_q: column(y_q),
            samples,
            sample_weights,
            off_weights: column(off_weights),
            gamma,
        })
    }

    /// Joint `log π(a|s)` per row for the given actions.
    fn joint_log_prob(&self, g: &mut Graph<'_>, lps: &[Var], actions: &[Action4]) -> Var {
        let mut total: Option<Var> = None;
        for (b, &lp) in lps.iter().enumerate() {
            let idx: Vec<usize> = actions.iter().map(|a| a.indices()[b]).collect();
            let picked = g.gather(lp, &idx);
            total = Some(match total {
                None => picked,
                Some(t) => g.add(t, picked),
            });
        }
        total.expect("four branches")
    }

    /// `(J_φ, J_π)` for frozen constants.
    pub fn online_loss(&self, g: &mut Graph<'_>, f: &OnlineFrozen) -> Result<(Var, Var), HeatError> {
        let s = g.input(f.s.clone());
        let gf = self.nets.encoder.forward(g, s)?;
        let a = g.input(f.a_onehot.clone());
        let y_q = g.input(f.y_q.clone());
        let mut critic: Option<Var> = None;
        for q in &self.nets.q {
            let pred = q.forward(g, s, gf, a)?;
            let diff = g.sub(y_q, pred);
            let sq = g.square(diff);
            let l = g.mean(sq);
            critic = Some(match critic {
                None => l,
                Some(c) => g.add(c, l),
            });
        }

        let lps = self.nets.actor.log_probs(g, s, gf)?;
        let k = f.samples.len() as f64;
        let mut on: Option<Var> = None;
        for (actions, weights) in f.samples.iter().zip(&f.sample_weights) {
            let lp = self.joint_log_prob(g, &lps, actions);
            let p = g.exp(lp);
            let not_p = g.scale(p, -1.0);
            let not_p = g.add_scalar(not_p, 1.0 + ENT_EPSILON);
            let ent = g.log(not_p);
            let ent = g.scale(ent, self.config.alpha);
            let w = g.input(weights.clone());
            let weighted = g.mul(w, lp);
            let term = g.add(ent, weighted);
            on = Some(match on {
                None => term,
                Some(o) => g.add(o, term),
            });
        }
        let on = g.scale(on.expect("at least one policy sample"), 1.0 / k);
        let lp_buffer = self.joint_log_prob(g, &lps, &f.a_buffer);
        let off_w = g.input(f.off_weights.clone());
        let off = g.mul(off_w, lp_buffer);
        let policy = if self.config.alg2_literal_sign {
            let d = g.sub(on, off);
            g.mean(d)
        } else {
            let s = g.add(on, off);
            let m = g.mean(s);
            g.scale(m, -1.0)
        };
        Ok((critic.expect("twin critics"), policy))
    }

    /// One online step on φ, θ and ϑ followed by a hard target copy.
    pub fn online_update(&mut self) -> Result<OnlineLosses, HeatError> {
        let batch = self.sample_batch(false)?;
        let frozen = self.prepare_online(&batch)?;
        let (losses, grads) = {
            let mut g = Graph::new(&self.store);
            let (jc, jp) = self.online_loss(&mut g, &frozen)?;
            let total = g.add(jc, jp);
            let losses = OnlineLosses {
                critic: g.value(jc).item(),
                policy: g.value(jp).item(),
                offline_lesson_active: frozen.off_weights.data().iter().any(|w| *w > 0.0),
            };
            (losses, g.backward(total))
        };
        if !(losses.critic.is_finite() && losses.policy.is_finite()) {
            return Err(HeatError::NonFinite {
                phase: "online",
                update: self.online_updates,
                detail: format!("critic {} policy {} gamma {}", losses.critic, losses.policy, frozen.gamma),
            });
        }
        self.apply(grads, &self.nets.online_params())?;
        self.nets.sync_online_targets(&mut self.store);
        self.online_updates += 1;
        Ok(losses)
    }

    fn apply(&mut self, mut grads: Gradients, allowed: &[ParamId]) -> Result<(), HeatError> {
        grads.retain(allowed);
        self.adam.step(&mut self.store, &grads)?;
        Ok(())
    }

    /// Offline phase, then online updates on the offline buffer, all before
    /// interaction.
    pub fn pretrain(&mut self) -> Result<usize, HeatError> {
        if !self.config.offline_enabled || self.offline.is_none() {
            return Ok(0);
        }
        for _ in 0..self.config.pretrain_steps {
            self.offline_update()?;
        }
        for _ in 0..self.config.warmup_steps {
            self.online_update()?;
        }
        Ok(self.config.pretrain_steps + self.config.warmup_steps)
    }

    /// `k` offline updates then one online update. Returns false when the
    /// buffers cannot yet form a batch.
    pub fn train_round(&mut self) -> Result<bool, HeatError> {
        if self.config.offline_enabled && self.offline.is_some() {
            for _ in 0..self.config.offline_per_online {
                self.offline_update()?;
            }
        }
        match self.online_update() {
            Ok(_) => Ok(true),
            Err(HeatError::Buffer(BufferError::NotReady(_) | BufferError::Empty)) => Ok(false),
            Err(e) => Err(e),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<(), HeatError> {
        let mut meta = BTreeMap::new();
        meta.insert("offline_updates".to_string(), self.offline_updates.to_string());
        meta.insert("online_updates".to_string(), self.online_updates.to_string());
        self.store.write_checkpoint(&meta, out)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(&mut self, input: &mut R) -> Result<(), HeatError> {
        let (loaded, meta) = ParamStore::read_checkpoint(input)?;
        let counter = |key: &str| -> Result<u64, HeatError> {
            meta.get(key)
                .ok_or_else(|| HeatError::Checkpoint(format!("missing {key}")))?
                .parse()
                .map_err(|_| HeatError::Checkpoint(format!("bad {key}")))
        };
        let offline_updates = counter("offline_updates")?;
        let online_updates = counter("online_updates")?;
        self.store.load_values(&loaded).map_err(|e| HeatError::Checkpoint(e.to_string()))?;
        self.offline_updates = offline_updates;
        self.online_updates = online_updates;
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), HeatError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(NeuralError::from)?);
        self.write_checkpoint(&mut out)?;
        out.flush().map_err(NeuralError::from)?;
        Ok(())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<(), HeatError> {
        let mut input = std::fs::File::open(path).map_err(NeuralError::from)?;
        self.read_checkpoint(&mut input)
    }
}

impl Agent for HeatAgent {
    fn act(&mut self, obs: &Observation<'_>) -> Action4 {
        let mode = self.config.act_mode;
        match self.act_node(obs.global, obs.node, mode) {
            Ok(a) => a,
            Err(e) => {
                self.failure.get_or_insert(e);
                obs.global[obs.node].params
            }
        }
    }

    fn observe(&mut self, transition: &Transition, _global: &[NodeState5]) {
        self.online.push(transition.clone());
        self.since_train += 1;
        if self.failure.is_some() || self.since_train < self.config.train_every {
            return;
        }
        self.since_train = 0;
        if let Err(e) = self.train_round() {
            self.failure = Some(e);
        }
    }

    fn train_updates(&self) -> u64 {
        self.online_updates + self.offline_updates
    }
}

fn exp_tensor(t: &Tensor) -> Tensor {
    Tensor::new(t.rows(), t.cols(), t.data().iter().map(|v| v.exp()).collect()).expect("same shape")
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expectile_and_mar_examples() {
        assert_eq!(expectile_loss(&[2.0], 0.5), 2.0);
        assert!((expectile_loss(&[-1.0], 0.7) - 0.3).abs() < 1e-15);
        assert_eq!(mar(-3.0), 0.0);
        assert_eq!(mar(2.0), 2.0);
        assert_eq!(mar(0.0), 0.0);
    }

    #[test]
    fn gamma_schedule_ramps_linearly() {
        let c = HeatConfig::default();
        assert_eq!(c.gamma(0), 0.5);
        assert!((c.gamma(500) - 0.745).abs() < 1e-12);
        assert_eq!(c.gamma(1000), 0.99);
        assert_eq!(c.gamma(5000), 0.99);
    }

    #[test]
    fn config_validation() {
        assert!(HeatConfig::default().validate().is_ok());
        assert!(HeatConfig { rho: 0.5, ..HeatConfig::default() }.validate().is_err());
        assert!(HeatConfig { gamma_max: 1.2, ..HeatConfig::default() }.validate().is_err());
        let online = HeatConfig::default().online_only();
        assert_eq!(online.beta_off, 0.0);
        assert!(!online.offline_enabled);
        assert_eq!(online.pretrain_steps, 0);
    }

    #[test]
    fn one_hot_layout() {
        let sets = ParameterSets::default();
        let t = action_one_hot(&[Action4 { usf: 1, ptx: 5, dsf: 0, w: 3 }], &sets);
        assert_eq!(t.cols(), 22);
        let ones: Vec<usize> = (0..22).filter(|&c| t.get(0, c) == 1.0).collect();
        assert_eq!(ones, vec![1, 11, 12, 21]);
    }
}
