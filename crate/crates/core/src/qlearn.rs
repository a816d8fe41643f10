//! Double deep Q-learning for causal power allocation.
//!
//! The Q-network maps a normalized state to one value per action grid level.
//! Infeasible levels are masked at selection time, so the network never has
//! to learn the constraints.

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::causal_mdp::{
    feasible_actions, rollout, ActionGrid, Experience, MdpState, Trajectory, DEFAULT_ACTION_LEVELS,
};
use crate::channel::{BlockSnrs, ChannelModel};
use crate::error::{config, Error, Result};

/// Number of state features fed to the network.
pub const STATE_FEATURES: usize = 5;

/// Stream id mixed into the training seed to draw the fixed evaluation channels.
const EVAL_STREAM: u64 = 0x6576_616c_7365_7473;

/// Scales that normalize raw states into network inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScale {
    pub p0: f64,
    pub mean_h: f64,
    pub mean_g: f64,
    /// Number of blocks per codeword.
    pub blocks: usize,
}

impl FeatureScale {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p0", self.p0),
            ("mean_h", self.mean_h),
            ("mean_g", self.mean_g),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return config(format!("feature scale {name} must be positive, got {v}"));
            }
        }
        if self.blocks == 0 {
            return config("feature scale needs at least one block");
        }
        Ok(())
    }

    /// `(P/P0, G/(1+G), h/mean_h, g/mean_g, blocks left/L)`, where `G` is the
    /// margin and the block count includes the current one.
    pub fn features(&self, s: &MdpState) -> [f64; STATE_FEATURES] {
        [
            s.p_rem / self.p0,
            s.margin / (1.0 + s.margin),
            s.h / self.mean_h,
            s.g / self.mean_g,
            (self.blocks + 1).saturating_sub(s.block_index) as f64 / self.blocks as f64,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    biases: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.biases) {
            out.push(b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>());
        }
    }
}

/// Fully connected network with rectifier hidden layers and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct QNetwork {
    layers: Vec<Layer>,
    scale: FeatureScale,
}

/// Parameter gradients laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// One regression sample: the network output at `action` should be `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSample {
    pub features: [f64; STATE_FEATURES],
    pub action: usize,
    pub target: f64,
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 || dims.contains(&0) {
        return config(format!(
            "layer dimensions must have at least two nonzero entries, got {dims:?}"
        ));
    }
    if dims[0] != STATE_FEATURES {
        return config(format!(
            "input layer must have {STATE_FEATURES} units, got {}",
            dims[0]
        ));
    }
    Ok(())
}

impl QNetwork {
    /// Weights and biases uniform in `+-1/sqrt(fan_in)`.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], scale: FeatureScale, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(dims, scale)?;
        for layer in &mut net.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for w in layer.weights.iter_mut().chain(layer.biases.iter_mut()) {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn zeros(dims: &[usize], scale: FeatureScale) -> Result<Self> {
        check_dims(dims)?;
        scale.validate()?;
        let layers = dims
            .windows(2)
            .map(|w| Layer {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                biases: vec![0.0; w[1]],
            })
            .collect();
        Ok(Self { layers, scale })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].inputs];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn scale(&self) -> &FeatureScale {
        &self.scale
    }

    pub fn num_actions(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_parameters() {
            return config(format!(
                "expected {} parameters, got {}",
                self.num_parameters(),
                params.len()
            ));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Numerical("non-finite network parameter".into()));
        }
        let mut rest = params;
        for l in &mut self.layers {
            let (w, tail) = rest.split_at(l.weights.len());
            l.weights.copy_from_slice(w);
            let (b, tail) = tail.split_at(l.biases.len());
            l.biases.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    /// Q-values for raw features.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        let mut z = Vec::new();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            layer.apply(&a, &mut z);
            if k < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut a, &mut z);
        }
        a
    }

    /// Summed squared error `sum (target - Q(x)[action])^2` and its gradient.
    pub fn loss_and_gradient(&self, samples: &[TrainingSample]) -> (f64, Gradients) {
        let mut grads = Gradients {
            weights: self
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: self
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        };
        let mut loss = 0.0;
        let last = self.layers.len() - 1;
        // activations[k] is the input of layer k; pre[k] its pre-activation
        let mut activations: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len() + 1];
        let mut pre: Vec<Vec<f64>> = vec![Vec::new(); self.layers.len()];
        for sample in samples {
            activations[0].clear();
            activations[0].extend_from_slice(&sample.features);
            for (k, layer) in self.layers.iter().enumerate() {
                let (head, tail) = activations.split_at_mut(k + 1);
                layer.apply(&head[k], &mut pre[k]);
                tail[0].clear();
                if k < last {
                    tail[0].extend(pre[k].iter().map(|v| v.max(0.0)));
                } else {
                    tail[0].extend_from_slice(&pre[k]);
                }
            }
            let err = activations[last + 1][sample.action] - sample.target;
            loss += err * err;

            let mut delta = vec![0.0; self.layers[last].outputs];
            delta[sample.action] = 2.0 * err;
            for k in (0..=last).rev() {
                let layer = &self.layers[k];
                let input = &activations[k];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    grads.biases[k][o] += d;
                    let row = &mut grads.weights[k][o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, x) in row.iter_mut().zip(input) {
                        *gw += d * x;
                    }
                }
                if k == 0 {
                    break;
                }
                let mut back = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += d * w;
                    }
                }
                for (b, z) in back.iter_mut().zip(&pre[k - 1]) {
                    if *z <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        (loss, grads)
    }

    /// `theta <- theta - lr * grad`.
    pub fn apply_gradient(&mut self, grads: &Gradients, lr: f64) {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            for (w, g) in layer.weights.iter_mut().zip(&grads.weights[k]) {
                *w -= lr * g;
            }
            for (b, g) in layer.biases.iter_mut().zip(&grads.biases[k]) {
                *b -= lr * g;
            }
        }
    }
}

/// Q-values over the action grid for state `s`.
pub fn q_forward(net: &QNetwork, s: &MdpState) -> Vec<f64> {
    net.forward(&net.scale.features(s))
}

/// Index of the largest of the first `count` values; ties go to the lowest
/// index.
pub fn masked_argmax(q: &[f64], count: usize) -> usize {
    let mut best = 0;
    for i in 1..count.min(q.len()) {
        if q[i] > q[best] {
            best = i;
        }
    }
    best
}

/// Exploring policy: a uniform feasible action with probability `xi`,
/// otherwise the best feasible action under `net`.
pub fn select_action<R: Rng + ?Sized>(
    net: &QNetwork,
    s: &MdpState,
    count: usize,
    xi: f64,
    rng: &mut R,
) -> usize {
    if rng.random::<f64>() < xi {
        rng.random_range(0..count)
    } else {
        masked_argmax(&q_forward(net, s), count)
    }
}

/// Regression target `r + Q_target(s', argmax_feasible Q_primary(s', .))`,
/// with no bootstrap after the last block.
pub fn ddqn_target(
    primary: &QNetwork,
    target: &QNetwork,
    e: &Experience,
    feasible_next: usize,
) -> f64 {
    if e.terminal {
        return e.reward;
    }
    let pick = masked_argmax(&q_forward(primary, &e.next_state), feasible_next);
    e.reward + q_forward(target, &e.next_state)[pick]
}

/// One SGD step on the summed squared error of `batch`. Returns the mean
/// squared error measured before the step.
pub fn train_step(
    primary: &mut QNetwork,
    target: &QNetwork,
    batch: &[Experience],
    eps: f64,
    grid: &ActionGrid,
    lr: f64,
) -> f64 {
    let samples: Vec<TrainingSample> = batch
        .iter()
        .map(|e| {
            let next_count = if e.terminal {
                1
            } else {
                feasible_actions(&e.next_state, eps, grid)
            };
            TrainingSample {
                features: primary.scale.features(&e.state),
                action: e.action,
                target: ddqn_target(primary, target, e, next_count),
            }
        })
        .collect();
    let (loss, grads) = primary.loss_and_gradient(&samples);
    primary.apply_gradient(&grads, lr);
    loss / batch.len().max(1) as f64
}

/// Fixed-capacity experience store that evicts the oldest entry first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Experience>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, e: Experience) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(e);
    }

    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        self.items.iter()
    }

    /// `n` distinct experiences drawn uniformly, or `None` if fewer are stored.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Option<Vec<Experience>> {
        if self.items.len() < n {
            return None;
        }
        Some(
            sample_indices(rng, self.items.len(), n)
                .into_iter()
                .map(|i| self.items[i])
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Replay buffer capacity.
    pub n_buff: usize,
    /// Rollouts collected per episode.
    pub n_tr: usize,
    /// Episodes between target network refreshes.
    pub n_ep: usize,
    /// Minibatch size.
    pub n_b: usize,
    pub xi_min: f64,
    pub xi_max: f64,
    /// Per-episode decrease of the exploration probability.
    pub delta_xi: f64,
    pub lr: f64,
    pub episodes: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub action_levels: usize,
    /// Channels in the fixed set used for the per-episode greedy evaluation.
    pub eval_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_buff: 5000,
            n_tr: 50,
            n_ep: 5,
            n_b: 64,
            xi_min: 0.1,
            xi_max: 1.0,
            delta_xi: 1e-4,
            lr: 1e-3,
            episodes: 2000,
            seed: 0,
            hidden: vec![64, 64],
            action_levels: DEFAULT_ACTION_LEVELS,
            eval_channels: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.xi_min && self.xi_min <= self.xi_max && self.xi_max <= 1.0) {
            return config("exploration range must satisfy 0 <= xi_min <= xi_max <= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config("learning rate must be positive");
        }
        if !(self.delta_xi >= 0.0 && self.delta_xi.is_finite()) {
            return config("exploration decrement must be nonnegative");
        }
        if self.n_buff == 0 || self.n_tr == 0 || self.n_ep == 0 || self.n_b == 0 {
            return config("buffer size, rollouts, refresh period and batch size must be positive");
        }
        if self.hidden.contains(&0) {
            return config("hidden layers must be nonempty");
        }
        if self.action_levels < 2 {
            return config("the action grid needs at least two levels");
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![STATE_FEATURES];
        dims.extend(&self.hidden);
        dims.push(self.action_levels);
        dims
    }

    /// Exploration probability after `episodes_done` episodes.
    pub fn xi_after(&self, episodes_done: usize) -> f64 {
        (self.xi_max - self.delta_xi * episodes_done as f64).max(self.xi_min)
    }
}

/// Per-episode training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    /// Mean squared error of the minibatch, NaN when no update happened.
    pub loss: f64,
    /// Mean greedy sum rate over the fixed evaluation channels.
    pub eval_rate: f64,
    pub xi: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: QNetwork,
    pub grid: ActionGrid,
    pub curves: Vec<EpisodeStats>,
    /// Number of target network refreshes performed.
    pub target_syncs: usize,
}

/// Trains a Q-network on channels drawn from `channel` with power budget `p0`
/// and covertness budget `eps`.
pub fn train(channel: &ChannelModel, p0: f64, eps: f64, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(channel, p0, eps, cfg, |_| {})
}

/// Like [`train`], calling `on_episode` after every episode.
pub fn train_with<F>(
    channel: &ChannelModel,
    p0: f64,
    eps: f64,
    cfg: &TrainConfig,
    mut on_episode: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpisodeStats),
{
    cfg.validate()?;
    if !(eps.is_finite() && eps > 0.0) {
        return config("covertness budget must be positive");
    }
    let grid = ActionGrid::spanning(p0, cfg.action_levels)?;
    let scale = FeatureScale {
        p0,
        mean_h: channel.grid_h().mean(),
        mean_g: channel.grid_g().mean(),
        blocks: channel.config().num_blocks,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut primary = QNetwork::new(&cfg.layer_dims(), scale, &mut rng)?;
    let mut target = primary.clone();
    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EVAL_STREAM);
    let eval_set: Vec<BlockSnrs> = (0..cfg.eval_channels)
        .map(|_| channel.sample(&mut eval_rng))
        .collect();

    let mut buffer = ReplayBuffer::new(cfg.n_buff);
    let mut curves = Vec::with_capacity(cfg.episodes);
    let mut target_syncs = 0;
    let mut xi = cfg.xi_max;
    for episode in 0..cfg.episodes {
        for _ in 0..cfg.n_tr {
            let snrs = channel.sample(&mut rng);
            let traj = rollout(&snrs, p0, eps, &grid, |s, count| {
                select_action(&primary, s, count, xi, &mut rng)
            });
            for e in traj.experiences {
                buffer.push(e);
            }
        }
        let loss = match buffer.sample(cfg.n_b, &mut rng) {
            Some(batch) => train_step(&mut primary, &target, &batch, eps, &grid, cfg.lr),
            None => f64::NAN,
        };
        if !loss.is_nan()
            && (!loss.is_finite() || primary.parameters().iter().any(|p| !p.is_finite()))
        {
            return Err(Error::Numerical(format!(
                "Q-network training diverged at episode {}",
                episode + 1
            )));
        }
        xi = cfg.xi_after(episode + 1);
        if (episode + 1) % cfg.n_ep == 0 {
            target = primary.clone();
            target_syncs += 1;
        }
        let eval_rate = if eval_set.is_empty() {
            f64::NAN
        } else {
            eval_set
                .iter()
                .map(|snrs| greedy_rollout(&primary, snrs, p0, eps, &grid).sum_rate)
                .sum::<f64>()
                / eval_set.len() as f64
        };
        let stats = EpisodeStats {
            episode: episode + 1,
            loss,
            eval_rate,
            xi,
        };
        on_episode(&stats);
        curves.push(stats);
    }
    Ok(TrainOutcome {
        network: primary,
        grid,
        curves,
        target_syncs,
    })
}

/// Allocates power block by block with the masked greedy action of `net`.
pub fn greedy_rollout(
    net: &QNetwork,
    snrs: &BlockSnrs,
    p0: f64,
    eps: f64,
    grid: &ActionGrid,
) -> Trajectory {
    rollout(snrs, p0, eps, grid, |s, count| {
        masked_argmax(&q_forward(net, s), count)
    })
}
