//! Mean-field actor-critic training of selfish repositioning drivers.
//!
//! Each driver class shares one actor `π(a | o)` and one critic
//! `Q(o, a, ā)` plus frozen target copies. Rollouts sample from the target
//! actor with ε-greedy exploration; after every episode the critic regresses
//! on `r + γ max_a′ Q⁻(o′, a′, ā′)` and the actor ascends
//! `(Q⁻(o, a, ā) − V(o)) ∇ log π(a | o)` over minibatches drawn uniformly
//! from a replay buffer.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    self, Action, DriverClass, EpisodeStats, ExperienceRecord, GridId, Observation, Scenario, SimState,
    NUM_ACTIONS,
};
use crate::error::{Error, Result};
use crate::nn::{mlp_init, GradientSet, Head, Mlp, Optimizer, OptimizerKind, Tape};
use crate::reward::{self, ObjectiveConfig, RewardDesign, DEFAULT_ELASTICITY};

/// Which mean action the baseline and the bootstrapped maximum plug in for
/// actions the driver did not take.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// The mean action the driver would have met in each alternative cell.
    #[default]
    Counterfactual,
    /// The observed mean action for every action.
    Observed,
}

/// How the actor's policy gradient is estimated from a record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActorGradient {
    /// `Σ_b π(b | o) (Q⁻(o, b, ā_b) − V(o)) ∇ log π(b | o)` over every action.
    #[default]
    AllActions,
    /// `(Q⁻(o, a, ā) − V(o)) ∇ log π(a | o)` for the recorded action only.
    Sampled,
    /// Logits move along the advantages themselves, the natural gradient of
    /// a softmax policy; does not stall when an action's probability is
    /// near zero.
    Natural,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub gamma: f64,
    /// Critic learning rate, decayed linearly to `eta_min`.
    pub eta0: f64,
    pub eta_min: f64,
    /// Actor learning rate, decayed linearly to `actor_eta_min`.
    pub actor_eta0: f64,
    pub actor_eta_min: f64,
    pub epsilon0: f64,
    pub epsilon_min: f64,
    /// Share of the episode budget over which ε and η decay linearly.
    pub decay_fraction: f64,
    /// Target sync period in episodes.
    pub tau: usize,
    /// Episodes of critic-only training before the actors start to move.
    pub actor_delay: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub episodes: usize,
    /// Critic steps per episode.
    pub updates_per_episode: usize,
    /// Actor steps per episode, taken alongside the first critic steps.
    pub actor_updates_per_episode: usize,
    pub critic_optimizer: OptimizerKind,
    pub actor_optimizer: OptimizerKind,
    pub critic_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub baseline: BaselineMode,
    pub actor_gradient: ActorGradient,
    /// Actors only put mass on moves that stay on the map.
    pub mask_illegal: bool,
    pub elasticity: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 1.0,
            eta0: 1e-2,
            eta_min: 1e-4,
            actor_eta0: 1e-3,
            actor_eta_min: 1e-4,
            epsilon0: 0.5,
            epsilon_min: 0.01,
            decay_fraction: 0.6,
            tau: 10,
            actor_delay: 0,
            batch_size: 1024,
            buffer_capacity: 100_000,
            episodes: 3000,
            updates_per_episode: 1,
            actor_updates_per_episode: 1,
            critic_optimizer: OptimizerKind::Adam,
            actor_optimizer: OptimizerKind::Sgd,
            critic_hidden: vec![64, 32, 16],
            actor_hidden: vec![32, 16, 8],
            baseline: BaselineMode::Counterfactual,
            actor_gradient: ActorGradient::AllActions,
            mask_illegal: true,
            elasticity: DEFAULT_ELASTICITY,
        }
    }
}

impl Hyperparams {
    /// Settings for the 2×2 cases: a short exploration phase, then actors
    /// that chase a nearly on-policy critic.
    pub fn two_by_two() -> Self {
        Hyperparams {
            eta_min: 1e-3,
            actor_eta0: 5e-3,
            actor_eta_min: 5e-3,
            decay_fraction: 0.15,
            tau: 1,
            actor_delay: 600,
            batch_size: 200,
            buffer_capacity: 2000,
            episodes: 3000,
            updates_per_episode: 5,
            ..Hyperparams::default()
        }
    }

    /// Settings for the two-driver example, whose deciding advantage is a
    /// few cents against a coin-flip match.
    pub fn two_driver() -> Self {
        Hyperparams {
            actor_eta0: 1e-4,
            actor_eta_min: 1e-4,
            actor_optimizer: OptimizerKind::Adam,
            actor_gradient: ActorGradient::Natural,
            episodes: 6000,
            ..Hyperparams::two_by_two()
        }
    }

    /// Desk-scale settings for the synthetic city.
    pub fn city() -> Self {
        Hyperparams {
            critic_hidden: vec![64, 32],
            actor_hidden: vec![32, 16],
            batch_size: 256,
            episodes: 1500,
            actor_eta0: 1e-4,
            actor_eta_min: 1e-4,
            actor_optimizer: OptimizerKind::Adam,
            ..Hyperparams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ((0.0..=1.0).contains(&self.gamma), "gamma must lie in [0, 1]"),
            (
                self.eta0 >= 0.0 && self.eta_min >= 0.0 && self.actor_eta0 >= 0.0 && self.actor_eta_min >= 0.0,
                "learning rates must be nonnegative",
            ),
            (
                self.epsilon_min >= 0.0 && self.epsilon_min <= self.epsilon0 && self.epsilon0 <= 1.0,
                "need 0 ≤ epsilon_min ≤ epsilon0 ≤ 1",
            ),
            ((0.0..=1.0).contains(&self.decay_fraction), "decay_fraction must lie in [0, 1]"),
            (self.tau >= 1, "tau must be at least 1"),
            (self.batch_size >= 1, "batch_size must be at least 1"),
            (self.buffer_capacity >= 1, "buffer_capacity must be at least 1"),
            (self.episodes >= 1, "episodes must be at least 1"),
            (!self.critic_hidden.contains(&0) && !self.actor_hidden.contains(&0), "hidden sizes must be positive"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::InvalidArgument(msg.into()));
            }
        }
        Ok(())
    }

    /// Linear decay from `start` to `end` over the decay window, then flat.
    fn decayed(&self, start: f64, end: f64, episode: usize) -> f64 {
        let span = (self.decay_fraction * self.episodes as f64).max(1.0);
        let frac = (episode as f64 / span).min(1.0);
        start + (end - start) * frac
    }

    pub fn epsilon_at(&self, episode: usize) -> f64 {
        self.decayed(self.epsilon0, self.epsilon_min, episode)
    }

    pub fn eta_at(&self, episode: usize) -> f64 {
        self.decayed(self.eta0, self.eta_min.min(self.eta0), episode)
    }

    pub fn actor_eta_at(&self, episode: usize) -> f64 {
        self.decayed(self.actor_eta0, self.actor_eta_min.min(self.actor_eta0), episode)
    }
}

/// One-hot input layouts shared by actors and critics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    pub width: usize,
    pub height: usize,
    pub horizon: usize,
}

impl Encoder {
    pub fn for_scenario(scenario: &Scenario) -> Self {
        Encoder { width: scenario.width(), height: scenario.height(), horizon: scenario.horizon() }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    /// Which actions keep a driver in `grid` on the map.
    pub fn legal(&self, grid: GridId) -> [bool; NUM_ACTIONS] {
        Action::ALL.map(|a| env::grid_neighbor(self.width, self.height, grid, a).is_some())
    }

    pub fn obs_dim(&self) -> usize {
        self.cells() + self.horizon + 1
    }

    pub fn critic_dim(&self) -> usize {
        self.obs_dim() + NUM_ACTIONS + 1
    }

    fn write_obs(&self, obs: Observation, buf: &mut Vec<f64>) {
        buf.clear();
        buf.resize(self.obs_dim(), 0.0);
        let cells = self.cells();
        buf[obs.grid.0.min(cells - 1)] = 1.0;
        buf[cells + obs.time.min(self.horizon)] = 1.0;
    }

    pub fn actor_input(&self, obs: Observation, buf: &mut Vec<f64>) {
        self.write_obs(obs, buf);
    }

    /// Observation and action one-hots followed by `ā / (1 + ā)`.
    pub fn critic_input(&self, obs: Observation, action: Action, mean_action: f64, buf: &mut Vec<f64>) {
        self.write_obs(obs, buf);
        buf.resize(self.critic_dim(), 0.0);
        buf[self.obs_dim() + action.index()] = 1.0;
        buf[self.obs_dim() + NUM_ACTIONS] = squash(mean_action);
    }
}

/// Bounded mean-action feature; demand/supply ratios are unbounded above.
pub fn squash(mean_action: f64) -> f64 {
    mean_action / (1.0 + mean_action)
}

/// Live and target networks of one driver class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassNets {
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
}

impl ClassNets {
    fn new(encoder: &Encoder, hyper: &Hyperparams, seed: u64) -> Result<Self> {
        let mut actor_sizes = vec![encoder.obs_dim()];
        actor_sizes.extend(&hyper.actor_hidden);
        actor_sizes.push(NUM_ACTIONS);
        let mut critic_sizes = vec![encoder.critic_dim()];
        critic_sizes.extend(&hyper.critic_hidden);
        critic_sizes.push(1);
        let actor = mlp_init(&actor_sizes, seed, Head::Softmax)?;
        let critic = mlp_init(&critic_sizes, seed.wrapping_add(1), Head::Identity)?;
        Ok(ClassNets { target_actor: actor.clone(), target_critic: critic.clone(), actor, critic })
    }

    pub fn sync_targets(&mut self) -> Result<()> {
        self.actor.copy_into_target(&mut self.target_actor)?;
        self.critic.copy_into_target(&mut self.target_critic)
    }
}

const POLICY_MAGIC: &str = "fleetdesign-policy";
const POLICY_VERSION: u32 = 1;

/// Per-class actors and critics.
#[derive(Clone, Debug, PartialEq)]
pub struct Policy {
    pub encoder: Encoder,
    /// Restrict the actors' distributions to moves that stay on the map.
    pub mask_illegal: bool,
    /// Indexed by [`DriverClass::index`].
    pub classes: [ClassNets; 2],
}

/// Softmax over the legal entries of `logits`; illegal actions get 0.
fn masked_softmax(logits: &[f64], legal: &[bool; NUM_ACTIONS]) -> Vec<f64> {
    let max = logits
        .iter()
        .zip(legal)
        .filter(|(_, &l)| l)
        .map(|(z, _)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().zip(legal).map(|(z, &l)| if l { (z - max).exp() } else { 0.0 }).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

impl Policy {
    pub fn new(scenario: &Scenario, hyper: &Hyperparams, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let encoder = Encoder::for_scenario(scenario);
        Ok(Policy {
            encoder,
            mask_illegal: hyper.mask_illegal,
            classes: [
                ClassNets::new(&encoder, hyper, seed.wrapping_mul(4))?,
                ClassNets::new(&encoder, hyper, seed.wrapping_mul(4).wrapping_add(2))?,
            ],
        })
    }

    pub fn nets(&self, class: DriverClass) -> &ClassNets {
        &self.classes[class.index()]
    }

    pub fn nets_mut(&mut self, class: DriverClass) -> &mut ClassNets {
        &mut self.classes[class.index()]
    }

    fn probs_of(&self, net: &Mlp, obs: Observation) -> Result<Vec<f64>> {
        let mut buf = Vec::new();
        self.encoder.actor_input(obs, &mut buf);
        Ok(self.tape_probs(obs, &net.tape(&buf)?))
    }

    /// Action distribution recorded on an actor tape, masked if enabled.
    fn tape_probs(&self, obs: Observation, tape: &Tape) -> Vec<f64> {
        if self.mask_illegal {
            masked_softmax(tape.logits(), &self.encoder.legal(obs.grid))
        } else {
            tape.output().to_vec()
        }
    }

    pub fn action_probs(&self, class: DriverClass, obs: Observation) -> Result<Vec<f64>> {
        self.probs_of(&self.nets(class).actor, obs)
    }

    pub fn target_action_probs(&self, class: DriverClass, obs: Observation) -> Result<Vec<f64>> {
        self.probs_of(&self.nets(class).target_actor, obs)
    }

    pub fn q(&self, class: DriverClass, obs: Observation, action: Action, mean_action: f64) -> Result<f64> {
        let mut buf = Vec::new();
        self.encoder.critic_input(obs, action, mean_action, &mut buf);
        Ok(self.nets(class).critic.forward(&buf)?[0])
    }

    pub fn q_target(&self, class: DriverClass, obs: Observation, action: Action, mean_action: f64) -> Result<f64> {
        let mut buf = Vec::new();
        self.encoder.critic_input(obs, action, mean_action, &mut buf);
        Ok(self.nets(class).target_critic.forward(&buf)?[0])
    }

    pub fn sync_targets(&mut self) -> Result<()> {
        for nets in &mut self.classes {
            nets.sync_targets()?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{POLICY_MAGIC} {POLICY_VERSION}\nwidth {}\nheight {}\nhorizon {}\nmask {}\n",
            self.encoder.width, self.encoder.height, self.encoder.horizon, u8::from(self.mask_illegal)
        );
        for class in DriverClass::ALL {
            let nets = self.nets(class);
            let name = match class {
                DriverClass::Yellow => "yellow",
                DriverClass::Green => "green",
            };
            for (role, net) in [
                ("actor", &nets.actor),
                ("critic", &nets.critic),
                ("target_actor", &nets.target_actor),
                ("target_critic", &nets.target_critic),
            ] {
                s.push_str(&format!("net {name}.{role}\n"));
                s.push_str(&net.to_text());
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Policy> {
        let mut header = text.lines();
        let mut value = |key: &str| -> Result<String> {
            let line = header.next().ok_or_else(|| Error::Parse(format!("missing {key:?}")))?;
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| Error::Parse(format!("expected {key:?}, got {line:?}")))
        };
        let version = value(POLICY_MAGIC)?;
        if version != POLICY_VERSION.to_string() {
            return Err(Error::Parse(format!("unsupported policy version {version}")));
        }
        let parse = |v: String| v.parse::<usize>().map_err(|e| Error::Parse(e.to_string()));
        let encoder = Encoder {
            width: parse(value("width")?)?,
            height: parse(value("height")?)?,
            horizon: parse(value("horizon")?)?,
        };
        let mask_illegal = match value("mask")?.as_str() {
            "1" => true,
            "0" => false,
            other => return Err(Error::Parse(format!("mask must be 0 or 1, got {other:?}"))),
        };

        let mut blocks: Vec<(String, String)> = Vec::new();
        for line in text.lines().skip(5) {
            if let Some(name) = line.strip_prefix("net ") {
                blocks.push((name.trim().to_string(), String::new()));
            } else if let Some((_, body)) = blocks.last_mut() {
                body.push_str(line);
                body.push('\n');
            }
        }
        let mut take = |name: &str| -> Result<Mlp> {
            let i = blocks
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks network {name}")))?;
            Mlp::from_text(&blocks.remove(i).1)
        };
        let mut class = |name: &str| -> Result<ClassNets> {
            Ok(ClassNets {
                actor: take(&format!("{name}.actor"))?,
                critic: take(&format!("{name}.critic"))?,
                target_actor: take(&format!("{name}.target_actor"))?,
                target_critic: take(&format!("{name}.target_critic"))?,
            })
        };
        let classes = [class("yellow")?, class("green")?];
        for nets in &classes {
            if nets.actor.input_size() != encoder.obs_dim() || nets.critic.input_size() != encoder.critic_dim() {
                return Err(Error::ArchitectureMismatch);
            }
        }
        Ok(Policy { encoder, mask_illegal, classes })
    }
}

/// Capacity-bounded ring of experience records.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<ExperienceRecord>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity: capacity.max(1), items: Vec::new(), next: 0 }
    }

    pub fn push(&mut self, record: ExperienceRecord) {
        if self.items.len() < self.capacity {
            self.items.push(record);
        } else {
            self.items[self.next] = record;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// `k` records drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<&ExperienceRecord> {
        if self.items.is_empty() {
            return Vec::new();
        }
        (0..k).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
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

fn greedy(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// ε-greedy actions from the target actors: with probability ε a uniformly
/// random legal move, otherwise a draw from `π⁻(· | o)`.
pub fn select_actions<R: Rng + ?Sized>(
    policy: &Policy,
    scenario: &Scenario,
    observations: &[(DriverClass, Observation)],
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<Action>> {
    let mut cache: HashMap<(DriverClass, Observation), Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(observations.len());
    for &(class, obs) in observations {
        if rng.random::<f64>() < epsilon {
            let legal = scenario.legal_actions(obs.grid);
            out.push(legal[rng.random_range(0..legal.len())]);
            continue;
        }
        let probs = match cache.get(&(class, obs)) {
            Some(p) => p,
            None => {
                let p = policy.target_action_probs(class, obs)?;
                cache.entry((class, obs)).or_insert(p)
            }
        };
        out.push(Action::ALL[sample_categorical(probs, rng)]);
    }
    Ok(out)
}

/// Memoized target-critic evaluations within one update.
struct TargetCritic<'a> {
    net: &'a Mlp,
    encoder: Encoder,
    buf: Vec<f64>,
    memo: HashMap<(Observation, usize, u64), f64>,
}

impl<'a> TargetCritic<'a> {
    fn new(policy: &'a Policy, class: DriverClass) -> Self {
        TargetCritic { net: &policy.nets(class).target_critic, encoder: policy.encoder, buf: Vec::new(), memo: HashMap::new() }
    }

    fn q(&mut self, obs: Observation, action: Action, mean_action: f64) -> Result<f64> {
        let key = (obs, action.index(), mean_action.to_bits());
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        self.encoder.critic_input(obs, action, mean_action, &mut self.buf);
        let v = self.net.forward(&self.buf)?[0];
        self.memo.insert(key, v);
        Ok(v)
    }

    fn max_next(&mut self, record: &ExperienceRecord, mode: BaselineMode) -> Result<f64> {
        let mut best = f64::NEG_INFINITY;
        for a in Action::ALL {
            let m = match mode {
                BaselineMode::Counterfactual => record.next_mean_actions[a.index()],
                BaselineMode::Observed => record.next_mean_actions[a.index()].min(f64::INFINITY),
            };
            best = best.max(self.q(record.next_obs, a, m)?);
        }
        Ok(best)
    }
}

fn target_value(target: &mut TargetCritic, record: &ExperienceRecord, gamma: f64, mode: BaselineMode) -> Result<f64> {
    if record.terminal || gamma == 0.0 {
        return Ok(record.reward);
    }
    Ok(record.reward + gamma * target.max_next(record, mode)?)
}

/// `r + γ max_a′ Q⁻(o′, a′, ā′)`, or `r` for terminal records.
pub fn critic_target(record: &ExperienceRecord, policy: &Policy, gamma: f64) -> Result<f64> {
    let mut target = TargetCritic::new(policy, record.class);
    target_value(&mut target, record, gamma, BaselineMode::Counterfactual)
}

/// Mean actions plugged in per action for the baseline.
fn baseline_means(record: &ExperienceRecord, mode: BaselineMode) -> [f64; NUM_ACTIONS] {
    match mode {
        BaselineMode::Counterfactual => record.mean_actions,
        BaselineMode::Observed => [record.mean_action; NUM_ACTIONS],
    }
}

/// `V(o) = Σ_a π(a | o) Q⁻(o, a, ā_a)` under the live actor.
pub fn baseline_value(
    policy: &Policy,
    class: DriverClass,
    obs: Observation,
    mean_actions: &[f64; NUM_ACTIONS],
) -> Result<f64> {
    let probs = policy.action_probs(class, obs)?;
    let mut target = TargetCritic::new(policy, class);
    expected_q(&mut target, obs, &probs, mean_actions)
}

fn expected_q(target: &mut TargetCritic, obs: Observation, probs: &[f64], means: &[f64; NUM_ACTIONS]) -> Result<f64> {
    let mut v = 0.0;
    for a in Action::ALL {
        v += probs[a.index()] * target.q(obs, a, means[a.index()])?;
    }
    Ok(v)
}

/// One optimizer step of one class's critic on the squared TD error.
/// Returns the loss before the step.
pub fn critic_update(
    policy: &mut Policy,
    class: DriverClass,
    batch: &[&ExperienceRecord],
    gamma: f64,
    eta: f64,
    mode: BaselineMode,
    optimizer: &mut Optimizer,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let targets = {
        let mut target = TargetCritic::new(policy, class);
        batch
            .iter()
            .map(|r| target_value(&mut target, r, gamma, mode))
            .collect::<Result<Vec<_>>>()?
    };
    let encoder = policy.encoder;
    let critic = &mut policy.nets_mut(class).critic;
    let mut grads = GradientSet::zeros_like(critic);
    let mut tape = Tape::default();
    let mut buf = Vec::new();
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for (r, y) in batch.iter().zip(&targets) {
        encoder.critic_input(r.obs, r.action, r.mean_action, &mut buf);
        critic.forward_tape(&buf, &mut tape)?;
        let err = tape.output()[0] - y;
        loss += err * err / n;
        critic.accumulate(&tape, &[2.0 * err], 1.0 / n, &mut grads)?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    optimizer.step(critic, &grads, eta)?;
    Ok(loss)
}

/// One ascent step of one class's actor along the advantage-weighted
/// log-probability gradient. Returns the mean advantage of the recorded
/// actions.
pub fn actor_update(
    policy: &mut Policy,
    class: DriverClass,
    batch: &[&ExperienceRecord],
    eta: f64,
    mode: BaselineMode,
    estimator: ActorGradient,
    optimizer: &mut Optimizer,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let encoder = policy.encoder;
    let n = batch.len() as f64;
    let mut tapes = Vec::with_capacity(batch.len());
    let mut upstreams = Vec::with_capacity(batch.len());
    let mut recorded = 0.0;
    {
        let actor = &policy.nets(class).actor;
        let mut target = TargetCritic::new(policy, class);
        let mut buf = Vec::new();
        for r in batch {
            encoder.actor_input(r.obs, &mut buf);
            let tape = actor.tape(&buf)?;
            let p = policy.tape_probs(r.obs, &tape);
            let means = baseline_means(r, mode);
            let mut q = [0.0; NUM_ACTIONS];
            for b in Action::ALL {
                q[b.index()] = target.q(r.obs, b, means[b.index()])?;
            }
            let v: f64 = q.iter().zip(&p).map(|(q, p)| q * p).sum();
            let q_taken = target.q(r.obs, r.action, r.mean_action)?;
            recorded += q_taken - v;
            // gradient of −objective with respect to the logits;
            // d log π_b / d logits = e_b − p
            let mut up = [0.0; NUM_ACTIONS];
            match estimator {
                ActorGradient::AllActions => {
                    for (i, u) in up.iter_mut().enumerate() {
                        *u = -p[i] * (q[i] - v);
                    }
                }
                ActorGradient::Natural => {
                    let legal = policy.encoder.legal(r.obs.grid);
                    for (i, u) in up.iter_mut().enumerate() {
                        if !policy.mask_illegal || legal[i] {
                            *u = -(q[i] - v);
                        }
                    }
                }
                ActorGradient::Sampled => {
                    let adv = q_taken - v;
                    for (i, u) in up.iter_mut().enumerate() {
                        let e = if i == r.action.index() { 1.0 } else { 0.0 };
                        *u = -adv * (e - p[i]);
                    }
                }
            }
            upstreams.push(up);
            tapes.push(tape);
        }
    }
    let actor = &mut policy.nets_mut(class).actor;
    let mut grads = GradientSet::zeros_like(actor);
    for (tape, up) in tapes.iter().zip(&upstreams) {
        if up.iter().all(|&u| u == 0.0) {
            continue;
        }
        actor.accumulate_logits(tape, up, 1.0 / n, &mut grads)?;
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("actor gradient".into()));
    }
    optimizer.step(actor, &grads, eta)?;
    Ok(recorded / n)
}

/// Per-episode system metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub orr: f64,
    pub osc: f64,
    pub ptc: f64,
    pub ics: f64,
    pub mean_reward: f64,
    pub green_restricted_pickups: usize,
}

/// Metrics of a finished episode. ORR is 1 when no order appeared. ICS is
/// 0 without turnstile data; otherwise over the top `min(m, grids)` grids
/// when `clamp_m` is set.
pub fn episode_metrics(
    stats: &EpisodeStats,
    scenario: &Scenario,
    objective: &ObjectiveConfig,
    clamp_m: bool,
) -> Result<EpisodeMetrics> {
    let orr = if stats.total_orders == 0 { 1.0 } else { reward::compute_orr(stats.fulfilled, stats.total_orders)? };
    let ptc = if stats.cbd_counts.is_empty() {
        0.0
    } else {
        reward::compute_ptc(&stats.cbd_counts, scenario.fleet_size())?
    };
    let ics = match scenario.turnstile() {
        Some(counts) if !counts.grids.is_empty() => {
            let m = if clamp_m { objective.m.min(counts.grids.len()) } else { objective.m };
            reward::compute_ics(&stats.unserviced, counts, m, objective.exit_denominator)?
        }
        _ => 0.0,
    };
    let drivers = stats.cumulative_reward.len().max(1) as f64;
    Ok(EpisodeMetrics {
        orr,
        osc: reward::compute_osc(&stats.serviced),
        ptc,
        ics,
        mean_reward: stats.cumulative_reward.iter().sum::<f64>() / drivers,
        green_restricted_pickups: stats.green_restricted_pickups,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub episode: usize,
    pub orr: f64,
    pub one_minus_osc: f64,
    pub ptc: f64,
    pub ics: f64,
    pub mean_reward: f64,
    pub critic_loss: f64,
    pub epsilon: f64,
}

/// Per-episode training curves.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean of a column over the last `n` episodes.
    pub fn tail_mean(&self, n: usize, column: impl Fn(&TraceRow) -> f64) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(n)..];
        tail.iter().map(column).sum::<f64>() / tail.len().max(1) as f64
    }
}

/// How actions are chosen when only actors run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Most probable action.
    Greedy,
    /// Draw from the actor's distribution.
    #[default]
    Stochastic,
}

/// Fresh episode with the toll's demand thinning already applied.
fn start_episode<R: Rng + ?Sized>(
    scenario: &Scenario,
    design: &RewardDesign,
    elasticity: f64,
    rng: &mut R,
) -> SimState {
    let mut state = env::reset(scenario, rng.random());
    let toll = design.toll();
    if toll > 0.0 {
        let orders = state.take_orders();
        let (kept, removed) = reward::thin_demand(orders, toll, scenario.cbd(), elasticity, rng);
        state.set_orders(kept, removed);
    }
    state
}

/// Roll out one episode, choosing actions with `choose`. Records get their
/// `next_mean_actions` from the same driver's following decision.
fn run_episode<R, F>(
    scenario: &Scenario,
    design: &RewardDesign,
    elasticity: f64,
    rng: &mut R,
    mut choose: F,
) -> Result<(SimState, Vec<ExperienceRecord>)>
where
    R: Rng + ?Sized,
    F: FnMut(&[(DriverClass, Observation)], &mut R) -> Result<Vec<Action>>,
{
    let mut state = start_episode(scenario, design, elasticity, rng);
    let mut records: Vec<ExperienceRecord> = Vec::new();
    let mut pending: Vec<Option<usize>> = vec![None; state.drivers.len()];
    while !state.is_done(scenario) {
        let idle = state.idle_observations();
        let obs: Vec<_> = idle.iter().map(|&(_, c, o)| (c, o)).collect();
        let chosen = choose(&obs, rng)?;
        let mut actions = vec![None; state.drivers.len()];
        for (&(i, _, _), a) in idle.iter().zip(chosen) {
            actions[i] = Some(a);
        }
        let out = state.step(scenario, &actions, design, rng)?;
        for rec in out.records {
            if let Some(j) = pending[rec.driver].take() {
                records[j].next_mean_actions = rec.mean_actions;
            }
            if !rec.terminal {
                pending[rec.driver] = Some(records.len());
            }
            records.push(rec);
        }
    }
    Ok((state, records))
}

/// Train per-class actors and critics on `scenario` under `design`.
pub fn train(
    scenario: &Scenario,
    design: &RewardDesign,
    hyper: &Hyperparams,
    seed: u64,
) -> Result<(Policy, ConvergenceTrace)> {
    train_with_progress(scenario, design, hyper, seed, |_| {})
}

/// [`train`] with a callback after every episode.
pub fn train_with_progress<P: FnMut(&TraceRow)>(
    scenario: &Scenario,
    design: &RewardDesign,
    hyper: &Hyperparams,
    seed: u64,
    mut progress: P,
) -> Result<(Policy, ConvergenceTrace)> {
    hyper.validate()?;
    design.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut policy = Policy::new(scenario, hyper, rng.random())?;
    let mut optimizers: Vec<(Optimizer, Optimizer)> = policy
        .classes
        .iter()
        .map(|n| (Optimizer::new(hyper.critic_optimizer, &n.critic), Optimizer::new(hyper.actor_optimizer, &n.actor)))
        .collect();
    let mut buffer = ReplayBuffer::new(hyper.buffer_capacity);
    let objective = ObjectiveConfig::for_kind(design.objective_kind());
    let mut trace = ConvergenceTrace::default();

    for episode in 0..hyper.episodes {
        let wrap = |e: Error| Error::Training { episode, source: Box::new(e) };
        let epsilon = hyper.epsilon_at(episode);
        let eta = hyper.eta_at(episode);
        let actor_eta = hyper.actor_eta_at(episode);
        let (state, records) = run_episode(scenario, design, hyper.elasticity, &mut rng, |obs, rng| {
            select_actions(&policy, scenario, obs, epsilon, rng)
        })
        .map_err(wrap)?;
        for r in records {
            buffer.push(r);
        }

        let mut loss = 0.0;
        for update in 0..hyper.updates_per_episode {
            let batch = buffer.sample(hyper.batch_size, &mut rng);
            for class in DriverClass::ALL {
                let sub: Vec<&ExperienceRecord> = batch.iter().copied().filter(|r| r.class == class).collect();
                if sub.is_empty() {
                    continue;
                }
                let (critic_opt, actor_opt) = &mut optimizers[class.index()];
                loss += critic_update(&mut policy, class, &sub, hyper.gamma, eta, hyper.baseline, critic_opt)
                    .map_err(wrap)?
                    * sub.len() as f64
                    / batch.len() as f64;
                if episode < hyper.actor_delay || update >= hyper.actor_updates_per_episode {
                    continue;
                }
                actor_update(&mut policy, class, &sub, actor_eta, hyper.baseline, hyper.actor_gradient, actor_opt).map_err(wrap)?;
            }
        }
        if (episode + 1) % hyper.tau == 0 {
            policy.sync_targets().map_err(wrap)?;
        }

        let m = episode_metrics(&state.stats, scenario, &objective, true).map_err(wrap)?;
        let row = TraceRow {
            episode,
            orr: m.orr,
            one_minus_osc: 1.0 - m.osc,
            ptc: m.ptc,
            ics: m.ics,
            mean_reward: m.mean_reward,
            critic_loss: loss / hyper.updates_per_episode.max(1) as f64,
            epsilon,
        };
        progress(&row);
        trace.rows.push(row);
    }
    Ok((policy, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub mode: EvalMode,
    pub objective: ObjectiveConfig,
    pub elasticity: f64,
}

impl EvalConfig {
    pub fn new(episodes: usize, seed: u64, mode: EvalMode, objective: ObjectiveConfig) -> Self {
        EvalConfig { episodes, seed, mode, elasticity: objective.elasticity, objective }
    }
}

/// Run the live actors alone (ε = 0, critics unused) and return the raw
/// bookkeeping of each episode.
pub fn evaluate_stats(
    policy: &Policy,
    scenario: &Scenario,
    design: &RewardDesign,
    config: &EvalConfig,
) -> Result<Vec<EpisodeStats>> {
    if config.episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    config.objective.validate()?;
    if policy.encoder != Encoder::for_scenario(scenario) {
        return Err(Error::ArchitectureMismatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut cache: HashMap<(DriverClass, Observation), Vec<f64>> = HashMap::new();
    let mut out = Vec::with_capacity(config.episodes);
    for _ in 0..config.episodes {
        let (state, _) = run_episode(scenario, design, config.elasticity, &mut rng, |obs, rng| {
            obs.iter()
                .map(|&(class, o)| {
                    let probs = match cache.get(&(class, o)) {
                        Some(p) => p.clone(),
                        None => {
                            let p = policy.action_probs(class, o)?;
                            cache.insert((class, o), p.clone());
                            p
                        }
                    };
                    Ok(Action::ALL[match config.mode {
                        EvalMode::Greedy => greedy(&probs),
                        EvalMode::Stochastic => sample_categorical(&probs, rng),
                    }])
                })
                .collect()
        })?;
        out.push(state.stats);
    }
    Ok(out)
}

/// Per-episode metrics of the live actors.
pub fn evaluate_episodes(
    policy: &Policy,
    scenario: &Scenario,
    design: &RewardDesign,
    config: &EvalConfig,
) -> Result<Vec<EpisodeMetrics>> {
    evaluate_stats(policy, scenario, design, config)?
        .iter()
        .map(|stats| episode_metrics(stats, scenario, &config.objective, false))
        .collect()
}

/// Per-grid detail behind PTC and ICS, averaged over episodes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridBreakdown {
    /// Time-averaged fraction of the fleet in each cell; the CBD entries sum to PTC.
    pub occupancy: Vec<f64>,
    /// Crowdedness of the top `min(m, grids)` turnstile grids.
    pub ics: Vec<reward::GridCrowdedness>,
}

pub fn grid_breakdown(stats: &[EpisodeStats], scenario: &Scenario, objective: &ObjectiveConfig) -> Result<GridBreakdown> {
    if stats.is_empty() {
        return Err(Error::InvalidArgument("breakdown needs at least one episode".into()));
    }
    let n = stats.len() as f64;
    let fleet = scenario.fleet_size().max(1) as f64;
    let mut occupancy = vec![0.0; scenario.num_cells()];
    for s in stats {
        let ticks = s.cbd_counts.len().max(1) as f64;
        for (acc, &c) in occupancy.iter_mut().zip(&s.occupancy) {
            *acc += c as f64 / (ticks * fleet) / n;
        }
    }
    let mut ics: Vec<reward::GridCrowdedness> = Vec::new();
    if let Some(counts) = scenario.turnstile().filter(|c| !c.grids.is_empty()) {
        let m = objective.m.min(counts.grids.len());
        for s in stats {
            let per = reward::ics_by_grid(&s.unserviced, counts, m, objective.exit_denominator)?;
            if ics.is_empty() {
                ics = per.iter().map(|g| reward::GridCrowdedness { entry: 0.0, exit: 0.0, ics: 0.0, ..*g }).collect();
            }
            for (acc, g) in ics.iter_mut().zip(&per) {
                acc.entry += g.entry / n;
                acc.exit += g.exit / n;
                acc.ics += g.ics / n;
            }
        }
    }
    Ok(GridBreakdown { occupancy, ics })
}

/// Average metrics over evaluation episodes, with the objective composed
/// for the design's kind.
pub fn evaluate(
    policy: &Policy,
    scenario: &Scenario,
    design: &RewardDesign,
    config: &EvalConfig,
) -> Result<reward::MetricsReport> {
    let eps = evaluate_episodes(policy, scenario, design, config)?;
    Ok(summarize(&eps, design, &config.objective))
}

/// Train from `seed` and evaluate the resulting policy: one lower-level
/// solve of the bilevel problem.
pub fn train_and_evaluate(
    scenario: &Scenario,
    design: &RewardDesign,
    hyper: &Hyperparams,
    seed: u64,
    eval: &EvalConfig,
) -> Result<(Policy, ConvergenceTrace, reward::MetricsReport)> {
    let (policy, trace) = train(scenario, design, hyper, seed)?;
    let report = evaluate(&policy, scenario, design, eval)?;
    Ok((policy, trace, report))
}

pub fn summarize(eps: &[EpisodeMetrics], design: &RewardDesign, objective: &ObjectiveConfig) -> reward::MetricsReport {
    let n = eps.len().max(1) as f64;
    let mean = |f: &dyn Fn(&EpisodeMetrics) -> f64| eps.iter().map(f).sum::<f64>() / n;
    reward::MetricsReport {
        alpha: design.alpha(),
        orr: mean(&|m| m.orr),
        osc: mean(&|m| m.osc),
        ptc: mean(&|m| m.ptc),
        ics: mean(&|m| m.ics),
        mean_reward: mean(&|m| m.mean_reward),
        objective: 0.0,
    }
    .with_objective(objective, design.objective_kind())
}
