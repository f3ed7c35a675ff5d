//! Small HEAT agents on synthetic buffers.

use heatlab_core::heat_agent::{HeatAgent, HeatConfig};
use heatlab_core::mdp_env::{Action4, Agent, NodeState5, Origin, ReplayBuffer, Transition};
use heatlab_core::neural::{EncoderConfig, Graph};
use heatlab_core::node_mac::ParameterSets;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::numeric::rel_err;

pub const RADIUS: f64 = 100_000.0;

pub fn small_config() -> HeatConfig {
    HeatConfig {
        encoder: EncoderConfig { layers: 1, model_dim: 8, heads: 2, ff_dim: 12 },
        state_widths: vec![8, 12],
        global_widths: vec![8, 6],
        trunk_width: 12,
        policy_samples: 4,
        train_every: 1,
        ..HeatConfig::default()
    }
}

pub fn random_action(sets: &ParameterSets, rng: &mut ChaCha8Rng) -> Action4 {
    let [a, b, c, d] = sets.branch_sizes();
    Action4 { usf: rng.random_range(0..a), ptx: rng.random_range(0..b), dsf: rng.random_range(0..c), w: rng.random_range(0..d) }
}

pub fn random_state(sets: &ParameterSets, rng: &mut ChaCha8Rng) -> NodeState5 {
    NodeState5 { distance_m: rng.random_range(1.0..RADIUS), params: random_action(sets, rng) }
}

pub fn random_buffer(sets: &ParameterSets, n: usize, steps: usize, origin: Origin, seed: u64) -> ReplayBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffer = ReplayBuffer::new(n, 10_000, origin);
    let mut states: Vec<NodeState5> = (0..n).map(|_| random_state(sets, &mut rng)).collect();
    for step in 0..steps {
        let node = step % n;
        let a = random_action(sets, &mut rng);
        let s_next = NodeState5 { distance_m: states[node].distance_m, params: a };
        buffer.push(Transition {
            node,
            time: step as f64,
            step: (step / n) as u64,
            s: states[node],
            a,
            r: rng.random_range(0.0..2.0),
            s_next,
            origin,
        });
        states[node] = s_next;
    }
    buffer
}

pub fn agent_with_buffers(config: HeatConfig, n: usize, seed: u64) -> HeatAgent {
    let sets = ParameterSets::default();
    let mut agent = HeatAgent::new(config.clone(), &sets, n, RADIUS, seed).unwrap();
    if config.offline_enabled {
        agent.attach_offline(random_buffer(&sets, n, 6 * n, Origin::Offline, seed + 1)).unwrap();
    }
    let online = random_buffer(&sets, n, 4 * n, Origin::Online, seed + 2);
    let global: Vec<NodeState5> = online.iter().map(|t| t.s_next).collect();
    for t in online.iter() {
        agent.observe(t, &global[..n]);
    }
    agent
}

/// Central-difference check of a scalar loss on randomly picked scalars.
pub fn fd_check<F: Fn(&HeatAgent) -> f64, G: Fn(&HeatAgent) -> heatlab_core::neural::Gradients>(
    agent: &mut HeatAgent,
    ids: &[usize],
    loss: F,
    grads: G,
    seed: u64,
) -> f64 {
    let analytic = grads(agent);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 10 {
        let id = ids[rng.random_range(0..ids.len())];
        let Some(grad) = analytic.get(id) else { continue };
        let k = rng.random_range(0..grad.data().len());
        let orig = agent.store().get(id).data()[k];
        let h = 1e-5;
        agent.store_mut().get_mut(id).data_mut()[k] = orig + h;
        let up = loss(agent);
        agent.store_mut().get_mut(id).data_mut()[k] = orig - h;
        let down = loss(agent);
        agent.store_mut().get_mut(id).data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = grad.data()[k];
        if a.abs().max(numeric.abs()) < 1e-7 {
            continue;
        }
        worst = worst.max(rel_err(a, numeric));
        checked += 1;
    }
    worst
}

/// Worst relative error of the complete online and offline losses, for both
/// signs of the offline lesson.
pub fn full_model_error() -> f64 {
    let mut worst: f64 = 0.0;
    for literal in [false, true] {
        let config = HeatConfig { alg2_literal_sign: literal, beta_off: 2.0, ..small_config() };
        let mut agent = agent_with_buffers(config, 3, 13);
        for _ in 0..5 {
            agent.offline_update().unwrap();
        }
        let batch = agent.offline_buffer().unwrap().batch_at(1e9).unwrap();
        let online = agent.prepare_online(&batch).unwrap();
        let offline = agent.prepare_offline(&batch).unwrap();

        let online_loss = |a: &HeatAgent| {
            let mut g = Graph::new(a.store());
            let (c, p) = a.online_loss(&mut g, &online).unwrap();
            let t = g.add(c, p);
            g.value(t).item()
        };
        let online_grads = |a: &HeatAgent| {
            let mut g = Graph::new(a.store());
            let (c, p) = a.online_loss(&mut g, &online).unwrap();
            let t = g.add(c, p);
            g.backward(t)
        };
        let ids = agent.nets().online_params();
        worst = worst.max(fd_check(&mut agent, &ids, online_loss, online_grads, 100 + literal as u64));

        let offline_loss = |a: &HeatAgent| {
            let mut g = Graph::new(a.store());
            let (c, v) = a.offline_loss(&mut g, &offline).unwrap();
            let t = g.add(c, v);
            g.value(t).item()
        };
        let offline_grads = |a: &HeatAgent| {
            let mut g = Graph::new(a.store());
            let (c, v) = a.offline_loss(&mut g, &offline).unwrap();
            let t = g.add(c, v);
            g.backward(t)
        };
        let ids = agent.nets().offline_params();
        worst = worst.max(fd_check(&mut agent, &ids, offline_loss, offline_grads, 200 + literal as u64));
    }
    worst
}
