use proptest::prelude::*;
use rand::Rng as _;

use relaynet::channel::{self, ChannelParams, LinkState};
use relaynet::config::ExperimentConfig;
use relaynet::dispatch::{self, ChainEntry, DeployRequest, DispatchThresholds};
use relaynet::env::{AgentId, NodeId};
use relaynet::grid::{Action, Move};
use relaynet::harness::{self, Constraint};
use relaynet::learner::{ReplayBuffer, Terminal, Transition};
use relaynet::neural::Tensor;
use relaynet::rng;
use relaynet::routing::{self, RoutingWeights};
use relaynet::sim::{self, Simulator, Trace, TraceHeader};
use relaynet::topology::CommGraph;

fn node(i: usize) -> NodeId {
    if i == 0 {
        NodeId::Bs
    } else {
        NodeId::Agent(AgentId(i as u32 - 1))
    }
}

/// A connected graph on `n` nodes: a random spanning tree plus extra edges.
fn graph_strategy() -> impl Strategy<Value = (usize, Vec<(usize, usize, f64, f64)>, Vec<f64>)> {
    (2usize..9).prop_flat_map(|n| {
        let tree = (1..n).map(|i| (0..i, 1.0f64..4.2, 0.0f64..0.9)).collect::<Vec<_>>();
        let extra = prop::collection::vec((0..n, 0..n, 1.0f64..4.2, 0.0f64..1.1), 0..n * 2);
        let payload = prop::collection::vec(1.0f64..20.0, n);
        (Just(n), tree, extra, payload).prop_map(|(n, tree, extra, payload)| {
            let mut edges: Vec<_> = tree.into_iter().enumerate().map(|(k, (p, d, l))| (k + 1, p, d, l)).collect();
            for (a, b, d, l) in extra {
                if a != b && !edges.iter().any(|&(x, y, _, _)| (x, y) == (a, b) || (x, y) == (b, a)) {
                    edges.push((a, b, d, l));
                }
            }
            (n, edges, payload)
        })
    })
}

fn build(n: usize, edges: &[(usize, usize, f64, f64)]) -> CommGraph {
    let p = ChannelParams::default();
    let links: Vec<_> = edges
        .iter()
        .map(|&(a, b, d, l)| {
            let cap = p.capacity_at(d).unwrap();
            (node(a), node(b), LinkState::new(d, cap, cap * l))
        })
        .collect();
    let agents: Vec<AgentId> = (0..n as u32 - 1).map(AgentId).collect();
    CommGraph::from_links(&agents, &links)
}

fn transition(tag: f64) -> Transition {
    Transition {
        obs: Tensor::zeros(1, 1),
        adj: vec![vec![]],
        actions: vec![Action::STAY],
        reward: tag,
        shaped: vec![tag],
        next_obs: Tensor::zeros(1, 1),
        next_adj: vec![vec![]],
        terminal: Terminal::No,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn capacity_falls_and_delay_rises_with_distance(d in 0.5f64..20.0, k in 1.01f64..3.0, frac in 0.0f64..0.9) {
        let p = ChannelParams::default();
        let near = p.capacity_at(d).unwrap();
        let far = p.capacity_at(d * k).unwrap();
        prop_assert!(far < near);
        let light = channel::hop_delay(&p, &LinkState::new(d, near, 0.0), 10.0).unwrap();
        let heavy = channel::hop_delay(&p, &LinkState::new(d, near, near * frac), 10.0).unwrap();
        prop_assert!(heavy >= light);
    }

    #[test]
    fn routing_reaches_every_connected_node_without_loops((n, edges, payload) in graph_strategy()) {
        let g = build(n, &edges);
        let w = RoutingWeights::from(&ExperimentConfig::default().routing);
        let result = routing::relax_until_stable(&g, &w, &payload, &ChannelParams::default());
        // only saturated links may leave a connected node with no usable neighbour
        if edges.iter().all(|e| e.3 < 1.0) {
            prop_assert!(result.is_ok(), "{:?}", result.err());
        }
        let Ok(table) = result else { return Ok(()) };
        prop_assert!(table.is_loop_free());
        for i in 1..n {
            let m = table.metrics(node(i)).unwrap();
            if m.is_reached() {
                let route = table.route(node(i)).unwrap();
                prop_assert_eq!(*route.last().unwrap(), NodeId::Bs);
                prop_assert!(route.len() <= n);
                for hop in route.windows(2) {
                    prop_assert!(g.has_edge(hop[0], hop[1]));
                }
                prop_assert!(m.delay > 0.0 && m.bottleneck > 0.0);
            }
        }
    }

    #[test]
    fn softmax_is_a_distribution_ordered_like_scores(scores in prop::collection::vec(-5.0f64..5.0, 1..12), temp in 0.05f64..4.0) {
        let p = dispatch::softmax_probs(&scores, temp);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..scores.len() {
            prop_assert!(p[i] > 0.0 || scores[i] < scores.iter().copied().fold(f64::MIN, f64::max));
            for j in 0..scores.len() {
                if scores[i] > scores[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn candidate_scores_stay_within_weight_sum(load in 0.0f64..1e4, prod in 0.0f64..2.0, depth in 0u32..40) {
        let cfg = ExperimentConfig::default();
        let th = DispatchThresholds::new(&cfg.dispatch, 8, 100.0, 2);
        let req = DeployRequest {
            requester: AgentId(0),
            chain_stats: vec![ChainEntry { agent: AgentId(0), load, productivity: prod, depth }],
        };
        let s = dispatch::score_candidates(&req, &th)[0].1;
        let total: f64 = th.score_weights.iter().sum();
        prop_assert!((0.0..=total + 1e-12).contains(&s));
    }

    #[test]
    fn gate_rejects_exactly_outside_the_thresholds(eta in 0.0f64..1.0, delta in 0.0f64..1.0) {
        let cfg = ExperimentConfig::default();
        let th = DispatchThresholds::new(&cfg.dispatch, 8, 100.0, 2);
        let ok = eta >= th.eta_min && delta <= th.delta_max;
        prop_assert_eq!(dispatch::gate(eta, delta, &th).is_ok(), ok);
    }

    #[test]
    fn overrides_survive_a_toml_round_trip(users in 1u32..6, w in 4u32..14, h in 4u32..14, hidden in 2usize..64, seed_list in prop::collection::vec(0u64..100, 1..4)) {
        let mut c = ExperimentConfig::default();
        c.apply_override(&format!("env.grid={w}x{h}")).unwrap();
        c.apply_override(&format!("env.users={users}")).unwrap();
        c.apply_override(&format!("learner.hidden={hidden}")).unwrap();
        c.apply_override(&format!("experiment.seeds={seed_list:?}")).unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn replay_buffer_keeps_the_newest_in_order(cap in 1usize..20, pushes in 0usize..60) {
        let mut b = ReplayBuffer::new(cap);
        for i in 0..pushes {
            b.push(transition(i as f64));
        }
        prop_assert_eq!(b.len(), pushes.min(cap));
        let kept: Vec<f64> = b.iter().map(|t| t.reward).collect();
        let expect: Vec<f64> = (pushes.saturating_sub(cap)..pushes).map(|i| i as f64).collect();
        prop_assert_eq!(kept, expect);
    }

    #[test]
    fn mean_std_matches_two_pass_formula(xs in prop::collection::vec(-1e3f64..1e3, 2..40)) {
        let (m, s) = harness::mean_std(&xs).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!((m - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        prop_assert!((s - var.sqrt()).abs() <= 1e-9 * (1.0 + var.sqrt()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_play_keeps_every_user_flow_connected_and_replays(seed in 0u64..10_000, users in 1u32..4) {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("env.grid=7x7").unwrap();
        cfg.env.users = users;
        let mut s = Simulator::from_config(&cfg, seed).unwrap();
        s.record_trace(TraceHeader { config_toml: cfg.canonical_toml(), config_hash: cfg.hash(), seed, strategy: "random".into() });
        let mut r = rng::stream(seed, "prop-actions");
        let mut steps = 0;
        while !s.status.is_done() {
            let actions: Vec<Action> = (0..s.world.agents.len())
                .map(|_| Action::new(Move::ALL[r.gen_range(0..Move::COUNT)], r.gen_bool(0.3)))
                .collect();
            s.step(&actions).unwrap();
            steps += 1;
            prop_assert!(harness::check_constraints(&s.world).get(Constraint::C6).witnesses.is_empty());
        }
        let text = s.trace.as_ref().unwrap().to_csv();
        let parsed = Trace::parse(&text).unwrap();
        prop_assert_eq!(sim::replay(&parsed).unwrap(), steps);
    }
}
