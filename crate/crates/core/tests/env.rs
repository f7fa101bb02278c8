use proptest::prelude::*;
use rand::{Rng as _, SeedableRng};
use stackmac::env::*;
use stackmac::game::{Bitmap, UtilityWeights};
use stackmac::rng::{self, Rng, Stream};

fn base(m: usize) -> EnvConfig {
    EnvConfig {
        num_rbgs: m,
        episode_len: 24,
        ..EnvConfig::default()
    }
}

fn random_actions(rng: &mut Rng, i: usize, m: usize, k: usize, v: usize) -> (Vec<usize>, Vec<UeAction>) {
    let dcm = (0..m).map(|_| rng.gen_range(0..=i)).collect();
    let actions = (0..i)
        .map(|_| UeAction {
            bitmap: Bitmap((0..m).map(|_| rng.gen_bool(0.5)).collect()),
            ucm: (0..k).map(|_| rng.gen_range(0..v)).collect(),
        })
        .collect();
    (dcm, actions)
}

fn run_episode(cfg: &EnvConfig, i: usize, seed: u64, action_seed: u64) -> (EnvState, Vec<TraceRecord>, Vec<Vec<Bitmap>>) {
    let mut env = EnvState::new(cfg, &UtilityWeights::default(), i, seed).unwrap();
    let mut arng = Rng::seed_from_u64(action_seed);
    let mut trace = Vec::new();
    let mut maps = Vec::new();
    while !env.done() {
        let (dcm, acts) = random_actions(&mut arng, i, cfg.num_rbgs, cfg.ucm_len, cfg.ucm_vocab);
        let r = env.step(&dcm, &acts).unwrap();
        trace.push(env.trace_record(&dcm, &acts, &r));
        maps.push(acts.into_iter().map(|a| a.bitmap).collect());
    }
    (env, trace, maps)
}

/// Delivered dPDUs per RBG by closed form: a lone transmitter's `k`-th selected
/// RBG carries `min(cap, buffer - k * cap)` dPDUs (floored at 0).
fn oracle_delivered(bitmaps: &[u64], m: usize, buffers: &[usize], caps: &[usize]) -> Vec<usize> {
    (0..m)
        .map(|r| {
            let users: Vec<usize> = (0..bitmaps.len()).filter(|&i| bitmaps[i] >> r & 1 == 1).collect();
            if users.len() != 1 {
                return 0;
            }
            let i = users[0];
            let rank = (0..r).filter(|&q| bitmaps[i] >> q & 1 == 1).count();
            buffers[i].saturating_sub(rank * caps[i]).min(caps[i])
        })
        .collect()
}

fn ue(buffer: usize, channel: usize) -> UeLocalState {
    UeLocalState {
        buffer: (0..buffer as u64).map(|seq| Dpdu { seq, bits: 256 }).collect(),
        occupancy_bits: 256 * buffer as u64,
        channel,
        change_period: 1,
        phase: 0,
        arrival_prob: 0.0,
        next_seq: buffer as u64,
        last_action: None,
        last_dcm_bits: None,
    }
}

#[test]
fn resolution_matches_enumeration_oracle() {
    let mut rng = Rng::seed_from_u64(5);
    for i in 1..=3usize {
        for m in 1..=3usize {
            let mut cfg = base(m);
            cfg.tbler = 0.0;
            for _ in 0..6 {
                let buffers: Vec<usize> = (0..i).map(|_| rng.gen_range(0..6)).collect();
                let channels: Vec<usize> = (0..i).map(|_| rng.gen_range(0..3)).collect();
                let caps: Vec<usize> = channels.iter().map(|&c| [0, 1, 2][c]).collect();
                let ues: Vec<UeLocalState> = buffers.iter().zip(&channels).map(|(&b, &c)| ue(b, c)).collect();
                for joint in 0..1u64 << (i * m) {
                    let masks: Vec<u64> = (0..i).map(|u| joint >> (u * m) & ((1 << m) - 1)).collect();
                    let maps: Vec<Bitmap> = masks.iter().map(|&x| Bitmap::from_mask(x, m)).collect();
                    let res = resolve_transmissions(&maps, &ues, &mut Rng::seed_from_u64(joint), &cfg);
                    let want = oracle_delivered(&masks, m, &buffers, &caps);
                    assert_eq!(res.delivered_per_rbg, want, "I={i} M={m} masks={masks:?} buffers={buffers:?}");
                    for u in 0..i {
                        assert!(res.received[u] <= res.attempted[u]);
                    }
                }
            }
        }
    }
}

#[test]
fn two_by_two_hand_enumeration() {
    // Medium channel: one dPDU per RBG; UE0 holds 2 dPDUs, UE1 holds 1.
    let mut cfg = base(2);
    cfg.tbler = 0.0;
    let ues = vec![ue(2, 1), ue(1, 1)];
    let expected_received = |a: u64, b: u64| -> (usize, usize) {
        let mut r0 = 0;
        let mut r1 = 0;
        let mut loaded0 = 0;
        let mut loaded1 = 0;
        for r in 0..2 {
            let s0 = a >> r & 1 == 1;
            let s1 = b >> r & 1 == 1;
            let l0 = s0 && loaded0 < 2;
            let l1 = s1 && loaded1 < 1;
            loaded0 += l0 as usize;
            loaded1 += l1 as usize;
            if s0 && !s1 && l0 {
                r0 += 1;
            }
            if s1 && !s0 && l1 {
                r1 += 1;
            }
        }
        (r0, r1)
    };
    for a in 0..4 {
        for b in 0..4 {
            let maps = vec![Bitmap::from_mask(a, 2), Bitmap::from_mask(b, 2)];
            let res = resolve_transmissions(&maps, &ues, &mut Rng::seed_from_u64(0), &cfg);
            assert_eq!((res.received[0], res.received[1]), expected_received(a, b), "{a:02b} {b:02b}");
        }
    }
}

#[test]
fn arrivals_extremes_and_rate() {
    for (p, tti) in [(0.0, 2000), (1.0, 50)] {
        let mut cfg = base(1);
        cfg.arrival_probs = vec![p];
        cfg.episode_len = tti;
        let mut env = EnvState::new(&cfg, &UtilityWeights::default(), 3, 1).unwrap();
        let mut bits = 0;
        while !env.done() {
            env.step(&[0], &vec![UeAction::idle(1, 2); 3]).unwrap();
            bits += 256;
            for u in env.ues() {
                assert_eq!(u.occupancy_bits, if p == 0.0 { 0 } else { bits });
            }
        }
    }
    let mut cfg = base(1);
    cfg.arrival_probs = vec![0.5];
    cfg.num_ues = vec![1];
    let mut env = EnvState::new(&cfg, &UtilityWeights::default(), 1, 3).unwrap();
    let n = 100_000;
    let hits = (0..n).filter(|_| env.sample_arrivals().0[0]).count();
    let rate = hits as f64 / n as f64;
    assert!((rate - 0.5).abs() <= 0.01, "rate {rate}");
}

#[test]
fn finite_buffer_drops_arrivals() {
    let mut cfg = base(1);
    cfg.arrival_probs = vec![1.0];
    cfg.buffer_cap_bits = Some(512);
    cfg.episode_len = 5;
    let (env, trace, _) = {
        let mut env = EnvState::new(&cfg, &UtilityWeights::default(), 3, 9).unwrap();
        let mut trace = Vec::new();
        while !env.done() {
            let a = vec![UeAction::idle(1, 2); 3];
            let r = env.step(&[0], &a).unwrap();
            trace.push(env.trace_record(&[0], &a, &r));
        }
        (env, trace, ())
    };
    assert!(env.ues().iter().all(|u| u.occupancy_bits == 512));
    assert_eq!(env.totals().dropped_dpdus, 9);
    assert!(trace[2].dropped.iter().all(|&d| d));
}

#[test]
fn channel_behaviour() {
    let mut cfg = base(1);
    cfg.channel_transition = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let mut env = EnvState::new(&cfg, &UtilityWeights::default(), 5, 4).unwrap();
    let start: Vec<usize> = env.ues().iter().map(|u| u.channel).collect();
    for _ in 0..1000 {
        env.evolve_channels();
    }
    assert_eq!(start, env.ues().iter().map(|u| u.channel).collect::<Vec<_>>());

    // Period 10: constant for 9 ticks after each change.
    let mut cfg = base(1);
    cfg.channel_change_period_tti = Some(10);
    let mut env = EnvState::new(&cfg, &UtilityWeights::default(), 3, 4).unwrap();
    for _ in 0..20 {
        let before: Vec<f64> = (0..3).map(|i| env.nu(i)).collect();
        for _ in 0..9 {
            env.evolve_channels();
            assert_eq!(before, (0..3).map(|i| env.nu(i)).collect::<Vec<_>>());
        }
        env.evolve_channels();
    }

    // Empirical occupancy against the stationary vector.
    let mut cfg = base(1);
    cfg.num_ues = vec![1];
    cfg.channel_change_period_tti = Some(1);
    let pi = stationary(&cfg.channel_transition);
    let mut env = EnvState::new(&cfg, &UtilityWeights::default(), 1, 8).unwrap();
    let mut counts = [0usize; 3];
    let n = 100_000;
    for _ in 0..n {
        env.evolve_channels();
        counts[env.ues()[0].channel] += 1;
    }
    for s in 0..3 {
        let f = counts[s] as f64 / n as f64;
        assert!((f - pi[s]).abs() <= 0.02, "state {s}: {f} vs {}", pi[s]);
    }
}

#[test]
fn csi_error_rates() {
    let mut cfg = base(1);
    cfg.num_ues = vec![1];
    for (err, lo, hi) in [(0.0, 0.0, 0.0), (0.1, 0.09, 0.11)] {
        cfg.csi_error_prob = err;
        let mut env = EnvState::new(&cfg, &UtilityWeights::default(), 1, 2).unwrap();
        let n = 100_000;
        let mut miss = 0;
        for _ in 0..n {
            env.estimate_csi();
            miss += (env.bs().csi[0] != env.ues()[0].channel) as usize;
        }
        let rate = miss as f64 / n as f64;
        assert!(rate >= lo && rate <= hi, "err {err}: {rate}");
    }
    let mut cfg = base(1);
    cfg.spectral_efficiency = vec![1.0, 2.0];
    cfg.channel_transition = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
    cfg.csi_error_prob = 1.0;
    let mut env = EnvState::new(&cfg, &UtilityWeights::default(), 3, 2).unwrap();
    for _ in 0..1000 {
        env.estimate_csi();
        for i in 0..3 {
            assert_ne!(env.bs().csi[i], env.ues()[i].channel);
        }
    }
}

#[test]
fn observations_track_signalling() {
    let mut env = EnvState::new(&base(3), &UtilityWeights::default(), 3, 1).unwrap();
    let acts = vec![
        UeAction { bitmap: "100".parse().unwrap(), ucm: vec![1, 2] },
        UeAction { bitmap: "010".parse().unwrap(), ucm: vec![3, 4] },
        UeAction { bitmap: "001".parse().unwrap(), ucm: vec![5, 6] },
    ];
    let r = env.step(&[1, 2, 3], &acts).unwrap();
    for (i, a) in acts.iter().enumerate() {
        assert_eq!(r.leader_obs.ucm[i].as_ref(), Some(&a.ucm));
        assert_eq!(r.leader_obs.dcm[i].as_ref(), Some(&a.bitmap));
        assert_eq!(r.follower_obs[i].last_action.as_ref(), Some(a));
        assert_eq!(r.consistency[i], 1.0);
    }
    let obs = env.follower_obs_for(&[0, 0, 2]).unwrap();
    assert_eq!(obs[1].dcm_bits, Some("001".parse().unwrap()));
    let five = EnvState::new(&base(3), &UtilityWeights::default(), 5, 1).unwrap();
    assert_eq!(five.leader_obs().num_ues(), 5);
    assert_eq!(env.leader_obs().num_ues(), 3);
}

#[test]
fn replay_is_bit_identical() {
    let cfg = base(3);
    let (_, a, _) = run_episode(&cfg, 4, 17, 2);
    let (_, b, _) = run_episode(&cfg, 4, 17, 2);
    let mut wa = Vec::new();
    let mut wb = Vec::new();
    write_trace(&mut wa, &TraceHeader::new(4, 3, 24, 17), &a).unwrap();
    write_trace(&mut wb, &TraceHeader::new(4, 3, 24, 17), &b).unwrap();
    assert_eq!(wa, wb);
    let (h, back) = read_trace(&wa[..]).unwrap();
    assert_eq!(h.schema, TRACE_SCHEMA);
    assert_eq!(back, a);
    let (_, c, _) = run_episode(&cfg, 4, 18, 2);
    assert_ne!(a, c);
}

/// Straight-line re-implementation of one episode on plain arrays, sharing
/// only the seed derivation and the sampling primitives.
struct RefStep {
    rx: Vec<usize>,
    tx: Vec<usize>,
    buf: Vec<u64>,
    x: Vec<u64>,
    leader: f64,
    followers: Vec<f64>,
}

fn reference_episode(cfg: &EnvConfig, i: usize, seed: u64, action_seed: u64) -> Vec<RefStep> {
    let w = UtilityWeights::default();
    let m = cfg.num_rbgs;
    let mut init = rng::stream(seed, Stream::Init, 0);
    let mut arr = rng::stream(seed, Stream::Arrivals, 0);
    let mut ch = rng::stream(seed, Stream::Channel, 0);
    let mut csi_rng = rng::stream(seed, Stream::Csi, 0);
    let mut er = rng::stream(seed, Stream::Erasure, 0);
    let mut arng = Rng::seed_from_u64(action_seed);
    let pi = stationary(&cfg.channel_transition);
    let mut chan = vec![0; i];
    let mut period = vec![0; i];
    for u in 0..i {
        chan[u] = sample_index(&pi, &mut init);
        let ms = init.gen_range(cfg.channel_change_ms[0]..=cfg.channel_change_ms[1]);
        period[u] = ((ms / 5.0).round() as usize).max(1);
    }
    let mut phase = vec![0; i];
    let mut buf = vec![0usize; i];
    let mut x = vec![0u64; i];
    for u in 0..i {
        estimate(chan[u], 3, cfg.csi_error_prob, &mut csi_rng);
    }
    let mut out = Vec::new();
    for _ in 0..cfg.episode_len {
        let (dcm, acts) = random_actions(&mut arng, i, m, cfg.ucm_len, cfg.ucm_vocab);
        let mut tx = vec![0usize; i];
        let mut rx = vec![0usize; i];
        let users: Vec<usize> = (0..m).map(|r| acts.iter().filter(|a| a.bitmap.get(r)).count()).collect();
        for u in 0..i {
            let cap = [0, 1, 2][chan[u]];
            let mut left = buf[u];
            for r in 0..m {
                let erased = er.gen::<f64>() < cfg.tbler;
                if acts[u].bitmap.get(r) {
                    let load = cap.min(left);
                    left -= load;
                    tx[u] += load;
                    if users[r] == 1 && !erased {
                        rx[u] += load;
                    }
                }
            }
            buf[u] -= rx[u];
            x[u] += acts[u].bitmap.popcount() as u64;
        }
        let mut fr = Vec::new();
        for u in 0..i {
            let agree = (0..m).filter(|&r| acts[u].bitmap.get(r) == (dcm[r] == u + 1)).count();
            let c = agree as f64 / m as f64;
            let eff = if tx[u] == 0 { 0.0 } else { rx[u] as f64 / tx[u] as f64 };
            fr.push(w.rho1 * eff + w.rho2 * c);
        }
        let mean = rx.iter().sum::<usize>() as f64 / i as f64;
        let s: f64 = x.iter().map(|&v| v as f64).sum();
        let sq: f64 = x.iter().map(|&v| (v * v) as f64).sum();
        let j = if sq == 0.0 { 1.0 } else { s * s / (i as f64 * sq) };
        let leader = mean + w.epsilon * j;
        for u in 0..i {
            if arr.gen::<f64>() < cfg.arrival_probs[u % cfg.arrival_probs.len()] {
                buf[u] += 1;
            }
        }
        for u in 0..i {
            phase[u] += 1;
            if phase[u] >= period[u] {
                phase[u] = 0;
                chan[u] = transition(&cfg.channel_transition, chan[u], &mut ch);
            }
        }
        for u in 0..i {
            estimate(chan[u], 3, cfg.csi_error_prob, &mut csi_rng);
        }
        out.push(RefStep {
            rx,
            tx,
            buf: buf.iter().map(|&b| b as u64 * 256).collect(),
            x: x.clone(),
            leader,
            followers: fr,
        });
    }
    out
}

#[test]
fn episode_matches_reference_implementation() {
    let mut cfg = base(4);
    cfg.tbler = 0.2;
    let (_, trace, _) = run_episode(&cfg, 3, 99, 5);
    let reference = reference_episode(&cfg, 3, 99, 5);
    assert_eq!(trace.len(), 24);
    for (rec, r) in trace.iter().zip(&reference) {
        assert_eq!(rec.received, r.rx, "t={}", rec.t);
        assert_eq!(rec.attempted, r.tx, "t={}", rec.t);
        assert_eq!(rec.buffer_bits, r.buf, "t={}", rec.t);
        assert_eq!(rec.usage, r.x, "t={}", rec.t);
        assert!((rec.leader_reward - r.leader).abs() < 1e-12);
        for (a, b) in rec.follower_rewards.iter().zip(&r.followers) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conservation_and_usage(seed in 0u64..1000, aseed in 0u64..1000, i in 1usize..=5, m in 1usize..=4,
                              tbler in prop_oneof![Just(0.0), Just(0.3)], cap in prop_oneof![Just(None), Just(Some(768u64))]) {
        let mut cfg = base(m);
        cfg.num_ues = vec![i];
        cfg.tbler = tbler;
        cfg.buffer_cap_bits = cap;
        cfg.arrival_probs = vec![0.9, 0.5];
        let (env, trace, maps) = run_episode(&cfg, i, seed, aseed);
        let t = env.totals();
        let left: u64 = env.ues().iter().map(|u| u.occupancy_bits).sum();
        prop_assert_eq!(t.arrived_bits, t.delivered_bits + left + t.dropped_bits);
        for u in 0..i {
            let x: u64 = maps.iter().map(|b| b[u].popcount() as u64).sum();
            prop_assert_eq!(env.bs().usage[u], x);
            prop_assert_eq!(env.ues()[u].occupancy_bits, env.ues()[u].buffer.iter().map(|d| d.bits).sum::<u64>());
        }
        for rec in &trace {
            for u in 0..i {
                prop_assert!(rec.received[u] <= rec.attempted[u]);
            }
            if tbler == 0.0 && rec.collision_map.iter().all(|&n| n <= 1) {
                prop_assert_eq!(&rec.received, &rec.attempted);
            }
        }
    }
}
