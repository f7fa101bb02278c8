use rand::{Rng as _, SeedableRng};
use stackmac::env::EnvConfig;
use stackmac::game::UtilityWeights;
use stackmac::nn::{Direction, Optimizer, OptimizerKind};
use stackmac::policy::{PolicyConfig, TokenPolicy};
use stackmac::ppo::*;
use stackmac::rng::Rng;

fn env_cfg() -> EnvConfig {
    EnvConfig {
        num_rbgs: 2,
        episode_len: 4,
        num_ues: vec![2, 3],
        ucm_len: 1,
        ucm_vocab: 3,
        max_ues: 4,
        arrival_probs: vec![0.7],
        ..EnvConfig::default()
    }
}

fn tiny() -> PolicyConfig {
    PolicyConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 8,
        value_hidden: 4,
    }
}

fn setup(max_epochs: usize) -> TrainSetup {
    TrainSetup {
        env: env_cfg(),
        game: UtilityWeights::default(),
        policy: tiny(),
        train: TrainConfig {
            max_epochs,
            buffer_episodes: 2,
            minibatch: 16,
            ppo_epochs: 2,
            actor_lr: 1e-2,
            critic_lr: 1e-2,
            ..TrainConfig::default()
        },
    }
}

/// A finished batch from the behaviour policy plus a perturbed current
/// policy, so ratios differ from one and some samples clip.
fn batch(seed: u64, role_leader: bool) -> (TokenPolicy<f64>, Vec<Transition<f64>>) {
    let env = env_cfg();
    let mut rng = Rng::seed_from_u64(seed);
    let leader = TokenPolicy::<f64>::new(&env, &tiny(), &mut rng).unwrap();
    let follower = TokenPolicy::<f64>::new(&env, &tiny(), &mut rng).unwrap();
    let mut t = TrainConfig {
        max_epochs: 10,
        ..TrainConfig::default()
    };
    t.gamma = 0.9;
    let ep = collect_episode(&leader, &follower, &env, &UtilityWeights::default(), &t, seed, 0, 1.3).unwrap();
    let mut trs: Vec<_> = if role_leader { ep.leader.clone() } else { ep.follower_pool().cloned().collect() };
    trs.truncate(6);
    for tr in &mut trs {
        tr.advantage = rng.gen_range(-2.0..2.0);
        tr.ret = rng.gen_range(-1.0..1.0);
    }
    let mut cur = if role_leader { leader } else { follower };
    for v in cur.model.data.iter_mut() {
        *v += rng.gen_range(-0.15..0.15);
    }
    // Give the value head non-zero output weights so its gradient is generic.
    for i in cur.model.value_range() {
        cur.model.data[i] += rng.gen_range(-0.3..0.3);
    }
    (cur, trs)
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if n == 0.0 {
        d
    } else {
        d / n
    }
}

fn fd(policy: &TokenPolicy<f64>, idx: &[usize], f: impl Fn(&TokenPolicy<f64>) -> f64) -> Vec<f64> {
    let h = 1e-6;
    idx.iter()
        .map(|&i| {
            let mut p = policy.clone();
            p.model.data[i] += h;
            let up = f(&p);
            p.model.data[i] -= 2.0 * h;
            let dn = f(&p);
            (up - dn) / (2.0 * h)
        })
        .collect()
}

fn sample_indices(rng: &mut Rng, range: std::ops::Range<usize>, k: usize) -> Vec<usize> {
    (0..k).map(|_| rng.gen_range(range.clone())).collect()
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let c = PpoCoeffs {
        clip_eps: 0.1,
        kl_coef: 0.05,
        entropy_coef: 0.03,
    };
    let mut worst: f64 = 0.0;
    for s in 0..20u64 {
        let (pol, trs) = batch(100 + s, s % 2 == 0);
        let mut g = vec![0.0; pol.model.num_params()];
        batch_gradients(&pol, &trs, &c, &mut g, true, false).unwrap();
        let mut rng = Rng::seed_from_u64(s);
        let idx = sample_indices(&mut rng, 0..pol.model.value_range().start, 40);
        let num = fd(&pol, &idx, |p| ppo_objective(p, &trs, &c).unwrap());
        let ana: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        worst = worst.max(rel_err(&ana, &num));
        assert!(g[pol.model.value_range()].iter().all(|&v| v == 0.0));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn critic_gradient_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for s in 0..20u64 {
        let (pol, trs) = batch(300 + s, s % 2 == 1);
        let mut g = vec![0.0; pol.model.num_params()];
        batch_gradients(&pol, &trs, &PpoCoeffs { clip_eps: 0.1, kl_coef: 0.0, entropy_coef: 0.0 }, &mut g, false, true).unwrap();
        let idx: Vec<usize> = pol.model.value_range().collect();
        let num = fd(&pol, &idx, |p| critic_loss(p, &trs).unwrap());
        let ana: Vec<f64> = idx.iter().map(|&i| g[i]).collect();
        worst = worst.max(rel_err(&ana, &num));
        assert!(g[..pol.model.value_range().start].iter().all(|&v| v == 0.0));
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn critic_loss_examples() {
    let (pol, mut trs) = batch(7, true);
    trs.truncate(2);
    let mut v = Vec::new();
    for tr in &mut trs {
        tr.ret = pol.value(&tr.obs);
        v.push(tr.ret);
    }
    assert!(critic_loss(&pol, &trs).unwrap().abs() < 1e-24);
    let mut z = pol.clone();
    for i in z.model.value_range() {
        z.model.data[i] = 0.0;
    }
    for tr in &mut trs {
        tr.ret = 2.0;
    }
    assert!((critic_loss(&z, &trs).unwrap() - 4.0).abs() < 1e-12);
}

#[test]
fn surrogate_examples() {
    let (pol, mut trs) = batch(9, false);
    trs.truncate(1);
    let c = PpoCoeffs {
        clip_eps: 0.1,
        kl_coef: 0.0,
        entropy_coef: 0.0,
    };
    // eta = 1: behaviour log-prob equals the current one.
    let tr = &mut trs[0];
    tr.logprob = pol.action_logprob(&tr.obs, &tr.action, tr.role(), tr.num_ues, tr.temperature).unwrap();
    tr.advantage = 0.7;
    assert!((ppo_objective(&pol, &trs, &c).unwrap() - 0.7).abs() < 1e-12);
    // eta = 2, A = 1 -> clipped to 1.1.
    let tr = &mut trs[0];
    tr.logprob -= 2f64.ln();
    tr.advantage = 1.0;
    assert!((ppo_objective(&pol, &trs, &c).unwrap() - 1.1).abs() < 1e-12);
}

#[test]
fn reduces_to_vanilla_policy_gradient() {
    let c = PpoCoeffs {
        clip_eps: 1e9,
        kl_coef: 0.0,
        entropy_coef: 0.0,
    };
    for s in 0..4u64 {
        let (pol, mut trs) = batch(500 + s, s % 2 == 0);
        for tr in &mut trs {
            tr.logprob = pol.action_logprob(&tr.obs, &tr.action, tr.role(), tr.num_ues, tr.temperature).unwrap();
        }
        let mut a = vec![0.0; pol.model.num_params()];
        let mut b = vec![0.0; pol.model.num_params()];
        batch_gradients(&pol, &trs, &c, &mut a, true, false).unwrap();
        vanilla_pg_gradient(&pol, &trs, &mut b).unwrap();
        let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 1e-8, "max difference {d}");
    }
}

#[test]
fn advantages_shift_invariant_at_lambda_one() {
    let r = [0.3, -1.2, 0.5, 2.0];
    let shifted: Vec<f64> = r.iter().map(|x| x + 5.0).collect();
    // Values refit exactly: V_t is the reward-to-go, so A_t = R_t - V_t = 0.
    for rew in [&r[..], &shifted[..]] {
        let mut v = rewards_to_go(rew, 1.0);
        v.push(0.0);
        let a = gae(rew, &v, 1.0, 1.0).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1e-12));
    }
}

#[test]
fn unfinished_transitions_are_rejected() {
    let (pol, mut trs) = batch(11, true);
    trs[0].finished = false;
    assert!(ppo_objective(&pol, &trs, &TrainConfig::default().coeffs()).is_err());
}

#[test]
fn update_rules() {
    // Zero gradient leaves parameters alone.
    let mut p = vec![1.0f64, -2.0];
    let mut o = Optimizer::new(OptimizerKind::Adam, 2);
    o.step(&mut p, &[0.0, 0.0], 0.1, Direction::Ascend, 0..2);
    assert_eq!(p, vec![1.0, -2.0]);
    // Ascent on -(x-3)^2 from 0 increases the objective.
    let f = |x: f64| -(x - 3.0) * (x - 3.0);
    let mut x = vec![0.0f64];
    let mut o = Optimizer::new(OptimizerKind::Sgd, 1);
    let before = f(x[0]);
    let g = [-2.0 * (x[0] - 3.0)];
    o.step(&mut x, &g, 0.1, Direction::Ascend, 0..1);
    assert!(f(x[0]) > before);
    // iota_u = 0.5 halves the follower step for the same gradient.
    let cfg = TrainConfig {
        iota_u: 0.5,
        ..TrainConfig::default()
    };
    let (mut a, mut b) = (vec![0.0f64; 3], vec![0.0f64; 3]);
    let g = [1.0, -2.0, 0.5];
    Optimizer::new(OptimizerKind::Sgd, 3).step(&mut a, &g, cfg.actor_lr, Direction::Ascend, 0..3);
    Optimizer::new(OptimizerKind::Sgd, 3).step(&mut b, &g, cfg.follower_lr(), Direction::Ascend, 0..3);
    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((n(&b) / n(&a) - 0.5).abs() < 1e-12);
}

#[test]
fn collect_episode_shapes_and_ordering() {
    let env = env_cfg();
    let mut rng = Rng::seed_from_u64(1);
    let l = TokenPolicy::<f32>::new(&env, &tiny(), &mut rng).unwrap();
    let f = TokenPolicy::<f32>::new(&env, &tiny(), &mut rng).unwrap();
    let t = TrainConfig {
        max_epochs: 4,
        ..TrainConfig::default()
    };
    let a = collect_episode(&l, &f, &env, &UtilityWeights::default(), &t, 5, 3, 2.0).unwrap();
    let b = collect_episode(&l, &f, &env, &UtilityWeights::default(), &t, 5, 3, 2.0).unwrap();
    assert_eq!(a.leader.len(), env.episode_len);
    assert_eq!(a.follower_pool().count(), env.episode_len * a.num_ues);
    assert_eq!(a.leader, b.leader);
    assert!(a.leader.iter().chain(a.follower_pool()).all(|t| t.finished));
    // The follower prompt at t ends with the DCM bits chosen at t.
    let m = env.num_rbgs;
    for (k, lt) in a.leader.iter().enumerate() {
        let dcm: Vec<usize> = lt.action.iter().map(|&tok| l.schema.vocab.num_value(tok).unwrap()).collect();
        for (ue, traj) in a.followers.iter().enumerate() {
            let p = &traj[k].obs.tokens;
            let bits: Vec<usize> = p[p.len() - 1 - m..p.len() - 1].iter().map(|&tok| l.schema.vocab.num_value(tok).unwrap()).collect();
            let want: Vec<usize> = dcm.iter().map(|&d| (d == ue + 1) as usize).collect();
            assert_eq!(bits, want);
        }
    }
}

#[test]
fn smoke_run_logs_finite_utilities() {
    let out = train::<f32>(&setup(1), 3).unwrap();
    assert_eq!(out.log.len(), 1);
    assert!(out.log[0].leader_utility.is_finite() && out.log[0].follower_utility.is_finite());
}

#[test]
fn deterministic_logs_and_parallel_rollouts_agree() {
    let mut s = setup(6);
    s.train.deterministic = true;
    let enc = |o: &TrainOutcome<f32>| o.log.iter().map(|r| serde_json::to_string(r).unwrap()).collect::<Vec<_>>().join("\n");
    let a = train::<f32>(&s, 9).unwrap();
    let b = train::<f32>(&s, 9).unwrap();
    assert_eq!(enc(&a), enc(&b));
    assert!(a.log.iter().filter(|r| r.update.is_some()).count() == 3);
    let mut p = s.clone();
    p.train.deterministic = false;
    p.train.workers = 3;
    let c = train::<f32>(&p, 9).unwrap();
    assert_eq!(a.leader, c.leader);
    assert_eq!(a.follower, c.follower);
    assert_ne!(a.leader, train::<f32>(&s, 10).unwrap().leader);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let mut s = setup(8);
    s.train.deterministic = true;
    s.train.checkpoint_every = 4;
    let full = train::<f32>(&s, 4).unwrap();
    let mut t = Trainer::<f32>::new(s.clone(), 4).unwrap();
    let mut cks = Vec::new();
    let mut log = Vec::new();
    t.run(
        &mut |r| {
            log.push(r.clone());
            Ok(())
        },
        &mut |c| {
            cks.push(serde_json::to_string(c).unwrap());
            Ok(())
        },
        &mut |_| Ok(()),
    )
    .unwrap();
    assert_eq!(cks.len(), 2);
    let ck: TrainerCheckpoint<f32> = serde_json::from_str(&cks[0]).unwrap();
    assert_eq!(ck.next_epoch, 4);
    let mut r = Trainer::<f32>::resume(s.clone(), &ck).unwrap();
    let mut tail = Vec::new();
    r.run(
        &mut |x| {
            tail.push(x.clone());
            Ok(())
        },
        &mut |_| Ok(()),
        &mut |_| Ok(()),
    )
    .unwrap();
    assert_eq!(r.leader(), &full.leader);
    assert_eq!(r.follower(), &full.follower);
    assert_eq!(tail, full.log[4..].to_vec());
    let mut other = s.clone();
    other.game.rho1 = 1.0;
    assert!(matches!(Trainer::<f32>::resume(other, &ck), Err(stackmac::Error::HashMismatch { .. })));
}

#[test]
fn non_finite_loss_aborts_with_record() {
    let mut s = setup(2);
    s.train.deterministic = true;
    let mut t = Trainer::<f32>::new(s.clone(), 1).unwrap();
    let mut lead = t.leader().clone();
    lead.model.data[0] = f32::NAN;
    let f = t.follower().clone();
    t = Trainer::with_policies(s, 1, lead, f).unwrap();
    let mut aborts = Vec::new();
    let err = t
        .run(&mut |_| Ok(()), &mut |_| Ok(()), &mut |a| {
            aborts.push(a.clone());
            Ok(())
        })
        .unwrap_err();
    assert!(matches!(err, stackmac::Error::NonFinite { .. }), "{err}");
    assert_eq!(aborts.len(), 1);
}
