use std::cell::RefCell;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use stackmac::baselines::{train_mappo, AlohaController, DictatorController, MappoAgents, MappoController, MappoMode, PolicyKind};
use stackmac::config::{digest, ExperimentConfig, TheoryFile};
use stackmac::metrics::{evaluate_cell, plot_data, write_csv, Controller, EvalConfig, KpiRow, TokenController};
use stackmac::policy::TokenPolicy;
use stackmac::ppo::{Trainer, TrainerCheckpoint};
use stackmac::theory::run_suite;
use stackmac::Error;

use crate::manifest::{RunDir, RunManifest, MANIFEST_FORMAT};
use crate::{Cli, CliError, Command};

pub const MAPPO_CHECKPOINT_FORMAT: &str = "stackmac.mappo";

/// Trained MAPPO agents and the model hash they were trained under.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MappoCheckpoint {
    pub format: String,
    pub config_hash: String,
    pub num_ues: usize,
    pub agents: MappoAgents<f32>,
}

type CliResult<T = ()> = Result<T, CliError>;

pub(crate) fn dispatch(cli: &Cli) -> CliResult {
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(cli.command.name()));
    if let Command::Theory = cli.command {
        return theory(cli, &out);
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Train { resume } => train(cli, cfg, resume.as_deref(), &out),
        Command::Eval { checkpoint, policy_type } => eval(cli, cfg, checkpoint.as_deref(), policy_type, &out),
        Command::Baseline { policy_type } => baseline(cli, cfg, *policy_type, &out),
        Command::Theory => unreachable!(),
    }
}

fn seed_of(cli: &Cli, configured: Option<u64>) -> u64 {
    cli.seed.or(configured).unwrap_or(0)
}

fn load_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("`{}` needs --config <file>", cli.command.name())))?;
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.seed = Some(seed_of(cli, cfg.seed));
    if let Some(t) = cfg.train.as_mut() {
        if let Some(w) = cli.workers {
            t.workers = w;
        }
        if cli.deterministic {
            t.deterministic = true;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(cli: &Cli, config: serde_json::Value, config_hash: String, model_hash: Option<String>, seed: u64) -> RunManifest {
    RunManifest {
        format: MANIFEST_FORMAT.into(),
        subcommand: cli.command.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed,
        config_hash,
        model_hash,
        config,
        workers: cli.workers.unwrap_or(1),
        deterministic: cli.deterministic,
        outputs: Vec::new(),
        notes: Vec::new(),
        status: String::new(),
        started_unix_s: 0.0,
        wall_s: 0.0,
    }
}

fn experiment_manifest(cli: &Cli, cfg: &ExperimentConfig) -> CliResult<RunManifest> {
    let snapshot = serde_json::to_value(cfg).map_err(Error::from)?;
    Ok(manifest(cli, snapshot, cfg.hash(), Some(cfg.model_hash()), cfg.seed.unwrap_or(0)))
}

/// Runs `body` inside `out` and always leaves a manifest behind.
fn with_run(out: &Path, m: RunManifest, body: impl FnOnce(&mut RunDir) -> CliResult) -> CliResult {
    let mut run = RunDir::create(out)?;
    let res = body(&mut run);
    let status = match &res {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    run.finish(m, &status)?;
    res
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> CliResult<D> {
    let bytes = std::fs::read(path).map_err(Error::from)?;
    Ok(serde_json::from_slice(&bytes).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?)
}

fn header_line(config_hash: &str, model_hash: &str, seed: u64, extra: serde_json::Value) -> String {
    let mut h = json!({ "config_hash": config_hash, "model_hash": model_hash, "seed": seed });
    if let (Some(h), Some(e)) = (h.as_object_mut(), extra.as_object()) {
        h.extend(e.clone());
    }
    h.to_string()
}

fn train(cli: &Cli, cfg: ExperimentConfig, resume: Option<&Path>, out: &Path) -> CliResult {
    let m = experiment_manifest(cli, &cfg)?;
    let seed = m.seed;
    let config_hash = m.config_hash.clone();
    with_run(out, m, |run| {
        let setup = cfg.train_setup()?;
        let mh = setup.model_hash();
        let mut trainer = match resume {
            Some(p) => {
                let ck: TrainerCheckpoint<f32> = read_json(p)?;
                Trainer::resume(setup.clone(), &ck)?
            }
            None => Trainer::new(setup.clone(), seed)?,
        };
        let start = trainer.next_epoch();
        let log = RefCell::new(run.writer("train.jsonl")?);
        writeln!(log.borrow_mut(), "{}", header_line(&config_hash, &mh, seed, json!({ "start_epoch": start }))).map_err(Error::from)?;
        let mut last = None;
        let result = trainer.run(
            &mut |r| {
                writeln!(log.borrow_mut(), "{}", serde_json::to_string(r)?)?;
                last = Some((r.epoch, r.leader_utility));
                Ok(())
            },
            &mut |ck| run.write_json(&format!("checkpoints/trainer-{:06}.json", ck.next_epoch), ck),
            &mut |a| {
                writeln!(log.borrow_mut(), "{}", serde_json::to_string(a)?)?;
                Ok(())
            },
        );
        log.borrow_mut().flush().map_err(Error::from)?;
        result?;
        run.write_json("trainer.json", &trainer.checkpoint())?;
        run.write_json("leader.json", &trainer.leader().to_checkpoint(&mh))?;
        run.write_json("follower.json", &trainer.follower().to_checkpoint(&mh))?;
        match last {
            Some((e, u)) => println!("trained epochs {start}..={e}; last leader utility {u:.4}"),
            None => println!("nothing to train: already at epoch {start}"),
        }
        println!("outputs in {}", run.dir.display());
        Ok(())
    })
}

fn load_mappo(dir: &Path, mode: MappoMode, cfg: &ExperimentConfig) -> CliResult<MappoAgents<f32>> {
    let ck: MappoCheckpoint = read_json(&dir.join("mappo.json"))?;
    if ck.format != MAPPO_CHECKPOINT_FORMAT {
        return Err(Error::Decode(format!("not a MAPPO checkpoint: {}", ck.format)).into());
    }
    let mh = cfg.model_hash();
    if ck.config_hash != mh {
        return Err(Error::HashMismatch {
            checkpoint: ck.config_hash,
            config: mh,
        }
        .into());
    }
    if ck.agents.mode != mode {
        return Err(CliError::Usage(format!("checkpoint holds MAPPO-{:?} agents, not MAPPO-{mode:?}", ck.agents.mode)));
    }
    let mut agents = ck.agents;
    agents.set_adapter(cfg.baseline.mappo.adapter);
    Ok(agents)
}

fn controller(kind: PolicyKind, checkpoint: Option<&Path>, cfg: &ExperimentConfig, grid: &EvalConfig) -> CliResult<Box<dyn Controller>> {
    let need = || checkpoint.ok_or_else(|| CliError::Usage(format!("policy type `{}` needs --checkpoint <dir>", kind_name(kind))));
    let mh = cfg.model_hash();
    Ok(match kind {
        PolicyKind::Token => {
            let dir = need()?;
            let l = TokenPolicy::<f32>::load(&dir.join("leader.json"), Some(&mh))?;
            let f = TokenPolicy::<f32>::load(&dir.join("follower.json"), Some(&mh))?;
            Box::new(TokenController::new(l, f, grid.decoding))
        }
        PolicyKind::Dictator => {
            let l = TokenPolicy::<f32>::load(&need()?.join("leader.json"), Some(&mh))?;
            Box::new(DictatorController::new(l, grid.decoding))
        }
        PolicyKind::Aloha => Box::new(AlohaController::new(cfg.baseline.aloha.clone())),
        PolicyKind::MappoS => Box::new(MappoController::new(load_mappo(need()?, MappoMode::S, cfg)?, grid.decoding)),
        PolicyKind::MappoG => Box::new(MappoController::new(load_mappo(need()?, MappoMode::G, cfg)?, grid.decoding)),
    })
}

fn kind_name(k: PolicyKind) -> String {
    serde_json::to_value(k).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

/// Every controller on every cell. Cells a fixed-width network cannot
/// execute are skipped and noted.
fn eval_rows(controllers: &mut [Box<dyn Controller>], cfg: &ExperimentConfig, grid: &EvalConfig, seed: u64, notes: &mut Vec<String>) -> CliResult<Vec<KpiRow>> {
    grid.validate()?;
    let mut rows = Vec::new();
    for ctrl in controllers.iter_mut() {
        for sc in grid.scenarios() {
            match evaluate_cell(ctrl.as_mut(), &sc, &cfg.env, &cfg.game, grid, seed) {
                Ok(r) => rows.push(r),
                Err(e @ Error::ArchitectureRigidity { .. }) => {
                    let note = format!("{} skipped at I = {}: {e}", ctrl.name(), sc.num_ues);
                    eprintln!("warning: {note}");
                    notes.push(note);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
    Ok(rows)
}

fn write_eval_outputs(run: &mut RunDir, rows: &[KpiRow], grid: &EvalConfig, config_hash: &str) -> CliResult {
    let mut w = run.writer("kpis.csv")?;
    write_csv(&mut w, rows)?;
    w.flush().map_err(Error::from)?;
    run.write_json("plots.json", &json!({ "config_hash": config_hash, "series": plot_data(rows, grid) }))?;
    println!("{:<10} {:>3} {:>8} {:>14} {:>7} {:>9}", "policy", "I", "p_a", "bits/s", "JFI", "valid");
    for r in rows {
        let pa = r.arrival_prob.map_or("-".to_string(), |p| format!("{p}"));
        println!(
            "{:<10} {:>3} {:>8} {:>14.1} {:>7.4} {:>9.3}",
            r.policy, r.num_ues, pa, r.throughput_bits_per_s.mean, r.jfi.mean, r.valid_rate
        );
    }
    Ok(())
}

fn eval(cli: &Cli, cfg: ExperimentConfig, checkpoint: Option<&Path>, kinds: &[PolicyKind], out: &Path) -> CliResult {
    let m = experiment_manifest(cli, &cfg)?;
    let (seed, config_hash) = (m.seed, m.config_hash.clone());
    with_run(out, m, |run| {
        let grid = cfg.eval.clone().unwrap_or_default();
        let mut controllers = kinds
            .iter()
            .map(|&k| controller(k, checkpoint, &cfg, &grid))
            .collect::<CliResult<Vec<_>>>()?;
        let rows = eval_rows(&mut controllers, &cfg, &grid, seed, &mut run.notes)?;
        write_eval_outputs(run, &rows, &grid, &config_hash)
    })
}

fn baseline(cli: &Cli, cfg: ExperimentConfig, kind: PolicyKind, out: &Path) -> CliResult {
    let mode = match kind {
        PolicyKind::MappoS => Some(MappoMode::S),
        PolicyKind::MappoG => Some(MappoMode::G),
        PolicyKind::Aloha => None,
        PolicyKind::Token | PolicyKind::Dictator => {
            return Err(CliError::Usage(format!("`{}` is not a baseline; use `train` and `eval`", kind_name(kind))));
        }
    };
    let m = experiment_manifest(cli, &cfg)?;
    let (seed, config_hash) = (m.seed, m.config_hash.clone());
    with_run(out, m, |run| {
        let grid = cfg.eval.clone().unwrap_or_default();
        let mut controllers: Vec<Box<dyn Controller>> = match mode {
            None => vec![Box::new(AlohaController::new(cfg.baseline.aloha.clone()))],
            Some(mode) => {
                let setup = cfg.train_setup()?;
                let mh = setup.model_hash();
                let num_ues = cfg
                    .baseline
                    .mappo_num_ues
                    .unwrap_or_else(|| cfg.env.num_ues.iter().copied().min().unwrap_or(1));
                let (mut agents, log) = train_mappo::<f32>(&setup, &cfg.baseline.mappo, mode, num_ues, seed)?;
                let mut w = run.writer("mappo_train.jsonl")?;
                writeln!(w, "{}", header_line(&config_hash, &mh, seed, json!({ "num_ues": num_ues }))).map_err(Error::from)?;
                for r in &log {
                    writeln!(w, "{}", serde_json::to_string(r).map_err(Error::from)?).map_err(Error::from)?;
                }
                w.flush().map_err(Error::from)?;
                run.write_json(
                    "mappo.json",
                    &MappoCheckpoint {
                        format: MAPPO_CHECKPOINT_FORMAT.into(),
                        config_hash: mh,
                        num_ues,
                        agents: agents.clone(),
                    },
                )?;
                agents.set_adapter(cfg.baseline.mappo.adapter);
                vec![Box::new(MappoController::new(agents, grid.decoding))]
            }
        };
        let rows = eval_rows(&mut controllers, &cfg, &grid, seed, &mut run.notes)?;
        write_eval_outputs(run, &rows, &grid, &config_hash)
    })
}

fn theory(cli: &Cli, out: &Path) -> CliResult {
    let file = match &cli.config {
        Some(p) => TheoryFile::from_toml(&std::fs::read_to_string(p).map_err(Error::from)?)?,
        None => TheoryFile::default(),
    };
    let seed = seed_of(cli, file.seed);
    let snapshot = TheoryFile {
        theory: Some(file.theory.unwrap_or_default()),
        seed: Some(seed),
    };
    let config_hash = digest(&snapshot);
    let value = serde_json::to_value(&snapshot).map_err(Error::from)?;
    let m = manifest(cli, value, config_hash.clone(), None, seed);
    with_run(out, m, |run| {
        let tcfg = snapshot.theory.clone().unwrap_or_default();
        let report = run_suite(&tcfg, seed)?;
        run.write_json("theory_report.json", &json!({ "config_hash": config_hash, "report": report }))?;
        let table = report.summary_table();
        run.write_text("theory_summary.txt", &table)?;
        print!("{table}");
        if report.passed() {
            Ok(())
        } else {
            let failed: Vec<&str> = report.checks.iter().filter(|c| c.status.is_failure()).map(|c| c.name.as_str()).collect();
            Err(CliError::TheoryFailed(failed.join(", ")))
        }
    })
}
