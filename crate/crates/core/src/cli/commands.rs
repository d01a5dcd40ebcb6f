use std::path::Path;

use super::config::RunConfig;
use super::output::{box_summary, line_panels, num, quartiles, read_thetas, strings, write_thetas, Series, Table};
use super::CliError;
use crate::approximator::{dual_error, evaluate_centralized, evaluate_distributed_observed, EvalRequest, EvalSettings, MpcScheme};
use crate::baselines::{closed_loop_eval, Controller, MpcPolicy, ScenarioModel, ScenarioMpc};
use crate::learner::{train as run_training, Evaluator, TrainingLog};
use crate::linsys::AcademicEnv;

/// The scheme the run starts from: nominal model, or `scheme.theta_file` if given.
fn initial_scheme(config: &RunConfig) -> Result<MpcScheme, CliError> {
    let mut scheme = MpcScheme::academic(config.scheme_config(), config.topology_graph()?).map_err(CliError::run)?;
    if let Some(path) = &config.scheme.theta_file {
        let thetas = read_thetas(path, &scheme)?;
        scheme.set_thetas(&thetas).map_err(CliError::run)?;
    }
    Ok(scheme)
}

fn learn(config: &RunConfig) -> Result<(MpcScheme, TrainingLog), CliError> {
    let mut scheme = initial_scheme(config)?;
    let topology = config.topology_graph()?;
    let mut env = AcademicEnv::new(&topology, config.env_config(), config.environment.seed);
    let log = run_training(&mut env, &mut scheme, config.initial_state(), &config.learner_config(), config.learner.steps)
        .map_err(CliError::run)?;
    Ok((scheme, log))
}

pub fn train(config: &RunConfig) -> Result<(), CliError> {
    let dir = &config.output.dir;
    println!("training for {} steps ({:?} evaluation)", config.learner.steps, config.learner.evaluator);
    let (scheme, log) = learn(config)?;
    write_training(dir, &scheme, &log)?;
    write_thetas(&dir.join("theta_final.csv"), &scheme, &scheme.thetas())?;
    if config.output.plots {
        plot_training(dir, &scheme, &log)?;
    }
    let n = log.records.len();
    if n >= 10 {
        let tenth = n / 10;
        println!(
            "mean |td| first 10%: {:.4e}, last 10%: {:.4e}, updates: {}",
            log.mean_abs_td(0..tenth),
            log.mean_abs_td(n - tenth..n),
            log.updates
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn write_training(dir: &Path, scheme: &MpcScheme, log: &TrainingLog) -> Result<(), CliError> {
    let (big_m, n, m) = (scheme.num_agents(), scheme.n(), scheme.m());
    let mut header = vec!["step".to_string()];
    for i in 0..big_m {
        header.extend((0..n).map(|c| format!("s{i}_{c}")));
    }
    for i in 0..big_m {
        header.extend((0..m).map(|c| format!("a{i}_{c}")));
    }
    header.extend((0..big_m).map(|i| format!("cost{i}")));
    header.extend(strings(&["td_error", "q_value", "v_next", "alpha", "epsilon", "explored"]));
    let mut table = Table::create(&dir.join("train.csv"), &header)?;
    for r in &log.records {
        let mut row = vec![r.step.to_string()];
        row.extend(r.state.iter().flat_map(|s| s.iter().map(|v| num(*v))));
        row.extend(r.actions.iter().flat_map(|a| a.iter().map(|v| num(*v))));
        row.extend(r.costs.iter().map(|v| num(*v)));
        row.extend([num(r.td_error), num(r.q_value), num(r.v_next), num(r.alpha), num(r.epsilon)]);
        row.push(u8::from(r.explored).to_string());
        table.row(&row)?;
    }
    table.finish()?;

    let mut table = Table::create(&dir.join("theta.csv"), &strings(&["step", "agent", "name", "value"]))?;
    for snap in &log.snapshots {
        for (i, theta) in snap.thetas.iter().enumerate() {
            for (name, v) in scheme.params[i].names().iter().zip(theta.iter()) {
                table.row(&[snap.step.to_string(), i.to_string(), name.clone(), num(*v)])?;
            }
        }
    }
    table.finish()
}

fn plot_training(dir: &Path, scheme: &MpcScheme, log: &TrainingLog) -> Result<(), CliError> {
    let big_m = scheme.num_agents();
    let steps = |f: &dyn Fn(&crate::learner::StepRecord) -> f64| -> Vec<(f64, f64)> {
        log.records.iter().map(|r| (r.step as f64, f(r))).collect()
    };
    let mut panels = Vec::new();
    for c in 0..scheme.n() {
        let series = (0..big_m)
            .map(|i| Series { label: format!("agent {i}"), points: steps(&|r| r.state[i][c]) })
            .collect();
        panels.push((format!("state component {c}"), series));
    }
    for c in 0..scheme.m() {
        let series = (0..big_m)
            .map(|i| Series { label: format!("agent {i}"), points: steps(&|r| r.actions[i][c]) })
            .collect();
        panels.push((format!("input component {c}"), series));
    }
    line_panels(&dir.join("train_states.svg"), "step", &panels)?;

    let panels = vec![
        ("TD error".to_string(), vec![Series { label: "td".into(), points: steps(&|r| r.td_error) }]),
        ("stage cost".to_string(), vec![Series { label: "cost".into(), points: steps(&|r| r.costs.iter().sum()) }]),
    ];
    line_panels(&dir.join("train_td.svg"), "step", &panels)?;

    let panels = (0..big_m)
        .map(|i| {
            let names = scheme.params[i].names();
            let series = names
                .iter()
                .enumerate()
                .map(|(k, name)| Series {
                    label: name.clone(),
                    points: log.snapshots.iter().map(|s| (s.step as f64, s.thetas[i][k])).collect(),
                })
                .collect();
            (format!("agent {i} parameters"), series)
        })
        .collect::<Vec<_>>();
    line_panels(&dir.join("train_theta.svg"), "step", &panels)
}

pub fn dual_check(config: &RunConfig) -> Result<(), CliError> {
    let dir = &config.output.dir;
    let scheme = initial_scheme(config)?;
    let state = config.dual_check_state();
    let req = EvalRequest::value(&state);
    let settings = config.eval_settings();
    let reference = evaluate_centralized(&scheme, &req, settings.tol).map_err(CliError::run)?;
    let mut taus = config.dual_check.taus.clone();
    taus.sort_unstable();
    taus.dedup();
    let max_tau = *taus.last().expect("validated nonempty");
    let run = EvalSettings { admm: crate::consensus::AdmmSettings { iterations: max_tau, ..settings.admm }, ..settings };
    let mut errors = Vec::new();
    evaluate_distributed_observed(&scheme, &req, &run, |iteration, sols, _| {
        if taus.binary_search(&iteration).is_ok() {
            errors.push((iteration, dual_error(&reference.agents, sols)));
        }
    })
    .map_err(CliError::run)?;

    let mut table = Table::create(&dir.join("dual_check.csv"), &strings(&["tau", "dual_error"]))?;
    for (tau, e) in &errors {
        println!("tau {tau:>4}  dual error {e:.3e}");
        table.row(&[tau.to_string(), num(*e)])?;
    }
    table.finish()?;
    if config.output.plots {
        let points = errors.iter().map(|(t, e)| (*t as f64, e.max(f64::MIN_POSITIVE).log10())).collect();
        line_panels(
            &dir.join("dual_check.svg"),
            "ADMM iterations",
            &[("log10 dual error".to_string(), vec![Series { label: "error".into(), points }])],
        )?;
    }
    Ok(())
}

pub fn compare(config: &RunConfig) -> Result<(), CliError> {
    let dir = &config.output.dir;
    let c = &config.compare;
    let topology = config.topology_graph()?;
    let scheme_config = config.scheme_config();
    let greedy = Evaluator::Centralized { tol: config.distributed.tol };

    let mut controllers: Vec<Box<dyn Controller>> = Vec::new();
    match &c.theta_file {
        Some(path) => {
            let mut scheme = MpcScheme::academic(scheme_config.clone(), topology.clone()).map_err(CliError::run)?;
            scheme.set_thetas(&read_thetas(path, &scheme)?).map_err(CliError::run)?;
            controllers.push(Box::new(MpcPolicy { name: "trained".into(), scheme, evaluator: greedy }));
        }
        None => {
            println!("training for {} steps before comparing", config.learner.steps);
            let (scheme, log) = learn(config)?;
            write_thetas(&dir.join("theta_final.csv"), &scheme, &scheme.thetas())?;
            for &step in &c.snapshots {
                let snap = log.snapshots.iter().find(|s| s.step == step).ok_or_else(|| CliError::Run(format!("no snapshot at step {step}")))?;
                let mut at = scheme.clone();
                at.set_thetas(&snap.thetas).map_err(CliError::run)?;
                controllers.push(Box::new(MpcPolicy { name: format!("trained@{step}"), scheme: at, evaluator: greedy }));
            }
            controllers.push(Box::new(MpcPolicy { name: "trained".into(), scheme, evaluator: greedy }));
        }
    }
    controllers.push(Box::new(MpcPolicy::nominal(scheme_config.clone(), topology.clone(), greedy).map_err(CliError::run)?));
    if c.include_smpc {
        let noise = config.env_config().noise;
        for model in [ScenarioModel::Inexact, ScenarioModel::True] {
            let smpc = ScenarioMpc::new(scheme_config.clone(), topology.clone(), c.scenarios, model, noise, c.scenario_seed)
                .map_err(CliError::run)?;
            controllers.push(Box::new(smpc));
        }
    }

    let seeds: Vec<u64> = (0..c.episodes as u64).map(|e| c.seed + e).collect();
    let initial = config.compare_initial();
    let env_config = config.env_config();
    let mut episodes = Table::create(&dir.join("compare_episodes.csv"), &strings(&["controller", "episode", "seed", "cost", "violations"]))?;
    let mut summary = Table::create(
        &dir.join("compare_summary.csv"),
        &strings(&["controller", "q1", "median", "q3", "mean", "violations"]),
    )?;
    let mut rows = Vec::new();
    for ctrl in controllers.iter_mut() {
        let out = closed_loop_eval(ctrl.as_mut(), &topology, &env_config, &initial, c.steps, &seeds).map_err(CliError::run)?;
        let name = ctrl.name().to_string();
        for (e, o) in out.iter().enumerate() {
            episodes.row(&[name.clone(), e.to_string(), o.seed.to_string(), num(o.cost), o.violations.to_string()])?;
        }
        let costs: Vec<f64> = out.iter().map(|o| o.cost).collect();
        let (q1, med, q3) = quartiles(&costs);
        let mean = costs.iter().sum::<f64>() / costs.len() as f64;
        let violations: usize = out.iter().map(|o| o.violations).sum();
        println!("{name:<16} median {med:>10.3}  [{q1:.3}, {q3:.3}]  violations {violations}");
        summary.row(&[name.clone(), num(q1), num(med), num(q3), num(mean), violations.to_string()])?;
        rows.push((name, q1, med, q3));
    }
    episodes.finish()?;
    summary.finish()?;
    if config.output.plots {
        box_summary(&dir.join("compare.svg"), "closed-loop cost (median and quartiles)", &rows)?;
    }
    Ok(())
}
