use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use didact_core::agents::{EndpointConfig, HttpTransport, RemoteChat, API_KEY_ENV};
use didact_core::dialogue::{EpisodeConfig, EpisodeMode, EpisodeRecord, Role, Termination};
use didact_core::lab::{
    self, ExperimentConfig, Phi, Regime, Theta, ToyConfig, ToyMode, UniformGuess,
};
use didact_core::leakage::{detect_leakage, judge_hook, LeakStage};
use didact_core::metrics::{cumulative_accuracy, emit_csv, summarize, CumulativeAccuracyCurve};
use didact_core::orchestrator::{
    load_problems, BackendFactory, BenchmarkSpec, Orchestrator, RemoteFactory, ScriptedFactory,
    SyntheticFactory,
};
use didact_core::store::{
    export_view, load_episodes, write_examples, ExportFilter, ExportView, TrajectoryStore,
};
use didact_core::verify::{ProgramRunner, Verifier};
use serde::Serialize;

use crate::config::{load_config, BackendKind, Config};
use crate::{Cli, Command, LabCommand, ModeArg, RegimeArg, ViewArg};

/// Bad invocation; maps to exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Config file values with command-line overrides applied.
struct Settings {
    config: Config,
    problems: Option<PathBuf>,
    mode: EpisodeMode,
    mode_given: bool,
    max_turns: u32,
    seed: u64,
    workers: usize,
    out: PathBuf,
    store: PathBuf,
    view: ExportView,
}

impl Settings {
    fn resolve(cli: &Cli) -> Result<Self> {
        let config = match &cli.config {
            Some(path) => load_config(path).map_err(|e| usage(format!("{e:#}")))?,
            None => Config::default(),
        };
        let out = cli
            .out
            .clone()
            .or_else(|| config.paths.out.clone())
            .unwrap_or_else(|| PathBuf::from("didact-out"));
        let store = cli
            .store
            .clone()
            .or_else(|| config.paths.store.clone())
            .unwrap_or_else(|| out.join("trajectories.jsonl"));
        let workers = cli.workers.unwrap_or(config.workers);
        if workers == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        let max_turns = cli.max_turns.unwrap_or(config.episode.max_turns);
        if max_turns == 0 {
            return Err(usage("--max-turns must be at least 1"));
        }
        Ok(Self {
            problems: cli
                .problems
                .clone()
                .or_else(|| config.paths.problems.clone()),
            mode: cli.mode.map(mode_of).unwrap_or(config.episode.mode),
            mode_given: cli.mode.is_some(),
            max_turns,
            seed: cli.seed.unwrap_or(config.seed),
            workers,
            store,
            view: match cli.view {
                Some(ViewArg::Worldmodel) => ExportView::Worldmodel,
                _ => ExportView::Student,
            },
            out,
            config,
        })
    }

    fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            max_turns: self.max_turns,
            seed: self.seed,
            generate_feedback_after_final_failure: self
                .config
                .episode
                .generate_feedback_after_final_failure,
        }
    }

    fn problems_path(&self) -> Result<&Path> {
        self.problems
            .as_deref()
            .ok_or_else(|| usage("no problem set: pass --problems or set paths.problems"))
    }

    fn orchestrator(&self) -> Orchestrator {
        let mut verifier = Verifier::new(self.config.verifier.policy.clone());
        if let Some(runner) = &self.config.verifier.runner {
            verifier = verifier.with_runner(ProgramRunner::new(runner.clone()));
        }
        Orchestrator::new(verifier)
    }

    fn factory(&self) -> Result<Box<dyn BackendFactory>> {
        let backend = &self.config.backend;
        Ok(match backend.kind {
            BackendKind::Synthetic => {
                let section = backend.synthetic.clone().unwrap_or_default();
                Box::new(SyntheticFactory {
                    student: section.student,
                    teacher: section.teacher,
                })
            }
            BackendKind::Scripted => {
                let section = backend
                    .scripted
                    .clone()
                    .context("backend.scripted is missing")?;
                Box::new(ScriptedFactory {
                    student: section.student,
                    teacher: section.teacher,
                })
            }
            BackendKind::Remote => {
                let section = backend
                    .remote
                    .as_ref()
                    .context("backend.remote is missing")?;
                Box::new(RemoteFactory {
                    student: remote(&section.student)?,
                    teacher: remote(&section.teacher)?,
                })
            }
        })
    }

    fn create_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))
    }
}

fn remote(endpoint: &EndpointConfig) -> Result<RemoteChat> {
    let key = std::env::var(API_KEY_ENV).unwrap_or_default();
    RemoteChat::new(endpoint.clone(), key, Arc::new(HttpTransport::default()))
        .with_context(|| format!("remote backend {}", endpoint.url))
}

fn mode_of(mode: ModeArg) -> EpisodeMode {
    match mode {
        ModeArg::Didactic => EpisodeMode::Didactic,
        ModeArg::Single => EpisodeMode::SingleTurn,
        ModeArg::Autodidact => EpisodeMode::Autodidact,
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

pub fn dispatch(cli: Cli) -> Result<ExitCode> {
    let settings = Settings::resolve(&cli)?;
    match cli.command {
        Command::Run { problem_id } => run(&settings, &problem_id, cli.store.is_some()),
        Command::Bench => bench(&settings),
        Command::Audit => audit(&settings),
        Command::Export { solved_only } => export(&settings, solved_only),
        Command::Report => report(&settings),
        Command::Lab { command } => lab_command(&settings, command),
    }
}

fn spec(settings: &Settings, problems: Vec<didact_core::orchestrator::Problem>) -> BenchmarkSpec {
    BenchmarkSpec {
        problems,
        episode_config: settings.episode_config(),
        mode: settings.mode,
        worker_limit: settings.workers,
        seed: settings.seed,
    }
}

fn run(settings: &Settings, problem_id: &str, keep: bool) -> Result<ExitCode> {
    let problems = load_problems(settings.problems_path()?)?;
    let Some(problem) = problems.into_iter().find(|p| p.id == problem_id) else {
        return Err(usage(format!("no problem with id `{problem_id}`")));
    };
    let records = settings
        .orchestrator()
        .run_benchmark(&spec(settings, vec![problem]), settings.factory()?.as_ref())?;
    let record = &records[0];
    if keep {
        TrajectoryStore::open(&settings.store)?.record(record)?;
    }
    print_json(record)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct BenchSummary<'a> {
    n: usize,
    mode: &'a str,
    curve: Vec<f64>,
    leak_rate: f64,
    backend_errors: usize,
    store: String,
}

fn bench(settings: &Settings) -> Result<ExitCode> {
    let problems = load_problems(settings.problems_path()?)?;
    if problems.is_empty() {
        bail!("problem set is empty");
    }
    settings.create_out()?;
    let records = settings
        .orchestrator()
        .run_benchmark(&spec(settings, problems), settings.factory()?.as_ref())?;
    let mut store = TrajectoryStore::open(&settings.store)?;
    for record in &records {
        store.record(record)?;
    }
    let curve = cumulative_accuracy(&records, settings.max_turns as usize)?;
    emit_csv(
        &[(settings.mode.slug().to_string(), curve.clone())],
        &settings.out.join("curve.csv"),
    )?;
    let summary = summarize(&records, settings.max_turns as usize)?;
    print_json(&BenchSummary {
        n: summary.n,
        mode: settings.mode.slug(),
        curve: summary.curve,
        leak_rate: summary.leak_rate,
        backend_errors: records
            .iter()
            .filter(|r| matches!(r.termination, Termination::BackendError(_)))
            .count(),
        store: settings.store.display().to_string(),
    })?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct AuditFinding {
    episode_id: String,
    turn_index: u32,
    stage: LeakStage,
    evidence: String,
}

#[derive(Serialize)]
struct AuditReport {
    teacher_turns: usize,
    flagged_turns: usize,
    rate: f64,
    judge: bool,
    judge_unavailable: usize,
    findings: Vec<AuditFinding>,
}

fn audit(settings: &Settings) -> Result<ExitCode> {
    let episodes = load_episodes(&settings.store)
        .with_context(|| format!("loading {}", settings.store.display()))?;
    let mut judge = settings.config.judge.as_ref().map(remote).transpose()?;
    if judge.is_none() {
        log::warn!("no [judge] endpoint configured; running the string stage only");
    }
    let mut report = AuditReport {
        teacher_turns: 0,
        flagged_turns: 0,
        rate: 0.0,
        judge: judge.is_some(),
        judge_unavailable: 0,
        findings: Vec::new(),
    };
    for episode in episodes
        .iter()
        .filter(|e| e.record.mode == EpisodeMode::Didactic)
    {
        let rec = &episode.record;
        let ground_truth = rec.privileged.secrets().join(" | ");
        for u in rec
            .utterances
            .iter()
            .filter(|u| u.role == Role::Teacher && u.turn_index > 0)
        {
            report.teacher_turns += 1;
            let mut flag = detect_leakage(&u.text, &rec.privileged);
            if !flag.flagged {
                if let Some(judge) = judge.as_mut() {
                    flag = judge_hook(&rec.problem_text, &ground_truth, &u.text, judge);
                    if flag.evidence == "judge-unavailable" {
                        report.judge_unavailable += 1;
                    }
                }
            }
            if flag.flagged {
                report.flagged_turns += 1;
                report.findings.push(AuditFinding {
                    episode_id: episode.id.clone(),
                    turn_index: u.turn_index,
                    stage: flag.stage,
                    evidence: flag.evidence,
                });
            }
        }
    }
    if report.teacher_turns > 0 {
        report.rate = report.flagged_turns as f64 / report.teacher_turns as f64;
    }
    settings.create_out()?;
    write_json(&settings.out.join("audit.json"), &report)?;
    println!(
        "{} feedback turns audited, {} flagged (rate {:.6})",
        report.teacher_turns, report.flagged_turns, report.rate
    );
    Ok(ExitCode::SUCCESS)
}

fn export(settings: &Settings, solved_only: bool) -> Result<ExitCode> {
    let episodes = load_episodes(&settings.store)
        .with_context(|| format!("loading {}", settings.store.display()))?;
    let filter = ExportFilter {
        mode: settings.mode_given.then_some(settings.mode),
        solved_only,
    };
    let examples = export_view(&episodes, settings.view, &filter);
    settings.create_out()?;
    let name = match settings.view {
        ExportView::Student => "export-student.jsonl",
        ExportView::Worldmodel => "export-worldmodel.jsonl",
    };
    let path = settings.out.join(name);
    write_examples(&path, &examples)?;
    println!("{} examples written to {}", examples.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn report(settings: &Settings) -> Result<ExitCode> {
    let episodes = load_episodes(&settings.store)
        .with_context(|| format!("loading {}", settings.store.display()))?;
    if episodes.is_empty() {
        bail!("store {} is empty", settings.store.display());
    }
    let records: Vec<EpisodeRecord> = episodes.into_iter().map(|e| e.record).collect();
    let max_turns = records.iter().map(|r| r.max_turns).max().unwrap_or(1) as usize;
    let mut by_mode: BTreeMap<&str, Vec<EpisodeRecord>> = BTreeMap::new();
    for r in &records {
        by_mode.entry(r.mode.slug()).or_default().push(r.clone());
    }
    let curves = by_mode
        .iter()
        .map(|(mode, recs)| Ok((mode.to_string(), cumulative_accuracy(recs, max_turns)?)))
        .collect::<Result<Vec<(String, CumulativeAccuracyCurve)>>>()?;
    settings.create_out()?;
    emit_csv(&curves, &settings.out.join("curve.csv"))?;
    let summary = summarize(&records, max_turns)?;
    write_json(&settings.out.join("summary.json"), &summary)?;
    print_json(&summary)?;
    Ok(ExitCode::SUCCESS)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn lab_command(settings: &Settings, command: LabCommand) -> Result<ExitCode> {
    let max_turns = settings.max_turns as usize;
    match command {
        LabCommand::Train {
            regime,
            n,
            episodes,
            lr,
        } => {
            let config = ToyConfig::new(n, max_turns, settings.seed)?;
            let regime = match regime {
                RegimeArg::Rl2f => Regime::Rl2f,
                RegimeArg::Single => Regime::SingleTurnRl,
            };
            let outcome = lab::train(&config, regime, episodes, lr, settings.seed)?;
            settings.create_out()?;
            write_json(&settings.out.join("theta.json"), &outcome.theta)?;
            let mut csv = String::from("episodes,mean_reward\n");
            for (i, r) in outcome.curve.iter().enumerate() {
                let end = ((i + 1) * lab::CURVE_CHUNK).min(episodes);
                csv.push_str(&format!("{end},{r:.6}\n"));
            }
            fs::write(settings.out.join("learning_curve.csv"), csv)?;
            println!(
                "final training reward {:.4}",
                outcome.curve.last().copied().unwrap_or(0.0)
            );
        }
        LabCommand::Eval {
            theta,
            phi,
            episodes,
        } => {
            let theta: Theta = read_json(&theta)?;
            let config = ToyConfig::new(theta.n, max_turns, settings.seed)?;
            let phi: Option<Phi> = phi.map(|p| read_json(&p)).transpose()?;
            let mode = match settings.mode {
                EpisodeMode::Didactic => ToyMode::Didactic,
                EpisodeMode::SingleTurn => ToyMode::SingleTurn,
                EpisodeMode::Autodidact => match &phi {
                    Some(phi) => ToyMode::AutodidactUsing(phi),
                    None => return Err(usage("autodidact evaluation needs --phi")),
                },
            };
            let curve = lab::evaluate(&theta, mode, &config, episodes, settings.seed)?;
            settings.create_out()?;
            emit_csv(
                &[(settings.mode.slug().to_string(), curve.clone())],
                &settings.out.join("lab_eval.csv"),
            )?;
            print_json(&curve.values)?;
        }
        LabCommand::WorldModel {
            theta,
            n,
            episodes,
            lr,
        } => {
            let config = ToyConfig::new(n, max_turns, settings.seed)?;
            let phi = match theta {
                Some(path) => {
                    let theta: Theta = read_json(&path)?;
                    if theta.n != n {
                        return Err(usage(format!(
                            "policy was trained with n = {}, not {n}",
                            theta.n
                        )));
                    }
                    lab::train_world_model(&config, &theta, episodes, 32, lr)?
                }
                None => lab::train_world_model(&config, &UniformGuess(n), episodes, 32, lr)?,
            };
            settings.create_out()?;
            write_json(&settings.out.join("phi.json"), &phi)?;
            println!(
                "world model written to {}",
                settings.out.join("phi.json").display()
            );
        }
        LabCommand::Gradcheck { instances } => {
            let report = lab::gradcheck(instances, settings.seed)?;
            print_json(&report)?;
            if report.max_rel_error() > GRADCHECK_TOLERANCE {
                eprintln!(
                    "error: gradient check failed (max relative error {:e})",
                    report.max_rel_error()
                );
                return Ok(ExitCode::from(2));
            }
        }
        LabCommand::Ordering {
            n,
            episodes,
            seeds,
            eval_episodes,
            lr,
        } => {
            let report = lab::ordering_experiment(&ExperimentConfig {
                n,
                max_turns,
                train_episodes: episodes,
                eval_episodes,
                world_model_episodes: episodes,
                seeds,
                lr,
                world_model_lr: 2.0,
                base_seed: settings.seed,
            })?;
            settings.create_out()?;
            write_json(&settings.out.join("ordering.json"), &report)?;
            let curves = [
                ("rl2f", &report.mean_rl2f),
                ("single", &report.mean_single_turn),
                ("autodidact", &report.mean_autodidact),
            ]
            .map(|(name, values)| {
                (
                    name.to_string(),
                    CumulativeAccuracyCurve {
                        values: values.clone(),
                        denominator: eval_episodes,
                    },
                )
            });
            emit_csv(&curves, &settings.out.join("ordering.csv"))?;
            println!(
                "rl2f beats single-turn on {}/{} seeds at turn {max_turns} (sign test p = {:.4})",
                report.wins,
                report.wins + report.losses,
                report.sign_test_p
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use didact_core::store::episode_id;

    #[test]
    fn episode_ids_round_trip_through_store() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = EpisodeRecord::new(
            "p",
            "Q",
            didact_core::dialogue::PrivilegedInfo::GroundTruthAnswer("1".into()),
            &EpisodeConfig::new(1, 5),
        )
        .unwrap();
        rec.append_turn(Role::Student, "FINAL ANSWER: 2").unwrap();
        rec.record_verdict(didact_core::verify::Verdict {
            correct: false,
            method: didact_core::verify::VerdictMethod::ExactString,
            detail: String::new(),
        })
        .unwrap();
        rec.finish_exhausted().unwrap();
        let path = dir.path().join("s.jsonl");
        let id = TrajectoryStore::open(&path).unwrap().record(&rec).unwrap();
        assert_eq!(id, episode_id(&rec));
    }
}
