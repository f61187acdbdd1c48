//! `locoman` command-line tool.
//!
//! Exit codes: 0 on success, 1 when a run or check fails, 2 on usage or
//! configuration errors.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use locoman_core::attention::{load_embedding_bank, synth_embedding_bank, EmbeddingBank};
use locoman_core::demos::{build_policy_dataset, load_episode, save_episode, Episode};
use locoman_core::harness::{
    compare_modes, replay_check, run_scenario, run_trial, EpisodeOrigin, RunOptions, Scenario, Setup, TrialOptions,
};
use locoman_core::planner::plan;
use locoman_core::ControlMode;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "locoman", version, about = "Loco-manipulation simulation, planning and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one trial of a scenario and print its result.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 0)]
        trial: usize,
        #[arg(long)]
        json: bool,
    },
    /// Run trials autonomously and save one episode per skill invocation.
    Record {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
        /// Also store the policy feature vector of every frame.
        #[arg(long)]
        with_features: bool,
    },
    /// Summarize an episode; with --check, re-run it and compare.
    Replay {
        #[arg(long)]
        episode: PathBuf,
        /// Scenario file; defaults to configs/scenarios/<name>.toml.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        check: bool,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
    /// Print an episode's metadata and per-frame summary.
    Inspect {
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        frames: bool,
    },
    /// Build a chunked nearest-neighbour policy from episodes.
    TrainPolicy {
        /// Episode files or directories of `.bin` episodes.
        #[arg(long, required = true, num_args = 1..)]
        episodes: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        chunk_size: usize,
        #[arg(long, default_value_t = 0.1)]
        ensemble_decay: f64,
        #[arg(long, default_value_t = 1)]
        neighbors: usize,
    },
    /// Plan a scenario's instruction on its scene graph.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's instruction.
        #[arg(long)]
        instruction: Option<String>,
        #[arg(long)]
        start: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Run all trials of a scenario and write a report.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        trials: Option<usize>,
        /// Report file (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a scenario once per control mode.
    CompareModes {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "whole_body,decoupled,arm_only")]
        modes: Vec<ControlMode>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        nominal: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic embedding bank from a label list.
    SynthEmbeddings {
        /// One label per line; blank lines and `#` comments are skipped.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print an embedding bank's labels and largest pairwise cosine.
    InspectEmbeddings {
        #[arg(long)]
        bank: PathBuf,
    },
    /// Serve the live simulator over WebSocket at /teleop.
    Serve {
        /// Scenario file supplying robot, world and embeddings.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory recorded episodes are written to.
        #[arg(long, default_value = "episodes")]
        episodes: PathBuf,
        /// Advance one tick per controller `input` or `step` frame instead of
        /// ticking in real time.
        #[arg(long)]
        lockstep: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<ControlMode>,
    /// Disable perturbations.
    #[arg(long)]
    nominal: bool,
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

type Outcome = Result<(), Failure>;

trait ConfigContext<T> {
    fn config(self) -> Result<T, Failure>;
    fn run(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ConfigContext<T> for Result<T, E> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Config(e.into()))
    }
    fn run(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Run(e.into()))
    }
}

fn load_setup(path: &Path, seed: Option<u64>) -> Result<Setup, Failure> {
    let mut scenario = Scenario::load(path)
        .with_context(|| format!("loading scenario {}", path.display()))
        .config()?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    Setup::load(scenario).config()
}

fn write_out(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).run()?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).run()
}

fn simulate(run: RunArgs, trial: usize, json: bool) -> Outcome {
    let setup = load_setup(&run.scenario, run.seed)?;
    let opts = TrialOptions {
        mode: run.mode,
        nominal: run.nominal,
        ..Default::default()
    };
    let outcome = run_trial(&setup, trial, &opts).run()?;
    let r = &outcome.result;
    if json {
        println!("{}", serde_json::to_string_pretty(r).run()?);
    } else {
        for s in &r.steps {
            println!(
                "{:<36} {:>8.2} → {:>8.2}  end at {}",
                s.step,
                s.start_time,
                s.end_time,
                s.termination_index.map_or("-".into(), |i| i.to_string())
            );
        }
        match &r.failure_stage {
            None => println!("success in {:.2} s", r.sim_time),
            Some(stage) => println!("failed at {stage}: {}", r.failure_reason.as_deref().unwrap_or("")),
        }
    }
    Ok(())
}

fn record(run: RunArgs, out: PathBuf, trials: Option<usize>, with_features: bool) -> Outcome {
    let setup = load_setup(&run.scenario, run.seed)?;
    let opts = TrialOptions {
        mode: run.mode,
        nominal: run.nominal,
        record: true,
        record_features: with_features,
    };
    fs::create_dir_all(&out).run()?;
    let mut saved = 0;
    for trial in 0..trials.unwrap_or(setup.scenario.trials) {
        let outcome = run_trial(&setup, trial, &opts).run()?;
        for (i, ep) in outcome.episodes.iter().enumerate() {
            let path = out.join(format!("{}_t{trial:03}_e{i:02}_{}.bin", setup.scenario.name, ep.skill));
            save_episode(ep, &path).run()?;
            println!("{} ({} frames, success {})", path.display(), ep.len(), ep.metadata.success);
            saved += 1;
        }
    }
    println!("{saved} episodes written to {}", out.display());
    Ok(())
}

fn replay(episode: PathBuf, scenario: Option<PathBuf>, check: bool, tolerance: f64) -> Outcome {
    let ep = load_episode(&episode).config()?;
    println!("{}: skill {}, {} frames", episode.display(), ep.skill, ep.len());
    if !check {
        return Ok(());
    }
    let path = match scenario {
        Some(p) => p,
        None => {
            let origin = EpisodeOrigin::parse(&ep.metadata.scene_id)
                .ok_or_else(|| anyhow!("scene id `{}` does not name a scenario", ep.metadata.scene_id))
                .config()?;
            PathBuf::from("configs/scenarios").join(format!("{}.toml", origin.scenario))
        }
    };
    let setup = load_setup(&path, None)?;
    let check = replay_check(&setup, &ep, tolerance).run()?;
    println!(
        "{} frames, max action error {:.3e}, max proprio error {:.3e} (tolerance {:.0e})",
        check.frames, check.max_action_error, check.max_proprio_error, check.tolerance
    );
    if check.matches {
        println!("replay matches");
        Ok(())
    } else {
        Err(Failure::Run(anyhow!("replay diverges from the recording")))
    }
}

fn inspect(path: PathBuf, frames: bool) -> Outcome {
    let ep = load_episode(&path).config()?;
    let m = &ep.metadata;
    println!("skill         {}", ep.skill);
    println!("text queries  {:?}", ep.text_queries);
    println!("frames        {}", ep.len());
    println!("label buffer  {}", ep.label_buffer);
    println!("scene         {}", m.scene_id);
    println!("operator      {}", m.operator_id);
    println!("seed          {}", m.seed);
    println!("success       {}", m.success);
    if let (Some(first), Some(last)) = (ep.frames.first(), ep.frames.last()) {
        println!("duration      {:.3} s", last.timestamp - first.timestamp);
        let cams: Vec<_> = first.observation.cameras.iter().map(|c| c.camera).collect();
        println!("cameras       {cams:?}");
    }
    if frames {
        for (i, f) in ep.frames.iter().enumerate() {
            let b = &f.action.base;
            println!(
                "{i:>5} t={:>8.3} base=({:+.3}, {:+.3}, {:+.3}) ee={} gripper={:?} end={}",
                f.timestamp,
                b.linear_velocity.x,
                b.linear_velocity.y,
                b.angular_velocity,
                if f.action.ee_target.is_some() { "set" } else { "hold" },
                f.action.gripper,
                f.end_signal_label
            );
        }
    }
    Ok(())
}

fn collect_episodes(paths: &[PathBuf]) -> Result<Vec<Episode>, Failure> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(p)
                .run()?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "bin"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    files.iter().map(|f| load_episode(f).with_context(|| format!("loading {}", f.display())).config()).collect()
}

fn train_policy(episodes: Vec<PathBuf>, out: PathBuf, chunk_size: usize, decay: f64, neighbors: usize) -> Outcome {
    let episodes = collect_episodes(&episodes)?;
    let policy = build_policy_dataset(&episodes, chunk_size, decay, neighbors).config()?;
    policy.save(&out).run()?;
    println!(
        "policy `{}` with {} entries from {} episodes → {}",
        policy.skill,
        policy.entries.len(),
        episodes.len(),
        out.display()
    );
    Ok(())
}

fn plan_cmd(path: PathBuf, instruction: Option<String>, start: Option<String>, json: bool) -> Outcome {
    let setup = load_setup(&path, None)?;
    let graph = setup.scene.build().config()?;
    let instruction = instruction.unwrap_or_else(|| setup.scenario.instruction.clone());
    let start = start.unwrap_or_else(|| setup.scenario.start_node.clone());
    let p = plan(&instruction, &graph, &setup.skills, setup.evaluator.as_ref(), &start, &setup.scenario.planner).run()?;
    if json {
        println!("{}", serde_json::to_string_pretty(&p).run()?);
        return Ok(());
    }
    println!("instruction: {instruction}");
    for f in &p.fragments {
        println!(
            "{:<32} skill {:<10} goal {:<14} likelihood {:.2} path {}",
            f.task,
            f.skill,
            f.goal,
            f.likelihood,
            f.path.join(" → ")
        );
    }
    Ok(())
}

fn evaluate(run: RunArgs, trials: Option<usize>, out: Option<PathBuf>) -> Outcome {
    let setup = load_setup(&run.scenario, run.seed)?;
    let opts = RunOptions {
        mode: run.mode,
        nominal: run.nominal,
        trials,
    };
    let report = run_scenario(&setup, &opts).run()?;
    print!("{}", report.table());
    if let Some(out) = out {
        write_out(&out, &report.to_json())?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn compare(
    path: PathBuf,
    modes: Vec<ControlMode>,
    trials: Option<usize>,
    seed: Option<u64>,
    nominal: bool,
    out: Option<PathBuf>,
) -> Outcome {
    let setup = load_setup(&path, seed)?;
    let opts = RunOptions {
        mode: None,
        nominal,
        trials,
    };
    let cmp = compare_modes(&setup, &modes, &opts).run()?;
    print!("{}", cmp.table());
    if let Some(out) = out {
        write_out(&out, &cmp.to_json())?;
        println!("report written to {}", out.display());
    }
    Ok(())
}

fn synth(labels: PathBuf, dim: usize, seed: u64, out: PathBuf) -> Outcome {
    let text = fs::read_to_string(&labels)
        .with_context(|| format!("reading {}", labels.display()))
        .config()?;
    let labels: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect();
    let bank = synth_embedding_bank(&labels, dim, seed).config()?;
    bank.save(&out).run()?;
    println!("{} labels, dim {dim} → {}", bank.len(), out.display());
    Ok(())
}

fn max_cosine(bank: &EmbeddingBank) -> Option<(f64, &str, &str)> {
    let labels = bank.labels();
    let mut best: Option<(f64, &str, &str)> = None;
    for (i, a) in labels.iter().enumerate() {
        for b in &labels[i + 1..] {
            let (u, v) = (bank.vector(a)?, bank.vector(b)?);
            let dot: f64 = u.iter().zip(v).map(|(x, y)| x * y).sum();
            let n = u.iter().map(|x| x * x).sum::<f64>().sqrt() * v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let c = (dot / n).abs();
            if best.map_or(true, |(m, _, _)| c > m) {
                best = Some((c, a, b));
            }
        }
    }
    best
}

fn inspect_embeddings(path: PathBuf) -> Outcome {
    let bank = load_embedding_bank(&path).config()?;
    println!("{}: {} labels, dim {}, {:?}", path.display(), bank.len(), bank.dim(), bank.provenance());
    for l in bank.labels() {
        println!("  {l}");
    }
    if let Some((c, a, b)) = max_cosine(&bank) {
        println!("largest |cosine| {c:.3} between `{a}` and `{b}`");
    }
    Ok(())
}

fn serve(config: PathBuf, host: String, port: u16, episodes: PathBuf, lockstep: bool) -> Outcome {
    let setup = load_setup(&config, None)?;
    let mut service = locoman_teleop::ServiceConfig::from_setup(&setup, episodes).config()?;
    service.lockstep = lockstep;
    let addr = format!("{host}:{port}");
    let rt = tokio::runtime::Runtime::new().run()?;
    rt.block_on(async move {
        let server = locoman_teleop::serve(service, &addr).await?;
        println!("serving ws://{}/teleop", server.local_addr());
        server.wait().await
    })
    .run()
}

/// Error chain with causes already quoted by their parent left out.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { run, trial, json } => simulate(run, trial, json),
        Command::Record {
            run,
            out,
            trials,
            with_features,
        } => record(run, out, trials, with_features),
        Command::Replay {
            episode,
            scenario,
            check,
            tolerance,
        } => replay(episode, scenario, check, tolerance),
        Command::Inspect { episode, frames } => inspect(episode, frames),
        Command::TrainPolicy {
            episodes,
            out,
            chunk_size,
            ensemble_decay,
            neighbors,
        } => train_policy(episodes, out, chunk_size, ensemble_decay, neighbors),
        Command::Plan {
            scenario,
            instruction,
            start,
            json,
        } => plan_cmd(scenario, instruction, start, json),
        Command::Evaluate { run, trials, out } => evaluate(run, trials, out),
        Command::CompareModes {
            scenario,
            modes,
            trials,
            seed,
            nominal,
            out,
        } => compare(scenario, modes, trials, seed, nominal, out),
        Command::SynthEmbeddings { labels, dim, seed, out } => synth(labels, dim, seed, out),
        Command::InspectEmbeddings { bank } => inspect_embeddings(bank),
        Command::Serve {
            config,
            port,
            host,
            episodes,
            lockstep,
        } => serve(config, host, port, episodes, lockstep),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {}", describe(&e));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
