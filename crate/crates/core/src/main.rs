use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dyadic::chunking::plan_chunks;
use dyadic::corpus::{generate_synthetic, Task};
use dyadic::geometry::format_detections;
use dyadic::harness::{
    ablation_suite_observed, evaluate_checkpoint, optimize_split, prepare_task, run_scenario, track_participant, ExperimentConfig,
    MetricsReport,
};
use dyadic::io::write_file;
use dyadic::model::Scenario;
use dyadic::split::balance_report;

#[derive(Parser)]
#[command(name = "dyadic", version, about = "Dyadic personality regression experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict the run to one task.
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    scenario: Option<Scenario>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (to the configured corpus path unless --out-dir is given).
    GenSynthetic(Common),
    /// Optimize the session split; writes split.csv and balance.csv.
    Split(Common),
    /// Track both faces of every recording; writes one detection file per track.
    Track(Common),
    /// Chunk and featurize recordings; writes chunks.csv with feature summaries.
    Chunk(Common),
    /// Train the configured scenario; writes a run directory per task.
    Train(Common),
    /// Score a checkpoint on the test split; writes eval.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out-dir>/<task>/best.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run every scenario on every task; writes ablation.csv, ablation_rows.csv and ablation.txt.
    Ablate(Common),
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(task) = self.task {
            cfg.tasks = vec![task];
        }
        if let Some(scenario) = self.scenario {
            cfg.scenario = scenario;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, text.as_bytes())?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn gen_synthetic(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let dir = common.out_dir.clone().unwrap_or_else(|| cfg.paths.corpus.clone());
    let corpus = generate_synthetic(&cfg.synthetic, cfg.seed)?;
    corpus.write(&dir)?;
    eprintln!("wrote {} sessions and {} media files to {}", corpus.manifest.sessions.len(), corpus.files.len(), dir.display());
    Ok(())
}

fn split(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let (manifest, _) = cfg.load_corpus()?;
    let assignment = optimize_split(&manifest, &cfg.split, cfg.seed)?;
    let out = common.out_dir();
    write_text(&out.join("split.csv"), &assignment.to_csv())?;
    write_text(&out.join("balance.csv"), &balance_report(&assignment, &manifest.session_records(), &cfg.split.weights))?;
    Ok(())
}

fn track(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let (manifest, media) = cfg.load_corpus()?;
    let out = common.out_dir().join("tracks");
    for session in &manifest.sessions {
        for &task in &cfg.tasks {
            let Some(rec) = session.task(task) else { continue };
            for i in 0..2 {
                let track = track_participant(session, rec, i, &media)?;
                let path = out.join(format!("{}_{}_{i}.det", session.id, task));
                write_file(&path, format_detections(track.boxes()).as_bytes())?;
            }
        }
    }
    eprintln!("wrote tracks to {}", out.display());
    Ok(())
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn chunk(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let (manifest, media) = cfg.load_corpus()?;
    let backbones = dyadic::backbones::BackboneSet::stubs(cfg.seed)?;
    let mut w = csv::Writer::from_writer(vec![]);
    w.write_record(["task", "session", "participant", "chunk", "start", "end", "face_mean", "local_mean", "extended_mean", "audio_mean"])?;
    for &task in &cfg.tasks {
        for s in prepare_task(&manifest, &media, task, &backbones, &cfg.normalization, cfg.geometry)? {
            let rec = manifest.sessions.iter().find(|e| e.id == s.session).and_then(|e| e.task(task)).expect("sample from manifest");
            let range = plan_chunks(rec.frame_count)?[s.chunk_index];
            let f = &s.sample.input.features;
            let stats = [&f.face, &f.local, &f.extended, &f.audio].map(|t| format!("{:.6}", mean(&t.to_vec())));
            let mut row = vec![task.to_string(), s.session, s.participant, s.chunk_index.to_string(), range.start.to_string(), range.end.to_string()];
            row.extend(stats);
            w.write_record(&row)?;
        }
    }
    write_text(&common.out_dir().join("chunks.csv"), &String::from_utf8(w.into_inner()?)?)
}

fn train(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out_dir();
    let mut report = MetricsReport::default();
    for &task in &cfg.tasks {
        let run_dir = out.join(task.name());
        let row = run_scenario(&cfg, task, Some(&run_dir))?;
        eprintln!("{task} {}: avg MSE {:.4}", cfg.scenario, row.avg);
        report.rows.push(row);
    }
    write_text(&out.join("metrics.csv"), &report.to_csv())
}

fn eval(common: &Common, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = common.config()?;
    let out = common.out_dir();
    if checkpoint.is_some() && cfg.tasks.len() > 1 {
        bail!("--checkpoint needs a single task; pass --task");
    }
    let mut report = MetricsReport::default();
    for &task in &cfg.tasks {
        let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out.join(task.name()).join("best.ckpt"));
        let row = evaluate_checkpoint(&cfg, task, &path).with_context(|| format!("evaluating {}", path.display()))?;
        report.rows.push(row);
    }
    print!("{}", report.to_csv());
    write_text(&out.join("eval.csv"), &report.to_csv())
}

fn ablate(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let report = ablation_suite_observed(&cfg, |row| eprintln!("{} {}: avg MSE {:.4}", row.task, row.scenario, row.avg))?;
    let out = common.out_dir();
    write_text(&out.join("ablation.csv"), &report.to_table_csv())?;
    write_text(&out.join("ablation_rows.csv"), &report.to_csv())?;
    write_text(&out.join("ablation.txt"), &report.to_text_table())?;
    print!("{}", report.to_text_table());
    Ok(())
}

fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenSynthetic(c) => gen_synthetic(c),
        Command::Split(c) => split(c),
        Command::Track(c) => track(c),
        Command::Chunk(c) => chunk(c),
        Command::Train(c) => train(c),
        Command::Eval { common, checkpoint } => eval(common, checkpoint.as_deref()),
        Command::Ablate(c) => ablate(c),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
