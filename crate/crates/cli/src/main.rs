//! `mecc` — single-binary driver for the matched-embeddings cascade:
//! corpus generation, the five training stages, evaluation, decoding,
//! checkpoint inspection, and a static metrics report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use mecc_core::checkpoint::{self, CheckpointMeta};
use mecc_core::config::RunConfig;
use mecc_core::data::{self, Example};
use mecc_core::metrics::EvalReport;
use mecc_core::model::{Cascade, CascadeMode, Models};
use mecc_core::params::ParamStore;
use mecc_core::tensor::Dtype;
use mecc_core::train::{self, StageStats};
use mecc_core::Error;

#[derive(Parser)]
#[command(name = "mecc", about = "matched-embeddings cascade speech translation, desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Transcript,
    OneBest,
    Matched,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Init {
    Matcher,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and a content-hash manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the CTC speech recognizer on task speech.
    TrainAsr {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the base MT model on base-distribution text.
    TrainMt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue MT training on task-distribution text.
    AdaptMt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mt_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the exporter under L2 loss with ASR and MT frozen.
    TrainMatcher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        asr_ckpt: PathBuf,
        #[arg(long)]
        mt_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the exporter with CE through the frozen MT decoder.
    FinetuneExporter {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        asr_ckpt: PathBuf,
        #[arg(long)]
        mt_ckpt: PathBuf,
        /// Combined checkpoint providing exporter weights (required for
        /// --init matcher).
        #[arg(long)]
        exporter_ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "matcher")]
        init: Init,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a split; prints metric records as JSON lines.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Combined checkpoint (asr.* + mt.* + exporter.*).
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "task.dev")]
        split: String,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Replace the exporter with the exact embedding lookup.
        #[arg(long)]
        identity_exporter: bool,
        /// Score only the first N utterances.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Decode one stored utterance.
    Decode {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "task.dev")]
        split: String,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum, default_value = "matched")]
        mode: Mode,
        #[arg(long)]
        identity_exporter: bool,
    },
    /// List parameter names, shapes, frozen flags, and hashes.
    InspectCkpt {
        #[arg(long)]
        path: PathBuf,
    },
    /// Static summary: last value per (stage, split, metric).
    Report {
        /// metrics.jsonl files to aggregate.
        #[arg(long, num_args = 1..)]
        metrics: Vec<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::from_path(p),
        None => Ok(RunConfig::default_config()),
    }
}

/// ".failed" marker covering an output directory: created before any
/// partial output, removed only on success.
struct FailGuard {
    marker: PathBuf,
}

impl FailGuard {
    fn arm(out: &Path) -> Result<FailGuard, Error> {
        fs::create_dir_all(out)?;
        let marker = out.join(".failed");
        fs::write(&marker, b"run did not complete\n")?;
        Ok(FailGuard { marker })
    }

    fn disarm(self) -> Result<(), Error> {
        fs::remove_file(&self.marker)?;
        Ok(())
    }
}

fn write_resolved_config(out: &Path, run: &RunConfig) -> Result<(), Error> {
    fs::write(out.join("config.toml"), run.to_toml())?;
    Ok(())
}

fn split_path(data: &Path, name: &str) -> PathBuf {
    data.join(format!("{name}.mecd"))
}

fn load_split(data: &Path, name: &str) -> Result<Vec<Example>, Error> {
    let path = split_path(data, name);
    let mut f = fs::File::open(&path)
        .map_err(|e| Error::Data(format!("cannot open split {}: {e}", path.display())))?;
    data::read_split(&mut f)
}

fn build_models(run: &RunConfig) -> Result<(ParamStore, Models, Dtype), Error> {
    let dtype = run.model.dtype()?;
    let (store, models) = Models::init(&run.model, &run.data.synth, run.seed, dtype);
    Ok((store, models, dtype))
}

/// Copy every parameter of a checkpoint into the freshly built store,
/// carrying frozen flags. Unknown names or shape mismatches are
/// checkpoint errors (wrong architecture or vocab).
fn overlay(store: &mut ParamStore, path: &Path) -> Result<CheckpointMeta, Error> {
    let ckpt = checkpoint::load(path)?;
    for (name, param) in ckpt.params.iter() {
        if !store.contains(name) {
            return Err(Error::Checkpoint(format!(
                "{}: unknown parameter {name} (architecture mismatch)",
                path.display()
            )));
        }
        if store.get(name).tensor.shape != param.tensor.shape {
            return Err(Error::Checkpoint(format!(
                "{}: shape mismatch for {name}: {:?} vs {:?}",
                path.display(),
                store.get(name).tensor.shape,
                param.tensor.shape
            )));
        }
        store.set_tensor(name, param.tensor.clone());
        store.set_frozen(name, param.frozen);
    }
    Ok(ckpt.meta)
}

fn write_metrics(out: &Path, stats: &StageStats) -> Result<(), Error> {
    let mut f = fs::File::create(out.join("metrics.jsonl"))?;
    for r in &stats.reports {
        r.write_jsonl(&mut f)?;
    }
    Ok(())
}

fn save_stage(
    out: &Path,
    run: &RunConfig,
    stage: &str,
    seed: u64,
    stats: &StageStats,
    params: &ParamStore,
) -> Result<(), Error> {
    let meta = CheckpointMeta {
        stage: stage.to_string(),
        step: stats.steps,
        seed,
        config_hash: run.hash(),
    };
    checkpoint::save(&out.join(format!("{stage}.ckpt")), &meta, params)?;
    write_metrics(out, stats)?;
    write_resolved_config(out, run)?;
    println!(
        "{stage}: {} steps, {} skipped, loss {:.4} -> {:.4}",
        stats.steps, stats.skipped, stats.first_loss, stats.final_loss
    );
    Ok(())
}

fn gen_data(config: &Option<PathBuf>, out: &Path) -> Result<(), Error> {
    let run = load_config(config)?;
    let guard = FailGuard::arm(out)?;
    let corpus = data::make_corpus(&run.data.synth, run.data.base_sizes, run.data.task_sizes)?;
    let mut files = BTreeMap::new();
    for (name, examples) in &corpus.splits {
        let path = split_path(out, name);
        let mut f = fs::File::create(&path)?;
        data::write_split(&mut f, examples)?;
        drop(f);
        files.insert(name.clone(), data::file_sha256(&path)?);
    }
    let mut combined = String::new();
    for (name, hash) in &files {
        combined.push_str(name);
        combined.push(':');
        combined.push_str(hash);
        combined.push('\n');
    }
    let manifest = serde_json::json!({
        "config_hash": run.hash(),
        "files": files,
        "manifest_hash": data::bytes_sha256(combined.as_bytes()),
    });
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())?;
    write_resolved_config(out, &run)?;
    guard.disarm()?;
    println!("wrote {} splits to {}", corpus.splits.len(), out.display());
    Ok(())
}

fn train_asr_cmd(config: &Option<PathBuf>, data_dir: &Path, out: &Path) -> Result<(), Error> {
    let run = load_config(config)?;
    let guard = FailGuard::arm(out)?;
    let (mut store, models, dtype) = build_models(&run)?;
    let train_split = load_split(data_dir, "task.train")?;
    let dev_split = load_split(data_dir, "task.dev")?;
    let stats = train::train_asr(&models, &mut store, &train_split, &dev_split, &run.asr, 0.0, dtype)?;
    save_stage(out, &run, "asr", run.asr.seed, &stats, &store.subset("asr."))?;
    guard.disarm()
}

fn train_mt_cmd(config: &Option<PathBuf>, data_dir: &Path, out: &Path) -> Result<(), Error> {
    let run = load_config(config)?;
    let guard = FailGuard::arm(out)?;
    let (mut store, models, dtype) = build_models(&run)?;
    let train_split = load_split(data_dir, "base.train")?;
    let dev_split = load_split(data_dir, "base.dev")?;
    let stats = train::train_mt(
        &models,
        &mut store,
        &train_split,
        &dev_split,
        &run.mt,
        run.model.label_smoothing,
        "mt",
        dtype,
    )?;
    save_stage(out, &run, "mt", run.mt.seed, &stats, &store.subset("mt."))?;
    guard.disarm()
}

fn adapt_mt_cmd(
    config: &Option<PathBuf>,
    data_dir: &Path,
    mt_ckpt: &Path,
    out: &Path,
) -> Result<(), Error> {
    let run = load_config(config)?;
    let guard = FailGuard::arm(out)?;
    let (mut store, models, dtype) = build_models(&run)?;
    overlay(&mut store, mt_ckpt)?;
    let train_split = load_split(data_dir, "task.train")?;
    let dev_split = load_split(data_dir, "task.dev")?;
    let stats = train::train_mt(
        &models,
        &mut store,
        &train_split,
        &dev_split,
        &run.mt_adapt,
        run.model.label_smoothing,
        "mt_adapt",
        dtype,
    )?;
    save_stage(out, &run, "mt_adapt", run.mt_adapt.seed, &stats, &store.subset("mt."))?;
    guard.disarm()
}

fn train_matcher_cmd(
    config: &Option<PathBuf>,
    data_dir: &Path,
    asr_ckpt: &Path,
    mt_ckpt: &Path,
    out: &Path,
) -> Result<(), Error> {
    let run = load_config(config)?;
    let guard = FailGuard::arm(out)?;
    let (mut store, models, dtype) = build_models(&run)?;
    overlay(&mut store, asr_ckpt)?;
    overlay(&mut store, mt_ckpt)?;
    let train_split = load_split(data_dir, "task.train")?;
    let dev_split = load_split(data_dir, "task.dev")?;
    let stats =
        train::train_matcher(&models, &mut store, &train_split, &dev_split, &run.matcher, dtype)?;
    // combined checkpoint: the cascade is self-contained from here on
    save_stage(out, &run, "matcher", run.matcher.stage.seed, &stats, &store)?;
    guard.disarm()
}

fn finetune_cmd(
    config: &Option<PathBuf>,
    data_dir: &Path,
    asr_ckpt: &Path,
    mt_ckpt: &Path,
    exporter_ckpt: &Option<PathBuf>,
    init: Init,
    out: &Path,
) -> Result<(), Error> {
    let run = load_config(config)?;
    let guard = FailGuard::arm(out)?;
    let (mut store, models, dtype) = build_models(&run)?;
    overlay(&mut store, asr_ckpt)?;
    overlay(&mut store, mt_ckpt)?;
    match (init, exporter_ckpt) {
        (Init::Matcher, Some(p)) => {
            let ckpt = checkpoint::load(p)?;
            let mut sub = ParamStore::new();
            for (name, param) in ckpt.params.iter() {
                if name.starts_with("exporter.") {
                    sub.insert(name, param.tensor.clone());
                }
            }
            if sub.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "{}: no exporter.* parameters",
                    p.display()
                )));
            }
            for name in sub.names() {
                store.set_tensor(&name, sub.get(&name).tensor.clone());
            }
        }
        (Init::Matcher, None) => {
            return Err(Error::Config("--init matcher requires --exporter-ckpt".into()));
        }
        (Init::Random, _) => {} // keep the seeded random init
    }
    let train_split = load_split(data_dir, "task.train")?;
    let dev_split = load_split(data_dir, "task.dev")?;
    let stats = train::finetune_exporter(
        &models,
        &mut store,
        &train_split,
        &dev_split,
        &run.exporter_ast,
        run.model.label_smoothing,
        dtype,
    )?;
    save_stage(out, &run, "exporter_ast", run.exporter_ast.seed, &stats, &store)?;
    guard.disarm()
}

fn evaluate_cmd(
    config: &Option<PathBuf>,
    data_dir: &Path,
    ckpt: &Path,
    split: &str,
    mode: Mode,
    identity_exporter: bool,
    limit: Option<usize>,
) -> Result<(), Error> {
    let run = load_config(config)?;
    let (mut store, models, dtype) = build_models(&run)?;
    let meta = overlay(&mut store, ckpt)?;
    let examples = load_split(data_dir, split)?;
    let n = limit.unwrap_or(examples.len()).min(examples.len());
    let examples = &examples[..n];
    let beam = run.model.beam_size;
    let mut rows: Vec<(String, f64)> = Vec::new();
    match mode {
        Mode::Transcript => {
            rows.push(("bleu_transcript".into(), train::transcript_bleu(&models, &store, examples, beam, dtype)?));
        }
        Mode::OneBest => {
            rows.push(("wer".into(), train::dev_wer(&models, &store, examples, dtype)));
            let (bleu, empty) = train::cascade_bleu(
                &models, &store, examples, CascadeMode::OneBest, beam, false, dtype,
            )?;
            rows.push(("bleu_one_best".into(), bleu));
            rows.push(("empty_reductions".into(), empty as f64));
        }
        Mode::Matched => {
            rows.push(("wer".into(), train::dev_wer(&models, &store, examples, dtype)));
            let (bleu, empty) = train::cascade_bleu(
                &models, &store, examples, CascadeMode::Matched, beam, identity_exporter, dtype,
            )?;
            rows.push(("bleu_matched".into(), bleu));
            rows.push(("empty_reductions".into(), empty as f64));
            let mcfg = mecc_core::config::MatcherConfig {
                stage: run.matcher.stage.clone(),
                tau: run.matcher.tau,
                reference_targets: run.matcher.reference_targets,
                identity_exporter,
            };
            if let Some(l2) = train::dev_l2_per_token(&models, &store, examples, &mcfg, dtype) {
                rows.push(("l2_per_token".into(), l2));
            }
        }
    }
    let mut stdout = std::io::stdout();
    for (metric, value) in rows {
        let report = EvalReport {
            step: meta.step,
            stage: meta.stage.clone(),
            split: split.to_string(),
            metric,
            value,
            utterances: n as u64,
            skipped: 0,
        };
        report.write_jsonl(&mut stdout)?;
    }
    Ok(())
}

fn decode_cmd(
    config: &Option<PathBuf>,
    data_dir: &Path,
    ckpt: &Path,
    split: &str,
    index: usize,
    mode: Mode,
    identity_exporter: bool,
) -> Result<(), Error> {
    let run = load_config(config)?;
    let (mut store, models, dtype) = build_models(&run)?;
    overlay(&mut store, ckpt)?;
    let examples = load_split(data_dir, split)?;
    let ex = examples
        .get(index)
        .ok_or_else(|| Error::Data(format!("index {index} out of range for split {split}")))?;
    match mode {
        Mode::Transcript => {
            let cascade = Cascade::new(&models, &store, run.model.beam_size, dtype);
            println!("source tokens: {:?}", ex.src_tokens);
            println!("translation:   {:?}", cascade.translate_tokens(&ex.src_tokens));
        }
        Mode::OneBest | Mode::Matched => {
            if !ex.has_frames() {
                return Err(Error::Data(format!("split {split} has no frames")));
            }
            let mut cascade = Cascade::new(&models, &store, run.model.beam_size, dtype);
            cascade.identity_exporter = identity_exporter;
            let cmode = if matches!(mode, Mode::OneBest) { CascadeMode::OneBest } else { CascadeMode::Matched };
            let out = cascade.translate(&ex.frames, cmode);
            println!("reference src: {:?}", ex.src_tokens);
            println!("reduced tokens: {:?}", out.reduced.tokens);
            println!("frame indices:  {:?}", out.reduced.frames);
            if out.empty_input {
                println!("translation:    <empty reduction>");
            } else {
                println!("translation:    {:?}", out.translation);
            }
            println!("reference tgt:  {:?}", train::content(&ex.tgt_tokens));
        }
    }
    Ok(())
}

fn inspect_cmd(path: &Path) -> Result<(), Error> {
    let ckpt = checkpoint::load(path)?;
    println!(
        "stage={} step={} seed={} config_hash={} params={}",
        ckpt.meta.stage,
        ckpt.meta.step,
        ckpt.meta.seed,
        ckpt.meta.config_hash,
        ckpt.params.len()
    );
    for info in checkpoint::inspect(&ckpt) {
        println!(
            "{:40} {:>12} {:4} frozen={} {}",
            info.name,
            format!("{:?}", info.shape),
            format!("{:?}", info.dtype),
            info.frozen,
            info.hash
        );
    }
    Ok(())
}

fn report_cmd(metrics: &[PathBuf]) -> Result<(), Error> {
    // keep the record with the highest step per (stage, split, metric)
    let mut last: BTreeMap<(String, String, String), (u64, f64)> = BTreeMap::new();
    for path in metrics {
        let text = fs::read_to_string(path)?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let v: serde_json::Value = serde_json::from_str(line)
                .map_err(|e| Error::Data(format!("{}: bad metrics line: {e}", path.display())))?;
            let key = (
                v["stage"].as_str().unwrap_or("?").to_string(),
                v["split"].as_str().unwrap_or("?").to_string(),
                v["metric"].as_str().unwrap_or("?").to_string(),
            );
            let step = v["step"].as_u64().unwrap_or(0);
            let value = v["value"].as_f64().unwrap_or(f64::NAN);
            match last.get(&key) {
                Some((s, _)) if *s > step => {}
                _ => {
                    last.insert(key, (step, value));
                }
            }
        }
    }
    println!("{:<14} {:<10} {:<16} {:>8} {:>12}", "stage", "split", "metric", "step", "value");
    for ((stage, split, metric), (step, value)) in &last {
        println!("{stage:<14} {split:<10} {metric:<16} {step:>8} {value:>12.4}");
    }
    Ok(())
}

fn run(cmd: Command) -> Result<(), Error> {
    match cmd {
        Command::GenData { config, out } => gen_data(&config, &out),
        Command::TrainAsr { config, data, out } => train_asr_cmd(&config, &data, &out),
        Command::TrainMt { config, data, out } => train_mt_cmd(&config, &data, &out),
        Command::AdaptMt { config, data, mt_ckpt, out } => adapt_mt_cmd(&config, &data, &mt_ckpt, &out),
        Command::TrainMatcher { config, data, asr_ckpt, mt_ckpt, out } => {
            train_matcher_cmd(&config, &data, &asr_ckpt, &mt_ckpt, &out)
        }
        Command::FinetuneExporter { config, data, asr_ckpt, mt_ckpt, exporter_ckpt, init, out } => {
            finetune_cmd(&config, &data, &asr_ckpt, &mt_ckpt, &exporter_ckpt, init, &out)
        }
        Command::Evaluate { config, data, ckpt, split, mode, identity_exporter, limit } => {
            evaluate_cmd(&config, &data, &ckpt, &split, mode, identity_exporter, limit)
        }
        Command::Decode { config, data, ckpt, split, index, mode, identity_exporter } => {
            decode_cmd(&config, &data, &ckpt, &split, index, mode, identity_exporter)
        }
        Command::InspectCkpt { path } => inspect_cmd(&path),
        Command::Report { metrics } => report_cmd(&metrics),
    }
}
