use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use dhumor_core::data::{
    compute_stats, embedding_path, load_manifest, save_manifest, write_embedding_file, EmbeddingTriple,
    IntensityLevel, MemeRecord, Split, Stream, TargetCategory,
};
use dhumor_core::evalstats::{compute_agreement, render_results_table, AgreementReport, ResultsRow, TaskScores};
use dhumor_core::refine::{run_corpus, RefineConfig};
use dhumor_core::tcrnet::load_checkpoint;
use dhumor_core::trainer::{
    evaluate, gradcheck, synthetic_corpus, train, EmbeddingSource, GradcheckConfig, RunDir, SyntheticSpec,
    TrainConfig, TrainError, TrainOutcome,
};
use dhumor_core::vlm::{self, EndpointConfig, VlmClient};
use dhumor_core::{MetricsReport, StreamSet, Task};

use crate::errors::invalid;
use crate::{
    AblateArgs, AgreementArgs, Command, DataFlags, EmbedImportArgs, EvalArgs, ExplainArgs, GradcheckArgs,
    StatsArgs, TrainArgs, TrainFlags, Which,
};

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOL: f64 = 1e-3;

pub fn run(command: Command) -> Result<String> {
    match command {
        Command::Stats(a) => stats(a),
        Command::Explain(a) => explain(a),
        Command::EmbedImport(a) => embed_import(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::Agreement(a) => agreement(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
    }
}

fn default_run_dir(cmd: &str, seed: u64) -> PathBuf {
    let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    PathBuf::from("runs").join(format!("{cmd}-{ts}-s{seed}"))
}

fn manifest(path: &Path) -> Result<Vec<MemeRecord>> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn stats(args: StatsArgs) -> Result<String> {
    let records = manifest(&args.manifest)?;
    let stats = compute_stats(&records);
    print!("{stats}");
    let mut parts = Vec::new();
    for (split, s) in &stats.splits {
        parts.push(format!("{split} {} ({} dark, {} non-dark)", s.total(), s.dark, s.non_dark));
    }
    Ok(format!("{} records: {}", records.len(), parts.join(", ")))
}

fn endpoint(args: &ExplainArgs) -> Result<EndpointConfig> {
    if let Some(path) = &args.vlm_config {
        return Ok(vlm::load_endpoint_config(path)?);
    }
    let spec = args.endpoint.as_deref().expect("clap requires a backend");
    if let Some(script) = spec.strip_prefix("mock:") {
        return Ok(vlm::mock_from_script(vlm::load_mock_script(script)?)?);
    }
    if !(spec.starts_with("http://") || spec.starts_with("https://")) {
        return Err(invalid(format!("endpoint `{spec}` is neither an http(s) URL nor mock:<script>")));
    }
    let mut config = EndpointConfig::http(spec);
    if let vlm::BackendConfig::Http { token, .. } = &mut config.backend {
        *token = std::env::var(vlm::ENV_TOKEN).ok();
    }
    Ok(config)
}

fn explain(args: ExplainArgs) -> Result<String> {
    let config = RefineConfig {
        max_iterations: args.max_iters,
        convergence_threshold: args.threshold,
        resend_image: !args.no_resend_image,
        ..RefineConfig::default()
    };
    config.validate()?;
    let mut records = manifest(&args.manifest)?;
    if let Some(n) = args.limit {
        records.truncate(n);
    }
    let client = VlmClient::new(endpoint(&args)?)?;
    let images = args.images_dir.clone().unwrap_or_else(|| parent_dir(&args.manifest));

    let dir = args.run_dir.clone().unwrap_or_else(|| default_run_dir("explain", 0));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let traces = dir.join("traces.jsonl");
    let refined = dir.join("refined.jsonl");
    fs::write(&traces, "")?;
    let summary = run_corpus(&records, &client, &config, &images, &traces, &refined)?;
    for (id, reason) in &summary.failures {
        eprintln!("failed {id}: {reason}");
    }
    if !summary.failures.is_empty() {
        return Err(anyhow!(
            "{} of {} memes failed; partial results in {}",
            summary.failures.len(),
            records.len(),
            refined.display()
        ));
    }
    Ok(format!(
        "refined {} memes, {} converged -> {}",
        summary.processed,
        summary.converged,
        refined.display()
    ))
}

fn embed_import(args: EmbedImportArgs) -> Result<String> {
    if args.synthetic {
        synthetic(args)
    } else {
        raw_import(args)
    }
}

fn synthetic(args: EmbedImportArgs) -> Result<String> {
    if args.samples == 0 {
        return Err(invalid("--samples must be at least 1"));
    }
    let spec = SyntheticSpec {
        samples: args.samples + args.test_samples,
        tokens: args.tokens.unwrap_or(8),
        dim: args.dim.unwrap_or(16),
        task: args.task,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    if spec.tokens == 0 || spec.dim == 0 {
        return Err(invalid("--tokens and --dim must be positive"));
    }
    let dir = args.run_dir.clone().unwrap_or_else(|| default_run_dir("synthetic", args.seed));
    let emb = dir.join("embeddings");
    fs::create_dir_all(&emb).with_context(|| format!("creating {}", emb.display()))?;
    // one draw shares the class means; the tail becomes the test split
    let mut records = Vec::with_capacity(spec.samples);
    for (i, (mut record, triple)) in synthetic_corpus(&spec).into_iter().enumerate() {
        if i >= args.samples {
            record.split = Split::Test;
        }
        write_embedding_file(&record.id, &triple, embedding_path(&emb, &record.id))?;
        records.push(record);
    }
    let manifest_path = dir.join("manifest.jsonl");
    save_manifest(&manifest_path, &records)?;
    Ok(format!(
        "wrote {} train and {} test records ({}x{}) -> {}",
        args.samples,
        args.test_samples,
        spec.tokens,
        spec.dim,
        manifest_path.display()
    ))
}

fn read_f32(path: &Path, tokens: usize, dim: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let want = tokens * dim * 4;
    if bytes.len() != want {
        return Err(invalid(format!(
            "{}: {} bytes, expected {want} for {tokens}x{dim} f32",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn raw_import(args: EmbedImportArgs) -> Result<String> {
    let raw = args.raw_dir.clone().expect("clap requires raw_dir");
    let manifest_path = args.manifest.clone().expect("clap requires manifest");
    let records = manifest(&manifest_path)?;
    let (tokens, dim) = (args.tokens.unwrap_or(197), args.dim.unwrap_or(768));
    let out = args.embeddings_dir.clone().unwrap_or_else(|| parent_dir(&manifest_path).join("embeddings"));

    // read and validate everything before writing anything
    let mut triples = Vec::with_capacity(records.len());
    for r in &records {
        let mut triple = EmbeddingTriple::zeros(tokens, dim);
        for (stream, name) in [(Stream::Text, "text"), (Stream::Reasoning, "reasoning"), (Stream::Image, "image")] {
            let values = read_f32(&raw.join(format!("{}.{name}.f32", r.id)), tokens, dim)?;
            let target = match stream {
                Stream::Text => &mut triple.text,
                Stream::Reasoning => &mut triple.reasoning,
                Stream::Image => &mut triple.image,
            };
            target.iter_mut().zip(values).for_each(|(t, v)| *t = v);
        }
        triple.validate().with_context(|| format!("meme `{}`", r.id))?;
        triples.push(triple);
    }
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    for (r, t) in records.iter().zip(&triples) {
        write_embedding_file(&r.id, t, embedding_path(&out, &r.id))?;
    }
    Ok(format!("imported {} embedding triples ({tokens}x{dim}) -> {}", records.len(), out.display()))
}

fn train_config(flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = flags.task {
        cfg.task = v;
    }
    if let Some(v) = flags.streams {
        cfg.streams = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = flags.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = flags.dropout {
        cfg.dropout = v;
    }
    if let Some(v) = flags.heads {
        cfg.heads = v;
    }
    if flags.shared_trunk {
        cfg.shared_trunk = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Dataset {
    records: Vec<MemeRecord>,
    source: EmbeddingSource,
}

impl Dataset {
    fn load(data: &DataFlags) -> Result<Self> {
        let records = manifest(&data.manifest)?;
        let dir = data.embeddings_dir.clone().unwrap_or_else(|| parent_dir(&data.manifest).join("embeddings"));
        Ok(Dataset { records, source: EmbeddingSource::dir(dir) })
    }

    fn split(&self, split: Split) -> Vec<MemeRecord> {
        self.records.iter().filter(|r| r.split == split).cloned().collect()
    }
}

struct TrainedRun {
    outcome: TrainOutcome,
    trained_on: usize,
    /// One report per evaluated task, on the test split.
    reports: Vec<MetricsReport>,
}

/// The checks `train` would fail on, run before the run directory exists.
fn preflight(data: &Dataset, cfg: &TrainConfig) -> Result<Vec<MemeRecord>> {
    cfg.validate()?;
    let train_set = data.split(Split::Train);
    let eligible: Vec<&MemeRecord> =
        train_set.iter().filter(|r| cfg.tasks().iter().any(|t| t.label(r).is_some())).collect();
    if eligible.is_empty() {
        return Err(TrainError::EmptyEligibleSet(cfg.task).into());
    }
    data.source.check(&eligible)?;
    Ok(train_set)
}

/// Trains into `dir` and evaluates `eval_tasks` on the test split when it
/// has eligible records.
fn train_into(data: &Dataset, cfg: &TrainConfig, dir: &Path, eval_tasks: &[Task]) -> Result<TrainedRun> {
    let train_set = preflight(data, cfg)?;
    let run = RunDir::create(dir)?;
    run.write_config(cfg)?;
    let mut io_error = None;
    let outcome = train(&train_set, &data.source, cfg, |e| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  train acc {:6.2}  {:.2}s",
            e.epoch, e.mean_loss, e.train_accuracy, e.wall_seconds
        );
        if let Err(err) = run.append_history(e) {
            io_error.get_or_insert(err);
        }
    })?;
    if let Some(err) = io_error {
        return Err(err.into());
    }
    run.write_checkpoints(&outcome)?;

    let test_set = data.split(Split::Test);
    let mut reports = Vec::new();
    for &task in eval_tasks {
        if !test_set.iter().any(|r| task.label(r).is_some()) {
            eprintln!("no test records for {task}; skipping evaluation");
            continue;
        }
        let report = evaluate(&outcome.final_params, &test_set, &data.source, task)?;
        reports.push(report);
    }
    if let Some(first) = reports.first() {
        run.write_metrics(first)?;
    }
    let trained_on = train_set.iter().filter(|r| cfg.tasks().iter().any(|t| t.label(r).is_some())).count();
    Ok(TrainedRun { outcome, trained_on, reports })
}

fn scores_line(r: &MetricsReport) -> String {
    let mut s = format!("acc {:.2} macro-F1 {:.2} wt-F1 {:.2}", r.accuracy, r.macro_f1, r.weighted_f1);
    if let Some(p) = r.pearson {
        s.push_str(&format!(" P-corr {p:.2}"));
    }
    s
}

fn train_cmd(args: TrainArgs) -> Result<String> {
    let cfg = train_config(&args.train)?;
    let data = Dataset::load(&args.data)?;
    let dir = args.run_dir.clone().unwrap_or_else(|| default_run_dir("train", cfg.seed));
    let trained = train_into(&data, &cfg, &dir, &[cfg.task])?;
    let last = trained.outcome.history.epochs.last().expect("at least one epoch");
    let mut line = format!(
        "trained {} [{}] on {} records for {} epochs: loss {:.4}, train acc {:.2}",
        cfg.task, cfg.streams, trained.trained_on, cfg.epochs, last.mean_loss, last.train_accuracy
    );
    if let Some(r) = trained.reports.first() {
        line.push_str(&format!("; test {}", scores_line(r)));
    }
    line.push_str(&format!(" -> {}", dir.display()));
    Ok(line)
}

fn set_scores(row: &mut ResultsRow, report: &MetricsReport) {
    let scores = Some(TaskScores::from(report));
    match report.task {
        Some(Task::DarkHumor) => row.dark_humor = scores,
        Some(Task::Target) => row.target = scores,
        Some(Task::Intensity) => row.intensity = scores,
        None => {}
    }
}

fn eval_cmd(args: EvalArgs) -> Result<String> {
    let run = RunDir::open(&args.run_dir);
    let cfg = run.read_config().with_context(|| format!("reading run config in {}", args.run_dir.display()))?;
    let task = args.task.unwrap_or(cfg.task);
    let checkpoint = match args.checkpoint {
        Which::Final => run.final_checkpoint(),
        Which::Best => run.best_checkpoint(),
    };
    let params = load_checkpoint(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let data = Dataset::load(&args.data)?;
    let split: Split = args.split.into();
    let report = evaluate(&params, &data.split(split), &data.source, task)?;
    run.write_metrics(&report)?;

    let mut row = ResultsRow::new(format!("TCRNet[{}]", cfg.streams));
    set_scores(&mut row, &report);
    print!("{}", render_results_table(&[row]));
    Ok(format!("{task} on {} {split} records: {} -> {}", report.n, scores_line(&report), args.run_dir.display()))
}

fn ablate(args: AblateArgs) -> Result<String> {
    let base = train_config(&args.train)?;
    if base.streams != StreamSet::ALL {
        return Err(invalid("ablation starts from all three streams; drop --streams"));
    }
    if args.tasks.is_empty() {
        return Err(invalid("--tasks is empty"));
    }
    let data = Dataset::load(&args.data)?;
    let dir = args.run_dir.clone().unwrap_or_else(|| default_run_dir("ablate", base.seed));
    let variants = [
        ("full", StreamSet::ALL),
        ("no-text", StreamSet::ALL.without(Stream::Text)),
        ("no-image", StreamSet::ALL.without(Stream::Image)),
        ("no-reasoning", StreamSet::ALL.without(Stream::Reasoning)),
    ];
    // every variant must be trainable before any of them runs
    for &task in &args.tasks {
        preflight(&data, &TrainConfig { task, ..base.clone() })?;
    }

    let mut rows = Vec::new();
    for (name, streams) in variants {
        let mut row = None;
        let runs: Vec<(TrainConfig, PathBuf, Vec<Task>)> = if base.shared_trunk {
            vec![(TrainConfig { streams, ..base.clone() }, dir.join(name), args.tasks.clone())]
        } else {
            args.tasks
                .iter()
                .map(|&task| (TrainConfig { task, streams, ..base.clone() }, dir.join(name).join(task.as_str()), vec![task]))
                .collect()
        };
        for (cfg, sub, tasks) in runs {
            eprintln!("== {name} [{streams}] {}", tasks.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","));
            let trained = train_into(&data, &cfg, &sub, &tasks)?;
            let fused = trained.outcome.final_params.fused_dim();
            let row = row.get_or_insert_with(|| ResultsRow::new(format!("{name}[{streams}]/fused-{fused}")));
            for report in &trained.reports {
                set_scores(row, report);
            }
        }
        rows.extend(row);
    }
    let table = render_results_table(&rows);
    fs::write(dir.join("comparison.txt"), &table)?;
    fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    print!("{table}");
    Ok(format!("ablation over {} variants -> {}", rows.len(), dir.join("comparison.txt").display()))
}

fn parse_label(task: Task, raw: &str) -> Result<usize, String> {
    let s = raw.trim();
    match task {
        Task::DarkHumor => match s.to_ascii_lowercase().as_str() {
            "1" | "yes" | "true" | "dark" => Ok(1),
            "0" | "no" | "false" | "non-dark" => Ok(0),
            _ => Err(format!("`{s}` is not a dark humor label (yes/no or 1/0)")),
        },
        Task::Target => s.parse::<TargetCategory>().map(|t| t.index()),
        Task::Intensity => s
            .parse::<u8>()
            .ok()
            .and_then(IntensityLevel::new)
            .map(|l| l.index())
            .ok_or_else(|| format!("`{s}` is not an intensity level (1, 2 or 3)")),
    }
}

fn agreement(args: AgreementArgs) -> Result<String> {
    let mut reader = csv::Reader::from_path(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let annotators = reader.headers()?.len().saturating_sub(1);
    if annotators < 2 {
        return Err(invalid("agreement CSV needs an id column and at least two annotator columns"));
    }
    let mut labels = vec![Vec::new(); annotators];
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        for (a, column) in labels.iter_mut().enumerate() {
            let cell = record.get(a + 1).unwrap_or("");
            let label = parse_label(args.task, cell).map_err(|e| invalid(format!("row {}: {e}", line + 2)))?;
            column.push(label);
        }
    }
    let scheme = (args.task == Task::Intensity).then_some(args.weighted_scheme);
    let report = compute_agreement(args.task, &labels, args.task.num_classes(), scheme)?;
    print!("{report}");
    if let Some(dir) = &args.run_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("agreement.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(summary_line(&report, labels[0].len()))
}

fn summary_line(report: &AgreementReport, items: usize) -> String {
    format!(
        "{} items, {} annotator pairs, Fleiss kappa {:.2}",
        items,
        report.pairs.len(),
        report.fleiss
    )
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<String> {
    let config = GradcheckConfig {
        tokens: args.tokens,
        dim: args.dim,
        heads: args.heads,
        task: args.task,
        ..GradcheckConfig::default()
    };
    let report = gradcheck(&config, args.seed)?;
    for (name, err) in &report.groups {
        eprintln!("{name:<32} {err:.3e}");
    }
    let line = format!(
        "max relative error {:.3e} over {} parameters (tolerance {GRADCHECK_TOL:e})",
        report.max_rel_error, report.checked
    );
    if report.max_rel_error < GRADCHECK_TOL {
        Ok(format!("{line}: PASS"))
    } else {
        Err(anyhow!("{line}: FAIL"))
    }
}
