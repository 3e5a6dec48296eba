//! Subcommand implementations.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use matu_core::baselines::{agreement_from_embeddings, eigv_agreement_score, parse_agreement_csv, AgreementMatrix};
use matu_core::embedding::{reduce_and_normalize, EmbeddingCache, EmbeddingGateway};
use matu_core::evaluation::{eval_table_csv, evaluate_dataset, parse_labels_csv, select_by_uncertainty};
use matu_core::ragged::{embed_task_steps, task_step_texts};
use matu_core::scorer::{factor_loading_report, normalize_reports, reports_csv, reports_jsonl, LossMode};
use matu_core::synthetic::{generate_synthetic_dataset, simulate_routing, SyntheticSpec};
use matu_core::trajectory::validate_task_record;
use matu_core::{build_ragged_tensor, fit, parse_trajectory_log, score_task, Error, StepFilter, TaskRecord};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{require, PipelineConfig};
use crate::{CliError, Command, FitArgs, InputArgs};

type CliResult<T> = Result<T, CliError>;

pub fn dispatch(cmd: Command, model_id: &mut String) -> CliResult<()> {
    match cmd {
        Command::Ingest { config, log, out } => ingest(config, log, out),
        Command::Embed {
            input,
            url,
            batch_size,
            precomputed,
        } => {
            let mut cfg = with_input(&input)?;
            if url.is_some() {
                cfg.embed_url = url;
            }
            if let Some(b) = batch_size {
                cfg.batch_size = b;
            }
            *model_id = cfg.embed_model.clone();
            embed(&cfg, &precomputed)
        }
        Command::Score {
            input,
            fit,
            rmax,
            loss,
            no_warm_start,
            jobs,
            out,
            csv,
            metrics,
        } => {
            let mut cfg = with_input(&input)?;
            apply_fit(&mut cfg, &fit);
            if let Some(r) = rmax {
                cfg.score.r_max = r;
            }
            if let Some(l) = loss {
                cfg.score.loss_mode = LossMode::parse(&l)
                    .ok_or_else(|| CliError::Usage(format!("--loss must be rel or abs, got {l:?}")))?;
            }
            if no_warm_start {
                cfg.score.warm_start = false;
            }
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            *model_id = cfg.embed_model.clone();
            score(&cfg, out.as_deref(), csv.as_deref(), metrics.as_deref())
        }
        Command::Baseline {
            input,
            agreement_dir,
            variant,
            out,
        } => {
            let cfg = with_input(&input)?;
            *model_id = cfg.embed_model.clone();
            baseline(&cfg, agreement_dir.as_deref(), &variant, out.as_deref())
        }
        Command::Eval {
            config,
            scores,
            labels,
            log,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if labels.is_some() {
                cfg.labels = labels;
            }
            if log.is_some() {
                cfg.log = log;
            }
            eval(&cfg, &scores, out.as_deref())
        }
        Command::Route {
            candidates,
            simulate,
            seed,
            tasks,
            backbones,
            rho,
            out,
        } => route(
            candidates.as_deref(),
            simulate,
            seed,
            tasks,
            backbones,
            rho,
            out.as_deref(),
        ),
        Command::Synth {
            out_dir,
            seed,
            tasks,
            divergence,
            incorrect_fraction,
            stem,
            shape,
        } => {
            let mut spec = SyntheticSpec::demo(seed);
            spec.n_runs = shape.runs.unwrap_or(spec.n_runs);
            spec.n_agents = shape.agents.unwrap_or(spec.n_agents);
            spec.step_range.0 = shape.min_steps.unwrap_or(spec.step_range.0);
            spec.step_range.1 = shape.max_steps.unwrap_or(spec.step_range.1);
            spec.d = shape.dim.unwrap_or(spec.d);
            spec.true_rank = shape.rank.unwrap_or(spec.true_rank);
            spec.noise_sigma = shape.noise.unwrap_or(spec.noise_sigma);
            synth(&out_dir, &spec, tasks, divergence, incorrect_fraction, &stem)
        }
        Command::Interpret {
            input,
            fit,
            task,
            rank,
            component,
            out,
        } => {
            let mut cfg = with_input(&input)?;
            apply_fit(&mut cfg, &fit);
            *model_id = cfg.embed_model.clone();
            interpret(&cfg, &task, rank, component, out.as_deref())
        }
    }
}

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::from_file(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn with_input(a: &InputArgs) -> CliResult<PipelineConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    if a.log.is_some() {
        cfg.log = a.log.clone();
    }
    if a.cache.is_some() {
        cfg.cache = a.cache.clone();
    }
    if let Some(m) = &a.model {
        cfg.embed_model = m.clone();
    }
    if let Some(d) = a.d_target {
        cfg.d_target = d;
    }
    if let Some(s) = &a.steps {
        cfg.step_filter = StepFilter::parse(s).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn apply_fit(cfg: &mut PipelineConfig, a: &FitArgs) {
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    if let Some(r) = a.restarts {
        cfg.fit.restarts = r;
    }
    if let Some(m) = a.max_iters {
        cfg.fit.max_iters = m;
    }
    if let Some(t) = a.tol {
        cfg.fit.rel_tol = t;
    }
}

fn with_path(p: &Path, e: std::io::Error) -> CliError {
    std::io::Error::new(e.kind(), format!("{}: {e}", p.display())).into()
}

fn read_text(p: &Path) -> CliResult<String> {
    std::fs::read_to_string(p).map_err(|e| with_path(p, e))
}

fn write_output(out: Option<&Path>, content: &str) -> CliResult<()> {
    match out {
        Some(p) => std::fs::write(p, content).map_err(|e| with_path(p, e))?,
        None => std::io::stdout().lock().write_all(content.as_bytes())?,
    }
    Ok(())
}

/// Parses the log and applies task labels from the configured CSV, if any.
fn read_tasks(cfg: &PipelineConfig) -> CliResult<Vec<TaskRecord>> {
    let path = require(&cfg.log, "log")?;
    let mut tasks = parse_trajectory_log(BufReader::new(
        std::fs::File::open(path).map_err(|e| with_path(path, e))?,
    ))?;
    if cfg.labels.is_some() {
        let labels = parse_labels_csv(&read_text(require(&cfg.labels, "labels")?)?)?;
        for t in &mut tasks {
            if let Some(&l) = labels.get(&t.task_id) {
                t.correct = Some(l);
            }
        }
    }
    Ok(tasks)
}

fn offline_gateway(cfg: &PipelineConfig) -> CliResult<EmbeddingGateway> {
    let cache = EmbeddingCache::new();
    cache.load(require(&cfg.cache, "cache")?)?;
    Ok(EmbeddingGateway::offline(Arc::new(cache)))
}

fn ingest(config: Option<PathBuf>, log: Option<PathBuf>, out: Option<PathBuf>) -> CliResult<()> {
    let mut cfg = load_config(config.as_deref())?;
    if log.is_some() {
        cfg.log = log;
    }
    let tasks = read_tasks(&cfg)?;
    let mut body = String::new();
    let mut n_diag = 0;
    for t in &tasks {
        let diags: Vec<String> = validate_task_record(t).iter().map(ToString::to_string).collect();
        n_diag += diags.len();
        let agents: BTreeSet<&str> = t.runs.iter().flat_map(|r| r.agent_ids()).collect();
        let steps: usize = t.runs.iter().flat_map(|r| &r.traces).map(|tr| tr.steps.len()).sum();
        let line = json!({
            "task_id": t.task_id,
            "runs": t.n_runs(),
            "agents": agents,
            "steps": steps,
            "label": t.task_label(),
            "diagnostics": diags,
        });
        body.push_str(&line.to_string());
        body.push('\n');
    }
    eprintln!("ingest: {} task(s), {n_diag} diagnostic(s)", tasks.len());
    write_output(out.as_deref(), &body)
}

fn embed(cfg: &PipelineConfig, precomputed: &[PathBuf]) -> CliResult<()> {
    let tasks = read_tasks(cfg)?;
    let cache_path = cfg
        .cache
        .clone()
        .ok_or_else(|| CliError::Usage("missing cache path (--cache or paths.cache)".into()))?;
    let cache = Arc::new(EmbeddingCache::new());
    if cache_path.exists() {
        cache.load(&cache_path)?;
    }
    let before = cache.len();
    let mut gateway = match &cfg.embed_url {
        Some(url) => http_gateway(cache.clone(), url),
        None => EmbeddingGateway::offline(cache.clone()),
    };
    gateway.batch_size = cfg.batch_size;
    for p in precomputed {
        gateway.load_precomputed_embeddings(require(&Some(p.clone()), "precomputed")?)?;
    }
    let loaded = cache.len();

    let mut seen = BTreeSet::new();
    let mut texts = Vec::new();
    for t in &tasks {
        let answers = t.runs.iter().filter_map(|r| r.answer_text().map(str::to_string));
        for text in task_step_texts(t, &cfg.step_filter).into_iter().chain(answers) {
            if seen.insert(text.clone()) {
                texts.push(text);
            }
        }
    }
    let vectors = gateway.embed_texts(&texts, &cfg.embed_model)?;
    for v in &vectors {
        reduce_and_normalize(v, cfg.d_target)?;
    }
    cache.save(&cache_path)?;
    let summary = json!({
        "texts": texts.len(),
        "entries_before": before,
        "entries_precomputed": loaded - before,
        "entries_fetched": cache.len() - loaded,
        "entries_after": cache.len(),
    });
    write_output(None, &format!("{summary}\n"))
}

fn http_gateway(cache: Arc<EmbeddingCache>, url: &str) -> EmbeddingGateway {
    let service = matu_core::embedding::service::HttpEmbeddingService::from_env(url);
    EmbeddingGateway::with_service(cache, Box::new(service))
}

fn score(cfg: &PipelineConfig, out: Option<&Path>, csv: Option<&Path>, metrics: Option<&Path>) -> CliResult<()> {
    let fit_cfg = cfg.seeded_fit()?;
    let tasks = read_tasks(cfg)?;
    let gateway = offline_gateway(cfg)?;
    let start = Instant::now();
    let embedded = tasks
        .iter()
        .map(|t| embed_task_steps(&gateway, t, &cfg.step_filter, &cfg.embed_model, cfg.d_target))
        .collect::<Result<Vec<_>, _>>()?;
    let embed_secs = start.elapsed().as_secs_f64();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} worker(s): {e}", cfg.jobs)))?;
    let results: Vec<_> = pool.install(|| {
        tasks
            .par_iter()
            .zip(embedded.par_iter())
            .map(|(t, emb)| {
                let tensor = build_ragged_tensor(t, emb, &cfg.step_filter)?;
                score_task(t, &tensor, &fit_cfg, &cfg.score)
            })
            .collect()
    });
    let mut reports = results.into_iter().collect::<Result<Vec<_>, Error>>()?;
    reports.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    normalize_reports(&mut reports);

    write_output(out, &reports_jsonl(&reports))?;
    if let Some(p) = csv {
        write_output(Some(p), &reports_csv(&reports))?;
    }
    if let Some(p) = metrics {
        let m = json!({
            "tasks": reports.len(),
            "jobs": pool.current_num_threads(),
            "embed_secs": embed_secs,
            "total_secs": start.elapsed().as_secs_f64(),
        });
        write_output(Some(p), &format!("{m}\n"))?;
    }
    Ok(())
}

/// One text per run: the final answer, or all retained steps joined.
fn run_texts(t: &TaskRecord, variant: &str, filter: &StepFilter) -> Vec<String> {
    t.runs
        .iter()
        .filter_map(|r| match variant {
            "final" => r.answer_text().map(str::to_string),
            _ => {
                let steps: Vec<&str> = r
                    .traces
                    .iter()
                    .flat_map(|tr| &tr.steps)
                    .filter(|s| filter.keeps(s.kind))
                    .map(|s| s.content.as_str())
                    .collect();
                (!steps.is_empty()).then(|| steps.join("\n"))
            }
        })
        .collect()
}

fn baseline(cfg: &PipelineConfig, agreement_dir: Option<&Path>, variant: &str, out: Option<&Path>) -> CliResult<()> {
    if variant != "final" && variant != "whole" {
        return Err(CliError::Usage(format!(
            "--variant must be final or whole, got {variant:?}"
        )));
    }
    let mut tasks = read_tasks(cfg)?;
    tasks.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    let gateway = match agreement_dir {
        Some(_) => None,
        None => Some(offline_gateway(cfg)?),
    };
    let mut body = String::new();
    for t in &tasks {
        let w: AgreementMatrix = match (agreement_dir, &gateway) {
            (Some(dir), _) => {
                let path = dir.join(format!("{}.csv", t.task_id));
                let (w, warnings) = parse_agreement_csv(&read_text(&path)?)?;
                for msg in warnings {
                    eprintln!("{}: {msg}", t.task_id);
                }
                w
            }
            (None, Some(g)) => {
                let texts = run_texts(t, variant, &cfg.step_filter);
                if texts.len() < t.n_runs() {
                    eprintln!(
                        "{}: {} run(s) without text skipped",
                        t.task_id,
                        t.n_runs() - texts.len()
                    );
                }
                let vectors = g
                    .embed_texts(&texts, &cfg.embed_model)?
                    .iter()
                    .map(|v| reduce_and_normalize(v, cfg.d_target))
                    .collect::<Result<Vec<_>, _>>()?;
                agreement_from_embeddings(&vectors)?
            }
            (None, None) => unreachable!("gateway exists without an agreement directory"),
        };
        let line = json!({
            "task_id": t.task_id,
            "score": eigv_agreement_score(&w)?,
            "source": w.source,
            "m": w.size(),
        });
        body.push_str(&line.to_string());
        body.push('\n');
    }
    write_output(out, &body)
}

/// Reads `(task_id, score)` pairs from JSON lines (`U` or `score` field)
/// or a CSV with a `task_id` column and a `U` or `score` column.
fn read_scores(path: &Path) -> CliResult<Vec<(String, f64)>> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut out = Vec::new();
    let Some((_, first)) = lines.next() else {
        return Ok(out);
    };
    if first.trim_start().starts_with('{') {
        for (i, line) in std::iter::once((0, first)).chain(lines) {
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| Error::MalformedLine(i + 1, e.to_string()))?;
            let task = v["task_id"].as_str();
            let u = v.get("U").or_else(|| v.get("score")).and_then(|x| x.as_f64());
            match (task, u) {
                (Some(t), Some(u)) => out.push((t.to_string(), u)),
                _ => return Err(Error::MalformedLine(i + 1, "expected task_id and U or score".into()).into()),
            }
        }
    } else {
        let header: Vec<&str> = first.split(',').map(str::trim).collect();
        let col = |name: &str| header.iter().position(|h| *h == name);
        let (Some(ti), Some(ui)) = (col("task_id"), col("U").or_else(|| col("score"))) else {
            return Err(Error::MalformedLine(1, "CSV needs task_id and U or score columns".into()).into());
        };
        for (i, line) in lines {
            let cells: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::MalformedLine(i + 1, format!("bad row {line:?}"));
            let task = cells.get(ti).ok_or_else(bad)?;
            let u: f64 = cells.get(ui).and_then(|x| x.parse().ok()).ok_or_else(bad)?;
            out.push((task.to_string(), u));
        }
    }
    Ok(out)
}

fn eval(cfg: &PipelineConfig, specs: &[String], out: Option<&Path>) -> CliResult<()> {
    let mut scores = Vec::new();
    for s in specs {
        let (name, path) = s
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--scores expects name=path, got {s:?}")))?;
        scores.push((name.to_string(), read_scores(&PathBuf::from(path))?));
    }
    let labels: HashMap<String, bool> = if cfg.labels.is_some() {
        parse_labels_csv(&read_text(require(&cfg.labels, "labels")?)?)?
    } else if cfg.log.is_some() {
        read_tasks(cfg)?
            .iter()
            .filter_map(|t| t.task_label().map(|l| (t.task_id.clone(), l)))
            .collect()
    } else {
        return Err(CliError::Usage("eval needs --labels or --log".into()));
    };
    let ev = evaluate_dataset(&scores, &labels)?;
    for d in &ev.diagnostics {
        eprintln!("{d}");
    }
    write_output(out, &eval_table_csv(&ev.reports))
}

/// Task ids, per-task `(U, correct)` candidates and per-task backbone names.
type Candidates = (Vec<String>, Vec<Vec<(f64, bool)>>, Vec<Vec<String>>);

/// Candidate rows grouped by task in first-seen order, backbones in row order.
fn read_candidates(path: &Path) -> CliResult<Candidates> {
    let text = read_text(path)?;
    let mut tasks: Vec<String> = Vec::new();
    let mut cands: Vec<Vec<(f64, bool)>> = Vec::new();
    let mut names: Vec<Vec<String>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || (i == 0 && line.starts_with("task_id")) {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = || Error::MalformedLine(i + 1, "expected task_id,backbone,U,correct".into());
        let [task, backbone, u, correct] = cells[..] else {
            return Err(bad().into());
        };
        let u: f64 = u.parse().map_err(|_| bad())?;
        let correct = match correct {
            "1" => true,
            "0" => false,
            _ => return Err(bad().into()),
        };
        let slot = match tasks.iter().position(|t| t == task) {
            Some(s) => s,
            None => {
                tasks.push(task.to_string());
                cands.push(Vec::new());
                names.push(Vec::new());
                tasks.len() - 1
            }
        };
        cands[slot].push((u, correct));
        names[slot].push(backbone.to_string());
    }
    Ok((tasks, cands, names))
}

fn route(
    candidates: Option<&Path>,
    simulate: bool,
    seed: Option<u64>,
    n_tasks: usize,
    backbones: usize,
    rho: f64,
    out: Option<&Path>,
) -> CliResult<()> {
    let (cands, names) = if simulate {
        let seed = seed.ok_or_else(|| CliError::Usage("--simulate requires --seed".into()))?;
        if !(0.0..=1.0).contains(&rho) || backbones == 0 || backbones > 4 {
            return Err(CliError::Usage(
                "simulation needs rho in [0, 1] and 1 to 4 backbones".into(),
            ));
        }
        let cands = simulate_routing(n_tasks, backbones, rho, seed);
        let names = vec![(0..backbones).map(|b| format!("b{b}")).collect::<Vec<_>>(); cands.len()];
        (cands, names)
    } else {
        let path = candidates.ok_or_else(|| CliError::Usage("route needs --candidates or --simulate".into()))?;
        let (_, cands, names) = read_candidates(path)?;
        (cands, names)
    };
    let r = select_by_uncertainty(&cands)?;
    let chosen: Vec<&str> = r.chosen.iter().zip(&names).map(|(&c, n)| n[c].as_str()).collect();
    let body = json!({
        "n_tasks": cands.len(),
        "accuracy": r.accuracy,
        "random_expectation": r.random_expectation,
        "lift": r.accuracy - r.random_expectation,
        "chosen": chosen,
    });
    write_output(out, &format!("{body}\n"))
}

fn synth(
    out_dir: &Path,
    spec: &SyntheticSpec,
    tasks: usize,
    divergence: f64,
    incorrect_fraction: f64,
    stem: &str,
) -> CliResult<()> {
    let ds = generate_synthetic_dataset(tasks, divergence, spec, incorrect_fraction)?;
    let paths = ds.write_to_dir(out_dir, stem)?;
    let conf_path = out_dir.join(format!("{stem}.conf"));
    let conf = format!(
        "# synthetic demo dataset, seed {}\n\
         paths.log = {stem}.jsonl\n\
         paths.cache = {stem}.bin\n\
         paths.labels = {stem}_labels.csv\n\
         embed.model = {}\n\
         embed.d_target = {}\n",
        spec.seed, ds.model_id, spec.d
    );
    write_output(Some(&conf_path), &conf)?;
    let body = json!({
        "tasks": ds.tasks.len(),
        "log": paths.log,
        "cache": paths.cache,
        "labels": paths.labels,
        "config": conf_path,
    });
    write_output(None, &format!("{body}\n"))
}

fn interpret(cfg: &PipelineConfig, task: &str, rank: usize, component: usize, out: Option<&Path>) -> CliResult<()> {
    let mut fit_cfg = cfg.seeded_fit()?;
    fit_cfg.rank = rank;
    let tasks = read_tasks(cfg)?;
    let rec = tasks
        .iter()
        .find(|t| t.task_id == task)
        .ok_or_else(|| CliError::Usage(format!("task {task:?} not in log")))?;
    let gateway = offline_gateway(cfg)?;
    let emb = embed_task_steps(&gateway, rec, &cfg.step_filter, &cfg.embed_model, cfg.d_target)?;
    let tensor = build_ragged_tensor(rec, &emb, &cfg.step_filter)?;
    let result = fit(&tensor, &fit_cfg)?;
    let report = factor_loading_report(&result, &tensor, rec, component)?;
    let body = json!({
        "task_id": rec.task_id,
        "rank": rank,
        "loss_rel": result.loss_rel,
        "report": report,
    });
    write_output(out, &format!("{body}\n"))
}
