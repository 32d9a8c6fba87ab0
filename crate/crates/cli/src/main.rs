//! `kvlab` command-line interface.
//!
//! Exit codes: 0 on success, 1 on validation/semantic errors, 2 on I/O or
//! format errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kvlab::analysis::{self, Selector};
use kvlab::harness::{self, ExperimentConfig};
use kvlab::policies::{self, PolicyConfig, PolicyKind, ShotSegmentation};
use kvlab::tinyformer::{self, Model};
use kvlab::traceio::{self, TraceMode};
use kvlab::{Budget, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "kvlab", version, about = "KV-cache compression laboratory")]
struct Cli {
    /// Model seed (overrides the config's).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for default output paths.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,

    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Full,
    LastRow,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the toy model on a prompt and write a KVTR trace.
    Trace {
        /// Prompt file.
        #[arg(long, conflicts_with = "text")]
        prompt: Option<PathBuf>,
        /// Inline prompt text.
        #[arg(long)]
        text: Option<String>,
        /// Shot delimiter (`\n` and `\t` escapes allowed); overrides the config's segmentation.
        #[arg(long)]
        marker: Option<String>,
        #[arg(long, value_enum, default_value = "full")]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Apply a policy to a trace and write the retained set as JSON.
    Compress {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        policy: String,
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        /// ShotKV prefill ratio (defaults to --ratio).
        #[arg(long)]
        r_p: Option<f64>,
        /// ShotKV decoding ratio (defaults to --ratio).
        #[arg(long)]
        r_d: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Coverage curve and heatmap of a trace.
    Analyze {
        #[arg(long)]
        trace: PathBuf,
        /// Leading tokens dropped before building the curve.
        #[arg(long, default_value_t = 0)]
        exclude_sinks: usize,
        /// Report the mass fraction captured by the top P of tokens (repeatable).
        #[arg(long)]
        coverage_at: Vec<f64>,
        /// Curve CSV path (default: <out-dir>/coverage.csv).
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write a PGM heatmap here.
        #[arg(long)]
        heatmap: Option<PathBuf>,
        /// Layer index or "mean".
        #[arg(long, default_value = "mean")]
        layer: String,
        /// Head index or "mean".
        #[arg(long, default_value = "mean")]
        head: String,
    },
    /// Ratio sweep over the config's policies; writes sweep.csv.
    Sweep {
        /// Also write sweep.svg for this metric.
        #[arg(long)]
        svg: Option<String>,
    },
    /// Relative performance change of external scores against a baseline row.
    Deltap {
        /// CSV with header `label,value`.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "FullKV")]
        base: String,
    },
    /// Policy selection latency and generation throughput.
    Bench {
        #[arg(long, default_value_t = 0.5)]
        ratio: f64,
        #[arg(long, default_value_t = 100)]
        reps: usize,
    },
    /// Line chart of a sweep CSV.
    Plot {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "kl")]
        metric: String,
    },
}

fn out_path(cli: &Cli, config: Option<&ExperimentConfig>, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
    if let Some(p) = explicit {
        return p.clone();
    }
    let dir = cli
        .out_dir
        .clone()
        .or_else(|| config.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("."));
    dir.join(name)
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        }
        _ => Ok(()),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn load_config(cli: &Cli) -> Result<Option<ExperimentConfig>> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let mut config = ExperimentConfig::load(path)?;
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    Ok(Some(config))
}

fn require_config(cli: &Cli) -> Result<ExperimentConfig> {
    load_config(cli)?.ok_or_else(|| Error::Config("this command needs --config <json>".into()))
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Trace {
            prompt,
            text,
            marker,
            mode,
            out,
        } => {
            let config = load_config(cli)?;
            let bytes = match (prompt, text, &config) {
                (Some(p), _, _) => fs::read(p).map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?,
                (None, Some(t), _) => t.as_bytes().to_vec(),
                (None, None, Some(c)) => c.prompt_bytes()?,
                (None, None, None) => {
                    return Err(Error::Config("give --prompt, --text or --config".into()))
                }
            };
            let seg = match (marker, &config) {
                (Some(m), _) => {
                    let m = m.replace("\\n", "\n").replace("\\t", "\t");
                    ShotSegmentation::from_marker(&bytes, m.as_bytes())?
                }
                (None, Some(c)) => c.segmentation.resolve(&bytes)?,
                (None, None) => ShotSegmentation::whole_prompt(bytes.len())?,
            };
            let mut model_config = config
                .as_ref()
                .map(ExperimentConfig::model_config)
                .unwrap_or_default();
            if let Some(seed) = cli.seed {
                model_config.seed = seed;
            }
            model_config.max_seq = model_config.max_seq.max(bytes.len());
            let model = Model::new(model_config)?;
            let mode = match mode {
                Mode::Full => TraceMode::Full,
                Mode::LastRow => TraceMode::LastRow,
            };
            let (_, mut trace, _) = tinyformer::prefill(&model, &tinyformer::tokenize(&bytes), mode)?;
            trace.meta.shots = seg.shots().to_vec();
            trace.meta.mandatory = seg.mandatory().to_vec();
            let path = out_path(cli, config.as_ref(), out, "trace.kvtr");
            ensure_parent(&path)?;
            traceio::write_trace(&trace, &path)?;
            println!(
                "wrote {} (L={} H={} Q={} T={}, {} shots)",
                path.display(),
                trace.layers(),
                trace.heads(),
                trace.queries(),
                trace.keys(),
                seg.n_shots()
            );
        }
        Command::Compress {
            trace,
            policy,
            ratio,
            r_p,
            r_d,
            out,
        } => {
            let config = load_config(cli)?;
            let trace = traceio::read_trace(trace)?;
            let kind: PolicyKind = policy.parse()?;
            let seg = if trace.meta.shots.is_empty() && trace.meta.mandatory.is_empty() {
                ShotSegmentation::whole_prompt(trace.keys())?
            } else {
                ShotSegmentation::new(
                    trace.keys(),
                    trace.meta.shots.clone(),
                    trace.meta.mandatory.clone(),
                )?
            };
            let budget = if r_p.is_some() || r_d.is_some() {
                Budget::split(r_p.unwrap_or(*ratio), r_d.unwrap_or(*ratio))
            } else {
                Budget::single(*ratio)
            };
            let policy = PolicyConfig {
                kind,
                budget,
                params: config.as_ref().map(|c| c.params.clone()).unwrap_or_default(),
            };
            let retained = policies::run_policy(&policy, &trace, &seg)?;
            let doc = serde_json::json!({
                "policy": policy,
                "prompt_len": trace.keys(),
                "retained": retained,
            });
            let path = out_path(cli, config.as_ref(), out, "retained.json");
            write_file(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
            println!(
                "{kind}: kept at most {} of {} prompt tokens per unit ({:?} scope) -> {}",
                retained.max_len(),
                trace.keys(),
                retained.scope,
                path.display()
            );
        }
        Command::Analyze {
            trace,
            exclude_sinks,
            coverage_at,
            csv,
            heatmap,
            layer,
            head,
        } => {
            let source = trace.display().to_string();
            let trace = traceio::read_trace(trace)?;
            let report = traceio::validate_trace(&trace);
            if report.hard_failures() > 0 {
                eprintln!("{}", serde_json::to_string_pretty(&report)?);
                return Err(Error::Trace(format!(
                    "{} hard validation failures",
                    report.hard_failures()
                )));
            }
            let scores = analysis::aggregate_attention(&trace);
            let mut curve = analysis::cumulative_distribution(&scores, *exclude_sinks)?;
            curve.source = source;
            let path = out_path(cli, None, csv, "coverage.csv");
            write_file(&path, analysis::curve_csv(&curve))?;
            let meta = serde_json::json!({
                "source": curve.source,
                "exclude_first_n": exclude_sinks,
                "aggregation": "sum over all layers, heads and query rows",
                "model": trace.meta.model,
            });
            let mut meta_path = path.clone().into_os_string();
            meta_path.push(".meta.json");
            write_file(Path::new(&meta_path), serde_json::to_string_pretty(&meta)? + "\n")?;
            println!("wrote {}", path.display());
            for &p in coverage_at {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Config(format!("coverage point {p} outside [0, 1]")));
                }
                println!("coverage_at({p}) = {}", analysis::sig9(analysis::coverage_at(&curve, p)));
            }
            if let Some(h) = heatmap {
                let layer: Selector = layer.parse()?;
                let head: Selector = head.parse()?;
                ensure_parent(h)?;
                analysis::heatmap_export(&trace, layer, head, h)?;
                println!("wrote {}", h.display());
            }
        }
        Command::Sweep { svg } => {
            let config = require_config(cli)?;
            let rows = harness::ratio_sweep(&config)?;
            let csv_path = out_path(cli, Some(&config), &None, "sweep.csv");
            write_file(&csv_path, harness::sweep_csv(&rows)?)?;
            println!("wrote {} ({} rows)", csv_path.display(), rows.len());
            if let Some(metric) = svg {
                let records = harness::read_sweep_csv(&csv_path)?;
                let out = out_path(cli, Some(&config), &None, "sweep.svg");
                write_file(&out, harness::sweep_svg(&records, metric)?)?;
                println!("wrote {}", out.display());
            }
        }
        Command::Deltap { scores, base } => {
            let scores = harness::read_scores(scores)?;
            let table = harness::delta_table(&scores, base)?;
            let csv = harness::delta_csv(&table);
            print!("{csv}");
            if cli.out_dir.is_some() {
                write_file(&out_path(cli, None, &None, "deltap.csv"), csv)?;
            }
        }
        Command::Bench { ratio, reps } => {
            let config = require_config(cli)?;
            let rows = harness::bench_policies(&config, *ratio, *reps)?;
            let csv = harness::bench_csv(&rows);
            print!("{csv}");
            write_file(&out_path(cli, Some(&config), &None, "bench.csv"), csv)?;
        }
        Command::Plot { csv, out, metric } => {
            let path = out_path(cli, None, out, "sweep.svg");
            ensure_parent(&path)?;
            harness::plot_sweep(csv, &path, metric)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io_or_format() { 2 } else { 1 })
        }
    }
}
