use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use seisflow::cli::{self, CliConfig, Remote};
use seisflow::demo::{self, MisfitConfig, NoiseConfig, DEFAULT_SEED};
use seisflow::enactment::{BackendKind, Feeds, RunOptions, RunRecord, RunStatus};
use seisflow::gateway::{self, Gateway, GatewayConfig, GraphRef, RunSubmission};
use seisflow::graph::Severity;
use seisflow::provenance::{parse_criteria, Criteria, LineageDirection, ProvDocument, ProvEntity, RunSummary};
use seisflow::registry::{ComponentKind, ROOT};
use seisflow::seismo::{ingest_directory, IngestFormat};
use seisflow::{Error, Result};

#[derive(Parser)]
#[command(name = "seisflow", version, about = "Streaming dataflow workflows with provenance")]
struct Cli {
    /// JSON config file (dataDir, gatewayUrl, token, backend, workers)
    #[arg(long, global = true, env = "SEISFLOW_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Send run and provenance commands to this gateway instead of the local data directory
    #[arg(long, global = true)]
    gateway_url: Option<String>,
    #[arg(long, global = true)]
    token: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a graph document (file or registry reference)
    Validate {
        graph: String,
        #[arg(long, default_value = ROOT)]
        workspace: String,
        #[arg(long)]
        json: bool,
    },
    /// Execute a graph
    Run(RunArgs),
    #[command(subcommand)]
    Prov(ProvCommand),
    #[command(subcommand)]
    Registry(RegistryCommand),
    #[command(subcommand)]
    Gateway(GatewayCommand),
    /// Catalogue every trace file in a directory
    Ingest {
        dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Trc)]
        format: Format,
        #[arg(long)]
        json: bool,
    },
    #[command(subcommand)]
    Demo(DemoCommand),
    #[command(hide = true)]
    Worker,
}

#[derive(Args)]
struct RunArgs {
    /// Graph document file or registry reference (`name@version`)
    graph: String,
    #[arg(long)]
    backend: Option<BackendKind>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    max_load: Option<f64>,
    /// Provenance log to record into (defaults to the data directory's log)
    #[arg(long)]
    provenance: Option<PathBuf>,
    #[arg(long)]
    no_provenance: bool,
    /// Let full connections overflow to disk
    #[arg(long)]
    spill: bool,
    /// JSON map from feed name to units
    #[arg(long)]
    feeds: Option<PathBuf>,
    /// FEED=PATH: push a trace file into a feed (repeatable, in order)
    #[arg(long = "trace", value_name = "FEED=PATH")]
    traces: Vec<String>,
    #[arg(long, default_value = ROOT)]
    workspace: String,
    /// Where to write outputs (defaults to <data-dir>/outputs/<run>.json)
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum ProvCommand {
    /// Runs (or entities) whose metadata matches a JSON criteria map
    Query {
        #[arg(long)]
        entities: bool,
        /// e.g. '{"station":"IV.AQU","start_time":[0,100]}'
        #[arg(long, default_value = "{}")]
        q: String,
        #[arg(long)]
        json: bool,
    },
    Lineage {
        entity: String,
        #[arg(long, value_enum, default_value_t = Dir::Ancestors)]
        direction: Dir,
        #[arg(long, default_value_t = 16)]
        depth: usize,
        #[arg(long)]
        json: bool,
    },
    /// Write a run as a PROV JSON document
    Export {
        run: String,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    Import {
        file: PathBuf,
    },
}

#[derive(Subcommand)]
enum RegistryCommand {
    /// Serve the registry routes over HTTP
    Serve {
        #[arg(long, default_value = gateway::DEFAULT_ADDR)]
        addr: String,
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
    Add {
        name: String,
        /// Body document (PE descriptor, graph or function JSON)
        file: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value = ROOT)]
        workspace: String,
        #[arg(long = "annotation", value_name = "KEY=VALUE")]
        annotations: Vec<String>,
        #[arg(long)]
        json: bool,
    },
    Resolve {
        name: String,
        #[arg(long, default_value = ROOT)]
        workspace: String,
        #[arg(long)]
        version: Option<u32>,
        #[arg(long)]
        json: bool,
    },
    /// Create a workspace
    Workspace {
        name: String,
        #[arg(long, default_value = ROOT)]
        parent: String,
        #[arg(long)]
        json: bool,
    },
    Search {
        terms: Vec<String>,
        #[arg(long, default_value = ROOT)]
        workspace: String,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Subcommand)]
enum GatewayCommand {
    Serve {
        /// Gateway config file (addr, dataDir, tokenFile, fixturesDir, baseUrl)
        #[arg(long)]
        gateway_config: Option<PathBuf>,
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        tokens: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DemoCommand {
    /// All-pairs ambient-noise correlation of synthetic channels
    Noise {
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        windows: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long)]
        backend: Option<BackendKind>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Forward modelling and misfit against a perturbed model
    Misfit {
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        perturbation: f64,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Trc,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dir {
    Ancestors,
    Descendants,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Pe,
    Function,
    Graph,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Worker = cli.command {
        return match seisflow::enactment::run_worker(std::io::stdin(), std::io::stdout()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("worker: {e}");
                ExitCode::from(1)
            }
        };
    }
    let json = wants_json(&cli.command);
    match config(&cli).and_then(|cfg| dispatch(cli.command, &cfg)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if json {
                let body = serde_json::json!({"code": e.code(), "message": e.to_string()});
                eprintln!("{body}");
            } else {
                eprintln!("error[{}]: {e}", e.code());
            }
            ExitCode::from(1)
        }
    }
}

fn wants_json(c: &Command) -> bool {
    match c {
        Command::Validate { json, .. } | Command::Ingest { json, .. } => *json,
        Command::Run(a) => a.json,
        Command::Prov(ProvCommand::Query { json, .. } | ProvCommand::Lineage { json, .. }) => *json,
        Command::Registry(
            RegistryCommand::Add { json, .. }
            | RegistryCommand::Resolve { json, .. }
            | RegistryCommand::Workspace { json, .. }
            | RegistryCommand::Search { json, .. },
        ) => *json,
        Command::Demo(DemoCommand::Noise { json, .. } | DemoCommand::Misfit { json, .. }) => *json,
        _ => false,
    }
}

fn config(cli: &Cli) -> Result<CliConfig> {
    let base = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    let mut cfg = base.with_env(|k| std::env::var(k).ok())?;
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(u) = &cli.gateway_url {
        cfg.gateway_url = Some(u.clone());
    }
    if let Some(t) = &cli.token {
        cfg.token = Some(t.clone());
    }
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("value serializes"));
}

fn dispatch(command: Command, cfg: &CliConfig) -> Result<()> {
    match command {
        Command::Validate { graph, workspace, json } => validate(cfg, &graph, &workspace, json),
        Command::Run(args) => run(cfg, args),
        Command::Prov(p) => prov(cfg, p),
        Command::Registry(r) => registry(cfg, r),
        Command::Gateway(GatewayCommand::Serve { gateway_config, addr, tokens }) => {
            let mut gc = match gateway_config {
                Some(p) => GatewayConfig::load(&p)?,
                None => GatewayConfig { data_dir: Some(cfg.data_dir.clone()), ..Default::default() },
            }
            .with_env(|k| std::env::var(k).ok());
            if addr.is_some() {
                gc.addr = addr;
            }
            if tokens.is_some() {
                gc.token_file = tokens;
            }
            let gw = Arc::new(Gateway::open(&gc)?);
            let addr = gc.addr().to_string();
            serve(gw.router(), &addr)
        }
        Command::Ingest { dir, format, json } => {
            let prov = cfg.data().open_provenance(None)?;
            let format = match format {
                Format::Trc => IngestFormat::TraceDoc,
                Format::Csv => IngestFormat::Csv,
            };
            let report = ingest_directory(&dir, format, &prov)?;
            prov.store().flush()?;
            if json {
                print_json(&report);
            } else {
                println!(
                    "cataloged {}, duplicates {}, rejected {}",
                    report.cataloged.len(),
                    report.duplicates.len(),
                    report.rejected.len()
                );
                for id in &report.cataloged {
                    println!("  {id}");
                }
                for (file, why) in &report.rejected {
                    println!("  rejected {file}: {why}");
                }
            }
            Ok(())
        }
        Command::Demo(d) => demo_cmd(cfg, d),
        Command::Worker => unreachable!("handled before configuration"),
    }
}

fn serve(router: axum::Router, addr: &str) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    eprintln!("listening on http://{addr}");
    rt.block_on(gateway::serve(router, addr)).map_err(|e| Error::io(addr, e))
}

fn validate(cfg: &CliConfig, graph: &str, workspace: &str, json: bool) -> Result<()> {
    let registry = cfg.data().open_registry()?;
    let (doc, from) = cli::graph_document(graph, &registry, workspace)?;
    let report = doc.validate(&registry.resolver(&from))?;
    if json {
        print_json(&report);
    } else {
        for i in &report.issues {
            let level = if i.severity == Severity::Error { "error" } else { "warning" };
            println!("{level} {} at {}: {}", i.code, i.location, i.message);
        }
        if report.ok {
            println!("ok: {} nodes, {} edges", doc.nodes.len(), doc.edges.len());
        }
    }
    let failure = report.errors().next().map(|first| {
        Error::Invalid(format!("{graph}: {} error(s), first {} at {}", report.errors().count(), first.code, first.location))
    });
    failure.map_or(Ok(()), Err)
}

fn run_failure(rec: &RunRecord) -> Error {
    let first = rec.error_log.first();
    let message = first.map(|e| format!("{}: {}", e.pe_instance, e.message)).unwrap_or_default();
    let code = match first {
        Some(e) if e.message.starts_with("SpillExhausted") => "SpillExhausted",
        Some(_) => "PEFailure",
        None => "RunFailed",
    };
    Error::Remote { status: 0, code: code.into(), message: format!("run {} {}: {message}", rec.run_id, rec.status.as_str()) }
}

fn run(cfg: &CliConfig, a: RunArgs) -> Result<()> {
    let mut feeds: Feeds = match &a.feeds {
        Some(p) => cli::read_feeds(p)?,
        None => Feeds::new(),
    };
    for spec in &a.traces {
        let (feed, unit) = cli::trace_feed(spec)?;
        feeds.entry(feed).or_default().push(unit);
    }
    let backend = a.backend.unwrap_or(cfg.backend);
    let workers = a.workers.unwrap_or(cfg.workers).max(1);
    let (rec, outputs) = match cfg.remote() {
        Some(remote) => run_remote(&remote, &a, backend, workers, feeds)?,
        None => {
            let data = cfg.data();
            let registry = data.open_registry()?;
            let graph = cli::load_graph(&a.graph, &registry, &a.workspace)?;
            let enactor = data.open_enactor(a.provenance.as_deref())?;
            let opts = RunOptions {
                workers,
                max_load: a.max_load,
                provenance_on: !a.no_provenance,
                spill_on: a.spill,
                ..RunOptions::default()
            };
            let rec = enactor.execute(&graph, backend, opts, feeds)?;
            enactor.provenance().store().flush()?;
            let outputs = enactor.outputs(&rec.run_id)?;
            (rec, outputs)
        }
    };
    let path = a.output.clone().unwrap_or_else(|| cfg.data().outputs().join(format!("{}.json", rec.run_id)));
    cli::write_json(&path, &outputs)?;
    if a.json {
        print_json(&rec);
    } else {
        let units: usize = outputs.values().map(Vec::len).sum();
        println!("run {} {} on {}", rec.run_id, rec.status.as_str(), rec.backend);
        println!("{units} output units on {} ports written to {}", outputs.len(), path.display());
        for e in &rec.error_log {
            println!("  {} (unit {}): {}", e.pe_instance, e.seq, e.message);
        }
    }
    match rec.status {
        RunStatus::Completed => Ok(()),
        _ => Err(run_failure(&rec)),
    }
}

fn run_remote(
    remote: &Remote,
    a: &RunArgs,
    backend: BackendKind,
    workers: usize,
    feeds: Feeds,
) -> Result<(RunRecord, BTreeMap<String, Vec<seisflow::value::DataUnit>>)> {
    if a.provenance.is_some() {
        return Err(Error::Invalid("--provenance names a local log; the gateway keeps its own".into()));
    }
    let path = Path::new(&a.graph);
    let graph_ref = if path.is_file() {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        GraphRef::Inline(seisflow::graph::GraphDocument::parse(&text)?)
    } else {
        GraphRef::Registry(a.graph.clone())
    };
    let sub = RunSubmission {
        graph_ref,
        workspace: Some(a.workspace.clone()),
        backend,
        workers: Some(workers),
        max_load: a.max_load,
        parameters: BTreeMap::new(),
        provenance_on: !a.no_provenance,
        spill_on: a.spill,
        feeds,
        feed_entities: BTreeMap::new(),
    };
    remote.run(&sub, Duration::from_secs(3600))
}

fn criteria(q: &str) -> Result<Criteria> {
    Ok(parse_criteria(q)?)
}

fn prov(cfg: &CliConfig, p: ProvCommand) -> Result<()> {
    let remote = cfg.remote();
    let local = || cfg.data().open_provenance(None);
    match p {
        ProvCommand::Query { entities: false, q, json } => {
            let runs: Vec<RunSummary> = match &remote {
                Some(r) => r.get_json("/prov/runs", &[("q", &q)])?,
                None => local()?.store().query_runs(&criteria(&q)?)?,
            };
            if json {
                print_json(&runs);
            } else {
                for r in &runs {
                    println!("{}\t{}\t{}\t{}", r.run_id, r.status, r.backend, r.graph_ref);
                }
            }
        }
        ProvCommand::Query { entities: true, q, json } => {
            let found: Vec<ProvEntity> = match &remote {
                Some(r) => r.get_json("/prov/entities", &[("q", &q)])?,
                None => local()?.store().query_entities(&criteria(&q)?)?,
            };
            if json {
                print_json(&found);
            } else {
                for e in &found {
                    println!("{}\t{}", e.entity_id, e.payload_digest);
                }
            }
        }
        ProvCommand::Lineage { entity, direction, depth, json } => {
            let dir = match direction {
                Dir::Ancestors => LineageDirection::Ancestors,
                Dir::Descendants => LineageDirection::Descendants,
            };
            let slice = match &remote {
                Some(r) => {
                    let d = depth.to_string();
                    let name = match dir {
                        LineageDirection::Ancestors => "ancestors",
                        LineageDirection::Descendants => "descendants",
                    };
                    r.get_json("/prov/lineage", &[("entity", &entity), ("direction", name), ("depth", &d)])?
                }
                None => local()?.store().trace_lineage(&entity, dir, depth)?,
            };
            if json {
                print_json(&slice);
            } else {
                for e in &slice.entities {
                    println!("{}", e.entity_id);
                }
                for d in &slice.edges {
                    println!("  {} <- {}", d.derived, d.source);
                }
            }
        }
        ProvCommand::Export { run, output } => {
            let text = match &remote {
                Some(r) => String::from_utf8_lossy(&r.get(&format!("/prov/runs/{run}/export"), &[])?).into_owned(),
                None => local()?.store().export_run(&run)?.to_canonical_json(),
            };
            match output {
                Some(path) => std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?,
                None => {
                    let mut out = std::io::stdout().lock();
                    out.write_all(text.as_bytes()).map_err(|e| Error::io("stdout", e))?;
                }
            }
        }
        ProvCommand::Import { file } => {
            let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            match &remote {
                Some(r) => {
                    r.post("/prov/import", text.as_bytes())?;
                }
                None => {
                    let prov = local()?;
                    let doc = ProvDocument::parse(&text)?;
                    prov.store().import_run(&doc)?;
                    prov.store().flush()?;
                    println!("imported {} records", doc.record_count());
                }
            }
        }
    }
    Ok(())
}

fn registry(cfg: &CliConfig, r: RegistryCommand) -> Result<()> {
    if let RegistryCommand::Serve { addr, tokens } = r {
        let mut gc = GatewayConfig { data_dir: Some(cfg.data_dir.clone()), ..Default::default() }
            .with_env(|k| std::env::var(k).ok());
        if tokens.is_some() {
            gc.token_file = tokens;
        }
        let gw = Arc::new(Gateway::open(&gc)?);
        return serve(gw.registry_router(), &addr);
    }
    let reg = cfg.data().open_registry()?;
    match r {
        RegistryCommand::Add { name, file, kind, workspace, annotations, json } => {
            let body = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
            let kind = match kind {
                Kind::Pe => ComponentKind::Pe,
                Kind::Function => ComponentKind::Function,
                Kind::Graph => ComponentKind::Graph,
            };
            let mut ann = BTreeMap::new();
            for a in annotations {
                let (k, v) = a.split_once('=').ok_or_else(|| Error::Invalid(format!("expected KEY=VALUE, got `{a}`")))?;
                ann.insert(k.to_string(), v.to_string());
            }
            let rec = reg.register_component(&workspace, kind, &name, &body, ann)?;
            if json {
                print_json(&rec);
            } else {
                println!("{}", rec.component_id);
            }
        }
        RegistryCommand::Resolve { name, workspace, version, json } => {
            let rec = reg.resolve(&workspace, &name, version)?;
            if json {
                print_json(&rec);
            } else {
                println!("{}", rec.component_id);
                print!("{}", rec.body);
            }
        }
        RegistryCommand::Workspace { name, parent, json } => {
            let ws = reg.create_workspace(&name, Some(&parent))?;
            if json {
                print_json(&ws);
            } else {
                println!("{}", ws.workspace_id);
            }
        }
        RegistryCommand::Search { terms, workspace, json } => {
            let terms: Vec<&str> = terms.iter().map(String::as_str).collect();
            let hits = reg.search(&workspace, &terms)?;
            if json {
                print_json(&hits);
            } else {
                for h in &hits {
                    let shadow = if h.shadowed { " (shadowed)" } else { "" };
                    println!("{}\t{}{shadow}", h.record.component_id, h.record.kind);
                }
            }
        }
        RegistryCommand::Serve { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn demo_cmd(cfg: &CliConfig, d: DemoCommand) -> Result<()> {
    match d {
        DemoCommand::Noise { channels, windows, seed, backend, workers, output, json } => {
            let nc = NoiseConfig {
                channels,
                windows,
                seed,
                backend: backend.unwrap_or(cfg.backend),
                workers: workers.unwrap_or(cfg.workers),
                ..NoiseConfig::default()
            };
            let enactor = cfg.data().open_enactor(None)?;
            let report = demo::run_noise(&enactor, &nc)?;
            enactor.provenance().store().flush()?;
            let path = output.unwrap_or_else(|| cfg.data().outputs().join(format!("{}.stacks.json", report.run_id)));
            cli::write_json(&path, &report.stacks)?;
            if json {
                print_json(&report);
            } else {
                println!("run {}: {} channels, {} windows, seed {seed}", report.run_id, channels, windows);
                for s in &report.stacks {
                    let (k, peak) = s
                        .values
                        .iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
                    println!("  {}\tpeak {peak:.4} at lag {:.3} s", s.pair_label(), s.lags[k]);
                }
                println!(
                    "{} stacks, {} correlation activities in {} groups",
                    report.stacks.len(),
                    report.correlation_activities,
                    report.correlation_groups
                );
                println!("stacks written to {}", path.display());
            }
        }
        DemoCommand::Misfit { seed, perturbation, output, json } => {
            let mc = MisfitConfig { seed, perturbation, ..MisfitConfig::default() };
            let report = demo::run_misfit(&mc)?;
            if let Some(path) = &output {
                cli::write_json(path, &report)?;
            }
            if json {
                print_json(&report);
            } else {
                let self_l2 = report.receivers.iter().map(|r| r.self_l2.value).fold(0.0, f64::max);
                println!("l2 misfit of the unperturbed model against itself: {self_l2:?}");
                println!("perturbed cells {}..{} by {:+}%", report.perturbed_cells.0, report.perturbed_cells.1, perturbation * 100.0);
                for r in &report.receivers {
                    println!(
                        "  {} at {} m: l2 {:.6e}, ccShift {:.4} s",
                        r.channel, r.position, r.l2.value, r.cc_shift.value
                    );
                }
            }
        }
    }
    Ok(())
}
