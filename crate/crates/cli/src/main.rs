//! `ocnn`: command-line pipelines over the `ocnn` library.
//!
//! Every subcommand reads one TOML run config (the built-in default when
//! `--config` is absent), applies `--seed` and `--set key=value` overrides,
//! and writes artifacts under the config's `output_dir` unless told
//! otherwise.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use ocnn::config::{stage, RunConfig, DEFAULT_TOML};
use ocnn::dataset::{Dataset, DATASET_VERSION};
use ocnn::eval::{format_table, nav_stats, predict, run_matrix, MatrixInputs, MetricReport};
use ocnn::io::Provenance;
use ocnn::map::{build_map, MapIndex, MAP_VERSION};
use ocnn::model::{Model, Variant, WEIGHTS_VERSION};
use ocnn::nav::{run_episodes, sample_episodes, EpisodeSpec, NavPolicy};
use ocnn::pipeline::{build_corpus, build_corpus_in, Corpus};
use ocnn::world::World;
use ocnn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ocnn",
    version,
    about = "Omnidirectional CNN place recognition and navigation"
)]
struct Cli {
    /// Run config (TOML). Defaults to the built-in desk config.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Global seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override one config value, e.g. `--set train.iterations=200`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, toml::Value)>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world and write it as JSON.
    GenWorld {
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Render the training, held-out, map and query datasets.
    GenData {
        /// Use this world instead of generating one.
        #[arg(long, value_name = "FILE")]
        world: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train a model on the training dataset.
    Train {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Ablation arm to train instead of the configured model.
        #[arg(long)]
        variant: Option<Variant>,
        /// Write the per-iteration loss as JSON lines.
        #[arg(long, value_name = "FILE")]
        loss_log: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Encode the map dataset into a map file.
    BuildMap {
        #[command(flatten)]
        inputs: ModelInputs,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Retrieve the closest exemplar for queries; prints one JSON line each.
    Query {
        #[command(flatten)]
        inputs: MapInputs,
        /// Only this query id.
        #[arg(long)]
        id: Option<u32>,
        /// Number of ranked exemplars to print per query.
        #[arg(long, default_value_t = 1)]
        top: usize,
    },
    /// Run one navigation episode towards a map exemplar.
    Navigate {
        #[command(flatten)]
        inputs: MapInputs,
        /// Target exemplar id (with `--start`); otherwise a sampled episode.
        #[arg(long, requires = "start")]
        target: Option<u32>,
        /// Start position `X,Y` in metres.
        #[arg(long, value_name = "X,Y", value_parser = parse_point, requires = "target")]
        start: Option<[f64; 2]>,
        /// Start heading in radians.
        #[arg(long, default_value_t = 0.0)]
        heading: f64,
        /// Index of the sampled episode to run when no target is given.
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, value_enum, default_value_t = PolicyArg::Feature)]
        policy: PolicyArg,
        /// Write the per-step log as JSON lines.
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
    },
    /// Recall over error tolerances and distance bins.
    EvalRecall {
        #[command(flatten)]
        inputs: MapInputs,
        /// Variant label recorded in the report.
        #[arg(long, default_value = "model")]
        name: String,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Navigation success rate and steps over sampled episodes.
    EvalNav {
        #[command(flatten)]
        inputs: MapInputs,
        #[arg(long, value_enum, num_args = 1.., default_values_t = [PolicyArg::Feature])]
        policy: Vec<PolicyArg>,
        #[command(flatten)]
        report: ReportArgs,
    },
    /// Train and evaluate every ablation arm plus untrained weights.
    Ablation {
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        variants: Option<Vec<Variant>>,
        #[command(flatten)]
        report: ReportArgs,
    },
}

#[derive(Args)]
struct ModelInputs {
    #[arg(long, value_name = "FILE")]
    weights: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct MapInputs {
    #[command(flatten)]
    model: ModelInputs,
    #[arg(long, value_name = "FILE")]
    map: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    format: Format,
    /// Write the report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Jsonl,
    Table,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PolicyArg {
    Feature,
    Oracle,
    RandomWalk,
    RandomJump,
}

impl From<PolicyArg> for NavPolicy {
    fn from(p: PolicyArg) -> NavPolicy {
        match p {
            PolicyArg::Feature => NavPolicy::Feature,
            PolicyArg::Oracle => NavPolicy::Oracle,
            PolicyArg::RandomWalk => NavPolicy::RandomWalk,
            PolicyArg::RandomJump => NavPolicy::RandomJump,
        }
    }
}

fn parse_override(s: &str) -> std::result::Result<(String, toml::Value), String> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(format!("bad key {key:?}"));
    }
    // bare words that are not valid TOML values are taken as strings
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn parse_point(s: &str) -> std::result::Result<[f64; 2], String> {
    let (x, y) = s.split_once(',').ok_or("expected X,Y")?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok([num(x)?, num(y)?])
}

fn schema_help() -> String {
    format!(
        "File formats:\n  dataset directory  v{DATASET_VERSION}\n  weights file       v{WEIGHTS_VERSION}\n  map file           v{MAP_VERSION}\n  reports            JSON lines, one metric per line\n  config             TOML; `--set` keys follow its tables"
    )
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(path) => fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        None => DEFAULT_TOML.to_string(),
    };
    if cli.seed.is_none() && cli.overrides.is_empty() {
        return RunConfig::from_toml(&text);
    }
    let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::InvalidConfig {
        field: "config".into(),
        reason: e.message().to_string(),
    })?;
    if let Some(seed) = cli.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    for (key, value) in &cli.overrides {
        set_path(&mut table, key, value.clone())?;
    }
    RunConfig::from_toml(&toml::to_string(&table).expect("table serializes"))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part)
            .or_insert_with(|| toml::Value::Table(Default::default()));
        node = entry.as_table_mut().ok_or_else(|| Error::InvalidConfig {
            field: key.into(),
            reason: format!("`{part}` is not a table"),
        })?;
    }
    node.insert(last.into(), value);
    Ok(())
}

struct Paths {
    root: PathBuf,
}

impl Paths {
    fn or(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.root.join(default))
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

fn provenance(cfg: &RunConfig) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed: cfg.seed,
    }
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let model = Model::load(path, None)?;
    let r = &cfg.render;
    if model.config().input != [r.height, r.width, 3] {
        return Err(Error::InvalidConfig {
            field: "render".into(),
            reason: format!(
                "{}x{} renders do not fit model input {:?}",
                r.height,
                r.width,
                model.config().input
            ),
        });
    }
    Ok(model)
}

fn load_set(data: &Path, part: &str) -> Result<Dataset> {
    Dataset::load(&data.join(part))
}

fn write_reports(reports: &[MetricReport], args: &ReportArgs) -> Result<()> {
    let text = match args.format {
        Format::Jsonl => reports.iter().map(MetricReport::to_jsonl).collect(),
        Format::Table => format_table(reports),
    };
    match &args.out {
        Some(path) => {
            ensure_parent(path)?;
            fs::write(path, text).map_err(|e| Error::io(path, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn episode_specs(cfg: &RunConfig, world: &World, map: &MapIndex) -> Result<Vec<EpisodeSpec>> {
    let e = &cfg.eval;
    sample_episodes(
        world,
        map,
        e.nav_episodes,
        e.nav_min_start,
        e.nav_max_start,
        cfg.seed_for(stage::EPISODES),
    )
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let paths = Paths {
        root: cfg.output_dir.clone(),
    };
    let data_dir = |given: &Option<PathBuf>| paths.or(given, "data");
    let weights = |given: &Option<PathBuf>| paths.or(given, "model.weights");
    let map_file = |given: &Option<PathBuf>| paths.or(given, "map.omap");
    log::info!("config hash {}, seed {}", cfg.hash(), cfg.seed);

    match &cli.command {
        Command::GenWorld { out } => {
            let out = paths.or(out, "world.json");
            ensure_parent(&out)?;
            World::generate(&cfg.world_config())?.save(&out)?;
            println!("{}", out.display());
        }
        Command::GenData { world, out } => {
            let out = data_dir(out);
            let corpus = match world {
                Some(path) => {
                    let world = World::load(path)?;
                    if world.config != cfg.world_config() {
                        log::warn!("{} was not generated from this config", path.display());
                    }
                    build_corpus_in(&cfg, world)?
                }
                None => build_corpus(&cfg)?,
            };
            corpus.save(&out)?;
            let config_path = out.join("config.toml");
            fs::write(&config_path, cfg.to_toml()).map_err(|e| Error::io(&config_path, e))?;
            println!(
                "{}: {} train, {} held-out, {} map, {} query samples",
                out.display(),
                corpus.train.samples.len(),
                corpus.held_out.samples.len(),
                corpus.map.samples.len(),
                corpus.queries.samples.len()
            );
        }
        Command::Train {
            data,
            variant,
            loss_log,
            out,
        } => {
            let train_set = load_set(&data_dir(data), "train")?;
            let (model_cfg, train_cfg) = match variant {
                Some(v) => v.apply(&cfg.model, &cfg.train_config()),
                None => (cfg.model.clone(), cfg.train_config()),
            };
            let mut model = Model::new(model_cfg, cfg.seed_for(stage::INIT))?;
            let report = model.train(&train_set.samples, &train_cfg)?;
            model.set_provenance(provenance(&cfg));
            let out = weights(out);
            ensure_parent(&out)?;
            model.save(&out)?;
            if let Some(path) = loss_log {
                ensure_parent(path)?;
                let lines: String = report
                    .losses
                    .iter()
                    .enumerate()
                    .map(|(i, l)| format!("{{\"iteration\":{i},\"loss\":{l}}}\n"))
                    .collect();
                fs::write(path, lines).map_err(|e| Error::io(path, e))?;
            }
            match report.smoothed_ends(50) {
                Some((first, last)) => println!(
                    "{}: model {}, loss {first:.4} -> {last:.4}",
                    out.display(),
                    model.hash()
                ),
                None => println!("{}: model {}", out.display(), model.hash()),
            }
        }
        Command::BuildMap { inputs, out } => {
            let model = load_model(&cfg, &weights(&inputs.weights))?;
            let set = load_set(&data_dir(&inputs.data), "map")?;
            let map = build_map(&model, &set.samples)?;
            let out = map_file(out);
            ensure_parent(&out)?;
            map.save(&out)?;
            println!("{}: {} exemplars", out.display(), map.len());
        }
        Command::Query { inputs, id, top } => {
            let model = load_model(&cfg, &weights(&inputs.model.weights))?;
            let map = MapIndex::load(&map_file(&inputs.map))?;
            map.check_model(model.hash())?;
            let queries = load_set(&data_dir(&inputs.model.data), "queries")?;
            let picked: Vec<_> = match id {
                Some(id) => vec![queries
                    .samples
                    .iter()
                    .find(|s| s.record.id == *id)
                    .ok_or(Error::UnknownId(*id))?],
                None => queries.samples.iter().collect(),
            };
            for q in picked {
                let res = map.query(&model.forward(&q.image.pixels)?)?;
                let ranking: Vec<_> = res
                    .ranking
                    .iter()
                    .take((*top).max(1))
                    .map(|r| serde_json::json!({"id": r.id, "distance": r.distance, "r_hat": r.r_hat}))
                    .collect();
                let line = serde_json::json!({
                    "query_id": q.record.id,
                    "predicted": res.best,
                    "ground_truth": q.record.gt_closest,
                    "ranking": ranking,
                });
                println!("{line}");
            }
        }
        Command::Navigate {
            inputs,
            target,
            start,
            heading,
            episode,
            policy,
            log: log_path,
        } => {
            let model = load_model(&cfg, &weights(&inputs.model.weights))?;
            let map = MapIndex::load(&map_file(&inputs.map))?;
            map.check_model(model.hash())?;
            let world = World::load(&data_dir(&inputs.model.data).join("world.json"))?;
            let spec = match (target, start) {
                (Some(id), Some(p)) => EpisodeSpec {
                    start: world.pose(*p, *heading)?,
                    target_id: *id,
                },
                _ => *episode_specs(&cfg, &world, &map)?
                    .get(*episode)
                    .ok_or_else(|| {
                        Error::invalid(format!(
                            "episode {episode} out of range (eval.nav_episodes = {})",
                            cfg.eval.nav_episodes
                        ))
                    })?,
            };
            let episodes = run_episodes(
                &world,
                &model,
                &map,
                &cfg.render,
                &[spec],
                (*policy).into(),
                &cfg.policy,
                cfg.seed_for(stage::RANDOM_NAV),
            )?;
            let ep = &episodes[0];
            if let Some(path) = log_path {
                ensure_parent(path)?;
                ep.write_log(path)?;
            }
            let line = serde_json::json!({
                "target_id": ep.target_id,
                "start": ep.start.position,
                "success": ep.success,
                "stuck": ep.stuck,
                "steps": ep.steps,
                "feature_evaluations": ep.feature_evaluations,
                "final_distance": ep.final_distance,
            });
            println!("{line}");
        }
        Command::EvalRecall {
            inputs,
            name,
            report,
        } => {
            let model = load_model(&cfg, &weights(&inputs.model.weights))?;
            let map = MapIndex::load(&map_file(&inputs.map))?;
            let queries = load_set(&data_dir(&inputs.model.data), "queries")?;
            let preds = predict(&model, &map, &queries.samples)?;
            let r = MetricReport::new(
                name,
                cfg.seed,
                &cfg.hash(),
                &preds,
                &cfg.eval.tolerances,
                &cfg.eval.bins,
            );
            write_reports(&[r], report)?;
        }
        Command::EvalNav {
            inputs,
            policy,
            report,
        } => {
            let model = load_model(&cfg, &weights(&inputs.model.weights))?;
            let map = MapIndex::load(&map_file(&inputs.map))?;
            map.check_model(model.hash())?;
            let world = World::load(&data_dir(&inputs.model.data).join("world.json"))?;
            let specs = episode_specs(&cfg, &world, &map)?;
            let mut reports = Vec::new();
            for &p in policy {
                let p = NavPolicy::from(p);
                let episodes = run_episodes(
                    &world,
                    &model,
                    &map,
                    &cfg.render,
                    &specs,
                    p,
                    &cfg.policy,
                    cfg.seed_for(stage::RANDOM_NAV),
                )?;
                reports.push(MetricReport {
                    variant: p.name().into(),
                    seed: cfg.seed,
                    config_hash: cfg.hash(),
                    recall_tolerance: Vec::new(),
                    recall_distance: Vec::new(),
                    nav: Some(nav_stats(&episodes)),
                });
            }
            write_reports(&reports, report)?;
        }
        Command::Ablation {
            data,
            variants,
            report,
        } => {
            let corpus = Corpus::load(&data_dir(data))?;
            let mut train = cfg.train_config();
            train.iterations = cfg.eval.ablation_iterations;
            let variants = variants.clone().unwrap_or_else(|| Variant::ALL.to_vec());
            let hash = cfg.hash();
            let inputs = MatrixInputs {
                model: &cfg.model,
                train: &train,
                train_samples: &corpus.train.samples,
                map_samples: &corpus.map.samples,
                queries: &corpus.queries.samples,
                tolerances: &cfg.eval.tolerances,
                bins: &cfg.eval.bins,
                config_hash: &hash,
            };
            let reports = run_matrix(&inputs, &variants, &cfg.eval.ablation_seeds)?;
            write_reports(&reports, report)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = Cli::command().after_help(schema_help()).get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
