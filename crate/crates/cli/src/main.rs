use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use orchard_graph::classify::{calibrate, classify_matter, score_matter};
use orchard_graph::enrich::{compute_features, write_features};
use orchard_graph::eval::{binary_f1, match_trunks, segmentation_score};
use orchard_graph::graph::build_graph;
use orchard_graph::io::{read_cloud, read_trunks, write_cloud, write_trunks, CloudFormat};
use orchard_graph::pipeline::{analyze, sweep, write_sweep, AnalyzeConfig, SweepSpec};
use orchard_graph::preprocess::{remove_ground, voxelize};
use orchard_graph::segment::{build_path_model, closest_trunk_baseline, segment_trees};
use orchard_graph::synth::{generate_orchard, OrchardSpec};
use orchard_graph::trunks::detect_trunks;
use orchard_graph::{MatterClass, PointCloud, TrunkPoint, Weighting};

#[derive(Parser)]
#[command(name = "orchard-graph", version, about = "Voxel-graph analysis of orchard point clouds")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML file with analysis parameters; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split ground from canopy and voxelize the canopy.
    Preprocess {
        #[command(flatten)]
        io: InOut,
        #[command(flatten)]
        ground: GroundArgs,
        #[arg(long)]
        voxel_size: Option<f64>,
        /// Write voxel nodes as CSV.
        #[arg(long)]
        nodes_out: Option<PathBuf>,
    },
    /// Compute per-voxel descriptors.
    Enrich {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        features_out: PathBuf,
        #[arg(long)]
        neighborhood: Option<f64>,
        #[command(flatten)]
        ground: GroundArgs,
        #[arg(long)]
        voxel_size: Option<f64>,
    },
    /// Build the canopy graph and dump its edges.
    Graph {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        edges_out: Option<PathBuf>,
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        ground: GroundArgs,
    },
    /// Detect trunk positions without priors.
    FindTrunks {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[command(flatten)]
        detect: DetectArgs,
        #[command(flatten)]
        ground: GroundArgs,
    },
    /// Assign points to trees.
    Segment {
        #[command(flatten)]
        io: InOut,
        #[arg(long)]
        trunks: PathBuf,
        /// Nearest-trunk fallback for unreachable points.
        #[arg(long, overrides_with = "no_fallback")]
        fallback: bool,
        #[arg(long)]
        no_fallback: bool,
        /// Use the straight-line closest-trunk baseline instead of paths.
        #[arg(long)]
        baseline: bool,
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        ground: GroundArgs,
    },
    /// Label points woody or leafy.
    Classify {
        #[command(flatten)]
        io: InOut,
        #[arg(long)]
        trunks: PathBuf,
        #[command(flatten)]
        classify: ClassifyArgs,
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        ground: GroundArgs,
    },
    /// Score statistics and thresholds from a cloud with woody/leafy labels.
    Calibrate {
        #[arg(long)]
        labeled: PathBuf,
        #[arg(long)]
        trunks: PathBuf,
        #[arg(long)]
        smooth_radius: Option<f64>,
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        ground: GroundArgs,
    },
    /// Generate a labeled synthetic orchard.
    Simulate(SimulateArgs),
    /// Score predictions against ground truth.
    Eval {
        #[arg(value_enum)]
        kind: EvalKind,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        max_dist: Option<f64>,
        /// Also write the metrics as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full pipeline.
    Analyze {
        #[command(flatten)]
        io: InOut,
        /// Use these trunks instead of detecting them.
        #[arg(long)]
        trunks: Option<PathBuf>,
        /// Ground-truth trunks for detection metrics.
        #[arg(long)]
        truth_trunks: Option<PathBuf>,
        #[arg(long)]
        no_detect: bool,
        #[arg(long)]
        trunks_out: Option<PathBuf>,
        /// Run manifest (default: `<output>.manifest.json`).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[command(flatten)]
        graph: GraphArgs,
        #[command(flatten)]
        ground: GroundArgs,
        #[command(flatten)]
        detect: DetectArgs,
        #[command(flatten)]
        classify: ClassifyArgs,
    },
    /// Analyze a grid of synthetic stands.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct InOut {
    #[arg(short, long)]
    input: PathBuf,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct GroundArgs {
    #[arg(long)]
    ground_radius: Option<f64>,
    #[arg(long)]
    ground_tol: Option<f64>,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    voxel_size: Option<f64>,
    #[arg(long)]
    edge_radius: Option<f64>,
    #[arg(long, value_enum)]
    weights: Option<WeightArg>,
    #[arg(long)]
    neighborhood: Option<f64>,
    #[arg(long)]
    anchor_radius: Option<f64>,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    coarse_voxel: Option<f64>,
    #[arg(long)]
    source_spacing: Option<f64>,
    #[arg(long)]
    merge_dist: Option<f64>,
    #[arg(long)]
    min_source_height: Option<f64>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    smooth_radius: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    per_row: Option<usize>,
    #[arg(long)]
    row_spacing: Option<f64>,
    #[arg(long)]
    tree_spacing: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    density_scale: Option<f64>,
    /// TOML orchard spec; flags take precedence.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trunks_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightArg {
    None,
    Density,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalKind {
    Trunks,
    Segmentation,
    Classification,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl GroundArgs {
    fn apply(&self, cfg: &mut AnalyzeConfig) {
        set(&mut cfg.model.ground.radius, self.ground_radius);
        set(&mut cfg.model.ground.tolerance, self.ground_tol);
    }
}

impl GraphArgs {
    fn apply(&self, cfg: &mut AnalyzeConfig) {
        set(&mut cfg.model.voxel_size, self.voxel_size);
        set(&mut cfg.model.graph.edge_radius, self.edge_radius);
        set(&mut cfg.model.graph.neighborhood_radius, self.neighborhood);
        set(&mut cfg.model.anchor_radius, self.anchor_radius);
        set(
            &mut cfg.model.graph.weighting,
            self.weights.map(|w| match w {
                WeightArg::None => Weighting::None,
                WeightArg::Density => Weighting::Density,
                WeightArg::Cosine => Weighting::Cosine,
            }),
        );
    }
}

impl DetectArgs {
    fn apply(&self, cfg: &mut AnalyzeConfig) {
        set(&mut cfg.detection.voxel_size, self.coarse_voxel);
        set(&mut cfg.detection.source_spacing, self.source_spacing);
        set(&mut cfg.detection.merge_distance, self.merge_dist);
        set(&mut cfg.detection.min_source_height, self.min_source_height);
    }
}

impl ClassifyArgs {
    fn apply(&self, cfg: &mut AnalyzeConfig) {
        set(&mut cfg.classify.threshold, self.threshold);
        set(&mut cfg.classify.smoothing_radius, self.smooth_radius);
    }
}

fn load_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn read(path: &Path) -> Result<PointCloud> {
    Ok(read_cloud(path, CloudFormat::from_path(path))?)
}

fn write(cloud: &PointCloud, path: &Path) -> Result<()> {
    Ok(write_cloud(cloud, path, CloudFormat::from_path(path))?)
}

fn write_json(value: &impl serde::Serialize, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("orchard-graph: {e}");
            return ExitCode::from(2);
        }
    }
    let stage = stage_name(&cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("orchard-graph: {stage}: {}", describe(&e));
            ExitCode::FAILURE
        }
    }
}

/// Error chain joined by ": ", skipping causes the message already includes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn stage_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Preprocess { .. } => "preprocess",
        Command::Enrich { .. } => "enrich",
        Command::Graph { .. } => "graph",
        Command::FindTrunks { .. } => "find-trunks",
        Command::Segment { .. } => "segment",
        Command::Classify { .. } => "classify",
        Command::Calibrate { .. } => "calibrate",
        Command::Simulate(_) => "simulate",
        Command::Eval { .. } => "eval",
        Command::Analyze { .. } => "analyze",
        Command::Sweep { .. } => "sweep",
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg: AnalyzeConfig = load_toml(cli.config.as_deref())?;
    match cli.command {
        Command::Preprocess {
            io,
            ground,
            voxel_size,
            nodes_out,
        } => {
            ground.apply(&mut cfg);
            set(&mut cfg.model.voxel_size, voxel_size);
            let cloud = read(&io.input)?;
            let part = remove_ground(&cloud, cfg.model.ground)?;
            let (ids, classes): (Vec<_>, Vec<_>) = cloud
                .points()
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    if part.is_ground(i) {
                        (Some(0), Some(MatterClass::Ground))
                    } else if p.matter_class == Some(MatterClass::Ground) || p.tree_id == Some(0) {
                        (None, None)
                    } else {
                        (p.tree_id, p.matter_class)
                    }
                })
                .unzip();
            write(&cloud.relabeled(&ids, &classes)?, &io.output)?;
            let grid = voxelize(&cloud, &part.nonground_ids, cfg.model.voxel_size)?;
            println!(
                "{} points, {} ground, {} voxel nodes",
                cloud.len(),
                part.ground_ids.len(),
                grid.len()
            );
            if let Some(path) = nodes_out {
                let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
                writeln!(w, "node,i,j,k,x,y,z,count")?;
                for c in 0..grid.len() {
                    let [i, j, k] = grid.key(c);
                    let p = grid.position(c);
                    writeln!(w, "{c},{i},{j},{k},{},{},{},{}", p.x, p.y, p.z, grid.members(c).len())?;
                }
                w.flush()?;
            }
        }
        Command::Enrich {
            input,
            features_out,
            neighborhood,
            ground,
            voxel_size,
        } => {
            ground.apply(&mut cfg);
            set(&mut cfg.model.voxel_size, voxel_size);
            set(&mut cfg.model.graph.neighborhood_radius, neighborhood);
            let cloud = read(&input)?;
            let part = remove_ground(&cloud, cfg.model.ground)?;
            let grid = voxelize(&cloud, &part.nonground_ids, cfg.model.voxel_size)?;
            let features = compute_features(&cloud, &grid, cfg.model.graph.neighborhood_radius)?;
            write_features(&grid, &features, &features_out)?;
            println!("{} feature vectors", features.len());
        }
        Command::Graph {
            input,
            edges_out,
            graph,
            ground,
        } => {
            graph.apply(&mut cfg);
            ground.apply(&mut cfg);
            let cloud = read(&input)?;
            let part = remove_ground(&cloud, cfg.model.ground)?;
            let grid = voxelize(&cloud, &part.nonground_ids, cfg.model.voxel_size)?;
            let g = build_graph(&cloud, &grid, &cfg.model.graph)?;
            let stats = g.stats();
            println!("{} nodes, {} edges", g.len(), stats.edges);
            if stats.zero_norm_edges > 0 {
                println!("{} edges used the neutral weight (zero-norm features)", stats.zero_norm_edges);
            }
            if let Some(p) = edges_out {
                g.write_edges(p)?;
            }
        }
        Command::FindTrunks {
            input,
            output,
            detect,
            ground,
        } => {
            detect.apply(&mut cfg);
            ground.apply(&mut cfg);
            let cloud = read(&input)?;
            let d = detect_trunks(&cloud, cfg.model.ground, &cfg.detection)?;
            write_trunks(&d.trunks, &output)?;
            println!("{} trunks from {} sources", d.trunks.len(), d.sources);
        }
        Command::Segment {
            io,
            trunks,
            fallback,
            no_fallback,
            baseline,
            graph,
            ground,
        } => {
            graph.apply(&mut cfg);
            ground.apply(&mut cfg);
            if fallback {
                cfg.fallback = true;
            }
            if no_fallback {
                cfg.fallback = false;
            }
            let cloud = read(&io.input)?;
            let trunks = read_trunks(&trunks)?;
            let labels = if baseline {
                let part = remove_ground(&cloud, cfg.model.ground)?;
                closest_trunk_baseline(&cloud, &trunks, Some(&part))?
            } else {
                let model = build_path_model(&cloud, &trunks, &cfg.model)?;
                segment_trees(&cloud, &model, cfg.fallback)?.labels
            };
            let ids: Vec<_> = labels.iter().map(|&l| Some(l)).collect();
            let classes: Vec<_> = labels
                .iter()
                .zip(cloud.points())
                .map(|(&l, p)| if l == 0 { Some(MatterClass::Ground) } else { p.matter_class.filter(|c| *c != MatterClass::Ground) })
                .collect();
            write(&cloud.relabeled(&ids, &classes)?, &io.output)?;
        }
        Command::Classify {
            io,
            trunks,
            classify,
            graph,
            ground,
        } => {
            classify.apply(&mut cfg);
            graph.apply(&mut cfg);
            ground.apply(&mut cfg);
            let cloud = read(&io.input)?;
            let trunks = read_trunks(&trunks)?;
            let model = build_path_model(&cloud, &trunks, &cfg.model)?;
            let scores = score_matter(&model.aggregate);
            let m = classify_matter(&cloud, &model, &scores, &cfg.classify)?;
            let ids: Vec<_> = cloud
                .points()
                .iter()
                .zip(&m.classes)
                .map(|(p, c)| match c {
                    MatterClass::Ground => Some(0),
                    _ => p.tree_id.filter(|&t| t != 0),
                })
                .collect();
            let classes: Vec<_> = m.classes.iter().map(|&c| Some(c)).collect();
            write(&cloud.relabeled(&ids, &classes)?, &io.output)?;
        }
        Command::Calibrate {
            labeled,
            trunks,
            smooth_radius,
            graph,
            ground,
        } => {
            graph.apply(&mut cfg);
            ground.apply(&mut cfg);
            set(&mut cfg.classify.smoothing_radius, smooth_radius);
            let cloud = read(&labeled)?;
            let trunks = read_trunks(&trunks)?;
            let model = build_path_model(&cloud, &trunks, &cfg.model)?;
            let scores = score_matter(&model.aggregate);
            let m = classify_matter(&cloud, &model, &scores, &cfg.classify)?;
            let c = calibrate(&m.scores, &cloud.classes())?;
            println!("class,count,mean,std_dev");
            println!("woody,{},{:.6},{:.6}", c.woody.count, c.woody.mean, c.woody.std_dev);
            println!("leafy,{},{:.6},{:.6}", c.leafy.count, c.leafy.mean, c.leafy.std_dev);
            println!("midpoint_threshold,{:.6}", c.midpoint_threshold);
            println!("best_f1_threshold,{:.6}", c.best_f1_threshold);
            println!("best_f1,{:.6}", c.best_f1);
        }
        Command::Simulate(args) => {
            let mut spec: OrchardSpec = load_toml(args.spec.as_deref())?;
            set(&mut spec.rows, args.rows);
            set(&mut spec.per_row, args.per_row);
            set(&mut spec.row_spacing, args.row_spacing);
            set(&mut spec.tree_spacing, args.tree_spacing);
            set(&mut spec.noise, args.noise);
            set(&mut spec.seed, args.seed);
            set(&mut spec.density_scale, args.density_scale);
            let o = generate_orchard(&spec)?;
            write(&o.cloud, &args.out)?;
            if let Some(p) = args.trunks_out {
                write_trunks(&o.trunks, p)?;
            }
            println!("{} points, {} trees", o.cloud.len(), o.trunks.len());
        }
        Command::Eval {
            kind,
            pred,
            truth,
            max_dist,
            out,
        } => {
            set(&mut cfg.match_distance, max_dist);
            let rows: Vec<(&str, f64)> = match kind {
                EvalKind::Trunks => {
                    let m = match_trunks(&read_trunks(&pred)?, &read_trunks(&truth)?, cfg.match_distance)?;
                    vec![
                        ("tp", m.tp as f64),
                        ("fp", m.fp as f64),
                        ("fn", m.fn_ as f64),
                        ("precision", m.precision),
                        ("recall", m.recall),
                        ("f1", m.f1),
                        ("mean_tp_distance", m.mean_tp_distance),
                    ]
                }
                EvalKind::Segmentation => {
                    let (p, t) = (read(&pred)?, read(&truth)?);
                    let v = segmentation_score(&p.tree_ids(), &t.tree_ids())?;
                    vec![
                        ("homogeneity", v.homogeneity),
                        ("completeness", v.completeness),
                        ("v_measure", v.v),
                    ]
                }
                EvalKind::Classification => {
                    let (p, t) = (read(&pred)?, read(&truth)?);
                    let s = binary_f1(&p.classes(), &t.classes())?;
                    vec![
                        ("tp", s.tp as f64),
                        ("fp", s.fp as f64),
                        ("fn", s.fn_ as f64),
                        ("tn", s.tn as f64),
                        ("f1", s.f1),
                    ]
                }
            };
            for (k, v) in &rows {
                println!("{k:>18}  {v}");
            }
            if let Some(path) = out {
                let mut text = String::from("metric,value\n");
                for (k, v) in &rows {
                    text.push_str(&format!("{k},{v}\n"));
                }
                fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Analyze {
            io,
            trunks,
            truth_trunks,
            no_detect,
            trunks_out,
            manifest,
            graph,
            ground,
            detect,
            classify,
        } => {
            graph.apply(&mut cfg);
            ground.apply(&mut cfg);
            detect.apply(&mut cfg);
            classify.apply(&mut cfg);
            if no_detect {
                cfg.detect = false;
            }
            if trunks.is_none() && !cfg.detect {
                bail!("configuration error: no trunk file given and detection is disabled");
            }
            let cloud = read(&io.input)?;
            let given: Option<Vec<TrunkPoint>> = trunks.map(read_trunks).transpose()?;
            let truth: Option<Vec<TrunkPoint>> = truth_trunks.map(read_trunks).transpose()?;
            let a = analyze(&cloud, given.as_deref(), truth.as_deref(), &cfg)?;
            write(&a.labeled, &io.output)?;
            if let Some(p) = trunks_out {
                write_trunks(&a.trunks, p)?;
            }
            let manifest = manifest.unwrap_or_else(|| {
                let mut p = io.output.clone().into_os_string();
                p.push(".manifest.json");
                p.into()
            });
            write_json(&a.manifest, &manifest)?;
            let m = &a.manifest.metrics;
            if let Some(v) = m.segmentation {
                println!("v-measure {:.4}", v.v);
            }
            if let Some(c) = m.classification {
                println!("matter F1 {:.4}", c.f1);
            }
            if let Some(t) = m.trunks {
                println!("trunks P {:.3} R {:.3} F1 {:.3}", t.precision, t.recall, t.f1);
            }
        }
        Command::Sweep { spec, out } => {
            let mut spec: SweepSpec = load_toml(Some(&spec))?;
            if cli.config.is_some() {
                spec.analyze = cfg;
            }
            let rows = sweep(&spec);
            write_sweep(&rows, &out)?;
            println!("{} result rows", rows.len());
        }
    }
    Ok(())
}
