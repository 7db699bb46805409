mod config;
mod record;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use metaforge::design::{
    design_grid, latent_bounds, run_design, verify, write_archive, ArchiveRow, DesignMode, DesignProblem,
};
use metaforge::generators::{build_dataset, FamilyMix, MaterialSample};
use metaforge::homogenizer::{label_manifest, LabeledDataset};
use metaforge::metrics::append_reports;
use metaforge::model::{slerp, CheckpointMeta, Model};
use metaforge::training::{
    encode_means, load_samples, progressive_schedule, run_phase_on, split_dataset, split_reports, write_ledger,
    Sample, Trainable,
};
use metaforge::uq::{convergence_sweep, predict_with_uncertainty, write_convergence_csv, write_uq_json, UqStart};
use metaforge::voxel::{binarize, mirror_eighth, save_grid, EighthCell, DEFAULT_THRESHOLD};

use config::{Profile, RunConfig};
use record::Recorder;

type CliResult<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "metaforge", version, about = "Generate, label, learn and design voxel metamaterial units")]
struct Cli {
    /// TOML file whose keys override the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<Profile>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Case {
    /// Maximize the bulk modulus.
    Bulk,
    /// Maximize E and nu together.
    ENu,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Robust,
    Deterministic,
}

#[derive(Subcommand)]
enum Command {
    /// Generate unit cells and a manifest.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        edge: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Homogenize every manifest row into a labeled dataset.
    Simulate {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        noise_draws: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the staged training schedule and save a checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint stem; `.params`, `.json` and `.ledger.csv` are added.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        patience: Option<usize>,
    },
    /// Append reconstruction and property metrics for one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the latent mean of every labeled unit.
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a spherical interpolation between two units.
    Interp {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        id1: String,
        #[arg(long)]
        id2: String,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Search the latent space for optimal designs.
    Design {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Labeled dataset whose training split sets the latent bounds.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        case: Case,
        #[arg(long, value_enum, default_value = "robust")]
        mode: ModeArg,
        /// Uncertainty weight; repeat for a sweep.
        #[arg(long, default_values_t = [5.0])]
        beta: Vec<f64>,
        #[arg(long)]
        vf: Option<f64>,
        #[arg(long)]
        generations: Option<usize>,
        #[arg(long)]
        population: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Skip the finite element check of the results.
        #[arg(long)]
        no_verify: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Uncertainty of one unit (by id) or latent point.
    Uq {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with = "z")]
        id: Option<String>,
        /// Latent vector as a JSON array.
        #[arg(long)]
        z: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Total uncertainty against the number of latent samples.
    UqConverge {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        id: String,
        #[arg(long, value_delimiter = ',', default_values_t = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100])]
        ns: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::FAILURE;
    }
    let cfg = match RunConfig::load(cli.config.as_deref(), cli.profile) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match run(cli.command, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("METAFORGE_THREADS") {
        let n: usize = v.parse().map_err(|_| format!("METAFORGE_THREADS must be a count, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn labeled_path(cfg: &RunConfig, data: Option<PathBuf>) -> PathBuf {
    data.unwrap_or_else(|| cfg.paths.data_dir.join("labeled.csv"))
}

fn load_labeled(path: &Path) -> CliResult<Vec<Sample>> {
    Ok(load_samples(&LabeledDataset::read_csv(path)?, path)?)
}

fn find<'a>(samples: &'a [Sample], id: &str) -> CliResult<&'a Sample> {
    samples.iter().find(|s| s.id == id).ok_or_else(|| format!("no unit with id {id:?}").into())
}

fn cell_of(model: &Model, s: &Sample) -> CliResult<EighthCell> {
    Ok(EighthCell::from_values(model.config().input_edge, s.cell.clone())?)
}

fn load_model(rec: &mut Recorder, stem: &Path) -> CliResult<Model> {
    rec.input(&stem.with_extension("params"))?;
    rec.input(&stem.with_extension("json"))?;
    Ok(Model::load(stem)?.0)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

fn run(command: Command, mut cfg: RunConfig) -> CliResult<()> {
    match command {
        Command::GenData { out, count, edge, seed } => {
            let g = &mut cfg.generator;
            g.count = count.unwrap_or(g.count);
            g.edge_voxels = edge.unwrap_or(g.edge_voxels);
            g.seed = seed.unwrap_or(g.seed);
            let out = out.unwrap_or(cfg.paths.data_dir.clone());
            let mut rec = Recorder::new("gen-data", &cfg.generator);
            let manifest = build_dataset(&cfg.generator, &FamilyMix::default(), &out)?;
            rec.output(out.join("manifest.csv"));
            for r in &manifest.rows {
                rec.output(out.join(&r.voxel_path));
            }
            let r = rec.finish(&out.join("manifest.csv.run.json"))?;
            log::info!("{} units written to {} (run {})", manifest.len(), out.display(), r.id);
        }
        Command::Simulate { manifest, out, noise_draws, seed } => {
            let manifest = manifest.unwrap_or_else(|| cfg.paths.data_dir.join("manifest.csv"));
            let out = out.unwrap_or_else(|| manifest.with_file_name("labeled.csv"));
            cfg.noise_draws = noise_draws.unwrap_or(cfg.noise_draws);
            cfg.label_seed = seed.unwrap_or(cfg.label_seed);
            let mut rec = Recorder::new("simulate", &(&cfg.solver, cfg.noise_draws, cfg.label_seed));
            rec.input(&manifest)?;
            let (mut data, warnings) =
                label_manifest(&manifest, &MaterialSample::aluminum(), cfg.noise_draws, cfg.label_seed, &cfg.solver)?;
            // Labeled voxel paths resolve against the labeled CSV's directory.
            let m_dir = manifest.parent().unwrap_or(Path::new("."));
            let o_dir = out.parent().unwrap_or(Path::new("."));
            if m_dir != o_dir {
                for r in &mut data.rows {
                    if Path::new(&r.voxel_path).is_relative() {
                        let abs = std::path::absolute(m_dir.join(&r.voxel_path))?;
                        r.voxel_path = abs.to_string_lossy().into_owned();
                    }
                }
            }
            ensure_parent(&out)?;
            data.write_csv(&out)?;
            rec.output(&out);
            let r = rec.finish(&sidecar(&out))?;
            if warnings > 0 {
                log::warn!("{warnings} rows skipped");
            }
            log::info!("{} rows labeled into {} (run {})", data.rows.len(), out.display(), r.id);
        }
        Command::Train { data, out, epochs, patience } => {
            let data = labeled_path(&cfg, data);
            let stem = out.unwrap_or_else(|| cfg.paths.checkpoint_dir.join("model"));
            if let Some(e) = epochs {
                cfg.schedule.train.epochs = e;
            }
            if let Some(p) = patience {
                cfg.schedule.train.patience = p;
            }
            let samples = load_labeled(&data)?;
            let Some(first) = samples.first() else {
                return Err("labeled dataset is empty".into());
            };
            let edge = (first.cell.len() as f64).cbrt().round() as usize;
            if edge != cfg.model.input_edge {
                log::info!("input edge set to {edge} from the data");
                cfg.model.input_edge = edge;
            }
            let mut rec = Recorder::new("train", &(&cfg.model, &cfg.schedule, &cfg.split));
            rec.input(&data)?;
            let split = split_dataset(&samples, &cfg.split)?;
            let outcome = progressive_schedule(&split.train, &split.val, &cfg.model, &cfg.schedule)?;
            let mut model = outcome.model;
            if model.config().deterministic_head {
                run_phase_on(&mut model, &outcome.weights, &split.train, &split.val, &cfg.schedule.train, Trainable::DeterministicHead)?;
            }
            let mut meta = CheckpointMeta {
                loss_weights: Some(outcome.weights),
                training_phase: "step3".into(),
                epoch: outcome.ledger.iter().map(|r| r.epochs).sum(),
                metrics: Default::default(),
            };
            for r in split_reports(&model, "val", &split.val)? {
                meta.metrics.insert(format!("{}_{}_{}", r.split, r.metric, r.property), r.value.into());
            }
            ensure_parent(&stem)?;
            model.save(&stem, &meta)?;
            let ledger = PathBuf::from(format!("{}.ledger.csv", stem.display()));
            write_ledger(&outcome.ledger, &ledger)?;
            rec.output(stem.with_extension("params"));
            rec.output(stem.with_extension("json"));
            rec.output(&ledger);
            let r = rec.finish(&PathBuf::from(format!("{}.run.json", stem.display())))?;
            log::info!("checkpoint {} (run {}), val metrics {:?}", stem.display(), r.id, meta.metrics);
        }
        Command::Evaluate { checkpoint, data, split, out } => {
            let data = labeled_path(&cfg, data);
            let out = out.unwrap_or_else(|| cfg.paths.results_dir.join("eval.csv"));
            let mut rec = Recorder::new("evaluate", &(&cfg.split, format!("{split:?}")));
            let model = load_model(&mut rec, &checkpoint)?;
            rec.input(&data)?;
            let parts = split_dataset(&load_labeled(&data)?, &cfg.split)?;
            let (name, rows) = match split {
                SplitName::Train => ("train", &parts.train),
                SplitName::Val => ("val", &parts.val),
                SplitName::Test => ("test", &parts.test),
            };
            let reports = split_reports(&model, name, rows)?;
            ensure_parent(&out)?;
            append_reports(&out, &reports)?;
            rec.output(&out);
            rec.finish(&sidecar(&out))?;
            for r in &reports {
                println!("{},{},{},{},{}", r.split, r.metric, r.property, r.value, r.n);
            }
        }
        Command::Encode { checkpoint, data, out } => {
            let data = labeled_path(&cfg, data);
            let mut rec = Recorder::new("encode", &());
            let model = load_model(&mut rec, &checkpoint)?;
            rec.input(&data)?;
            let samples = load_labeled(&data)?;
            let means = encode_means(&model, &samples)?;
            ensure_parent(&out)?;
            let mut w = csv::Writer::from_path(&out)?;
            let mut header = vec!["id".to_string()];
            header.extend((0..model.latent_dim()).map(|i| format!("z{i}")));
            w.write_record(&header)?;
            for (s, z) in samples.iter().zip(&means) {
                let mut row = vec![s.id.clone()];
                row.extend(z.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
            w.flush()?;
            rec.output(&out);
            rec.finish(&sidecar(&out))?;
        }
        Command::Interp { checkpoint, data, id1, id2, steps, out } => {
            if steps < 2 {
                return Err("need at least 2 steps".into());
            }
            let data = labeled_path(&cfg, data);
            let mut rec = Recorder::new("interp", &steps);
            let model = load_model(&mut rec, &checkpoint)?;
            rec.input(&data)?;
            rec.input_value(&format!("{id1}|{id2}"));
            let samples = load_labeled(&data)?;
            let a = model.encode(&cell_of(&model, find(&samples, &id1)?)?)?.mean;
            let b = model.encode(&cell_of(&model, find(&samples, &id2)?)?)?.mean;
            std::fs::create_dir_all(&out)?;
            let table = out.join("interp.csv");
            let mut w = csv::Writer::from_path(&table)?;
            w.write_record(["step", "t", "vf", "file"])?;
            for k in 0..steps {
                let t = k as f64 / (steps - 1) as f64;
                let z = slerp(&a, &b, t)?;
                let octant = EighthCell::new(binarize(model.decode(&z)?.grid(), DEFAULT_THRESHOLD));
                let grid = mirror_eighth(&octant);
                let name = format!("step_{k:03}.vox");
                save_grid(&grid, &out.join(&name))?;
                w.write_record([k.to_string(), t.to_string(), grid.volume_fraction().to_string(), name.clone()])?;
                rec.output(out.join(name));
            }
            w.flush()?;
            rec.output(&table);
            rec.finish(&out.join("run.json"))?;
        }
        Command::Design { checkpoint, data, case, mode, beta, vf, generations, population, seed, no_verify, out } => {
            let data = labeled_path(&cfg, data);
            cfg.nsga.generations = generations.unwrap_or(cfg.nsga.generations);
            cfg.nsga.population = population.unwrap_or(cfg.nsga.population);
            cfg.nsga.seed = seed.unwrap_or(cfg.nsga.seed);
            let mode = match mode {
                ModeArg::Robust => DesignMode::Robust,
                ModeArg::Deterministic => DesignMode::Deterministic,
            };
            let mut rec = Recorder::new("design", &(&cfg.nsga, &cfg.uq, &cfg.verification, format!("{case:?}"), mode, &beta, vf, no_verify));
            let model = load_model(&mut rec, &checkpoint)?;
            rec.input(&data)?;
            let split = split_dataset(&load_labeled(&data)?, &cfg.split)?;
            let bounds = latent_bounds(&encode_means(&model, &split.train)?)?;
            let case_name = match case {
                Case::Bulk => "bulk",
                Case::ENu => "e-nu",
            };
            let mut rows = Vec::new();
            let mut grids = Vec::new();
            for &b in &beta {
                let mut problem = match case {
                    Case::Bulk => DesignProblem { mode, ..DesignProblem::bulk_modulus(b, bounds.clone()) },
                    Case::ENu => DesignProblem::stiff_and_expanding(mode, b, bounds.clone()),
                };
                if let Some(v) = vf {
                    problem.vf_target = v;
                }
                let run = run_design(&model, &problem, &cfg.nsga, &cfg.uq)?;
                let picked: Vec<_> = match case {
                    Case::Bulk => vec![run.winner().clone()],
                    Case::ENu => run.front.clone(),
                };
                for ind in picked {
                    let fea = match (&ind.grid, no_verify) {
                        (Some(g), false) => Some(verify(g, &cfg.verification)?),
                        _ => None,
                    };
                    let mut row = ArchiveRow::new(case_name, b, &ind, fea.as_ref())?;
                    if mode == DesignMode::Deterministic && ind.grid.is_some() {
                        row = row.with_means(model.deterministic_predict(&ind.z)?);
                    }
                    rows.push(row);
                    grids.push(ind.grid.clone().or_else(|| design_grid(&model, &ind.z).ok()));
                }
                log::info!("beta {b}: {} design(s)", rows.len());
            }
            let grid_refs: Vec<_> = grids.iter().map(Option::as_ref).collect();
            write_archive(&out, &rows, &grid_refs)?;
            rec.output(out.join("archive.csv"));
            rec.finish(&out.join("run.json"))?;
        }
        Command::Uq { checkpoint, data, id, z, n, out } => {
            cfg.uq.n_samples = n.unwrap_or(cfg.uq.n_samples);
            let mut rec = Recorder::new("uq", &cfg.uq);
            let model = load_model(&mut rec, &checkpoint)?;
            let result = match (id, z) {
                (Some(id), None) => {
                    let data = labeled_path(&cfg, data);
                    rec.input(&data)?;
                    rec.input_value(&id);
                    let samples = load_labeled(&data)?;
                    let cell = cell_of(&model, find(&samples, &id)?)?;
                    predict_with_uncertainty(&model, &UqStart::Cell(&cell), &cfg.uq)?.result
                }
                (None, Some(z)) => {
                    rec.input_value(&z);
                    let z: Vec<f64> = serde_json::from_str(&z)?;
                    predict_with_uncertainty(&model, &UqStart::Latent(&z), &cfg.uq)?.result
                }
                _ => return Err("give exactly one of --id or --z".into()),
            };
            ensure_parent(&out)?;
            write_uq_json(&result, &out)?;
            rec.output(&out);
            rec.finish(&sidecar(&out))?;
        }
        Command::UqConverge { checkpoint, data, id, ns, out } => {
            let data = labeled_path(&cfg, data);
            let mut rec = Recorder::new("uq-converge", &(&cfg.uq, &ns));
            let model = load_model(&mut rec, &checkpoint)?;
            rec.input(&data)?;
            rec.input_value(&id);
            let samples = load_labeled(&data)?;
            let cell = cell_of(&model, find(&samples, &id)?)?;
            let rows = convergence_sweep(&model, &UqStart::Cell(&cell), &ns, &cfg.uq)?;
            ensure_parent(&out)?;
            write_convergence_csv(&rows, &out)?;
            rec.output(&out);
            rec.finish(&sidecar(&out))?;
        }
    }
    Ok(())
}
