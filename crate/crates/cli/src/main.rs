mod config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use config::{parse_area, parse_roi, PipelineConfig, RoiSection};
use rfsel::densify::densify;
use rfsel::eval::{run_benchmark, write_report_csv, BenchConfig};
use rfsel::io::{read_records, read_samples, write_samples};
use rfsel::model::{partition, LabeledSample, Point, Rfm, RoiGeometry};
use rfsel::pipeline::{densify_rfm, precompute};
use rfsel::select::{build_profile, split_cells, SelectorKind};
use rfsel::subregion::{loss_curve, MjiFormula};
use rfsel::synth::{generate, WorldConfig};
use rfsel::{load_bundle, save_bundle, Error, LocateConfig, Locator, Method, Result};

#[derive(Parser)]
#[command(name = "rfsel", version, about = "Subregion- and feature-selective fingerprint positioning")]
struct Cli {
    /// TOML pipeline configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: rfm.jsonl, tests.jsonl and world.meta.
    Synth(SynthArgs),
    /// Validate and normalize a raw fingerprint file.
    Ingest(IngestArgs),
    /// Resample a reference map onto the per-cell lattice.
    Densify(DensifyArgs),
    /// Subregion selection loss for m = 1..=m_max.
    SegmentEval(SegmentEvalArgs),
    /// Select relevant features per subregion.
    Featsel(FeatselArgs),
    /// Run the offline stage and write a bundle.
    Precompute(PrecomputeArgs),
    /// Position query fingerprints against a bundle.
    Locate(LocateArgs),
    /// Benchmark time and accuracy over a grid of settings.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_area, default_value = "20x10")]
    area: (f64, f64),
    #[arg(long, default_value_t = 40)]
    emitters: usize,
    /// Reference samples per m².
    #[arg(long, default_value_t = 4.0)]
    density: f64,
    /// Shadowing noise, dB.
    #[arg(long, default_value_t = 3.0)]
    noise: f64,
    #[arg(long, default_value_t = 300)]
    tests: usize,
    /// Leave out the internal walls of the standard floor.
    #[arg(long)]
    no_walls: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RfmArgs {
    /// Reference map, JSON Lines.
    #[arg(long = "in", alias = "rfm")]
    input: Option<PathBuf>,
    /// RoI as x,y,width,height; defaults to the grid-aligned bounding box.
    #[arg(long, value_parser = parse_roi)]
    roi: Option<RoiSection>,
    #[arg(long)]
    cell_size: Option<f64>,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    rfm: RfmArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DensifyFlags {
    #[arg(long)]
    spacing: Option<f64>,
    #[arg(long)]
    length_scale: Option<f64>,
}

#[derive(Args)]
struct DensifyArgs {
    #[command(flatten)]
    rfm: RfmArgs,
    #[command(flatten)]
    densify: DensifyFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentEvalArgs {
    #[command(flatten)]
    rfm: RfmArgs,
    /// Validation samples; defaults to the test set, then the map itself.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    m_max: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectorFlags {
    #[arg(long)]
    method: Option<SelectorKind>,
    #[arg(long)]
    positioner: Option<Method>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    nu: Option<f64>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct FeatselArgs {
    #[command(flatten)]
    rfm: RfmArgs,
    #[command(flatten)]
    densify: DensifyFlags,
    #[command(flatten)]
    selector: SelectorFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrecomputeArgs {
    #[command(flatten)]
    rfm: RfmArgs,
    #[command(flatten)]
    densify: DensifyFlags,
    #[command(flatten)]
    selector: SelectorFlags,
    #[arg(long)]
    validation: Option<PathBuf>,
    /// Skip choosing m from the subregion loss curve.
    #[arg(long)]
    no_choose_m: bool,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    p_miss: Option<f64>,
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Args)]
struct LocateArgs {
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    m: Option<usize>,
    /// Features per query; -1 uses every relevant feature.
    #[arg(long, allow_negative_numbers = true)]
    h: Option<i64>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    tests: Option<PathBuf>,
    /// e.g. "methods=knn,map;m=11,16,21,M;h=-1"; M is the cell count.
    #[arg(long, default_value = "methods=knn,map;m=M;h=-1")]
    grid: String,
    #[arg(long)]
    k: Option<usize>,
    /// Leave out the full-search reference rows.
    #[arg(long)]
    no_full: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.code());
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if cli.seed.is_some() {
        config.seed = cli.seed;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(&config, a),
        Command::Ingest(a) => cmd_ingest(&mut config, a),
        Command::Densify(a) => cmd_densify(&mut config, a),
        Command::SegmentEval(a) => cmd_segment_eval(&mut config, a),
        Command::Featsel(a) => cmd_featsel(&mut config, a),
        Command::Precompute(a) => cmd_precompute(&mut config, a),
        Command::Locate(a) => cmd_locate(&mut config, a),
        Command::Eval(a) => cmd_eval(&mut config, a),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}

fn io_err(path: &Path, e: io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source: e,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

/// Output file, or stdout for `None`.
fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn merge_rfm(config: &mut PipelineConfig, a: &RfmArgs) -> Result<PathBuf> {
    if let Some(p) = &a.input {
        config.paths.rfm = Some(p.clone());
    }
    if a.roi.is_some() {
        config.roi = a.roi;
    }
    if a.cell_size.is_some() {
        config.segmentation.cell_size = a.cell_size;
    }
    config.validate()?;
    config
        .paths
        .rfm
        .clone()
        .ok_or_else(|| usage("no reference map given (--in or paths.rfm)"))
}

fn merge_densify(config: &mut PipelineConfig, a: &DensifyFlags) {
    config.densify.spacing = a.spacing.or(config.densify.spacing);
    config.densify.length_scale = a.length_scale.or(config.densify.length_scale);
}

fn merge_selector(config: &mut PipelineConfig, a: &SelectorFlags) {
    let s = &mut config.selector;
    s.method = a.method.or(s.method);
    s.positioner = a.positioner.or(s.positioner);
    s.epsilon = a.epsilon.or(s.epsilon);
    s.nu = a.nu.or(s.nu);
    s.k_max = a.k_max.or(s.k_max);
    s.k_min = a.k_min.or(s.k_min);
    s.phi = a.phi.or(s.phi);
    config.locate.k = a.k.or(config.locate.k);
}

fn load_rfm(config: &PipelineConfig, path: &Path) -> Result<Rfm> {
    let samples = read_samples(path)?;
    if samples.is_empty() {
        return Err(Error::EmptyRfm);
    }
    let roi = match config.roi {
        Some(r) => config.roi_geometry(r)?,
        None => RoiGeometry::enclosing(samples.iter().map(|s| &s.location), config.cell_size())?,
    };
    let rfm = Rfm::new(samples, roi)?;
    info!("read {} samples with {} features", rfm.len(), rfm.feature_universe().len());
    Ok(rfm)
}

#[derive(Serialize)]
struct WorldMeta<'a> {
    seed: u64,
    config: &'a WorldConfig,
    emitters: &'a [rfsel::synth::Emitter],
}

fn cmd_synth(config: &PipelineConfig, a: SynthArgs) -> Result<()> {
    let base = WorldConfig::standard(config.seed());
    let (width, height) = a.area;
    let world_config = WorldConfig {
        roi: RoiGeometry::new(Point::default(), width, height, config.cell_size())?,
        n_emitters: a.emitters,
        sample_density: a.density,
        noise_sigma: a.noise,
        test_count: a.tests,
        walls: if a.no_walls { Vec::new() } else { base.walls.clone() },
        ..base
    };
    let world = generate(&world_config)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_samples(&a.out.join("rfm.jsonl"), world.rfm.samples())?;
    write_samples(&a.out.join("tests.jsonl"), &world.tests)?;
    write_json(
        &a.out.join("world.meta"),
        &WorldMeta {
            seed: world_config.seed,
            config: &world_config,
            emitters: &world.emitters,
        },
    )?;
    println!(
        "wrote {} reference samples and {} test queries to {}",
        world.rfm.len(),
        world.tests.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_ingest(config: &mut PipelineConfig, a: IngestArgs) -> Result<()> {
    let path = merge_rfm(config, &a.rfm)?;
    let rfm = load_rfm(config, &path)?;
    let index = partition(&rfm, config.cell_size())?;
    let roi = rfm.roi();
    println!("samples: {}", rfm.len());
    println!("features: {}", rfm.feature_universe().len());
    println!(
        "roi: origin ({}, {}), {} x {} m, {} cells ({} non-empty)",
        roi.origin.x,
        roi.origin.y,
        roi.width,
        roi.height,
        index.len(),
        index.non_empty_count()
    );
    if let Some(out) = &a.out {
        write_samples(out, rfm.samples())?;
    }
    Ok(())
}

fn cmd_densify(config: &mut PipelineConfig, a: DensifyArgs) -> Result<()> {
    let path = merge_rfm(config, &a.rfm)?;
    merge_densify(config, &a.densify);
    config.validate()?;
    let rfm = load_rfm(config, &path)?;
    let index = partition(&rfm, config.cell_size())?;
    let gridded = densify(&rfm, &index, &config.densify_params())?;
    write_samples(&a.out, &gridded.to_samples())?;
    println!(
        "wrote {} grid points ({} per cell, spacing {} m) to {}",
        gridded.points().len(),
        gridded.alpha(),
        gridded.grid_spacing(),
        a.out.display()
    );
    Ok(())
}

fn validation_set(config: &PipelineConfig, explicit: Option<&PathBuf>) -> Result<Option<Vec<LabeledSample>>> {
    match explicit.or(config.paths.validation.as_ref()).or(config.paths.tests.as_ref()) {
        Some(p) => Ok(Some(read_samples(p)?)),
        None => Ok(None),
    }
}

fn cmd_segment_eval(config: &mut PipelineConfig, a: SegmentEvalArgs) -> Result<()> {
    let path = merge_rfm(config, &a.rfm)?;
    let rfm = load_rfm(config, &path)?;
    let index = partition(&rfm, config.cell_size())?;
    let val = validation_set(config, a.validation.as_ref())?;
    let val = val.as_deref().unwrap_or(rfm.samples());
    let m_max = a.m_max.unwrap_or(index.len());
    let curve = loss_curve(MjiFormula::Coverage, val, &index, m_max)?;
    let mut out = sink(a.out.as_deref())?;
    let target = a.out.clone().unwrap_or_else(|| PathBuf::from("-"));
    curve.write_csv(&mut out).map_err(|e| io_err(&target, e))?;
    out.flush().map_err(|e| io_err(&target, e))
}

fn cmd_featsel(config: &mut PipelineConfig, a: FeatselArgs) -> Result<()> {
    let path = merge_rfm(config, &a.rfm)?;
    merge_densify(config, &a.densify);
    merge_selector(config, &a.selector);
    let pre = config.precompute()?;
    let rfm = load_rfm(config, &path)?;
    let (gridded, _) = densify_rfm(&rfm, pre.cell_size, &pre.densify)?;
    let cells = split_cells(&gridded, pre.selector.validation_fraction, pre.selector.seed)?;
    let profile = build_profile(&cells, &pre.selector)?;
    profile.save(&a.out)?;
    for s in profile.cells.values() {
        info!("cell {}: {} features, loss {:.4}", s.cell_index, s.features.len(), s.final_loss);
    }
    println!("selected features for {} cells into {}", profile.cells.len(), a.out.display());
    Ok(())
}

fn cmd_precompute(config: &mut PipelineConfig, a: PrecomputeArgs) -> Result<()> {
    let path = merge_rfm(config, &a.rfm)?;
    merge_densify(config, &a.densify);
    merge_selector(config, &a.selector);
    if a.no_choose_m {
        config.segmentation.choose_m = Some(false);
    }
    config.locate.sigma = a.sigma.or(config.locate.sigma);
    config.locate.p_miss = a.p_miss.or(config.locate.p_miss);
    if a.bundle.is_some() {
        config.paths.bundle = a.bundle.clone();
    }
    let bundle_path = config
        .paths
        .bundle
        .clone()
        .ok_or_else(|| usage("no bundle path given (--bundle or paths.bundle)"))?;
    let pre_config = config.precompute()?;
    let rfm = load_rfm(config, &path)?;
    let val = match &a.validation {
        Some(p) => Some(read_samples(p)?),
        None => config.paths.validation.as_deref().map(read_samples).transpose()?,
    };
    let start = Instant::now();
    let pre = precompute(&rfm, &pre_config, val.as_deref())?;
    save_bundle(&pre.bundle, &bundle_path)?;
    let s = &pre.summary;
    println!("cells: {} ({} non-empty)", s.cells, s.non_empty_cells);
    println!("alpha: {}", s.alpha);
    println!("features: {}", s.features);
    match s.chosen_m {
        Some(m) => println!("chosen m: {m}"),
        None => println!("chosen m: -"),
    }
    let counts: Vec<String> = s.selected_counts.iter().map(|(c, n)| format!("{c}:{n}")).collect();
    println!("selected per cell: {}", counts.join(" "));
    println!("seed: {}", pre_config.selector.seed);
    println!("wrote {} in {:.2} s", bundle_path.display(), start.elapsed().as_secs_f64());
    Ok(())
}

fn open_locator(config: &PipelineConfig, bundle: Option<PathBuf>) -> Result<Locator> {
    let path = bundle
        .or_else(|| config.paths.bundle.clone())
        .ok_or_else(|| usage("no bundle given (--bundle or paths.bundle)"))?;
    Locator::new(load_bundle(&path)?)
}

fn cmd_locate(config: &mut PipelineConfig, a: LocateArgs) -> Result<()> {
    config.locate.method = a.method.or(config.locate.method);
    config.locate.m = a.m.or(config.locate.m);
    config.locate.h = a.h.or(config.locate.h);
    config.locate.k = a.k.or(config.locate.k);
    config.validate()?;
    let locator = open_locator(config, a.bundle)?;
    let bundle = locator.bundle();
    let m = config
        .locate
        .m
        .or(bundle.meta().chosen_m)
        .unwrap_or(bundle.cell_count());
    let locate = LocateConfig {
        k: config.positioning()?.k,
        ..LocateConfig::new(config.positioning()?.method, m, config.h())
    };
    let records = read_records(&a.input)?;
    let target = a.out.clone().unwrap_or_else(|| PathBuf::from("-"));
    let mut out = csv::Writer::from_writer(sink(a.out.as_deref())?);
    out.write_record(["query_id", "x", "y", "elapsed_seconds", "fallback_flag"])?;
    for (i, r) in records.iter().enumerate() {
        let id = r.id.clone().unwrap_or_else(|| (i + 1).to_string());
        let fp = r.fingerprint().map_err(|e| Error::Parse {
            path: a.input.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let start = Instant::now();
        let est = locator.online_position(&fp, &locate)?;
        let elapsed = start.elapsed().as_secs_f64();
        out.write_record([
            id,
            est.location.x.to_string(),
            est.location.y.to_string(),
            format!("{elapsed:.6e}"),
            u8::from(est.fallback).to_string(),
        ])?;
    }
    out.flush().map_err(|e| io_err(&target, e))
}

/// Parses `methods=knn,map;m=11,16,21,M;h=-1` into benchmark settings.
fn parse_grid(grid: &str, cells: usize, k: usize) -> Result<Vec<BenchConfig>> {
    let mut methods = vec![Method::Knn, Method::Map];
    let mut ms = vec![cells];
    let mut hs: Vec<Option<usize>> = vec![None];
    for part in grid.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("grid entry {part:?} is not key=values")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).collect();
        match key.trim() {
            "methods" | "method" => {
                methods = values.iter().map(|v| v.parse()).collect::<Result<_>>()?;
            }
            "m" => {
                ms = values
                    .iter()
                    .map(|v| match *v {
                        "M" => Ok(cells),
                        _ => v.parse().map_err(|_| usage(format!("bad m {v:?}"))),
                    })
                    .collect::<Result<_>>()?;
            }
            "h" => {
                hs = values
                    .iter()
                    .map(|v| {
                        let h: i64 = v.parse().map_err(|_| usage(format!("bad h {v:?}")))?;
                        Ok(usize::try_from(h).ok())
                    })
                    .collect::<Result<_>>()?;
            }
            other => return Err(usage(format!("unknown grid key {other:?}"))),
        }
    }
    let mut out = Vec::new();
    for &method in &methods {
        for &m in &ms {
            if m == 0 || m > cells {
                return Err(Error::BadM { m, cells });
            }
            for &h in &hs {
                out.push(BenchConfig {
                    k,
                    ..BenchConfig::online(method, m, h)
                });
            }
        }
    }
    Ok(out)
}

fn cmd_eval(config: &mut PipelineConfig, a: EvalArgs) -> Result<()> {
    config.locate.k = a.k.or(config.locate.k);
    config.validate()?;
    let tests_path = a
        .tests
        .or_else(|| config.paths.tests.clone())
        .ok_or_else(|| usage("no test set given (--tests or paths.tests)"))?;
    let tests = read_samples(&tests_path)?;
    let locator = open_locator(config, a.bundle)?;
    let cells = locator.bundle().cell_count();
    let k = config.positioning()?.k;
    let mut grid = parse_grid(&a.grid, cells, k)?;
    if !a.no_full {
        let mut methods: Vec<Method> = grid.iter().map(|c| c.method).collect();
        methods.dedup();
        grid.extend(methods.into_iter().map(|m| BenchConfig {
            k,
            ..BenchConfig::full(m, cells)
        }));
    }
    let reports = run_benchmark(&locator, &tests, &grid)?;
    write_report_csv(&reports, sink(a.out.as_deref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expands() {
        let g = parse_grid("methods=knn,map;m=11,16,21,M;h=-1", 50, 5).unwrap();
        assert_eq!(g.len(), 8);
        assert_eq!(g[3].m, 50);
        assert!(g.iter().all(|c| c.h.is_none() && !c.full_search));
        let g = parse_grid("methods=map;m=3;h=2,-1", 10, 5).unwrap();
        assert_eq!(g.iter().map(|c| c.h).collect::<Vec<_>>(), [Some(2), None]);
    }

    #[test]
    fn grid_rejects_nonsense() {
        assert!(parse_grid("m=0", 50, 5).is_err());
        assert!(parse_grid("m=51", 50, 5).is_err());
        assert!(parse_grid("foo=1", 50, 5).is_err());
        assert!(parse_grid("methods=svm", 50, 5).is_err());
    }
}
