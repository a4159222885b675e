use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader};
use std::os::unix::net::UnixListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::{json, Value};

use dynscale::imageio::save_png;
use dynscale::plot::{loss_share_svg, ratio_histogram_svg};
use dynscale::service::{compose_group, ComposedGroup, ScratchConfig};
use dynscale::{
    dataset_scale_stats, load_annotations, run_simulation, CollageK, Dataset, Decision, Mode,
    Sampler, ScaleClass, Service, ServiceOptions, SimConfig, SimPolicy, SimReport, Strategy,
    SyntheticSpec,
};

const REFERENCE_SMALL_SHARE: f64 = 0.41;
const REFERENCE_COVERAGE: [f64; 3] = [0.52, 0.71, 0.83];

#[derive(Parser)]
#[command(
    name = "dynscale",
    version,
    about = "Scale-balanced data preparation: stats, collages, service, simulation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-scale instance share and image coverage of an annotation file.
    Stats(StatsArgs),
    /// Build an offline collage dataset (PNG images + COCO annotations).
    BuildCollage(BuildArgs),
    /// Run the feedback service over stdio or a local socket.
    Serve(ServeArgs),
    /// Compare data policies on the surrogate training loop.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    tiny_filter: bool,
    /// Worker threads (0 = one per core).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct ServeArgs {
    /// Annotation file validated at startup; sessions naming it reuse the loaded copy.
    #[arg(long)]
    dataset: PathBuf,
    /// Listen on this socket path instead of stdin/stdout.
    #[arg(long)]
    socket: Option<PathBuf>,
    /// Directory for per-session trace CSVs and server-side collages.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Image directory; enables server-side composition of collage plans.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum PlotFormat {
    Svg,
    None,
}

#[derive(Args)]
struct SimulateArgs {
    /// Annotation file, or `synthetic:coco-like`, `synthetic:small-starved`,
    /// `synthetic:small-clustered`.
    #[arg(long, default_value = "synthetic:coco-like")]
    dataset: String,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Comma-separated policies, or `all`.
    #[arg(long, default_value = "all")]
    strategy: String,
    #[arg(long, default_value_t = dynscale::controller::DEFAULT_TAU)]
    tau: f64,
    #[arg(long, default_value_t = 4)]
    k: u32,
    #[arg(long, default_value_t = 2)]
    batch_size: usize,
    #[arg(long, default_value_t = 10_000)]
    iters: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds per policy.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    tiny_filter: bool,
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    #[arg(long, value_enum, default_value_t = PlotFormat::Svg)]
    plot: PlotFormat,
}

/// An error with its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

trait ExitClass<T> {
    fn input(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> ExitClass<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: 2,
            error: e.into(),
        })
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code: 3,
            error: e.into(),
        })
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DST_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stats(a) => cmd_stats(a),
        Command::BuildCollage(a) => cmd_build_collage(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Simulate(a) => cmd_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .context("cannot start worker pool")
}

fn cmd_stats(args: StatsArgs) -> Result<(), Failure> {
    let ds = load_annotations(&args.dataset).input()?;
    let stats = dataset_scale_stats(&ds).input()?;

    let mut text = String::new();
    let _ = writeln!(text, "dataset: {}", args.dataset.display());
    let _ = writeln!(
        text,
        "images: {}  instances: {}",
        stats.images, stats.instances
    );
    let _ = writeln!(
        text,
        "{:<8}{:>12}{:>12}{:>12}",
        "scale", "instances", "share", "coverage"
    );
    for c in ScaleClass::ALL {
        let _ = writeln!(
            text,
            "{:<8}{:>12}{:>11.2}%{:>11.2}%",
            c.to_string(),
            stats.counts[c],
            100.0 * stats.instance_share[c],
            100.0 * stats.image_coverage[c]
        );
    }
    let _ = writeln!(text, "\nreference (COCO 2017 train):");
    let _ = writeln!(
        text,
        "  small instance share > {:.0}%: {:.2}% [{}]",
        100.0 * REFERENCE_SMALL_SHARE,
        100.0 * stats.instance_share.s,
        if stats.instance_share.s > REFERENCE_SMALL_SHARE {
            "yes"
        } else {
            "no"
        }
    );
    for (c, reference) in ScaleClass::ALL.into_iter().zip(REFERENCE_COVERAGE) {
        let got = stats.image_coverage[c];
        let _ = writeln!(
            text,
            "  {c} coverage {:.0}%: {:.2}% (diff {:+.2}pp)",
            100.0 * reference,
            100.0 * got,
            100.0 * (got - reference)
        );
    }
    print!("{text}");

    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))
        .runtime()?;
    fs::write(args.out.join("stats.txt"), &text).runtime()?;
    let mut csv = String::from("scale,instances,instance_share,image_coverage\n");
    for c in ScaleClass::ALL {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            c.short_name(),
            stats.counts[c],
            stats.instance_share[c],
            stats.image_coverage[c]
        );
    }
    fs::write(args.out.join("stats.csv"), csv).runtime()?;
    Ok(())
}

/// Seeded partition of the dataset into groups of `k` distinct images; the
/// remainder (fewer than `k` images) is left out.
fn collage_groups(ds: &Dataset, k: CollageK, seed: u64) -> Vec<Vec<dynscale::ImageId>> {
    let mut sampler = Sampler::new(ds.image_ids(), seed);
    let n = ds.len() / k.get() as usize;
    (0..n as u64)
        .map(|iter| {
            let decision = Decision {
                iter,
                mode: Mode::Collage,
                r_s: None,
            };
            sampler
                .next_batch(&decision, 1, k)
                .expect("group count bounded by dataset size")
                .groups
                .remove(0)
        })
        .collect()
}

fn cmd_build_collage(args: BuildArgs) -> Result<(), Failure> {
    let k = CollageK::new(args.k).input()?;
    let ds = load_annotations(&args.dataset).input()?;
    if ds.is_empty() {
        return Err(anyhow!("empty dataset")).input();
    }
    if !args.images.is_dir() {
        return Err(anyhow!(
            "image directory {} not found",
            args.images.display()
        ))
        .input();
    }
    let image_dir = args.out.join("images");
    fs::create_dir_all(&image_dir)
        .with_context(|| format!("cannot create {}", image_dir.display()))
        .runtime()?;

    let groups = collage_groups(&ds, k, args.seed);
    let leftover = ds.len() - groups.len() * k.get() as usize;
    if leftover > 0 {
        log::info!("{leftover} images left over after grouping by {k}");
    }
    let pool = thread_pool(args.jobs).runtime()?;
    let outcomes: Vec<Result<ComposedGroup, String>> = pool.install(|| {
        groups
            .par_iter()
            .enumerate()
            .map(|(i, group)| {
                let composed = compose_group(&ds, &args.images, group, k, args.tiny_filter)
                    .map_err(|e| e.to_string())?;
                let path = image_dir.join(format!("collage_{:06}.png", i + 1));
                save_png(&path, &composed.result.pixels).map_err(|e| e.to_string())?;
                Ok(composed)
            })
            .collect()
    });

    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let (mut skipped, mut dropped_tiny) = (0usize, 0usize);
    for (i, (group, outcome)) in groups.iter().zip(outcomes).enumerate() {
        let composed = match outcome {
            Ok(c) => c,
            Err(e) => {
                log::warn!("skipping group {group:?}: {e}");
                skipped += 1;
                continue;
            }
        };
        let id = (i + 1) as u64;
        dropped_tiny += composed.result.dropped_tiny;
        images.push(json!({
            "id": id,
            "width": composed.plan.canvas_w,
            "height": composed.plan.canvas_h,
            "file_name": format!("collage_{id:06}.png"),
            "source_ids": group,
        }));
        for a in &composed.result.annotations {
            annotations.push(json!({
                "id": a.id,
                "image_id": id,
                "bbox": a.bbox.xywh(),
                "area": a.bbox.area(),
                "category_id": a.category_id,
                "iscrowd": u8::from(a.iscrowd),
            }));
        }
    }
    let categories: Vec<Value> = ds
        .categories()
        .iter()
        .map(|(id, name)| json!({ "id": id, "name": name }))
        .collect();
    let doc = json!({ "images": images, "annotations": annotations, "categories": categories });
    let ann_path = args.out.join("annotations.json");
    fs::write(&ann_path, serde_json::to_vec(&doc).runtime()?)
        .with_context(|| format!("cannot write {}", ann_path.display()))
        .runtime()?;

    println!(
        "collages: {}  skipped groups: {skipped}  annotations: {}  dropped_tiny: {dropped_tiny}",
        images.len(),
        annotations.len()
    );
    log::info!("dropped_tiny total: {dropped_tiny}");
    Ok(())
}

fn cmd_serve(args: ServeArgs) -> Result<(), Failure> {
    let ds = load_annotations(&args.dataset).input()?;
    if ds.is_empty() {
        return Err(anyhow!("empty dataset")).input();
    }
    if let Some(images) = &args.images {
        if !images.is_dir() {
            return Err(anyhow!("image directory {} not found", images.display())).input();
        }
    }
    let options = ServiceOptions {
        trace_dir: Some(args.out.clone()),
        scratch: args.images.clone().map(|images_dir| ScratchConfig {
            images_dir,
            out_dir: args.out.join("scratch"),
        }),
    };
    let service = Arc::new(
        Service::new(options)
            .with_dataset(args.dataset.to_string_lossy().into_owned(), Arc::new(ds)),
    );

    ctrlc::set_handler(|| {
        log::info!("interrupted, shutting down");
        std::process::exit(0);
    })
    .context("cannot install signal handler")
    .runtime()?;

    match &args.socket {
        Some(path) => {
            let listener = UnixListener::bind(path)
                .with_context(|| format!("cannot bind {}", path.display()))
                .runtime()?;
            log::info!("listening on {}", path.display());
            service.run_listener(listener).runtime()
        }
        None => {
            let stdin = io::stdin();
            let summary = service
                .serve_connection(BufReader::new(stdin.lock()), io::stdout().lock())
                .runtime()?;
            log::info!("{} plans sent, {} errors", summary.plans, summary.errors);
            Ok(())
        }
    }
}

fn simulation_dataset(spec: &str, seed: u64) -> Result<Dataset> {
    let preset = match spec.strip_prefix("synthetic:") {
        None => return load_annotations(spec).map_err(Into::into),
        Some("coco-like") => SyntheticSpec::coco_like(),
        Some("small-starved") => SyntheticSpec::small_starved(),
        Some("small-clustered") => SyntheticSpec::small_clustered(),
        Some(other) => bail!("unknown synthetic dataset {other:?}"),
    };
    Ok(preset.with_seed(seed).generate())
}

fn parse_policies(list: &str) -> Result<Vec<SimPolicy>> {
    if list.eq_ignore_ascii_case("all") {
        let mut all: Vec<SimPolicy> = Strategy::ALL_NAMES
            .iter()
            .map(|n| n.parse().map(SimPolicy::Strategy))
            .collect::<Result<_, _>>()?;
        all.push(SimPolicy::Resampling);
        return Ok(all);
    }
    list.split(',')
        .map(|p| p.trim().parse::<SimPolicy>().map_err(Into::into))
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn write_report(out: &Path, report: &SimReport, plot: PlotFormat) -> Result<()> {
    let stem = format!("{}-seed{}", report.policy, report.seed);
    let file = fs::File::create(out.join(format!("trace-{stem}.csv")))?;
    report.write_csv(io::BufWriter::new(file))?;
    if plot == PlotFormat::Svg {
        fs::write(
            out.join(format!("loss-share-{stem}.svg")),
            loss_share_svg(report, 200),
        )?;
        fs::write(
            out.join(format!("ratio-hist-{stem}.svg")),
            ratio_histogram_svg(report, 20),
        )?;
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    if args.iters == 0 {
        return Err(anyhow!("--iters must be at least 1")).input();
    }
    if args.seeds == 0 {
        return Err(anyhow!("--seeds must be at least 1")).input();
    }
    if !(0.0..=1.0).contains(&args.tau) {
        return Err(anyhow!("tau out of range: {}", args.tau)).input();
    }
    let k = CollageK::new(args.k).input()?;
    let policies = parse_policies(&args.strategy).input()?;
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let datasets: Vec<Dataset> = seeds
        .iter()
        .map(|&s| simulation_dataset(&args.dataset, s))
        .collect::<Result<_>>()
        .input()?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))
        .runtime()?;

    let runs: Vec<(SimPolicy, usize)> = policies
        .iter()
        .flat_map(|&p| (0..seeds.len()).map(move |i| (p, i)))
        .collect();
    let pool = thread_pool(args.jobs).runtime()?;
    let reports: Vec<SimReport> = pool
        .install(|| {
            runs.par_iter()
                .map(|&(policy, i)| {
                    let cfg = SimConfig {
                        policy,
                        tau: args.tau,
                        k,
                        batch_size: args.batch_size,
                        iters: args.iters,
                        seed: seeds[i],
                        tiny_filter: args.tiny_filter,
                        ..SimConfig::default()
                    };
                    let report = run_simulation(&datasets[i], &cfg)?;
                    write_report(&args.out, &report, args.plot)?;
                    Ok(report)
                })
                .collect::<Result<Vec<_>>>()
        })
        .runtime()?;

    let mut summary = String::from(
        "policy,seed,balance,mean_r_s,low_ratio_fraction,collage_fraction,images_consumed\n",
    );
    for r in &reports {
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{}",
            r.policy,
            r.seed,
            r.balance(),
            r.mean_r_s(),
            r.low_ratio_fraction(),
            r.collage_fraction(),
            r.images_consumed
        );
    }
    fs::write(args.out.join("summary.csv"), summary).runtime()?;

    println!(
        "{:<14}{:>10}{:>10}{:>10}{:>10}",
        "policy", "balance", "mean_r_s", "low_r_s", "collage"
    );
    for chunk in reports.chunks(seeds.len()) {
        let pick = |f: fn(&SimReport) -> f64| median(chunk.iter().map(f).collect());
        println!(
            "{:<14}{:>10.4}{:>10.4}{:>10.4}{:>10.4}",
            chunk[0].policy,
            pick(SimReport::balance),
            pick(SimReport::mean_r_s),
            pick(SimReport::low_ratio_fraction),
            pick(SimReport::collage_fraction)
        );
    }
    Ok(())
}
