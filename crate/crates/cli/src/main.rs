mod config;

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use edr_core::pipeline::PipelineError;
use edr_core::reference::{compare_report, format_psnr, psnr, reference_render, RunRow};
use edr_core::scene::{generate_procedural_scene, save_scene};
use edr_core::{render, RgbImage, SceneSpec};
use log::info;
use sha2::{Digest, Sha256};

use config::{read_spec, RunConfig};

#[derive(Parser)]
#[command(name = "edrnr", version, about = "Cycle-level model of a data-reuse neural rendering pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a procedural scene and write it in binary form.
    GenScene {
        /// Scene recipe (TOML); the built-in benchmark scene when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Render one frame and write the image and its metrics.
    Render {
        /// Run configuration (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image path, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed for procedural scenes, overriding the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the per-pixel reference renderer instead of the pipeline.
        #[arg(long)]
        reference: bool,
    },
    /// Render all sixteen scheduling-toggle combinations and compare them.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Report CSV path, overriding the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Render at 64x64.
        #[arg(long)]
        quick: bool,
    },
    /// Compare two PPM images.
    Psnr { a: PathBuf, b: PathBuf },
}

enum Failure {
    /// Bad arguments, configuration or input files.
    Input(anyhow::Error),
    /// The simulator broke one of its own guarantees.
    Property(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Input(e)
    }
}

fn pipeline_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Config(_) => Failure::Input(e.into()),
        _ => Failure::Property(e.into()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenScene { config, out, seed } => gen_scene(config.as_deref(), &out, seed),
        Cmd::Render { config, out, seed, reference } => cmd_render(config.as_deref(), out, seed, reference),
        Cmd::Ablate { config, out, seed, quick } => ablate(config.as_deref(), out, seed, quick),
        Cmd::Psnr { a, b } => cmd_psnr(&a, &b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Property(e)) => {
            eprintln!("violation: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn checksum(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn gen_scene(spec_path: Option<&Path>, out: &Path, seed: u64) -> Result<(), Failure> {
    let spec = match spec_path {
        Some(p) => read_spec(p)?,
        None => SceneSpec::default_scene(),
    };
    let scene = generate_procedural_scene(&spec, seed).context("generating scene")?;
    save_scene(&scene, out).with_context(|| format!("writing {}", out.display()))?;
    let g = scene.geometry();
    println!(
        "wrote {} (coarse {}^3, {:.2}% of micro voxels occupied)",
        out.display(),
        g.coarse_dim(),
        scene.occupied_micro_fraction() * 100.0
    );
    Ok(())
}

fn cmd_render(cfg_path: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>, reference: bool) -> Result<(), Failure> {
    let mut cfg = load_config(cfg_path)?;
    if let Some(o) = out {
        cfg.output.image = o;
    }
    let (scene, scene_id) = cfg.scene(seed)?;
    let camera = cfg.camera.build()?;
    info!("rendering {scene_id} at {}x{}", camera.width, camera.height);
    let image = if reference {
        reference_render(&scene, &camera, &cfg.pipeline).image
    } else {
        let r = render(&scene, &camera, &cfg.pipeline).map_err(pipeline_failure)?;
        let path = cfg.metrics_path();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(&r.metrics).context("serializing metrics")?;
        let bytes = w.into_inner().context("serializing metrics")?;
        write_file(&path, &bytes)?;
        let m = &r.metrics;
        println!("metrics {}", path.display());
        println!(
            "cycles {} ema_bytes {} hit_rate micro {:.3} feature {:.3} mlp {:.3}",
            m.cycles, m.ema_bytes, m.micro_hit_rate, m.feature_hit_rate, m.mlp_hit_rate
        );
        r.image
    };
    let ppm = image.to_ppm();
    write_file(&cfg.output.image, &ppm)?;
    println!("image {} sha256 {}", cfg.output.image.display(), checksum(&ppm));
    Ok(())
}

fn label(m: &edr_core::pipeline::MetricsRecord) -> String {
    format!("{}/aabb={}/rprob={}/ooo={}", m.scan_mode, m.aabb, m.rprob, m.ooo)
}

fn ablate(cfg_path: Option<&Path>, out: Option<PathBuf>, seed: Option<u64>, quick: bool) -> Result<(), Failure> {
    let mut cfg = load_config(cfg_path)?;
    if let Some(o) = out {
        cfg.output.report = o;
    }
    if quick {
        cfg.camera = cfg.camera.resized(64, 64);
    }
    let (scene, scene_id) = cfg.scene(seed)?;
    let camera = cfg.camera.build()?;
    let configs = cfg.pipeline.toggle_matrix();

    let (reference, runs) = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .iter()
            .map(|pc| {
                let (scene, camera) = (&scene, &camera);
                s.spawn(move || render(scene, camera, pc))
            })
            .collect();
        let reference = reference_render(&scene, &camera, &cfg.pipeline).image;
        let runs: Vec<_> = handles.into_iter().map(|h| h.join().expect("render thread panicked")).collect();
        (reference, runs)
    });

    let want = checksum(&reference.to_ppm());
    let mut rows: Vec<RunRow> = Vec::with_capacity(runs.len());
    for r in runs {
        let r = r.map_err(pipeline_failure)?;
        let sum = checksum(&r.image.to_ppm());
        if let Some(first) = rows.first() {
            if first.image_checksum != sum {
                return Err(Failure::Property(anyhow::anyhow!(
                    "images of {} and {} differ",
                    label(&first.metrics),
                    label(&r.metrics)
                )));
            }
        }
        if sum != want {
            return Err(Failure::Property(anyhow::anyhow!(
                "image of {} differs from the reference render",
                label(&r.metrics)
            )));
        }
        rows.push(RunRow { scene_id: scene_id.clone(), image_checksum: sum, metrics: r.metrics });
    }

    let report = compare_report(&rows).context("building report")?;
    let mut csv_bytes = Vec::new();
    report.write_csv(&mut csv_bytes).context("writing report")?;
    write_file(&cfg.output.report, &csv_bytes)?;
    print!("{}", report.to_text());
    println!("all {} images identical; report {}", rows.len(), cfg.output.report.display());
    Ok(())
}

fn cmd_psnr(a: &Path, b: &Path) -> Result<(), Failure> {
    let read = |p: &Path| -> Result<RgbImage> {
        let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
        RgbImage::read_ppm(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))
    };
    let db = psnr(&read(a)?, &read(b)?).context("comparing images")?;
    let mut out = BufWriter::new(std::io::stdout());
    writeln!(out, "{}", format_psnr(db)).context("writing output")?;
    Ok(())
}
