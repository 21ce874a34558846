use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vdd_cli::config::RunConfig;
use vdd_cli::inspect::inspect;
use vdd_cli::pipeline::{
    build_samples, depthmap_stage, evaluate_stage, nir_plane, read_input, register_stage, run_pipeline, save_raster,
    synthetic_camera, train_stage,
};
use vdd_cli::{CliError, StageExt};
use vdd_core::dataset::{read_dataset_dir, split, write_dataset_dir, PatchGeometry, SourceScene};
use vdd_core::evaluation::report_csv;
use vdd_core::raster::{export_png, export_png_channels, ChannelRole};
use vdd_core::synthvine::{census_text, generate_misaligned_pair};
use vdd_core::vddnet::{history_csv, render_disease_map, segment_orthophoto, Arch, Network};

#[derive(Parser)]
#[command(name = "vdd", version, about = "Vine disease detection from UAV multispectral imagery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every stage.
#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self, base: RunConfig) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => base,
        };
        cfg.apply_overrides(&self.set)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and its misaligned infrared view.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Align the infrared raster onto the visible one.
    Register {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the estimated homography and RMSE history.
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Build the binary vine mask from a DSM.
    Depthmap {
        #[arg(long)]
        dsm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kernel: Option<usize>,
        #[arg(long)]
        png: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Cut (and augment) training patches into a dataset directory.
    Dataset {
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        nir: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patch: Option<u32>,
        #[arg(long)]
        overlap: Option<f64>,
        #[arg(long)]
        augment: Option<bool>,
        #[command(flatten)]
        common: Common,
    },
    /// Train VddNet or a baseline on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// vddnet, baseline4 or baseline5.
        #[arg(long)]
        spec: Option<String>,
        #[arg(long)]
        stages: Option<usize>,
        #[arg(long)]
        base: Option<usize>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        optimizer: Option<String>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Segment a full orthophoto with a trained model.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        nir: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        out_labels: PathBuf,
        #[arg(long)]
        out_png: Option<PathBuf>,
        #[arg(long)]
        tile: Option<u32>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a label raster against ground truth at grapevine scale.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        window: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the whole chain from a config (the desk-scale demo by default).
    Pipeline {
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Summarize a VDDR raster or VDDW checkpoint.
    Inspect { path: PathBuf },
}

fn write_text(stage: &'static str, path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::stage(stage, format!("{}: {e}", path.display())))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out_dir, common } => {
            let mut base = RunConfig::demo();
            base.synth.enabled = true;
            let cfg = common.resolve(base)?;
            std::fs::create_dir_all(&out_dir).stage("synth")?;
            let camera = synthetic_camera(&cfg)?;
            let pair = generate_misaligned_pair(&cfg.scene_config(cfg.seed), &camera, cfg.synth.camera_noise)
                .stage("synth")?;
            let scene = &pair.scene;
            save_raster("synth", &scene.rgb, &out_dir.join("rgb.vddr"))?;
            save_raster("synth", &pair.moving, &out_dir.join("moving.vddr"))?;
            save_raster("synth", &scene.nir, &out_dir.join("nir_truth.vddr"))?;
            save_raster("synth", &scene.dsm, &out_dir.join("dsm.vddr"))?;
            save_raster("synth", &scene.labels, &out_dir.join("labels.vddr"))?;
            save_raster("synth", &scene.canopy_mask, &out_dir.join("canopy.vddr"))?;
            write_text("synth", &out_dir.join("census.csv"), &census_text(&scene.census))?;
            let h = camera.to_rows();
            let rows: Vec<String> = h.iter().map(|r| format!("{} {} {}", r[0], r[1], r[2])).collect();
            write_text("synth", &out_dir.join("camera.txt"), &(rows.join("\n") + "\n"))?;
            export_png(&scene.rgb, &ChannelRole::RGB, out_dir.join("rgb.png")).stage("synth")?;
            println!("synthetic scene {}x{} written to {}", cfg.synth.width, cfg.synth.height, out_dir.display());
        }
        Command::Register { reference, moving, out, report, common } => {
            let cfg = common.resolve(RunConfig::default())?;
            let rgb = read_input("register", &reference)?;
            let mov = read_input("register", &moving)?;
            let (aligned, outcome) = register_stage(&cfg, &rgb, &mov)?;
            save_raster("register", &aligned, &out)?;
            let rmse = outcome.rmse_history.last().copied().unwrap_or(f64::NAN);
            if let Some(p) = report {
                let mut s = String::new();
                for r in outcome.homography.to_rows() {
                    s.push_str(&format!("{} {} {}\n", r[0], r[1], r[2]));
                }
                let hist: Vec<String> = outcome.rmse_history.iter().map(|v| v.to_string()).collect();
                s.push_str(&format!("rmse {}\n", hist.join(" ")));
                write_text("register", &p, &s)?;
            }
            println!("registered with {} matches, final RMSE {rmse:.4} px", outcome.matches);
        }
        Command::Depthmap { dsm, out, kernel, png, common } => {
            let mut cfg = common.resolve(RunConfig::default())?;
            if let Some(k) = kernel {
                cfg.depthmap_kernel = k;
            }
            let dsm = read_input("depthmap", &dsm)?;
            let dm = depthmap_stage(&cfg, &dsm)?;
            save_raster("depthmap", &dm.mask, &out)?;
            if let Some(p) = png {
                let scaled = dm.mask.map(|v| v * 255.0).stage("depthmap")?;
                export_png_channels(&scaled, &[0], p).stage("depthmap")?;
            }
            let note = if dm.degenerate { " (degenerate histogram)" } else { "" };
            println!("depth map threshold {}{note}", dm.threshold);
        }
        Command::Dataset { rgb, nir, depth, labels, out, patch, overlap, augment, common } => {
            let mut cfg = common.resolve(RunConfig::default())?;
            if let Some(p) = patch {
                cfg.dataset.patch = p;
            }
            if let Some(o) = overlap {
                cfg.dataset.overlap = o;
            }
            if let Some(a) = augment {
                cfg.dataset.augment = a;
            }
            cfg.validate()?;
            let load = |p: &Path| read_input("dataset", p);
            let src = SourceScene::new(&load(&rgb)?, &nir_plane(&load(&nir)?)?, &load(&depth)?, &load(&labels)?).stage("dataset")?;
            let samples = build_samples(&cfg, &src)?;
            let geom = PatchGeometry { patch: cfg.dataset.patch, overlap: cfg.dataset.overlap };
            write_dataset_dir(&out, &src, geom, &samples).stage("dataset")?;
            println!("{} samples written to {}", samples.len(), out.display());
        }
        Command::Train { data, spec, stages, base, iters, lr, optimizer, batch, out, history, common } => {
            let mut cfg = common.resolve(RunConfig::default())?;
            if let Some(s) = spec {
                cfg.train.arch = Arch::parse(&s).ok_or_else(|| CliError::Config(format!("unknown network `{s}`")))?;
            }
            if let Some(v) = stages {
                cfg.train.stages = v;
            }
            if let Some(v) = base {
                cfg.train.base = v;
            }
            if let Some(v) = iters {
                cfg.train.iterations = v;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = optimizer {
                cfg.train.optimizer = v;
            }
            if let Some(v) = batch {
                cfg.train.batch_size = v;
            }
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                cfg.output_dir = parent.to_path_buf();
            }
            cfg.validate()?;
            let (_, _, samples) = read_dataset_dir(&data).stage("dataset")?;
            let sp = split(samples, cfg.dataset.val_fraction, cfg.seed).stage("dataset")?;
            let (net, outcome) = train_stage(&cfg, &sp)?;
            net.save(&out).stage("train")?;
            let csv = history_csv(&outcome.history);
            match history {
                Some(p) => write_text("train", &p, &csv)?,
                None => print!("{csv}"),
            }
            println!("best validation loss {:.6} at iteration {}", outcome.best_val_loss, outcome.best_iteration);
        }
        Command::Segment { model, rgb, nir, depth, out_labels, out_png, tile, common } => {
            let cfg = common.resolve(RunConfig::default())?;
            let net = Network::load(&model).stage("segment")?;
            let rgb = read_input("segment", &rgb)?;
            let nir = nir_plane(&read_input("segment", &nir)?)?;
            let depth = read_input("segment", &depth)?;
            let seg = segment_orthophoto(&net, &rgb, &nir, &depth, tile.unwrap_or(cfg.segment_tile)).stage("segment")?;
            save_raster("segment", &seg.labels, &out_labels)?;
            if let Some(p) = out_png {
                let map = render_disease_map(&seg.labels).stage("segment")?;
                export_png(&map, &ChannelRole::RGB, p).stage("segment")?;
            }
            println!("segmented {}x{}", seg.labels.width(), seg.labels.height());
        }
        Command::Evaluate { pred, truth, window, out, common } => {
            let mut cfg = common.resolve(RunConfig::default())?;
            if let Some(w) = window {
                cfg.evaluate_window = w;
            }
            cfg.validate()?;
            let report = evaluate_stage(&cfg, &read_input("evaluate", &pred)?, &read_input("evaluate", &truth)?)?;
            let csv = report_csv(&report);
            match out {
                Some(p) => write_text("evaluate", &p, &csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Pipeline { out_dir, common } => {
            let mut cfg = common.resolve(RunConfig::demo())?;
            if let Some(d) = out_dir {
                cfg.output_dir = d;
            }
            let r = run_pipeline(&cfg)?;
            print!("{}", report_csv(&r.report));
            println!(
                "registration RMSE {:.4} px; best validation loss {:.6} at iteration {}; artifacts in {}",
                r.registration_rmse,
                r.outcome.best_val_loss,
                r.outcome.best_iteration,
                cfg.output_dir.display()
            );
        }
        Command::Inspect { path } => print!("{}", inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vdd: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
