//! Stage functions and the end-to-end run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use vdd_core::dataset::{augment, extract_patches, split, AugmentationPolicy, Sample, SourceScene, Split};
use vdd_core::depthmap::{build_depth_map, DepthMap};
use vdd_core::evaluation::{metrics_from_confusion, report_csv, windowed_confusion, MetricReport};
use vdd_core::raster::{channel_at, export_png, read_raster, write_raster, ChannelRole, MultiRaster};
use vdd_core::registration::{register_images, warp, Homography, RegistrationOutcome};
use vdd_core::synthvine::generate_misaligned_pair;
use vdd_core::vddnet::{
    history_csv, render_disease_map, segment_orthophoto, train, Network, SegmentationResult, TrainOutcome,
};

use crate::config::RunConfig;
use crate::{CliError, StageExt};

/// Rasters of one scene as they enter the chain.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub rgb: MultiRaster,
    /// Infrared camera view, not yet aligned.
    pub moving: MultiRaster,
    pub dsm: Option<MultiRaster>,
    pub labels: Option<MultiRaster>,
}

/// Infrared camera offset of the synthetic rig: a rotation about the image
/// centre followed by a shift.
pub fn synthetic_camera(cfg: &RunConfig) -> Result<Homography, CliError> {
    let s = &cfg.synth;
    let (cx, cy) = ((s.width as f64 - 1.0) / 2.0, (s.height as f64 - 1.0) / 2.0);
    let (sn, cs) = s.rotation_deg.to_radians().sin_cos();
    let rows = [
        [cs, -sn, cx - cs * cx + sn * cy + s.shift_x],
        [sn, cs, cy - sn * cx - cs * cy + s.shift_y],
        [0.0, 0.0, 1.0],
    ];
    Homography::from_rows(rows).map_err(|e| CliError::Config(format!("camera offset: {e}")))
}

pub fn synth_scene(cfg: &RunConfig, seed: u64) -> Result<SceneInputs, CliError> {
    let h = synthetic_camera(cfg)?;
    let pair = generate_misaligned_pair(&cfg.scene_config(seed), &h, cfg.synth.camera_noise).stage("synth")?;
    Ok(SceneInputs {
        rgb: pair.scene.rgb,
        moving: pair.moving,
        dsm: Some(pair.scene.dsm),
        labels: Some(pair.scene.labels),
    })
}

fn load(stage: &'static str, key: &str, path: &Option<PathBuf>) -> Result<MultiRaster, CliError> {
    let p = path.as_ref().ok_or_else(|| CliError::stage(stage, format!("no `{key}` path and no synth stanza")))?;
    read_raster(p).map_err(|e| CliError::stage(stage, format!("{}: {e}", p.display())))
}

fn role_or_first(r: &MultiRaster, role: ChannelRole) -> usize {
    r.channel_index(role).unwrap_or(0)
}

/// Aligns every channel of `moving` onto the reference frame by matching
/// the red planes of both cameras.
pub fn register_stage(cfg: &RunConfig, rgb: &MultiRaster, moving: &MultiRaster) -> Result<(MultiRaster, RegistrationOutcome), CliError> {
    let reference = channel_at(rgb, role_or_first(rgb, ChannelRole::Red)).stage("register")?;
    let mov = channel_at(moving, role_or_first(moving, ChannelRole::Red)).stage("register")?;
    let out = register_images(&reference, &mov, &cfg.registration_params()).stage("register")?;
    let aligned = warp(moving, &out.homography, rgb.width(), rgb.height()).stage("register")?;
    Ok((aligned, out))
}

/// The NIR channel of a registered raster; single-channel rasters pass through.
pub fn nir_plane(aligned: &MultiRaster) -> Result<MultiRaster, CliError> {
    if aligned.channels() == 1 {
        return Ok(aligned.clone());
    }
    let i = aligned
        .channel_index(ChannelRole::Nir)
        .ok_or_else(|| CliError::stage("register", "moving raster has no NIR channel"))?;
    channel_at(aligned, i).stage("register")
}

pub fn depthmap_stage(cfg: &RunConfig, dsm: &MultiRaster) -> Result<DepthMap, CliError> {
    build_depth_map(dsm, cfg.depthmap_kernel).stage("depthmap")
}

/// Patches (with augmentation if enabled) split into train and validation.
pub fn dataset_stage(cfg: &RunConfig, src: &SourceScene) -> Result<Split, CliError> {
    let samples = build_samples(cfg, src)?;
    split(samples, cfg.dataset.val_fraction, cfg.seed).stage("dataset")
}

pub fn build_samples(cfg: &RunConfig, src: &SourceScene) -> Result<Vec<Sample>, CliError> {
    let patches = extract_patches(src, cfg.dataset.patch, cfg.dataset.overlap).stage("dataset")?;
    if !cfg.dataset.augment {
        return Ok(patches);
    }
    let policy = AugmentationPolicy { translation_overlap: cfg.dataset.overlap, ..AugmentationPolicy::default() };
    let mut out = Vec::with_capacity(patches.len() * policy.variants());
    for p in &patches {
        out.extend(augment(p, &policy).stage("dataset")?);
    }
    Ok(out)
}

pub fn train_stage(cfg: &RunConfig, data: &Split) -> Result<(Network<f32>, TrainOutcome), CliError> {
    let mut net = Network::new(cfg.train.arch, cfg.spec(), cfg.seed).stage("train")?;
    let outcome = train(&mut net, &data.train, &data.val, &cfg.train_config()).stage("train")?;
    Ok((net, outcome))
}

pub fn evaluate_stage(cfg: &RunConfig, pred: &MultiRaster, truth: &MultiRaster) -> Result<MetricReport, CliError> {
    let cm = windowed_confusion(pred, truth, cfg.evaluate_window).stage("evaluate")?;
    metrics_from_confusion(&cm).stage("evaluate")
}

/// Scene after registration and depth extraction.
pub struct PreparedScene {
    pub rgb: MultiRaster,
    pub nir: MultiRaster,
    pub depth: DepthMap,
    pub labels: Option<MultiRaster>,
    pub registration: RegistrationOutcome,
}

pub fn prepare(cfg: &RunConfig, scene: SceneInputs) -> Result<PreparedScene, CliError> {
    let (aligned, registration) = register_stage(cfg, &scene.rgb, &scene.moving)?;
    let nir = nir_plane(&aligned)?;
    let dsm = scene.dsm.ok_or_else(|| CliError::stage("depthmap", "no `input.dsm` path and no synth stanza"))?;
    let depth = depthmap_stage(cfg, &dsm)?;
    Ok(PreparedScene { rgb: scene.rgb, nir, depth, labels: scene.labels, registration })
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub report: MetricReport,
    pub outcome: TrainOutcome,
    /// Final registration RMSE of the training scene, in pixels.
    pub registration_rmse: f64,
    /// Artifact file names with their SHA-256.
    pub artifacts: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_artifact(dir: &Path, name: &str, bytes: &[u8], list: &mut Vec<(String, String)>) -> Result<(), CliError> {
    std::fs::write(dir.join(name), bytes).stage("output")?;
    list.push((name.to_string(), sha256_hex(bytes)));
    Ok(())
}

fn registration_text(r: &RegistrationOutcome) -> String {
    let mut s = String::new();
    for row in r.homography.to_rows() {
        let _ = writeln!(s, "h = {} {} {}", row[0], row[1], row[2]);
    }
    let _ = writeln!(s, "keypoints = {} {}", r.moving_keypoints, r.reference_keypoints);
    let _ = writeln!(s, "matches = {}", r.matches);
    for (i, v) in r.rmse_history.iter().enumerate() {
        let _ = writeln!(s, "rmse.{i} = {v}");
    }
    s
}

/// Config hash, module versions and the hash of every artifact.
pub fn manifest_text(cfg: &RunConfig, artifacts: &[(String, String)]) -> String {
    let mut s = String::from("# vdd run manifest\n");
    let _ = writeln!(s, "config.sha256 = {}", sha256_hex(cfg.to_text().as_bytes()));
    let _ = writeln!(s, "version.vdd-core = {}", vdd_core::VERSION);
    let _ = writeln!(s, "version.vdd-cli = {}", env!("CARGO_PKG_VERSION"));
    for (name, hash) in artifacts {
        let _ = writeln!(s, "artifact.{name} = {hash}");
    }
    s
}

pub fn segment_stage(cfg: &RunConfig, net: &Network<f32>, scene: &PreparedScene) -> Result<SegmentationResult, CliError> {
    segment_orthophoto(net, &scene.rgb, &scene.nir, &scene.depth.mask, cfg.segment_tile).stage("segment")
}

/// synth? → register → depthmap → dataset → train → segment → evaluate,
/// writing every artifact plus `manifest.txt` into `cfg.output_dir`.
///
/// With synthesis on, the network is scored on a held-out scene generated
/// from the same config at `seed + heldout_offset`; otherwise the input
/// scene itself is segmented and scored.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport, CliError> {
    cfg.validate()?;
    let train_inputs = if cfg.synth.enabled {
        synth_scene(cfg, cfg.seed)?
    } else {
        let rgb = load("register", "input.rgb", &cfg.input.rgb)?;
        let moving = load("register", "input.moving", &cfg.input.moving)?;
        let scene = SceneInputs { rgb, moving, dsm: None, labels: None };
        let (aligned, registration) = register_stage(cfg, &scene.rgb, &scene.moving)?;
        let nir = nir_plane(&aligned)?;
        let dsm = load("depthmap", "input.dsm", &cfg.input.dsm)?;
        let depth = depthmap_stage(cfg, &dsm)?;
        let labels = Some(load("dataset", "input.labels", &cfg.input.labels)?);
        return finish(cfg, PreparedScene { rgb: scene.rgb, nir, depth, labels, registration }, None);
    };
    let train_scene = prepare(cfg, train_inputs)?;
    let heldout = synth_scene(cfg, cfg.seed.wrapping_add(cfg.synth.heldout_offset))?;
    let heldout = prepare(cfg, heldout)?;
    finish(cfg, train_scene, Some(heldout))
}

fn finish(cfg: &RunConfig, scene: PreparedScene, heldout: Option<PreparedScene>) -> Result<PipelineReport, CliError> {
    let labels = scene.labels.as_ref().ok_or_else(|| CliError::stage("dataset", "no label raster"))?;
    let src = SourceScene::new(&scene.rgb, &scene.nir, &scene.depth.mask, labels).stage("dataset")?;
    let data = dataset_stage(cfg, &src)?;
    drop(src);
    let (net, outcome) = train_stage(cfg, &data)?;
    drop(data);
    let eval_scene = heldout.as_ref().unwrap_or(&scene);
    let seg = segment_stage(cfg, &net, eval_scene)?;
    let truth = eval_scene.labels.as_ref().ok_or_else(|| CliError::stage("evaluate", "no ground truth"))?;
    let report = evaluate_stage(cfg, &seg.labels, truth)?;

    let dir = &cfg.output_dir;
    std::fs::create_dir_all(dir).stage("output")?;
    let mut artifacts = Vec::new();
    write_artifact(dir, "config.txt", cfg.to_text().as_bytes(), &mut artifacts)?;
    write_artifact(dir, "registration.txt", registration_text(&scene.registration).as_bytes(), &mut artifacts)?;
    write_artifact(dir, "history.csv", history_csv(&outcome.history).as_bytes(), &mut artifacts)?;
    let model = vdd_core::neuralnet::encode_checkpoint(&net.checkpoint_tensors());
    write_artifact(dir, "model.vddw", &model, &mut artifacts)?;
    write_artifact(dir, "labels.vddr", &vdd_core::raster::encode_raster(&seg.labels), &mut artifacts)?;
    let map = render_disease_map(&seg.labels).stage("segment")?;
    export_png(&map, &ChannelRole::RGB, dir.join("disease_map.png")).stage("output")?;
    let png = std::fs::read(dir.join("disease_map.png")).stage("output")?;
    artifacts.push(("disease_map.png".into(), sha256_hex(&png)));
    write_artifact(dir, "metrics.csv", report_csv(&report).as_bytes(), &mut artifacts)?;
    std::fs::write(dir.join("manifest.txt"), manifest_text(cfg, &artifacts)).stage("output")?;
    let registration_rmse = scene.registration.rmse_history.last().copied().unwrap_or(f64::NAN);
    Ok(PipelineReport { report, outcome, registration_rmse, artifacts })
}

/// Writes a raster, tagging failures with `stage`.
pub fn save_raster(stage: &'static str, r: &MultiRaster, path: &Path) -> Result<(), CliError> {
    write_raster(r, path).map_err(|e| CliError::stage(stage, format!("{}: {e}", path.display())))
}

pub fn read_input(stage: &'static str, path: &Path) -> Result<MultiRaster, CliError> {
    read_raster(path).map_err(|e| CliError::stage(stage, format!("{}: {e}", path.display())))
}
