//! Line-oriented `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use vdd_core::synthvine::GroundPalette;
use vdd_core::vddnet::Arch;

use crate::CliError;

/// Values that can appear on the right of `key = value`.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Option<Self>;
    fn show(&self) -> String;
}

macro_rules! display_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Option<Self> {
                s.parse().ok()
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

display_value!(u32, u64, usize, f32, f64, bool, String, GroundPalette);

impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> Option<Self> {
        Some((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn show(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

impl ConfigValue for PathBuf {
    fn parse_value(s: &str) -> Option<Self> {
        (!s.is_empty()).then(|| PathBuf::from(s))
    }
    fn show(&self) -> String {
        self.display().to_string()
    }
}

impl ConfigValue for Arch {
    fn parse_value(s: &str) -> Option<Self> {
        Arch::parse(s)
    }
    fn show(&self) -> String {
        self.name()
    }
}

/// `none` or four comma-separated weights.
impl ConfigValue for Option<[f32; 4]> {
    fn parse_value(s: &str) -> Option<Self> {
        if s == "none" {
            return Some(None);
        }
        let v: Vec<f32> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        Some(Some(v.try_into().ok()?))
    }
    fn show(&self) -> String {
        match self {
            None => "none".into(),
            Some(w) => w.map(|v| v.to_string()).join(","),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSection {
    pub enabled: bool,
    pub width: u32,
    pub height: u32,
    pub row_spacing: f64,
    pub row_width: f64,
    pub row_orientation: f64,
    pub ground_palette: GroundPalette,
    pub terrain_amplitude: f64,
    pub terrain_wavelength: f64,
    pub canopy_height: f64,
    pub disease_fraction: f64,
    pub shadow_fraction: f64,
    pub noise_rgb: f64,
    pub noise_nir: f64,
    pub noise_dsm: f64,
    /// Infrared camera offset relative to the visible one.
    pub shift_x: f64,
    pub shift_y: f64,
    pub rotation_deg: f64,
    pub camera_noise: f64,
    /// The held-out evaluation scene uses `seed + heldout_offset`.
    pub heldout_offset: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InputSection {
    pub rgb: Option<PathBuf>,
    /// Infrared camera raster; needs a NIR channel.
    pub moving: Option<PathBuf>,
    pub dsm: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisterSection {
    pub max_keypoints: usize,
    pub octaves: usize,
    pub harris_k: f32,
    pub sigma: f32,
    pub rel_threshold: f32,
    pub nms_radius: usize,
    pub ratio: f32,
    pub ransac_threshold: f64,
    pub ransac_confidence: f64,
    pub ransac_max_iterations: usize,
    pub ransac_min_inliers: usize,
    pub refine_shrink: f64,
    pub refine_floor: f64,
    pub refine_tol: f64,
    pub refine_max_iter: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSection {
    pub patch: u32,
    pub overlap: f64,
    pub augment: bool,
    pub val_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub arch: Arch,
    pub stages: usize,
    pub base: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: String,
    pub lr: f64,
    pub validation_every: usize,
    pub val_limit: usize,
    pub class_weights: Option<[f32; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub synth: SynthSection,
    pub input: InputSection,
    pub register: RegisterSection,
    pub depthmap_kernel: usize,
    pub dataset: DatasetSection,
    pub train: TrainSection,
    pub segment_tile: u32,
    pub evaluate_window: u32,
}

impl Default for RunConfig {
    /// Module defaults with synthesis off.
    fn default() -> Self {
        use vdd_core::registration::{DetectorParams, RansacParams, RefineParams};
        let scene = vdd_core::synthvine::SceneConfig::default();
        let det = DetectorParams::default();
        let ransac = RansacParams::default();
        let refine = RefineParams::default();
        let spec = vdd_core::vddnet::VddNetSpec::default();
        let train = vdd_core::vddnet::TrainConfig::default();
        Self {
            seed: 0,
            output_dir: PathBuf::from("vdd_out"),
            synth: SynthSection {
                enabled: false,
                width: scene.width,
                height: scene.height,
                row_spacing: scene.row_spacing,
                row_width: scene.row_width,
                row_orientation: scene.row_orientation,
                ground_palette: scene.ground_palette,
                terrain_amplitude: scene.terrain_amplitude,
                terrain_wavelength: scene.terrain_wavelength,
                canopy_height: scene.canopy_height,
                disease_fraction: scene.disease_fraction,
                shadow_fraction: scene.shadow_fraction,
                noise_rgb: scene.noise_rgb,
                noise_nir: scene.noise_nir,
                noise_dsm: scene.noise_dsm,
                shift_x: 9.0,
                shift_y: -6.0,
                rotation_deg: 1.5,
                camera_noise: 2.0,
                heldout_offset: 1,
            },
            input: InputSection { rgb: None, moving: None, dsm: None, labels: None },
            register: RegisterSection {
                max_keypoints: det.max_keypoints,
                octaves: det.octaves,
                harris_k: det.harris_k,
                sigma: det.sigma,
                rel_threshold: det.rel_threshold,
                nms_radius: det.nms_radius,
                ratio: 0.8,
                ransac_threshold: ransac.threshold,
                ransac_confidence: ransac.confidence,
                ransac_max_iterations: ransac.max_iterations,
                ransac_min_inliers: ransac.min_inliers,
                refine_shrink: refine.shrink,
                refine_floor: refine.floor,
                refine_tol: refine.tol,
                refine_max_iter: refine.max_iter,
            },
            depthmap_kernel: vdd_core::depthmap::DEFAULT_KERNEL,
            dataset: DatasetSection { patch: 256, overlap: 0.5, augment: true, val_fraction: 0.2 },
            train: TrainSection {
                arch: Arch::VddNet,
                stages: spec.stages,
                base: spec.base_channels,
                iterations: train.iterations,
                batch_size: train.batch_size,
                optimizer: train.optimizer.name().into(),
                lr: train.optimizer.lr(),
                validation_every: train.validation_every,
                val_limit: train.val_limit,
                class_weights: None,
            },
            segment_tile: vdd_core::vddnet::DEFAULT_TILE,
            evaluate_window: vdd_core::evaluation::DEFAULT_WINDOW,
        }
    }
}

impl RunConfig {
    /// Desk-scale demo: a 512×512 synthetic scene, stages 2, base 8, 300
    /// iterations on 64-pixel patches, scored with row-width windows.
    pub fn demo() -> Self {
        let mut c = Self::default();
        c.synth.enabled = true;
        c.dataset.patch = 64;
        c.dataset.augment = false;
        c.train.stages = 2;
        c.train.base = 8;
        c.train.iterations = 300;
        c.evaluate_window = c.synth.row_width.round() as u32;
        c
    }
}

macro_rules! config_keys {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        /// Every accepted key, in serialization order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                match key {
                    $($key => {
                        self.$($field).+ = ConfigValue::parse_value(value)
                            .ok_or_else(|| CliError::Config(format!("invalid value {value:?} for `{key}`")))?;
                    })*
                    _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(self.$($field).+.show()),)*
                    _ => None,
                }
            }
        }
    };
}

config_keys! {
    "seed" => seed,
    "output.dir" => output_dir,
    "synth.enabled" => synth.enabled,
    "synth.width" => synth.width,
    "synth.height" => synth.height,
    "synth.row_spacing" => synth.row_spacing,
    "synth.row_width" => synth.row_width,
    "synth.row_orientation" => synth.row_orientation,
    "synth.ground_palette" => synth.ground_palette,
    "synth.terrain_amplitude" => synth.terrain_amplitude,
    "synth.terrain_wavelength" => synth.terrain_wavelength,
    "synth.canopy_height" => synth.canopy_height,
    "synth.disease_fraction" => synth.disease_fraction,
    "synth.shadow_fraction" => synth.shadow_fraction,
    "synth.noise_rgb" => synth.noise_rgb,
    "synth.noise_nir" => synth.noise_nir,
    "synth.noise_dsm" => synth.noise_dsm,
    "synth.shift_x" => synth.shift_x,
    "synth.shift_y" => synth.shift_y,
    "synth.rotation_deg" => synth.rotation_deg,
    "synth.camera_noise" => synth.camera_noise,
    "synth.heldout_offset" => synth.heldout_offset,
    "input.rgb" => input.rgb,
    "input.moving" => input.moving,
    "input.dsm" => input.dsm,
    "input.labels" => input.labels,
    "register.max_keypoints" => register.max_keypoints,
    "register.octaves" => register.octaves,
    "register.harris_k" => register.harris_k,
    "register.sigma" => register.sigma,
    "register.rel_threshold" => register.rel_threshold,
    "register.nms_radius" => register.nms_radius,
    "register.ratio" => register.ratio,
    "register.ransac_threshold" => register.ransac_threshold,
    "register.ransac_confidence" => register.ransac_confidence,
    "register.ransac_max_iterations" => register.ransac_max_iterations,
    "register.ransac_min_inliers" => register.ransac_min_inliers,
    "register.refine_shrink" => register.refine_shrink,
    "register.refine_floor" => register.refine_floor,
    "register.refine_tol" => register.refine_tol,
    "register.refine_max_iter" => register.refine_max_iter,
    "depthmap.kernel" => depthmap_kernel,
    "dataset.patch" => dataset.patch,
    "dataset.overlap" => dataset.overlap,
    "dataset.augment" => dataset.augment,
    "dataset.val_fraction" => dataset.val_fraction,
    "train.arch" => train.arch,
    "train.stages" => train.stages,
    "train.base" => train.base,
    "train.iterations" => train.iterations,
    "train.batch_size" => train.batch_size,
    "train.optimizer" => train.optimizer,
    "train.lr" => train.lr,
    "train.validation_every" => train.validation_every,
    "train.val_limit" => train.val_limit,
    "train.class_weights" => train.class_weights,
    "segment.tile" => segment_tile,
    "evaluate.window" => evaluate_window,
}

impl RunConfig {
    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped; a key may appear once.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        let mut seen = std::collections::HashSet::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got {line:?}", ln + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(CliError::Config(format!("line {}: duplicate key `{k}`", ln + 1)));
            }
            self.set(k, v.trim()).map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("line {}: {m}", ln + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    /// Parses a whole config on top of the module defaults.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("override {s:?} is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# vdd run configuration\n");
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if vdd_core::neuralnet::Optimizer::parse(&self.train.optimizer, self.train.lr).is_none() {
            return bad(format!("unknown optimizer `{}`", self.train.optimizer));
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return bad(format!("learning rate {}", self.train.lr));
        }
        if self.train.iterations == 0 || self.train.batch_size == 0 || self.train.validation_every == 0 {
            return bad("train.iterations, train.batch_size and train.validation_every must be positive".into());
        }
        if self.dataset.patch == 0 || !(0.0..1.0).contains(&self.dataset.overlap) {
            return bad(format!("dataset patch {} overlap {}", self.dataset.patch, self.dataset.overlap));
        }
        if !(self.dataset.val_fraction > 0.0 && self.dataset.val_fraction < 0.5) {
            return bad(format!("dataset.val_fraction {} outside (0, 0.5)", self.dataset.val_fraction));
        }
        if self.segment_tile == 0 || self.evaluate_window == 0 || self.depthmap_kernel == 0 {
            return bad("segment.tile, evaluate.window and depthmap.kernel must be positive".into());
        }
        if self.synth.heldout_offset == 0 {
            return bad("synth.heldout_offset must differ from 0".into());
        }
        Ok(())
    }

    pub fn scene_config(&self, seed: u64) -> vdd_core::synthvine::SceneConfig {
        let s = &self.synth;
        vdd_core::synthvine::SceneConfig {
            width: s.width,
            height: s.height,
            row_spacing: s.row_spacing,
            row_width: s.row_width,
            row_orientation: s.row_orientation,
            ground_palette: s.ground_palette,
            terrain_amplitude: s.terrain_amplitude,
            terrain_wavelength: s.terrain_wavelength,
            canopy_height: s.canopy_height,
            disease_fraction: s.disease_fraction,
            shadow_fraction: s.shadow_fraction,
            noise_rgb: s.noise_rgb,
            noise_nir: s.noise_nir,
            noise_dsm: s.noise_dsm,
            seed,
        }
    }

    pub fn registration_params(&self) -> vdd_core::registration::RegistrationParams {
        use vdd_core::registration::{DetectorParams, RansacParams, RefineParams, RegistrationParams};
        let r = &self.register;
        RegistrationParams {
            detector: DetectorParams {
                max_keypoints: r.max_keypoints,
                octaves: r.octaves,
                harris_k: r.harris_k,
                sigma: r.sigma,
                rel_threshold: r.rel_threshold,
                nms_radius: r.nms_radius,
            },
            ratio: r.ratio,
            ransac: RansacParams {
                threshold: r.ransac_threshold,
                confidence: r.ransac_confidence,
                max_iterations: r.ransac_max_iterations,
                min_inliers: r.ransac_min_inliers,
                seed: self.seed,
            },
            refine: RefineParams {
                initial_threshold: r.ransac_threshold,
                shrink: r.refine_shrink,
                floor: r.refine_floor,
                tol: r.refine_tol,
                max_iter: r.refine_max_iter,
            },
        }
    }

    pub fn spec(&self) -> vdd_core::vddnet::VddNetSpec {
        vdd_core::vddnet::VddNetSpec::new(self.train.stages, self.train.base)
    }

    pub fn train_config(&self) -> vdd_core::vddnet::TrainConfig {
        let t = &self.train;
        vdd_core::vddnet::TrainConfig {
            iterations: t.iterations,
            batch_size: t.batch_size,
            optimizer: vdd_core::neuralnet::Optimizer::parse(&t.optimizer, t.lr).expect("validated optimizer"),
            validation_every: t.validation_every,
            val_limit: t.val_limit,
            class_weights: t.class_weights,
            seed: self.seed,
            dump_dir: Some(self.output_dir.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn text_round_trip() {
        for c in [RunConfig::default(), RunConfig::demo()] {
            let back = RunConfig::parse(&c.to_text()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_text(), c.to_text());
        }
    }

    #[test]
    fn every_key_is_serialized_once() {
        let text = RunConfig::default().to_text();
        for k in KEYS {
            assert_eq!(text.lines().filter(|l| l.split(" = ").next() == Some(*k)).count(), 1, "{k}");
        }
        let uniq: std::collections::HashSet<_> = KEYS.iter().collect();
        assert_eq!(uniq.len(), KEYS.len());
    }

    #[test]
    fn unknown_and_malformed_lines_are_rejected() {
        let e = RunConfig::parse("train.lr = 0.1\ntrain.learning_rate = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("train.learning_rate"), "{e}");
        assert_eq!(e.exit_code(), 2);
        assert!(RunConfig::parse("seed 4").is_err());
        assert!(RunConfig::parse("seed = four").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("train.optimizer = rmsprop").is_err());
        assert!(RunConfig::parse("train.arch = segnet").is_err());
        assert!(RunConfig::parse("dataset.val_fraction = 0.7").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut c = RunConfig::parse("# header\n\n  train.lr = 0.05  \nsynth.ground_palette = green\n").unwrap();
        assert_eq!(c.train.lr, 0.05);
        assert_eq!(c.synth.ground_palette, GroundPalette::Green);
        c.apply_overrides(&["train.iterations=7".into(), "input.dsm = a/b.vddr".into()]).unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.input.dsm, Some(PathBuf::from("a/b.vddr")));
        assert!(c.apply_overrides(&["nonsense".into()]).is_err());
        c.set("input.dsm", "").unwrap();
        assert_eq!(c.input.dsm, None);
        c.set("train.class_weights", "1, 2, 3, 4.5").unwrap();
        assert_eq!(c.train.class_weights, Some([1.0, 2.0, 3.0, 4.5]));
        assert!(c.set("train.class_weights", "1,2,3").is_err());
    }

    #[test]
    fn defaults_follow_modules() {
        let c = RunConfig::default();
        assert_eq!(c.train.iterations, vdd_core::vddnet::TrainConfig::default().iterations);
        assert_eq!(c.train.batch_size, 5);
        assert_eq!(c.train.lr, 0.1);
        assert_eq!(c.train.optimizer, "sgd");
        assert_eq!((c.train.stages, c.train.base), (4, 16));
        assert_eq!(c.evaluate_window, 64);
        assert_eq!(c.segment_tile, 256);
        assert_eq!(c.dataset.patch, 256);
        assert!(!c.synth.enabled);
        let d = RunConfig::demo();
        assert!(d.synth.enabled);
        assert_eq!((d.synth.width, d.train.stages, d.train.base, d.train.iterations), (512, 2, 8, 300));
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            any::<u64>(),
            (1u32..4096, -1e6f64..1e6, any::<bool>(), 0usize..100),
            (-1e3f64..1e3, 0.0f64..1.0, prop::option::of("[a-z]{1,8}/[a-z]{1,8}\\.vddr")),
            (prop::sample::select(vec!["vddnet", "baseline4", "baseline5"]), 1e-6f64..10.0, any::<[bool; 1]>()),
            prop::option::of(prop::array::uniform4(0.0f32..100.0)),
        )
            .prop_map(|(seed, (w, amp, aug, k), (sx, frac, path), (arch, lr, [green]), cw)| {
                let mut c = RunConfig::default();
                c.seed = seed;
                c.synth.width = w;
                c.synth.terrain_amplitude = amp;
                c.dataset.augment = aug;
                c.depthmap_kernel = k + 1;
                c.synth.shift_x = sx;
                c.synth.disease_fraction = frac;
                c.input.rgb = path.map(PathBuf::from);
                c.train.arch = Arch::parse(arch).unwrap();
                c.train.lr = lr;
                c.train.class_weights = cw;
                if green {
                    c.synth.ground_palette = GroundPalette::Green;
                }
                c
            })
    }

    proptest! {
        #[test]
        fn random_configs_round_trip(c in arb_config()) {
            prop_assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        }
    }
}
