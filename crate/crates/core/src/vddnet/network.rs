use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, VddNetError};
use crate::neuralnet::{
    load_checkpoint, save_checkpoint, store_tensors, Conv2d, ConvBlock, Graph, Mode, NamedTensor, NnError, Padding,
    ParamStore,
    Real, Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VddNetSpec {
    pub stages: usize,
    pub base_channels: usize,
    pub classes: usize,
}

impl Default for VddNetSpec {
    fn default() -> Self {
        Self { stages: 4, base_channels: 16, classes: 4 }
    }
}

impl VddNetSpec {
    pub fn new(stages: usize, base_channels: usize) -> Self {
        Self { stages, base_channels, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 2 {
            return Err(VddNetError::InvalidSpec(format!("stages {} < 2", self.stages)));
        }
        if 256 % (1usize << self.stages.min(16)) != 0 || self.stages > 8 {
            return Err(VddNetError::InvalidSpec(format!("256 is not divisible by 2^{}", self.stages)));
        }
        if self.base_channels == 0 {
            return Err(VddNetError::InvalidSpec("zero base channels".into()));
        }
        if self.classes != 4 {
            return Err(VddNetError::InvalidSpec(format!("{} classes, expected 4", self.classes)));
        }
        Ok(())
    }

    /// Channels of encoder stage `s` (the bridge is stage `stages`).
    pub fn width(&self, s: usize) -> usize {
        self.base_channels << s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Parallel RGB, NIR and depth encoders merged stage by stage.
    VddNet,
    /// One encoder-decoder over stacked RGB+NIR (4) or RGB+NIR+depth (5).
    Baseline { channels_in: usize },
}

impl Arch {
    pub fn name(&self) -> String {
        match self {
            Arch::VddNet => "vddnet".into(),
            Arch::Baseline { channels_in } => format!("baseline{channels_in}"),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vddnet" => Some(Arch::VddNet),
            "baseline4" => Some(Arch::Baseline { channels_in: 4 }),
            "baseline5" => Some(Arch::Baseline { channels_in: 5 }),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Pair {
    a: ConvBlock,
    b: ConvBlock,
}

impl Pair {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            a: ConvBlock::new(store, &format!("{name}.0"), cin, cout, rng),
            b: ConvBlock::new(store, &format!("{name}.1"), cout, cout, rng),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &ParamStore<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.a.forward(g, p, x, mode)?;
        Ok(self.b.forward(g, p, y, mode)?)
    }
}

#[derive(Debug, Clone)]
enum Encoder {
    Parallel { rgb: Vec<Pair>, nir: Vec<Pair>, depth: Vec<Pair> },
    Single(Vec<Pair>),
}

#[derive(Debug, Clone, Copy)]
struct DecoderStage {
    up: Conv2d,
    convs: Pair,
}

/// Network inputs, scaled to [0, 1]: RGB `(N,3,H,W)`, NIR and depth `(N,1,H,W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Inputs<T> {
    pub rgb: Tensor<T>,
    pub nir: Tensor<T>,
    pub depth: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub arch: Arch,
    pub spec: VddNetSpec,
    pub params: ParamStore<T>,
    encoder: Encoder,
    bridge: Pair,
    decoder: Vec<DecoderStage>,
    head: Conv2d,
}

/// 2×2 convolution after upsampling, padded right/bottom to keep H and W.
const UP_PAD: Padding = Padding { top: 0, bottom: 1, left: 0, right: 1 };

impl<T: Real> Network<T> {
    pub fn new(arch: Arch, spec: VddNetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        if let Arch::Baseline { channels_in } = arch {
            if channels_in != 4 && channels_in != 5 {
                return Err(VddNetError::InvalidSpec(format!("baseline takes 4 or 5 channels, not {channels_in}")));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let s_n = spec.stages;
        let c = |s: usize| spec.width(s);
        // skip channels entering each decoder stage besides the upsampled path
        let (encoder, skip_mult, bottom) = match arch {
            Arch::VddNet => {
                let (mut rgb, mut nir, mut depth) = (Vec::new(), Vec::new(), Vec::new());
                for s in 0..s_n {
                    let (rin, sin) = if s == 0 { (3, 1) } else { (3 * c(s - 1), c(s - 1)) };
                    rgb.push(Pair::new(&mut p, &format!("enc.rgb.{s}"), rin, c(s), &mut rng));
                    nir.push(Pair::new(&mut p, &format!("enc.nir.{s}"), sin, c(s), &mut rng));
                    depth.push(Pair::new(&mut p, &format!("enc.depth.{s}"), sin, c(s), &mut rng));
                }
                (Encoder::Parallel { rgb, nir, depth }, 2, 3 * c(s_n - 1))
            }
            Arch::Baseline { channels_in } => {
                let enc = (0..s_n)
                    .map(|s| {
                        let cin = if s == 0 { channels_in } else { c(s - 1) };
                        Pair::new(&mut p, &format!("enc.{s}"), cin, c(s), &mut rng)
                    })
                    .collect();
                (Encoder::Single(enc), 1, c(s_n - 1))
            }
        };
        let bridge = Pair::new(&mut p, "bridge", bottom, c(s_n), &mut rng);
        let decoder = (0..s_n)
            .rev()
            .map(|s| DecoderStage {
                up: Conv2d::new(&mut p, &format!("dec.{s}.up"), c(s + 1), c(s), 2, 1, UP_PAD, &mut rng),
                convs: Pair::new(&mut p, &format!("dec.{s}"), (1 + skip_mult) * c(s), c(s), &mut rng),
            })
            .collect();
        let head = Conv2d::new(&mut p, "head", c(0), spec.classes, 1, 1, Padding::default(), &mut rng);
        Ok(Self { arch, spec, params: p, encoder, bridge, decoder, head })
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch,
            spec: self.spec,
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            bridge: self.bridge,
            decoder: self.decoder.clone(),
            head: self.head,
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_inputs(&self, x: &Inputs<T>) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.rgb.dims4()?;
        let ok = c == 3
            && x.nir.shape() == [n, 1, h, w]
            && x.depth.shape() == [n, 1, h, w];
        if !ok {
            return Err(VddNetError::DimensionMismatch(format!(
                "inputs {:?}, {:?}, {:?}",
                x.rgb.shape(),
                x.nir.shape(),
                x.depth.shape()
            )));
        }
        let m = 1 << self.spec.stages;
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            return Err(VddNetError::DimensionMismatch(format!("{h}x{w} is not a multiple of {m}")));
        }
        Ok((n, h, w))
    }

    /// Per-pixel class logits `(N, classes, H, W)`; probabilities are their
    /// channel softmax.
    pub fn forward(&self, g: &mut Graph<T>, x: &Inputs<T>, mode: Mode) -> Result<Var> {
        self.check_inputs(x)?;
        let p = &self.params;
        let rgb = g.input(x.rgb.clone());
        let nir = g.input(x.nir.clone());
        let depth = g.input(x.depth.clone());
        let mut skips: Vec<Vec<Var>> = Vec::new();
        let mut cur = match &self.encoder {
            Encoder::Parallel { rgb: er, nir: en, depth: ed } => {
                let (mut r, mut n, mut d) = (rgb, nir, depth);
                for s in 0..self.spec.stages {
                    let rs = er[s].forward(g, p, r, mode)?;
                    let ns = en[s].forward(g, p, n, mode)?;
                    let ds = ed[s].forward(g, p, d, mode)?;
                    let merged = g.concat_channels(&[rs, ns, ds])?;
                    skips.push(vec![ns, ds]);
                    r = g.maxpool2x2(merged)?;
                    n = g.maxpool2x2(ns)?;
                    d = g.maxpool2x2(ds)?;
                }
                r
            }
            Encoder::Single(enc) => {
                let mut parts = vec![rgb, nir];
                if self.arch == (Arch::Baseline { channels_in: 5 }) {
                    parts.push(depth);
                }
                let mut t = g.concat_channels(&parts)?;
                for pair in enc {
                    let y = pair.forward(g, p, t, mode)?;
                    skips.push(vec![y]);
                    t = g.maxpool2x2(y)?;
                }
                t
            }
        };
        cur = self.bridge.forward(g, p, cur, mode)?;
        for stage in &self.decoder {
            let skip = skips.pop().expect("one skip set per stage");
            let u = g.upsample2x(cur)?;
            let u = stage.up.forward(g, p, u)?;
            let mut parts = vec![u];
            parts.extend(skip);
            let merged = g.concat_channels(&parts)?;
            cur = stage.convs.forward(g, p, merged, mode)?;
        }
        Ok(self.head.forward(g, p, cur)?)
    }

    /// Class probabilities `(N, classes, H, W)` in inference mode.
    pub fn predict(&self, x: &Inputs<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, x, Mode::Eval)?;
        let probs = g.softmax_channels(logits)?;
        Ok(g.value(probs).clone())
    }
}

const ARCH_TENSOR: &str = "meta.arch";

impl Network<f32> {
    fn arch_tensor(&self) -> Tensor<f32> {
        let cin = match self.arch {
            Arch::VddNet => 0.0,
            Arch::Baseline { channels_in } => channels_in as f32,
        };
        let v = vec![cin, self.spec.stages as f32, self.spec.base_channels as f32, self.spec.classes as f32];
        Tensor::new(vec![4], v).expect("4 values")
    }

    /// Parameters plus the architecture record, as written by [`Self::save`].
    pub fn checkpoint_tensors(&self) -> Vec<NamedTensor> {
        store_tensors(&self.params, &[(ARCH_TENSOR.into(), self.arch_tensor())])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.checkpoint_tensors())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = load_checkpoint(path)?;
        let meta = tensors
            .iter()
            .find(|(n, _)| n == ARCH_TENSOR)
            .ok_or_else(|| NnError::Checkpoint(format!("missing {ARCH_TENSOR}")))?;
        let m = meta.1.data();
        if m.len() != 4 {
            return Err(NnError::Checkpoint(format!("{ARCH_TENSOR} has {} values", m.len())).into());
        }
        let arch = if m[0] == 0.0 { Arch::VddNet } else { Arch::Baseline { channels_in: m[0] as usize } };
        let spec = VddNetSpec { stages: m[1] as usize, base_channels: m[2] as usize, classes: m[3] as usize };
        let mut net = Network::new(arch, spec, 0)?;
        net.params.load_named(&tensors)?;
        Ok(net)
    }
}

pub fn build_vddnet(spec: VddNetSpec, seed: u64) -> Result<Network<f32>> {
    Network::new(Arch::VddNet, spec, seed)
}

pub fn build_baseline(channels_in: usize, spec: VddNetSpec, seed: u64) -> Result<Network<f32>> {
    Network::new(Arch::Baseline { channels_in }, spec, seed)
}
