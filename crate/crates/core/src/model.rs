//! Detector graph assembly, forward pass, box decoding and NMS.
//!
//! Layer numbering (0-based) is part of the model's contract; the neck's
//! cross-scale links are audited against it, so the slots are fixed even when
//! a block is toggled off (disabled attention bridges become identity layers
//! rather than disappearing):
//!
//! ```text
//!  0 stem (self-conv or 6x6 conv, /2)     14 concat [12, 13]
//!  1 conv /4                              15 c3
//!  2 swin block or c3                     16 conv 1x1
//!  3 conv /8                              17 upsample x2
//!  4 c3                       (-> P3)     18 bridge gate on 4 (or identity)
//!  5 conv /16                             19 concat [17, 18]
//!  6 c3                       (-> P4)     20 c3            (P3 head feature)
//!  7 conv /32                             21 conv /2
//!  8 c3                                   22 concat [21, 16] (+13 fused)
//!  9 sppf                                 23 c3            (P4 head feature)
//! 10 bridge gate on 9 (or identity)       24 conv /2
//! 11 conv 1x1                             25 concat [24, 11] (+10 fused)
//! 12 upsample x2                          26 c3            (P5 head feature)
//! 13 bridge gate on 6 (or identity)       27 detect [20, 23, 26]
//! ```
//!
//! Enhanced fusion adds the 13 -> 22 and 10 -> 25 edges, joining same-sized
//! maps; the widened concats are restored to branch width by a 1x1 conv
//! inside the concat layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cbam::{icbam, CamParams, IsamParams};
use crate::error::{Error, Result};
use crate::geometry;
use crate::layers::{upsample2x, C3, ConvBlock, Phase, Sppf};
use crate::msconv::{Msconv, MsconvConfig};
use crate::param::{scoped, uniform_fan_in, Named, NamedMut, Param};
use crate::scalar::{r, Real};
use crate::swin::{swin_block, SwinBlockParams};
use crate::tape::{Tape, TensorId};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 2] = ["face", "mask"];
pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const N_ANCHORS: usize = 3;

/// Axis-aligned box in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bbox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Bbox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Bbox { cx, cy, w, h }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn iou(&self, other: &Bbox) -> f64 {
        geometry::iou(self.as_array(), other.as_array())
    }
}

/// A labeled ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: Bbox,
}

#[derive(Debug, Clone)]
pub struct Detection {
    pub bbox: Bbox,
    /// Objectness multiplied by the best class score.
    pub confidence: f64,
    pub class_scores: Vec<f64>,
    pub class_id: usize,
}

/// Three anchors per output scale, in pixels at network input resolution,
/// sorted small-to-large within each scale.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    pub anchors: [[(f64, f64); N_ANCHORS]; 3],
}

impl AnchorSet {
    /// Stock anchor shapes (defined at 640 input) rescaled to `input_size`.
    pub fn default_for(input_size: usize) -> Self {
        let base: [[(f64, f64); 3]; 3] = [
            [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)],
            [(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)],
            [(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)],
        ];
        let s = input_size as f64 / 640.0;
        let mut anchors = base;
        for scale in anchors.iter_mut() {
            for a in scale.iter_mut() {
                a.0 *= s;
                a.1 *= s;
            }
        }
        AnchorSet { anchors }
    }

    pub fn validate(&self) -> Result<()> {
        for scale in &self.anchors {
            let mut prev = 0.0;
            for &(w, h) in scale {
                if w <= 0.0 || h <= 0.0 {
                    return Err(Error::config("anchors must be positive".to_string()));
                }
                let area = w * h;
                if area < prev {
                    return Err(Error::config(
                        "anchors must be sorted small-to-large per scale".to_string(),
                    ));
                }
                prev = area;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelScale {
    /// Full production widths (64..1024, depths 3/6/9/3).
    L,
    /// Widths divided by 8, every repeat count 1. Trains on a laptop.
    Toy,
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub scale: ModelScale,
    pub input_size: usize,
    pub msconv: bool,
    pub swin: bool,
    pub icbam: bool,
    pub fusion: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn toy(n_classes: usize) -> Self {
        ModelConfig {
            n_classes,
            scale: ModelScale::Toy,
            input_size: 160,
            msconv: true,
            swin: true,
            icbam: true,
            fusion: true,
            seed: 0,
        }
    }

    pub fn large(n_classes: usize) -> Self {
        ModelConfig { input_size: 640, scale: ModelScale::L, ..ModelConfig::toy(n_classes) }
    }

    /// Plain baseline: all four modifications off.
    pub fn baseline(mut self) -> Self {
        self.msconv = false;
        self.swin = false;
        self.icbam = false;
        self.fusion = false;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Src {
    Image,
    Layer(usize),
}

pub enum Block<R: Real> {
    Msconv(Msconv<R>),
    Conv(ConvBlock<R>),
    C3(C3<R>),
    Swin(SwinBlockParams<R>),
    Sppf(Sppf<R>),
    Icbam { cam: CamParams<R>, isam: IsamParams<R> },
    Identity,
    Upsample,
    Concat { fuse: Option<ConvBlock<R>> },
    Detect(DetectHead<R>),
}

impl<R: Real> Block<R> {
    fn kind_name(&self) -> String {
        match self {
            Block::Msconv(m) => format!("msconv(k{},s{})", m.cfg.kernel, m.cfg.conv_stride),
            Block::Conv(c) => {
                let ks = c.kernel.shape()[2];
                format!("conv(k{ks},s{})", c.stride)
            }
            Block::C3(c) => format!("c3(n{})", c.blocks.len()),
            Block::Swin(s) => format!("swin(m{})", s.cfg.window),
            Block::Sppf(s) => format!("sppf(k{})", s.pool_k),
            Block::Icbam { .. } => "icbam".to_string(),
            Block::Identity => "identity".to_string(),
            Block::Upsample => "upsample(x2)".to_string(),
            Block::Concat { fuse } => {
                if fuse.is_some() {
                    "concat+fuse".to_string()
                } else {
                    "concat".to_string()
                }
            }
            Block::Detect(_) => "detect".to_string(),
        }
    }
}

/// One 1x1 conv per scale mapping branch width to 3*(5+nc) raw channels.
pub struct DetectHead<R> {
    pub convs: Vec<Param<R>>,
    pub biases: Vec<Param<R>>,
    pub n_classes: usize,
}

impl<R: Real> DetectHead<R> {
    fn new(in_chs: &[usize], n_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let out = N_ANCHORS * (5 + n_classes);
        let mut convs = Vec::new();
        let mut biases = Vec::new();
        for &c in in_chs {
            convs.push(Param::new(uniform_fan_in(&[out, c, 1, 1], c, rng)));
            // objectness starts strongly negative: almost every cell is
            // background, so this removes a large constant from early loss
            let mut b = Tensor::zeros(&[out]);
            for a in 0..N_ANCHORS {
                b.data_mut()[a * (5 + n_classes) + 4] = r(-4.0);
            }
            biases.push(Param::no_decay(b));
        }
        DetectHead { convs, biases, n_classes }
    }

    pub fn out_channels(&self) -> usize {
        N_ANCHORS * (5 + self.n_classes)
    }

    fn forward_scale(&self, t: &mut Tape<R>, x: TensorId, scale: usize) -> Result<TensorId> {
        let k = t.param(&self.convs[scale]);
        let y = t.conv2d(x, k, 1, 0)?;
        let b = t.param(&self.biases[scale]);
        let bs = self.out_channels();
        let bid = t.reshape(b, &[bs, 1, 1])?;
        t.add(y, bid)
    }

    fn params(&self) -> Named<'_, R> {
        let mut v: Named<'_, R> = Vec::new();
        for (i, p) in self.convs.iter().enumerate() {
            v.push((format!("conv{i}"), p));
        }
        for (i, p) in self.biases.iter().enumerate() {
            v.push((format!("bias{i}"), p));
        }
        v
    }

    fn params_mut(&mut self) -> NamedMut<'_, R> {
        let mut v: NamedMut<'_, R> = Vec::new();
        for (i, p) in self.convs.iter_mut().enumerate() {
            v.push((format!("conv{i}"), p));
        }
        for (i, p) in self.biases.iter_mut().enumerate() {
            v.push((format!("bias{i}"), p));
        }
        v
    }
}

pub struct Layer<R: Real> {
    pub block: Block<R>,
    pub from: Vec<Src>,
    pub out_shape: (usize, usize, usize),
}

pub struct Model<R: Real> {
    pub cfg: ModelConfig,
    pub anchors: AnchorSet,
    pub layers: Vec<Layer<R>>,
    pub detect_index: usize,
}

/// Indices of the three neck merge points and their expected link sources.
pub const FUSION_BASE: [(usize, usize); 4] = [(14, 13), (19, 18), (22, 16), (25, 11)];
pub const FUSION_ENHANCED: [(usize, usize); 2] = [(22, 13), (25, 10)];

pub fn build_model<R: Real>(cfg: ModelConfig, anchors: AnchorSet) -> Result<Model<R>> {
    if cfg.n_classes == 0 {
        return Err(Error::config("need at least one class".to_string()));
    }
    anchors.validate()?;
    if cfg.input_size % 32 != 0 {
        return Err(Error::config(format!(
            "input size {} must be a multiple of 32",
            cfg.input_size
        )));
    }
    let rng = &mut ChaCha8Rng::seed_from_u64(cfg.seed);
    let div = match cfg.scale {
        ModelScale::L => 1,
        ModelScale::Toy => 8,
    };
    let w: Vec<usize> = [64usize, 128, 256, 512, 1024].iter().map(|c| c / div).collect();
    let depths: [usize; 4] = match cfg.scale {
        ModelScale::L => [3, 6, 9, 3],
        ModelScale::Toy => [1, 1, 1, 1],
    };
    let dh = match cfg.scale {
        ModelScale::L => 3,
        ModelScale::Toy => 1,
    };
    let s = cfg.input_size;

    let mut layers: Vec<Layer<R>> = Vec::with_capacity(28);
    let shape_of = |layers: &Vec<Layer<R>>, src: Src| match src {
        Src::Image => (3usize, s, s),
        Src::Layer(i) => layers[i].out_shape,
    };
    let push = |layers: &mut Vec<Layer<R>>, block: Block<R>, from: Vec<Src>, out_ch: usize, spatial_div: usize| {
        let (_, h, ww) = shape_of(layers, from[0]);
        let out_shape = (out_ch, h / spatial_div, ww / spatial_div);
        layers.push(Layer { block, from, out_shape });
    };

    // backbone
    let stem: Block<R> = if cfg.msconv {
        Block::Msconv(Msconv::new(MsconvConfig::stem(3, w[0]), rng)?)
    } else {
        Block::Conv(ConvBlock::new(3, w[0], 6, 2, rng))
    };
    push(&mut layers, stem, vec![Src::Image], w[0], 2);
    push(&mut layers, Block::Conv(ConvBlock::new(w[0], w[1], 3, 2, rng)), vec![Src::Layer(0)], w[1], 2);
    let l2: Block<R> = if cfg.swin {
        Block::Swin(SwinBlockParams::new(w[1], 8, 4, rng)?)
    } else {
        Block::C3(C3::new(w[1], w[1], depths[0], true, rng)?)
    };
    push(&mut layers, l2, vec![Src::Layer(1)], w[1], 1);
    push(&mut layers, Block::Conv(ConvBlock::new(w[1], w[2], 3, 2, rng)), vec![Src::Layer(2)], w[2], 2);
    push(&mut layers, Block::C3(C3::new(w[2], w[2], depths[1], true, rng)?), vec![Src::Layer(3)], w[2], 1);
    push(&mut layers, Block::Conv(ConvBlock::new(w[2], w[3], 3, 2, rng)), vec![Src::Layer(4)], w[3], 2);
    push(&mut layers, Block::C3(C3::new(w[3], w[3], depths[2], true, rng)?), vec![Src::Layer(5)], w[3], 1);
    push(&mut layers, Block::Conv(ConvBlock::new(w[3], w[4], 3, 2, rng)), vec![Src::Layer(6)], w[4], 2);
    push(&mut layers, Block::C3(C3::new(w[4], w[4], depths[3], true, rng)?), vec![Src::Layer(7)], w[4], 1);
    push(&mut layers, Block::Sppf(Sppf::new(w[4], w[4], 5, rng)?), vec![Src::Layer(8)], w[4], 1);

    // attention bridges between backbone and neck (identity when disabled,
    // so layer numbering is stable for the link audit)
    let bridge = |c: usize, rng: &mut ChaCha8Rng| -> Result<Block<R>> {
        if cfg.icbam {
            Ok(Block::Icbam { cam: CamParams::new(c, c.min(16), rng)?, isam: IsamParams::new(rng) })
        } else {
            Ok(Block::Identity)
        }
    };

    push(&mut layers, bridge(w[4], rng)?, vec![Src::Layer(9)], w[4], 1);
    push(&mut layers, Block::Conv(ConvBlock::new(w[4], w[3], 1, 1, rng)), vec![Src::Layer(10)], w[3], 1);
    layers.push(Layer {
        block: Block::Upsample,
        from: vec![Src::Layer(11)],
        out_shape: {
            let (c, h, ww) = layers[11].out_shape;
            (c, h * 2, ww * 2)
        },
    });
    push(&mut layers, bridge(w[3], rng)?, vec![Src::Layer(6)], w[3], 1);
    push(&mut layers, Block::Concat { fuse: None }, vec![Src::Layer(12), Src::Layer(13)], 2 * w[3], 1);
    push(&mut layers, Block::C3(C3::new(2 * w[3], w[3], dh, false, rng)?), vec![Src::Layer(14)], w[3], 1);
    push(&mut layers, Block::Conv(ConvBlock::new(w[3], w[2], 1, 1, rng)), vec![Src::Layer(15)], w[2], 1);
    layers.push(Layer {
        block: Block::Upsample,
        from: vec![Src::Layer(16)],
        out_shape: {
            let (c, h, ww) = layers[16].out_shape;
            (c, h * 2, ww * 2)
        },
    });
    push(&mut layers, bridge(w[2], rng)?, vec![Src::Layer(4)], w[2], 1);
    push(&mut layers, Block::Concat { fuse: None }, vec![Src::Layer(17), Src::Layer(18)], 2 * w[2], 1);
    push(&mut layers, Block::C3(C3::new(2 * w[2], w[2], dh, false, rng)?), vec![Src::Layer(19)], w[2], 1);
    push(&mut layers, Block::Conv(ConvBlock::new(w[2], w[2], 3, 2, rng)), vec![Src::Layer(20)], w[2], 2);

    // PAN merges; enhanced fusion adds the backbone bridges and a 1x1
    // restore conv so the following C3 keeps its stock input width
    if cfg.fusion {
        let fuse = ConvBlock::new(2 * w[2] + w[3], 2 * w[2], 1, 1, rng);
        push(
            &mut layers,
            Block::Concat { fuse: Some(fuse) },
            vec![Src::Layer(21), Src::Layer(16), Src::Layer(13)],
            2 * w[2],
            1,
        );
    } else {
        push(&mut layers, Block::Concat { fuse: None }, vec![Src::Layer(21), Src::Layer(16)], 2 * w[2], 1);
    }
    push(&mut layers, Block::C3(C3::new(2 * w[2], w[3], dh, false, rng)?), vec![Src::Layer(22)], w[3], 1);
    push(&mut layers, Block::Conv(ConvBlock::new(w[3], w[3], 3, 2, rng)), vec![Src::Layer(23)], w[3], 2);
    if cfg.fusion {
        let fuse = ConvBlock::new(2 * w[3] + w[4], 2 * w[3], 1, 1, rng);
        push(
            &mut layers,
            Block::Concat { fuse: Some(fuse) },
            vec![Src::Layer(24), Src::Layer(11), Src::Layer(10)],
            2 * w[3],
            1,
        );
    } else {
        push(&mut layers, Block::Concat { fuse: None }, vec![Src::Layer(24), Src::Layer(11)], 2 * w[3], 1);
    }
    push(&mut layers, Block::C3(C3::new(2 * w[3], w[4], dh, false, rng)?), vec![Src::Layer(25)], w[4], 1);

    let detect = DetectHead::new(&[w[2], w[3], w[4]], cfg.n_classes, rng);
    let out_ch = detect.out_channels();
    push(
        &mut layers,
        Block::Detect(detect),
        vec![Src::Layer(20), Src::Layer(23), Src::Layer(26)],
        out_ch,
        1,
    );

    Ok(Model { cfg, anchors, layers, detect_index: 27 })
}

impl<R: Real> Model<R> {
    /// Run the graph on one [3,S,S] image; returns the three raw head maps,
    /// fine to coarse.
    pub fn forward(&self, t: &mut Tape<R>, image: TensorId, phase: Phase) -> Result<[TensorId; 3]> {
        let sh = t.shape(image).to_vec();
        if sh != [3, self.cfg.input_size, self.cfg.input_size] {
            return Err(Error::shape(format!(
                "expected [3, {0}, {0}] input, got {sh:?}",
                self.cfg.input_size
            )));
        }
        let mut outs: Vec<Option<TensorId>> = vec![None; self.layers.len()];
        let mut raws: Option<[TensorId; 3]> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let inputs: Vec<TensorId> = layer
                .from
                .iter()
                .map(|&src| match src {
                    Src::Image => image,
                    Src::Layer(j) => outs[j].expect("layer inputs precede the layer"),
                })
                .collect();
            let x = inputs[0];
            let y = match &layer.block {
                Block::Msconv(m) => m.forward(t, x)?,
                Block::Conv(c) => c.forward(t, x, phase)?,
                Block::C3(c) => c.forward(t, x, phase)?,
                Block::Swin(p) => {
                    let (c, h, w) = (t.shape(x)[0], t.shape(x)[1], t.shape(x)[2]);
                    let hwc = chw_to_hwc(t, x)?;
                    let y = swin_block(t, hwc, p)?;
                    hwc_to_chw(t, y, c, h, w)?
                }
                Block::Sppf(s) => s.forward(t, x, phase)?,
                Block::Icbam { cam, isam } => icbam(t, x, cam, isam)?,
                Block::Identity => x,
                Block::Upsample => upsample2x(t, x)?,
                Block::Concat { fuse } => {
                    let cat = t.concat(&inputs, 0)?;
                    match fuse {
                        Some(cv) => cv.forward(t, cat, phase)?,
                        None => cat,
                    }
                }
                Block::Detect(d) => {
                    let p3 = d.forward_scale(t, inputs[0], 0)?;
                    let p4 = d.forward_scale(t, inputs[1], 1)?;
                    let p5 = d.forward_scale(t, inputs[2], 2)?;
                    raws = Some([p3, p4, p5]);
                    p3
                }
            };
            outs[i] = Some(y);
        }
        Ok(raws.expect("graph contains a detect layer"))
    }

    /// Plain-text table of the graph: index, kind, input edges, output shape.
    pub fn graph_dump(&self) -> String {
        let mut out = String::new();
        out.push_str("idx  kind            from            output\n");
        for (i, layer) in self.layers.iter().enumerate() {
            let from: Vec<String> = layer
                .from
                .iter()
                .map(|s| match s {
                    Src::Image => "in".to_string(),
                    Src::Layer(j) => j.to_string(),
                })
                .collect();
            let (c, h, w) = layer.out_shape;
            out.push_str(&format!(
                "{:<4} {:<15} {:<15} {}x{}x{}\n",
                i,
                layer.block.kind_name(),
                format!("[{}]", from.join(",")),
                c,
                h,
                w
            ));
        }
        out
    }

    /// All (merge point, extra source) links beyond each layer's first input.
    pub fn fusion_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer.block, Block::Detect(_)) {
                continue;
            }
            for src in layer.from.iter().skip(1) {
                if let Src::Layer(j) = src {
                    edges.push((i, *j));
                }
            }
        }
        edges
    }

    pub fn named_params(&self) -> Named<'_, R> {
        let mut v: Named<'_, R> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = format!("layer{i}");
            let items: Named<'_, R> = match &layer.block {
                Block::Msconv(m) => m.params(),
                Block::Conv(c) => c.params(),
                Block::C3(c) => c.params(),
                Block::Swin(s) => s.params(),
                Block::Sppf(s) => s.params(),
                Block::Icbam { cam, isam } => {
                    let mut v = scoped("cam", cam.params());
                    v.extend(scoped("isam", isam.params()));
                    v
                }
                Block::Identity | Block::Upsample => Vec::new(),
                Block::Concat { fuse } => match fuse {
                    Some(cv) => scoped("fuse", cv.params()),
                    None => Vec::new(),
                },
                Block::Detect(d) => d.params(),
            };
            v.extend(scoped(&pre, items));
        }
        v
    }

    pub fn named_params_mut(&mut self) -> NamedMut<'_, R> {
        let mut v: NamedMut<'_, R> = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let pre = format!("layer{i}");
            let items: NamedMut<'_, R> = match &mut layer.block {
                Block::Msconv(m) => m.params_mut(),
                Block::Conv(c) => c.params_mut(),
                Block::C3(c) => c.params_mut(),
                Block::Swin(s) => s.params_mut(),
                Block::Sppf(s) => s.params_mut(),
                Block::Icbam { cam, isam } => {
                    let mut v = scoped("cam", cam.params_mut());
                    v.extend(scoped("isam", isam.params_mut()));
                    v
                }
                Block::Identity | Block::Upsample => Vec::new(),
                Block::Concat { fuse } => match fuse {
                    Some(cv) => scoped("fuse", cv.params_mut()),
                    None => Vec::new(),
                },
                Block::Detect(d) => d.params_mut(),
            };
            v.extend(scoped(&pre, items));
        }
        v
    }

    /// Batch-norm running statistics, for checkpointing.
    pub fn named_buffers(&self) -> Vec<(String, Vec<R>)> {
        let mut v: Vec<(String, Vec<R>)> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = format!("layer{i}");
            let items = match &layer.block {
                Block::Conv(c) => c.buffers(),
                Block::C3(c) => c.buffers(),
                Block::Sppf(s) => s.buffers(),
                Block::Concat { fuse: Some(cv) } => scoped("fuse", cv.buffers()),
                _ => Vec::new(),
            };
            v.extend(scoped(&pre, items));
        }
        v
    }

    pub fn load_buffer(&self, name: &str, data: &[R]) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = format!("layer{i}.");
            let Some(rest) = name.strip_prefix(&pre) else { continue };
            return match &layer.block {
                Block::Conv(c) => c.load_buffer(rest, data),
                Block::C3(c) => c.load_buffer(rest, data),
                Block::Sppf(s) => s.load_buffer(rest, data),
                Block::Concat { fuse: Some(cv) } => match rest.strip_prefix("fuse.") {
                    Some(r2) => cv.load_buffer(r2, data),
                    None => Err(Error::Checkpoint(format!("unknown buffer {name}"))),
                },
                _ => Err(Error::Checkpoint(format!("unknown buffer {name}"))),
            };
        }
        Err(Error::Checkpoint(format!("unknown buffer {name}")))
    }

    /// Every batch-norm layer in the graph.
    pub fn norms(&self) -> Vec<&crate::layers::BatchNorm2d<R>> {
        let mut v = Vec::new();
        for layer in &self.layers {
            match &layer.block {
                Block::Conv(c) => v.extend(c.norms()),
                Block::C3(c) => v.extend(c.norms()),
                Block::Sppf(s) => v.extend(s.norms()),
                Block::Concat { fuse: Some(cv) } => v.extend(cv.norms()),
                _ => {}
            }
        }
        v
    }

    /// Forward + decode + NMS on one image tensor.
    pub fn detect(
        &self,
        image: &Tensor<R>,
        conf_thresh: f64,
        iou_thresh: f64,
    ) -> Result<Vec<Detection>> {
        let mut t = Tape::new();
        let x = t.constant(image.clone());
        let raws = self.forward(&mut t, x, Phase::Infer)?;
        let mut dets = Vec::new();
        for (scale, &raw) in raws.iter().enumerate() {
            dets.extend(decode(
                t.value(raw),
                &self.anchors,
                scale,
                self.cfg.input_size,
                self.cfg.n_classes,
                conf_thresh,
            )?);
        }
        Ok(nms(dets, iou_thresh))
    }
}

fn chw_to_hwc<R: Real>(t: &mut Tape<R>, x: TensorId) -> Result<TensorId> {
    let s = t.shape(x).to_vec();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut idx = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                idx.push((ch * h + y) * w + xx);
            }
        }
    }
    t.gather(x, idx, vec![h, w, c])
}

fn hwc_to_chw<R: Real>(t: &mut Tape<R>, x: TensorId, c: usize, h: usize, w: usize) -> Result<TensorId> {
    let mut idx = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                idx.push((y * w + xx) * c + ch);
            }
        }
    }
    t.gather(x, idx, vec![c, h, w])
}

/// Decode one raw head map [3*(5+nc), G, G] into detections above the
/// confidence threshold, with boxes in normalized units.
pub fn decode<R: Real>(
    raw: &Tensor<R>,
    anchors: &AnchorSet,
    scale: usize,
    input_size: usize,
    n_classes: usize,
    conf_thresh: f64,
) -> Result<Vec<Detection>> {
    let stride = STRIDES[scale];
    let g = input_size / stride;
    let per = 5 + n_classes;
    let expect = [N_ANCHORS * per, g, g];
    if raw.shape() != expect.as_slice() {
        return Err(Error::shape(format!(
            "decode: raw map {:?} does not match {expect:?}",
            raw.shape()
        )));
    }
    let d = raw.data();
    let cell = |a: usize, ch: usize, gy: usize, gx: usize| {
        d[((a * per + ch) * g + gy) * g + gx].as_f64()
    };
    let mut dets = Vec::new();
    let inv = 1.0 / input_size as f64;
    for a in 0..N_ANCHORS {
        let (aw, ah) = anchors.anchors[scale][a];
        for gy in 0..g {
            for gx in 0..g {
                let obj = sigmoid64(cell(a, 4, gy, gx));
                let scores: Vec<f64> =
                    (0..n_classes).map(|k| sigmoid64(cell(a, 5 + k, gy, gx))).collect();
                let (class_id, best) = scores
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0usize, f64::MIN), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
                let conf = obj * best;
                if conf < conf_thresh {
                    continue;
                }
                let sx = sigmoid64(cell(a, 0, gy, gx));
                let sy = sigmoid64(cell(a, 1, gy, gx));
                let sw = sigmoid64(cell(a, 2, gy, gx));
                let sh = sigmoid64(cell(a, 3, gy, gx));
                let cx = (2.0 * sx - 0.5 + gx as f64) * stride as f64 * inv;
                let cy = (2.0 * sy - 0.5 + gy as f64) * stride as f64 * inv;
                let w = (2.0 * sw) * (2.0 * sw) * aw * inv;
                let h = (2.0 * sh) * (2.0 * sh) * ah * inv;
                dets.push(Detection {
                    bbox: Bbox::new(cx, cy, w, h),
                    confidence: conf,
                    class_scores: scores,
                    class_id,
                });
            }
        }
    }
    Ok(dets)
}

fn sigmoid64(x: f64) -> f64 {
    crate::scalar::Real::sigmoid(x)
}

/// Greedy per-class suppression: keep the most confident detection, drop
/// same-class overlaps above the IoU threshold. Output sorted by confidence
/// descending (ties by original order).
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].confidence.partial_cmp(&dets[a].confidence).unwrap().then(a.cmp(&b))
    });
    let mut keep: Vec<Detection> = Vec::new();
    let mut suppressed = vec![false; dets.len()];
    for (rank, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        for &j in order.iter().skip(rank + 1) {
            if suppressed[j] || dets[j].class_id != dets[i].class_id {
                continue;
            }
            if dets[i].bbox.iou(&dets[j].bbox) > iou_thresh {
                suppressed[j] = true;
            }
        }
        keep.push(std::mem::replace(
            &mut dets[i],
            Detection { bbox: Bbox::new(0.0, 0.0, 0.0, 0.0), confidence: 0.0, class_scores: vec![], class_id: 0 },
        ));
    }
    keep
}
