//! Two-stream restoration network: a stack of fusion blocks consuming
//! (gradient maps, adversarial image) and emitting a restored image.
//!
//! Each fusion block runs a densely connected six-conv image stream and a
//! densely connected four-conv gradient stream. Image features from the two
//! shallow layers are channel-attended and injected into the gradient
//! stream; the final image conv consumes the concatenation of the deepest
//! features of both streams and its output is added residually to the block
//! input, so a block with zero kernels is an exact identity on the image
//! path. A second channel attention re-weighs the incoming gradient
//! features, whose class maps contribute unequally.
//!
//! The network head is a zero-initialized conv producing an image-space
//! residual: an untrained network is exactly the identity on valid pixels,
//! so the defense starts from no-op. Output pixels are clamped to [0, 1]
//! through the differentiable saturating projection.

use std::path::Path;

use crate::error::{Error, Result};
use crate::gmem::{GradientMaps, NormMode};
use crate::models::{
    fill_params, parse_descriptor, read_checkpoint, write_checkpoint, CheckpointMeta, ConvLayer,
    DenseLayer,
};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which streams the network is built with. The one-stream variants are the
/// ablation configurations: image-only removes the gradient stream wholesale;
/// gradient-only removes the image convolutions except the fuse conv, so the
/// benign perturbation is estimated from gradient maps alone and added onto
/// the adversarial image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamMode {
    TwoStream,
    ImageOnly,
    GradientOnly,
}

impl StreamMode {
    pub fn name(self) -> &'static str {
        match self {
            StreamMode::TwoStream => "two-stream",
            StreamMode::ImageOnly => "image-only",
            StreamMode::GradientOnly => "gradient-only",
        }
    }

    pub fn has_image_stream(self) -> bool {
        !matches!(self, StreamMode::GradientOnly)
    }

    pub fn has_gradient_stream(self) -> bool {
        !matches!(self, StreamMode::ImageOnly)
    }
}

impl std::str::FromStr for StreamMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-stream" => Ok(StreamMode::TwoStream),
            "image-only" => Ok(StreamMode::ImageOnly),
            "gradient-only" => Ok(StreamMode::GradientOnly),
            other => Err(Error::Config(format!("unknown stream mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrnConfig {
    /// Fusion block count K.
    pub blocks: usize,
    /// Feature width both stems lift to, and the inter-block width.
    pub feature_width: usize,
    /// Channels added by each dense conv.
    pub growth: usize,
    /// Channel-attention reduction ratio.
    pub ca_reduction: usize,
    pub stream: StreamMode,
    /// Gradient-map scaling the network was trained with; inference must
    /// reproduce the same input distribution.
    pub norm_mode: NormMode,
    /// When set, every block owns a zero-initialized image-space head and
    /// the restored image accumulates per-block residuals instead of one
    /// residual at the end.
    pub per_block_image_residual: bool,
    /// C×H×W of the images being restored.
    pub image_shape: (usize, usize, usize),
    pub class_count: usize,
}

impl TrnConfig {
    pub fn desk_scale(image_shape: (usize, usize, usize), class_count: usize) -> Self {
        TrnConfig {
            blocks: 2,
            feature_width: 32,
            growth: 16,
            ca_reduction: 4,
            stream: StreamMode::TwoStream,
            norm_mode: NormMode::PerMapStd,
            per_block_image_residual: false,
            image_shape,
            class_count,
        }
    }

    pub fn with_blocks(mut self, k: usize) -> Self {
        self.blocks = k;
        self
    }

    pub fn with_stream(mut self, stream: StreamMode) -> Self {
        self.stream = stream;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::Config("fusion block count must be at least 1".into()));
        }
        if self.feature_width == 0 || self.growth == 0 || self.ca_reduction == 0 {
            return Err(Error::Config("widths and reduction must be positive".into()));
        }
        Ok(())
    }
}

/// Squeeze-and-excitation gating: global average pool, bottleneck dense,
/// ReLU, expand dense, sigmoid, per-channel multiply. Bottleneck width is
/// max(ceil(C / reduction), 4).
#[derive(Debug, Clone)]
pub struct ChannelAttention<T: Scalar> {
    pub fc1: DenseLayer<T>,
    pub fc2: DenseLayer<T>,
    pub channels: usize,
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new(rng: &mut Rng, channels: usize, reduction: usize) -> Self {
        let bottleneck = channels.div_ceil(reduction).max(4);
        ChannelAttention {
            fc1: DenseLayer::he(rng, channels, bottleneck),
            fc2: DenseLayer::he(rng, bottleneck, channels),
            channels,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, features: Var, train: bool) -> Result<Var> {
        let squeezed = tape.global_avg_pool(features)?;
        let mut z = self.fc1.forward(tape, squeezed, train)?;
        z = tape.relu(z);
        z = self.fc2.forward(tape, z, train)?;
        let gates = tape.sigmoid(z);
        tape.scale_channels(features, gates)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.fc1.collect(&format!("{prefix}.fc1"), out);
        self.fc2.collect(&format!("{prefix}.fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.fc1.collect_mut(&format!("{prefix}.fc1"), out);
        self.fc2.collect_mut(&format!("{prefix}.fc2"), out);
    }
}

#[derive(Debug, Clone)]
pub struct FusionBlock<T: Scalar> {
    /// i1..i5, densely connected 3×3 convs. Empty in gradient-only mode.
    pub image_convs: Vec<ConvLayer<T>>,
    /// i6: consumes the concatenated deepest features and emits the
    /// feature-space residual added to the block's image input.
    pub fuse_conv: ConvLayer<T>,
    /// g1..g4, densely connected 3×3 convs. Empty in image-only mode.
    pub grad_convs: Vec<ConvLayer<T>>,
    /// Re-weighs the two shallow image features injected into the gradient
    /// stream ("features from different streams").
    pub ca_inject: Option<ChannelAttention<T>>,
    /// Re-weighs the incoming gradient features ("maps from different
    /// labels").
    pub ca_grad: Option<ChannelAttention<T>>,
    /// 1×1 conv lifting g4 back to the inter-block width for the gradient
    /// stream's residual refinement.
    pub transition: Option<ConvLayer<T>>,
}

impl<T: Scalar> FusionBlock<T> {
    /// `has_successor` controls whether the gradient-stream output (the
    /// 1×1-lifted residual refinement) is built at all: the last block's
    /// refined gradient features have no consumer, and a parameter that can
    /// never receive gradient would be dead weight.
    fn new(rng: &mut Rng, cfg: &TrnConfig, has_successor: bool) -> Self {
        let w = cfg.feature_width;
        let g = cfg.growth;
        let (image_convs, fuse_in) = if cfg.stream.has_image_stream() {
            let convs: Vec<ConvLayer<T>> = (0..5)
                .map(|i| ConvLayer::he(rng, w + i * g, g, 3, 1, 1))
                .collect();
            let fuse_in = if cfg.stream.has_gradient_stream() { 2 * g } else { g };
            (convs, fuse_in)
        } else {
            (Vec::new(), g)
        };
        let (grad_convs, ca_inject, ca_grad, transition) = if cfg.stream.has_gradient_stream() {
            let g_in = if cfg.stream.has_image_stream() {
                w + 2 * g // ca2(grad features) ++ injected image features
            } else {
                w
            };
            let convs: Vec<ConvLayer<T>> = (0..4)
                .map(|i| ConvLayer::he(rng, g_in + i * g, g, 3, 1, 1))
                .collect();
            let ca_inject = cfg
                .stream
                .has_image_stream()
                .then(|| ChannelAttention::new(rng, 2 * g, cfg.ca_reduction));
            let ca_grad = Some(ChannelAttention::new(rng, w, cfg.ca_reduction));
            let transition = has_successor.then(|| ConvLayer::he(rng, g, w, 1, 1, 0));
            (convs, ca_inject, ca_grad, transition)
        } else {
            (Vec::new(), None, None, None)
        };
        FusionBlock {
            image_convs,
            fuse_conv: ConvLayer::he(rng, fuse_in, w, 3, 1, 1),
            grad_convs,
            ca_inject,
            ca_grad,
            transition,
        }
    }

    /// Runs the block. `grad_feat` must be present exactly when the block
    /// has a gradient stream. With `bpda_image_backward`, gradient-stream
    /// contributions are detached so backward flows through the image
    /// stream only, while forward values are untouched.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        index: usize,
        img_feat: Var,
        grad_feat: Option<Var>,
        train: bool,
        bpda_image_backward: bool,
    ) -> Result<(Var, Option<Var>)> {
        fn tag_block(index: usize, e: Error) -> Error {
            match e {
                Error::Shape { op, detail } => {
                    Error::shape(op, format!("fusion block {index}: {detail}"))
                }
                other => other,
            }
        }
        macro_rules! try_block {
            ($e:expr) => {
                $e.map_err(|e| tag_block(index, e))?
            };
        }

        let mut image_feats: Vec<Var> = vec![img_feat];

        // shallow image layers
        if !self.image_convs.is_empty() {
            for conv in &self.image_convs[..2] {
                let cat = try_block!(tape.concat_channels(&image_feats));
                let out = try_block!(conv.forward(tape, cat, train));
                image_feats.push(tape.relu(out));
            }
        }

        // gradient stream, guided by the shallow image features
        let grad_out = if let Some(gf) = grad_feat {
            let attended = try_block!(self
                .ca_grad
                .as_ref()
                .expect("gradient stream has ca_grad")
                .forward(tape, gf, train));
            let mut grad_feats: Vec<Var> = vec![attended];
            if let Some(ca1) = &self.ca_inject {
                let shallow = try_block!(tape.concat_channels(&[image_feats[1], image_feats[2]]));
                let injected = try_block!(ca1.forward(tape, shallow, train));
                grad_feats.push(injected);
            }
            let mut g_last = None;
            for conv in &self.grad_convs {
                let cat = try_block!(tape.concat_channels(&grad_feats));
                let out = try_block!(conv.forward(tape, cat, train));
                let out = tape.relu(out);
                grad_feats.push(out);
                g_last = Some(out);
            }
            let g4 = g_last.expect("gradient stream has four convs");
            let refined = match &self.transition {
                Some(tr) => {
                    let lifted = try_block!(tr.forward(tape, g4, train));
                    Some(try_block!(tape.add(gf, lifted)))
                }
                None => None,
            };
            Some((g4, refined))
        } else {
            None
        };

        // deep image layers
        if !self.image_convs.is_empty() {
            for conv in &self.image_convs[2..] {
                let cat = try_block!(tape.concat_channels(&image_feats));
                let out = try_block!(conv.forward(tape, cat, train));
                image_feats.push(tape.relu(out));
            }
        }

        // fuse the deepest features of both streams
        let mut fuse_inputs: Vec<Var> = Vec::new();
        if !self.image_convs.is_empty() {
            fuse_inputs.push(*image_feats.last().expect("image stream nonempty"));
        }
        if let Some((g4, _)) = grad_out {
            let g4 = if bpda_image_backward { tape.detach(g4) } else { g4 };
            fuse_inputs.push(g4);
        }
        let fused = try_block!(tape.concat_channels(&fuse_inputs));
        let residual = try_block!(self.fuse_conv.forward(tape, fused, train));
        let img_out = try_block!(tape.add(img_feat, residual));

        Ok((img_out, grad_out.and_then(|(_, refined)| refined)))
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, conv) in self.image_convs.iter().enumerate() {
            conv.collect(&format!("{prefix}.i{}", i + 1), out);
        }
        self.fuse_conv.collect(&format!("{prefix}.i6"), out);
        for (i, conv) in self.grad_convs.iter().enumerate() {
            conv.collect(&format!("{prefix}.g{}", i + 1), out);
        }
        if let Some(ca) = &self.ca_inject {
            ca.collect(&format!("{prefix}.ca1"), out);
        }
        if let Some(ca) = &self.ca_grad {
            ca.collect(&format!("{prefix}.ca2"), out);
        }
        if let Some(tr) = &self.transition {
            tr.collect(&format!("{prefix}.transition"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, conv) in self.image_convs.iter_mut().enumerate() {
            conv.collect_mut(&format!("{prefix}.i{}", i + 1), out);
        }
        self.fuse_conv.collect_mut(&format!("{prefix}.i6"), out);
        for (i, conv) in self.grad_convs.iter_mut().enumerate() {
            conv.collect_mut(&format!("{prefix}.g{}", i + 1), out);
        }
        if let Some(ca) = &mut self.ca_inject {
            ca.collect_mut(&format!("{prefix}.ca1"), out);
        }
        if let Some(ca) = &mut self.ca_grad {
            ca.collect_mut(&format!("{prefix}.ca2"), out);
        }
        if let Some(tr) = &mut self.transition {
            tr.collect_mut(&format!("{prefix}.transition"), out);
        }
    }
}

#[derive(Debug, Clone)]
enum HeadKind<T: Scalar> {
    /// One zero-initialized conv mapping the final image features to an
    /// image-space residual.
    Single(ConvLayer<T>),
    /// One zero-initialized conv per block; residuals accumulate.
    PerBlock(Vec<ConvLayer<T>>),
}

#[derive(Debug, Clone)]
pub struct TrnModel<T: Scalar> {
    pub cfg: TrnConfig,
    image_stem: Option<ConvLayer<T>>,
    grad_stem: Option<ConvLayer<T>>,
    pub blocks: Vec<FusionBlock<T>>,
    head: HeadKind<T>,
}

impl<T: Scalar> TrnModel<T> {
    pub fn new(rng: &mut Rng, cfg: TrnConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, _, _) = cfg.image_shape;
        let w = cfg.feature_width;
        let image_stem = cfg
            .stream
            .has_image_stream()
            .then(|| ConvLayer::he(rng, c, w, 3, 1, 1));
        let grad_stem = cfg
            .stream
            .has_gradient_stream()
            .then(|| ConvLayer::he(rng, cfg.class_count * c, w, 3, 1, 1));
        let blocks = (0..cfg.blocks)
            .map(|i| FusionBlock::new(rng, &cfg, i + 1 < cfg.blocks))
            .collect();
        let head = if cfg.per_block_image_residual {
            HeadKind::PerBlock((0..cfg.blocks).map(|_| ConvLayer::zeros(w, c, 3, 1, 1)).collect())
        } else {
            HeadKind::Single(ConvLayer::zeros(w, c, 3, 1, 1))
        };
        Ok(TrnModel {
            cfg,
            image_stem,
            grad_stem,
            blocks,
            head,
        })
    }

    fn check_inputs(&self, g_shape: &[usize], x_shape: &[usize]) -> Result<()> {
        let (c, h, w) = self.cfg.image_shape;
        if x_shape.len() != 4 || x_shape[1] != c || x_shape[2] != h || x_shape[3] != w {
            return Err(Error::shape(
                "trn_forward",
                format!("image {:?} does not match expected N×{}×{}×{}", x_shape, c, h, w),
            ));
        }
        let gc = self.cfg.class_count * c;
        if g_shape.len() != 4
            || g_shape[0] != x_shape[0]
            || g_shape[1] != gc
            || g_shape[2] != h
            || g_shape[3] != w
        {
            return Err(Error::shape(
                "trn_forward",
                format!(
                    "gradient maps {:?} do not match expected {}×{}×{}×{}",
                    g_shape, x_shape[0], gc, h, w
                ),
            ));
        }
        Ok(())
    }

    /// Records the restoration forward pass. `g_maps` and `x_adv` are vars
    /// already on the tape. With `bpda_image_backward`, the gradient stream
    /// is treated as a constant on the backward pass.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        g_maps: Var,
        x_adv: Var,
        train: bool,
        bpda_image_backward: bool,
    ) -> Result<Var> {
        self.check_inputs(tape.shape(g_maps), tape.shape(x_adv))?;
        let n = tape.shape(x_adv)[0];
        let (_, h, w) = (self.cfg.image_shape.0, self.cfg.image_shape.1, self.cfg.image_shape.2);

        let mut img_feat = match &self.image_stem {
            Some(stem) => {
                let f = stem.forward(tape, x_adv, train)?;
                tape.relu(f)
            }
            None => {
                // gradient-only: the benign perturbation is estimated from
                // gradient features alone, accumulated from zero.
                let zeros = Tensor::zeros(vec![n, self.cfg.feature_width, h, w]);
                tape.constant(&zeros)
            }
        };
        let mut grad_feat = match &self.grad_stem {
            Some(stem) => {
                let f = stem.forward(tape, g_maps, train)?;
                Some(tape.relu(f))
            }
            None => None,
        };

        let mut accumulated = x_adv;
        for (i, block) in self.blocks.iter().enumerate() {
            let (img_out, grad_next) =
                block.forward(tape, i, img_feat, grad_feat, train, bpda_image_backward)?;
            img_feat = img_out;
            grad_feat = grad_next;
            if let HeadKind::PerBlock(heads) = &self.head {
                let residual = heads[i].forward(tape, img_feat, train)?;
                accumulated = tape.add(accumulated, residual)?;
            }
        }
        let restored_raw = match &self.head {
            HeadKind::Single(head) => {
                let residual = head.forward(tape, img_feat, train)?;
                tape.add(x_adv, residual)?
            }
            HeadKind::PerBlock(_) => accumulated,
        };
        Ok(tape.clamp01(restored_raw))
    }

    /// Inference entry point: restores a batch given its gradient maps.
    pub fn restore(&self, g: &GradientMaps<T>, x_adv: &Tensor<T>) -> Result<Tensor<T>> {
        if g.normalization != self.cfg.norm_mode {
            return Err(Error::Config(format!(
                "gradient maps normalized with {} but network expects {}",
                g.normalization.name(),
                self.cfg.norm_mode.name()
            )));
        }
        let mut tape = Tape::new();
        let gv = tape.constant(&g.maps);
        let xv = tape.constant(x_adv);
        let out = self.forward_on_tape(&mut tape, gv, xv, false, false)?;
        Ok(tape.tensor(out))
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(stem) = &self.image_stem {
            stem.collect("image_stem", &mut out);
        }
        if let Some(stem) = &self.grad_stem {
            stem.collect("grad_stem", &mut out);
        }
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect(&format!("block{i}"), &mut out);
        }
        match &self.head {
            HeadKind::Single(head) => head.collect("head", &mut out),
            HeadKind::PerBlock(heads) => {
                for (i, head) in heads.iter().enumerate() {
                    head.collect(&format!("head{i}"), &mut out);
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(stem) = &mut self.image_stem {
            stem.collect_mut("image_stem", &mut out);
        }
        if let Some(stem) = &mut self.grad_stem {
            stem.collect_mut("grad_stem", &mut out);
        }
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.collect_mut(&format!("block{i}"), &mut out);
        }
        match &mut self.head {
            HeadKind::Single(head) => head.collect_mut("head", &mut out),
            HeadKind::PerBlock(heads) => {
                for (i, head) in heads.iter_mut().enumerate() {
                    head.collect_mut(&format!("head{i}"), &mut out);
                }
            }
        }
        out
    }

    pub fn descriptor(&self) -> String {
        let (c, h, w) = self.cfg.image_shape;
        format!(
            "trn-v1;in={}x{}x{};classes={};blocks={};width={};growth={};ca_r={};stream={};norm={};pbr={}",
            c,
            h,
            w,
            self.cfg.class_count,
            self.cfg.blocks,
            self.cfg.feature_width,
            self.cfg.growth,
            self.cfg.ca_reduction,
            self.cfg.stream.name(),
            self.cfg.norm_mode.name(),
            self.cfg.per_block_image_residual as u8,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_meta(path, &CheckpointMeta::default())
    }

    pub fn save_with_meta(&self, path: &Path, meta: &CheckpointMeta) -> Result<()> {
        let descriptor = format!("{}{}", self.descriptor(), meta.suffix());
        write_checkpoint(path, &descriptor, &self.named_params())
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (descriptor, params) = read_checkpoint::<T>(path)?;
        let origin = path.display().to_string();
        let fields = parse_descriptor(&descriptor, &origin, "trn-v1")?;
        let cfg = TrnConfig {
            blocks: fields.usize_field("blocks", &origin)?,
            feature_width: fields.usize_field("width", &origin)?,
            growth: fields.usize_field("growth", &origin)?,
            ca_reduction: fields.usize_field("ca_r", &origin)?,
            stream: fields.str_field("stream", &origin)?.parse()?,
            norm_mode: fields.str_field("norm", &origin)?.parse()?,
            per_block_image_residual: fields.usize_field("pbr", &origin)? != 0,
            image_shape: fields.shape3("in", &origin)?,
            class_count: fields.usize_field("classes", &origin)?,
        };
        let mut rng = Rng::new(0);
        let mut model = TrnModel::new(&mut rng, cfg)?;
        fill_params(&mut model.named_params_mut(), params, &origin)?;
        Ok((model, fields.meta()))
    }

    pub fn params_checksum(&self) -> u64 {
        crate::models::params_checksum(&self.named_params())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmem::GradientMaps;

    fn cfg_for(stream: StreamMode, blocks: usize) -> TrnConfig {
        TrnConfig {
            blocks,
            feature_width: 8,
            growth: 4,
            ca_reduction: 4,
            stream,
            norm_mode: NormMode::None,
            per_block_image_residual: false,
            image_shape: (1, 6, 6),
            class_count: 3,
        }
    }

    fn random_inputs(seed: u64, n: usize) -> (GradientMaps<f64>, Tensor<f64>) {
        let mut rng = Rng::new(seed);
        let g = Tensor::rand_uniform(&mut rng, vec![n, 3, 6, 6], -1.0, 1.0);
        let x = Tensor::rand_uniform(&mut rng, vec![n, 1, 6, 6], 0.0, 1.0);
        (
            GradientMaps {
                maps: g,
                class_count: 3,
                normalization: NormMode::None,
            },
            x,
        )
    }

    #[test]
    fn zero_head_is_exact_identity_for_all_streams() {
        for stream in [StreamMode::TwoStream, StreamMode::ImageOnly, StreamMode::GradientOnly] {
            let mut rng = Rng::new(31);
            let model = TrnModel::new(&mut rng, cfg_for(stream, 2)).unwrap();
            let (g, x) = random_inputs(7, 3);
            let restored = model.restore(&g, &x).unwrap();
            assert!(
                restored.bitwise_eq(&x),
                "untrained {} network must be identity",
                stream.name()
            );
        }
    }

    #[test]
    fn per_block_residual_head_is_also_identity_at_init() {
        let mut cfg = cfg_for(StreamMode::TwoStream, 3);
        cfg.per_block_image_residual = true;
        let mut rng = Rng::new(32);
        let model = TrnModel::new(&mut rng, cfg).unwrap();
        let (g, x) = random_inputs(8, 2);
        let restored = model.restore(&g, &x).unwrap();
        assert!(restored.bitwise_eq(&x));
    }

    #[test]
    fn zero_block_count_is_a_configuration_error() {
        let mut rng = Rng::new(1);
        assert!(matches!(
            TrnModel::<f64>::new(&mut rng, cfg_for(StreamMode::TwoStream, 0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn output_shape_matches_input_for_one_through_nine_blocks() {
        for k in 1..=9 {
            let mut rng = Rng::new(100 + k as u64);
            let model = TrnModel::new(&mut rng, cfg_for(StreamMode::TwoStream, k)).unwrap();
            let (g, x) = random_inputs(9, 2);
            let restored = model.restore(&g, &x).unwrap();
            assert_eq!(restored.shape(), x.shape(), "K={k}");
            assert!(restored.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zero_kernels_make_block_a_pure_image_identity() {
        let mut rng = Rng::new(55);
        let mut model = TrnModel::new(&mut rng, cfg_for(StreamMode::TwoStream, 1)).unwrap();
        for (name, p) in model.named_params_mut() {
            if name.starts_with("block0") {
                let zeros = vec![0.0f64; p.numel()];
                p.set_values(zeros).unwrap();
            }
        }
        let mut tape = Tape::new();
        let img_feat = Tensor::rand_uniform(&mut rng, vec![2, 8, 6, 6], -1.0, 1.0);
        let grad_feat = Tensor::rand_uniform(&mut rng, vec![2, 8, 6, 6], -1.0, 1.0);
        let iv = tape.constant(&img_feat);
        let gv = tape.constant(&grad_feat);
        let (img_out, _) = model.blocks[0]
            .forward(&mut tape, 0, iv, Some(gv), false, false)
            .unwrap();
        assert_eq!(tape.values(img_out), img_feat.values());
    }

    #[test]
    fn width_mismatch_names_the_block() {
        let mut rng = Rng::new(2);
        let model = TrnModel::new(&mut rng, cfg_for(StreamMode::TwoStream, 1)).unwrap();
        let mut tape = Tape::new();
        let bad = Tensor::<f64>::zeros(vec![1, 5, 6, 6]); // width 5 instead of 8
        let g = Tensor::<f64>::zeros(vec![1, 8, 6, 6]);
        let bv = tape.constant(&bad);
        let gv = tape.constant(&g);
        let err = model.blocks[0]
            .forward(&mut tape, 0, bv, Some(gv), false, false)
            .unwrap_err();
        assert!(err.to_string().contains("block 0"), "{err}");
    }

    #[test]
    fn channel_attention_zero_excitation_halves_features() {
        let mut rng = Rng::new(3);
        let mut ca = ChannelAttention::<f64>::new(&mut rng, 8, 4);
        ca.fc2 = DenseLayer::zeros(ca.fc1.weight.shape()[1], 8);
        let x = Tensor::rand_uniform(&mut rng, vec![2, 8, 4, 4], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let out = ca.forward(&mut tape, xv, false).unwrap();
        for (o, i) in tape.values(out).iter().zip(x.values()) {
            assert!((o - 0.5 * i).abs() < 1e-15);
        }
    }

    #[test]
    fn channel_attention_preserves_zeros_and_gates_in_unit_interval() {
        let mut rng = Rng::new(4);
        let ca = ChannelAttention::<f64>::new(&mut rng, 8, 4);
        let zero = Tensor::<f64>::zeros(vec![1, 8, 4, 4]);
        let mut tape = Tape::new();
        let zv = tape.constant(&zero);
        let out = ca.forward(&mut tape, zv, false).unwrap();
        assert!(tape.values(out).iter().all(|&v| v == 0.0));

        // gates strictly inside (0,1): gated magnitudes strictly below input
        let x = Tensor::filled(vec![1, 8, 4, 4], 1.0f64);
        let xv = tape.constant(&x);
        let gated = ca.forward(&mut tape, xv, false).unwrap();
        assert!(tape
            .values(gated)
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn channel_attention_gradient_check_through_full_path() {
        use crate::gradcheck::{check_tape_fn, PointPlan, GRADCHECK_STEP, GRADCHECK_TOL};
        let mut rng = Rng::new(5);
        let ca = ChannelAttention::<f64>::new(&mut rng, 8, 4);
        let x = Tensor::rand_uniform(&mut rng, vec![1, 8, 4, 4], 0.1, 1.0);
        let target = Tensor::rand_uniform(&mut rng, vec![1, 8, 4, 4], -1.0, 1.0);
        let row = check_tape_fn(
            "channel_attention",
            &[x],
            &|t, v| {
                let out = ca.forward(t, v[0], false)?;
                let tc = t.constant(&target);
                t.l2_loss(out, tc)
            },
            PointPlan::Total(10),
            GRADCHECK_STEP,
            GRADCHECK_TOL,
            6,
        )
        .unwrap();
        assert!(row.pass, "{}", row.summary());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        // census over 10 random batches: with a non-zero head, gradients
        // must reach every parameter of both streams
        let mut rng = Rng::new(60);
        let mut model = TrnModel::new(&mut rng, cfg_for(StreamMode::TwoStream, 2)).unwrap();
        match &mut model.head {
            HeadKind::Single(head) => *head = ConvLayer::he(&mut rng, 8, 1, 3, 1, 1),
            HeadKind::PerBlock(_) => unreachable!(),
        }
        let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
        let mut live: std::collections::HashMap<String, bool> =
            names.iter().map(|n| (n.clone(), false)).collect();

        for trial in 0..10 {
            let (g, x) = random_inputs(70 + trial, 2);
            let target = Tensor::rand_uniform(&mut rng, vec![2, 1, 6, 6], 0.0, 1.0);
            let mut tape = Tape::new();
            let gv = tape.constant(&g.maps);
            let xv = tape.constant(&x);
            let out = model.forward_on_tape(&mut tape, gv, xv, true, false).unwrap();
            let tv = tape.constant(&target);
            let loss = tape.l2_loss(out, tv).unwrap();
            let grads = tape.backward(loss).unwrap();
            for (name, p) in model.named_params() {
                if let Some(g) = grads.wrt(p) {
                    if g.iter().any(|&v| v != 0.0) {
                        live.insert(name, true);
                    }
                }
            }
        }
        let dead: Vec<&String> = live.iter().filter(|(_, &v)| !v).map(|(k, _)| k).collect();
        assert!(dead.is_empty(), "dead parameters: {dead:?}");
    }

    #[test]
    fn gradient_stream_is_live() {
        // perturbing the gradient-map input changes the output once the
        // head is non-zero
        let mut rng = Rng::new(61);
        let mut model = TrnModel::new(&mut rng, cfg_for(StreamMode::TwoStream, 1)).unwrap();
        match &mut model.head {
            HeadKind::Single(head) => *head = ConvLayer::he(&mut rng, 8, 1, 3, 1, 1),
            HeadKind::PerBlock(_) => unreachable!(),
        }
        let (g, x) = random_inputs(62, 2);
        let out1 = model.restore(&g, &x).unwrap();
        let mut maps2 = g.maps.to_vec();
        maps2[0] += 0.5;
        maps2[40] -= 0.5;
        let g2 = GradientMaps {
            maps: Tensor::from_vec(g.maps.shape().to_vec(), maps2).unwrap(),
            class_count: 3,
            normalization: NormMode::None,
        };
        let out2 = model.restore(&g2, &x).unwrap();
        let diff = out1.linf_distance(&out2).unwrap();
        assert!(diff > 0.0, "gradient stream must affect the output");
    }

    #[test]
    fn zeroed_gradient_stream_matches_image_only_ablation_bit_for_bit() {
        // Zero gradient maps alone do not silence the gradient stream (the
        // image-feature injection drives it), so the equivalence holds with
        // the gradient-stream parameters zeroed as well. The image-only
        // model shares the image weights; its fuse conv keeps the channels
        // that read i5.
        let mut rng = Rng::new(63);
        let mut two = TrnModel::new(&mut rng, cfg_for(StreamMode::TwoStream, 1)).unwrap();
        match &mut two.head {
            HeadKind::Single(head) => *head = ConvLayer::he(&mut rng, 8, 1, 3, 1, 1),
            HeadKind::PerBlock(_) => unreachable!(),
        }
        for (name, p) in two.named_params_mut() {
            if name.contains(".g") || name.contains("transition") || name.contains("grad_stem") {
                let zeros = vec![0.0f64; p.numel()];
                p.set_values(zeros).unwrap();
            }
        }

        let mut img_only = TrnModel::new(&mut Rng::new(64), cfg_for(StreamMode::ImageOnly, 1)).unwrap();
        // share image weights
        let src: std::collections::HashMap<String, Tensor<f64>> = two
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        for (name, p) in img_only.named_params_mut() {
            if name == "block0.i6.weight" {
                // first `growth` input channels of the two-stream fuse conv
                let full = &src["block0.i6.weight"];
                let (w8, in2g, k) = (8usize, 8usize, 3usize);
                let keep = 4usize; // image-only fuse conv reads i5 only
                let mut vals = Vec::with_capacity(w8 * keep * k * k);
                for oc in 0..w8 {
                    let base = oc * in2g * k * k;
                    vals.extend_from_slice(&full.values()[base..base + keep * k * k]);
                }
                p.set_values(vals).unwrap();
            } else if let Some(t) = src.get(&name) {
                p.set_values(t.to_vec()).unwrap();
            } else {
                panic!("image-only parameter {name} missing from two-stream model");
            }
        }

        let mut rng2 = Rng::new(65);
        let x = Tensor::rand_uniform(&mut rng2, vec![2, 1, 6, 6], 0.0, 1.0);
        let zero_maps = GradientMaps {
            maps: Tensor::<f64>::zeros(vec![2, 3, 6, 6]),
            class_count: 3,
            normalization: NormMode::None,
        };
        let out_two = two.restore(&zero_maps, &x).unwrap();
        let out_img = img_only.restore(&zero_maps, &x).unwrap();
        assert!(out_two.bitwise_eq(&out_img));
    }

    #[test]
    fn checkpoint_roundtrip_restores_identical_outputs() {
        let dir = tempfile::tempdir().unwrap();
        for stream in [StreamMode::TwoStream, StreamMode::ImageOnly, StreamMode::GradientOnly] {
            let path = dir.path().join(format!("{}.gsck", stream.name()));
            let mut rng = Rng::new(80);
            let mut model = TrnModel::new(&mut rng, cfg_for(stream, 2)).unwrap();
            // non-trivial head so the roundtrip exercises real values
            match &mut model.head {
                HeadKind::Single(head) => *head = ConvLayer::he(&mut rng, 8, 1, 3, 1, 1),
                HeadKind::PerBlock(_) => unreachable!(),
            }
            model.save(&path).unwrap();
            let (loaded, _) = TrnModel::<f64>::load(&path).unwrap();
            assert_eq!(loaded.cfg.stream, stream);
            assert_eq!(loaded.cfg.norm_mode, NormMode::None);
            let (g, x) = random_inputs(81, 2);
            let a = model.restore(&g, &x).unwrap();
            let b = loaded.restore(&g, &x).unwrap();
            assert!(a.bitwise_eq(&b));
        }
    }

    #[test]
    fn restore_rejects_mismatched_normalization() {
        let mut rng = Rng::new(90);
        let cfg = cfg_for(StreamMode::TwoStream, 1);
        let model = TrnModel::new(&mut rng, cfg).unwrap();
        let (mut g, x) = random_inputs(91, 1);
        g.normalization = NormMode::Sign;
        assert!(matches!(model.restore(&g, &x), Err(Error::Config(_))));
    }
}
