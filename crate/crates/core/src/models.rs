//! Task architectures: glimpse encoder, trajectory decoders and the
//! stochastic dense spatial transformer.
//!
//! One [`ForecastModel`] covers all three tasks. The encoder is a small
//! conv stack over the channel-stacked glimpse history; a
//! [`GaussianHead`] on its features parametrizes the conditional prior
//! over the latent code. Decoders:
//!
//! * fully connected, on `[z || features]`, for trajectories;
//! * conv-indexed: transposed-conv stages (with encoder skips) produce a
//!   feature map that is gathered at the joint pixel coordinates and fed
//!   to one linear head per joint;
//! * flow: the same up path emits a dense backward flow field `[2,H,W]`
//!   in pixels, and the last history frame is differentiably warped into
//!   the predicted next frame.
//!
//! The regression baseline shares this architecture but decodes the
//! prior mean instead of a sample: no stochastic units.

use crate::error::{Error, Result};
use crate::nn::{
    ConvLayer, ConvTransposeLayer, GaussianHead, GaussianVars, LinearLayer, Parameterized,
};
use crate::rng::Rng;
use crate::synthdata::{DatasetSpec, Task};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    Fc,
    ConvIndexed,
    Flow,
}

impl DecoderKind {
    pub fn code(&self) -> u8 {
        match self {
            DecoderKind::Fc => 0,
            DecoderKind::ConvIndexed => 1,
            DecoderKind::Flow => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(DecoderKind::Fc),
            1 => Ok(DecoderKind::ConvIndexed),
            2 => Ok(DecoderKind::Flow),
            other => Err(Error::format(format!("unknown decoder code {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecoderKind::Fc => "fc",
            DecoderKind::ConvIndexed => "conv_indexed",
            DecoderKind::Flow => "flow",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fc" => Ok(DecoderKind::Fc),
            "conv_indexed" | "conv-indexed" => Ok(DecoderKind::ConvIndexed),
            "flow" => Ok(DecoderKind::Flow),
            other => Err(Error::usage(format!(
                "unknown decoder '{other}' (expected fc, conv_indexed or flow)"
            ))),
        }
    }
}

/// Everything needed to rebuild a model's shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub task: Task,
    pub decoder: DecoderKind,
    pub latent_dim: usize,
    /// false selects the regression baseline: decode the prior mean,
    /// never sample
    pub stochastic: bool,
    pub with_recognition: bool,
    pub nf: usize,
    pub horizon: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub joints: usize,
    pub enc_base_channels: usize,
    pub feature_dim: usize,
    pub fc_hidden: usize,
    pub y_feature_dim: usize,
}

impl ModelConfig {
    /// Derives a config for a dataset, with task-tuned default widths.
    pub fn for_dataset(
        spec: &DatasetSpec,
        decoder: DecoderKind,
        latent_dim: usize,
        stochastic: bool,
        with_recognition: bool,
    ) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            task: spec.task,
            decoder,
            latent_dim,
            stochastic,
            with_recognition,
            nf: spec.history_frames,
            horizon: spec.horizon,
            frame_h: spec.frame_h,
            frame_w: spec.frame_w,
            joints: spec.joints,
            enc_base_channels: 6,
            feature_dim: match spec.task {
                Task::Video => 32,
                _ => 48,
            },
            fc_hidden: 64,
            y_feature_dim: 24,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (self.task, self.decoder) {
            (Task::Video, DecoderKind::Flow) => {}
            (Task::Video, _) | (_, DecoderKind::Flow) => {
                return Err(Error::usage(
                    "the flow decoder pairs with the video task and only with it",
                ))
            }
            (Task::Joints, DecoderKind::ConvIndexed) => {}
            (_, DecoderKind::ConvIndexed) => {
                return Err(Error::usage(
                    "the conv-indexed decoder applies to the joints task only",
                ))
            }
            (Task::Trajectory | Task::Joints, DecoderKind::Fc) => {}
        }
        if self.latent_dim == 0 {
            return Err(Error::usage("latent_dim must be >= 1"));
        }
        if self.task == Task::Joints && self.joints == 0 {
            return Err(Error::usage("joints task wants joints >= 1"));
        }
        if !self.stochastic && self.with_recognition {
            return Err(Error::usage(
                "the regression baseline has no recognition network",
            ));
        }
        self.stages()?;
        Ok(())
    }

    /// Number of stride-2 conv stages; the shorter frame side must be
    /// exactly 4 * 2^stages and the longer side divisible that far down.
    pub fn stages(&self) -> Result<usize> {
        let m = self.frame_h.min(self.frame_w);
        let mut s = 0usize;
        let mut dim = m;
        while dim > 4 && dim % 2 == 0 {
            dim /= 2;
            s += 1;
        }
        if dim != 4 || s == 0 {
            return Err(Error::usage(format!(
                "frame extents must be 4*2^k with k >= 1, got {}x{}",
                self.frame_h, self.frame_w
            )));
        }
        let div = 1usize << s;
        if self.frame_h % div != 0 || self.frame_w % div != 0 {
            return Err(Error::usage(format!(
                "frame {}x{} not divisible by 2^{s}",
                self.frame_h, self.frame_w
            )));
        }
        Ok(s)
    }

    fn enc_channels(&self) -> Vec<usize> {
        let s = self.stages().expect("validated");
        (0..s).map(|i| (self.enc_base_channels << i).min(64)).collect()
    }

    fn bottleneck(&self) -> (usize, usize) {
        let s = self.stages().expect("validated");
        (self.frame_h >> s, self.frame_w >> s)
    }

    /// Joint count of the decoded output (1 for plain trajectories).
    pub fn out_joints(&self) -> usize {
        match self.task {
            Task::Joints => self.joints,
            _ => 1,
        }
    }

    pub fn y_shape(&self) -> Vec<usize> {
        match self.task {
            Task::Trajectory => vec![self.horizon, 2],
            Task::Joints => vec![self.joints, self.horizon, 2],
            Task::Video => vec![1, self.frame_h, self.frame_w],
        }
    }

    pub fn x_shape(&self) -> Vec<usize> {
        vec![self.nf, self.frame_h, self.frame_w]
    }
}

/// Forward products of the encoder that decoders consume.
pub struct Encoded {
    /// the glimpse stack as a graph input
    pub x: Var,
    /// flat feature vector feeding the Gaussian heads
    pub features: Var,
    /// per-stage post-relu maps, skips[i] at resolution H / 2^(i+1)
    pub skips: Vec<Var>,
}

impl Encoded {
    fn top(&self) -> &Var {
        self.skips.last().expect("at least one stage")
    }
}

/// Conv stack over the glimpse channels, then flatten + linear.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub stages: Vec<ConvLayer>,
    pub proj: LinearLayer,
}

impl ConvEncoder {
    fn new(
        rng: &mut Rng,
        c_in: usize,
        channels: &[usize],
        bottleneck: (usize, usize),
        feature_dim: usize,
    ) -> Self {
        let mut stages = Vec::new();
        let mut ci = c_in;
        for &co in channels {
            stages.push(ConvLayer::new(rng, ci, co, 4, 2, 1));
            ci = co;
        }
        let flat = channels.last().unwrap() * bottleneck.0 * bottleneck.1;
        ConvEncoder {
            stages,
            proj: LinearLayer::new(rng, flat, feature_dim),
        }
    }

    fn forward(&self, g: &Graph, x: Var) -> Result<Encoded> {
        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            cur = stage.forward(g, &cur)?.relu();
            skips.push(cur.clone());
        }
        let flat = cur.reshape(&[cur.len()])?;
        let features = self.proj.forward(g, &flat)?;
        Ok(Encoded { x, features, skips })
    }
}

impl Parameterized for ConvEncoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit_params(&format!("{prefix}.stage{i}"), f);
        }
        self.proj.visit_params(&format!("{prefix}.proj"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params_mut(&format!("{prefix}.stage{i}"), f);
        }
        self.proj.visit_params_mut(&format!("{prefix}.proj"), f);
    }
}

/// Four linear stages on `[z || features]`; the last stage is linear.
#[derive(Clone, Debug)]
pub struct FcDecoder {
    pub layers: Vec<LinearLayer>,
}

impl FcDecoder {
    fn new(rng: &mut Rng, dim_in: usize, hidden: usize, dim_out: usize) -> Self {
        FcDecoder {
            layers: vec![
                LinearLayer::new(rng, dim_in, hidden),
                LinearLayer::new(rng, hidden, hidden),
                LinearLayer::new(rng, hidden, hidden),
                LinearLayer::new(rng, hidden, dim_out),
            ],
        }
    }

    fn forward(&self, g: &Graph, z: &Var, features: &Var) -> Result<Var> {
        let mut cur = Var::concat(&[z.clone(), features.clone()], 0)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = layer.forward(g, &cur)?;
            if i < last {
                cur = cur.relu();
            }
        }
        Ok(cur)
    }
}

impl Parameterized for FcDecoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&format!("{prefix}.layer{i}"), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_params_mut(&format!("{prefix}.layer{i}"), f);
        }
    }
}

/// Shared up path of the convolutional decoders: transposed convs from
/// the bottleneck back to frame resolution, consuming encoder skips.
#[derive(Clone, Debug)]
struct UpPath {
    ups: Vec<ConvTransposeLayer>,
}

impl UpPath {
    /// `final_channels` is the channel count of the full-resolution map.
    fn new(rng: &mut Rng, cfg: &ModelConfig, final_channels: usize) -> Self {
        let enc = cfg.enc_channels();
        let s = enc.len();
        let mut ups = Vec::with_capacity(s);
        let mut ci = cfg.latent_dim + enc[s - 1];
        for i in 0..s {
            let co = if i == s - 1 {
                final_channels
            } else {
                enc[s - 2 - i]
            };
            ups.push(ConvTransposeLayer::new(rng, ci, co, 4, 2, 1));
            // the next stage also sees the skip at its resolution
            ci = co + if i + 1 < s { enc[s - 2 - i] } else { 0 };
        }
        UpPath { ups }
    }

    /// Runs the up path; `relu_last` selects whether the full-resolution
    /// map is rectified (feature map) or left linear (flow field).
    fn forward(&self, g: &Graph, z: &Var, enc: &Encoded, relu_last: bool) -> Result<Var> {
        let top = enc.top();
        let top_shape = top.shape();
        let zmap = z.replicate_spatial(top_shape[1], top_shape[2])?;
        let mut cur = Var::concat(&[zmap, top.clone()], 0)?;
        let last = self.ups.len() - 1;
        for (i, up) in self.ups.iter().enumerate() {
            cur = up.forward(g, &cur)?;
            if i < last {
                cur = cur.relu();
                let skip = &enc.skips[last - 1 - i];
                cur = Var::concat(&[cur, skip.clone()], 0)?;
            } else if relu_last {
                cur = cur.relu();
            }
        }
        Ok(cur)
    }
}

impl Parameterized for UpPath {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, u) in self.ups.iter().enumerate() {
            u.visit_params(&format!("{prefix}.up{i}"), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, u) in self.ups.iter_mut().enumerate() {
            u.visit_params_mut(&format!("{prefix}.up{i}"), f);
        }
    }
}

/// Deconvolution map indexed at joint pixel coordinates, one linear
/// head per joint.
#[derive(Clone, Debug)]
pub struct ConvIndexedDecoder {
    up: UpPath,
    pub heads: Vec<LinearLayer>,
    map_channels: usize,
}

impl ConvIndexedDecoder {
    fn new(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let map_channels = cfg.enc_base_channels;
        let up = UpPath::new(rng, cfg, map_channels);
        let heads = (0..cfg.joints)
            .map(|_| LinearLayer::new(rng, map_channels, 2 * cfg.horizon))
            .collect();
        ConvIndexedDecoder {
            up,
            heads,
            map_channels,
        }
    }

    fn forward(
        &self,
        g: &Graph,
        z: &Var,
        enc: &Encoded,
        coords: &[(u32, u32)],
        cfg: &ModelConfig,
    ) -> Result<Var> {
        if coords.len() != self.heads.len() {
            return Err(Error::input(format!(
                "got {} coordinates for {} joints",
                coords.len(),
                self.heads.len()
            )));
        }
        let map = self.up.forward(g, z, enc, true)?;
        let map_shape = map.shape();
        let scaled = scale_coords(coords, (cfg.frame_h, cfg.frame_w), (map_shape[1], map_shape[2]))?;
        let gathered = map.gather_at(&scaled)?; // [J, c]
        let mut parts = Vec::with_capacity(self.heads.len());
        for (j, head) in self.heads.iter().enumerate() {
            let row = gathered
                .narrow(0, j, 1)?
                .reshape(&[self.map_channels])?;
            parts.push(head.forward(g, &row)?);
        }
        Var::concat(&parts, 0)?.reshape(&[cfg.joints, cfg.horizon, 2])
    }
}

impl Parameterized for ConvIndexedDecoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.up.visit_params(prefix, f);
        for (j, h) in self.heads.iter().enumerate() {
            h.visit_params(&format!("{prefix}.head{j}"), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.up.visit_params_mut(prefix, f);
        for (j, h) in self.heads.iter_mut().enumerate() {
            h.visit_params_mut(&format!("{prefix}.head{j}"), f);
        }
    }
}

/// Maps frame-pixel coordinates onto the feature map:
/// floor(frame coordinate * map extent / frame extent).
fn scale_coords(
    coords: &[(u32, u32)],
    frame: (usize, usize),
    map: (usize, usize),
) -> Result<Vec<(usize, usize)>> {
    coords
        .iter()
        .map(|&(r, c)| {
            let (r, c) = (r as usize, c as usize);
            if r >= frame.0 || c >= frame.1 {
                return Err(Error::input(format!(
                    "joint coordinate ({r},{c}) outside {}x{} frame",
                    frame.0, frame.1
                )));
            }
            Ok((r * map.0 / frame.0, c * map.1 / frame.1))
        })
        .collect()
}

/// Dense backward flow head, in pixels of displacement.
#[derive(Clone, Debug)]
pub struct FlowDecoder {
    up: UpPath,
}

impl FlowDecoder {
    fn new(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        FlowDecoder {
            up: UpPath::new(rng, cfg, 2),
        }
    }

    fn forward(&self, g: &Graph, z: &Var, enc: &Encoded) -> Result<Var> {
        self.up.forward(g, z, enc, false)
    }
}

impl Parameterized for FlowDecoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.up.visit_params(prefix, f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.up.visit_params_mut(prefix, f);
    }
}

#[derive(Clone, Debug)]
pub enum Decoder {
    Fc(FcDecoder),
    ConvIndexed(ConvIndexedDecoder),
    Flow(FlowDecoder),
}

impl Parameterized for Decoder {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Decoder::Fc(d) => d.visit_params(&format!("{prefix}.fc"), f),
            Decoder::ConvIndexed(d) => d.visit_params(&format!("{prefix}.ci"), f),
            Decoder::Flow(d) => d.visit_params(&format!("{prefix}.flow"), f),
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Decoder::Fc(d) => d.visit_params_mut(&format!("{prefix}.fc"), f),
            Decoder::ConvIndexed(d) => d.visit_params_mut(&format!("{prefix}.ci"), f),
            Decoder::Flow(d) => d.visit_params_mut(&format!("{prefix}.flow"), f),
        }
    }
}

/// Encodes y with a small network of its own and produces Q(z | x, y)
/// from `[E(x) || E_y(y)]`.
#[derive(Clone, Debug)]
pub struct RecognitionNet {
    pub y_enc: YEncoder,
    pub head: GaussianHead,
}

#[derive(Clone, Debug)]
pub enum YEncoder {
    /// flattened outcome through one rectified linear map
    Flat(LinearLayer),
    /// frame outcome through a conv stack
    Conv(ConvEncoder),
}

impl RecognitionNet {
    fn new(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let y_len: usize = cfg.y_shape().iter().product();
        let y_enc = match cfg.task {
            Task::Video => YEncoder::Conv(ConvEncoder::new(
                rng,
                1,
                &cfg.enc_channels(),
                cfg.bottleneck(),
                cfg.y_feature_dim,
            )),
            _ => YEncoder::Flat(LinearLayer::new(rng, y_len, cfg.y_feature_dim)),
        };
        let head = GaussianHead::new(rng, cfg.feature_dim + cfg.y_feature_dim, cfg.latent_dim);
        RecognitionNet { y_enc, head }
    }

    fn forward(&self, g: &Graph, enc: &Encoded, y: &Tensor) -> Result<GaussianVars> {
        let y_feat = match &self.y_enc {
            YEncoder::Flat(l) => {
                let flat = g.input(y.reshaped(&[y.len()])?);
                l.forward(g, &flat)?.relu()
            }
            YEncoder::Conv(c) => {
                let e = c.forward(g, g.input(y.clone()))?;
                e.features.relu()
            }
        };
        let joint = Var::concat(&[enc.features.clone(), y_feat], 0)?;
        self.head.forward(g, &joint)
    }
}

impl Parameterized for RecognitionNet {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match &self.y_enc {
            YEncoder::Flat(l) => l.visit_params(&format!("{prefix}.y_flat"), f),
            YEncoder::Conv(c) => c.visit_params(&format!("{prefix}.y_conv"), f),
        }
        self.head.visit_params(&format!("{prefix}.head"), f);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match &mut self.y_enc {
            YEncoder::Flat(l) => l.visit_params_mut(&format!("{prefix}.y_flat"), f),
            YEncoder::Conv(c) => c.visit_params_mut(&format!("{prefix}.y_conv"), f),
        }
        self.head.visit_params_mut(&format!("{prefix}.head"), f);
    }
}

/// One decoded outcome; `flow` rides along for the video task.
pub struct Prediction {
    pub output: Var,
    pub flow: Option<Var>,
}

/// Encoder + prior head + decoder (+ recognition network for VA).
#[derive(Clone, Debug)]
pub struct ForecastModel {
    pub cfg: ModelConfig,
    pub encoder: ConvEncoder,
    pub prior: GaussianHead,
    pub decoder: Decoder,
    pub recognition: Option<RecognitionNet>,
}

impl ForecastModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::substream(seed, 0x1217);
        let encoder = ConvEncoder::new(
            &mut rng,
            cfg.nf,
            &cfg.enc_channels(),
            cfg.bottleneck(),
            cfg.feature_dim,
        );
        let prior = GaussianHead::new(&mut rng, cfg.feature_dim, cfg.latent_dim);
        let decoder = match cfg.decoder {
            DecoderKind::Fc => {
                let out = cfg.out_joints() * cfg.horizon * 2;
                Decoder::Fc(FcDecoder::new(
                    &mut rng,
                    cfg.latent_dim + cfg.feature_dim,
                    cfg.fc_hidden,
                    out,
                ))
            }
            DecoderKind::ConvIndexed => {
                Decoder::ConvIndexed(ConvIndexedDecoder::new(&mut rng, &cfg))
            }
            DecoderKind::Flow => Decoder::Flow(FlowDecoder::new(&mut rng, &cfg)),
        };
        let recognition = if cfg.with_recognition {
            Some(RecognitionNet::new(&mut rng, &cfg))
        } else {
            None
        };
        Ok(ForecastModel {
            cfg,
            encoder,
            prior,
            decoder,
            recognition,
        })
    }

    /// Runs the encoder over a glimpse stack.
    pub fn encode(&self, g: &Graph, x: &Tensor) -> Result<Encoded> {
        if x.shape() != self.cfg.x_shape() {
            return Err(Error::shape(format!(
                "glimpse stack wants {:?}, got {:?}",
                self.cfg.x_shape(),
                x.shape()
            )));
        }
        self.encoder.forward(g, g.input(x.clone()))
    }

    /// P(z | x), the conditional prior over latent codes.
    pub fn prior_from(&self, g: &Graph, enc: &Encoded) -> Result<GaussianVars> {
        self.prior.forward(g, &enc.features)
    }

    /// Q(z | x, y); only present on VA-trained models.
    pub fn recognition_from(&self, g: &Graph, enc: &Encoded, y: &Tensor) -> Result<GaussianVars> {
        let rec = self.recognition.as_ref().ok_or_else(|| {
            Error::usage("this model has no recognition network")
        })?;
        rec.forward(g, enc, y)
    }

    /// Decodes one latent code into a task outcome. The joints task
    /// requires the joint pixel coordinates of the last history frame.
    pub fn decode(
        &self,
        g: &Graph,
        enc: &Encoded,
        z: &Var,
        coords: Option<&[(u32, u32)]>,
    ) -> Result<Prediction> {
        match &self.decoder {
            Decoder::Fc(d) => {
                let flat = d.forward(g, z, &enc.features)?;
                let output = match self.cfg.task {
                    Task::Trajectory => flat.reshape(&[self.cfg.horizon, 2])?,
                    _ => flat.reshape(&[self.cfg.joints, self.cfg.horizon, 2])?,
                };
                Ok(Prediction { output, flow: None })
            }
            Decoder::ConvIndexed(d) => {
                let coords = coords.ok_or_else(|| {
                    Error::usage("the conv-indexed decoder needs joint coordinates")
                })?;
                let output = d.forward(g, z, enc, coords, &self.cfg)?;
                Ok(Prediction { output, flow: None })
            }
            Decoder::Flow(d) => {
                let flow = d.forward(g, z, enc)?;
                let last = enc.x.narrow(0, self.cfg.nf - 1, 1)?;
                let output = last.bilinear_warp(&flow)?;
                Ok(Prediction {
                    output,
                    flow: Some(flow),
                })
            }
        }
    }

    /// Video convenience: decodes z and returns (flow, warped frame).
    pub fn predict_frame(&self, g: &Graph, x: &Tensor, z: &Var) -> Result<(Var, Var)> {
        if self.cfg.task != Task::Video {
            return Err(Error::usage("predict_frame applies to the video task"));
        }
        let enc = self.encode(g, x)?;
        let pred = self.decode(g, &enc, z, None)?;
        let flow = pred.flow.expect("flow decoder returns the field");
        Ok((flow, pred.output))
    }

    /// Ordered (name, tensor) list of every learnable parameter.
    pub fn param_list(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params("model", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    /// Total learnable scalars.
    pub fn param_count(&self) -> usize {
        self.param_list().iter().map(|(_, t)| t.len()).sum()
    }
}

impl Parameterized for ForecastModel {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit_params(&format!("{prefix}.encoder"), f);
        self.prior.visit_params(&format!("{prefix}.prior"), f);
        self.decoder.visit_params(&format!("{prefix}.decoder"), f);
        if let Some(r) = &self.recognition {
            r.visit_params(&format!("{prefix}.recognition"), f);
        }
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_params_mut(&format!("{prefix}.encoder"), f);
        self.prior.visit_params_mut(&format!("{prefix}.prior"), f);
        self.decoder.visit_params_mut(&format!("{prefix}.decoder"), f);
        if let Some(r) = &mut self.recognition {
            r.visit_params_mut(&format!("{prefix}.recognition"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn;

    fn traj_cfg() -> ModelConfig {
        ModelConfig {
            task: Task::Trajectory,
            decoder: DecoderKind::Fc,
            latent_dim: 4,
            stochastic: true,
            with_recognition: true,
            nf: 2,
            horizon: 8,
            frame_h: 16,
            frame_w: 16,
            joints: 0,
            enc_base_channels: 4,
            feature_dim: 12,
            fc_hidden: 16,
            y_feature_dim: 8,
        }
    }

    fn joints_cfg() -> ModelConfig {
        ModelConfig {
            task: Task::Joints,
            decoder: DecoderKind::ConvIndexed,
            latent_dim: 4,
            stochastic: true,
            with_recognition: false,
            nf: 1,
            horizon: 15,
            frame_h: 32,
            frame_w: 32,
            joints: 4,
            enc_base_channels: 4,
            feature_dim: 12,
            fc_hidden: 16,
            y_feature_dim: 8,
        }
    }

    fn video_cfg() -> ModelConfig {
        ModelConfig {
            task: Task::Video,
            decoder: DecoderKind::Flow,
            latent_dim: 4,
            stochastic: true,
            with_recognition: true,
            nf: 2,
            horizon: 1,
            frame_h: 16,
            frame_w: 16,
            joints: 0,
            enc_base_channels: 4,
            feature_dim: 12,
            fc_hidden: 16,
            y_feature_dim: 8,
        }
    }

    fn zeroed(mut model: ForecastModel) -> ForecastModel {
        model.visit_params_mut("model", &mut |_, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
        model
    }

    #[test]
    fn decoder_task_pairing_is_validated() {
        let mut cfg = traj_cfg();
        cfg.decoder = DecoderKind::Flow;
        assert!(matches!(cfg.validate(), Err(Error::Usage(_))));
        let mut cfg = traj_cfg();
        cfg.decoder = DecoderKind::ConvIndexed;
        assert!(cfg.validate().is_err());
        assert!(video_cfg().validate().is_ok());
        assert!(joints_cfg().validate().is_ok());
    }

    #[test]
    fn zero_weights_give_zero_features_and_velocities() {
        let model = zeroed(ForecastModel::new(traj_cfg(), 1).unwrap());
        let g = Graph::new();
        let x = Tensor::zeros(&[2, 16, 16]);
        let enc = model.encode(&g, &x).unwrap();
        assert!(enc.features.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(enc.features.len(), 12);

        let prior = model.prior_from(&g, &enc).unwrap();
        let z = prior.mu.clone();
        let pred = model.decode(&g, &enc, &z, None).unwrap();
        assert_eq!(pred.output.shape(), vec![8, 2]);
        assert!(pred.output.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_a_pure_function() {
        let model = ForecastModel::new(traj_cfg(), 3).unwrap();
        let mut rng = Rng::new(5);
        let xa = Tensor::from_vec(&[2, 16, 16], rng.normal_vec(512)).unwrap();
        let xb = Tensor::from_vec(&[2, 16, 16], rng.normal_vec(512)).unwrap();
        let run = |x: &Tensor| {
            let g = Graph::new();
            model.encode(&g, x).unwrap().features.value()
        };
        assert_eq!(run(&xa), run(&xa));
        assert_ne!(run(&xa), run(&xb));
    }

    #[test]
    fn joints_decoder_shape_is_j_by_h_by_2() {
        let model = ForecastModel::new(joints_cfg(), 7).unwrap();
        let g = Graph::new();
        let x = Tensor::zeros(&[1, 32, 32]);
        let enc = model.encode(&g, &x).unwrap();
        let prior = model.prior_from(&g, &enc).unwrap();
        let coords = [(16u32, 16u32), (10, 16), (16, 10), (16, 22)];
        let pred = model
            .decode(&g, &enc, &prior.mu, Some(&coords))
            .unwrap();
        assert_eq!(pred.output.shape(), vec![4, 15, 2]);
        assert_eq!(pred.output.len(), 120);
    }

    #[test]
    fn conv_indexed_without_coords_is_usage_error() {
        let model = ForecastModel::new(joints_cfg(), 7).unwrap();
        let g = Graph::new();
        let enc = model.encode(&g, &Tensor::zeros(&[1, 32, 32])).unwrap();
        let prior = model.prior_from(&g, &enc).unwrap();
        assert!(matches!(
            model.decode(&g, &enc, &prior.mu, None),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn different_latents_give_different_outputs() {
        let model = ForecastModel::new(traj_cfg(), 11).unwrap();
        let g = Graph::new();
        let mut rng = Rng::new(2);
        let x = Tensor::from_vec(&[2, 16, 16], rng.normal_vec(512)).unwrap();
        let enc = model.encode(&g, &x).unwrap();
        let prior = model.prior_from(&g, &enc).unwrap();
        let eps_a = Tensor::from_vec(&[4], rng.normal_vec(4)).unwrap();
        let eps_b = Tensor::from_vec(&[4], rng.normal_vec(4)).unwrap();
        let za = nn::sample(&g, &prior, &eps_a).unwrap().z;
        let zb = nn::sample(&g, &prior, &eps_b).unwrap().z;
        let pa = model.decode(&g, &enc, &za, None).unwrap();
        let pb = model.decode(&g, &enc, &zb, None).unwrap();
        assert_ne!(pa.output.value(), pb.output.value());
    }

    #[test]
    fn zero_flow_decoder_returns_last_frame() {
        let model = zeroed(ForecastModel::new(video_cfg(), 5).unwrap());
        let g = Graph::new();
        let mut rng = Rng::new(9);
        let x = Tensor::from_vec(&[2, 16, 16], (0..512).map(|_| rng.next_f64()).collect()).unwrap();
        let z = g.input(Tensor::zeros(&[4]));
        let (flow, frame) = model.predict_frame(&g, &x, &z).unwrap();
        assert!(flow.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(frame.value().data(), &x.data()[256..]);
    }

    #[test]
    fn recognition_zero_weights_give_standard_softplus_sigma() {
        let model = zeroed(ForecastModel::new(traj_cfg(), 13).unwrap());
        let g = Graph::new();
        let enc = model.encode(&g, &Tensor::zeros(&[2, 16, 16])).unwrap();
        let y = Tensor::zeros(&[8, 2]);
        let q = model.recognition_from(&g, &enc, &y).unwrap();
        assert_eq!(q.dim(), 4);
        assert!(q.mu.value().data().iter().all(|&v| v == 0.0));
        for &s in q.sigma.value().data() {
            assert!((s - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn recognition_distinguishes_outcomes() {
        let model = ForecastModel::new(traj_cfg(), 17).unwrap();
        let g = Graph::new();
        let mut rng = Rng::new(4);
        let x = Tensor::from_vec(&[2, 16, 16], rng.normal_vec(512)).unwrap();
        let enc = model.encode(&g, &x).unwrap();
        let ya = Tensor::from_vec(&[8, 2], rng.normal_vec(16)).unwrap();
        let yb = Tensor::from_vec(&[8, 2], rng.normal_vec(16)).unwrap();
        let qa = model.recognition_from(&g, &enc, &ya).unwrap();
        let qb = model.recognition_from(&g, &enc, &yb).unwrap();
        assert_ne!(qa.mu.value(), qb.mu.value());
    }

    #[test]
    fn sigma_zero_forward_is_bit_deterministic() {
        let model = ForecastModel::new(traj_cfg(), 23).unwrap();
        let mut rng = Rng::new(6);
        let x = Tensor::from_vec(&[2, 16, 16], rng.normal_vec(512)).unwrap();
        let run = || {
            let g = Graph::new();
            let enc = model.encode(&g, &x).unwrap();
            let prior = model.prior_from(&g, &enc).unwrap();
            // sigma forced to zero: decode the mean
            let pred = model.decode(&g, &enc, &prior.mu, None).unwrap();
            pred.output
                .value()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_head_on_1x1_map_equals_fc_head() {
        // on a degenerate 1x1 feature map the conv-indexed head is an FC
        // head over the channel vector
        let mut rng = Rng::new(31);
        let c = 6;
        let head = LinearLayer::new(&mut rng, c, 10);
        let feat_vec: Vec<f64> = rng.normal_vec(c);

        let g = Graph::new();
        let map = g.input(Tensor::from_vec(&[c, 1, 1], feat_vec.clone()).unwrap());
        let gathered = map.gather_at(&[(0, 0)]).unwrap().reshape(&[c]).unwrap();
        let via_gather = head.forward(&g, &gathered).unwrap();

        let flat = g.input(Tensor::from_vec(&[c], feat_vec).unwrap());
        let via_fc = head.forward(&g, &flat).unwrap();
        assert_eq!(via_gather.value(), via_fc.value());
    }

    #[test]
    fn coordinate_scaling_floors() {
        let scaled = scale_coords(&[(31, 0), (16, 17)], (32, 32), (8, 8)).unwrap();
        assert_eq!(scaled, vec![(7, 0), (4, 4)]);
        assert!(scale_coords(&[(32, 0)], (32, 32), (8, 8)).is_err());
    }

    #[test]
    fn param_names_are_unique_and_nonempty() {
        for cfg in [traj_cfg(), joints_cfg(), video_cfg()] {
            let model = ForecastModel::new(cfg, 41).unwrap();
            let params = model.param_list();
            assert!(!params.is_empty());
            let mut names: Vec<&String> = params.iter().map(|(n, _)| n).collect();
            let before = names.len();
            names.sort();
            names.dedup();
            assert_eq!(before, names.len(), "duplicate parameter names");
        }
    }
}
