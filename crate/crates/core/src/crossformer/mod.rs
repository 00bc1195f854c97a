//! Crossformer trunk: segment embedding, two-stage attention encoder with
//! pairwise segment merging, and a query decoder feeding the output head.

pub(crate) mod checkpoint;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CKPT_MAGIC, CKPT_VERSION};

use crate::autodiff::{concat, Result as TResult, Tape, Tensor, TensorError, Var};
use crate::kan::{ClampStats, Head, HeadKind, GRID_SIZES, NEURON_CHOICES};
use crate::nn::{Attention, Bound, FeedForward, LayerNorm, Linear, ParamBuilder, ParamId, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("bad magic: expected \"SCKP\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("truncated checkpoint at byte {at}")]
    Truncated { at: usize },
    #[error("checkpoint does not match the model layout: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_inputs: usize,
    pub n_outputs: usize,
    pub t_len: usize,
    pub seg_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_levels: usize,
    pub n_routers: usize,
    pub d_ff: usize,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_inputs: 3,
            n_outputs: 2,
            t_len: 500,
            seg_len: 20,
            d_model: 256,
            n_heads: 4,
            n_levels: 3,
            n_routers: 4,
            d_ff: 512,
            head: HeadKind::Kan { neurons: 5, grid: 5 },
        }
    }
}

impl ModelConfig {
    /// Same trunk with `d_model` changed and `d_ff = 2 * d_model`.
    pub fn with_d_model(mut self, d_model: usize) -> Self {
        self.d_model = d_model;
        self.d_ff = 2 * d_model;
        self
    }

    pub fn n_segments(&self) -> usize {
        self.t_len / self.seg_len
    }

    /// Segment count at each encoder level.
    pub fn level_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.n_segments()];
        for _ in 1..self.n_levels {
            let last = *sizes.last().expect("non-empty");
            sizes.push(last.div_ceil(2));
        }
        sizes
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.seg_len == 0 || !self.t_len.is_multiple_of(self.seg_len) {
            return bad(format!("seg_len {} does not divide T = {}", self.seg_len, self.t_len));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("n_heads {} does not divide d_model {}", self.n_heads, self.d_model));
        }
        if self.n_inputs == 0 || self.n_outputs == 0 || self.n_levels == 0 || self.n_routers == 0 || self.d_ff == 0 {
            return bad("dimension counts, levels, routers and d_ff must be positive".into());
        }
        if let HeadKind::Kan { neurons, grid } = self.head {
            if !NEURON_CHOICES.contains(&neurons) {
                return bad(format!("kan neurons {neurons} not in {NEURON_CHOICES:?}"));
            }
            if !GRID_SIZES.contains(&grid) {
                return bad(format!("kan grid {grid} not in {GRID_SIZES:?}"));
            }
        }
        Ok(())
    }
}

/// Closed-form number of trainable scalars.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let dm = cfg.d_model;
    let ln = LayerNorm::n_params(dm);
    let att = Attention::n_params(dm);
    let ff = FeedForward::n_params(dm, cfg.d_ff);
    let embed = Linear::n_params(cfg.seg_len, dm, false) + cfg.n_inputs * cfg.n_segments() * dm;
    let encoder: usize = cfg
        .level_sizes()
        .iter()
        .enumerate()
        .map(|(l, &s)| {
            let merge = if l > 0 {
                LayerNorm::n_params(2 * dm) + Linear::n_params(2 * dm, dm, true)
            } else {
                0
            };
            merge + 3 * att + 2 * ff + 4 * ln + s * cfg.n_routers * dm
        })
        .sum();
    let decoder = cfg.n_outputs * cfg.n_segments() * dm + cfg.n_levels * (2 * att + ff + 3 * ln) + ln;
    embed + encoder + decoder + Head::n_params(cfg.head, dm, cfg.seg_len)
}

/// Segment embedding: a bias-free `seg_len -> d_model` map plus a positional
/// table indexed by (dimension, segment).
#[derive(Debug, Clone)]
pub struct DswEmbedding {
    pub seg_len: usize,
    pub n_seg: usize,
    pub proj: Linear,
    pub pos: ParamId,
}

impl DswEmbedding {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        Self {
            seg_len: cfg.seg_len,
            n_seg: cfg.n_segments(),
            proj: Linear::new(pb, "embed.proj", cfg.seg_len, cfg.d_model, false),
            pos: pb.normal("embed.pos", &[cfg.n_inputs, cfg.n_segments(), cfg.d_model], 0.02),
        }
    }

    /// `[B, D, T]` to `[B, D, n_seg, d_model]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> TResult<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.seg_len * self.n_seg {
            return Err(TensorError::Invalid {
                op: "dsw_embed",
                msg: format!("input {:?} does not split into {} segments of {}", s, self.n_seg, self.seg_len),
            });
        }
        let segs = x.reshape(&[s[0], s[1], self.n_seg, self.seg_len])?;
        self.proj.forward(p, &segs)?.add(&p[self.pos])
    }
}

/// Cross-time attention per dimension, then cross-dimension routing through
/// a few router tokens per segment position. Pre-norm residual blocks.
#[derive(Debug, Clone)]
pub struct TwoStageAttention {
    pub n_seg: usize,
    time_norm: LayerNorm,
    time_attn: Attention,
    time_ff_norm: LayerNorm,
    time_ff: FeedForward,
    pub routers: ParamId,
    dim_norm: LayerNorm,
    pub sender: Attention,
    pub receiver: Attention,
    dim_ff_norm: LayerNorm,
    dim_ff: FeedForward,
}

impl TwoStageAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig, n_seg: usize) -> TResult<Self> {
        let (dm, h) = (cfg.d_model, cfg.n_heads);
        let n = |part: &str| format!("{name}.{part}");
        Ok(Self {
            n_seg,
            time_norm: LayerNorm::new(pb, &n("time_norm"), dm),
            time_attn: Attention::new(pb, &n("time_attn"), dm, h)?,
            time_ff_norm: LayerNorm::new(pb, &n("time_ff_norm"), dm),
            time_ff: FeedForward::new(pb, &n("time_ff"), dm, cfg.d_ff),
            routers: pb.normal(&n("routers"), &[n_seg, cfg.n_routers, dm], 0.02),
            dim_norm: LayerNorm::new(pb, &n("dim_norm"), dm),
            sender: Attention::new(pb, &n("sender"), dm, h)?,
            receiver: Attention::new(pb, &n("receiver"), dm, h)?,
            dim_ff_norm: LayerNorm::new(pb, &n("dim_ff_norm"), dm),
            dim_ff: FeedForward::new(pb, &n("dim_ff"), dm, cfg.d_ff),
        })
    }

    /// Attention over segments, independently for every (batch, dimension).
    pub fn stage1<'t>(&self, p: &Bound<'t>, h: &Var<'t>) -> TResult<Var<'t>> {
        let n = self.time_norm.forward(p, h)?;
        let h = h.add(&self.time_attn.forward(p, &n, &n)?)?;
        h.add(&self.time_ff.forward(p, &self.time_ff_norm.forward(p, &h)?)?)
    }

    /// Routers gather from all dimensions at each segment, then every dimension
    /// reads back from its segment's routers.
    pub fn stage2<'t>(&self, p: &Bound<'t>, h: &Var<'t>) -> TResult<Var<'t>> {
        let batch = h.shape()[0];
        let hd = h.permute(&[0, 2, 1, 3])?;
        let n = self.dim_norm.forward(p, &hd)?;
        let routers = p[self.routers].repeat_leading(batch);
        let buffer = self.sender.forward(p, &routers, &n)?;
        let hd = hd.add(&self.receiver.forward(p, &n, &buffer)?)?;
        let hd = hd.add(&self.dim_ff.forward(p, &self.dim_ff_norm.forward(p, &hd)?)?)?;
        hd.permute(&[0, 2, 1, 3])
    }

    /// `[B, D, n_seg, d_model]` to the same shape.
    pub fn forward<'t>(&self, p: &Bound<'t>, h: &Var<'t>) -> TResult<Var<'t>> {
        self.stage2(p, &self.stage1(p, h)?)
    }
}

/// Merges adjacent segment pairs; an odd trailing segment passes through.
#[derive(Debug, Clone)]
pub struct SegmentMerge {
    norm: LayerNorm,
    proj: Linear,
}

impl SegmentMerge {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_model: usize) -> Self {
        Self {
            norm: LayerNorm::new(pb, &format!("{name}.norm"), 2 * d_model),
            proj: Linear::new(pb, &format!("{name}.proj"), 2 * d_model, d_model, true),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, h: &Var<'t>) -> TResult<Var<'t>> {
        let s = h.shape();
        let (b, d, n, dm) = (s[0], s[1], s[2], s[3]);
        if n < 2 {
            return Ok(*h);
        }
        let pairs = n / 2;
        let even = h.narrow(2, 0, 2 * pairs)?.reshape(&[b, d, pairs, 2 * dm])?;
        let merged = self.proj.forward(p, &self.norm.forward(p, &even)?)?;
        if n % 2 == 0 {
            Ok(merged)
        } else {
            concat(&[merged, h.narrow(2, n - 1, 1)?], 2)
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLevel {
    pub merge: Option<SegmentMerge>,
    pub tsa: TwoStageAttention,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    self_norm: LayerNorm,
    self_attn: Attention,
    cross_norm: LayerNorm,
    pub cross_attn: Attention,
    ff_norm: LayerNorm,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> TResult<Self> {
        let (dm, h) = (cfg.d_model, cfg.n_heads);
        let n = |part: &str| format!("{name}.{part}");
        Ok(Self {
            self_norm: LayerNorm::new(pb, &n("self_norm"), dm),
            self_attn: Attention::new(pb, &n("self_attn"), dm, h)?,
            cross_norm: LayerNorm::new(pb, &n("cross_norm"), dm),
            cross_attn: Attention::new(pb, &n("cross_attn"), dm, h)?,
            ff_norm: LayerNorm::new(pb, &n("ff_norm"), dm),
            ff: FeedForward::new(pb, &n("ff"), dm, cfg.d_ff),
        })
    }

    /// `x: [B, Q, d]` attends to itself and to `memory: [B, M, d]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, memory: &Var<'t>) -> TResult<Var<'t>> {
        let n = self.self_norm.forward(p, x)?;
        let x = x.add(&self.self_attn.forward(p, &n, &n)?)?;
        let n = self.cross_norm.forward(p, &x)?;
        let x = x.add(&self.cross_attn.forward(p, &n, memory)?)?;
        x.add(&self.ff.forward(p, &self.ff_norm.forward(p, &x)?)?)
    }
}

/// Learnable queries `[n_outputs, n_seg, d_model]`, one decoder layer per
/// encoder level; layer outputs are summed and normalized.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub queries: ParamId,
    pub layers: Vec<DecoderLayer>,
    norm: LayerNorm,
}

impl Decoder {
    /// `levels[l]: [B, D, S_l, d]` to `[B, n_outputs * n_seg, d]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, levels: &[Var<'t>]) -> TResult<Var<'t>> {
        if levels.len() != self.layers.len() {
            return Err(TensorError::Invalid {
                op: "decode",
                msg: format!("{} encoder levels for {} decoder layers", levels.len(), self.layers.len()),
            });
        }
        let batch = levels[0].shape()[0];
        let q = p[self.queries].shape();
        let mut x = p[self.queries].repeat_leading(batch).reshape(&[batch, q[0] * q[1], q[2]])?;
        let mut total: Option<Var<'t>> = None;
        for (layer, level) in self.layers.iter().zip(levels) {
            let s = level.shape();
            let memory = level.reshape(&[s[0], s[1] * s[2], s[3]])?;
            x = layer.forward(p, &x, &memory)?;
            total = Some(match total {
                Some(t) => t.add(&x)?,
                None => x,
            });
        }
        self.norm.forward(p, &total.expect("at least one level"))
    }
}

/// The full surrogate: `[B, 3, T]` normalized inputs to `[B, 2, T]` outputs.
#[derive(Debug, Clone)]
pub struct CrossformerKan {
    pub cfg: ModelConfig,
    pub seed: u64,
    pub params: ParamStore,
    pub embed: DswEmbedding,
    pub encoder: Vec<EncoderLevel>,
    pub decoder: Decoder,
    pub head: Head,
}

impl CrossformerKan {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let embed = DswEmbedding::new(&mut pb, &cfg);
        let mut encoder = Vec::with_capacity(cfg.n_levels);
        for (l, &n_seg) in cfg.level_sizes().iter().enumerate() {
            let merge = (l > 0).then(|| SegmentMerge::new(&mut pb, &format!("enc{l}.merge"), cfg.d_model));
            let tsa = TwoStageAttention::new(&mut pb, &format!("enc{l}.tsa"), &cfg, n_seg)?;
            encoder.push(EncoderLevel { merge, tsa });
        }
        let queries = pb.normal("dec.queries", &[cfg.n_outputs, cfg.n_segments(), cfg.d_model], 0.02);
        let layers = (0..cfg.n_levels)
            .map(|l| DecoderLayer::new(&mut pb, &format!("dec{l}"), &cfg))
            .collect::<TResult<Vec<_>>>()?;
        let norm = LayerNorm::new(&mut pb, "dec.norm", cfg.d_model);
        let head = Head::new(&mut pb, cfg.head, cfg.d_model, cfg.seg_len);
        Ok(Self {
            cfg,
            seed,
            params: pb.finish(),
            embed,
            encoder,
            decoder: Decoder { queries, layers, norm },
            head,
        })
    }

    /// Per-level encoder outputs for an embedded input.
    pub fn encode<'t>(&self, p: &Bound<'t>, h: &Var<'t>) -> TResult<Vec<Var<'t>>> {
        let mut levels = Vec::with_capacity(self.encoder.len());
        let mut cur = *h;
        for level in &self.encoder {
            if let Some(m) = &level.merge {
                cur = m.forward(p, &cur)?;
            }
            cur = level.tsa.forward(p, &cur)?;
            levels.push(cur);
        }
        Ok(levels)
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, stats: &mut ClampStats) -> TResult<Var<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.cfg.n_inputs || s[2] != self.cfg.t_len {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                lhs: s,
                rhs: vec![self.cfg.n_inputs, self.cfg.t_len],
            });
        }
        let levels = self.encode(p, &self.embed.forward(p, x)?)?;
        let tokens = self.decoder.forward(p, &levels)?;
        let y = self.head.forward(p, &tokens, stats)?;
        y.reshape(&[s[0], self.cfg.n_outputs, self.cfg.t_len])
    }

    /// Inference without gradients.
    pub fn predict(&self, x: &Tensor) -> TResult<(Tensor, ClampStats)> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let mut stats = ClampStats::default();
        let y = self.forward(&p, &tape.constant(x), &mut stats)?;
        Ok((y.value(), stats))
    }
}
