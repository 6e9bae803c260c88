//! Full network assembly: five pooled encoder stages, a bottleneck, five
//! decoder stages and a sigmoid head.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::autodiff::{Mode, Tape, Var};
use crate::gradcheck::Probe;
use crate::blocks::{Block, BlockKind, BlockOptions, DecoderBlockParams, StageOrder};
use crate::error::{Error, Result};
use crate::nn::{conv_param_count, BnConfig, ConvParams, Context, Initializer, ParamStore, TraceEntry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEVELS: usize = 5;

/// Declarative description of the network. Index `i` of every per-level
/// array refers to level `i + 1` (encoder E<i+1>, decoder D<i+1>).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub input_height: usize,
    pub input_width: usize,
    pub in_channels: usize,
    pub encoder_filters: [usize; LEVELS],
    pub encoder_kinds: [BlockKind; LEVELS],
    pub decoder_kinds: [BlockKind; LEVELS],
    /// Decoder level i uses `encoder_filters[i] / decoder_divisor` filters.
    pub decoder_divisor: usize,
    pub bottleneck_filters: usize,
    /// Decoder level i fuses the encoder output O_E^i.
    pub skip_encoder: [bool; LEVELS],
    /// Decoder level i fuses the pooled output of level i−1, O_ME^(i−1).
    pub skip_pooled: [bool; LEVELS],
    pub multires_alpha: f64,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub bn_before_act: bool,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        use BlockKind::*;
        ModelSpec {
            input_height: 256,
            input_width: 256,
            in_channels: 1,
            encoder_filters: [16, 32, 64, 128, 256],
            encoder_kinds: [Co, Co, Identity, Co, MultiRes],
            decoder_kinds: [Co, Co, Identity, Co, MultiRes],
            decoder_divisor: 4,
            bottleneck_filters: 512,
            skip_encoder: [true, true, false, true, true],
            skip_pooled: [false, true, false, true, false],
            multires_alpha: 1.67,
            dropout: 0.5,
            bn_momentum: 0.99,
            bn_eps: 1e-3,
            bn_before_act: false,
            seed: 42,
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_list<T, const N: usize>(key: &str, value: &str, f: impl Fn(&str) -> Option<T>) -> Result<[T; N]> {
    let items: Vec<T> = value
        .split(',')
        .map(|s| f(s.trim()).ok_or_else(|| Error::Config(format!("{key}: cannot parse `{s}`"))))
        .collect::<Result<_>>()?;
    items.try_into().map_err(|_| Error::Config(format!("{key}: expected {N} comma-separated values")))
}

pub(crate) fn parse_bool(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Some(true),
        "0" | "false" | "no" | "off" => Some(false),
        _ => None,
    }
}

pub(crate) fn parse_num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.trim().parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

impl ModelSpec {
    pub fn with_input_size(mut self, height: usize, width: usize) -> Self {
        self.input_height = height;
        self.input_width = width;
        self
    }

    pub fn decoder_filters(&self) -> [usize; LEVELS] {
        self.encoder_filters.map(|f| (f / self.decoder_divisor.max(1)).max(1))
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions { alpha: self.multires_alpha, order: StageOrder::from_bn_before_act(self.bn_before_act) }
    }

    pub fn validate(&self) -> Result<()> {
        let div = 1 << LEVELS;
        if self.input_height == 0 || self.input_width == 0 || self.input_height % div != 0 || self.input_width % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "input size {}×{} must be a positive multiple of {div}",
                self.input_height, self.input_width
            )));
        }
        if self.skip_pooled[0] {
            return Err(Error::InvalidArgument("decoder level 1 has no shallower pooled output to fuse".into()));
        }
        if self.in_channels == 0 || self.bottleneck_filters == 0 || self.encoder_filters.contains(&0) {
            return Err(Error::InvalidArgument("channel and filter counts must be positive".into()));
        }
        if self.decoder_divisor == 0 {
            return Err(Error::InvalidArgument("decoder divisor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || self.bn_eps <= 0.0 {
            return Err(Error::InvalidArgument("batch-norm momentum must be in [0,1) and eps positive".into()));
        }
        Ok(())
    }

    /// `model.*` key/value pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let kinds = |k: &[BlockKind; LEVELS]| k.iter().map(|b| b.name()).collect::<Vec<_>>().join(",");
        let flags = |f: &[bool; LEVELS]| join(&f.map(u8::from));
        vec![
            ("model.input_height".into(), self.input_height.to_string()),
            ("model.input_width".into(), self.input_width.to_string()),
            ("model.in_channels".into(), self.in_channels.to_string()),
            ("model.encoder_filters".into(), join(&self.encoder_filters)),
            ("model.encoder_kinds".into(), kinds(&self.encoder_kinds)),
            ("model.decoder_kinds".into(), kinds(&self.decoder_kinds)),
            ("model.decoder_divisor".into(), self.decoder_divisor.to_string()),
            ("model.bottleneck_filters".into(), self.bottleneck_filters.to_string()),
            ("model.skip_encoder".into(), flags(&self.skip_encoder)),
            ("model.skip_pooled".into(), flags(&self.skip_pooled)),
            ("model.multires_alpha".into(), self.multires_alpha.to_string()),
            ("model.dropout".into(), self.dropout.to_string()),
            ("model.bn_momentum".into(), self.bn_momentum.to_string()),
            ("model.bn_eps".into(), self.bn_eps.to_string()),
            ("model.bn_before_act".into(), self.bn_before_act.to_string()),
            ("model.seed".into(), self.seed.to_string()),
        ]
    }

    /// Applies one `model.*` key. Returns `Ok(false)` for keys outside the
    /// `model.` namespace.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let Some(field) = key.strip_prefix("model.") else { return Ok(false) };
        let kind = |s: &str| BlockKind::parse(s);
        match field {
            "input_height" => self.input_height = parse_num(key, value)?,
            "input_width" => self.input_width = parse_num(key, value)?,
            "input_size" => {
                let s: usize = parse_num(key, value)?;
                self.input_height = s;
                self.input_width = s;
            }
            "in_channels" => self.in_channels = parse_num(key, value)?,
            "encoder_filters" => self.encoder_filters = parse_list(key, value, |s| s.parse().ok())?,
            "encoder_kinds" => self.encoder_kinds = parse_list(key, value, kind)?,
            "decoder_kinds" => self.decoder_kinds = parse_list(key, value, kind)?,
            "decoder_divisor" => self.decoder_divisor = parse_num(key, value)?,
            "bottleneck_filters" => self.bottleneck_filters = parse_num(key, value)?,
            "skip_encoder" => self.skip_encoder = parse_list(key, value, parse_bool)?,
            "skip_pooled" => self.skip_pooled = parse_list(key, value, parse_bool)?,
            "multires_alpha" => self.multires_alpha = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "bn_momentum" => self.bn_momentum = parse_num(key, value)?,
            "bn_eps" => self.bn_eps = parse_num(key, value)?,
            "bn_before_act" => {
                self.bn_before_act = parse_bool(value).ok_or_else(|| Error::Config(format!("{key}: expected a boolean")))?
            }
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(true)
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut spec = ModelSpec::default();
        for (k, v) in pairs {
            if !spec.set(k, v)? {
                return Err(Error::Config(format!("unexpected key `{k}` in model spec")));
            }
        }
        Ok(spec)
    }

    /// Channel counts of the encoder outputs O_E^1..O_E^5.
    pub fn encoder_channels(&self) -> [usize; LEVELS] {
        let mut out = [0; LEVELS];
        for i in 0..LEVELS {
            out[i] = Block::out_channels_formula(self.encoder_kinds[i], self.encoder_filters[i], self.multires_alpha);
        }
        out
    }

    fn skip_channels(&self, level: usize, enc: &[usize; LEVELS]) -> Vec<usize> {
        let mut v = Vec::new();
        if self.skip_encoder[level] {
            v.push(enc[level]);
        }
        if self.skip_pooled[level] {
            v.push(enc[level - 1]);
        }
        v
    }

    /// Closed-form trainable parameter count, independent of any built model.
    pub fn param_count_formula(&self) -> usize {
        let alpha = self.multires_alpha;
        let enc = self.encoder_channels();
        let mut total = 0;
        let mut cin = self.in_channels;
        for i in 0..LEVELS {
            total += Block::param_count_formula(self.encoder_kinds[i], cin, self.encoder_filters[i], alpha);
            cin = enc[i];
        }
        total += conv_param_count(cin, self.bottleneck_filters, 3)
            + conv_param_count(self.bottleneck_filters, self.bottleneck_filters, 3);
        let dec_f = self.decoder_filters();
        let mut deeper = self.bottleneck_filters;
        for i in (0..LEVELS).rev() {
            let skips = self.skip_channels(i, &enc);
            total += DecoderBlockParams::param_count_formula(deeper, &skips, self.decoder_kinds[i], dec_f[i], alpha);
            deeper = Block::out_channels_formula(self.decoder_kinds[i], dec_f[i], alpha);
        }
        total + conv_param_count(deeper, 1, 1)
    }
}

#[derive(Clone, Debug)]
struct Layout {
    encoders: Vec<Block>,
    bottleneck: [ConvParams; 2],
    /// Index 0 is D1.
    decoders: Vec<DecoderBlockParams>,
    head: ConvParams,
}

/// Result of an instrumented forward pass.
pub struct ForwardOutput<T> {
    pub output: Tensor<T>,
    pub trace: Vec<TraceEntry>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    store: ParamStore<T>,
    layout: Layout,
}

impl<T: Scalar> Model<T> {
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(spec.seed);
        let opts = spec.block_options();

        let mut encoders = Vec::with_capacity(LEVELS);
        let mut cin = spec.in_channels;
        for i in 0..LEVELS {
            let b = Block::new(spec.encoder_kinds[i], &mut init, &mut store, &format!("enc{}", i + 1), cin, spec.encoder_filters[i], opts)?;
            cin = b.out_channels();
            encoders.push(b);
        }
        let bf = spec.bottleneck_filters;
        let bottleneck = [
            init.conv(&mut store, "bottleneck.conv1", cin, bf, 3),
            init.conv(&mut store, "bottleneck.conv2", bf, bf, 3),
        ];

        let enc_ch: Vec<usize> = encoders.iter().map(|b| b.out_channels()).collect();
        let dec_f = spec.decoder_filters();
        let mut decoders: Vec<Option<DecoderBlockParams>> = vec![None; LEVELS];
        let mut deeper = bf;
        for i in (0..LEVELS).rev() {
            let mut skips = Vec::new();
            if spec.skip_encoder[i] {
                skips.push(enc_ch[i]);
            }
            if spec.skip_pooled[i] {
                skips.push(enc_ch[i - 1]);
            }
            let d = DecoderBlockParams::new(
                &mut init,
                &mut store,
                &format!("dec{}", i + 1),
                deeper,
                &skips,
                spec.decoder_kinds[i],
                dec_f[i],
                opts,
            )?;
            deeper = d.out_channels();
            decoders[i] = Some(d);
        }
        let head = init.conv(&mut store, "head", deeper, 1, 1);
        let decoders = decoders.into_iter().map(|d| d.expect("every level built")).collect();
        Ok(Model { spec, store, layout: Layout { encoders, bottleneck, decoders, head } })
    }

    /// Same network with parameters converted to another scalar type.
    pub fn cast<S: Scalar>(&self) -> Model<S> {
        Model { spec: self.spec.clone(), store: self.store.cast(), layout: self.layout.clone() }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn bn_config(&self) -> BnConfig {
        BnConfig { momentum: self.spec.bn_momentum, eps: self.spec.bn_eps }
    }

    /// Opens a forward context over this model's parameters.
    pub fn context<'a>(&'a self, tape: &'a mut Tape<T>, mode: Mode, dropout_seed: u64) -> Context<'a, T> {
        Context::new(tape, &self.store, mode, self.bn_config(), dropout_seed)
    }

    /// Records the network on `ctx.tape`. Trace labels: `E<i>` (O_E^i),
    /// `ME<i>` (O_ME^i), `E6` (bottleneck), `D<i>` (O_D^i), `out`.
    pub fn forward(&self, ctx: &mut Context<'_, T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = ctx.tape.shape(x).nchw_dims("model")?;
        if c != self.spec.in_channels || h != self.spec.input_height || w != self.spec.input_width {
            return Err(Error::shape(
                "model",
                format!(
                    "input {:?} does not match spec N×{}×{}×{}",
                    ctx.tape.shape(x),
                    self.spec.in_channels,
                    self.spec.input_height,
                    self.spec.input_width
                ),
            ));
        }
        let mut encoded = Vec::with_capacity(LEVELS);
        let mut pooled = Vec::with_capacity(LEVELS);
        let mut cur = x;
        for (i, block) in self.layout.encoders.iter().enumerate() {
            let mut e = block.forward(ctx, cur)?;
            if i == LEVELS - 1 {
                e = ctx.dropout(e, self.spec.dropout)?;
            }
            ctx.record(format!("E{}", i + 1), e);
            let p = ctx.tape.maxpool2d(e)?;
            ctx.record(format!("ME{}", i + 1), p);
            encoded.push(e);
            pooled.push(p);
            cur = p;
        }
        for conv in &self.layout.bottleneck {
            let c = ctx.conv(cur, conv)?;
            let a = ctx.relu(c);
            cur = ctx.dropout(a, self.spec.dropout)?;
        }
        ctx.record("E6", cur);

        for i in (0..LEVELS).rev() {
            let enc = self.spec.skip_encoder[i].then(|| encoded[i]);
            let pool = self.spec.skip_pooled[i].then(|| pooled[i - 1]);
            cur = self.layout.decoders[i].forward(ctx, cur, enc, pool)?;
            ctx.record(format!("D{}", i + 1), cur);
        }
        let logits = ctx.conv(cur, &self.layout.head)?;
        let out = ctx.tape.sigmoid(logits);
        ctx.record("out", out);
        Ok(out)
    }

    /// Eval-mode prediction with the shape trace.
    pub fn infer(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let mut ctx = self.context(&mut tape, Mode::Eval, 0);
        let xv = ctx.tape.constant(x.clone());
        let y = self.forward(&mut ctx, xv)?;
        let trace = ctx.take_trace();
        drop(ctx);
        let output = tape.value(y).clone();
        Ok(ForwardOutput { output, trace })
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer(x)?.output)
    }

    /// Per-parameter table: name, shape, trainable scalars.
    pub fn layer_table(&self) -> String {
        let mut s = String::new();
        let width = self.store.entries().iter().map(|e| e.name.len()).max().unwrap_or(4).max(4);
        let _ = writeln!(s, "{:<width$}  {:<20}  {:>10}", "name", "shape", "params");
        for e in self.store.entries() {
            let count = if e.trainable { e.value.numel().to_string() } else { "(buffer)".to_string() };
            let _ = writeln!(s, "{:<width$}  {:<20}  {:>10}", e.name, e.value.shape().to_string(), count);
        }
        s
    }

    /// Trainable parameters grouped by their top-level prefix (`enc1`, ...).
    pub fn param_breakdown(&self) -> BTreeMap<String, usize> {
        let mut map = BTreeMap::new();
        for e in self.store.entries().iter().filter(|e| e.trainable) {
            let top = e.name.split('.').next().unwrap_or("").to_string();
            *map.entry(top).or_insert(0) += e.value.numel();
        }
        map
    }
}

/// Dice loss of the whole network as a function of its trainable
/// parameters, for gradient checking. Inputs follow [`DiceLossProbe::inputs`].
pub struct DiceLossProbe<'m, T> {
    pub model: &'m Model<T>,
    pub image: Tensor<T>,
    pub target: Tensor<T>,
    pub mode: Mode,
    pub dropout_seed: u64,
    pub smooth: f64,
}

impl<T: Scalar> DiceLossProbe<'_, T> {
    /// Trainable parameter values in store order.
    pub fn inputs(&self) -> Vec<Tensor<T>> {
        self.model.store.entries().iter().filter(|e| e.trainable).map(|e| e.value.clone()).collect()
    }

    /// Store name of each input.
    pub fn input_names(&self) -> Vec<&str> {
        self.model.store.entries().iter().filter(|e| e.trainable).map(|e| e.name.as_str()).collect()
    }
}

impl<T: Scalar> Probe for DiceLossProbe<'_, T> {
    fn eval<S: Scalar>(&self, tape: &mut Tape<S>, inputs: &[Var]) -> Result<Var> {
        let model = self.model.cast::<S>();
        let mut given = inputs.iter().copied();
        let mut vars = Vec::with_capacity(model.store.len());
        for e in model.store.entries() {
            let v = if e.trainable { given.next() } else { Some(tape.constant(e.value.clone())) };
            vars.push(v.ok_or_else(|| Error::InvalidArgument("too few probe inputs".into()))?);
        }
        if given.next().is_some() {
            return Err(Error::InvalidArgument("too many probe inputs".into()));
        }
        let mut ctx = model.context(tape, self.mode, self.dropout_seed);
        ctx.bind_all(&vars)?;
        let x = ctx.tape.constant(self.image.cast());
        let y = model.forward(&mut ctx, x)?;
        ctx.tape.dice_loss(y, &self.target.cast(), self.smooth)
    }
}
